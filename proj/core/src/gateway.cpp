#include "proutt/gateway.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <httplib.h>

#include "proutt/error.hpp"

namespace proutt::llm {

using nlohmann::json;

std::string_view to_string(Role r) {
  switch (r) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "user";
}

Role role_from_string(std::string_view s) {
  if (s == "system") return Role::system;
  if (s == "user") return Role::user;
  if (s == "assistant") return Role::assistant;
  throw ParseError("bad-enum", "unknown chat role '" + std::string(s) + "'");
}

std::string_view to_string(FinishReason f) {
  switch (f) {
    case FinishReason::stop: return "stop";
    case FinishReason::length: return "length";
    case FinishReason::error: return "error";
  }
  return "error";
}

FinishReason finish_reason_from_string(std::string_view s) {
  if (s == "stop") return FinishReason::stop;
  if (s == "length") return FinishReason::length;
  return FinishReason::error;
}

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::live: return "live";
    case Mode::record: return "record";
    case Mode::replay: return "replay";
  }
  return "live";
}

Mode mode_from_string(std::string_view s) {
  if (s == "live") return Mode::live;
  if (s == "record") return Mode::record;
  if (s == "replay") return Mode::replay;
  throw UsageError("bad-enum", "unknown gateway mode '" + std::string(s) + "'");
}

ChatRequest ModelParams::request(std::vector<ChatMessage> messages, std::string tag) const {
  ChatRequest r;
  r.model_id = model_id;
  r.messages = std::move(messages);
  r.temperature = temperature;
  r.top_p = top_p;
  r.max_tokens = max_tokens;
  r.request_tag = std::move(tag);
  return r;
}

double cosine(const Vector& a, const Vector& b) {
  if (a.size() != b.size() || a.empty())
    throw GatewayError("bad-response", "embedding dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

void normalize_in_place(Vector& v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n == 0) throw GatewayError("bad-response", "zero-length embedding vector");
  for (double& x : v) x /= n;
}

void GatewayConfig::apply_environment() {
  if (const char* url = std::getenv("PROUTT_BASE_URL"); url && *url) base_url = url;
}

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("crypto", "SHA-256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

json canonical_request_json(const ChatRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages)
    messages.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  // nlohmann::json objects keep keys sorted, so dump() is canonical.
  return json{{"model", request.model_id},
              {"messages", std::move(messages)},
              {"temperature", request.temperature},
              {"top_p", request.top_p},
              {"max_tokens", request.max_tokens}};
}

std::string canonical_hash(const ChatRequest& request) {
  return sha256_hex(canonical_request_json(request).dump());
}

json to_json(const ChatResponse& r) {
  return json{{"content", r.content},
              {"finish_reason", to_string(r.finish_reason)},
              {"usage",
               {{"prompt_tokens", r.usage.prompt_tokens},
                {"completion_tokens", r.usage.completion_tokens}}}};
}

ChatResponse chat_response_from_json(const json& j) {
  ChatResponse r;
  r.content = j.at("content").is_null() ? std::string() : j.at("content").get<std::string>();
  r.finish_reason = finish_reason_from_string(j.value("finish_reason", std::string("stop")));
  if (j.contains("usage")) {
    r.usage.prompt_tokens = j["usage"].value("prompt_tokens", std::int64_t{0});
    r.usage.completion_tokens = j["usage"].value("completion_tokens", std::int64_t{0});
  }
  return r;
}

// ---------------------------------------------------------------------------
// HTTP transport
// ---------------------------------------------------------------------------

namespace {

class HttpTransport final : public Transport {
 public:
  explicit HttpTransport(const std::string& base_url) {
    const auto scheme_end = base_url.find("://");
    if (scheme_end == std::string::npos)
      throw UsageError("bad-url", "base URL needs a scheme: " + base_url);
    const auto path_start = base_url.find('/', scheme_end + 3);
    origin_ = base_url.substr(0, path_start);
    if (path_start != std::string::npos) prefix_ = base_url.substr(path_start);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  HttpResponse post(const HttpRequest& request) override {
    httplib::Client client(origin_);
    const auto timeout = std::chrono::milliseconds(request.timeout_ms);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(timeout).count(), 0);
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(timeout).count(), 0);
    client.set_write_timeout(std::chrono::duration_cast<std::chrono::seconds>(timeout).count(), 0);
    httplib::Headers headers;
    for (const auto& [k, v] : request.headers) headers.emplace(k, v);
    auto res = client.Post(prefix_ + request.path, headers, request.body, "application/json");
    HttpResponse out;
    if (!res) {
      const auto err = res.error();
      out.transport = (err == httplib::Error::Read || err == httplib::Error::Write ||
                       err == httplib::Error::ConnectionTimeout)
                          ? TransportStatus::timeout
                          : TransportStatus::connection_error;
      out.body = httplib::to_string(err);
      return out;
    }
    out.status = res->status;
    out.body = res->body;
    return out;
  }

 private:
  std::string origin_;
  std::string prefix_;
};

}  // namespace

std::shared_ptr<Transport> make_http_transport(const std::string& base_url) {
  return std::make_shared<HttpTransport>(base_url);
}

// ---------------------------------------------------------------------------
// Cassette
// ---------------------------------------------------------------------------

Cassette::Cassette(std::filesystem::path path, bool writable)
    : path_(std::move(path)), writable_(writable) {
  std::ifstream in(path_);
  if (!in) {
    if (!writable_) throw GatewayError("cassette-missing", "cassette not found: " + path_.string());
    return;
  }
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      std::string hash = j.at("hash").get<std::string>();
      entries_.emplace(std::move(hash), std::move(j));
    } catch (const json::exception& e) {
      throw GatewayError("cassette-corrupt",
                         path_.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::optional<json> Cassette::find(const std::string& hash) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find(hash);
  if (it == entries_.end()) return std::nullopt;
  return std::optional<json>(std::in_place, it->second);
}

bool Cassette::append(const std::string& hash, const std::string& model, const json& request,
                      const json& response) {
  if (!writable_) throw GatewayError("cassette-readonly", "cassette opened read-only");
  std::lock_guard lock(mu_);
  if (entries_.count(hash)) return false;
  json rec{{"hash", hash}, {"model", model}, {"request", request}, {"response", response}};
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  if (!out) throw GatewayError("io", "cannot append to cassette " + path_.string());
  out << rec.dump() << '\n';
  out.flush();
  entries_.emplace(hash, std::move(rec));
  return true;
}

std::size_t Cassette::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

class Gateway::Slot {
 public:
  explicit Slot(Gateway& g) : g_(g) {
    std::unique_lock lock(g_.slot_mu_);
    g_.slot_cv_.wait(lock, [&] { return g_.in_flight_ < g_.config_.max_in_flight; });
    ++g_.in_flight_;
    int seen = g_.max_in_flight_observed_.load();
    while (g_.in_flight_ > seen && !g_.max_in_flight_observed_.compare_exchange_weak(seen, g_.in_flight_)) {
    }
  }
  ~Slot() {
    {
      std::lock_guard lock(g_.slot_mu_);
      --g_.in_flight_;
    }
    g_.slot_cv_.notify_one();
  }
  Slot(const Slot&) = delete;
  Slot& operator=(const Slot&) = delete;

 private:
  Gateway& g_;
};

Gateway::Gateway(GatewayConfig config, std::shared_ptr<Transport> transport)
    : config_(std::move(config)), transport_(std::move(transport)) {
  if (config_.max_in_flight < 1) throw UsageError("bad-config", "max_in_flight must be >= 1");
  if (config_.retry.max_attempts < 1) throw UsageError("bad-config", "retry.max_attempts must be >= 1");
  if (config_.mode != Mode::live) {
    if (!config_.cassette_path)
      throw UsageError("bad-config", "cassette path required in " + std::string(to_string(config_.mode)) + " mode");
    cassette_ = std::make_unique<Cassette>(*config_.cassette_path, config_.mode == Mode::record);
  }
  if (config_.mode != Mode::replay) {
    if (const char* tok = std::getenv(config_.auth_env_var.c_str()); tok && *tok) auth_token_ = tok;
    else spdlog::warn("{} is not set; requests are sent without an Authorization header",
                      config_.auth_env_var);
  }
  sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

void Gateway::set_observer(Observer observer) {
  std::lock_guard lock(observer_mu_);
  observer_ = std::move(observer);
}

Transport& Gateway::transport() {
  std::lock_guard lock(transport_mu_);
  if (!transport_) transport_ = make_http_transport(config_.base_url);
  return *transport_;
}

HttpResponse Gateway::post_with_retry(const HttpRequest& request, std::string_view tag) {
  std::string last_problem;
  bool last_was_timeout = false;
  for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
    ++network_calls_;
    HttpResponse res = transport().post(request);
    if (res.transport == TransportStatus::ok) {
      if (res.status >= 200 && res.status < 300) return res;
      if (res.status == 401 || res.status == 403)
        throw GatewayError("auth-failure", "HTTP " + std::to_string(res.status) + " for " + std::string(tag));
      if (res.status != 429 && res.status < 500)
        throw GatewayError("http-error", "HTTP " + std::to_string(res.status) + " for " +
                                             std::string(tag) + ": " + res.body.substr(0, 500));
      last_problem = "HTTP " + std::to_string(res.status);
      last_was_timeout = false;
    } else {
      last_was_timeout = res.transport == TransportStatus::timeout;
      last_problem = res.body.empty() ? "transport failure" : res.body;
    }
    if (attempt < config_.retry.max_attempts) {
      const auto delay = std::chrono::milliseconds(
          static_cast<std::int64_t>(config_.retry.backoff_base_ms) << (attempt - 1));
      spdlog::debug("{}: {} (attempt {}), retrying in {} ms", tag, last_problem, attempt, delay.count());
      sleeper_(delay);
    }
  }
  if (last_was_timeout)
    throw GatewayError("timeout", std::string(tag) + ": timed out after " +
                                      std::to_string(config_.retry.max_attempts) + " attempt(s)");
  throw GatewayError("exhausted-retries", std::string(tag) + ": " + last_problem + " after " +
                                              std::to_string(config_.retry.max_attempts) + " attempt(s)");
}

ChatResponse Gateway::chat_network(const ChatRequest& request) {
  json body = canonical_request_json(request);
  HttpRequest http;
  http.path = "/chat/completions";
  http.body = body.dump();
  http.timeout_ms = config_.timeout_ms;
  http.headers.emplace_back("Content-Type", "application/json");
  http.headers.emplace_back("X-Request-Tag", request.request_tag);
  if (!auth_token_.empty()) http.headers.emplace_back("Authorization", "Bearer " + auth_token_);
  HttpResponse res = post_with_retry(http, request.request_tag);
  try {
    const json j = json::parse(res.body);
    const auto& choice = j.at("choices").at(0);
    ChatResponse out;
    const auto& content = choice.at("message").at("content");
    if (!content.is_null()) out.content = content.get<std::string>();
    const std::string finish = choice.value("finish_reason", std::string("stop"));
    out.finish_reason = finish_reason_from_string(finish);
    if (j.contains("usage") && j["usage"].is_object()) {
      out.usage.prompt_tokens = j["usage"].value("prompt_tokens", std::int64_t{0});
      out.usage.completion_tokens = j["usage"].value("completion_tokens", std::int64_t{0});
    }
    if (out.finish_reason == FinishReason::stop && content.is_null())
      throw GatewayError("bad-response", request.request_tag + ": stop without content");
    return out;
  } catch (const json::exception& e) {
    throw GatewayError("bad-response", request.request_tag + ": " + e.what());
  }
}

void Gateway::account(const ChatResponse& response) {
  prompt_tokens_ += response.usage.prompt_tokens;
  completion_tokens_ += response.usage.completion_tokens;
}

ChatResponse Gateway::chat(const ChatRequest& request) {
  if (request.messages.empty()) throw UsageError("bad-request", "chat request without messages");
  if (request.messages.front().role == Role::assistant)
    throw UsageError("bad-request", "first message must be system or user");
  Slot slot(*this);
  ++chat_calls_;

  ChatResponse response;
  if (config_.mode == Mode::live) {
    response = chat_network(request);
  } else {
    const std::string hash = canonical_hash(request);
    if (auto hit = cassette_->find(hash)) {
      ++cassette_hits_;
      response = chat_response_from_json(hit->at("response"));
    } else if (config_.mode == Mode::replay) {
      throw GatewayError("cassette-miss", "no cassette entry for request '" + request.request_tag +
                                              "' (hash " + hash + ")");
    } else {
      response = chat_network(request);
      cassette_->append(hash, request.model_id, canonical_request_json(request), to_json(response));
    }
  }
  account(response);

  Observer obs;
  {
    std::lock_guard lock(observer_mu_);
    obs = observer_;
  }
  if (obs) obs(request, response);
  return response;
}

Vector Gateway::embed_network(const std::string& text, const std::string& model_id) {
  HttpRequest http;
  http.path = "/embeddings";
  http.body = json{{"model", model_id}, {"input", json::array({text})}}.dump();
  http.timeout_ms = config_.timeout_ms;
  http.headers.emplace_back("Content-Type", "application/json");
  http.headers.emplace_back("X-Request-Tag", "embed");
  if (!auth_token_.empty()) http.headers.emplace_back("Authorization", "Bearer " + auth_token_);
  HttpResponse res = post_with_retry(http, "embed");
  try {
    const json j = json::parse(res.body);
    return j.at("data").at(0).at("embedding").get<Vector>();
  } catch (const json::exception& e) {
    throw GatewayError("bad-response", std::string("embed: ") + e.what());
  }
}

std::vector<Vector> Gateway::embed(const std::vector<std::string>& texts, const std::string& model_id) {
  if (texts.empty()) throw UsageError("bad-request", "embed called with no texts");
  std::vector<Vector> out;
  out.reserve(texts.size());
  for (const auto& text : texts) {
    Slot slot(*this);
    ++embed_calls_;
    const json request{{"kind", "embedding"}, {"model", model_id}, {"input", text}};
    Vector v;
    if (config_.mode == Mode::live) {
      v = embed_network(text, model_id);
    } else {
      const std::string hash = sha256_hex(request.dump());
      if (auto hit = cassette_->find(hash)) {
        ++cassette_hits_;
        v = hit->at("response").at("embedding").get<Vector>();
      } else if (config_.mode == Mode::replay) {
        throw GatewayError("cassette-miss", "no cassette entry for request 'embed' (hash " + hash + ")");
      } else {
        v = embed_network(text, model_id);
        cassette_->append(hash, model_id, request, json{{"embedding", v}});
      }
    }
    normalize_in_place(v);
    out.push_back(std::move(v));
  }
  return out;
}

namespace {
class GatewayEmbedder final : public Embedder {
 public:
  GatewayEmbedder(Gateway& g, std::string model) : g_(g), model_(std::move(model)) {}
  std::vector<Vector> embed(const std::vector<std::string>& texts) override {
    return g_.embed(texts, model_);
  }

 private:
  Gateway& g_;
  std::string model_;
};
}  // namespace

std::unique_ptr<Embedder> Gateway::embedder(std::string model_id) {
  return std::make_unique<GatewayEmbedder>(*this, std::move(model_id));
}

GatewayStats Gateway::stats() const {
  GatewayStats s;
  s.chat_calls = chat_calls_;
  s.embed_calls = embed_calls_;
  s.network_calls = network_calls_;
  s.cassette_hits = cassette_hits_;
  s.prompt_tokens = prompt_tokens_;
  s.completion_tokens = completion_tokens_;
  s.max_in_flight_observed = max_in_flight_observed_;
  return s;
}

}  // namespace proutt::llm
