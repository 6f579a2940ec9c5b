#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace proutt::llm {

enum class Role { system, user, assistant };
std::string_view to_string(Role r);
Role role_from_string(std::string_view s);

struct ChatMessage {
  Role role = Role::user;
  std::string content;

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct ChatRequest {
  std::string model_id;
  std::vector<ChatMessage> messages;
  double temperature = 0.8;
  double top_p = 1.0;
  int max_tokens = 1024;
  /// Semantic label ("path_reason.exploit"); logged, never hashed.
  std::string request_tag;
};

enum class FinishReason { stop, length, error };
std::string_view to_string(FinishReason f);
FinishReason finish_reason_from_string(std::string_view s);

struct Usage {
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
};

struct ChatResponse {
  std::string content;
  FinishReason finish_reason = FinishReason::stop;
  Usage usage;
};

/// Per-role model selection and sampling parameters.
struct ModelParams {
  std::string model_id;
  double temperature = 0.8;
  double top_p = 1.0;
  int max_tokens = 1024;

  ChatRequest request(std::vector<ChatMessage> messages, std::string tag) const;
};

using Vector = std::vector<double>;

/// Anything that turns texts into unit-length vectors.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<Vector> embed(const std::vector<std::string>& texts) = 0;
};

double cosine(const Vector& a, const Vector& b);
void normalize_in_place(Vector& v);

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

struct HttpRequest {
  std::string path;  ///< appended to the base URL path, e.g. "/chat/completions"
  std::string body;
  std::vector<std::pair<std::string, std::string>> headers;
  int timeout_ms = 60000;
};

enum class TransportStatus { ok, timeout, connection_error };

struct HttpResponse {
  TransportStatus transport = TransportStatus::ok;
  int status = 0;
  std::string body;
};

/// One blocking HTTP POST. Implementations must be safe for concurrent use.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post(const HttpRequest& request) = 0;
};

/// cpp-httplib backed transport for http:// and https:// base URLs.
std::shared_ptr<Transport> make_http_transport(const std::string& base_url);

// ---------------------------------------------------------------------------
// Cassette
// ---------------------------------------------------------------------------

/// Append-only JSONL store of request hash -> response.
class Cassette {
 public:
  /// Loads `path` if it exists. `writable` opens it for appends.
  Cassette(std::filesystem::path path, bool writable);

  std::optional<nlohmann::json> find(const std::string& hash) const;
  /// Appends unless the hash is already present. Returns false on duplicates.
  bool append(const std::string& hash, const std::string& model, const nlohmann::json& request,
              const nlohmann::json& response);
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  bool writable_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, nlohmann::json> entries_;
};

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

enum class Mode { live, record, replay };
std::string_view to_string(Mode m);
Mode mode_from_string(std::string_view s);

struct RetryPolicy {
  int max_attempts = 4;
  int backoff_base_ms = 500;
};

struct GatewayConfig {
  std::string base_url = "https://api.openai.com/v1";
  std::string auth_env_var = "PROUTT_API_KEY";
  Mode mode = Mode::live;
  std::optional<std::filesystem::path> cassette_path;
  int max_in_flight = 8;
  RetryPolicy retry;
  int timeout_ms = 120000;

  /// Applies PROUTT_BASE_URL when set.
  void apply_environment();
};

/// Canonical JSON of a chat request: sorted keys, compact, request_tag omitted.
nlohmann::json canonical_request_json(const ChatRequest& request);
std::string canonical_hash(const ChatRequest& request);
std::string sha256_hex(std::string_view data);

struct GatewayStats {
  std::int64_t chat_calls = 0;
  std::int64_t embed_calls = 0;
  std::int64_t network_calls = 0;
  std::int64_t cassette_hits = 0;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  int max_in_flight_observed = 0;
};

/// Chat and embedding access shared by every pipeline stage.
///
/// live: HTTP with retry on 429/5xx/timeouts. record: like live, but every
/// response is appended to the cassette and repeated requests are served from
/// it. replay: cassette only; the transport is never touched.
///
/// Thread-safe. At most `max_in_flight` calls are outstanding at once; callers
/// block for a slot.
class Gateway {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;
  using Observer = std::function<void(const ChatRequest&, const ChatResponse&)>;

  explicit Gateway(GatewayConfig config, std::shared_ptr<Transport> transport = nullptr);

  ChatResponse chat(const ChatRequest& request);

  /// One unit vector per text, order preserved.
  std::vector<Vector> embed(const std::vector<std::string>& texts, const std::string& model_id);

  /// Embedder bound to one model id.
  std::unique_ptr<Embedder> embedder(std::string model_id);

  void set_sleeper(Sleeper sleeper) { sleeper_ = std::move(sleeper); }
  /// Called after every successful chat, including cassette hits.
  void set_observer(Observer observer);

  GatewayStats stats() const;
  const GatewayConfig& config() const { return config_; }

 private:
  class Slot;

  Transport& transport();
  HttpResponse post_with_retry(const HttpRequest& request, std::string_view tag);
  ChatResponse chat_network(const ChatRequest& request);
  Vector embed_network(const std::string& text, const std::string& model_id);
  void account(const ChatResponse& response);

  GatewayConfig config_;
  std::shared_ptr<Transport> transport_;
  std::mutex transport_mu_;
  std::unique_ptr<Cassette> cassette_;
  std::string auth_token_;
  Sleeper sleeper_;
  Observer observer_;
  std::mutex observer_mu_;

  std::mutex slot_mu_;
  std::condition_variable slot_cv_;
  int in_flight_ = 0;

  std::atomic<std::int64_t> chat_calls_{0};
  std::atomic<std::int64_t> embed_calls_{0};
  std::atomic<std::int64_t> network_calls_{0};
  std::atomic<std::int64_t> cassette_hits_{0};
  std::atomic<std::int64_t> prompt_tokens_{0};
  std::atomic<std::int64_t> completion_tokens_{0};
  std::atomic<int> max_in_flight_observed_{0};
};

nlohmann::json to_json(const ChatResponse& r);
ChatResponse chat_response_from_json(const nlohmann::json& j);

}  // namespace proutt::llm
