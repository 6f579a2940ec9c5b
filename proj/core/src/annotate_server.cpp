#include <atomic>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "proutt/annotate.hpp"
#include "proutt/error.hpp"

namespace proutt::annotate {

using nlohmann::json;

struct Server::Impl {
  Store& store;
  httplib::Server http;

  explicit Impl(Store& s) : store(s) {}
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const std::string& kind, const std::string& message) {
  send_json(res, http_status(kind), {{"error", kind}, {"message", message}});
}

// Runs a handler and turns failures into JSON error responses.
template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, e.kind(), e.what());
    } catch (const json::exception& e) {
      send_error(res, "bad-request", std::string("invalid request body: ") + e.what());
    } catch (const std::exception& e) {
      spdlog::error("annotate handler failed: {}", e.what());
      send_error(res, "internal", "internal error");
    }
  };
}

json body_of(const httplib::Request& req) {
  json j = json::parse(req.body);
  if (!j.is_object()) throw UsageError("bad-request", "request body must be a JSON object");
  return j;
}

std::string required_string(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string())
    throw UsageError("bad-request", std::string("missing string field '") + key + "'");
  return j.at(key).get<std::string>();
}

}  // namespace

Server::Server(Store& store, std::optional<std::filesystem::path> static_dir)
    : impl_(std::make_unique<Impl>(store)) {
  auto& http = impl_->http;
  Store& st = store;

  http.Post("/batches", guarded([&st](const httplib::Request& req, httplib::Response& res) {
              const json j = body_of(req);
              const std::string pairs_path = required_string(j, "pairs_path");
              if (!j.contains("annotators") || !j.at("annotators").is_array())
                throw UsageError("bad-request", "missing array field 'annotators'");
              const auto annotators = j.at("annotators").get<std::vector<std::string>>();
              const std::uint64_t seed = j.value("seed", std::uint64_t{0});
              const std::string id = st.create_batch(load_pairs(pairs_path), annotators, seed);
              send_json(res, 200, st.status(id));
            }));

  http.Get("/batches", guarded([&st](const httplib::Request&, httplib::Response& res) {
             json list = json::array();
             for (const auto& id : st.batch_ids()) list.push_back(st.status(id));
             send_json(res, 200, {{"batches", list}});
           }));

  http.Get(R"(/batches/([^/]+))", guarded([&st](const httplib::Request& req, httplib::Response& res) {
             send_json(res, 200, st.status(req.matches[1]));
           }));

  http.Get(R"(/batches/([^/]+)/next)", guarded([&st](const httplib::Request& req, httplib::Response& res) {
             if (!req.has_param("annotator")) throw UsageError("bad-request", "missing query parameter 'annotator'");
             const NextItem n = st.next_item(req.matches[1], req.get_param_value("annotator"));
             json body{{"done", n.done}, {"remaining", n.remaining}};
             if (n.item) body["item"] = client_view(*n.item, n.index);
             send_json(res, 200, body);
           }));

  http.Post(R"(/batches/([^/]+)/judgments)", guarded([&st](const httplib::Request& req, httplib::Response& res) {
              const json j = body_of(req);
              const std::string batch = req.matches[1];
              const Verdict v = verdict_from_string(required_string(j, "verdict"));
              st.submit(batch, required_string(j, "item_id"), required_string(j, "annotator_id"), v);
              send_json(res, 200, {{"accepted", true}, {"state", to_string(st.state(batch))}});
            }));

  http.Get(R"(/batches/([^/]+)/report)", guarded([&st](const httplib::Request& req, httplib::Response& res) {
             std::optional<std::map<std::string, eval::Outcome>> llm;
             if (req.has_param("llm_verdicts")) llm = load_llm_verdicts(req.get_param_value("llm_verdicts"));
             const BatchReport r = st.report(req.matches[1], llm ? &*llm : nullptr);
             send_json(res, 200, to_json(r));
           }));

  if (static_dir && !http.set_mount_point("/", static_dir->string()))
    throw Error("io-error", "static directory " + static_dir->string() + " does not exist");

  http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty())
      send_json(res, res.status, {{"error", res.status == 404 ? "not-found" : "http-error"},
                                  {"message", "no such resource"}});
  });
}

Server::~Server() { stop(); }

int Server::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->http.bind_to_any_port(host);
    if (p < 0) throw Error("bind-failed", "cannot bind " + host);
    return p;
  }
  if (!impl_->http.bind_to_port(host, port))
    throw Error("bind-failed", "cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void Server::listen() { impl_->http.listen_after_bind(); }

void Server::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

}  // namespace proutt::annotate
