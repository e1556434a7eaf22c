#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include "frace/bundle.hpp"
#include "frace/explainer.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace frace {

struct ExplainRequest {
  std::optional<std::int64_t> sample_id;
  std::optional<std::string> image_payload;  // base64 image bytes
  std::int64_t counter_class = 0;
  std::optional<double> overlay_threshold;

  /// Throws ValidationError unless exactly one image source is present,
  /// the counter class is in [0, num_classes) and the sample id (if any)
  /// is in [0, num_samples).
  static ExplainRequest parse(const nlohmann::json& body, std::int64_t num_classes,
                              std::int64_t num_samples);
};

struct ExplainResponse {
  std::int64_t predicted_class = 0;
  std::int64_t counter_class = 0;
  double prob_counter_before = 0.0;
  double prob_counter_after = 0.0;
  std::string overlay_png;         // base64
  std::string counterfactual_png;  // base64
  double latency_ms = 0.0;
};

void to_json(nlohmann::json& j, const ExplainResponse& r);
void from_json(const nlohmann::json& j, ExplainResponse& r);

struct HttpReply {
  int status = 200;
  nlohmann::json body;
};

/// Request handling over one immutable bundle, independent of transport.
/// All handlers are safe to call concurrently.
class ExplainService {
 public:
  explicit ExplainService(std::shared_ptr<const ModelBundle> bundle, OverlaySpec overlay = {});

  HttpReply health() const;
  HttpReply classes() const;
  HttpReply samples(const std::optional<std::string>& cls, const std::optional<std::string>& n) const;
  HttpReply explain(const std::string& body) const;

  /// Generator plus classifier forward passes executed so far.
  std::int64_t inference_calls() const;
  const ModelBundle& bundle() const { return *bundle_; }

 private:
  std::shared_ptr<const ModelBundle> bundle_;
  OverlaySpec overlay_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  int max_inflight = 8;
};

/// HTTP front end: GET /health, GET /classes, GET /samples, POST /explain.
/// Requests beyond max_inflight concurrent /explain calls get 503.
class ServiceHost {
 public:
  ServiceHost(std::shared_ptr<ExplainService> service, ServeOptions options);
  ~ServiceHost();

  /// Binds the socket and returns the bound port.
  int bind();
  /// Blocks serving until stop() is called.
  void listen();
  /// bind() then listen() on a background thread.
  int start_background();
  void stop();

 private:
  std::shared_ptr<ExplainService> service_;
  ServeOptions options_;
  std::unique_ptr<httplib::Server> server_;
  std::atomic<int> inflight_{0};
  std::thread thread_;
};

/// Loads the bundle (refusing mismatched members) and serves until killed.
void serve(const std::filesystem::path& bundle_path, const ServeOptions& options);

}  // namespace frace
