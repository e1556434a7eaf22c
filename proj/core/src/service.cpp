#include "frace/service.hpp"

#include <iostream>

#include "frace/errors.hpp"
#include "frace/image_io.hpp"
#include "httplib.h"

namespace frace {

ExplainRequest ExplainRequest::parse(const nlohmann::json& body, std::int64_t num_classes,
                                     std::int64_t num_samples) {
  if (!body.is_object()) throw ValidationError("request body must be a JSON object");
  ExplainRequest r;
  const bool has_sample = body.contains("sample_id");
  const bool has_image = body.contains("image_payload");
  if (has_sample == has_image) {
    throw ValidationError("exactly one of sample_id or image_payload is required");
  }
  if (has_sample) {
    if (!body["sample_id"].is_number_integer()) throw ValidationError("sample_id must be an integer");
    r.sample_id = body["sample_id"].get<std::int64_t>();
    if (*r.sample_id < 0 || *r.sample_id >= num_samples) {
      throw ValidationError("sample_id " + std::to_string(*r.sample_id) + " outside [0, " +
                            std::to_string(num_samples) + ")");
    }
  } else {
    if (!body["image_payload"].is_string()) throw ValidationError("image_payload must be a string");
    r.image_payload = body["image_payload"].get<std::string>();
  }
  if (!body.contains("counter_class") || !body["counter_class"].is_number_integer()) {
    throw ValidationError("counter_class must be an integer");
  }
  r.counter_class = body["counter_class"].get<std::int64_t>();
  if (r.counter_class < 0 || r.counter_class >= num_classes) {
    throw ValidationError("counter_class " + std::to_string(r.counter_class) + " outside [0, " +
                          std::to_string(num_classes) + ")");
  }
  if (body.contains("overlay_threshold") && !body["overlay_threshold"].is_null()) {
    if (!body["overlay_threshold"].is_number()) {
      throw ValidationError("overlay_threshold must be a number");
    }
    const auto t = body["overlay_threshold"].get<double>();
    if (!(t >= 0.0 && t < 2.0)) throw ValidationError("overlay_threshold must lie in [0, 2)");
    r.overlay_threshold = t;
  }
  return r;
}

void to_json(nlohmann::json& j, const ExplainResponse& r) {
  j = nlohmann::json{{"predicted_class", r.predicted_class},
                     {"counter_class", r.counter_class},
                     {"prob_counter_before", r.prob_counter_before},
                     {"prob_counter_after", r.prob_counter_after},
                     {"overlay_png", r.overlay_png},
                     {"counterfactual_png", r.counterfactual_png},
                     {"latency_ms", r.latency_ms}};
}

void from_json(const nlohmann::json& j, ExplainResponse& r) {
  j.at("predicted_class").get_to(r.predicted_class);
  j.at("counter_class").get_to(r.counter_class);
  j.at("prob_counter_before").get_to(r.prob_counter_before);
  j.at("prob_counter_after").get_to(r.prob_counter_after);
  j.at("overlay_png").get_to(r.overlay_png);
  j.at("counterfactual_png").get_to(r.counterfactual_png);
  j.at("latency_ms").get_to(r.latency_ms);
}

namespace {

HttpReply error_reply(int status, const std::string& reason) {
  return {status, nlohmann::json{{"error", reason}}};
}

std::int64_t sample_count(const ModelBundle& b) {
  return b.sample_images.defined() ? b.sample_images.size(0) : 0;
}

}  // namespace

ExplainService::ExplainService(std::shared_ptr<const ModelBundle> bundle, OverlaySpec overlay)
    : bundle_(std::move(bundle)), overlay_(overlay) {
  if (!bundle_) throw ValidationError("service needs a model bundle");
  bundle_->validate();
  overlay_.validate();
}

HttpReply ExplainService::health() const {
  return {200, {{"status", "ok"}, {"num_classes", bundle_->num_classes}, {"dataset", bundle_->dataset}}};
}

HttpReply ExplainService::classes() const {
  auto names = bundle_->class_names;
  if (names.empty()) {
    for (std::int64_t i = 0; i < bundle_->num_classes; ++i) names.push_back(std::to_string(i));
  }
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < names.size(); ++i) {
    list.push_back({{"index", i}, {"name", names[i]}});
  }
  return {200, {{"classes", list}}};
}

HttpReply ExplainService::samples(const std::optional<std::string>& cls,
                                  const std::optional<std::string>& n) const {
  std::int64_t want_class = -1;
  std::int64_t limit = 8;
  try {
    if (cls) want_class = std::stoll(*cls);
    if (n) limit = std::stoll(*n);
  } catch (const std::exception&) {
    return error_reply(400, "class and n must be integers");
  }
  if (cls && (want_class < 0 || want_class >= bundle_->num_classes)) {
    return error_reply(400, "class outside [0, " + std::to_string(bundle_->num_classes) + ")");
  }
  if (limit < 1 || limit > 256) return error_reply(400, "n must lie in [1, 256]");

  nlohmann::json list = nlohmann::json::array();
  const auto total = sample_count(*bundle_);
  for (std::int64_t i = 0; i < total && static_cast<std::int64_t>(list.size()) < limit; ++i) {
    const auto label = bundle_->sample_labels[i].item<std::int64_t>();
    if (want_class >= 0 && label != want_class) continue;
    list.push_back({{"id", i},
                    {"class", label},
                    {"png", base64_encode(encode_png(to_rgb(bundle_->sample_images[i])))}});
  }
  return {200, {{"samples", list}}};
}

HttpReply ExplainService::explain(const std::string& body) const {
  ExplainRequest request;
  torch::Tensor query;
  try {
    const auto json = nlohmann::json::parse(body);
    request = ExplainRequest::parse(json, bundle_->num_classes, sample_count(*bundle_));
    const auto& shape = bundle_->input_shape;
    if (request.sample_id) {
      query = bundle_->sample_images[*request.sample_id];
    } else {
      query = decode_image(base64_decode(*request.image_payload), shape.channels, shape.height,
                           shape.width);
    }
  } catch (const nlohmann::json::exception& e) {
    return error_reply(400, std::string("malformed JSON: ") + e.what());
  } catch (const Error& e) {
    return error_reply(400, e.what());
  }

  auto spec = overlay_;
  if (request.overlay_threshold) spec.threshold = *request.overlay_threshold;
  const auto e = frace::explain(bundle_->generator, *bundle_->classifier, query, request.counter_class);

  ExplainResponse response;
  response.predicted_class = e.predicted_class.index();
  response.counter_class = e.counter_class.index();
  response.prob_counter_before = e.probs_before[request.counter_class].item<double>();
  response.prob_counter_after = e.probs_after[request.counter_class].item<double>();
  response.overlay_png = base64_encode(encode_png(render_overlay(e, spec)));
  response.counterfactual_png = base64_encode(encode_png(to_rgb(e.counterfactual_image)));
  response.latency_ms = e.latency_ms;
  return {200, response};
}

std::int64_t ExplainService::inference_calls() const {
  return bundle_->classifier->forward_calls() + bundle_->generator->forward_calls();
}

ServiceHost::ServiceHost(std::shared_ptr<ExplainService> service, ServeOptions options)
    : service_(std::move(service)), options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  if (options_.max_inflight < 1) throw ValidationError("max_inflight must be >= 1");
  const auto workers = static_cast<std::size_t>(options_.max_inflight) + 2;
  server_->new_task_queue = [workers] { return new httplib::ThreadPool(workers); };

  auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body.dump(), "application/json");
  };
  auto svc = service_;
  server_->Get("/health", [svc, send](const httplib::Request&, httplib::Response& res) {
    send(res, svc->health());
  });
  server_->Get("/classes", [svc, send](const httplib::Request&, httplib::Response& res) {
    send(res, svc->classes());
  });
  server_->Get("/samples", [svc, send](const httplib::Request& req, httplib::Response& res) {
    std::optional<std::string> cls, n;
    if (req.has_param("class")) cls = req.get_param_value("class");
    if (req.has_param("n")) n = req.get_param_value("n");
    send(res, svc->samples(cls, n));
  });
  server_->Post("/explain", [this, svc, send](const httplib::Request& req, httplib::Response& res) {
    if (inflight_.fetch_add(1) >= options_.max_inflight) {
      inflight_.fetch_sub(1);
      send(res, error_reply(503, "too many requests in flight"));
      return;
    }
    try {
      send(res, svc->explain(req.body));
    } catch (const std::exception& e) {
      send(res, error_reply(500, e.what()));
    }
    inflight_.fetch_sub(1);
  });
  // Lets a browser explorer served from another origin call the API.
  server_->set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  server_->Options(".*", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

ServiceHost::~ServiceHost() { stop(); }

int ServiceHost::bind() {
  if (options_.port == 0) {
    const int port = server_->bind_to_any_port(options_.host);
    if (port < 0) throw Error("cannot bind " + options_.host);
    return port;
  }
  if (!server_->bind_to_port(options_.host, options_.port)) {
    throw Error("cannot bind " + options_.host + ":" + std::to_string(options_.port));
  }
  return options_.port;
}

void ServiceHost::listen() { server_->listen_after_bind(); }

int ServiceHost::start_background() {
  const int port = bind();
  thread_ = std::thread([this] { listen(); });
  server_->wait_until_ready();
  return port;
}

void ServiceHost::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

void serve(const std::filesystem::path& bundle_path, const ServeOptions& options) {
  auto bundle = std::make_shared<const ModelBundle>(ModelBundle::load(bundle_path));
  auto service = std::make_shared<ExplainService>(bundle);
  ServiceHost host(service, options);
  const int port = host.bind();
  std::cerr << "serving " << bundle_path << " (" << bundle->num_classes << " classes) on "
            << options.host << ":" << port << "\n";
  host.listen();
}

}  // namespace frace
