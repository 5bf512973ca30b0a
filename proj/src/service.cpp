#include "pgsgan/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <httplib.h>

#include "pgsgan/checkpoint.hpp"
#include "pgsgan/error.hpp"
#include "pgsgan/png_io.hpp"
#include "pgsgan/sketch.hpp"

namespace pgsgan::service {

GeneratorPool::GeneratorPool(std::vector<std::unique_ptr<sgan::Generator>> replicas) : free_(std::move(replicas)) {
  if (free_.empty()) throw ConfigError("generator pool needs at least one replica");
  resolution_ = free_.front()->resolution();
}

GeneratorPool::Lease GeneratorPool::acquire() {
  std::unique_lock lock(mutex_);
  const std::uint64_t ticket = next_ticket_++;
  cv_.wait(lock, [&] { return ticket == now_serving_ && !free_.empty(); });
  ++now_serving_;
  auto g = std::move(free_.back());
  free_.pop_back();
  cv_.notify_all();
  return Lease(*this, std::move(g));
}

void GeneratorPool::release(std::unique_ptr<sgan::Generator> g) {
  {
    std::lock_guard lock(mutex_);
    free_.push_back(std::move(g));
  }
  cv_.notify_all();
}

std::vector<std::uint8_t> to_gray_bytes(const Tensor& image) {
  std::vector<std::uint8_t> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const float v = std::round((image[i] + 1.0f) * 127.5f);
    out[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
  }
  return out;
}

namespace {

Response json_error(int status, nlohmann::json body) {
  return {status, "application/json", body.dump(), -1, 0};
}

}  // namespace

InferenceService::InferenceService(ServiceOptions options)
    : options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  if (options_.max_concurrency < 1) throw ConfigError("serve.max_concurrency must be >= 1");
  const int threads = std::max(4, options_.max_concurrency + 2);
  server_->new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
  install_routes();
}

InferenceService::~InferenceService() { stop(); }

void InferenceService::load(const std::filesystem::path& path) {
  checkpoint::Model first = checkpoint::load(path);
  std::vector<std::unique_ptr<sgan::Generator>> replicas;
  info_ = {{"resolution", first.generator->resolution()},
           {"phase", first.meta.phase},
           {"architecture_hash", checkpoint::hash_hex(first.hash)},
           {"checkpoint_path", std::filesystem::absolute(path).string()},
           {"label_format", kLabelFormat},
           {"training", first.meta.training}};
  replicas.push_back(std::move(first.generator));
  for (int i = 1; i < options_.max_concurrency; ++i) replicas.push_back(checkpoint::load(path).generator);
  pool_ = std::make_unique<GeneratorPool>(std::move(replicas));
}

nlohmann::json InferenceService::info() const {
  if (!loaded()) return {{"error", "model not loaded"}, {"label_format", kLabelFormat}};
  return info_;
}

Response InferenceService::synthesize(const std::string& png_body) {
  if (!loaded()) return json_error(503, {{"error", "model not loaded"}});
  const auto t0 = std::chrono::steady_clock::now();
  sketch::CompositeLabel label;
  try {
    label = sketch::decode_label_png(
        std::span(reinterpret_cast<const std::uint8_t*>(png_body.data()), png_body.size()));
  } catch (const Error& e) {
    return json_error(400, {{"error", std::string("undecodable label PNG: ") + e.what()}});
  }
  const int res = pool_->resolution();
  const Shape& s = label.shape();
  if (s.h != res || s.w != res) {
    return json_error(400, {{"error", "label size does not match the model resolution"},
                            {"expected", {res, res}},
                            {"got", {s.h, s.w}}});
  }
  Response r;
  r.sketch_cleared = sketch::sanitize_label(label);
  Tensor image;
  {
    auto g = pool_->acquire();
    image = g->forward(label);
  }
  png::Raster raster{s.w, s.h, 1, to_gray_bytes(image)};
  const auto bytes = png::encode_gray(raster);
  r.body.assign(bytes.begin(), bytes.end());
  r.content_type = "image/png";
  r.synth_millis =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

void InferenceService::install_routes() {
  auto cors = [this](httplib::Response& res) {
    if (options_.allow_origin.empty()) return;
    res.set_header("Access-Control-Allow-Origin", options_.allow_origin);
    res.set_header("Access-Control-Expose-Headers", "X-Synth-Millis, X-Sketch-Cleared");
  };
  server_->Post("/synthesize", [this, cors](const httplib::Request& req, httplib::Response& res) {
    const Response r = synthesize(req.body);
    res.status = r.status;
    res.set_content(r.body, r.content_type);
    if (r.synth_millis >= 0) {
      res.set_header("X-Synth-Millis", std::to_string(r.synth_millis));
      res.set_header("X-Sketch-Cleared", std::to_string(r.sketch_cleared));
    }
    cors(res);
  });
  server_->Options("/synthesize", [this, cors](const httplib::Request&, httplib::Response& res) {
    cors(res);
    if (!options_.allow_origin.empty()) {
      res.set_header("Access-Control-Allow-Methods", "POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    }
    res.status = 204;
  });
  server_->Get("/info", [this, cors](const httplib::Request&, httplib::Response& res) {
    res.status = loaded() ? 200 : 503;
    res.set_content(info().dump(), "application/json");
    cors(res);
  });
  server_->Get("/health", [cors](const httplib::Request&, httplib::Response& res) {
    res.set_content("ok", "text/plain");
    cors(res);
  });
}

bool InferenceService::listen(const std::string& host, int port) { return server_->listen(host, port); }

int InferenceService::bind_to_any_port(const std::string& host) { return server_->bind_to_any_port(host); }

bool InferenceService::listen_after_bind() { return server_->listen_after_bind(); }

void InferenceService::stop() {
  if (server_ && server_->is_running()) server_->stop();
}

bool InferenceService::running() const { return server_->is_running(); }

void InferenceService::wait_until_ready() const { server_->wait_until_ready(); }

}  // namespace pgsgan::service
