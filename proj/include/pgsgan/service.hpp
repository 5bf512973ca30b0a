#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgsgan/sgan.hpp"

namespace httplib {
class Server;
}

namespace pgsgan::service {

inline constexpr int kDefaultPort = 8750;
inline constexpr const char* kLabelFormat = "rgb-png ovary/follicle/sketch";

struct ServiceOptions {
  int max_concurrency = 2;
  std::string allow_origin;  // empty: no CORS headers
};

struct Response {
  int status = 200;
  std::string content_type;
  std::string body;
  long synth_millis = -1;  // set on successful synthesis
  std::size_t sketch_cleared = 0;
};

// Frozen generator replicas handed out in arrival order. Each replica is
// used by one request at a time, so forward caches are never shared.
class GeneratorPool {
 public:
  GeneratorPool(std::vector<std::unique_ptr<sgan::Generator>> replicas);

  class Lease {
   public:
    Lease(GeneratorPool& pool, std::unique_ptr<sgan::Generator> g) : pool_(pool), g_(std::move(g)) {}
    Lease(const Lease&) = delete;
    Lease& operator=(const Lease&) = delete;
    ~Lease() { pool_.release(std::move(g_)); }
    sgan::Generator& operator*() { return *g_; }
    sgan::Generator* operator->() { return g_.get(); }

   private:
    GeneratorPool& pool_;
    std::unique_ptr<sgan::Generator> g_;
  };

  Lease acquire();
  int resolution() const { return resolution_; }

 private:
  void release(std::unique_ptr<sgan::Generator> g);

  std::mutex mutex_;
  std::condition_variable cv_;
  std::vector<std::unique_ptr<sgan::Generator>> free_;
  std::uint64_t next_ticket_ = 0;
  std::uint64_t now_serving_ = 0;
  int resolution_ = 0;
};

class InferenceService {
 public:
  explicit InferenceService(ServiceOptions options = {});
  ~InferenceService();

  void load(const std::filesystem::path& checkpoint);
  bool loaded() const { return pool_ != nullptr; }

  // Endpoint logic, callable without HTTP.
  Response synthesize(const std::string& png_body);
  nlohmann::json info() const;

  // Binds and serves until stop(). Returns false if the port cannot be bound.
  bool listen(const std::string& host, int port);
  // Binds to an ephemeral port; serve with listen_after_bind().
  int bind_to_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();
  bool running() const;
  void wait_until_ready() const;

 private:
  void install_routes();

  ServiceOptions options_;
  std::unique_ptr<GeneratorPool> pool_;
  nlohmann::json info_;
  std::unique_ptr<httplib::Server> server_;
};

// Maps generator output in [-1,1] to 8-bit grey.
std::vector<std::uint8_t> to_gray_bytes(const Tensor& image);

}  // namespace pgsgan::service
