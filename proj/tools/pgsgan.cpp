// pgsgan: dataset generation, training, synthesis, evaluation and serving.
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "pgsgan/checkpoint.hpp"
#include "pgsgan/config.hpp"
#include "pgsgan/error.hpp"
#include "pgsgan/metrics.hpp"
#include "pgsgan/png_io.hpp"
#include "pgsgan/service.hpp"
#include "pgsgan/trainer.hpp"

namespace fs = std::filesystem;
using namespace pgsgan;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

std::string key_list() {
  std::string s = "Config keys (TOML, also accepted by --set key=value):\n";
  for (const auto& k : config::known_keys()) s += "  " + k.key + " = " + k.default_value + "  # " + k.help + "\n";
  return s;
}

config::RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  config::RunConfig cfg = path.empty() ? config::RunConfig{} : config::load_file(path);
  for (const auto& o : overrides) config::apply_override(cfg, o);
  return cfg;
}

// Canny parameters and the mask-only switch a checkpoint was trained with.
void labels_from_checkpoint(const checkpoint::Model& model, config::RunConfig& cfg) {
  const auto& echo = model.meta.training;
  if (!echo.contains("config")) return;
  const auto& c = echo["config"];
  cfg.canny.gaussian_sigma = c.value("canny.sigma", cfg.canny.gaussian_sigma);
  cfg.canny.low_threshold = c.value("canny.low", cfg.canny.low_threshold);
  cfg.canny.high_threshold = c.value("canny.high", cfg.canny.high_threshold);
  cfg.mask_only = c.value("train.mask_only", cfg.mask_only);
}

int gen_data(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& out) {
  const config::RunConfig cfg = resolve_config(config_path, overrides);
  const phantom::Manifest m = phantom::generate_dataset(cfg.phantom, out);
  std::cout << "wrote " << m.entries.size() << " phantoms to " << out << " (" << m.train_ids.size() << " train, "
            << m.test_ids.size() << " test)\n";
  return 0;
}

int train(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& data,
          const std::string& out, bool mask_only) {
  config::RunConfig cfg = resolve_config(config_path, overrides);
  if (mask_only) cfg.mask_only = true;
  trainer::Dataset ds = trainer::load_dataset(data, cfg.canny, cfg.mask_only);
  fs::create_directories(out);
  std::ofstream(fs::path(out) / "config.toml") << config::to_toml(cfg);
  trainer::Trainer t(cfg.plan, cfg.generator, cfg.discriminator, std::move(ds), out,
                     nlohmann::json{{"config", config::to_json(cfg)}});
  t.set_progress([](const trainer::EpochRecord& r) {
    std::fprintf(stderr,
                 "phase %d epoch %3d  d %.4f  g_adv %.4f  g_l1 %.4f  alpha_d %.3f  alpha_g %.3f  qfid %.5f  %.0fs\n",
                 r.phase, r.epoch, r.d_loss, r.g_adv, r.g_l1, r.alpha_d, r.alpha_g, r.quick_fid, r.wall_seconds);
  });
  t.run_full_schedule();
  std::cout << "final checkpoint: " << (fs::path(out) / "final.ckpt").string() << "\n";
  return 0;
}

int synth(const std::string& ckpt, const std::string& label_path, const std::string& out) {
  checkpoint::Model model = checkpoint::load(ckpt);
  const auto bytes = png::read_file(label_path);
  sketch::CompositeLabel label = sketch::decode_label_png(bytes);
  const int res = model.generator->resolution();
  if (label.shape().h != res || label.shape().w != res) {
    throw SizeError("label " + label_path + " is " + std::to_string(label.shape().w) + "x" +
                    std::to_string(label.shape().h) + ", model expects " + std::to_string(res) + "x" +
                    std::to_string(res));
  }
  sketch::sanitize_label(label);
  const Tensor image = model.generator->forward(label);
  png::write_file(out, png::encode_gray({res, res, 1, service::to_gray_bytes(image)}));
  return 0;
}

int eval(const std::string& ckpt, const std::string& data, const std::string& report_path,
         const std::string& config_path, const std::vector<std::string>& overrides) {
  checkpoint::Model model = checkpoint::load(ckpt);
  config::RunConfig cfg;
  labels_from_checkpoint(model, cfg);
  if (!config_path.empty() || !overrides.empty()) cfg = resolve_config(config_path, overrides);
  const trainer::Dataset ds = trainer::load_dataset(data, cfg.canny, cfg.mask_only);
  if (ds.test.size() < 2) throw DataError("eval needs at least 2 test samples, " + data + " has " +
                                          std::to_string(ds.test.size()));
  const bool hi = model.generator->grown();
  std::vector<Tensor> real, synth, labels;
  for (const auto& e : ds.test) {
    const Tensor& label = hi ? e.label_hi : e.label_lo;
    labels.push_back(label);
    real.push_back(hi ? e.image_hi : e.image_lo);
    synth.push_back(model.generator->forward(label));
  }
  if (!hi) {
    // Mask fidelity needs binary labels; score low-resolution runs on rebinarized masks.
    for (auto& l : labels) sketch::sanitize_label(l);
  }
  const metrics::FeatureExtractor extractor(cfg.extractor_seed);
  const metrics::MetricReport report = metrics::evaluate(real, synth, labels, extractor);
  const std::string text = nlohmann::json(report).dump(2);
  std::ofstream(report_path) << text << "\n";
  std::cout << text << "\n";
  return 0;
}

int serve(const std::string& ckpt, const std::string& host, int port, int max_concurrency,
          const std::string& allow_origin) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  service::InferenceService svc({max_concurrency, allow_origin});
  svc.load(ckpt);
  std::thread watcher([&] {
    int sig = 0;
    sigwait(&set, &sig);
    svc.stop();
  });
  std::cerr << "serving " << ckpt << " on http://" << host << ":" << port << "\n";
  const bool ok = svc.listen(host, port);
  if (!ok) {
    pthread_kill(watcher.native_handle(), SIGTERM);
    watcher.join();
    throw IoError("cannot bind port " + std::to_string(port), host);
  }
  watcher.join();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  kernels::configure_workers_from_env();

  CLI::App app{"Sketch-guided progressive GAN for ovarian ultrasound phantoms"};
  app.require_subcommand(1);
  app.footer("Environment: PGSGAN_THREADS caps worker threads.");

  std::string config_path, out, data, ckpt, label, report, host = "127.0.0.1", allow_origin;
  std::vector<std::string> overrides;
  bool mask_only = false;
  int port = service::kDefaultPort;
  int max_concurrency = 2;
  if (const char* env = std::getenv("PGSGAN_THREADS"); env && std::atoi(env) > 0) max_concurrency = std::atoi(env);

  auto* gen = app.add_subcommand("gen-data", "Generate the phantom dataset");
  gen->add_option("--config", config_path, "TOML run configuration")->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Output dataset directory")->required();
  gen->add_option("--set", overrides, "Override a config key, key=value");
  gen->footer(key_list());

  auto* tr = app.add_subcommand("train", "Run the four-phase progressive schedule");
  tr->add_option("--config", config_path, "TOML run configuration")->check(CLI::ExistingFile);
  tr->add_option("--data", data, "Dataset directory from gen-data")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", out, "Run directory for checkpoints and the training log")->required();
  tr->add_option("--set", overrides, "Override a config key, key=value");
  tr->add_flag("--mask-only", mask_only, "Train on labels without the sketch channel")->capture_default_str();
  tr->footer(key_list());

  auto* sy = app.add_subcommand("synth", "Synthesize one image from a label PNG");
  sy->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  sy->add_option("--label", label, "RGB label PNG (R ovary, G follicle, B sketch)")->required();
  sy->add_option("--out", out, "Output grayscale PNG")->required();

  auto* ev = app.add_subcommand("eval", "Score a checkpoint on the test split");
  ev->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  ev->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--report", report, "Output JSON report")->required();
  ev->add_option("--config", config_path, "Override the label settings stored in the checkpoint")
      ->check(CLI::ExistingFile);
  ev->add_option("--set", overrides, "Override a config key, key=value");

  auto* sv = app.add_subcommand("serve", "Serve /synthesize, /info and /health over HTTP");
  sv->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  sv->add_option("--port", port, "Port")->capture_default_str()->check(CLI::Range(0, 65535));
  sv->add_option("--host", host, "Bind address")->capture_default_str();
  sv->add_option("--max-concurrency", max_concurrency, "Generator evaluations running at once")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sv->add_option("--allow-origin", allow_origin, "Send CORS headers for this origin")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return gen_data(config_path, overrides, out);
    if (*tr) return train(config_path, overrides, data, out, mask_only);
    if (*sy) return synth(ckpt, label, out);
    if (*ev) return eval(ckpt, data, report, config_path, overrides);
    if (*sv) return serve(ckpt, host, port, max_concurrency, allow_origin);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
