// Acceptance run: one PASS/FAIL line per criterion. The two desk trainings
// (composite and mask-only labels) are cached in the work directory and
// reused when their configuration is unchanged; pass --fresh to retrain.
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <thread>

#include <CLI11.hpp>

#include "gradient_suite.hpp"
#include "oracles.hpp"
#include "pgsgan/checkpoint.hpp"
#include "pgsgan/config.hpp"
#include "pgsgan/metrics.hpp"
#include "pgsgan/service.hpp"
#include "pgsgan/trainer.hpp"

// After Eigen: resolv.h defines a _res macro that clashes with Eigen internals.
#include <httplib.h>

namespace fs = std::filesystem;
using namespace pgsgan;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// --------------------------------------------------------------- 1 to 6

Verdict gradients() {
  const auto t0 = Clock::now();
  const auto results = gradsuite::run();
  const double wall = seconds_since(t0);
  double worst = 0.0, worst_median = 0.0;
  std::string worst_name;
  bool ok = true;
  for (const auto& r : results) {
    if (r.composite) {
      worst_median = std::max(worst_median, r.check.median_error);
      ok = ok && r.check.median_error <= 1e-2;
      continue;
    }
    const double e = std::max(r.check.input_error, r.check.param_error);
    if (e > worst) {
      worst = e;
      worst_name = r.name;
    }
    ok = ok && e <= 1e-3 && r.check.checked > 0 && r.check.excluded_fraction() <= 0.05;
  }
  ok = ok && wall <= 60.0;
  return {ok, std::to_string(results.size()) + " checks, worst relative error " + fmt("%.2e", worst) + " (" +
                  worst_name + "), whole-generator median " + fmt("%.2e", worst_median) + ", " +
                  fmt("%.1f", wall) + " s (limits 1e-3, 60 s)"};
}

Verdict canny() {
  std::mt19937_64 rng(2024);
  int mismatched = 0;
  for (int i = 0; i < 100; ++i) {
    const Tensor img = oracle::random_tensor({1, 1, 16, 16}, rng, 0.0f, 1.0f);
    if (!(sketch::canny(img) == oracle::canny(img, sketch::CannyParams{}))) ++mismatched;
  }
  return {mismatched == 0, std::to_string(100 - mismatched) + "/100 random 16x16 images pixel-identical"};
}

int grid_side(const sgan::DiscriminatorConfig& c, int n) {
  for (int s : c.strides) n = (n + 2 * c.padding - c.kernel) / s + 1;
  return n;
}

Verdict patch_grid() {
  std::mt19937_64 rng(3);
  sgan::Discriminator full(sgan::DiscriminatorConfig::full(), 256, 1);
  sgan::Discriminator desk(sgan::DiscriminatorConfig::desk(), 32, 1);
  const Shape a = full.forward(oracle::random_tensor({1, 3, 256, 256}, rng, 0.0f, 1.0f),
                               oracle::random_tensor({1, 1, 256, 256}, rng))
                      .shape();
  const Shape b =
      desk.forward(oracle::random_tensor({1, 3, 32, 32}, rng, 0.0f, 1.0f), oracle::random_tensor({1, 1, 32, 32}, rng))
          .shape();
  const bool ok = a.h == 30 && a.w == 30 && b.h == 6 && b.w == 6 &&
                  grid_side(sgan::DiscriminatorConfig::full(), 256) == 30 &&
                  grid_side(sgan::DiscriminatorConfig::desk(), 32) == 6;
  return {ok, "full@256 -> " + std::to_string(a.h) + "x" + std::to_string(a.w) + ", desk@32 -> " +
                  std::to_string(b.h) + "x" + std::to_string(b.w)};
}

Tensor pool(const Tensor& x) {
  const Shape s = x.shape();
  Tensor out({s.n, s.c, s.h / 2, s.w / 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h / 2; ++y)
        for (int z = 0; z < s.w / 2; ++z)
          out.at(n, c, y, z) = 0.25f * (x.at(n, c, 2 * y, 2 * z) + x.at(n, c, 2 * y, 2 * z + 1) +
                                        x.at(n, c, 2 * y + 1, 2 * z) + x.at(n, c, 2 * y + 1, 2 * z + 1));
  return out;
}

Tensor nearest(const Tensor& x) {
  const Shape s = x.shape();
  Tensor out({s.n, s.c, s.h * 2, s.w * 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < 2 * s.h; ++y)
        for (int z = 0; z < 2 * s.w; ++z) out.at(n, c, y, z) = x.at(n, c, y / 2, z / 2);
  return out;
}

Verdict growth() {
  std::mt19937_64 rng(8);
  sgan::Generator g(sgan::GeneratorConfig::desk(), 32, 11);
  sgan::Discriminator d(sgan::DiscriminatorConfig::desk(), 32, 12);
  nn::ParamList all = g.parameters();
  for (const auto& p : d.parameters()) all.push_back(p);
  gradsuite::randomize(all, rng, 0.3f);
  const auto old = checkpoint::deserialize(checkpoint::serialize(g, d, {}));
  // Labels are binary, so their 2x2 averages are exact in any summation order.
  Tensor label = oracle::random_tensor({2, 3, 64, 64}, rng, 0.0f, 1.0f);
  for (float& v : label.values()) v = v < 0.5f ? 0.0f : 1.0f;
  const Tensor image = oracle::random_tensor({2, 1, 64, 64}, rng);
  d.grow({});
  g.grow({});
  const float dd = max_abs_diff(d.forward(label, image), old.discriminator->forward(pool(label), pool(image)));
  const float gd = max_abs_diff(g.forward(label), nearest(old.generator->forward(pool(label))));
  return {dd <= 1e-6f && gd <= 1e-6f,
          "max |D_new - D_old(down)| " + fmt("%.2e", dd) + ", max |G_new - up(G_old(down))| " + fmt("%.2e", gd)};
}

Verdict alpha_schedule() {
  fib::FibState d;
  d.ceiling = fib::kDiscriminatorCeiling;
  fib::FibState g;
  g.ceiling = fib::kGeneratorCeiling;
  bool ok = true;
  double g_at_15 = 0.0;
  for (int i = 1; i <= 30; ++i) {
    d = fib::alpha_update(d);
    g = fib::alpha_update(g);
    ok = ok && g.alpha <= 0.5;
    if (i == 15) g_at_15 = g.alpha;
    if (i < 30) ok = ok && d.alpha < 1.0;
  }
  for (int i = 0; i < 100; ++i) {
    g = fib::alpha_update(g);
    ok = ok && g.alpha <= 0.5;
  }
  ok = ok && d.alpha == 1.0 && g_at_15 == 0.5;
  return {ok, "D alpha after 30 updates " + fmt("%.17g", d.alpha) + ", G alpha after 15 " + fmt("%.17g", g_at_15) +
                  ", G max " + fmt("%.17g", g.alpha)};
}

metrics::Features gaussian(int n, const Eigen::VectorXd& mu, std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  metrics::Features f(n, mu.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < mu.size(); ++j) f(i, j) = z(rng) + mu(j);
  return f;
}

Verdict metric_oracles() {
  std::mt19937_64 rng(6);
  bool ok = true;
  std::string detail;

  const Tensor x = oracle::random_tensor({1, 1, 64, 64}, rng);
  const double self = metrics::ms_ssim(x, x);
  ok = ok && std::abs(self - 1.0) <= 1e-6;
  detail += "ms_ssim(x,x) " + fmt("%.9f", self);

  const metrics::Features a = gaussian(500, Eigen::VectorXd::Zero(64), rng);
  const double same = metrics::fid(a, a);
  ok = ok && same <= 1e-6;
  detail += "; fid(A,A) " + fmt("%.1e", same);

  // Random direction, fixed squared norm; independent samples of 5000 each.
  std::normal_distribution<double> z(0.0, 1.0);
  for (double norm2 : {1.0, 4.0, 9.0}) {
    Eigen::VectorXd mu(64);
    for (int j = 0; j < 64; ++j) mu(j) = z(rng);
    mu *= std::sqrt(norm2) / mu.norm();
    const double f = metrics::fid(gaussian(5000, Eigen::VectorXd::Zero(64), rng), gaussian(5000, mu, rng));
    const bool in = std::abs(f - norm2) <= 0.05 * norm2;
    ok = ok && in;
    detail += "; |mu|^2=" + fmt("%.0f", norm2) + " fid " + fmt("%.3f", f) + (in ? "" : " (outside 5%)");
  }

  std::vector<double> k;
  for (int r = 0; r < 20; ++r) {
    k.push_back(metrics::kid(gaussian(100, Eigen::VectorXd::Zero(64), rng), gaussian(100, Eigen::VectorXd::Zero(64), rng)));
  }
  double mean = 0.0, var = 0.0;
  for (double v : k) mean += v / 20.0;
  for (double v : k) var += (v - mean) * (v - mean) / 19.0;
  const double se = std::sqrt(var / 20.0);
  ok = ok && std::abs(mean) <= 2.0 * se;
  detail += "; kid mean " + fmt("%.2e", mean) + " vs 2se " + fmt("%.2e", 2.0 * se);
  return {ok, detail};
}

// --------------------------------------------------------------- 7 to 10

struct TrainedRun {
  fs::path dir;
  double wall_seconds = 0.0;
  bool reused = false;
};

TrainedRun train_or_reuse(const config::RunConfig& cfg, const fs::path& data, const fs::path& dir, bool fresh) {
  const nlohmann::json echo = config::to_json(cfg);
  const fs::path stamp = dir / "acceptance.json";
  if (!fresh && fs::exists(stamp) && fs::exists(dir / "final.ckpt")) {
    std::ifstream in(stamp);
    const auto j = nlohmann::json::parse(in);
    if (j.value("config", nlohmann::json()) == echo) return {dir, j["wall_seconds"].get<double>(), true};
  }
  fs::remove_all(dir);
  const auto t0 = Clock::now();
  trainer::Dataset ds = trainer::load_dataset(data, cfg.canny, cfg.mask_only);
  trainer::Trainer t(cfg.plan, cfg.generator, cfg.discriminator, std::move(ds), dir, {{"config", echo}});
  t.set_progress([&](const trainer::EpochRecord& r) {
    std::fprintf(stderr, "  [%s] phase %d epoch %3d  d %.3f  g_adv %.3f  g_l1 %.4f  qfid %.4f  %.0fs\n",
                 cfg.mask_only ? "mask-only" : "composite", r.phase, r.epoch, r.d_loss, r.g_adv, r.g_l1, r.quick_fid,
                 seconds_since(t0));
  });
  t.run_full_schedule();
  const double wall = seconds_since(t0);
  std::ofstream(stamp) << nlohmann::json{{"config", echo}, {"wall_seconds", wall}}.dump(2) << "\n";
  return {dir, wall, false};
}

std::vector<Tensor> synthesize(sgan::Generator& g, const std::vector<trainer::Example>& examples) {
  std::vector<Tensor> out;
  for (const auto& e : examples) out.push_back(g.forward(e.label_hi));
  return out;
}

struct Runs {
  config::RunConfig cfg;
  fs::path data;
  TrainedRun composite;
  TrainedRun mask_only;
  std::size_t n_samples = 0;
};

Verdict end_to_end(const Runs& runs) {
  const trainer::Dataset ds = trainer::load_dataset(runs.data, runs.cfg.canny, false);
  checkpoint::Model m = checkpoint::load(runs.composite.dir / "final.ckpt");
  const std::vector<Tensor> synth = synthesize(*m.generator, ds.test);

  // (a) L1 against the per-pixel mean training image.
  Tensor mean_image(ds.train.front().image_hi.shape(), 0.0f);
  for (const auto& e : ds.train)
    for (std::size_t k = 0; k < mean_image.size(); ++k) mean_image[k] += e.image_hi[k] / ds.train.size();
  double l1 = 0.0, base = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < ds.test.size(); ++i)
    for (std::size_t k = 0; k < synth[i].size(); ++k) {
      l1 += std::abs(synth[i][k] - ds.test[i].image_hi[k]);
      base += std::abs(mean_image[k] - ds.test[i].image_hi[k]);
      ++count;
    }
  l1 /= count;
  base /= count;
  const bool a = l1 <= 0.8 * base;

  // (b) FID against pixel-shuffled real images.
  std::vector<Tensor> real, shuffled;
  std::mt19937_64 rng(7);
  for (const auto& e : ds.test) {
    real.push_back(e.image_hi);
    Tensor s = e.image_hi;
    std::shuffle(s.values().begin(), s.values().end(), rng);
    shuffled.push_back(s);
  }
  const metrics::FeatureExtractor fx(runs.cfg.extractor_seed);
  const metrics::Features fr = fx.extract(real);
  const double fid_synth = metrics::fid(fr, fx.extract(synth));
  const double fid_shuffled = metrics::fid(fr, fx.extract(shuffled));
  const bool b = fid_synth < fid_shuffled;

  // (c) mask fidelity.
  double dice = 0.0;
  for (std::size_t i = 0; i < ds.test.size(); ++i) dice += metrics::mask_fidelity(synth[i], ds.test[i].label_hi);
  dice /= ds.test.size();
  const bool c = dice >= 0.6;

  const bool timed = runs.composite.wall_seconds <= 3600.0;
  const bool ok = runs.n_samples == 256 && timed && a && b && c;
  return {ok, std::to_string(runs.n_samples) + " phantoms, training " + fmt("%.0f", runs.composite.wall_seconds) +
                  " s" + (runs.composite.reused ? " (cached run)" : "") + (timed ? "" : " over 3600") +
                  "; (a) val L1 " + fmt("%.4f", l1) + " vs baseline " + fmt("%.4f", base) + ", ratio " +
                  fmt("%.3f", l1 / base) + " need <= 0.8" + (a ? "" : " FAIL") +
                  "; (b) fid synth " + fmt("%.4f", fid_synth) + " < shuffled " + fmt("%.4f", fid_shuffled) +
                  (b ? "" : " FAIL") + "; (c) mask Dice " + fmt("%.3f", dice) + " need 0.6" + (c ? "" : " FAIL")};
}

Verdict ablation(const Runs& runs) {
  const trainer::Dataset comp = trainer::load_dataset(runs.data, runs.cfg.canny, false);
  const trainer::Dataset bare = trainer::load_dataset(runs.data, runs.cfg.canny, true);
  checkpoint::Model mc = checkpoint::load(runs.composite.dir / "final.ckpt");
  checkpoint::Model mm = checkpoint::load(runs.mask_only.dir / "final.ckpt");
  std::vector<Tensor> real;
  for (const auto& e : comp.test) real.push_back(e.image_hi);
  const metrics::FeatureExtractor fx(runs.cfg.extractor_seed);
  const metrics::Features fr = fx.extract(real);
  const double fid_c = metrics::fid(fr, fx.extract(synthesize(*mc.generator, comp.test)));
  const double fid_m = metrics::fid(fr, fx.extract(synthesize(*mm.generator, bare.test)));
  return {fid_m >= fid_c, "fid mask-only " + fmt("%.4f", fid_m) + " >= composite " + fmt("%.4f", fid_c) +
                              (runs.mask_only.reused ? " (cached runs)" : "")};
}

struct Server {
  service::InferenceService svc;
  int port;
  std::thread thread;
  explicit Server(const fs::path& ckpt, int concurrency) : svc({concurrency, ""}) {
    svc.load(ckpt);
    port = svc.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { svc.listen_after_bind(); });
    svc.wait_until_ready();
  }
  ~Server() {
    svc.stop();
    thread.join();
  }
};

std::string label_body(const trainer::Example& e) {
  const auto bytes = sketch::encode_label_png(e.label_hi);
  return std::string(bytes.begin(), bytes.end());
}

Verdict determinism(const Runs& runs, const fs::path& work) {
  const trainer::Dataset ds = trainer::load_dataset(runs.data, runs.cfg.canny, false);
  trainer::Trainer a(runs.cfg.plan, runs.cfg.generator, runs.cfg.discriminator, ds);
  trainer::Trainer b(runs.cfg.plan, runs.cfg.generator, runs.cfg.discriminator, ds);
  const auto ra = a.run_epoch();
  const auto rb = b.run_epoch();
  const bool epoch = ra.d_loss == rb.d_loss && ra.g_adv == rb.g_adv && ra.g_l1 == rb.g_l1 &&
                     ra.quick_fid == rb.quick_fid && ra.val_l1 == rb.val_l1;

  checkpoint::Model m = checkpoint::load(runs.composite.dir / "final.ckpt");
  const fs::path copy = work / "resaved.ckpt";
  checkpoint::save(copy, *m.generator, *m.discriminator, m.meta);
  checkpoint::Model back = checkpoint::load(copy);
  bool persisted = true;
  for (const auto& e : ds.test) persisted = persisted && max_abs_diff(m.generator->forward(e.label_hi),
                                                                      back.generator->forward(e.label_hi)) == 0.0f;

  Server server(runs.composite.dir / "final.ckpt", 2);
  const std::string body = label_body(ds.test.front());
  std::vector<std::string> replies(4);
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i) {
    threads.emplace_back([&, i] {
      httplib::Client c("127.0.0.1", server.port);
      c.set_read_timeout(60, 0);
      if (auto r = c.Post("/synthesize", body, "image/png"); r && r->status == 200) replies[i] = r->body;
    });
  }
  for (auto& t : threads) t.join();
  bool identical = !replies.front().empty();
  for (const auto& r : replies) identical = identical && r == replies.front();

  return {epoch && persisted && identical,
          std::string("epoch-1 record ") + (epoch ? "identical" : "differs") + " (d_loss " + fmt("%.9g", ra.d_loss) +
              "); reloaded checkpoint synthesis " + (persisted ? "bitwise identical" : "differs") + "; 4 service replies " +
              (identical ? "byte-identical" : "differ")};
}

Verdict latency(const Runs& runs) {
  const trainer::Dataset ds = trainer::load_dataset(runs.data, runs.cfg.canny, false);
  Server server(runs.composite.dir / "final.ckpt", 1);
  httplib::Client c("127.0.0.1", server.port);
  c.set_read_timeout(60, 0);
  double worst = 0.0, total = 0.0;
  long header_worst = 0;
  bool ok = true;
  const int n = 10;
  for (int i = 0; i < n; ++i) {
    const std::string body = label_body(ds.test[i % ds.test.size()]);
    const auto t0 = Clock::now();
    auto r = c.Post("/synthesize", body, "image/png");
    const double s = seconds_since(t0);
    ok = ok && r && r->status == 200;
    if (r) header_worst = std::max(header_worst, std::stol(r->get_header_value("X-Synth-Millis", 0)));
    worst = std::max(worst, s);
    total += s;
  }
  ok = ok && worst <= 2.0;
  return {ok, "64x64 /synthesize over " + std::to_string(n) + " requests: mean " + fmt("%.3f", total / n) +
                  " s, max " + fmt("%.3f", worst) + " s wall (X-Synth-Millis max " + std::to_string(header_worst) +
                  "), limit 2 s"};
}

}  // namespace

int main(int argc, char** argv) {
  kernels::configure_workers_from_env();
  CLI::App app{"Acceptance criteria 1-10"};
  std::string work = "acceptance_work";
  std::string config_path = (fs::path(PGSGAN_SOURCE_DIR) / "configs" / "desk.toml").string();
  bool fresh = false;
  app.add_option("--work", work, "Directory for the dataset and the two cached trainings")->capture_default_str();
  app.add_option("--config", config_path, "Run configuration")->capture_default_str();
  app.add_flag("--fresh", fresh, "Retrain even when a cached run matches");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(work);
  std::ofstream file(fs::path(work) / "report.txt");
  int passed = 0, evaluated = 0;
  auto report = [&](int n, const std::function<Verdict()>& f) {
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    ++evaluated;
    passed += v.pass;
    char head[32];
    std::snprintf(head, sizeof head, "criterion %2d: %s  ", n, v.pass ? "PASS" : "FAIL");
    std::cout << head << v.detail << std::endl;
    file << head << v.detail << std::endl;
  };

  report(1, gradients);
  report(2, canny);
  report(3, patch_grid);
  report(4, growth);
  report(5, alpha_schedule);
  report(6, metric_oracles);

  Runs runs;
  std::string setup_error;
  try {
    runs.cfg = config::load_file(config_path);
    fs::create_directories(work);
    runs.data = fs::path(work) / "data";
    if (!fs::exists(runs.data / "manifest.json") || fresh) {
      fs::remove_all(runs.data);
      phantom::generate_dataset(runs.cfg.phantom, runs.data);
    }
    runs.n_samples = phantom::load_manifest(runs.data).entries.size();
    runs.composite = train_or_reuse(runs.cfg, runs.data, fs::path(work) / "composite", fresh);
    config::RunConfig bare = runs.cfg;
    bare.mask_only = true;
    runs.mask_only = train_or_reuse(bare, runs.data, fs::path(work) / "mask_only", fresh);
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto needs_runs = [&](std::function<Verdict()> f) {
    return [f, &setup_error]() -> Verdict {
      if (!setup_error.empty()) return {false, "training failed: " + setup_error};
      return f();
    };
  };
  report(7, needs_runs([&] { return end_to_end(runs); }));
  report(8, needs_runs([&] { return ablation(runs); }));
  report(9, needs_runs([&] { return determinism(runs, work); }));
  report(10, needs_runs([&] { return latency(runs); }));

  const std::string summary = "acceptance: " + std::to_string(evaluated) + " criteria evaluated, " +
                              std::to_string(passed) + " PASS, " + std::to_string(evaluated - passed) + " FAIL";
  std::cout << summary << std::endl;
  file << summary << std::endl;
  return passed == evaluated ? 0 : 1;
}
