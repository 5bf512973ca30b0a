#include "pgsgan/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "pgsgan/error.hpp"

namespace pgsgan::trainer {

namespace {

constexpr int kSynthChunk = 8;
constexpr int kPlateauWindow = 5;
constexpr double kPlateauGain = 0.01;

}  // namespace

void PhasePlan::validate() const {
  if (base_resolution <= 0 || grown_resolution != 2 * base_resolution) {
    throw ConfigError("train.grown_resolution must be twice train.base_resolution");
  }
  for (int i = 0; i < 4; ++i) {
    if (phase_epochs[i] < 1) throw ConfigError("train.phase" + std::to_string(i + 1) + "_epochs must be >= 1");
  }
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(options.lambda >= 0.0)) throw ConfigError("train.lambda must be >= 0");
  if (!(options.lr_g >= 0.0f) || !(options.lr_d >= 0.0f)) throw ConfigError("learning rates must be >= 0");
  if (!(alpha_increment > 0.0)) throw ConfigError("fib.increment must be positive");
  if (!(generator_ceiling > 0.0 && generator_ceiling <= 1.0)) throw ConfigError("fib.generator_ceiling out of (0,1]");
  if (!(discriminator_ceiling > 0.0 && discriminator_ceiling <= 1.0)) {
    throw ConfigError("fib.discriminator_ceiling out of (0,1]");
  }
  if (quick_fid_samples < 0) throw ConfigError("train.quick_fid_samples must be >= 0");
}

void to_json(nlohmann::json& j, const PhasePlan& p) {
  j = nlohmann::json{{"base_resolution", p.base_resolution},
                     {"grown_resolution", p.grown_resolution},
                     {"phase_epochs", p.phase_epochs},
                     {"batch_size", p.batch_size},
                     {"lambda", p.options.lambda},
                     {"lr_g", p.options.lr_g},
                     {"lr_d", p.options.lr_d},
                     {"adversarial", p.options.form == sgan::AdversarialForm::non_saturating ? "non-saturating"
                                                                                             : "saturating"},
                     {"alpha_increment", p.alpha_increment},
                     {"alpha_step_unit", fib::to_string(p.alpha_step_unit)},
                     {"generator_ceiling", p.generator_ceiling},
                     {"discriminator_ceiling", p.discriminator_ceiling},
                     {"plateau_stop", p.plateau_stop},
                     {"quick_fid_samples", p.quick_fid_samples},
                     {"seed", p.seed}};
}

Tensor to_signed(const Tensor& unit_image) {
  Tensor out = unit_image;
  for (float& v : out.values()) v = 2.0f * v - 1.0f;
  return out;
}

Example make_example(const phantom::Sample& sample, const sketch::CannyParams& canny, bool mask_only) {
  Example e;
  e.sample_id = sample.sample_id;
  e.label_hi = sketch::label_from_sample(sample, canny);
  if (mask_only) e.label_hi = sketch::mask_only(e.label_hi);
  e.image_hi = to_signed(sample.image);
  e.label_lo = kernels::downsample2x(e.label_hi);
  e.image_lo = kernels::downsample2x(e.image_hi);
  return e;
}

Dataset load_dataset(const std::filesystem::path& dir, const sketch::CannyParams& canny, bool mask_only) {
  const phantom::Manifest m = phantom::load_manifest(dir);
  Dataset d;
  for (const auto& id : m.train_ids) d.train.push_back(make_example(phantom::load_sample(dir, m.entry(id)), canny, mask_only));
  for (const auto& id : m.test_ids) d.test.push_back(make_example(phantom::load_sample(dir, m.entry(id)), canny, mask_only));
  if (d.train.empty()) throw DataError("dataset " + dir.string() + " has no training samples");
  return d;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"phase", r.phase},
                     {"epoch", r.epoch},
                     {"d_loss", r.d_loss},
                     {"g_adv", r.g_adv},
                     {"g_l1", r.g_l1},
                     {"alpha_d", r.alpha_d},
                     {"alpha_g", r.alpha_g},
                     {"quick_fid", r.quick_fid},
                     {"val_l1", r.val_l1},
                     {"wall_seconds", r.wall_seconds}};
}

Trainer::Trainer(PhasePlan plan, sgan::GeneratorConfig gcfg, sgan::DiscriminatorConfig dcfg, Dataset data,
                 std::filesystem::path run_dir, nlohmann::json config_echo)
    : plan_(std::move(plan)),
      data_(std::move(data)),
      run_dir_(std::move(run_dir)),
      config_echo_(std::move(config_echo)),
      opt_g_(plan_.options.lr_g),
      opt_d_(plan_.options.lr_d),
      rng_(phantom::sample_seed(plan_.seed, 3)) {
  plan_.validate();
  if (data_.train.empty()) throw DataError("no training samples");
  for (const Example& e : data_.train) {
    if (e.image_hi.shape().h != plan_.grown_resolution || e.image_hi.shape().w != plan_.grown_resolution) {
      throw SizeError("sample " + e.sample_id + " is " + e.image_hi.shape().str() + ", plan expects " +
                      std::to_string(plan_.grown_resolution) + "x" + std::to_string(plan_.grown_resolution));
    }
  }
  g_ = std::make_unique<sgan::Generator>(gcfg, plan_.base_resolution, phantom::sample_seed(plan_.seed, 1));
  d_ = std::make_unique<sgan::Discriminator>(dcfg, plan_.base_resolution, phantom::sample_seed(plan_.seed, 2));
  if (!run_dir_.empty()) {
    std::filesystem::create_directories(run_dir_);
    std::ofstream(run_dir_ / "train_log.jsonl", std::ios::trunc);
  }
}

void Trainer::grow_discriminator() {
  if (completed_phase_ < 1) throw StateError("discriminator growth requires phase 1 to be complete");
  if (d_->grown()) throw StateError("discriminator has already grown");
  d_->grow({0.0, plan_.alpha_increment, plan_.discriminator_ceiling, plan_.alpha_step_unit, 0});
}

void Trainer::grow_generator() {
  if (completed_phase_ < 2 || !d_->grown()) {
    throw StateError("generator growth requires phase 2 to be complete");
  }
  if (g_->grown()) throw StateError("generator has already grown");
  g_->grow({0.0, plan_.alpha_increment, plan_.generator_ceiling, plan_.alpha_step_unit, 0});
}

sgan::Batch Trainer::make_batch(const std::vector<std::size_t>& order, std::size_t first, std::size_t count) const {
  std::vector<Tensor> gl, gr, dl, dr;
  for (std::size_t i = first; i < first + count; ++i) {
    const Example& e = data_.train[order[i]];
    const bool g_hi = g_->grown();
    const bool d_hi = d_->grown();
    gl.push_back(g_hi ? e.label_hi : e.label_lo);
    gr.push_back(g_hi ? e.image_hi : e.image_lo);
    dl.push_back(d_hi ? e.label_hi : e.label_lo);
    dr.push_back(d_hi ? e.image_hi : e.image_lo);
  }
  return {stack_batch(gl), stack_batch(gr), stack_batch(dl), stack_batch(dr)};
}

std::vector<Tensor> Trainer::synthesize(const std::vector<Example>& examples) {
  std::vector<Tensor> out;
  out.reserve(examples.size());
  for (std::size_t first = 0; first < examples.size(); first += kSynthChunk) {
    const std::size_t count = std::min<std::size_t>(kSynthChunk, examples.size() - first);
    std::vector<Tensor> labels;
    for (std::size_t i = first; i < first + count; ++i) {
      labels.push_back(g_->grown() ? examples[i].label_hi : examples[i].label_lo);
    }
    const Tensor batch = g_->forward(stack_batch(labels));
    for (int i = 0; i < static_cast<int>(count); ++i) out.push_back(batch.slice_batch(i, 1));
  }
  return out;
}

double Trainer::quick_fid_and_val_l1(double& val_l1) {
  const std::size_t n = std::min<std::size_t>(plan_.quick_fid_samples, data_.test.size());
  val_l1 = std::nan("");
  if (n == 0) return std::nan("");
  const std::vector<Example> slice(data_.test.begin(), data_.test.begin() + static_cast<long>(n));
  const std::vector<Tensor> synth = synthesize(slice);
  std::vector<Tensor> real;
  double l1 = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    real.push_back(g_->grown() ? slice[i].image_hi : slice[i].image_lo);
    for (std::size_t k = 0; k < synth[i].size(); ++k) l1 += std::abs(synth[i][k] - real[i][k]);
    count += synth[i].size();
  }
  val_l1 = l1 / static_cast<double>(count);
  if (n < 2) return std::nan("");
  return metrics::fid(extractor_.extract(real), extractor_.extract(synth));
}

EpochRecord Trainer::run_epoch() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(data_.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng_);

  auto update_alpha = [&](bool per_step) {
    if ((plan_.alpha_step_unit == fib::StepUnit::per_step) != per_step) return;
    if (phase_ == 2) {
      for (auto* f : d_->fade_in_blocks()) f->update_alpha();
    } else if (phase_ == 3) {
      for (auto* f : g_->fade_in_blocks()) f->update_alpha();
    }
  };

  EpochRecord rec;
  rec.phase = phase_;
  rec.epoch = ++epoch_in_phase_;
  const std::size_t bs = static_cast<std::size_t>(plan_.batch_size);
  for (std::size_t first = 0; first < order.size(); first += bs) {
    const std::size_t count = std::min(bs, order.size() - first);
    const sgan::Batch batch = make_batch(order, first, count);
    sgan::LossReport r;
    try {
      r = sgan::train_step(*g_, *d_, batch, plan_.options, opt_g_, opt_d_);
    } catch (const NumericError& e) {
      const auto last = last_checkpoint();
      throw NumericError(std::string(e.what()) + " (phase " + std::to_string(phase_) + ", epoch " +
                         std::to_string(rec.epoch) + "; last good checkpoint: " +
                         (last.empty() ? std::string("none") : last.string()) + ")");
    }
    rec.d_loss += r.d_loss;
    rec.g_adv += r.g_adv_loss;
    rec.g_l1 += r.g_l1_loss;
    ++rec.steps;
    update_alpha(true);
  }
  update_alpha(false);
  rec.d_loss /= static_cast<double>(rec.steps);
  rec.g_adv /= static_cast<double>(rec.steps);
  rec.g_l1 /= static_cast<double>(rec.steps);
  rec.alpha_d = d_->grown() ? d_->fade_in_blocks().front()->state().alpha : 0.0;
  rec.alpha_g = g_->grown() ? g_->fade_in_blocks().front()->state().alpha : 0.0;
  rec.quick_fid = quick_fid_and_val_l1(rec.val_l1);
  elapsed_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.wall_seconds = elapsed_;
  history_.push_back(rec);
  log(rec);
  if (!run_dir_.empty()) save_checkpoint(run_dir_ / "last.ckpt");
  return rec;
}

void Trainer::log(const EpochRecord& r) {
  if (!run_dir_.empty()) {
    std::ofstream out(run_dir_ / "train_log.jsonl", std::ios::app);
    out << nlohmann::json(r).dump() << "\n";
  }
  if (progress_) progress_(r);
}

void Trainer::run_phase(int phase) {
  if (phase < 1 || phase > 4) throw StateError("no phase " + std::to_string(phase));
  if (phase != completed_phase_ + 1) {
    throw StateError("phase " + std::to_string(phase) + " requested after phase " +
                     std::to_string(completed_phase_));
  }
  if (phase == 2) grow_discriminator();
  if (phase == 3) grow_generator();
  phase_ = phase;
  epoch_in_phase_ = 0;
  std::vector<double> val;
  for (int e = 0; e < plan_.phase_epochs[phase - 1]; ++e) {
    const EpochRecord r = run_epoch();
    val.push_back(r.val_l1);
    if (plan_.plateau_stop && static_cast<int>(val.size()) > kPlateauWindow) {
      const double before = val[val.size() - 1 - kPlateauWindow];
      const double best = *std::min_element(val.end() - kPlateauWindow, val.end());
      if (std::isfinite(before) && best > before * (1.0 - kPlateauGain)) break;
    }
  }
  completed_phase_ = phase;
  if (!run_dir_.empty()) {
    save_checkpoint(run_dir_ / ("phase" + std::to_string(phase) + ".ckpt"));
    if (phase == 4) save_checkpoint(run_dir_ / "final.ckpt");
  }
}

void Trainer::run_full_schedule() {
  for (int p = completed_phase_ + 1; p <= 4; ++p) run_phase(p);
}

checkpoint::Metadata Trainer::metadata() const {
  checkpoint::Metadata m;
  m.phase = phase_;
  nlohmann::json echo = config_echo_;
  echo["plan"] = plan_;
  m.training = echo;
  return m;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  checkpoint::save(path, *g_, *d_, metadata());
}

std::filesystem::path Trainer::last_checkpoint() const {
  if (run_dir_.empty()) return {};
  const auto p = run_dir_ / "last.ckpt";
  return std::filesystem::exists(p) ? p : std::filesystem::path{};
}

}  // namespace pgsgan::trainer
