#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgsgan/checkpoint.hpp"
#include "pgsgan/fib.hpp"
#include "pgsgan/metrics.hpp"
#include "pgsgan/phantom.hpp"
#include "pgsgan/sgan.hpp"
#include "pgsgan/sketch.hpp"

namespace pgsgan::trainer {

struct PhasePlan {
  int base_resolution = 32;
  int grown_resolution = 64;
  std::array<int, 4> phase_epochs{40, 10, 10, 60};
  int batch_size = 4;
  sgan::TrainOptions options;
  double alpha_increment = fib::kDefaultIncrement;
  fib::StepUnit alpha_step_unit = fib::StepUnit::per_step;
  double generator_ceiling = fib::kGeneratorCeiling;
  double discriminator_ceiling = fib::kDiscriminatorCeiling;
  // Stop a phase early when validation L1 improves by less than 1% over 5 epochs.
  bool plateau_stop = false;
  int quick_fid_samples = 32;
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const PhasePlan& p);

// One sample prepared at both resolutions; images in [-1,1].
struct Example {
  std::string sample_id;
  Tensor label_hi;  // (1,3,R,R), binary
  Tensor image_hi;  // (1,1,R,R)
  Tensor label_lo;  // 2x2 average of label_hi
  Tensor image_lo;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> test;
};

Example make_example(const phantom::Sample& sample, const sketch::CannyParams& canny, bool mask_only);
Dataset load_dataset(const std::filesystem::path& dir, const sketch::CannyParams& canny, bool mask_only);
Tensor to_signed(const Tensor& unit_image);  // [0,1] -> [-1,1]

struct EpochRecord {
  int phase = 1;
  int epoch = 1;  // within the phase
  double d_loss = 0.0;
  double g_adv = 0.0;
  double g_l1 = 0.0;
  double alpha_d = 0.0;
  double alpha_g = 0.0;
  double quick_fid = 0.0;
  double val_l1 = 0.0;
  double wall_seconds = 0.0;
  long steps = 0;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

class Trainer {
 public:
  using Progress = std::function<void(const EpochRecord&)>;

  // An empty run_dir disables checkpoints and the log file.
  Trainer(PhasePlan plan, sgan::GeneratorConfig gcfg, sgan::DiscriminatorConfig dcfg, Dataset data,
          std::filesystem::path run_dir = {}, nlohmann::json config_echo = nlohmann::json::object());

  // Runs phase k (1..4) in order; phases 2 and 3 grow D and G first.
  void run_phase(int phase);
  void run_full_schedule();

  void grow_discriminator();
  void grow_generator();
  EpochRecord run_epoch();

  int phase() const { return phase_; }
  int completed_phase() const { return completed_phase_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  const PhasePlan& plan() const { return plan_; }
  const Dataset& data() const { return data_; }
  sgan::Generator& generator() { return *g_; }
  sgan::Discriminator& discriminator() { return *d_; }

  void set_progress(Progress cb) { progress_ = std::move(cb); }
  void save_checkpoint(const std::filesystem::path& path) const;
  std::filesystem::path last_checkpoint() const;

  // Generator output for each example at the generator's current resolution.
  std::vector<Tensor> synthesize(const std::vector<Example>& examples);
  bool generator_at_high_resolution() const { return g_->grown(); }

 private:
  sgan::Batch make_batch(const std::vector<std::size_t>& order, std::size_t first, std::size_t count) const;
  double quick_fid_and_val_l1(double& val_l1);
  void log(const EpochRecord& r);
  checkpoint::Metadata metadata() const;

  PhasePlan plan_;
  Dataset data_;
  std::filesystem::path run_dir_;
  nlohmann::json config_echo_;
  std::unique_ptr<sgan::Generator> g_;
  std::unique_ptr<sgan::Discriminator> d_;
  nn::Adam opt_g_;
  nn::Adam opt_d_;
  nn::Rng rng_;
  metrics::FeatureExtractor extractor_;
  int phase_ = 1;
  int completed_phase_ = 0;
  int epoch_in_phase_ = 0;
  std::vector<EpochRecord> history_;
  double elapsed_ = 0.0;
  Progress progress_;
};

}  // namespace pgsgan::trainer
