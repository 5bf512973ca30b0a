#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgsgan/tensor.hpp"

// Procedural ovary phantoms: speckled tissue with a darker ovary ellipse, a
// bright rim at its boundary and near-anechoic follicles inside it.
namespace pgsgan::phantom {

enum Tissue : std::uint8_t { kBackground = 0, kOvary = 1, kFollicle = 2 };

struct Echogenicity {
  double background = 0.55;
  double ovary = 0.45;
  double follicle = 0.08;
  double rim_gain = 1.4;
};

struct PhantomConfig {
  int image_size = 64;
  int n_samples = 256;
  std::uint64_t seed = 1;
  int follicle_count_min = 1;
  int follicle_count_max = 6;
  // Full ellipse axes as fractions of image_size.
  double ovary_axis_min = 0.45;
  double ovary_axis_max = 0.7;
  // Follicle axes as fractions of the matching ovary axis.
  double follicle_axis_min = 0.08;
  double follicle_axis_max = 0.3;
  Echogenicity echogenicity;
  double train_fraction = 0.87;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomConfig& c);
void from_json(const nlohmann::json& j, PhantomConfig& c);

struct Sample {
  Tensor image;  // (1,1,H,W) in [0,1]
  LabelMap mask;
  std::string sample_id;
};

// Intermediate maps, exposed for tests and the mask-fidelity oracle.
struct PhantomLayers {
  Sample sample;
  Tensor echo_map;     // piecewise-constant echogenicity before smoothing
  Tensor base_tissue;  // echo_map smoothed, i.e. the noise-free image
  Tensor speckle;      // multiplicative speckle field after the box filter
};

Sample generate_phantom(std::uint64_t seed, const PhantomConfig& config);
PhantomLayers generate_phantom_layers(std::uint64_t seed, const PhantomConfig& config);

// Per-sample seed derived from the dataset seed and the sample index.
std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index);
std::string sample_id(std::size_t index);

struct ManifestEntry {
  std::string sample_id;
  std::string image_path;  // relative to the dataset directory
  std::string mask_path;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  PhantomConfig config;

  const ManifestEntry& entry(const std::string& id) const;
};

void to_json(nlohmann::json& j, const Manifest& m);
void from_json(const nlohmann::json& j, Manifest& m);

// Train count: round-half-up of train_fraction * n, at least 1.
std::size_t train_count(std::size_t n, double train_fraction);

Manifest generate_dataset(const PhantomConfig& config, const std::filesystem::path& out_dir);
Manifest load_manifest(const std::filesystem::path& dataset_dir);
Sample load_sample(const std::filesystem::path& dataset_dir, const ManifestEntry& entry);

void write_sample(const Sample& s, const std::filesystem::path& image_path, const std::filesystem::path& mask_path);

}  // namespace pgsgan::phantom
