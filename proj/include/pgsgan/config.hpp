#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgsgan/phantom.hpp"
#include "pgsgan/sgan.hpp"
#include "pgsgan/sketch.hpp"
#include "pgsgan/trainer.hpp"

namespace pgsgan::config {

struct ServeOptions {
  int port = 8750;
  int max_concurrency = 2;
  std::string allow_origin;  // empty: no CORS headers
};

// Everything a run needs, with desk-scale defaults. Loaded from TOML with
// dotted keys ("train.batch_size = 4" or a [train] table); unknown keys are
// rejected.
struct RunConfig {
  phantom::PhantomConfig phantom;
  sketch::CannyParams canny;
  sgan::GeneratorConfig generator = sgan::GeneratorConfig::desk();
  sgan::DiscriminatorConfig discriminator = sgan::DiscriminatorConfig::desk();
  trainer::PhasePlan plan;
  bool mask_only = false;
  std::uint64_t extractor_seed = 42;
  ServeOptions serve;

  void validate() const;
};

struct KeyInfo {
  std::string key;
  std::string default_value;  // TOML literal
  std::string help;
};

// Every recognised key with its default, in documentation order.
const std::vector<KeyInfo>& known_keys();

RunConfig parse_toml(const std::string& text, const std::string& source = "<string>");
RunConfig load_file(const std::filesystem::path& path);
// Applies "key=value" (TOML value syntax) on top of `cfg`.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Flat dotted-key echo of the configuration.
nlohmann::json to_json(const RunConfig& cfg);
std::string to_toml(const RunConfig& cfg);

}  // namespace pgsgan::config
