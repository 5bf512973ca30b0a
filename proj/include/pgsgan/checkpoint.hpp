#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgsgan/sgan.hpp"

// Binary checkpoint container. Layout in docs/checkpoint_format.md.
namespace pgsgan::checkpoint {

inline constexpr char kMagic[4] = {'P', 'G', 'S', 'G'};
inline constexpr std::uint32_t kFormatVersion = 1;

// FNV-1a over the architecture descriptions of both networks. Independent of
// weights and alpha values.
std::uint64_t architecture_hash(const sgan::Generator& g, const sgan::Discriminator& d);
std::string hash_hex(std::uint64_t hash);

struct Metadata {
  int phase = 1;
  int base_resolution = 32;
  sgan::GeneratorConfig generator;
  sgan::DiscriminatorConfig discriminator;
  std::uint64_t generator_seed = 0;
  std::uint64_t discriminator_seed = 0;
  bool generator_grown = false;
  bool discriminator_grown = false;
  // Free-form echo of the training configuration.
  nlohmann::json training = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const Metadata& m);
void from_json(const nlohmann::json& j, Metadata& m);

struct Model {
  Metadata meta;
  std::uint64_t hash = 0;
  std::unique_ptr<sgan::Generator> generator;
  std::unique_ptr<sgan::Discriminator> discriminator;
};

// `meta`'s network fields are overwritten from the networks themselves.
std::vector<std::uint8_t> serialize(const sgan::Generator& g, const sgan::Discriminator& d, Metadata meta);
Model deserialize(std::span<const std::uint8_t> bytes);

// Writes through a temporary file and renames it, so an interrupted save
// leaves any previous checkpoint at `path` intact.
void save(const std::filesystem::path& path, const sgan::Generator& g, const sgan::Discriminator& d,
          const Metadata& meta);
Model load(const std::filesystem::path& path);

}  // namespace pgsgan::checkpoint
