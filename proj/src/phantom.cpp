#include "pgsgan/phantom.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "pgsgan/error.hpp"
#include "pgsgan/png_io.hpp"

namespace pgsgan::phantom {

namespace fs = std::filesystem;
using Rng = std::mt19937_64;

void PhantomConfig::validate() const {
  if (image_size < 32 || !std::has_single_bit(static_cast<unsigned>(image_size))) {
    throw ConfigError("image_size must be a power of two >= 32, got " + std::to_string(image_size));
  }
  if (n_samples < 0) throw ConfigError("n_samples must be non-negative");
  if (follicle_count_min < 0 || follicle_count_max < follicle_count_min) {
    throw ConfigError("follicle_count_range must satisfy 0 <= min <= max");
  }
  if (!(ovary_axis_min > 0.0 && ovary_axis_min <= ovary_axis_max && ovary_axis_max <= 0.8)) {
    throw ConfigError("ovary_axis_range must satisfy 0 < min <= max <= 0.8");
  }
  if (!(follicle_axis_min > 0.0 && follicle_axis_min <= follicle_axis_max && follicle_axis_max < 1.0)) {
    throw ConfigError("follicle_axis_range must satisfy 0 < min <= max < 1");
  }
  const auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(echogenicity.background) || !in_unit(echogenicity.ovary) || !in_unit(echogenicity.follicle)) {
    throw ConfigError("echogenicity values must lie in [0,1]");
  }
  if (!(echogenicity.rim_gain > 0.0)) throw ConfigError("echogenicity.rim_gain must be positive");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train_fraction must lie in (0,1]");
}

void to_json(nlohmann::json& j, const PhantomConfig& c) {
  j = nlohmann::json{
      {"image_size", c.image_size},
      {"n_samples", c.n_samples},
      {"seed", c.seed},
      {"follicle_count_range", {c.follicle_count_min, c.follicle_count_max}},
      {"ovary_axis_range", {c.ovary_axis_min, c.ovary_axis_max}},
      {"follicle_axis_range", {c.follicle_axis_min, c.follicle_axis_max}},
      {"echogenicity",
       {{"background", c.echogenicity.background},
        {"ovary", c.echogenicity.ovary},
        {"follicle", c.echogenicity.follicle},
        {"rim_gain", c.echogenicity.rim_gain}}},
      {"train_fraction", c.train_fraction},
  };
}

void from_json(const nlohmann::json& j, PhantomConfig& c) {
  c = PhantomConfig{};
  c.image_size = j.value("image_size", c.image_size);
  c.n_samples = j.value("n_samples", c.n_samples);
  c.seed = j.value("seed", c.seed);
  if (j.contains("follicle_count_range")) {
    c.follicle_count_min = j["follicle_count_range"].at(0);
    c.follicle_count_max = j["follicle_count_range"].at(1);
  }
  if (j.contains("ovary_axis_range")) {
    c.ovary_axis_min = j["ovary_axis_range"].at(0);
    c.ovary_axis_max = j["ovary_axis_range"].at(1);
  }
  if (j.contains("follicle_axis_range")) {
    c.follicle_axis_min = j["follicle_axis_range"].at(0);
    c.follicle_axis_max = j["follicle_axis_range"].at(1);
  }
  if (j.contains("echogenicity")) {
    const auto& e = j["echogenicity"];
    c.echogenicity.background = e.value("background", c.echogenicity.background);
    c.echogenicity.ovary = e.value("ovary", c.echogenicity.ovary);
    c.echogenicity.follicle = e.value("follicle", c.echogenicity.follicle);
    c.echogenicity.rim_gain = e.value("rim_gain", c.echogenicity.rim_gain);
  }
  c.train_fraction = j.value("train_fraction", c.train_fraction);
}

namespace {

struct Ellipse {
  double cx, cy, a, b, theta;

  // <= 1 inside; evaluated at pixel centres.
  double level(double px, double py) const {
    const double dx = px - cx;
    const double dy = py - cy;
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double u = dx * c + dy * s;
    const double v = -dx * s + dy * c;
    return (u / a) * (u / a) + (v / b) * (v / b);
  }
  bool contains(int y, int x) const { return level(x + 0.5, y + 0.5) <= 1.0; }
};

// Separable Gaussian with replicated borders; radius = ceil(3 sigma).
Tensor gaussian_blur(const Tensor& img, double sigma) {
  const int h = img.shape().h;
  const int w = img.shape().w;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  std::vector<double> tmp(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        acc += k[i + radius] * img.at(0, 0, y, std::clamp(x + i, 0, w - 1));
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  Tensor out(img.shape());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        acc += k[i + radius] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)) * w + x];
      }
      out.at(0, 0, y, x) = static_cast<float>(acc);
    }
  }
  return out;
}

Tensor box3(const Tensor& img) {
  const int h = img.shape().h;
  const int w = img.shape().w;
  Tensor out(img.shape());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          acc += img.at(0, 0, std::clamp(y + dy, 0, h - 1), std::clamp(x + dx, 0, w - 1));
        }
      }
      out.at(0, 0, y, x) = static_cast<float>(acc / 9.0);
    }
  }
  return out;
}

}  // namespace

PhantomLayers generate_phantom_layers(std::uint64_t seed, const PhantomConfig& config) {
  config.validate();
  const int size = config.image_size;
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  Ellipse ovary{};
  ovary.a = uniform(config.ovary_axis_min, config.ovary_axis_max) * size / 2.0;
  ovary.b = uniform(config.ovary_axis_min, config.ovary_axis_max) * size / 2.0;
  ovary.theta = uniform(0.0, std::numbers::pi);
  ovary.cx = size / 2.0 + uniform(-0.05, 0.05) * size;
  ovary.cy = size / 2.0 + uniform(-0.05, 0.05) * size;

  LabelMap mask(size, size, kBackground);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (ovary.contains(y, x)) mask(y, x) = kOvary;
    }
  }

  std::uniform_int_distribution<int> count_dist(config.follicle_count_min, config.follicle_count_max);
  const int wanted = count_dist(rng);
  int placed = 0;
  std::vector<std::pair<int, int>> pixels;
  for (int attempt = 0; placed < wanted && attempt < 20000; ++attempt) {
    Ellipse f{};
    f.a = uniform(config.follicle_axis_min, config.follicle_axis_max) * ovary.a;
    f.b = uniform(config.follicle_axis_min, config.follicle_axis_max) * ovary.b;
    f.theta = uniform(0.0, std::numbers::pi);
    const double r = std::sqrt(unit(rng));
    const double phi = uniform(0.0, 2.0 * std::numbers::pi);
    const double lu = r * ovary.a * std::cos(phi);
    const double lv = r * ovary.b * std::sin(phi);
    f.cx = ovary.cx + lu * std::cos(ovary.theta) - lv * std::sin(ovary.theta);
    f.cy = ovary.cy + lu * std::sin(ovary.theta) + lv * std::cos(ovary.theta);

    const double reach = std::max(f.a, f.b) + 1.0;
    const int y0 = std::max(0, static_cast<int>(std::floor(f.cy - reach)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(f.cy + reach)));
    const int x0 = std::max(0, static_cast<int>(std::floor(f.cx - reach)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(f.cx + reach)));
    pixels.clear();
    bool ok = true;
    for (int y = y0; y <= y1 && ok; ++y) {
      for (int x = x0; x <= x1 && ok; ++x) {
        if (!f.contains(y, x)) continue;
        // Follicle pixels and their 8-neighbours must be ovary, never another follicle.
        for (int dy = -1; dy <= 1 && ok; ++dy) {
          for (int dx = -1; dx <= 1 && ok; ++dx) {
            const int ny = y + dy;
            const int nx = x + dx;
            if (!mask.contains(ny, nx) || mask(ny, nx) != kOvary) ok = false;
          }
        }
        pixels.emplace_back(y, x);
      }
    }
    if (!ok || pixels.empty()) continue;
    for (auto [y, x] : pixels) mask(y, x) = kFollicle;
    ++placed;
  }
  if (placed < wanted) {
    throw ConfigError("follicle_count_range: could only place " + std::to_string(placed) + " of " +
                      std::to_string(wanted) + " follicles");
  }

  const Echogenicity& e = config.echogenicity;
  Tensor echo({1, 1, size, size});
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = e.background;
      if (mask(y, x) == kFollicle) {
        v = e.follicle;
      } else if (mask(y, x) == kOvary) {
        v = e.ovary;
        bool rim = false;
        for (int dy = -2; dy <= 2 && !rim; ++dy) {
          for (int dx = -2; dx <= 2 && !rim; ++dx) {
            const int ny = std::clamp(y + dy, 0, size - 1);
            const int nx = std::clamp(x + dx, 0, size - 1);
            if (mask(ny, nx) == kBackground) rim = true;
          }
        }
        if (rim) v = std::min(1.0, e.ovary * e.rim_gain);
      }
      echo.at(0, 0, y, x) = static_cast<float>(v);
    }
  }
  Tensor base = gaussian_blur(echo, size / 32.0);

  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor raw_speckle({1, 1, size, size});
  for (float& v : raw_speckle.values()) {
    const double g1 = normal(rng);
    const double g2 = normal(rng);
    v = static_cast<float>(0.5 * (g1 * g1 + g2 * g2));
  }
  Tensor speckle = box3(raw_speckle);

  Tensor image({1, 1, size, size});
  for (std::size_t i = 0; i < image.size(); ++i) image[i] = std::clamp(base[i] * speckle[i], 0.0f, 1.0f);

  PhantomLayers out;
  out.sample = Sample{std::move(image), std::move(mask), "seed_" + std::to_string(seed)};
  out.echo_map = std::move(echo);
  out.base_tissue = std::move(base);
  out.speckle = std::move(speckle);
  return out;
}

Sample generate_phantom(std::uint64_t seed, const PhantomConfig& config) {
  return std::move(generate_phantom_layers(seed, config).sample);
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index) {
  // splitmix64 over the pair
  std::uint64_t z = dataset_seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string sample_id(std::size_t index) {
  std::string digits = std::to_string(index);
  if (digits.size() < 5) digits.insert(0, 5 - digits.size(), '0');
  return "phantom_" + digits;
}

const ManifestEntry& Manifest::entry(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.sample_id == id) return e;
  }
  throw DataError("manifest has no sample '" + id + "'");
}

void to_json(nlohmann::json& j, const Manifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"sample_id", e.sample_id}, {"image_path", e.image_path}, {"mask_path", e.mask_path}});
  }
  j = nlohmann::json{{"entries", entries}, {"train_ids", m.train_ids}, {"test_ids", m.test_ids}, {"config", m.config}};
}

void from_json(const nlohmann::json& j, Manifest& m) {
  m.entries.clear();
  for (const auto& e : j.at("entries")) {
    m.entries.push_back({e.at("sample_id"), e.at("image_path"), e.at("mask_path")});
  }
  m.train_ids = j.at("train_ids").get<std::vector<std::string>>();
  m.test_ids = j.at("test_ids").get<std::vector<std::string>>();
  m.config = j.at("config").get<PhantomConfig>();
}

std::size_t train_count(std::size_t n, double train_fraction) {
  if (n == 0) return 0;
  const auto t = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 0.5));
  return std::clamp<std::size_t>(t, 1, n);
}

void write_sample(const Sample& s, const fs::path& image_path, const fs::path& mask_path) {
  const int h = s.image.shape().h;
  const int w = s.image.shape().w;
  png::Raster img{w, h, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image[i], 0.0f, 1.0f) * 255.0f));
  }
  png::Raster mask{w, h, 1, s.mask.cells};
  png::write_file(image_path, png::encode_gray(img));
  png::write_file(mask_path, png::encode_indexed(mask));
}

Manifest generate_dataset(const PhantomConfig& config, const fs::path& out_dir) {
  config.validate();
  if (config.n_samples == 0) throw ConfigError("n_samples must be at least 1");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory", out_dir.string());

  const int n = config.n_samples;
  Manifest manifest;
  manifest.config = config;
  manifest.entries.resize(n);
  std::vector<std::string> errors(n);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    try {
      Sample s = generate_phantom(sample_seed(config.seed, i), config);
      s.sample_id = sample_id(i);
      ManifestEntry& e = manifest.entries[i];
      e.sample_id = s.sample_id;
      e.image_path = "images/" + s.sample_id + ".png";
      e.mask_path = "masks/" + s.sample_id + ".png";
      write_sample(s, out_dir / e.image_path, out_dir / e.mask_path);
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  }
  for (int i = 0; i < n; ++i) {
    if (!errors[i].empty()) throw IoError(errors[i], (out_dir / manifest.entries[i].image_path).string());
  }

  std::vector<std::size_t> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng split_rng(sample_seed(config.seed, 0xC0FFEEULL));
  std::shuffle(order.begin(), order.end(), split_rng);
  const std::size_t n_train = train_count(n, config.train_fraction);
  std::vector<bool> is_train(n, false);
  for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;
  for (int i = 0; i < n; ++i) {
    (is_train[i] ? manifest.train_ids : manifest.test_ids).push_back(manifest.entries[i].sample_id);
  }

  std::ofstream out(out_dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest", (out_dir / "manifest.json").string());
  out << nlohmann::json(manifest).dump(2) << "\n";
  if (!out) throw IoError("write failed", (out_dir / "manifest.json").string());
  return manifest;
}

Manifest load_manifest(const fs::path& dataset_dir) {
  const fs::path path = dataset_dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest", path.string());
  try {
    return nlohmann::json::parse(in).get<Manifest>();
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("malformed manifest " + path.string() + ": " + ex.what());
  }
}

Sample load_sample(const fs::path& dataset_dir, const ManifestEntry& entry) {
  const png::Raster img = png::decode(png::read_file(dataset_dir / entry.image_path));
  const png::Raster mask = png::decode(png::read_file(dataset_dir / entry.mask_path));
  if (img.width != mask.width || img.height != mask.height) {
    throw DataError("image and mask sizes differ for " + entry.sample_id);
  }
  Sample s;
  s.sample_id = entry.sample_id;
  s.image = Tensor({1, 1, img.height, img.width});
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) s.image.at(0, 0, y, x) = img.at(y, x, 0) / 255.0f;
  }
  s.mask = LabelMap(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const std::uint8_t v = mask.at(y, x, 0);
      if (v > kFollicle) throw DataError("mask " + entry.mask_path + " has unknown class " + std::to_string(v));
      s.mask(y, x) = v;
    }
  }
  return s;
}

}  // namespace pgsgan::phantom
