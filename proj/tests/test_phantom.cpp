#include <doctest.h>

#include <algorithm>
#include <deque>
#include <filesystem>
#include <fstream>
#include <set>

#include "pgsgan/error.hpp"
#include "pgsgan/phantom.hpp"
#include "pgsgan/png_io.hpp"
#include "temp_dir.hpp"

using namespace pgsgan;
using phantom::PhantomConfig;

namespace {

// 8-connected components of one class, by breadth-first flood fill.
int components(const LabelMap& m, std::uint8_t cls) {
  Grid<int> seen(m.height, m.width, 0);
  int count = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (m(y, x) != cls || seen(y, x)) continue;
      ++count;
      std::deque<std::pair<int, int>> q{{y, x}};
      seen(y, x) = 1;
      while (!q.empty()) {
        auto [cy, cx] = q.front();
        q.pop_front();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = cy + dy, nx = cx + dx;
            if (m.contains(ny, nx) && m(ny, nx) == cls && !seen(ny, nx)) {
              seen(ny, nx) = 1;
              q.emplace_back(ny, nx);
            }
          }
      }
    }
  return count;
}

double dice(const std::vector<bool>& a, const std::vector<bool>& b) {
  double inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    na += a[i];
    nb += b[i];
  }
  return na + nb == 0 ? 1.0 : 2.0 * inter / (na + nb);
}

double mean_where(const Tensor& img, const LabelMap& m, std::uint8_t cls) {
  double s = 0;
  int n = 0;
  for (std::size_t i = 0; i < m.cells.size(); ++i)
    if (m.cells[i] == cls) {
      s += img[i];
      ++n;
    }
  return n ? s / n : 0.0;
}

}  // namespace

TEST_SUITE("phantom") {

TEST_CASE("follicles are darker than background on average") {
  const phantom::Sample s = phantom::generate_phantom(7, PhantomConfig{});
  CHECK(mean_where(s.image, s.mask, phantom::kFollicle) < mean_where(s.image, s.mask, phantom::kBackground));
}

TEST_CASE("same seed gives identical bytes") {
  const auto a = phantom::generate_phantom(7, PhantomConfig{});
  const auto b = phantom::generate_phantom(7, PhantomConfig{});
  CHECK(a.mask == b.mask);
  CHECK(std::equal(a.image.values().begin(), a.image.values().end(), b.image.values().begin()));
  const auto c = phantom::generate_phantom(8, PhantomConfig{});
  CHECK_FALSE(a.mask == c.mask);
}

TEST_CASE("a fixed follicle count gives that many components") {
  PhantomConfig cfg;
  cfg.follicle_count_min = cfg.follicle_count_max = 3;
  CHECK(components(phantom::generate_phantom(7, cfg).mask, phantom::kFollicle) == 3);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto s = phantom::generate_phantom(seed, PhantomConfig{});
    const int k = components(s.mask, phantom::kFollicle);
    CHECK(k >= 1);
    CHECK(k <= 6);
    CHECK(components(s.mask, phantom::kOvary) >= 1);
  }
}

TEST_CASE("geometry and value ranges") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto s = phantom::generate_phantom(phantom::sample_seed(3, seed), PhantomConfig{});
    const LabelMap& m = s.mask;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        if (m(y, x) != phantom::kFollicle) continue;
        CHECK(y > 0);
        CHECK(x > 0);
        CHECK(y < m.height - 1);
        CHECK(x < m.width - 1);
        // Follicles sit inside the ovary: no background neighbour.
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) CHECK(m(y + dy, x + dx) != phantom::kBackground);
      }
    for (float v : s.image.values()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    for (std::uint8_t c : m.cells) CHECK(c <= 2);
  }
}

TEST_CASE("speckle has unit mean") {
  double sum = 0;
  std::size_t n = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const auto layers = phantom::generate_phantom_layers(phantom::sample_seed(5, i), PhantomConfig{});
    for (float v : layers.speckle.values()) {
      sum += v;
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  CHECK(mean >= 0.9);
  CHECK(mean <= 1.1);
}

TEST_CASE("noise-free maps recover the follicle mask") {
  double worst_exact = 1.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto l = phantom::generate_phantom_layers(phantom::sample_seed(9, i), PhantomConfig{});
    std::vector<bool> truth, exact;
    for (std::size_t k = 0; k < l.sample.mask.cells.size(); ++k) {
      truth.push_back(l.sample.mask.cells[k] == phantom::kFollicle);
      exact.push_back(l.echo_map[k] < 0.25f);
    }
    worst_exact = std::min(worst_exact, dice(truth, exact));
    // After smoothing, follicles stay the darkest tissue.
    CHECK(mean_where(l.base_tissue, l.sample.mask, phantom::kFollicle) <
          mean_where(l.base_tissue, l.sample.mask, phantom::kOvary));
    CHECK(mean_where(l.base_tissue, l.sample.mask, phantom::kOvary) <
          mean_where(l.base_tissue, l.sample.mask, phantom::kBackground) + 0.1);
  }
  CHECK(worst_exact >= 0.95);
}

TEST_CASE("invalid configs name the field") {
  PhantomConfig c;
  c.image_size = 48;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("image_size"), ConfigError);
  c = {};
  c.follicle_count_min = 4;
  c.follicle_count_max = 2;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("follicle_count_range"), ConfigError);
  c = {};
  c.ovary_axis_min = 0.0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("ovary_axis_range"), ConfigError);
  c = {};
  c.echogenicity.rim_gain = 0.0;
  CHECK_THROWS_WITH_AS(phantom::generate_phantom(1, c), doctest::Contains("rim_gain"), ConfigError);
}

TEST_CASE("split counts") {
  CHECK(phantom::train_count(256, 0.87) == 223);
  CHECK(phantom::train_count(1, 0.87) == 1);
  CHECK(phantom::train_count(100, 0.87) == 87);
  CHECK(phantom::train_count(10, 0.85) == 9);  // 8.5 rounds up
}

TEST_CASE("dataset on disk") {
  testutil::TempDir dir("phantom");
  PhantomConfig cfg;
  cfg.n_samples = 12;
  cfg.seed = 4;
  const phantom::Manifest m = phantom::generate_dataset(cfg, dir.path() / "a");
  CHECK(m.entries.size() == 12);
  CHECK(m.train_ids.size() == 10);
  CHECK(m.test_ids.size() == 2);
  std::set<std::string> train(m.train_ids.begin(), m.train_ids.end());
  for (const auto& id : m.test_ids) CHECK(train.count(id) == 0);

  for (const auto& e : m.entries) {
    CHECK(std::filesystem::exists(dir.path() / "a" / e.image_path));
    const png::Raster mask = png::decode(png::read_file(dir.path() / "a" / e.mask_path));
    CHECK(mask.channels == 1);
    const phantom::Sample s = phantom::load_sample(dir.path() / "a", e);
    for (int y = 0; y < mask.height; ++y)
      for (int x = 0; x < mask.width; ++x) CHECK(mask.at(y, x) == s.mask(y, x));
  }
  const phantom::Manifest again = phantom::generate_dataset(cfg, dir.path() / "b");
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(dir.path() / "a" / "manifest.json") == slurp(dir.path() / "b" / "manifest.json"));
  CHECK(phantom::load_manifest(dir.path() / "a").train_ids == m.train_ids);

  // The stored image is the 8-bit quantization of the generated one.
  const phantom::Sample loaded = phantom::load_sample(dir.path() / "a", m.entries.front());
  const phantom::Sample fresh = phantom::generate_phantom(phantom::sample_seed(cfg.seed, 0), cfg);
  REQUIRE(loaded.image.shape() == Shape{1, 1, 64, 64});
  CHECK(max_abs_diff(loaded.image, fresh.image) <= 0.5f / 255.0f + 1e-6f);
  CHECK(loaded.mask == fresh.mask);
  CHECK(std::filesystem::path(m.entries.front().image_path).is_relative());

  cfg.n_samples = 0;
  CHECK_THROWS_AS(phantom::generate_dataset(cfg, dir.path() / "c"), ConfigError);
  cfg.n_samples = 1;
  const phantom::Manifest one = phantom::generate_dataset(cfg, dir.path() / "d");
  CHECK(one.train_ids.size() == 1);
  CHECK(one.test_ids.empty());
}

}  // TEST_SUITE
