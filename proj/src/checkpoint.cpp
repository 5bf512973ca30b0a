#include "pgsgan/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "pgsgan/error.hpp"

namespace pgsgan::checkpoint {

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void scalar(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    bytes(buf, sizeof(T));
  }
  void string(const std::string& s) {
    scalar<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void floats(const Tensor& t) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(t.data(), t.size() * sizeof(float));
    } else {
      for (float v : t.values()) scalar(v);
    }
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void bytes(void* p, std::size_t n) {
    if (n > in_.size() - pos_) throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T scalar() {
    std::uint8_t buf[sizeof(T)];
    bytes(buf, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  std::string string() {
    const auto n = scalar<std::uint32_t>();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  void floats(Tensor& t) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(t.data(), t.size() * sizeof(float));
    } else {
      for (float& v : t.values()) v = scalar<float>();
    }
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::vector<const fib::FadeInBlock*> all_fibs(const sgan::Generator& g, const sgan::Discriminator& d) {
  auto out = g.fade_in_blocks();
  for (const auto* f : d.fade_in_blocks()) out.push_back(f);
  return out;
}

nn::ParamList all_params(const sgan::Generator& g, const sgan::Discriminator& d) {
  nn::ParamList out = g.parameters();
  for (const auto& p : d.parameters()) out.push_back(p);
  return out;
}

}  // namespace

std::uint64_t architecture_hash(const sgan::Generator& g, const sgan::Discriminator& d) {
  const std::string text = g.describe() + "\n" + d.describe();
  std::uint64_t h = kFnvOffset;
  for (unsigned char c : text) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::string hash_hex(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

void to_json(nlohmann::json& j, const Metadata& m) {
  j = nlohmann::json{{"phase", m.phase},
                     {"base_resolution", m.base_resolution},
                     {"generator", m.generator},
                     {"discriminator", m.discriminator},
                     {"generator_seed", m.generator_seed},
                     {"discriminator_seed", m.discriminator_seed},
                     {"generator_grown", m.generator_grown},
                     {"discriminator_grown", m.discriminator_grown},
                     {"training", m.training}};
}

void from_json(const nlohmann::json& j, Metadata& m) {
  j.at("phase").get_to(m.phase);
  j.at("base_resolution").get_to(m.base_resolution);
  j.at("generator").get_to(m.generator);
  j.at("discriminator").get_to(m.discriminator);
  j.at("generator_seed").get_to(m.generator_seed);
  j.at("discriminator_seed").get_to(m.discriminator_seed);
  j.at("generator_grown").get_to(m.generator_grown);
  j.at("discriminator_grown").get_to(m.discriminator_grown);
  m.training = j.value("training", nlohmann::json::object());
}

std::vector<std::uint8_t> serialize(const sgan::Generator& g, const sgan::Discriminator& d, Metadata meta) {
  meta.base_resolution = g.base_resolution();
  meta.generator = g.config();
  meta.discriminator = d.config();
  meta.generator_seed = g.seed();
  meta.discriminator_seed = d.seed();
  meta.generator_grown = g.grown();
  meta.discriminator_grown = d.grown();

  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.scalar(kFormatVersion);
  w.scalar(architecture_hash(g, d));
  w.string(nlohmann::json(meta).dump());

  const nn::ParamList params = all_params(g, d);
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.string(p->name);
    const Shape& s = p->value.shape();
    for (int dim : {s.n, s.c, s.h, s.w}) w.scalar<std::int32_t>(dim);
    w.floats(p->value);
  }
  for (const auto& p : params) {
    w.scalar<std::int64_t>(p->step);
    w.floats(p->m);
    w.floats(p->v);
  }
  const auto fibs = all_fibs(g, d);
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(fibs.size()));
  for (const auto* f : fibs) {
    const fib::FibState& s = f->state();
    w.string(f->name());
    w.scalar(s.alpha);
    w.scalar(s.increment);
    w.scalar(s.ceiling);
    w.scalar<std::uint8_t>(s.step_unit == fib::StepUnit::per_step ? 0 : 1);
    w.scalar<std::int64_t>(s.updates);
  }
  return w.take();
}

Model deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a checkpoint (bad magic)");
  const auto version = r.scalar<std::uint32_t>();
  if (version != kFormatVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto stored_hash = r.scalar<std::uint64_t>();

  Model model;
  try {
    model.meta = nlohmann::json::parse(r.string()).get<Metadata>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
  const Metadata& m = model.meta;
  model.generator = std::make_unique<sgan::Generator>(m.generator, m.base_resolution, m.generator_seed);
  model.discriminator =
      std::make_unique<sgan::Discriminator>(m.discriminator, m.base_resolution, m.discriminator_seed);
  if (m.discriminator_grown) model.discriminator->grow({});
  if (m.generator_grown) model.generator->grow({});
  model.hash = architecture_hash(*model.generator, *model.discriminator);
  if (model.hash != stored_hash) {
    throw DataError("checkpoint architecture hash " + hash_hex(stored_hash) + " does not match rebuilt " +
                    hash_hex(model.hash));
  }

  const nn::ParamList params = all_params(*model.generator, *model.discriminator);
  const auto count = r.scalar<std::uint32_t>();
  if (count != params.size()) {
    throw DataError("checkpoint holds " + std::to_string(count) + " parameters, network has " +
                    std::to_string(params.size()));
  }
  for (const auto& p : params) {
    const std::string name = r.string();
    if (name != p->name) throw DataError("checkpoint parameter '" + name + "' where '" + p->name + "' expected");
    Shape s;
    s.n = r.scalar<std::int32_t>();
    s.c = r.scalar<std::int32_t>();
    s.h = r.scalar<std::int32_t>();
    s.w = r.scalar<std::int32_t>();
    if (!(s == p->value.shape())) {
      throw DataError("checkpoint parameter '" + name + "' has shape " + s.str() + ", expected " +
                      p->value.shape().str());
    }
    r.floats(p->value);
  }
  for (const auto& p : params) {
    p->step = r.scalar<std::int64_t>();
    r.floats(p->m);
    r.floats(p->v);
  }

  std::map<std::string, fib::FadeInBlock*> fibs;
  for (auto* f : model.generator->fade_in_blocks()) fibs[f->name()] = f;
  for (auto* f : model.discriminator->fade_in_blocks()) fibs[f->name()] = f;
  const auto n_fibs = r.scalar<std::uint32_t>();
  if (n_fibs != fibs.size()) throw DataError("checkpoint fade-in block count mismatch");
  for (std::uint32_t i = 0; i < n_fibs; ++i) {
    const std::string name = r.string();
    fib::FibState s;
    s.alpha = r.scalar<double>();
    s.increment = r.scalar<double>();
    s.ceiling = r.scalar<double>();
    s.step_unit = r.scalar<std::uint8_t>() == 0 ? fib::StepUnit::per_step : fib::StepUnit::per_epoch;
    s.updates = static_cast<long>(r.scalar<std::int64_t>());
    auto it = fibs.find(name);
    if (it == fibs.end()) throw DataError("checkpoint names unknown fade-in block '" + name + "'");
    it->second->set_state(s);
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint payload");
  return model;
}

void save(const std::filesystem::path& path, const sgan::Generator& g, const sgan::Discriminator& d,
          const Metadata& meta) {
  const std::vector<std::uint8_t> bytes = serialize(g, d, meta);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing", tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write", tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Model load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint", path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace pgsgan::checkpoint
