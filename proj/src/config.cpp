#include "pgsgan/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "pgsgan/error.hpp"

namespace pgsgan::config {

namespace {

using Setter = std::function<void(RunConfig&, const toml::node&, const std::string&)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Entry {
  std::string key;
  std::string help;
  Getter get;
  Setter set;
};

[[noreturn]] void type_error(const std::string& key, const char* expected) {
  throw ConfigError("config key '" + key + "' expects " + expected);
}

std::int64_t as_int(const toml::node& n, const std::string& key) {
  if (const auto* v = n.as_integer()) return v->get();
  type_error(key, "an integer");
}

double as_double(const toml::node& n, const std::string& key) {
  if (const auto* v = n.as_floating_point()) return v->get();
  if (const auto* v = n.as_integer()) return static_cast<double>(v->get());
  type_error(key, "a number");
}

bool as_bool(const toml::node& n, const std::string& key) {
  if (const auto* v = n.as_boolean()) return v->get();
  type_error(key, "true or false");
}

std::string as_string(const toml::node& n, const std::string& key) {
  if (const auto* v = n.as_string()) return v->get();
  type_error(key, "a string");
}

std::vector<int> as_int_array(const toml::node& n, const std::string& key) {
  const auto* arr = n.as_array();
  if (!arr) type_error(key, "an array of integers");
  std::vector<int> out;
  for (const auto& el : *arr) out.push_back(static_cast<int>(as_int(el, key)));
  return out;
}

template <typename F>
std::string fmt_real(F v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}
std::string fmt(double v) { return fmt_real(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }
std::string fmt(const std::string& v) { return "\"" + v + "\""; }
std::string fmt(const std::vector<int>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

template <typename T>
Entry int_entry(std::string key, std::string help, T RunConfig::*group, int T::*field) {
  return {std::move(key), std::move(help), [group, field](const RunConfig& c) { return std::to_string(c.*group.*field); },
          [group, field](RunConfig& c, const toml::node& n, const std::string& k) {
            c.*group.*field = static_cast<int>(as_int(n, k));
          }};
}

template <typename T>
Entry double_entry(std::string key, std::string help, T RunConfig::*group, double T::*field) {
  return {std::move(key), std::move(help), [group, field](const RunConfig& c) { return fmt(c.*group.*field); },
          [group, field](RunConfig& c, const toml::node& n, const std::string& k) {
            c.*group.*field = as_double(n, k);
          }};
}

std::string upsample_name(sgan::UpsampleMode m) {
  return m == sgan::UpsampleMode::resize_conv ? "resize-conv" : "transposed-conv";
}

std::vector<Entry> build_entries() {
  using R = RunConfig;
  std::vector<Entry> e;
  e.push_back(int_entry("phantom.image_size", "phantom side length in pixels", &R::phantom,
                        &phantom::PhantomConfig::image_size));
  e.push_back(int_entry("phantom.n_samples", "number of phantoms", &R::phantom, &phantom::PhantomConfig::n_samples));
  e.push_back({"phantom.seed", "dataset seed",
               [](const R& c) { return std::to_string(c.phantom.seed); },
               [](R& c, const toml::node& n, const std::string& k) {
                 c.phantom.seed = static_cast<std::uint64_t>(as_int(n, k));
               }});
  e.push_back(int_entry("phantom.follicle_count_min", "fewest follicles per phantom", &R::phantom,
                        &phantom::PhantomConfig::follicle_count_min));
  e.push_back(int_entry("phantom.follicle_count_max", "most follicles per phantom", &R::phantom,
                        &phantom::PhantomConfig::follicle_count_max));
  e.push_back(double_entry("phantom.ovary_axis_min", "smallest ovary axis, fraction of image size", &R::phantom,
                           &phantom::PhantomConfig::ovary_axis_min));
  e.push_back(double_entry("phantom.ovary_axis_max", "largest ovary axis, fraction of image size", &R::phantom,
                           &phantom::PhantomConfig::ovary_axis_max));
  e.push_back(double_entry("phantom.follicle_axis_min", "smallest follicle axis, fraction of ovary axis",
                           &R::phantom, &phantom::PhantomConfig::follicle_axis_min));
  e.push_back(double_entry("phantom.follicle_axis_max", "largest follicle axis, fraction of ovary axis",
                           &R::phantom, &phantom::PhantomConfig::follicle_axis_max));
  e.push_back({"phantom.echo_background", "background echogenicity",
               [](const R& c) { return fmt(c.phantom.echogenicity.background); },
               [](R& c, const toml::node& n, const std::string& k) { c.phantom.echogenicity.background = as_double(n, k); }});
  e.push_back({"phantom.echo_ovary", "ovary echogenicity",
               [](const R& c) { return fmt(c.phantom.echogenicity.ovary); },
               [](R& c, const toml::node& n, const std::string& k) { c.phantom.echogenicity.ovary = as_double(n, k); }});
  e.push_back({"phantom.echo_follicle", "follicle echogenicity",
               [](const R& c) { return fmt(c.phantom.echogenicity.follicle); },
               [](R& c, const toml::node& n, const std::string& k) { c.phantom.echogenicity.follicle = as_double(n, k); }});
  e.push_back({"phantom.rim_gain", "gain on the ovary boundary rim",
               [](const R& c) { return fmt(c.phantom.echogenicity.rim_gain); },
               [](R& c, const toml::node& n, const std::string& k) { c.phantom.echogenicity.rim_gain = as_double(n, k); }});
  e.push_back(double_entry("phantom.train_fraction", "fraction of samples in the training split", &R::phantom,
                           &phantom::PhantomConfig::train_fraction));

  e.push_back(double_entry("canny.sigma", "Gaussian sigma of the 5x5 smoothing window", &R::canny,
                           &sketch::CannyParams::gaussian_sigma));
  e.push_back(double_entry("canny.low", "low threshold, fraction of max gradient", &R::canny,
                           &sketch::CannyParams::low_threshold));
  e.push_back(double_entry("canny.high", "high threshold, fraction of max gradient", &R::canny,
                           &sketch::CannyParams::high_threshold));

  e.push_back(int_entry("generator.base_width", "channels after the first convolution", &R::generator,
                        &sgan::GeneratorConfig::base_width));
  e.push_back(int_entry("generator.n_downsample", "stride-2 stages", &R::generator,
                        &sgan::GeneratorConfig::n_downsample));
  e.push_back(int_entry("generator.n_residual_blocks", "residual blocks in the bottleneck", &R::generator,
                        &sgan::GeneratorConfig::n_residual_blocks));
  e.push_back({"generator.upsample", "\"resize-conv\" or \"transposed-conv\"",
               [](const R& c) { return fmt(upsample_name(c.generator.upsample)); },
               [](R& c, const toml::node& n, const std::string& k) {
                 const std::string s = as_string(n, k);
                 if (s == "resize-conv") {
                   c.generator.upsample = sgan::UpsampleMode::resize_conv;
                 } else if (s == "transposed-conv") {
                   c.generator.upsample = sgan::UpsampleMode::transposed_conv;
                 } else {
                   throw ConfigError("generator.upsample must be \"resize-conv\" or \"transposed-conv\", got \"" +
                                     s + "\"");
                 }
               }});

  e.push_back({"discriminator.widths", "hidden layer widths",
               [](const R& c) { return fmt(c.discriminator.widths); },
               [](R& c, const toml::node& n, const std::string& k) { c.discriminator.widths = as_int_array(n, k); }});
  e.push_back({"discriminator.strides", "stride of every layer, final layer included",
               [](const R& c) { return fmt(c.discriminator.strides); },
               [](R& c, const toml::node& n, const std::string& k) { c.discriminator.strides = as_int_array(n, k); }});
  e.push_back(int_entry("discriminator.kernel", "kernel size", &R::discriminator, &sgan::DiscriminatorConfig::kernel));
  e.push_back(int_entry("discriminator.padding", "padding", &R::discriminator, &sgan::DiscriminatorConfig::padding));

  e.push_back(int_entry("train.base_resolution", "resolution before growth", &R::plan,
                        &trainer::PhasePlan::base_resolution));
  e.push_back(int_entry("train.grown_resolution", "resolution after growth", &R::plan,
                        &trainer::PhasePlan::grown_resolution));
  for (int i = 0; i < 4; ++i) {
    e.push_back({"train.phase" + std::to_string(i + 1) + "_epochs", "epochs in phase " + std::to_string(i + 1),
                 [i](const R& c) { return std::to_string(c.plan.phase_epochs[i]); },
                 [i](R& c, const toml::node& n, const std::string& k) {
                   c.plan.phase_epochs[i] = static_cast<int>(as_int(n, k));
                 }});
  }
  e.push_back(int_entry("train.batch_size", "samples per optimizer step", &R::plan, &trainer::PhasePlan::batch_size));
  e.push_back({"train.lambda", "weight of the L1 term",
               [](const R& c) { return fmt(c.plan.options.lambda); },
               [](R& c, const toml::node& n, const std::string& k) { c.plan.options.lambda = as_double(n, k); }});
  e.push_back({"train.lr_g", "generator learning rate",
               [](const R& c) { return fmt_real(c.plan.options.lr_g); },
               [](R& c, const toml::node& n, const std::string& k) {
                 c.plan.options.lr_g = static_cast<float>(as_double(n, k));
               }});
  e.push_back({"train.lr_d", "discriminator learning rate",
               [](const R& c) { return fmt_real(c.plan.options.lr_d); },
               [](R& c, const toml::node& n, const std::string& k) {
                 c.plan.options.lr_d = static_cast<float>(as_double(n, k));
               }});
  e.push_back({"train.adversarial", "\"non-saturating\" or \"saturating\" generator loss",
               [](const R& c) {
                 return fmt(std::string(c.plan.options.form == sgan::AdversarialForm::non_saturating ? "non-saturating"
                                                                                                     : "saturating"));
               },
               [](R& c, const toml::node& n, const std::string& k) {
                 const std::string s = as_string(n, k);
                 if (s == "non-saturating") {
                   c.plan.options.form = sgan::AdversarialForm::non_saturating;
                 } else if (s == "saturating") {
                   c.plan.options.form = sgan::AdversarialForm::saturating;
                 } else {
                   throw ConfigError("train.adversarial must be \"non-saturating\" or \"saturating\", got \"" + s + "\"");
                 }
               }});
  e.push_back({"train.seed", "network initialisation and shuffling seed",
               [](const R& c) { return std::to_string(c.plan.seed); },
               [](R& c, const toml::node& n, const std::string& k) {
                 c.plan.seed = static_cast<std::uint64_t>(as_int(n, k));
               }});
  e.push_back({"train.plateau_stop", "end a phase early when validation L1 stalls",
               [](const R& c) { return fmt(c.plan.plateau_stop); },
               [](R& c, const toml::node& n, const std::string& k) { c.plan.plateau_stop = as_bool(n, k); }});
  e.push_back(int_entry("train.quick_fid_samples", "test samples used for the per-epoch FID", &R::plan,
                        &trainer::PhasePlan::quick_fid_samples));
  e.push_back({"train.mask_only", "drop the sketch channel (ablation)",
               [](const R& c) { return fmt(c.mask_only); },
               [](R& c, const toml::node& n, const std::string& k) { c.mask_only = as_bool(n, k); }});

  e.push_back(double_entry("fib.increment", "alpha increment per update", &R::plan,
                           &trainer::PhasePlan::alpha_increment));
  e.push_back({"fib.step_unit", "\"per-step\" or \"per-epoch\"",
               [](const R& c) { return fmt(fib::to_string(c.plan.alpha_step_unit)); },
               [](R& c, const toml::node& n, const std::string& k) {
                 try {
                   c.plan.alpha_step_unit = fib::step_unit_from_string(as_string(n, k));
                 } catch (const Error& err) {
                   throw ConfigError(std::string("fib.step_unit: ") + err.what());
                 }
               }});
  e.push_back(double_entry("fib.generator_ceiling", "largest generator alpha", &R::plan,
                           &trainer::PhasePlan::generator_ceiling));
  e.push_back(double_entry("fib.discriminator_ceiling", "largest discriminator alpha", &R::plan,
                           &trainer::PhasePlan::discriminator_ceiling));

  e.push_back({"metrics.extractor_seed", "seed of the fixed feature extractor",
               [](const R& c) { return std::to_string(c.extractor_seed); },
               [](R& c, const toml::node& n, const std::string& k) {
                 c.extractor_seed = static_cast<std::uint64_t>(as_int(n, k));
               }});

  e.push_back(int_entry("serve.port", "HTTP port", &R::serve, &ServeOptions::port));
  e.push_back(int_entry("serve.max_concurrency", "generator evaluations running at once", &R::serve,
                        &ServeOptions::max_concurrency));
  e.push_back({"serve.allow_origin", "CORS origin; empty disables CORS headers",
               [](const R& c) { return fmt(c.serve.allow_origin); },
               [](R& c, const toml::node& n, const std::string& k) { c.serve.allow_origin = as_string(n, k); }});
  return e;
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> e = build_entries();
  return e;
}

const Entry* find_entry(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.key == key) return &e;
  }
  return nullptr;
}

bool is_prefix_of_key(const std::string& prefix) {
  for (const auto& e : entries()) {
    if (e.key.rfind(prefix + ".", 0) == 0) return true;
  }
  return false;
}

void apply_table(RunConfig& cfg, const toml::table& table, const std::string& prefix, const std::string& source) {
  for (const auto& [k, node] : table) {
    const std::string key = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
    if (const Entry* e = find_entry(key)) {
      e->set(cfg, node, key);
    } else if (node.is_table() && is_prefix_of_key(key)) {
      apply_table(cfg, *node.as_table(), key, source);
    } else {
      throw ConfigError("unknown config key '" + key + "' in " + source);
    }
  }
}

}  // namespace

void RunConfig::validate() const {
  phantom.validate();
  canny.validate();
  generator.validate();
  discriminator.validate();
  plan.validate();
  if (generator.input_channels != sketch::kLabelChannels || discriminator.input_channels != sketch::kLabelChannels + 1) {
    throw ConfigError("network input channels must match the 3-channel composite label");
  }
  if (phantom.image_size != plan.grown_resolution) {
    throw ConfigError("phantom.image_size must equal train.grown_resolution");
  }
  if (serve.port < 0 || serve.port > 65535) throw ConfigError("serve.port out of range");
  if (serve.max_concurrency < 1) throw ConfigError("serve.max_concurrency must be >= 1");
}

const std::vector<KeyInfo>& known_keys() {
  static const std::vector<KeyInfo> keys = [] {
    const RunConfig defaults;
    std::vector<KeyInfo> out;
    for (const auto& e : entries()) out.push_back({e.key, e.get(defaults), e.help});
    return out;
  }();
  return keys;
}

RunConfig parse_toml(const std::string& text, const std::string& source) {
  toml::table table;
  try {
    table = toml::parse(text, source);
  } catch (const toml::parse_error& err) {
    std::ostringstream os;
    os << source << ":" << err.source().begin.line << ": " << err.description();
    throw ConfigError(os.str());
  }
  RunConfig cfg;
  apply_table(cfg, table, "", source);
  cfg.validate();
  return cfg;
}

RunConfig load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_toml(ss.str(), path.string());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  const std::string key = trim(assignment.substr(0, eq));
  const Entry* entry = find_entry(key);
  if (!entry) throw ConfigError("unknown config key '" + key + "'");
  std::string value = trim(assignment.substr(eq + 1));
  toml::table t;
  try {
    t = toml::parse("v = " + value);
  } catch (const toml::parse_error&) {
    // Bare words are taken as strings so "--set fib.step_unit=per-epoch" works.
    try {
      t = toml::parse("v = \"" + value + "\"");
    } catch (const toml::parse_error& err) {
      throw ConfigError("cannot parse value for '" + key + "': " + std::string(err.description()));
    }
  }
  entry->set(cfg, *t.get("v"), key);
  cfg.validate();
}

nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& e : entries()) {
    const toml::table t = toml::parse("v = " + e.get(cfg));
    const toml::node& n = *t.get("v");
    if (const auto* v = n.as_integer()) {
      j[e.key] = v->get();
    } else if (const auto* f = n.as_floating_point()) {
      j[e.key] = f->get();
    } else if (const auto* b = n.as_boolean()) {
      j[e.key] = b->get();
    } else if (const auto* s = n.as_string()) {
      j[e.key] = s->get();
    } else if (n.is_array()) {
      j[e.key] = as_int_array(n, e.key);
    }
  }
  return j;
}

std::string to_toml(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key + " = " + e.get(cfg) + "\n";
  return out;
}

}  // namespace pgsgan::config
