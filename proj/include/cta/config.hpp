#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cta/data.hpp"
#include "cta/model.hpp"
#include "cta/train.hpp"

namespace cta {

struct RunOptions {
  std::string out_dir = "runs";
  std::size_t checkpoint_every = 1;  // epochs; the final epoch is always saved
};

/// Ablation axes. A named ladder supplies the base cells; every non-empty
/// axis list is crossed with them.
struct GridSpec {
  std::string ladder = "none";  // none | components | variants | scales
  std::vector<AttentionKind> attention;
  std::vector<RrcvVariant> rrcv;
  std::vector<std::vector<std::size_t>> scales;
  std::vector<std::size_t> batch, depth, heads;

  bool empty() const {
    return ladder == "none" && attention.empty() && rrcv.empty() && scales.empty() && batch.empty() && depth.empty() &&
           heads.empty();
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetSpec data;
  RunOptions run;
  GridSpec grid;

  void validate() const;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  s.erase(s.find_last_not_of(ws) + 1);
  return s;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(trim(item));
  return out;
}

template <typename U>
U parse_number(const std::string& key, const std::string& text) {
  U v{};
  const auto t = trim(text);
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty())
    throw ConfigError("invalid value '" + text + "' for key " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  if (t == "true" || t == "1" || t == "on" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "off" || t == "no") return false;
  throw ConfigError("invalid boolean '" + text + "' for key " + key);
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename U, typename F>
std::string join(const std::vector<U>& xs, F&& fmt, char sep = ',') {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? std::string(1, sep) : "") + fmt(xs[i]);
  return s;
}

struct KeySpec {
  std::string key;
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename U>
KeySpec size_key(std::string key, std::string doc, U RunConfig::*section, std::size_t U::*field) {
  return {key, std::move(doc), [=](const RunConfig& c) { return std::to_string(c.*section.*field); },
          [=](RunConfig& c, const std::string& v) { c.*section.*field = parse_number<std::size_t>(key, v); }};
}

template <typename U>
KeySpec double_key(std::string key, std::string doc, U RunConfig::*section, double U::*field) {
  return {key, std::move(doc), [=](const RunConfig& c) { return format_double(c.*section.*field); },
          [=](RunConfig& c, const std::string& v) { c.*section.*field = parse_number<double>(key, v); }};
}

inline KeySpec aug_flag(std::string key, std::string doc, bool AugmentFlags::*field) {
  return {key, std::move(doc), [=](const RunConfig& c) { return std::string(c.data.augment.*field ? "true" : "false"); },
          [=](RunConfig& c, const std::string& v) { c.data.augment.*field = parse_bool(key, v); }};
}

inline KeySpec aug_double(std::string key, std::string doc, double AugmentFlags::*field) {
  return {key, std::move(doc), [=](const RunConfig& c) { return format_double(c.data.augment.*field); },
          [=](RunConfig& c, const std::string& v) { c.data.augment.*field = parse_number<double>(key, v); }};
}

inline KeySpec size_list_key(std::string key, std::string doc, std::vector<std::size_t> GridSpec::*field) {
  return {key, std::move(doc),
          [=](const RunConfig& c) { return join(c.grid.*field, [](std::size_t x) { return std::to_string(x); }); },
          [=](RunConfig& c, const std::string& v) {
            auto& out = c.grid.*field;
            out.clear();
            for (const auto& item : split(v, ',')) out.push_back(parse_number<std::size_t>(key, item));
          }};
}

inline std::vector<KeySpec> build_keys() {
  std::vector<KeySpec> k;
  const auto M = &RunConfig::model;
  const auto Tr = &RunConfig::train;
  const auto D = &RunConfig::data;

  k.push_back(size_key("model.image_size", "input resolution; images are resized to it", M, &ModelConfig::image_size));
  k.push_back(size_key("model.patch_size", "patch edge in pixels", M, &ModelConfig::patch_size));
  k.push_back(size_key("model.in_channels", "image channels", M, &ModelConfig::in_channels));
  k.push_back(size_key("model.embed_dim", "token width D", M, &ModelConfig::embed_dim));
  k.push_back(size_key("model.depth", "number of blocks", M, &ModelConfig::depth));
  k.push_back(size_key("model.heads", "attention heads", M, &ModelConfig::heads));
  k.push_back(size_key("model.mlp_ratio", "MLP hidden width as a multiple of D", M, &ModelConfig::mlp_ratio));
  k.push_back({"model.attention", "mhsa | lmf_mhsa", [](const RunConfig& c) { return to_string(c.model.attention); },
               [](RunConfig& c, const std::string& v) { c.model.attention = parse_attention(trim(v)); }});
  k.push_back({"model.rrcv", "none | cnn | dwconv | resnet", [](const RunConfig& c) { return to_string(c.model.rrcv); },
               [](RunConfig& c, const std::string& v) { c.model.rrcv = parse_rrcv(trim(v)); }});
  k.push_back({"model.kernel_scales", "fusion kernels, e.g. 1,3,5; none disables fusion",
               [](const RunConfig& c) { return scales_to_string(c.model.kernel_scales); },
               [](RunConfig& c, const std::string& v) { c.model.kernel_scales = parse_scales(trim(v)); }});
  k.push_back(size_key("model.kv_reduction", "K/V token reduction ratio r; 1 disables", M, &ModelConfig::kv_reduction));
  k.push_back(size_key("model.num_classes", "classifier outputs", M, &ModelConfig::num_classes));
  k.push_back({"model.use_class_token", "prepend a class token",
               [](const RunConfig& c) { return std::string(c.model.use_class_token ? "true" : "false"); },
               [](RunConfig& c, const std::string& v) { c.model.use_class_token = parse_bool("model.use_class_token", v); }});
  k.push_back(size_key("model.rrcv_channels", "RRCV feature-map width; 0 derives it from D and patch", M,
                       &ModelConfig::rrcv_channels));

  k.push_back(size_key("train.epochs", "epoch budget", Tr, &TrainConfig::epochs));
  k.push_back(size_key("train.batch_size", "samples per step", Tr, &TrainConfig::batch_size));
  k.push_back(double_key("train.lr", "peak AdamW learning rate", Tr, &TrainConfig::lr));
  k.push_back(double_key("train.beta1", "AdamW first-moment decay", Tr, &TrainConfig::beta1));
  k.push_back(double_key("train.beta2", "AdamW second-moment decay", Tr, &TrainConfig::beta2));
  k.push_back(double_key("train.eps", "AdamW denominator epsilon", Tr, &TrainConfig::eps));
  k.push_back(double_key("train.weight_decay", "decoupled weight decay", Tr, &TrainConfig::weight_decay));
  k.push_back(size_key("train.warmup_epochs", "linear warmup length, must be < epochs", Tr, &TrainConfig::warmup_epochs));
  k.push_back({"train.seed", "model init, shuffling and augmentation seed",
               [](const RunConfig& c) { return std::to_string(c.train.seed); },
               [](RunConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>("train.seed", v); }});
  k.push_back({"train.dtype", "f32 | f64", [](const RunConfig& c) { return c.train.dtype; },
               [](RunConfig& c, const std::string& v) { c.train.dtype = trim(v); }});

  k.push_back({"data.kind", "cifar10 | cifar100 | synthetic", [](const RunConfig& c) { return to_string(c.data.kind); },
               [](RunConfig& c, const std::string& v) { c.data.kind = parse_dataset_kind(trim(v)); }});
  k.push_back({"data.root", "directory holding the CIFAR binary batches", [](const RunConfig& c) { return c.data.root; },
               [](RunConfig& c, const std::string& v) { c.data.root = trim(v); }});
  k.push_back({"data.subset", "stratified training subset size; 0 uses everything",
               [](const RunConfig& c) { return std::to_string(c.data.subset_size.value_or(0)); },
               [](RunConfig& c, const std::string& v) {
                 const auto n = parse_number<std::size_t>("data.subset", v);
                 c.data.subset_size = n ? std::optional<std::size_t>(n) : std::nullopt;
               }});
  k.push_back({"data.seed", "synthetic generation and subset selection seed",
               [](const RunConfig& c) { return std::to_string(c.data.seed); },
               [](RunConfig& c, const std::string& v) { c.data.seed = parse_number<std::uint64_t>("data.seed", v); }});
  k.push_back(size_key("data.synth_train", "synthetic training images", D, &DatasetSpec::synth_train));
  k.push_back(size_key("data.synth_test", "synthetic test images", D, &DatasetSpec::synth_test));
  k.push_back(size_key("data.synth_classes", "synthetic class count", D, &DatasetSpec::synth_classes));
  k.push_back(aug_flag("data.augment.crop", "random crop after reflect padding", &AugmentFlags::crop));
  k.push_back(aug_flag("data.augment.flip", "random horizontal flip", &AugmentFlags::flip));
  k.push_back(aug_flag("data.augment.rotate", "random rotation", &AugmentFlags::rotate));
  k.push_back(aug_flag("data.augment.jitter", "random brightness scale", &AugmentFlags::jitter));
  k.push_back({"data.augment.pad", "crop padding in pixels",
               [](const RunConfig& c) { return std::to_string(c.data.augment.pad); },
               [](RunConfig& c, const std::string& v) { c.data.augment.pad = parse_number<std::size_t>("data.augment.pad", v); }});
  k.push_back(aug_double("data.augment.flip_prob", "flip probability", &AugmentFlags::flip_prob));
  k.push_back(aug_double("data.augment.max_rotation_deg", "rotation range in degrees (symmetric)",
                         &AugmentFlags::max_rotation_deg));
  k.push_back(aug_double("data.augment.jitter_lo", "lower brightness factor", &AugmentFlags::jitter_lo));
  k.push_back(aug_double("data.augment.jitter_hi", "upper brightness factor", &AugmentFlags::jitter_hi));

  k.push_back({"run.out_dir", "parent directory for run directories", [](const RunConfig& c) { return c.run.out_dir; },
               [](RunConfig& c, const std::string& v) { c.run.out_dir = trim(v); }});
  k.push_back({"run.checkpoint_every", "checkpoint period in epochs",
               [](const RunConfig& c) { return std::to_string(c.run.checkpoint_every); },
               [](RunConfig& c, const std::string& v) {
                 c.run.checkpoint_every = parse_number<std::size_t>("run.checkpoint_every", v);
               }});

  k.push_back({"grid.ladder", "none | components | variants | scales", [](const RunConfig& c) { return c.grid.ladder; },
               [](RunConfig& c, const std::string& v) { c.grid.ladder = trim(v); }});
  k.push_back({"grid.attention", "attention kinds to cross, e.g. mhsa,lmf_mhsa",
               [](const RunConfig& c) { return join(c.grid.attention, [](AttentionKind a) { return to_string(a); }); },
               [](RunConfig& c, const std::string& v) {
                 c.grid.attention.clear();
                 for (const auto& s : split(v, ',')) c.grid.attention.push_back(parse_attention(s));
               }});
  k.push_back({"grid.rrcv", "RRCV variants to cross, e.g. cnn,dwconv,resnet",
               [](const RunConfig& c) { return join(c.grid.rrcv, [](RrcvVariant r) { return to_string(r); }); },
               [](RunConfig& c, const std::string& v) {
                 c.grid.rrcv.clear();
                 for (const auto& s : split(v, ',')) c.grid.rrcv.push_back(parse_rrcv(s));
               }});
  k.push_back({"grid.scales", "kernel-scale sets separated by ';', e.g. 1;3;5;1,3,5",
               [](const RunConfig& c) {
                 return join(c.grid.scales, [](const std::vector<std::size_t>& s) { return scales_to_string(s); }, ';');
               },
               [](RunConfig& c, const std::string& v) {
                 c.grid.scales.clear();
                 for (const auto& s : split(v, ';')) c.grid.scales.push_back(parse_scales(s));
               }});
  k.push_back(size_list_key("grid.batch", "batch sizes to cross", &GridSpec::batch));
  k.push_back(size_list_key("grid.depth", "depths to cross", &GridSpec::depth));
  k.push_back(size_list_key("grid.heads", "head counts to cross", &GridSpec::heads));
  return k;
}

}  // namespace detail

inline const std::vector<detail::KeySpec>& config_keys() {
  static const auto keys = detail::build_keys();
  return keys;
}

inline const detail::KeySpec& config_key(const std::string& key) {
  for (const auto& k : config_keys())
    if (k.key == key) return k;
  throw ConfigError("unknown config key '" + key + "'");
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  config_key(key).set(cfg, value);
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) { return config_key(key).get(cfg); }

/// Presets change only the model section and training budget.
inline RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "tiny") {
    c.model = ModelConfig::tiny();
  } else if (name == "paper") {
    c.model = ModelConfig::paper();
    c.train.batch_size = 16;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected tiny or paper)");
  }
  return c;
}

/// `key = value` lines; '#' starts a comment; later lines override earlier.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "<config>") {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
    const auto key = detail::trim(line.substr(0, eq));
    try {
      set_config_value(cfg, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str(), path.string());
}

/// Every key with its effective value, in table order. Feeding the result
/// back through apply_config_text reproduces `cfg` exactly.
inline std::string config_echo(const RunConfig& cfg, bool with_docs = false) {
  std::string out;
  for (const auto& k : config_keys()) {
    if (with_docs) out += "# " + k.doc + "\n";
    out += k.key + " = " + k.get(cfg) + "\n";
  }
  return out;
}

/// Only the model.* lines; stored inside checkpoints.
inline std::string model_config_text(const ModelConfig& m) {
  RunConfig c;
  c.model = m;
  std::string out;
  for (const auto& k : config_keys())
    if (k.key.rfind("model.", 0) == 0) out += k.key + " = " + k.get(c) + "\n";
  return out;
}

inline ModelConfig parse_model_config_text(const std::string& text) {
  RunConfig c;
  apply_config_text(c, text, "checkpoint");
  return c.model;
}

/// FNV-1a 64 over the echo of everything except run.* (where output goes
/// does not change what is computed).
inline std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& k : config_keys()) {
    if (k.key.rfind("run.", 0) == 0) continue;
    for (unsigned char ch : k.key + "=" + k.get(cfg) + "\n") {
      h ^= ch;
      h *= 1099511628211ull;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::size_t dataset_classes(const DatasetSpec& d) {
  switch (d.kind) {
    case DatasetKind::cifar10: return 10;
    case DatasetKind::cifar100: return 100;
    case DatasetKind::synthetic: return d.synth_classes;
  }
  return 0;
}

inline void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (model.in_channels != 3) throw ConfigError("model.in_channels must be 3 for the supported datasets");
  if (dataset_classes(data) != model.num_classes)
    throw ConfigError("data has " + std::to_string(dataset_classes(data)) + " classes but model.num_classes is " +
                      std::to_string(model.num_classes));
  if (data.kind == DatasetKind::synthetic && (data.synth_classes == 0 || data.synth_train == 0 || data.synth_test == 0))
    throw ConfigError("synthetic data needs at least one class and one image per split");
  if (data.augment.jitter_lo > data.augment.jitter_hi) throw ConfigError("data.augment.jitter_lo exceeds jitter_hi");
  if (!(data.augment.flip_prob >= 0 && data.augment.flip_prob <= 1))
    throw ConfigError("data.augment.flip_prob must lie in [0, 1]");
  if (run.checkpoint_every == 0) throw ConfigError("run.checkpoint_every must be >= 1");
  if (grid.ladder != "none" && grid.ladder != "components" && grid.ladder != "variants" && grid.ladder != "scales")
    throw ConfigError("unknown grid.ladder '" + grid.ladder + "' (expected none|components|variants|scales)");
}

}  // namespace cta
