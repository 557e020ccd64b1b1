#ifndef LOIRE_CONFIG_HPP_
#define LOIRE_CONFIG_HPP_

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "loire/layout.hpp"
#include "loire/layout_train.hpp"
#include "loire/text_encoder.hpp"

namespace loire {

/// Schema violation in a run configuration (unknown key, wrong type, bad value).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  double min_area_frac = 0.02;
  int max_objects = 20;
  int grammar_classes = 8;
  int grammar_grid = 4;
  std::uint64_t grammar_seed = 7;
  int scenes = 2000;
  int questions = 500;
  int choices = 5;
  double qa_dev_frac = 0.2;
  bool operator==(const DataConfig&) const = default;
};

struct MlmConfig {
  double mask_rate = 0.15;
  TrainConfig train;
  bool operator==(const MlmConfig&) const = default;
};

struct GridSearch {
  std::vector<double> lr;
  std::vector<int> epochs;
  std::vector<int> batch_size;
  bool operator==(const GridSearch&) const = default;
};

struct ReasonerConfig {
  EncoderConfig lm;
  TrainConfig train;
  bool prefix = true;
  std::string style = "csqa";
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  GridSearch grid;
  bool operator==(const ReasonerConfig&) const = default;
};

/// Every knob of a run in one document. Zero vocab/class sizes are filled from the data.
struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 1;
  std::string precision = "f32";  // f32 | f64
  DataConfig data;
  EncoderConfig encoder;
  LayoutConfig layout;
  TrainConfig layout_train;
  MlmConfig mlm;
  ReasonerConfig reasoner;
  bool operator==(const RunConfig&) const = default;
};

// ---------------------------------------------------------------------------
// JSON mapping.

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"hidden", c.hidden},   {"layers", c.layers},   {"heads", c.heads},
          {"ff", c.ff},                 {"max_len", c.max_len}, {"dropout", c.dropout}, {"seed", c.seed},
          {"init_std", c.init_std}};
}

inline nlohmann::json to_json(const LayoutConfig& c) {
  return {{"num_classes", c.num_classes},     {"raster", c.raster},           {"stem_channels", c.stem_channels},
          {"state_channels", c.state_channels}, {"label_embed", c.label_embed}, {"hidden", c.hidden},
          {"head_channels", c.head_channels}, {"max_steps", c.max_steps}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"step_size", c.step_size},
          {"gamma", c.gamma},
          {"seed", c.seed},
          {"optimizer", c.optimizer},
          {"weight_decay", c.weight_decay},
          {"warmup_frac", c.warmup_frac},
          {"val_frac", c.val_frac},
          {"serial", c.serial}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["profile"] = c.profile;
  j["seed"] = c.seed;
  j["precision"] = c.precision;
  j["data"] = {{"min_area_frac", c.data.min_area_frac}, {"max_objects", c.data.max_objects},
               {"grammar_classes", c.data.grammar_classes}, {"grammar_grid", c.data.grammar_grid},
               {"grammar_seed", c.data.grammar_seed},   {"scenes", c.data.scenes},
               {"questions", c.data.questions},         {"choices", c.data.choices},
               {"qa_dev_frac", c.data.qa_dev_frac}};
  j["encoder"] = to_json(c.encoder);
  j["layout"] = to_json(c.layout);
  j["layout_train"] = to_json(c.layout_train);
  j["mlm"] = {{"mask_rate", c.mlm.mask_rate}, {"train", to_json(c.mlm.train)}};
  j["reasoner"] = {{"lm", to_json(c.reasoner.lm)},
                   {"train", to_json(c.reasoner.train)},
                   {"prefix", c.reasoner.prefix},
                   {"style", c.reasoner.style},
                   {"seeds", c.reasoner.seeds},
                   {"grid",
                    {{"lr", c.reasoner.grid.lr},
                     {"epochs", c.reasoner.grid.epochs},
                     {"batch_size", c.reasoner.grid.batch_size}}}};
  return j;
}

namespace detail {

inline void read_encoder(const nlohmann::json& j, EncoderConfig& c) {
  c.vocab_size = j.at("vocab_size");
  c.hidden = j.at("hidden");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.ff = j.at("ff");
  c.max_len = j.at("max_len");
  c.dropout = j.at("dropout");
  c.seed = j.at("seed");
  c.init_std = j.at("init_std");
}

inline void read_layout(const nlohmann::json& j, LayoutConfig& c) {
  c.num_classes = j.at("num_classes");
  c.raster = j.at("raster");
  c.stem_channels = j.at("stem_channels");
  c.state_channels = j.at("state_channels");
  c.label_embed = j.at("label_embed");
  c.hidden = j.at("hidden");
  c.head_channels = j.at("head_channels");
  c.max_steps = j.at("max_steps");
}

inline void read_train(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.at("lr");
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  c.step_size = j.at("step_size");
  c.gamma = j.at("gamma");
  c.seed = j.at("seed");
  c.optimizer = j.at("optimizer");
  c.weight_decay = j.at("weight_decay");
  c.warmup_frac = j.at("warmup_frac");
  c.val_frac = j.at("val_frac");
  c.serial = j.at("serial");
}

inline std::string kind_of(const nlohmann::json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

/// Overlays `patch` onto `base`, refusing keys and types the base does not have.
inline void overlay(nlohmann::json& base, const nlohmann::json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config" + (path.empty() ? "" : " key '" + path + "'") + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + full + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      overlay(slot, value, full);
      continue;
    }
    const bool ok = slot.is_number_float()     ? value.is_number()
                    : slot.is_number_integer() ? value.is_number_integer()
                    : slot.is_array()          ? value.is_array()
                                               : kind_of(slot) == kind_of(value);
    if (!ok)
      throw ConfigError("config key '" + full + "' expects " + kind_of(slot) + ", got " + kind_of(value) + " " +
                        value.dump());
    if (slot.is_number_integer() && slot.is_number_unsigned() && value.get<long long>() < 0)
      throw ConfigError("config key '" + full + "' must be non-negative");
    slot = slot.is_number_float() ? nlohmann::json(value.get<double>()) : value;
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.profile = j.at("profile");
    c.seed = j.at("seed");
    c.precision = j.at("precision");
    const auto& d = j.at("data");
    c.data.min_area_frac = d.at("min_area_frac");
    c.data.max_objects = d.at("max_objects");
    c.data.grammar_classes = d.at("grammar_classes");
    c.data.grammar_grid = d.at("grammar_grid");
    c.data.grammar_seed = d.at("grammar_seed");
    c.data.scenes = d.at("scenes");
    c.data.questions = d.at("questions");
    c.data.choices = d.at("choices");
    c.data.qa_dev_frac = d.at("qa_dev_frac");
    detail::read_encoder(j.at("encoder"), c.encoder);
    detail::read_layout(j.at("layout"), c.layout);
    detail::read_train(j.at("layout_train"), c.layout_train);
    c.mlm.mask_rate = j.at("mlm").at("mask_rate");
    detail::read_train(j.at("mlm").at("train"), c.mlm.train);
    const auto& r = j.at("reasoner");
    detail::read_encoder(r.at("lm"), c.reasoner.lm);
    detail::read_train(r.at("train"), c.reasoner.train);
    c.reasoner.prefix = r.at("prefix");
    c.reasoner.style = r.at("style");
    c.reasoner.seeds = r.at("seeds").get<std::vector<std::uint64_t>>();
    c.reasoner.grid.lr = r.at("grid").at("lr").get<std::vector<double>>();
    c.reasoner.grid.epochs = r.at("grid").at("epochs").get<std::vector<int>>();
    c.reasoner.grid.batch_size = r.at("grid").at("batch_size").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return c;
}

/// Range checks that do not depend on the data.
inline void validate(const RunConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(c.profile == "desk" || c.profile == "paper", "profile must be desk or paper");
  need(c.precision == "f32" || c.precision == "f64", "precision must be f32 or f64");
  need(c.data.min_area_frac >= 0 && c.data.min_area_frac < 1, "data.min_area_frac must be in [0,1)");
  need(c.data.max_objects >= 1, "data.max_objects must be positive");
  need(c.data.choices >= 2, "data.choices must be at least 2");
  need(c.data.qa_dev_frac > 0 && c.data.qa_dev_frac < 1, "data.qa_dev_frac must be in (0,1)");
  need(c.mlm.mask_rate > 0 && c.mlm.mask_rate < 1, "mlm.mask_rate must be in (0,1)");
  need(c.reasoner.style == "csqa" || c.reasoner.style == "winogrande", "reasoner.style must be csqa or winogrande");
  need(!c.reasoner.seeds.empty(), "reasoner.seeds must not be empty");
  try {
    c.layout_train.validate();
    c.mlm.train.validate();
    c.reasoner.train.validate();
    LayoutConfig layout = c.layout;
    if (layout.num_classes == 0) layout.num_classes = 1;  // filled from the label vocab later
    layout.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  need(c.encoder.hidden % c.encoder.heads == 0, "encoder.hidden must be divisible by encoder.heads");
  need(c.reasoner.lm.hidden % c.reasoner.lm.heads == 0, "reasoner.lm.hidden must be divisible by reasoner.lm.heads");
}

// ---------------------------------------------------------------------------
// Profiles.

/// Tiny models on the synthetic grammar; every stage finishes in minutes on one CPU core.
inline RunConfig desk_profile() {
  RunConfig c;
  c.profile = "desk";
  c.encoder = EncoderConfig{0, 64, 2, 4, 128, 32, 0.1, 1};
  c.layout = LayoutConfig{0, 32, 8, 16, 16, 64, 4, 20};
  c.layout_train = TrainConfig{};
  c.layout_train.lr = 1e-3;
  c.layout_train.batch_size = 16;
  c.layout_train.epochs = 20;
  c.layout_train.step_size = 5;
  c.layout_train.gamma = 0.5;
  c.mlm.train = c.layout_train;
  c.mlm.train.epochs = 10;
  c.reasoner.lm = EncoderConfig{0, 32, 2, 2, 64, 32, 0.1, 1};
  c.reasoner.train = TrainConfig{};
  c.reasoner.train.optimizer = "adamw";
  c.reasoner.train.lr = 3e-3;
  c.reasoner.train.weight_decay = 0.01;
  c.reasoner.train.batch_size = 16;
  c.reasoner.train.epochs = 10;
  c.reasoner.train.warmup_frac = 0.1;
  c.reasoner.grid = GridSearch{{1e-3, 3e-3}, {5, 10}, {8, 16}};
  return c;
}

/// Full-size hyperparameters; expects external data and pretrained-size encoders.
inline RunConfig paper_profile() {
  RunConfig c;
  c.profile = "paper";
  c.data.scenes = 0;
  c.data.questions = 0;
  c.encoder = EncoderConfig{0, 768, 12, 12, 3072, 128, 0.1, 1};
  c.layout = LayoutConfig{0, 64, 16, 64, 32, 128, 8, 20};
  c.layout_train = TrainConfig{};  // lr 5e-5, batch 32, 15 epochs, StepLR 3 / 0.8
  c.mlm.train = c.layout_train;
  c.reasoner.lm = c.encoder;
  c.reasoner.train = TrainConfig{};
  c.reasoner.train.optimizer = "adamw";
  c.reasoner.train.lr = 2e-5;
  c.reasoner.train.weight_decay = 0.01;
  c.reasoner.train.batch_size = 16;
  c.reasoner.train.epochs = 5;
  c.reasoner.train.warmup_frac = 0.1;
  c.reasoner.grid = GridSearch{{1e-5, 2e-5}, {3, 5, 8}, {8, 16, 32}};
  return c;
}

inline RunConfig profile_config(const std::string& name) {
  if (name == "desk") return desk_profile();
  if (name == "paper") return paper_profile();
  throw ConfigError("unknown profile '" + name + "' (desk|paper)");
}

/// Parses a dotted override "a.b.c=value"; the value is read as JSON, falling back to a bare string.
inline nlohmann::json dotted_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json patch = value;
  std::string rest = path;
  std::vector<std::string> keys;
  for (std::size_t start = 0;;) {
    const auto dot = rest.find('.', start);
    keys.push_back(rest.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) {
    if (it->empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    patch = nlohmann::json{{*it, patch}};
  }
  return patch;
}

/**
 * Starts from a profile, then applies an optional JSON document and dotted
 * overrides, in that order. Unknown keys and type changes are rejected. A
 * "profile" key inside the document selects the starting profile unless one
 * is given explicitly.
 */
inline RunConfig resolve_config(const std::string& profile, const nlohmann::json& document,
                                const std::vector<std::string>& overrides = {}) {
  std::string start = profile;
  if (start.empty()) start = document.is_object() && document.contains("profile") ? document.at("profile").get<std::string>() : "desk";
  nlohmann::json base = to_json(profile_config(start));
  if (!document.is_null()) {
    nlohmann::json doc = document;
    if (doc.contains("profile") && doc.at("profile") != start)
      throw ConfigError("config document is for profile '" + doc.at("profile").get<std::string>() +
                        "' but profile '" + start + "' was requested");
    detail::overlay(base, doc, "");
  }
  for (const auto& o : overrides) {
    const auto patch = dotted_override(o);
    if (patch.contains("profile")) throw ConfigError("profile cannot be overridden with a dotted path");
    detail::overlay(base, patch, "");
  }
  RunConfig c = run_config_from_json(base);
  validate(c);
  return c;
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

}  // namespace loire

#endif  // LOIRE_CONFIG_HPP_
