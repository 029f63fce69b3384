#pragma once

// Experiment configuration: one sectioned key-value document that fully
// determines a run. Parsing is strict (unknown keys and malformed values are
// collected and reported together); rendering emits every field so that
// parse(render(c)) == c.

#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "condistfl/federation.hpp"

namespace condistfl {

struct EvalConfig {
  bool union_mode = false;
  std::vector<std::string> datasets{"external"};  // "external" and/or "test"

  bool operator==(const EvalConfig&) const = default;
};

struct AblationConfig {
  std::vector<std::size_t> local_steps{25, 200};
  std::size_t total_steps = 1000;
  std::vector<std::string> methods{"fedavg", "condistfl"};
  std::size_t replicates = 3;

  bool operator==(const AblationConfig&) const = default;
};

struct ExperimentConfig {
  DatasetSpec data;
  SegNetConfig model;
  TrainConfig train;
  AggregatorConfig aggregator;
  DistillConfig distill;
  EvalConfig eval;
  SeedConfig seeds;
  AblationConfig ablation;
  std::size_t workers = toy::kNumClients;

  bool operator==(const ExperimentConfig&) const = default;

  FederationSetup federation() const { return {model, train, aggregator, distill, seeds, workers}; }
};

inline const char* to_string(LossMode m) {
  switch (m) {
    case LossMode::dice_ce_standard: return "dice_ce_standard";
    case LossMode::marginal: return "marginal";
    case LossMode::marginal_plus_condist: return "marginal_plus_condist";
  }
  return "?";
}

inline const char* to_string(AggregatorKind k) {
  switch (k) {
    case AggregatorKind::fedavg: return "fedavg";
    case AggregatorKind::fedopt: return "fedopt";
    case AggregatorKind::fedprox: return "fedprox";
  }
  return "?";
}

namespace detail {

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    const auto b = item.find_last_not_of(" \t");
    out.push_back(a == std::string::npos ? "" : item.substr(a, b - a + 1));
  }
  return out;
}

template <typename V>
std::string format_value(const V& v) {
  if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_arithmetic_v<V>) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  } else if constexpr (std::is_same_v<V, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<V, LossMode> || std::is_same_v<V, AggregatorKind>) {
    return to_string(v);
  } else {
    std::string out;
    for (const auto& x : v) out += (out.empty() ? "" : ",") + format_value(x);
    return out;
  }
}

template <typename V>
void parse_value(const std::string& text, V& out) {
  if constexpr (std::is_same_v<V, bool>) {
    if (text == "true") out = true;
    else if (text == "false") out = false;
    else throw ConfigError("expected true or false, got '" + text + "'");
  } else if constexpr (std::is_arithmetic_v<V>) {
    V v{};
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || text.empty()) {
      throw ConfigError("expected a " + std::string(std::is_integral_v<V> ? "non-negative integer" : "number") +
                        ", got '" + text + "'");
    }
    out = v;
  } else if constexpr (std::is_same_v<V, std::string>) {
    out = text;
  } else if constexpr (std::is_same_v<V, LossMode>) {
    for (auto m : {LossMode::dice_ce_standard, LossMode::marginal, LossMode::marginal_plus_condist})
      if (text == to_string(m)) return void(out = m);
    throw ConfigError("unknown loss mode '" + text + "'");
  } else if constexpr (std::is_same_v<V, AggregatorKind>) {
    for (auto k : {AggregatorKind::fedavg, AggregatorKind::fedopt, AggregatorKind::fedprox})
      if (text == to_string(k)) return void(out = k);
    throw ConfigError("unknown aggregator '" + text + "'");
  } else {
    auto items = split_list(text);
    using Item = typename V::value_type;
    if constexpr (std::is_same_v<V, std::vector<Item>>) {
      out.clear();
      for (const auto& s : items) parse_value(s, out.emplace_back());
    } else {
      if (items.size() != out.size()) {
        throw ConfigError("expected " + std::to_string(out.size()) + " comma-separated values, got " +
                          std::to_string(items.size()));
      }
      for (std::size_t i = 0; i < items.size(); ++i) parse_value(items[i], out[i]);
    }
  }
}

}  // namespace detail

struct ConfigField {
  std::string section;
  std::string key;
  std::string doc;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

namespace detail {

template <typename Ref>
ConfigField bind(std::string section, std::string key, std::string doc, Ref ref) {
  return {std::move(section), std::move(key), std::move(doc),
          [ref](const ExperimentConfig& c) { return format_value(ref(const_cast<ExperimentConfig&>(c))); },
          [ref](ExperimentConfig& c, const std::string& text) { parse_value(text, ref(c)); }};
}

}  // namespace detail

#define CONDISTFL_FIELD(section, key, member, doc) \
  detail::bind(section, key, doc, [](ExperimentConfig& c) -> auto& { return c.member; })

/// Every configurable field in document order.
inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields{
      CONDISTFL_FIELD("data", "seed", data.seed, "generator seed"),
      CONDISTFL_FIELD("data", "image_size", data.image_size, "square image extent in pixels"),
      CONDISTFL_FIELD("data", "train_per_client", data.train_per_client, "training images per client"),
      CONDISTFL_FIELD("data", "val_per_client", data.val_per_client, "validation images per client"),
      CONDISTFL_FIELD("data", "test_per_client", data.test_per_client, "held-out test images per client"),
      CONDISTFL_FIELD("data", "external_test", data.external_test, "fully labelled external test images"),
      CONDISTFL_FIELD("data", "organ_means", data.organ_means, "mean intensity per organ"),
      CONDISTFL_FIELD("data", "radius_min", data.radius_min, "smallest semi-axis per organ"),
      CONDISTFL_FIELD("data", "radius_max", data.radius_max, "largest semi-axis per organ"),
      CONDISTFL_FIELD("data", "tumor_shift", data.tumor_shift, "tumour intensity offset from its organ"),
      CONDISTFL_FIELD("data", "tumor_probability", data.tumor_probability, "chance an organ carries a tumour"),
      CONDISTFL_FIELD("data", "tumor_scale_min", data.tumor_scale_min, "tumour size relative to organ, lower bound"),
      CONDISTFL_FIELD("data", "tumor_scale_max", data.tumor_scale_max, "tumour size relative to organ, upper bound"),
      CONDISTFL_FIELD("data", "intensity_jitter", data.intensity_jitter, "per-image intensity jitter"),
      CONDISTFL_FIELD("data", "noise_sigma", data.noise_sigma, "additive Gaussian noise"),
      CONDISTFL_FIELD("data", "max_attempts", data.max_attempts, "placement attempts before giving up"),
      CONDISTFL_FIELD("model", "depth", model.depth, "resolution levels"),
      CONDISTFL_FIELD("model", "base_channels", model.base_channels, "features at full resolution"),
      CONDISTFL_FIELD("model", "deep_supervision", model.deep_supervision, "one head per level when true"),
      CONDISTFL_FIELD("federation", "rounds", train.rounds, "federated rounds R"),
      CONDISTFL_FIELD("federation", "local_steps", train.local_steps, "client SGD steps per round S"),
      CONDISTFL_FIELD("federation", "batch_size", train.batch_size, "images per client step"),
      CONDISTFL_FIELD("federation", "lr_start", train.lr_start, "cosine schedule start"),
      CONDISTFL_FIELD("federation", "lr_end", train.lr_end, "cosine schedule end"),
      CONDISTFL_FIELD("federation", "loss_mode", train.loss_mode,
                      "dice_ce_standard | marginal | marginal_plus_condist"),
      CONDISTFL_FIELD("federation", "union_mode", train.union_mode, "train on tumour-into-organ merged labels"),
      CONDISTFL_FIELD("federation", "aggregator", aggregator.kind, "fedavg | fedopt | fedprox"),
      CONDISTFL_FIELD("federation", "server_momentum", aggregator.server_momentum, "fedopt momentum"),
      CONDISTFL_FIELD("federation", "server_lr", aggregator.server_lr, "fedopt server step size"),
      CONDISTFL_FIELD("federation", "prox_mu", aggregator.prox_mu, "fedprox penalty strength"),
      CONDISTFL_FIELD("federation", "workers", workers, "concurrent client trainers"),
      CONDISTFL_FIELD("distill", "temperature", distill.temperature, "softmax temperature"),
      CONDISTFL_FIELD("distill", "weight_start", distill.weight_start, "distillation weight at round 0"),
      CONDISTFL_FIELD("distill", "weight_end", distill.weight_end, "distillation weight at the last round"),
      CONDISTFL_FIELD("distill", "dice_epsilon", distill.dice_epsilon, "Dice smoothing constant"),
      CONDISTFL_FIELD("eval", "union_mode", eval.union_mode, "score with tumours merged into organs"),
      CONDISTFL_FIELD("eval", "datasets", eval.datasets, "external and/or test"),
      CONDISTFL_FIELD("seeds", "server", seeds.server, "global model initialisation"),
      CONDISTFL_FIELD("seeds", "client_a", seeds.clients[0], "client A batch order"),
      CONDISTFL_FIELD("seeds", "client_b", seeds.clients[1], "client B batch order"),
      CONDISTFL_FIELD("seeds", "client_c", seeds.clients[2], "client C batch order"),
      CONDISTFL_FIELD("seeds", "client_d", seeds.clients[3], "client D batch order"),
      CONDISTFL_FIELD("ablation", "local_steps", ablation.local_steps, "steps per round to compare"),
      CONDISTFL_FIELD("ablation", "total_steps", ablation.total_steps, "shared budget R*S"),
      CONDISTFL_FIELD("ablation", "methods", ablation.methods,
                      "fedavg_star | fedavg | fedprox | fedopt | condistfl | condistfl_union"),
      CONDISTFL_FIELD("ablation", "replicates", ablation.replicates, "seed replicates per setting"),
  };
  return fields;
}

#undef CONDISTFL_FIELD

inline bool is_known_method(const std::string& name) {
  for (const char* m : {"fedavg_star", "fedavg", "fedprox", "fedopt", "condistfl", "condistfl_union"})
    if (name == m) return true;
  return false;
}

/// Cross-field checks; returns one message per problem.
inline std::vector<std::string> config_problems(const ExperimentConfig& c) {
  std::vector<std::string> problems;
  auto check = [&](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      problems.emplace_back(e.what());
    }
  };
  check([&] { c.data.validate(); });
  check([&] { c.model.validate(); });
  check([&] { c.train.validate(); });
  check([&] { c.aggregator.validate(); });
  check([&] {
    auto d = c.distill;
    d.total_rounds = c.train.rounds;
    d.validate();
  });
  if (c.data.image_size % (std::size_t{1} << c.model.depth) != 0) {
    problems.push_back("data image_size must be divisible by 2^model.depth");
  }
  if (c.workers < 1) problems.push_back("federation workers must be positive");
  if (c.eval.datasets.empty()) problems.push_back("eval datasets must not be empty");
  for (const auto& d : c.eval.datasets)
    if (d != "external" && d != "test") problems.push_back("eval dataset '" + d + "' is not external or test");
  if (c.ablation.replicates < 1) problems.push_back("ablation replicates must be positive");
  for (auto s : c.ablation.local_steps)
    if (s == 0 || c.ablation.total_steps % s != 0) {
      problems.push_back("ablation local_steps " + std::to_string(s) + " does not divide total_steps");
    }
  for (const auto& m : c.ablation.methods)
    if (!is_known_method(m)) problems.push_back("ablation method '" + m + "' is unknown");
  return problems;
}

inline void validate(const ExperimentConfig& c) {
  const auto problems = config_problems(c);
  if (problems.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

/// Parses a config document. Missing keys keep their defaults.
inline ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config syntax error at line " + std::to_string(e.line()) + ": " + e.message());
  }
  ExperimentConfig cfg;
  std::vector<std::string> problems;
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) {
      problems.push_back("key '" + section + "' appears outside any section");
      continue;
    }
    for (const auto& [key, value] : body) {
      const ConfigField* field = nullptr;
      for (const auto& f : config_fields())
        if (f.section == section && f.key == key) field = &f;
      if (!field) {
        problems.push_back("unknown key '" + key + "' in section [" + section + "]");
        continue;
      }
      try {
        field->set(cfg, value.data());
      } catch (const ConfigError& e) {
        problems.push_back(section + "." + key + ": " + e.what());
      }
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  validate(cfg);
  return cfg;
}

inline std::string render_config(const ExperimentConfig& cfg, bool with_docs = false) {
  std::string out, section;
  for (const auto& f : config_fields()) {
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    if (with_docs) out += "; " + f.doc + "\n";
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

/// Markdown table of every key with its default.
inline std::string config_reference() {
  const ExperimentConfig defaults;
  std::string out = "| section | key | default | meaning |\n|---|---|---|---|\n";
  for (const auto& f : config_fields())
    out += "| " + f.section + " | " + f.key + " | `" + f.get(defaults) + "` | " + f.doc + " |\n";
  return out;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace condistfl
