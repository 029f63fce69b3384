#pragma once

// Per-class Dice metrics, tumour-into-organ union merging and report writers.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "condistfl/checkpoint.hpp"
#include "condistfl/seg_model.hpp"
#include "condistfl/synth_data.hpp"

namespace condistfl {

/// Dice of class c between two label maps; 1 when c is absent from both, 0 when absent from one.
template <typename L>
double dice_score(std::span<const L> pred, std::span<const L> gt, std::size_t c) {
  if (pred.size() != gt.size()) throw ShapeError("dice_score: label maps differ in size");
  std::size_t both = 0, in_pred = 0, in_gt = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = static_cast<std::size_t>(pred[i]) == c;
    const bool g = static_cast<std::size_t>(gt[i]) == c;
    both += p && g;
    in_pred += p;
    in_gt += g;
  }
  if (in_pred + in_gt == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(in_pred + in_gt);
}

/// Lesion class -> parent organ class.
struct UnionMap {
  std::map<std::size_t, std::size_t> parent;

  void validate() const {
    for (const auto& [child, organ] : parent) {
      if (child == organ) throw ValueError("union map: class " + std::to_string(child) + " maps to itself");
      if (parent.count(organ)) throw ValueError("union map: parent " + std::to_string(organ) + " is itself a lesion");
    }
  }

  std::size_t apply(std::size_t c) const {
    auto it = parent.find(c);
    return it == parent.end() ? c : it->second;
  }
};

inline UnionMap toy_union_map() {
  UnionMap m;
  for (const auto& o : toy::kOrgans)
    if (o.tumor) m.parent[o.tumor] = o.organ;
  return m;
}

inline std::vector<std::uint8_t> union_merge(std::span<const std::uint8_t> labels, const UnionMap& map) {
  std::vector<std::uint8_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = static_cast<std::uint8_t>(map.apply(labels[i]));
  return out;
}

inline IndexTensor union_merge(const IndexTensor& labels, const UnionMap& map) {
  IndexTensor out(labels.shape());
  for (std::size_t i = 0; i < labels.numel(); ++i)
    out[i] = static_cast<std::int32_t>(map.apply(static_cast<std::size_t>(labels[i])));
  return out;
}

struct DiceReport {
  std::map<std::size_t, double> per_class;
  double average = 0.0;
  std::size_t sample_count = 0;
  std::string run_id;
  std::uint32_t round = 0;
  std::string dataset_id;

  /// Arithmetic mean of the per-class entries.
  double recompute_average() const {
    if (per_class.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [c, v] : per_class) s += v;
    return s / static_cast<double>(per_class.size());
  }
};

/// Argmax of the full-resolution head for every sample, in dataset order.
inline std::vector<std::vector<std::uint8_t>> predict(const SegNet<float>& net, const Dataset& data,
                                                      std::size_t batch_size = 8) {
  NoGradScope<float> no_grad;
  detail::FlushDenormals ftz;
  std::vector<std::vector<std::uint8_t>> out;
  out.reserve(data.size());
  const std::size_t plane = data.height * data.width;
  for (std::size_t first = 0; first < data.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, data.size() - first);
    auto batch = make_batch(data, first, count);
    auto labels = max_index(net.forward(batch.images)[0], 1);
    for (std::size_t j = 0; j < count; ++j) {
      std::vector<std::uint8_t> p(plane);
      for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<std::uint8_t>(labels[j * plane + i]);
      out.push_back(std::move(p));
    }
  }
  return out;
}

/// Foreground classes that occur somewhere in the dataset's labels.
inline std::vector<std::size_t> classes_present(const Dataset& data, const UnionMap* map = nullptr) {
  std::set<std::size_t> seen;
  for (const auto& s : data.samples)
    for (auto l : s.label) {
      const std::size_t c = map ? map->apply(l) : l;
      if (c != 0) seen.insert(c);
    }
  return {seen.begin(), seen.end()};
}

/// Per-sample Dice averaged over the dataset for each class.
inline DiceReport score_predictions(const std::vector<std::vector<std::uint8_t>>& predictions, const Dataset& data,
                                    std::vector<std::size_t> classes, bool union_mode) {
  if (predictions.size() != data.size()) throw ShapeError("score_predictions: prediction count mismatch");
  const UnionMap map = toy_union_map();
  if (classes.empty()) classes = classes_present(data, union_mode ? &map : nullptr);
  DiceReport report;
  report.sample_count = data.size();
  for (auto c : classes) report.per_class[c] = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::vector<std::uint8_t> pred = predictions[i];
    std::vector<std::uint8_t> gt = data.samples[i].label;
    if (union_mode) {
      pred = union_merge(pred, map);
      gt = union_merge(gt, map);
    }
    for (auto c : classes)
      report.per_class[c] += dice_score<std::uint8_t>(pred, gt, c) / static_cast<double>(data.size());
  }
  report.average = report.recompute_average();
  return report;
}

/// Loads `ckpt` into a model of shape `model` and scores it on `data`. Empty
/// `classes` means every foreground class present in the labels.
inline DiceReport evaluate(const Checkpoint& ckpt, const SegNetConfig& model, const Dataset& data, bool union_mode,
                           std::vector<std::size_t> classes = {}) {
  SegNet<float> net(model);
  net.load(ckpt);
  auto report = score_predictions(predict(net, data), data, std::move(classes), union_mode);
  report.round = ckpt.round;
  return report;
}

// ---------------------------------------------------------------------------
// Report files

inline nlohmann::json to_json(const DiceReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [c, v] : r.per_class) per_class[std::to_string(c)] = v;
  return {{"run_id", r.run_id},       {"round", r.round},     {"dataset", r.dataset_id},
          {"samples", r.sample_count}, {"per_class", per_class}, {"average", r.average}};
}

/// One row per report; columns are the union of all class ids.
inline std::string reports_to_csv(const std::vector<DiceReport>& reports) {
  std::set<std::size_t> classes;
  for (const auto& r : reports)
    for (const auto& [c, v] : r.per_class) classes.insert(c);
  std::ostringstream os;
  os << "run_id,round,dataset,samples";
  for (auto c : classes) os << ",class_" << c;
  os << ",average\n";
  os << std::setprecision(6) << std::fixed;
  for (const auto& r : reports) {
    os << r.run_id << ',' << r.round << ',' << r.dataset_id << ',' << r.sample_count;
    for (auto c : classes) {
      auto it = r.per_class.find(c);
      os << ',';
      if (it != r.per_class.end()) os << it->second;
    }
    os << ',' << r.average << '\n';
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

}  // namespace condistfl
