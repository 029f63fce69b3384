#pragma once

// Loss stack for federated training on partially labelled segmentation data:
// marginal Dice+CE supervision on a client's own classes and conditional
// distillation of the teacher's background-group distribution.
//
// All probability fields are [B, C, spatial...] with classes on axis 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "condistfl/ops.hpp"

namespace condistfl {

/// Class layout seen by one client: the global class count, the classes it
/// annotates (foreground) and a partition of the remaining classes into
/// background groups. Group 0 holds exactly the global background class 0;
/// every later group is one unlabelled organ together with its lesions.
struct ClassTopology {
  std::size_t num_classes = 0;
  std::vector<std::size_t> foreground;
  std::vector<std::vector<std::size_t>> background_groups;

  /// Throws TopologyError unless every structural invariant holds.
  void validate() const {
    if (num_classes == 0) throw TopologyError("topology needs at least one class");
    std::set<std::size_t> seen;
    for (auto c : foreground) {
      if (c == 0) throw TopologyError("class 0 is the global background and cannot be foreground");
      if (c >= num_classes) throw TopologyError("foreground class " + std::to_string(c) + " out of range");
      if (!seen.insert(c).second) throw TopologyError("foreground class " + std::to_string(c) + " listed twice");
    }
    if (background_groups.empty() || background_groups[0] != std::vector<std::size_t>{0}) {
      throw TopologyError("background group 0 must contain exactly the global background class 0");
    }
    for (std::size_t g = 0; g < background_groups.size(); ++g) {
      if (background_groups[g].empty()) throw TopologyError("background group " + std::to_string(g) + " is empty");
      for (auto c : background_groups[g]) {
        if (c >= num_classes) throw TopologyError("background class " + std::to_string(c) + " out of range");
        if (!seen.insert(c).second) {
          throw TopologyError("class " + std::to_string(c) + " appears in more than one group");
        }
      }
    }
    if (seen.size() != num_classes) throw TopologyError("foreground and background groups do not cover every class");
  }

  std::size_t num_groups() const { return background_groups.size(); }

  /// B_k in ascending order.
  std::vector<std::size_t> background() const {
    std::vector<std::size_t> out;
    for (const auto& g : background_groups) out.insert(out.end(), g.begin(), g.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<std::size_t> sorted_foreground() const {
    auto out = foreground;
    std::sort(out.begin(), out.end());
    return out;
  }

  bool is_foreground(std::size_t c) const {
    return std::find(foreground.begin(), foreground.end(), c) != foreground.end();
  }
};

struct DistillConfig {
  double temperature = 0.5;
  double weight_start = 0.01;
  double weight_end = 1.0;
  std::size_t total_rounds = 1;
  double dice_epsilon = 1e-5;

  void validate() const {
    if (!(temperature > 0.0)) throw ValueError("distillation temperature must be positive");
    if (!(weight_start >= 0.0 && weight_start <= weight_end)) {
      throw ValueError("distillation weights need 0 <= start <= end");
    }
    if (total_rounds < 1) throw ValueError("distillation schedule needs at least one round");
  }

  bool operator==(const DistillConfig&) const = default;
};

enum class LossMode { dice_ce_standard, marginal, marginal_plus_condist };

inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr double kConditionalFloor = 1e-7;

// ---------------------------------------------------------------------------

/// Channel softmax of logits / temperature.
template <typename T>
Tensor<T> softmax_probs(const Tensor<T>& logits, double temperature) {
  if (!(temperature > 0.0)) throw ValueError("softmax temperature must be positive, got " + std::to_string(temperature));
  return softmax_channels(logits, static_cast<T>(1.0 / temperature));
}

namespace detail {
template <typename T>
void require_channels(const Tensor<T>& t, std::size_t channels, const char* who) {
  if (t.rank() < 2 || t.dim(1) != channels) {
    throw ShapeError(std::string(who) + ": expected " + std::to_string(channels) + " channels, got shape " +
                     to_string(t.shape()));
  }
}
}  // namespace detail

/// Folds every non-foreground class into channel 0; channels 1.. are the
/// client's foreground classes in ascending order.
template <typename T>
Tensor<T> marginal_merge(const Tensor<T>& probs, const ClassTopology& topo) {
  if (topo.foreground.empty()) throw TopologyError("marginal merge needs at least one foreground class");
  detail::require_channels(probs, topo.num_classes, "marginal_merge");
  std::vector<std::vector<std::size_t>> groups{topo.background()};
  for (auto c : topo.sorted_foreground()) groups.push_back({c});
  return combine_channels(probs, groups);
}

/// Maps a class-index label into the merged channel space of marginal_merge.
inline IndexTensor marginal_label(const IndexTensor& label, const ClassTopology& topo) {
  const auto fg = topo.sorted_foreground();
  IndexTensor out(label.shape());
  for (std::size_t i = 0; i < label.numel(); ++i) {
    auto it = std::find(fg.begin(), fg.end(), static_cast<std::size_t>(label[i]));
    out[i] = it == fg.end() ? 0 : static_cast<std::int32_t>(it - fg.begin()) + 1;
  }
  return out;
}

/// [B, spatial...] class indices to a [B, C, spatial...] one-hot field.
template <typename T>
Tensor<T> one_hot(const IndexTensor& label, std::size_t channels) {
  if (label.rank() < 1) throw ShapeError("one_hot: label needs a batch axis");
  Shape shape = label.shape();
  shape.insert(shape.begin() + 1, channels);
  const std::size_t batch = label.dim(0);
  const std::size_t inner = label.numel() / batch;
  Tensor<T> out(shape);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < inner; ++i) {
      const auto c = label[b * inner + i];
      if (c < 0 || static_cast<std::size_t>(c) >= channels) {
        throw ValueError("one_hot: class " + std::to_string(c) + " outside [0, " + std::to_string(channels) + ")");
      }
      out[(b * channels + static_cast<std::size_t>(c)) * inner + i] = T{1};
    }
  return out;
}

/// Soft Dice loss with squared denominators: 1 - mean_c (2 sum pq + eps) / (sum p^2 + sum q^2 + eps),
/// sums over batch and space per channel.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& q, double epsilon) {
  if (p.shape() != q.shape() || p.rank() < 2) {
    throw ShapeError("dice_loss: shapes " + to_string(p.shape()) + " and " + to_string(q.shape()) + " differ");
  }
  const T eps = static_cast<T>(epsilon);
  auto intersection = sum_except(p * q, 1);
  auto denominator = sum_except(pow2(p), 1) + sum_except(pow2(q), 1);
  auto dice = (intersection * T{2} + eps) / (denominator + eps);
  return rsub(T{1}, mean(dice));
}

/// Dice + cross-entropy on (merged) probabilities against a one-hot label.
/// The CE term is -log of the probability at the true channel, clamped at 1e-7.
template <typename T>
Tensor<T> dice_ce_loss(const Tensor<T>& probs, const Tensor<T>& label, double epsilon) {
  if (probs.shape() != label.shape() || probs.rank() < 2) {
    throw ShapeError("dice_ce_loss: shapes " + to_string(probs.shape()) + " and " + to_string(label.shape()) +
                     " differ");
  }
  const std::size_t batch = label.dim(0);
  const std::size_t channels = label.dim(1);
  const std::size_t inner = label.numel() / (batch * channels);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < inner; ++i) {
      T total{0};
      for (std::size_t c = 0; c < channels; ++c) {
        const T v = label[(b * channels + c) * inner + i];
        if (v != T{0} && v != T{1}) throw ValueError("dice_ce_loss: label is not one-hot");
        total += v;
      }
      if (total != T{1}) throw ValueError("dice_ce_loss: label is not one-hot");
    }
  auto true_prob = clamp_min(sum(probs * label, 1), static_cast<T>(kProbabilityClamp));
  auto ce = neg(mean(log(true_prob)));
  return dice_loss(probs, label, epsilon) + ce;
}

/// Per-voxel total probability of the client's foreground classes, [B,1,...].
template <typename T>
Tensor<T> merge_foreground(const Tensor<T>& probs, const ClassTopology& topo) {
  if (topo.foreground.empty()) throw TopologyError("foreground merge needs at least one foreground class");
  detail::require_channels(probs, topo.num_classes, "merge_foreground");
  return combine_channels(probs, {topo.sorted_foreground()});
}

/// Per-voxel probability of each background group, channels ordered G_0..G_M.
template <typename T>
Tensor<T> group_background(const Tensor<T>& probs, const ClassTopology& topo) {
  detail::require_channels(probs, topo.num_classes, "group_background");
  return combine_channels(probs, topo.background_groups);
}

/// Group probabilities conditioned on "not foreground": grouped / max(1 - p_F, 1e-7).
/// 1 - p_F is taken as the sum of the group channels, which is the same quantity
/// for a valid topology but does not cancel in float when p_F is close to 1.
template <typename T>
Tensor<T> conditional_background(const Tensor<T>& grouped) {
  if (grouped.rank() < 2) throw ShapeError("conditional_background: need [B,G,...], got " + to_string(grouped.shape()));
  std::vector<std::size_t> all(grouped.dim(1));
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto remaining = clamp_min(combine_channels(grouped, {all}), static_cast<T>(kConditionalFloor));
  std::vector<std::vector<std::size_t>> replicate(grouped.dim(1), std::vector<std::size_t>{0});
  return grouped / combine_channels(remaining, replicate);
}

/// Keeps voxels that are neither labelled foreground nor predicted foreground
/// by the teacher (argmax, ties to the lowest class).
template <typename T>
Mask foreground_filter(const IndexTensor& label, const Tensor<T>& teacher_probs, const ClassTopology& topo) {
  detail::require_channels(teacher_probs, topo.num_classes, "foreground_filter");
  Shape spatial = teacher_probs.shape();
  spatial.erase(spatial.begin() + 1);
  if (label.shape() != spatial) {
    throw ShapeError("foreground_filter: label " + to_string(label.shape()) + " does not match teacher " +
                     to_string(teacher_probs.shape()));
  }
  auto predicted = max_index(teacher_probs, 1);
  Mask keep(spatial);
  for (std::size_t i = 0; i < label.numel(); ++i) {
    const auto l = label[i];
    if (l < 0 || static_cast<std::size_t>(l) >= topo.num_classes) {
      throw ValueError("foreground_filter: label value " + std::to_string(l) + " out of range");
    }
    const bool labelled_fg = topo.is_foreground(static_cast<std::size_t>(l));
    const bool predicted_fg = topo.is_foreground(static_cast<std::size_t>(predicted[i]));
    keep[i] = (!labelled_fg && !predicted_fg) ? 1 : 0;
  }
  return keep;
}

/// Conditional distillation loss between student and (detached) teacher logits.
/// Exactly 0 when the foreground filter keeps no voxel.
template <typename T>
Tensor<T> condist_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, const IndexTensor& label,
                       const ClassTopology& topo, const DistillConfig& cfg) {
  if (teacher_logits.requires_grad()) throw TapeError("condist_loss: teacher logits must be detached");
  if (student_logits.shape() != teacher_logits.shape()) {
    throw ShapeError("condist_loss: student " + to_string(student_logits.shape()) + " and teacher " +
                     to_string(teacher_logits.shape()) + " differ");
  }
  auto conditional = [&](const Tensor<T>& logits) {
    auto probs = softmax_probs(logits, cfg.temperature);
    return std::pair{conditional_background(group_background(probs, topo)), probs};
  };
  auto [teacher_cond, teacher_probs] = conditional(teacher_logits);
  const Mask keep = foreground_filter(label, teacher_probs, topo);
  const bool any_kept = std::any_of(keep.data().begin(), keep.data().end(), [](std::uint8_t k) { return k != 0; });
  if (!any_kept) return Tensor<T>::scalar(T{0});
  auto student_cond = conditional(student_logits).first;
  return dice_loss(select_mask(student_cond, keep), select_mask(teacher_cond, keep), cfg.dice_epsilon);
}

/// Distillation weight for a 0-based round, linear from weight_start to weight_end.
inline double schedule_weight(std::size_t round, const DistillConfig& cfg) {
  if (round >= cfg.total_rounds) {
    throw ValueError("schedule_weight: round " + std::to_string(round) + " outside schedule of " +
                     std::to_string(cfg.total_rounds) + " rounds");
  }
  if (cfg.total_rounds == 1) return cfg.weight_end;
  const double t = static_cast<double>(round) / static_cast<double>(cfg.total_rounds - 1);
  return std::lerp(cfg.weight_start, cfg.weight_end, t);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& supervised, const Tensor<T>& distill, double weight) {
  if (!(weight >= 0.0)) throw ValueError("total_loss: weight must be non-negative");
  return supervised + distill * static_cast<T>(weight);
}

/// Supervised term for one head. `label` carries the client's (partial) class indices.
template <typename T>
Tensor<T> supervised_loss(const Tensor<T>& logits, const IndexTensor& label, const ClassTopology& topo, LossMode mode,
                          double epsilon) {
  auto probs = softmax_probs(logits, 1.0);
  if (mode == LossMode::dice_ce_standard) return dice_ce_loss(probs, one_hot<T>(label, topo.num_classes), epsilon);
  auto merged = marginal_merge(probs, topo);
  return dice_ce_loss(merged, one_hot<T>(marginal_label(label, topo), merged.dim(1)), epsilon);
}

}  // namespace condistfl
