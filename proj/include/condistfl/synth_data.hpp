#pragma once

// Deterministic synthetic "abdominal" images: four elliptic organs per image,
// three of which may carry an inner tumour, on a noisy background. Each of the
// four clients sees only its own organ (and tumour) labelled; the external test
// set is fully labelled.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "condistfl/binary_io.hpp"
#include "condistfl/losses.hpp"
#include "condistfl/ops.hpp"

namespace condistfl {

// ---------------------------------------------------------------------------
// Toy class layout: 0 background, 1/2 organ A + tumour, 3/4 organ B + tumour,
// 5/6 organ C + tumour, 7 organ D (no tumour class).

namespace toy {

inline constexpr std::size_t kNumClasses = 8;
inline constexpr std::size_t kNumClients = 4;
inline constexpr std::size_t kNumOrgans = 4;

struct OrganClasses {
  std::uint8_t organ;
  std::uint8_t tumor;  // 0 when the organ has no lesion class
};

inline constexpr std::array<OrganClasses, kNumOrgans> kOrgans{{{1, 2}, {3, 4}, {5, 6}, {7, 0}}};

inline const std::array<std::string, kNumClients> kClientNames{"A", "B", "C", "D"};

inline std::vector<std::size_t> classes_of_organ(std::size_t organ) {
  std::vector<std::size_t> out{kOrgans[organ].organ};
  if (kOrgans[organ].tumor) out.push_back(kOrgans[organ].tumor);
  return out;
}

/// Client k labels organ k and its tumour; every other organ forms one background group.
inline ClassTopology client_topology(std::size_t client) {
  if (client >= kNumClients) throw ValueError("toy topology: client index out of range");
  ClassTopology topo;
  topo.num_classes = kNumClasses;
  topo.foreground = classes_of_organ(client);
  topo.background_groups.push_back({0});
  for (std::size_t o = 0; o < kNumOrgans; ++o)
    if (o != client) topo.background_groups.push_back(classes_of_organ(o));
  return topo;
}

inline std::size_t client_index(const std::string& name) {
  for (std::size_t k = 0; k < kNumClients; ++k)
    if (kClientNames[k] == name) return k;
  throw ValueError("unknown toy client '" + name + "'");
}

}  // namespace toy

// ---------------------------------------------------------------------------

struct DatasetSpec {
  std::uint64_t seed = 2023;
  std::size_t image_size = 64;
  std::size_t train_per_client = 64;
  std::size_t val_per_client = 16;
  std::size_t test_per_client = 16;
  std::size_t external_test = 32;
  std::array<double, toy::kNumOrgans> organ_means{0.30, 0.50, 0.70, 0.90};
  std::array<double, toy::kNumOrgans> radius_min{9.0, 6.0, 5.0, 6.0};
  std::array<double, toy::kNumOrgans> radius_max{12.0, 9.0, 8.0, 9.0};
  double tumor_shift = -0.15;
  double tumor_probability = 0.7;
  double tumor_scale_min = 0.30;
  double tumor_scale_max = 0.55;
  double intensity_jitter = 0.05;
  double noise_sigma = 0.05;
  std::size_t max_attempts = 1000;

  bool operator==(const DatasetSpec&) const = default;

  void validate() const {
    if (image_size < 16) throw ValueError("data image_size must be at least 16");
    if (train_per_client == 0 || val_per_client == 0 || test_per_client == 0 || external_test == 0) {
      throw ValueError("data split sizes must be positive");
    }
    for (std::size_t o = 0; o < toy::kNumOrgans; ++o) {
      if (!(radius_min[o] >= 2.0 && radius_min[o] <= radius_max[o])) {
        throw ValueError("data radius range for organ " + std::to_string(o) + " is invalid");
      }
    }
    if (!(tumor_probability >= 0.0 && tumor_probability <= 1.0)) {
      throw ValueError("data tumor_probability must lie in [0, 1]");
    }
    if (!(tumor_scale_min > 0.0 && tumor_scale_min <= tumor_scale_max && tumor_scale_max < 1.0)) {
      throw ValueError("data tumor scale range must satisfy 0 < min <= max < 1");
    }
    if (!(noise_sigma >= 0.0) || !(intensity_jitter >= 0.0)) throw ValueError("data noise terms must be non-negative");
    if (max_attempts == 0) throw ValueError("data max_attempts must be positive");
  }
};

/// One image with its label map (row-major H x W).
struct Sample {
  std::vector<float> image;
  std::vector<std::uint8_t> label;

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool operator==(const Dataset&) const = default;
};

struct ClientSplits {
  Dataset train, val, test;
};

struct GeneratedData {
  std::array<ClientSplits, toy::kNumClients> clients;
  Dataset external;  // fully labelled
};

/// Keeps labels of the given classes, folds everything else into 0.
inline std::vector<std::uint8_t> partial_label(const std::vector<std::uint8_t>& full,
                                               const std::vector<std::size_t>& foreground) {
  std::vector<std::uint8_t> out(full.size(), 0);
  for (std::size_t i = 0; i < full.size(); ++i)
    if (std::find(foreground.begin(), foreground.end(), full[i]) != foreground.end()) out[i] = full[i];
  return out;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

struct Ellipse {
  double cx, cy, a, b, angle;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s) / a;
    const double v = (-dx * s + dy * c) / b;
    return u * u + v * v <= 1.0;
  }
};

// Generates one fully labelled sample. Returns false when organ placement
// keeps failing within the attempt budget.
inline bool draw_sample(const DatasetSpec& spec, std::uint64_t stream_seed, Sample& out) {
  std::mt19937_64 rng(stream_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = spec.image_size;
  const double size = static_cast<double>(n);

  std::array<Ellipse, toy::kNumOrgans> organs{};
  bool placed = false;
  for (std::size_t attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
    placed = true;
    for (std::size_t o = 0; o < toy::kNumOrgans && placed; ++o) {
      const double a = spec.radius_min[o] + unit(rng) * (spec.radius_max[o] - spec.radius_min[o]);
      const double b = spec.radius_min[o] + unit(rng) * (spec.radius_max[o] - spec.radius_min[o]);
      const double reach = std::max(a, b);
      const double lo = reach + 1.0, hi = size - 1.0 - reach;
      if (hi <= lo) {
        placed = false;
        break;
      }
      Ellipse e{lo + unit(rng) * (hi - lo), lo + unit(rng) * (hi - lo), a, b, unit(rng) * std::numbers::pi};
      for (std::size_t p = 0; p < o; ++p) {
        const double gap = std::hypot(e.cx - organs[p].cx, e.cy - organs[p].cy);
        if (gap < reach + std::max(organs[p].a, organs[p].b) + 2.0) placed = false;
      }
      organs[o] = e;
    }
  }
  if (!placed) return false;

  out.label.assign(n * n, 0);
  for (std::size_t o = 0; o < toy::kNumOrgans; ++o)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        if (organs[o].contains(static_cast<double>(x), static_cast<double>(y))) out.label[y * n + x] = toy::kOrgans[o].organ;

  // Tumours: an inner ellipse that must stay off the organ boundary.
  auto interior = [&](std::size_t x, std::size_t y, toy::OrganClasses cls) {
    if (x == 0 || y == 0 || x + 1 >= n || y + 1 >= n) return false;
    auto inside = [&](std::size_t xx, std::size_t yy) {
      const auto l = out.label[yy * n + xx];
      return l == cls.organ || l == cls.tumor;
    };
    return inside(x, y) && inside(x - 1, y) && inside(x + 1, y) && inside(x, y - 1) && inside(x, y + 1);
  };
  for (std::size_t o = 0; o < toy::kNumOrgans; ++o) {
    const auto cls = toy::kOrgans[o];
    if (cls.tumor == 0 || unit(rng) >= spec.tumor_probability) continue;
    const Ellipse& org = organs[o];
    for (std::size_t attempt = 0; attempt < 32; ++attempt) {
      const double scale = spec.tumor_scale_min + unit(rng) * (spec.tumor_scale_max - spec.tumor_scale_min);
      const double room = (1.0 - scale) * std::min(org.a, org.b) * 0.8;
      const double r = room * std::sqrt(unit(rng));
      const double phi = unit(rng) * 2.0 * std::numbers::pi;
      Ellipse t{org.cx + r * std::cos(phi), org.cy + r * std::sin(phi), org.a * scale, org.b * scale, org.angle};
      std::vector<std::size_t> pixels;
      bool ok = true;
      for (std::size_t y = 0; y < n && ok; ++y)
        for (std::size_t x = 0; x < n && ok; ++x)
          if (t.contains(static_cast<double>(x), static_cast<double>(y))) {
            if (!interior(x, y, cls)) ok = false;
            pixels.push_back(y * n + x);
          }
      if (ok && !pixels.empty()) {
        for (auto p : pixels) out.label[p] = cls.tumor;
        break;
      }
    }
  }

  // Intensities: per-image jittered organ bands, darker lesions, Gaussian noise.
  std::array<double, 8> intensity{};
  for (std::size_t o = 0; o < toy::kNumOrgans; ++o) {
    const double mean = spec.organ_means[o] + (2.0 * unit(rng) - 1.0) * spec.intensity_jitter;
    intensity[toy::kOrgans[o].organ] = mean;
    if (toy::kOrgans[o].tumor) intensity[toy::kOrgans[o].tumor] = mean + spec.tumor_shift;
  }
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  out.image.resize(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    out.image[i] = static_cast<float>(intensity[out.label[i]] + (spec.noise_sigma > 0.0 ? noise(rng) : 0.0));
  }
  return true;
}

inline Sample draw_full_sample(const DatasetSpec& spec, std::uint64_t stream, std::size_t index) {
  const std::uint64_t seed = splitmix64(spec.seed ^ splitmix64(stream * 0x10000ull + index));
  Sample s;
  if (!draw_sample(spec, seed, s)) {
    throw ValueError("synthetic data: organ placement failed after " + std::to_string(spec.max_attempts) +
                     " attempts (seed " + std::to_string(spec.seed) + ", stream " + std::to_string(stream) +
                     ", sample " + std::to_string(index) + ")");
  }
  return s;
}

inline Dataset draw_split(const DatasetSpec& spec, std::uint64_t stream, std::size_t count,
                          const std::vector<std::size_t>* foreground) {
  Dataset d;
  d.height = d.width = spec.image_size;
  for (std::size_t i = 0; i < count; ++i) {
    Sample s = draw_full_sample(spec, stream, i);
    if (foreground) s.label = partial_label(s.label, *foreground);
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace detail

/// Full-label sample `index` of stream `stream`; exposed for property checks.
inline Sample generate_full_sample(const DatasetSpec& spec, std::uint64_t stream, std::size_t index) {
  spec.validate();
  return detail::draw_full_sample(spec, stream, index);
}

/// Every client's train/val/test splits (partial labels) plus the external set (full labels).
inline GeneratedData generate(const DatasetSpec& spec) {
  spec.validate();
  GeneratedData out;
  for (std::size_t k = 0; k < toy::kNumClients; ++k) {
    const auto fg = toy::client_topology(k).foreground;
    out.clients[k].train = detail::draw_split(spec, 10 * k + 1, spec.train_per_client, &fg);
    out.clients[k].val = detail::draw_split(spec, 10 * k + 2, spec.val_per_client, &fg);
    out.clients[k].test = detail::draw_split(spec, 10 * k + 3, spec.test_per_client, &fg);
  }
  out.external = detail::draw_split(spec, 99, spec.external_test, nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files: "CDDS" | version u32 | count u32 | H u16 | W u16 |
// per sample: float32 image payload, u8 label payload.

inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const Dataset& d) {
  if (d.height > 0xFFFF || d.width > 0xFFFF) throw FormatError("dataset extent exceeds u16");
  io::ByteWriter w;
  w.put_bytes("CDDS");
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.samples.size()));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(d.height));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(d.width));
  const std::size_t plane = d.height * d.width;
  for (const auto& s : d.samples) {
    if (s.image.size() != plane || s.label.size() != plane) throw ShapeError("dataset sample has the wrong extent");
    w.put_span(std::span<const float>(s.image));
    w.put_span(std::span<const std::uint8_t>(s.label));
  }
  return w.bytes();
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes, const std::string& source = "dataset") {
  io::ByteReader r(bytes, source);
  if (r.get_string(4) != "CDDS") throw BadMagicError(source + ": not a dataset file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetVersion) {
    throw VersionMismatchError(source + ": dataset version " + std::to_string(version) + ", expected " +
                               std::to_string(kDatasetVersion));
  }
  const auto count = r.get<std::uint32_t>();
  Dataset d;
  d.height = r.get<std::uint16_t>();
  d.width = r.get<std::uint16_t>();
  const std::size_t plane = d.height * d.width;
  if (plane == 0) throw FormatError(source + ": zero image extent");
  if (static_cast<std::size_t>(count) * plane * (sizeof(float) + 1) > r.remaining()) {
    throw TruncatedFileError(source + ": truncated (header announces " + std::to_string(count) + " samples)");
  }
  d.samples.resize(count);
  for (auto& s : d.samples) {
    s.image.resize(plane);
    s.label.resize(plane);
    r.get_span(std::span<float>(s.image));
    r.get_span(std::span<std::uint8_t>(s.label));
  }
  if (!r.at_end()) throw FormatError(source + ": trailing bytes after last sample");
  return d;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  io::write_file(path, encode_dataset(d));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_dataset(bytes, path.string());
}

namespace layout {
inline std::filesystem::path client_dir(const std::filesystem::path& root, std::size_t k) {
  return root / ("client_" + toy::kClientNames[k]);
}
inline std::filesystem::path split_file(const std::filesystem::path& root, std::size_t k, const std::string& split) {
  return client_dir(root, k) / (split + ".cdds");
}
inline std::filesystem::path external_file(const std::filesystem::path& root) { return root / "external" / "test.cdds"; }
inline std::filesystem::path spec_file(const std::filesystem::path& root) { return root / "dataset_spec.ini"; }
}  // namespace layout

/// Human-readable echo of the spec, written next to the dataset files.
inline std::string describe(const DatasetSpec& spec) {
  std::ostringstream os;
  os.precision(17);
  auto list = [&](const std::array<double, toy::kNumOrgans>& v) {
    std::ostringstream s;
    s.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    return s.str();
  };
  os << "[data]\n"
     << "seed = " << spec.seed << "\n"
     << "image_size = " << spec.image_size << "\n"
     << "train_per_client = " << spec.train_per_client << "\n"
     << "val_per_client = " << spec.val_per_client << "\n"
     << "test_per_client = " << spec.test_per_client << "\n"
     << "external_test = " << spec.external_test << "\n"
     << "organ_means = " << list(spec.organ_means) << "\n"
     << "radius_min = " << list(spec.radius_min) << "\n"
     << "radius_max = " << list(spec.radius_max) << "\n"
     << "tumor_shift = " << spec.tumor_shift << "\n"
     << "tumor_probability = " << spec.tumor_probability << "\n"
     << "tumor_scale_min = " << spec.tumor_scale_min << "\n"
     << "tumor_scale_max = " << spec.tumor_scale_max << "\n"
     << "intensity_jitter = " << spec.intensity_jitter << "\n"
     << "noise_sigma = " << spec.noise_sigma << "\n"
     << "max_attempts = " << spec.max_attempts << "\n";
  return os.str();
}

/// Writes every split plus the external set and the spec sidecar under `root`.
inline void write_generated(const GeneratedData& data, const DatasetSpec& spec, const std::filesystem::path& root) {
  for (std::size_t k = 0; k < toy::kNumClients; ++k) {
    save_dataset(data.clients[k].train, layout::split_file(root, k, "train"));
    save_dataset(data.clients[k].val, layout::split_file(root, k, "val"));
    save_dataset(data.clients[k].test, layout::split_file(root, k, "test"));
  }
  save_dataset(data.external, layout::external_file(root));
  const auto text = describe(spec);
  io::write_file(layout::spec_file(root), std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline GeneratedData read_generated(const std::filesystem::path& root) {
  GeneratedData data;
  for (std::size_t k = 0; k < toy::kNumClients; ++k) {
    data.clients[k].train = load_dataset(layout::split_file(root, k, "train"));
    data.clients[k].val = load_dataset(layout::split_file(root, k, "val"));
    data.clients[k].test = load_dataset(layout::split_file(root, k, "test"));
  }
  data.external = load_dataset(layout::external_file(root));
  return data;
}

// ---------------------------------------------------------------------------

struct Batch {
  Tensor<float> images;  // [B,1,H,W]
  IndexTensor labels;    // [B,H,W]
};

/// Endless batches over a dataset. Each epoch visits the samples in a fresh
/// seeded permutation; the last batch of an epoch holds the remainder.
class BatchIterator {
 public:
  BatchIterator(const Dataset& data, std::size_t batch_size, std::uint64_t seed)
      : data_(&data), batch_size_(batch_size), rng_(seed) {
    if (batch_size == 0) throw ValueError("batch size must be positive");
    if (data.samples.empty()) throw ValueError("cannot iterate an empty dataset");
    order_.resize(data.samples.size());
    reshuffle();
  }

  Batch next() {
    if (cursor_ == order_.size()) reshuffle();
    const std::size_t count = std::min(batch_size_, order_.size() - cursor_);
    const std::size_t plane = data_->height * data_->width;
    Batch batch{Tensor<float>(Shape{count, 1, data_->height, data_->width}),
                IndexTensor(Shape{count, data_->height, data_->width})};
    for (std::size_t j = 0; j < count; ++j) {
      const auto& s = data_->samples[order_[cursor_ + j]];
      std::copy(s.image.begin(), s.image.end(), batch.images.data().begin() + static_cast<long>(j * plane));
      for (std::size_t i = 0; i < plane; ++i) batch.labels[j * plane + i] = s.label[i];
    }
    cursor_ += count;
    return batch;
  }

  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
    ++epoch_;
  }

  const Dataset* data_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

/// Stacks the given samples of a dataset into one batch in order.
inline Batch make_batch(const Dataset& data, std::size_t first, std::size_t count) {
  const std::size_t plane = data.height * data.width;
  Batch batch{Tensor<float>(Shape{count, 1, data.height, data.width}), IndexTensor(Shape{count, data.height, data.width})};
  for (std::size_t j = 0; j < count; ++j) {
    const auto& s = data.samples.at(first + j);
    std::copy(s.image.begin(), s.image.end(), batch.images.data().begin() + static_cast<long>(j * plane));
    for (std::size_t i = 0; i < plane; ++i) batch.labels[j * plane + i] = s.label[i];
  }
  return batch;
}

}  // namespace condistfl
