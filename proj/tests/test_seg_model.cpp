#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "condistfl/grad_check.hpp"
#include "condistfl/seg_model.hpp"
#include "condistfl/synth_data.hpp"

using namespace condistfl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "condistfl_seg_model_test";
  fs::create_directories(dir);
  return dir / name;
}

template <typename T>
Tensor<T> random_image(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

}  // namespace

TEST(SegNet, HeadShapes) {
  SegNet<float> net(SegNetConfig{}, 1);
  auto heads = net.forward(random_image<float>({2, 1, 64, 64}, 3));
  ASSERT_EQ(heads.size(), 3u);
  EXPECT_EQ(heads[0].shape(), (Shape{2, 8, 64, 64}));
  EXPECT_EQ(heads[1].shape(), (Shape{2, 8, 32, 32}));
  EXPECT_EQ(heads[2].shape(), (Shape{2, 8, 16, 16}));

  SegNetConfig single;
  single.deep_supervision = false;
  EXPECT_EQ(SegNet<float>(single, 1).forward(random_image<float>({1, 1, 16, 16}, 3)).size(), 1u);
}

TEST(SegNet, RejectsBadInputs) {
  SegNet<float> net(SegNetConfig{}, 1);
  EXPECT_THROW(net.forward(random_image<float>({1, 2, 16, 16}, 0)), ShapeError);
  EXPECT_THROW(net.forward(random_image<float>({1, 1, 12, 16}, 0)), ShapeError);
  SegNetConfig bad;
  bad.depth = 0;
  EXPECT_THROW(SegNet<float>(bad, 0), ValueError);
}

TEST(SegNet, SeedDeterminesInitialisation) {
  SegNet<float> a(SegNetConfig{}, 7), b(SegNetConfig{}, 7), c(SegNetConfig{}, 8);
  EXPECT_EQ(a.to_checkpoint(), b.to_checkpoint());
  EXPECT_NE(a.to_checkpoint(), c.to_checkpoint());
}

TEST(DeepSupervision, Weights) {
  auto w = deep_supervision_weights(3);
  EXPECT_NEAR(w[0], 4.0 / 7.0, 1e-15);
  EXPECT_NEAR(w[1], 2.0 / 7.0, 1e-15);
  EXPECT_NEAR(w[2], 1.0 / 7.0, 1e-15);
  EXPECT_EQ(deep_supervision_weights(1), std::vector<double>{1.0});
  EXPECT_THROW(deep_supervision_weights(0), ValueError);
}

TEST(DeepSupervision, LabelDownsampling) {
  IndexTensor label(Shape{1, 4, 4}, {0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3, 4, 5, 6, 7});
  auto half = downsample_labels(label, 1);
  EXPECT_EQ(std::vector<int>(half.data().begin(), half.data().end()), (std::vector<int>{0, 2, 0, 2}));
  EXPECT_THROW(downsample_labels(IndexTensor(Shape{1, 3, 4}), 1), ShapeError);
}

TEST(DeepSupervision, LossIsWeightedSumOfHeads) {
  SegNet<double> net(SegNetConfig{}, 2);
  auto heads = net.forward(random_image<double>({1, 1, 16, 16}, 4));
  IndexTensor label(Shape{1, 16, 16}, 0);
  for (std::size_t i = 0; i < 64; ++i) label[i] = 1;
  const auto topo = toy::client_topology(0);
  const auto w = deep_supervision_weights(3);
  double want = 0.0;
  for (std::size_t d = 0; d < 3; ++d)
    want += w[d] * supervised_loss(heads[d], downsample_labels(label, d), topo, LossMode::marginal, 1e-5).item();
  EXPECT_NEAR(deep_supervised_loss(heads, label, topo, LossMode::marginal, 1e-5).item(), want, 1e-12);
}

TEST(SegNet, EndToEndGradientMatchesFiniteDifferences) {
  SegNetConfig cfg;
  cfg.num_classes = 4;
  cfg.base_channels = 2;
  const ClassTopology topo{4, {1}, {{0}, {2, 3}}};
  auto image = random_image<double>({1, 1, 16, 16}, 11);
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> cls(0, 3);
  IndexTensor label(Shape{1, 16, 16});
  for (auto& v : label.data()) v = cls(rng);
  SegNet<double> teacher_net(cfg, 13);
  Tensor<double> teacher;
  {
    NoGradScope<double> off;
    teacher = teacher_net.forward(image)[0];
  }

  SegNet<double> net(cfg, 14);
  auto& params = net.parameters();
  for (std::size_t j = 0; j < params.size(); ++j) {
    const Tensor<double> original = params[j].second;
    auto f = [&](const Tensor<double>& x) {
      params[j].second = x;
      auto heads = net.forward(image);
      auto sup = deep_supervised_loss(heads, label, topo, LossMode::marginal, 1e-5);
      return total_loss(sup, condist_loss(heads[0], teacher, label, topo, DistillConfig{}), 0.5);
    };
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < original.numel(); i += 1 + original.numel() / 6) coords.push_back(i);
    auto report = grad_check(f, original, 1e-5, 2e-3, coords);
    params[j].second = original;
    EXPECT_TRUE(report.passed) << params[j].first << " max err " << report.max_error;
  }
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  SegNet<float> net(SegNetConfig{}, 5);
  auto ckpt = net.to_checkpoint(7, 350);
  const auto path = scratch("roundtrip.ckpt");
  save_checkpoint(ckpt, path);
  auto back = load_checkpoint(path);
  EXPECT_EQ(back, ckpt);
  EXPECT_EQ(back.round, 7u);
  EXPECT_EQ(back.step, 350u);
  SegNet<float> other(SegNetConfig{}, 6);
  other.load(back);
  EXPECT_EQ(other.to_checkpoint(7, 350), ckpt);
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ckpt));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  auto bytes = encode_checkpoint(SegNet<float>(SegNetConfig{}, 5).to_checkpoint());
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  EXPECT_THROW(decode_checkpoint(truncated), TruncatedFileError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), BadMagicError);
  auto version = bytes;
  version[4] = 9;
  EXPECT_THROW(decode_checkpoint(version), VersionMismatchError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), FormatError);
  EXPECT_THROW(load_checkpoint(scratch("does_not_exist.ckpt")), Error);
}

TEST(Checkpoint, LoadRejectsMismatchedModels) {
  SegNetConfig small;
  small.base_channels = 4;
  auto ckpt = SegNet<float>(small, 1).to_checkpoint();
  SegNet<float> net(SegNetConfig{}, 1);
  EXPECT_THROW(net.load(ckpt), ShapeError);

  auto renamed = SegNet<float>(SegNetConfig{}, 1).to_checkpoint();
  renamed.entries[0].name = "bogus.weight";
  EXPECT_THROW(net.load(renamed), UnknownParameterError);

  auto missing = SegNet<float>(SegNetConfig{}, 1).to_checkpoint();
  missing.entries.pop_back();
  EXPECT_THROW(net.load(missing), FormatError);
}
