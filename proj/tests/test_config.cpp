#include <gtest/gtest.h>

#include <random>

#include "condistfl/experiment.hpp"

using namespace condistfl;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig defaults;
  EXPECT_EQ(parse_config(render_config(defaults)), defaults);
  EXPECT_EQ(parse_config(render_config(defaults, true)), defaults);
  EXPECT_EQ(parse_config(""), defaults);
}

TEST(Config, RandomisedConfigsRoundTrip) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    ExperimentConfig c;
    c.data.seed = rng();
    c.data.noise_sigma = u(rng) * 0.1;
    c.data.organ_means = {u(rng), u(rng), u(rng), 1.0 / 3.0};
    c.train.rounds = 1 + rng() % 40;
    c.train.lr_start = 0.01 + u(rng);
    c.train.lr_end = 1e-7 * (1 + u(rng));
    c.train.loss_mode = static_cast<LossMode>(rng() % 3);
    c.aggregator.kind = static_cast<AggregatorKind>(rng() % 3);
    c.aggregator.server_momentum = u(rng) * 0.99;
    c.distill.temperature = 0.1 + u(rng);
    c.eval.union_mode = rng() % 2;
    c.eval.datasets = rng() % 2 ? std::vector<std::string>{"external", "test"} : std::vector<std::string>{"test"};
    c.seeds.clients[2] = rng();
    c.ablation.local_steps = {10, 50, 200};
    c.ablation.methods = {"fedavg_star", "condistfl_union"};
    ASSERT_EQ(parse_config(render_config(c)), c) << render_config(c);
  }
}

TEST(Config, UnknownKeysAndSectionsAreRejected) {
  EXPECT_NE(error_of("[federation]\nrounds = 3\nround = 4\n").find("unknown key 'round' in section [federation]"),
            std::string::npos);
  EXPECT_NE(error_of("[fed]\nrounds = 3\n").find("unknown key 'rounds' in section [fed]"), std::string::npos);
  EXPECT_NE(error_of("rounds = 3\n").find("outside any section"), std::string::npos);
}

TEST(Config, BadValuesAreAllReported) {
  const auto msg = error_of("[federation]\nrounds = -2\nloss_mode = fancy\nunion_mode = yes\n[data]\norgan_means = 1,2\n");
  EXPECT_NE(msg.find("federation.rounds"), std::string::npos) << msg;
  EXPECT_NE(msg.find("unknown loss mode 'fancy'"), std::string::npos) << msg;
  EXPECT_NE(msg.find("expected true or false"), std::string::npos) << msg;
  EXPECT_NE(msg.find("expected 4 comma-separated values"), std::string::npos) << msg;
}

TEST(Config, CrossFieldValidation) {
  EXPECT_NE(error_of("[federation]\nlr_start = 1e-8\n").find("lr_start > lr_end"), std::string::npos);
  EXPECT_NE(error_of("[data]\nimage_size = 60\n").find("divisible"), std::string::npos);
  EXPECT_NE(error_of("[ablation]\nlocal_steps = 30\n").find("does not divide"), std::string::npos);
  EXPECT_NE(error_of("[ablation]\nmethods = fedavg,magic\n").find("'magic' is unknown"), std::string::npos);
  EXPECT_NE(error_of("[eval]\ndatasets = train\n").find("'train'"), std::string::npos);
  EXPECT_NE(error_of("[federation\nrounds = 1\n").find("syntax error"), std::string::npos);
}

TEST(Config, ReferenceListsEveryKey) {
  const auto ref = config_reference();
  for (const auto& f : config_fields()) EXPECT_NE(ref.find("| " + f.section + " | " + f.key + " |"), std::string::npos);
}

TEST(Methods, PresetsSetLossAndAggregator) {
  const ExperimentConfig base;
  auto star = with_method(base, "fedavg_star");
  EXPECT_EQ(star.train.loss_mode, LossMode::dice_ce_standard);
  EXPECT_EQ(star.aggregator.kind, AggregatorKind::fedavg);
  auto avg = with_method(base, "fedavg");
  EXPECT_EQ(avg.train.loss_mode, LossMode::marginal);
  EXPECT_EQ(with_method(base, "fedprox").aggregator.kind, AggregatorKind::fedprox);
  auto cd = with_method(base, "condistfl");
  EXPECT_EQ(cd.train.loss_mode, LossMode::marginal_plus_condist);
  EXPECT_EQ(cd.aggregator.kind, AggregatorKind::fedopt);
  auto cu = with_method(base, "condistfl_union");
  EXPECT_TRUE(cu.train.union_mode);
  EXPECT_TRUE(cu.eval.union_mode);
  EXPECT_THROW(with_method(base, "nope"), ConfigError);
}

TEST(Methods, ReplicatesShiftSeeds) {
  const ExperimentConfig base;
  EXPECT_EQ(with_replicate(base, 0), base);
  auto r2 = with_replicate(base, 2);
  EXPECT_EQ(r2.seeds.server, base.seeds.server + 2000);
  EXPECT_EQ(r2.seeds.clients[3], base.seeds.clients[3] + 2000);
  EXPECT_EQ(r2.data, base.data);
}

TEST(Ablation, TsvAndMedian) {
  AblationRow a{"fedavg", 25, 40, {0.5, 0.1, 0.3}, {}};
  AblationRow b{"condistfl", 200, 5, {0.25, 0.75}, {}};
  EXPECT_EQ(a.median(), 0.3);
  EXPECT_EQ(b.median(), 0.5);
  EXPECT_EQ(ablation_tsv({a}),
            "method\tlocal_steps\trounds\tmedian_dice\treplicate_0\treplicate_1\treplicate_2\n"
            "fedavg\t25\t40\t0.3\t0.5\t0.1\t0.3\n");
}
