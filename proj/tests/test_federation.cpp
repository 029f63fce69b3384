#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "condistfl/federation.hpp"
#include "condistfl/grad_check.hpp"

using namespace condistfl;

namespace {

DatasetSpec tiny_spec() {
  DatasetSpec spec;
  spec.image_size = 32;
  spec.train_per_client = 6;
  spec.val_per_client = 2;
  spec.test_per_client = 2;
  spec.external_test = 4;
  spec.radius_min = {4.5, 3.0, 2.5, 3.0};
  spec.radius_max = {6.0, 4.5, 4.0, 4.5};
  return spec;
}

const GeneratedData& tiny_data() {
  static const GeneratedData data = generate(tiny_spec());
  return data;
}

FederationSetup tiny_setup(std::size_t rounds, std::size_t steps) {
  FederationSetup s;
  s.model.base_channels = 4;
  s.model.depth = 2;
  s.train.rounds = rounds;
  s.train.local_steps = steps;
  s.train.batch_size = 2;
  s.train.lr_start = 0.05;
  return s;
}

Checkpoint random_checkpoint(std::mt19937_64& rng, std::uint32_t round = 0) {
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  Checkpoint c;
  c.round = round;
  for (auto [name, n] : {std::pair<const char*, std::size_t>{"a.weight", 12}, {"a.bias", 3}, {"b.weight", 5}}) {
    CheckpointEntry e{name, Shape{n}, std::vector<float>(n)};
    for (auto& v : e.data) v = d(rng);
    c.entries.push_back(e);
  }
  return c;
}

ClientUpdate update_of(const std::string& id, Checkpoint c, std::size_t n) { return {id, std::move(c), n, {}}; }

}  // namespace

// ---------------------------------------------------------------------------
// Learning-rate schedule

TEST(CosineLr, EndpointsMidpointAndMonotone) {
  const std::size_t total = 1000;
  EXPECT_EQ(cosine_lr(0, total, 1e-2, 1e-7), 1e-2);
  EXPECT_EQ(cosine_lr(total - 1, total, 1e-2, 1e-7), 1e-7);
  EXPECT_NEAR(cosine_lr(0, 3, 1e-2, 1e-7) + cosine_lr(2, 3, 1e-2, 1e-7), 1e-2 + 1e-7, 1e-18);
  EXPECT_NEAR(cosine_lr(1, 3, 1e-2, 1e-7), 5.00005e-3, 1e-12);
  for (std::size_t s = 1; s < total; ++s) ASSERT_LE(cosine_lr(s, total, 1e-2, 1e-7), cosine_lr(s - 1, total, 1e-2, 1e-7));
  EXPECT_THROW(cosine_lr(total, total, 1e-2, 1e-7), ValueError);
  EXPECT_EQ(cosine_lr(0, 1, 1e-2, 1e-7), 1e-2);
}

// ---------------------------------------------------------------------------
// Aggregators

TEST(FedAvg, MatchesBruteForceWeightedMean) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> count(1, 50);
    std::vector<ClientUpdate> updates;
    for (auto id : {"D", "B", "A", "C"}) updates.push_back(update_of(id, random_checkpoint(rng), count(rng)));
    auto got = aggregate_fedavg(updates);
    double total = 0;
    for (const auto& u : updates) total += static_cast<double>(u.sample_count);
    for (std::size_t j = 0; j < got.entries.size(); ++j)
      for (std::size_t i = 0; i < got.entries[j].data.size(); ++i) {
        double want = 0;
        for (const auto& u : updates)
          want += static_cast<double>(u.sample_count) / total * u.parameters.entries[j].data[i];
        ASSERT_NEAR(got.entries[j].data[i], want, 1e-7);
      }
  }
}

TEST(FedAvg, WeightsBySampleCount) {
  std::mt19937_64 rng(1);
  auto zero = random_checkpoint(rng), one = zero;
  for (auto& e : zero.entries) std::fill(e.data.begin(), e.data.end(), 0.0f);
  for (auto& e : one.entries) std::fill(e.data.begin(), e.data.end(), 1.0f);
  auto avg = aggregate_fedavg({update_of("A", zero, 1), update_of("B", one, 3)});
  for (const auto& e : avg.entries)
    for (float v : e.data) EXPECT_EQ(v, 0.75f);
}

TEST(FedAvg, OrderOfArrivalDoesNotMatter) {
  std::mt19937_64 rng(2);
  std::vector<ClientUpdate> updates;
  for (auto id : {"A", "B", "C", "D"}) updates.push_back(update_of(id, random_checkpoint(rng), 7));
  auto forward = aggregate_fedavg(updates);
  std::reverse(updates.begin(), updates.end());
  EXPECT_EQ(aggregate_fedavg(updates), forward);
}

TEST(FedAvg, RejectsIncongruentUpdates) {
  std::mt19937_64 rng(3);
  auto a = random_checkpoint(rng), b = random_checkpoint(rng);
  b.entries[1].shape = Shape{1, 3};
  try {
    aggregate_fedavg({update_of("A", a, 1), update_of("B", b, 1)});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("a.bias"), std::string::npos);
  }
  EXPECT_THROW(aggregate_fedavg({}), ValueError);
  EXPECT_THROW(aggregate_fedavg({update_of("A", a, 0)}), ValueError);
}

TEST(FedOpt, WithoutMomentumEqualsFedAvg) {
  std::mt19937_64 rng(4);
  auto global = random_checkpoint(rng);
  std::vector<ClientUpdate> updates;
  for (auto id : {"A", "B", "C", "D"}) updates.push_back(update_of(id, random_checkpoint(rng), 1 + id[0] % 5));
  AggregatorConfig cfg;
  cfg.server_momentum = 0.0;
  cfg.server_lr = 1.0;
  FedOptState state;
  auto opt = aggregate_fedopt(global, updates, cfg, state);
  auto avg = aggregate_fedavg(updates);
  for (std::size_t j = 0; j < opt.entries.size(); ++j)
    for (std::size_t i = 0; i < opt.entries[j].data.size(); ++i)
      EXPECT_NEAR(opt.entries[j].data[i], avg.entries[j].data[i], 1e-6);
}

TEST(FedOpt, MomentumAccumulatesOverTwoRounds) {
  std::mt19937_64 rng(5);
  auto global = random_checkpoint(rng);
  auto delta = random_checkpoint(rng);
  auto shifted = [&](const Checkpoint& base) {
    Checkpoint c = base;
    for (std::size_t j = 0; j < c.entries.size(); ++j)
      for (std::size_t i = 0; i < c.entries[j].data.size(); ++i) c.entries[j].data[i] += delta.entries[j].data[i];
    return c;
  };
  AggregatorConfig cfg;  // momentum 0.6, server lr 1
  FedOptState state;
  auto g1 = aggregate_fedopt(global, {update_of("A", shifted(global), 2), update_of("B", shifted(global), 5)}, cfg,
                             state);
  auto g2 = aggregate_fedopt(g1, {update_of("A", shifted(g1), 2), update_of("B", shifted(g1), 5)}, cfg, state);
  for (std::size_t j = 0; j < g2.entries.size(); ++j)
    for (std::size_t i = 0; i < g2.entries[j].data.size(); ++i) {
      const double g = global.entries[j].data[i], d = delta.entries[j].data[i];
      EXPECT_NEAR(g1.entries[j].data[i], g + d, 1e-6);
      EXPECT_NEAR(g2.entries[j].data[i], g + 2.6 * d, 1e-6);
    }
}

// ---------------------------------------------------------------------------
// Client objective

TEST(ClientObjective, ProxWithZeroMuIsExactlyThePlainLoss) {
  const auto& data = tiny_data();
  auto setup = tiny_setup(1, 1);
  SegNet<float> net(setup.model, 3);
  auto batch = make_batch(data.clients[0].train, 0, 2);
  const auto topo = toy::client_topology(0);
  Tensor<float> teacher;
  {
    NoGradScope<float> off;
    teacher = SegNet<float>(setup.model, 4).forward(batch.images)[0];
  }
  std::vector<Tensor<float>> global;
  for (const auto& [n, t] : net.parameters()) global.push_back(t.detach() + 0.1f);
  NoGradScope<float> off;
  AggregatorConfig plain;
  plain.kind = AggregatorKind::fedavg;
  AggregatorConfig prox;
  prox.kind = AggregatorKind::fedprox;
  prox.prox_mu = 0.0;
  for (auto mode : {LossMode::marginal, LossMode::marginal_plus_condist}) {
    auto a = client_objective(net, batch.images, batch.labels, topo, mode, DistillConfig{}, 0.4, &teacher, plain,
                              &global);
    auto b = client_objective(net, batch.images, batch.labels, topo, mode, DistillConfig{}, 0.4, &teacher, prox,
                              &global);
    EXPECT_EQ(a.total.item(), b.total.item());
    EXPECT_GT(b.prox.item(), 0.0f);
  }
}

TEST(ClientObjective, ProxAugmentedGradient) {
  SegNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 2;
  cfg.num_classes = 8;
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<double> image(Shape{1, 1, 8, 8});
  for (auto& v : image.data()) v = u(rng);
  IndexTensor label(Shape{1, 8, 8}, 0);
  for (std::size_t i = 20; i < 30; ++i) label[i] = 1;
  const auto topo = toy::client_topology(0);
  SegNet<double> net(cfg, 7);
  std::vector<Tensor<double>> global;
  const SegNet<double> anchor(cfg, 8);
  for (const auto& [n, t] : anchor.parameters()) global.push_back(t.detach());
  Tensor<double> teacher;
  {
    NoGradScope<double> off;
    teacher = SegNet<double>(cfg, 9).forward(image)[0];
  }
  AggregatorConfig prox;
  prox.kind = AggregatorKind::fedprox;
  prox.prox_mu = 0.3;
  auto& params = net.parameters();
  for (std::size_t j = 0; j < params.size(); ++j) {
    const auto original = params[j].second;
    auto f = [&](const Tensor<double>& x) {
      params[j].second = x;
      return client_objective(net, image, label, topo, LossMode::marginal_plus_condist, DistillConfig{}, 0.7,
                              &teacher, prox, &global)
          .total;
    };
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < original.numel(); i += 1 + original.numel() / 5) coords.push_back(i);
    auto report = grad_check(f, original, 1e-5, 1e-3, coords);
    params[j].second = original;
    EXPECT_TRUE(report.passed) << params[j].first << " max err " << report.max_error;
  }
}

// ---------------------------------------------------------------------------
// Local training

TEST(LocalTrain, ZeroStepsReturnsTheGlobalModel) {
  auto setup = tiny_setup(2, 0);
  const auto global = SegNet<float>(setup.model, 1).to_checkpoint();
  ClientContext client{"A", toy::client_topology(0), &tiny_data().clients[0].train, 5};
  DistillConfig distill;
  distill.total_rounds = 2;
  auto update = local_train(client, global, 0, setup.train, distill, setup.aggregator, setup.model);
  EXPECT_EQ(update.parameters.entries, global.entries);
  EXPECT_EQ(update.metrics.steps, 0u);
  EXPECT_EQ(update.sample_count, tiny_data().clients[0].train.size());
}

TEST(LocalTrain, HugeProxPinsTheModel) {
  auto setup = tiny_setup(1, 10);
  setup.train.lr_start = 1e-6;
  setup.train.lr_end = 1e-7;
  setup.aggregator.kind = AggregatorKind::fedprox;
  setup.aggregator.prox_mu = 1e6;
  const auto global = SegNet<float>(setup.model, 1).to_checkpoint();
  ClientContext client{"B", toy::client_topology(1), &tiny_data().clients[1].train, 6};
  auto update = local_train(client, global, 0, setup.train, DistillConfig{}, setup.aggregator, setup.model);
  double worst = 0;
  for (std::size_t j = 0; j < global.entries.size(); ++j)
    for (std::size_t i = 0; i < global.entries[j].data.size(); ++i)
      worst = std::max(worst, std::abs(double(update.parameters.entries[j].data[i]) - global.entries[j].data[i]));
  EXPECT_LT(worst, 1e-3);
}

TEST(LocalTrain, TrainingMovesTheModelAndIsDeterministic) {
  auto setup = tiny_setup(1, 3);
  const auto global = SegNet<float>(setup.model, 1).to_checkpoint();
  ClientContext client{"C", toy::client_topology(2), &tiny_data().clients[2].train, 7};
  auto a = local_train(client, global, 0, setup.train, DistillConfig{}, setup.aggregator, setup.model);
  auto b = local_train(client, global, 0, setup.train, DistillConfig{}, setup.aggregator, setup.model);
  EXPECT_EQ(a.parameters, b.parameters);
  EXPECT_NE(a.parameters.entries, global.entries);
  EXPECT_EQ(a.parameters.round, 1u);
  EXPECT_EQ(a.parameters.step, 3u);
}

TEST(LocalTrain, EmptyClientIsAnError) {
  auto setup = tiny_setup(1, 1);
  Dataset empty;
  ClientContext client{"D", toy::client_topology(3), &empty, 1};
  EXPECT_THROW(local_train(client, SegNet<float>(setup.model, 1).to_checkpoint(), 0, setup.train, DistillConfig{},
                           setup.aggregator, setup.model),
               ValueError);
}

TEST(LocalTrain, NonFiniteLossAbortsWithContext) {
  auto setup = tiny_setup(1, 2);
  Dataset poisoned = tiny_data().clients[0].train;
  for (auto& s : poisoned.samples) s.image[5] = std::numeric_limits<float>::quiet_NaN();
  ClientContext client{"A", toy::client_topology(0), &poisoned, 5};
  try {
    local_train(client, SegNet<float>(setup.model, 1).to_checkpoint(), 0, setup.train, DistillConfig{},
                setup.aggregator, setup.model);
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_NE(std::string(e.what()).find("client A, round 0, step 0"), std::string::npos) << e.what();
  }
}

// ---------------------------------------------------------------------------
// Orchestration

TEST(Federation, ZeroStepsLeavesTheModelUntouched) {
  auto run = run_federation(tiny_setup(1, 0), tiny_data());
  EXPECT_EQ(run.final_model.entries, run.initial.entries);
}

TEST(Federation, LogHasOneRecordPerClientAndRound) {
  auto run = run_federation(tiny_setup(3, 1), tiny_data());
  std::size_t clients = 0, validations = 0;
  for (const auto& rec : run.log) {
    if (rec["type"] == "client") {
      ++clients;
      EXPECT_EQ(rec["steps"], 1);
    } else {
      ++validations;
      EXPECT_EQ(rec["per_class"].size(), 7u);
    }
  }
  EXPECT_EQ(clients, 12u);
  EXPECT_EQ(validations, 3u);
  EXPECT_EQ(run.log.front()["weight"], 0.01);
  EXPECT_EQ(run.log[run.log.size() - 2]["weight"], 1.0);
  EXPECT_EQ(run.final_model.round, 3u);
  EXPECT_GE(run.best_validation, 0.0);
}

TEST(Federation, RepeatedRunsAndWorkerCountsAgree) {
  auto setup = tiny_setup(2, 2);
  auto a = run_federation(setup, tiny_data());
  auto b = run_federation(setup, tiny_data());
  setup.workers = 1;
  auto c = run_federation(setup, tiny_data());
  EXPECT_EQ(a.log_jsonl(), b.log_jsonl());
  EXPECT_EQ(a.log_jsonl(), c.log_jsonl());
  EXPECT_EQ(a.final_model, c.final_model);
}

TEST(Federation, EveryAggregatorRuns) {
  for (auto kind : {AggregatorKind::fedavg, AggregatorKind::fedprox, AggregatorKind::fedopt}) {
    auto setup = tiny_setup(1, 1);
    setup.aggregator.kind = kind;
    setup.train.loss_mode = LossMode::marginal;
    EXPECT_NO_THROW(run_federation(setup, tiny_data()));
  }
}

TEST(Federation, ClientFailureAbortsTheRound) {
  auto data = tiny_data();
  data.clients[2].train.samples.clear();
  try {
    run_federation(tiny_setup(1, 1), data);
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_NE(std::string(e.what()).find("client C"), std::string::npos) << e.what();
  }
}
