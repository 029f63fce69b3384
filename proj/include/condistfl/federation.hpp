#pragma once

// Client trainer, server aggregators and the synchronous round loop.

#include <algorithm>
#include <array>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "condistfl/checkpoint.hpp"
#include "condistfl/evaluation.hpp"
#include "condistfl/losses.hpp"
#include "condistfl/seg_model.hpp"
#include "condistfl/synth_data.hpp"

namespace condistfl {

struct TrainConfig {
  std::size_t rounds = 20;
  std::size_t local_steps = 50;
  std::size_t batch_size = 4;
  double lr_start = 1e-2;
  double lr_end = 1e-7;
  LossMode loss_mode = LossMode::marginal_plus_condist;
  bool union_mode = false;

  std::size_t total_steps() const { return rounds * local_steps; }

  void validate() const {
    if (rounds < 1) throw ValueError("federation rounds must be positive");
    if (batch_size < 1) throw ValueError("federation batch_size must be positive");
    if (!(lr_start > lr_end && lr_end > 0.0)) throw ValueError("federation needs lr_start > lr_end > 0");
  }

  bool operator==(const TrainConfig&) const = default;
};

enum class AggregatorKind { fedavg, fedopt, fedprox };

struct AggregatorConfig {
  AggregatorKind kind = AggregatorKind::fedopt;
  double server_momentum = 0.6;
  double server_lr = 1.0;
  double prox_mu = 0.01;

  void validate() const {
    if (!(server_momentum >= 0.0 && server_momentum < 1.0)) throw ValueError("server_momentum must lie in [0, 1)");
    if (!(server_lr > 0.0)) throw ValueError("server_lr must be positive");
    if (!(prox_mu >= 0.0)) throw ValueError("prox_mu must be non-negative");
  }

  bool operator==(const AggregatorConfig&) const = default;
};

/// Server-side momentum buffer, one double vector per checkpoint entry.
struct FedOptState {
  std::vector<std::vector<double>> velocity;
};

struct SeedConfig {
  std::uint64_t server = 1;
  std::array<std::uint64_t, toy::kNumClients> clients{101, 102, 103, 104};

  bool operator==(const SeedConfig&) const = default;
};

struct LocalMetrics {
  double supervised = 0.0;
  double distill = 0.0;
  double prox = 0.0;
  double total = 0.0;
  std::size_t steps = 0;
};

struct ClientUpdate {
  std::string client_id;
  Checkpoint parameters;
  std::size_t sample_count = 0;
  LocalMetrics metrics;
};

/// Server -> client: the round's global model and distillation weight.
struct Broadcast {
  std::uint32_t round = 0;
  std::shared_ptr<const Checkpoint> global;
  double weight = 0.0;
};

struct ClientFailure {
  std::string client_id;
  std::string message;
};

using RoundMessage = std::variant<Broadcast, ClientUpdate, ClientFailure>;

/// Unbounded blocking FIFO shared between the server and the client workers.
template <typename M>
class Channel {
 public:
  void push(M message) {
    {
      std::lock_guard lock(mutex_);
      queue_.push_back(std::move(message));
    }
    ready_.notify_one();
  }

  /// Blocks until a message arrives; empty once the channel is closed and drained.
  std::optional<M> pop() {
    std::unique_lock lock(mutex_);
    ready_.wait(lock, [&] { return closed_ || !queue_.empty(); });
    if (queue_.empty()) return std::nullopt;
    M m = std::move(queue_.front());
    queue_.pop_front();
    return m;
  }

  void close() {
    {
      std::lock_guard lock(mutex_);
      closed_ = true;
    }
    ready_.notify_all();
  }

 private:
  std::mutex mutex_;
  std::condition_variable ready_;
  std::deque<M> queue_;
  bool closed_ = false;
};

/// Cosine annealing from lr_start (step 0) to lr_end (last step).
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_start, double lr_end) {
  if (step >= total_steps) {
    throw ValueError("cosine_lr: step " + std::to_string(step) + " outside a budget of " +
                     std::to_string(total_steps) + " steps");
  }
  if (total_steps == 1) return lr_start;
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return std::lerp(lr_end, lr_start, 0.5 * (1.0 + std::cos(phase)));
}

template <typename T>
struct ObjectiveTerms {
  Tensor<T> supervised;
  Tensor<T> distill;  // undefined unless distillation is on
  Tensor<T> prox;     // undefined unless the aggregator is fedprox
  Tensor<T> total;
};

/// Client loss on one batch. `teacher_heads` are detached global-model logits (only read in
/// marginal_plus_condist mode); `global_params` are detached copies aligned with student.parameters().
template <typename T>
ObjectiveTerms<T> client_objective(const SegNet<T>& student, const Tensor<T>& image, const IndexTensor& label,
                                   const ClassTopology& topo, LossMode mode, const DistillConfig& distill,
                                   double weight, const Tensor<T>* teacher_logits,
                                   const AggregatorConfig& aggregator, const std::vector<Tensor<T>>* global_params) {
  ObjectiveTerms<T> terms;
  const auto heads = student.forward(image);
  const LossMode sup_mode = mode == LossMode::marginal_plus_condist ? LossMode::marginal : mode;
  terms.supervised = deep_supervised_loss(heads, label, topo, sup_mode, distill.dice_epsilon);
  terms.total = terms.supervised;
  if (mode == LossMode::marginal_plus_condist) {
    if (!teacher_logits) throw ValueError("client_objective: distillation needs teacher logits");
    terms.distill = condist_loss(heads[0], *teacher_logits, label, topo, distill);
    terms.total = total_loss(terms.supervised, terms.distill, weight);
  }
  if (aggregator.kind == AggregatorKind::fedprox) {
    const auto& params = student.parameters();
    if (!global_params || global_params->size() != params.size()) {
      throw ValueError("client_objective: proximal term needs the global parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto term = sum(pow2(params[i].second - (*global_params)[i]));
      terms.prox = terms.prox.defined() ? terms.prox + term : term;
    }
    terms.total = terms.total + terms.prox * static_cast<T>(aggregator.prox_mu / 2.0);
  }
  return terms;
}

struct ClientContext {
  std::string id;
  ClassTopology topology;
  const Dataset* train = nullptr;
  std::uint64_t seed = 0;
};

/// Per-round iterator seed for a client.
inline std::uint64_t round_seed(std::uint64_t client_seed, std::uint32_t round) {
  return detail::splitmix64(client_seed ^ detail::splitmix64(std::uint64_t{round} + 1));
}

/// S steps of plain SGD starting from the global model.
inline ClientUpdate local_train(const ClientContext& client, const Checkpoint& global, std::uint32_t round,
                                const TrainConfig& train, const DistillConfig& distill,
                                const AggregatorConfig& aggregator, const SegNetConfig& model) {
  if (!client.train || client.train->size() == 0) throw ValueError("client " + client.id + " has no training data");
  detail::FlushDenormals ftz;
  SegNet<float> student(model);
  student.load(global);
  std::optional<SegNet<float>> teacher;
  const bool distilling = train.loss_mode == LossMode::marginal_plus_condist;
  if (distilling) {
    teacher.emplace(model);
    teacher->load(global);
    teacher->set_requires_grad(false);
  }
  std::vector<Tensor<float>> global_params;
  if (aggregator.kind == AggregatorKind::fedprox)
    for (const auto& [name, t] : student.parameters()) global_params.push_back(t.detach());

  const double weight = distilling ? schedule_weight(round, distill) : 0.0;
  const UnionMap union_map = toy_union_map();
  BatchIterator batches(*client.train, train.batch_size, round_seed(client.seed, round));
  LocalMetrics metrics;
  for (std::size_t s = 0; s < train.local_steps; ++s) {
    const std::size_t step = round * train.local_steps + s;
    const double lr = cosine_lr(step, train.total_steps(), train.lr_start, train.lr_end);
    auto batch = batches.next();
    if (train.union_mode) batch.labels = union_merge(batch.labels, union_map);

    Tensor<float> teacher_logits;
    if (distilling) {
      NoGradScope<float> no_grad;
      teacher_logits = teacher->forward(batch.images)[0];
    }
    const std::string where =
        "client " + client.id + ", round " + std::to_string(round) + ", step " + std::to_string(s) + ": ";
    Tape<float> tape;
    ObjectiveTerms<float> terms;
    try {
      TapeScope<float> scope(tape);
      terms = client_objective(student, batch.images, batch.labels, client.topology, train.loss_mode, distill, weight,
                               distilling ? &teacher_logits : nullptr, aggregator, &global_params);
    } catch (const ValueError& e) {
      throw TrainingAborted(where + e.what());
    }
    auto check = [&](const Tensor<float>& t, const char* name) {
      if (t.defined() && !std::isfinite(t.item())) throw TrainingAborted(where + "non-finite " + name + " loss");
    };
    check(terms.supervised, "supervised");
    check(terms.distill, "distillation");
    check(terms.prox, "proximal");
    check(terms.total, "total");
    tape.backward(terms.total);
    for (auto& [name, p] : student.parameters()) {
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto v = p.data();
      const auto rate = static_cast<float>(lr);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= rate * g[i];
    }
    student.zero_grad();

    metrics.supervised += terms.supervised.item();
    if (terms.distill.defined()) metrics.distill += terms.distill.item();
    if (terms.prox.defined()) metrics.prox += terms.prox.item();
    metrics.total += terms.total.item();
    ++metrics.steps;
  }
  if (metrics.steps) {
    const auto n = static_cast<double>(metrics.steps);
    metrics.supervised /= n;
    metrics.distill /= n;
    metrics.prox /= n;
    metrics.total /= n;
  }
  return {client.id, student.to_checkpoint(round + 1, (round + 1) * train.local_steps), client.train->size(),
          metrics};
}

namespace detail {

inline std::vector<const ClientUpdate*> sorted_updates(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw ValueError("aggregation needs at least one client update");
  std::vector<const ClientUpdate*> out;
  for (const auto& u : updates) {
    if (u.sample_count == 0) throw ValueError("client " + u.client_id + " reported zero samples");
    out.push_back(&u);
  }
  std::stable_sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
  return out;
}

inline std::vector<double> sample_weights(const std::vector<const ClientUpdate*>& updates) {
  double total = 0.0;
  for (auto* u : updates) total += static_cast<double>(u->sample_count);
  std::vector<double> w;
  for (auto* u : updates) w.push_back(static_cast<double>(u->sample_count) / total);
  return w;
}

inline const CheckpointEntry& matching_entry(const ClientUpdate& u, const CheckpointEntry& ref) {
  const auto* e = u.parameters.find(ref.name);
  if (!e) throw ShapeError("client " + u.client_id + " update lacks parameter '" + ref.name + "'");
  if (e->shape != ref.shape) {
    throw ShapeError("parameter '" + ref.name + "' has shape " + to_string(e->shape) + " from client " + u.client_id +
                     ", expected " + to_string(ref.shape));
  }
  return *e;
}

}  // namespace detail

/// Sample-count weighted mean of the client parameters.
inline Checkpoint aggregate_fedavg(const std::vector<ClientUpdate>& updates) {
  const auto sorted = detail::sorted_updates(updates);
  const auto w = detail::sample_weights(sorted);
  Checkpoint out = sorted.front()->parameters;
  std::vector<double> acc;
  for (auto& entry : out.entries) {
    acc.assign(entry.data.size(), 0.0);
    for (std::size_t k = 0; k < sorted.size(); ++k) {
      const auto& e = detail::matching_entry(*sorted[k], entry);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w[k] * static_cast<double>(e.data[i]);
    }
    for (std::size_t i = 0; i < acc.size(); ++i) entry.data[i] = static_cast<float>(acc[i]);
  }
  return out;
}

/// Server SGD with momentum on the weighted mean client delta.
inline Checkpoint aggregate_fedopt(const Checkpoint& global, const std::vector<ClientUpdate>& updates,
                                   const AggregatorConfig& cfg, FedOptState& state) {
  cfg.validate();
  const auto sorted = detail::sorted_updates(updates);
  const auto w = detail::sample_weights(sorted);
  if (state.velocity.empty()) {
    for (const auto& e : global.entries) state.velocity.emplace_back(e.data.size(), 0.0);
  }
  if (state.velocity.size() != global.entries.size()) throw ShapeError("fedopt velocity is not congruent with global");
  Checkpoint out = global;
  for (std::size_t j = 0; j < out.entries.size(); ++j) {
    auto& entry = out.entries[j];
    auto& v = state.velocity[j];
    if (v.size() != entry.data.size()) {
      throw ShapeError("fedopt velocity for parameter '" + entry.name + "' is not congruent with global");
    }
    for (std::size_t i = 0; i < v.size(); ++i) v[i] *= cfg.server_momentum;
    for (std::size_t k = 0; k < sorted.size(); ++k) {
      const auto& e = detail::matching_entry(*sorted[k], entry);
      for (std::size_t i = 0; i < v.size(); ++i)
        v[i] += w[k] * (static_cast<double>(e.data[i]) - static_cast<double>(entry.data[i]));
    }
    for (std::size_t i = 0; i < v.size(); ++i)
      entry.data[i] = static_cast<float>(static_cast<double>(entry.data[i]) + cfg.server_lr * v[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Round orchestration

struct FederationSetup {
  SegNetConfig model;
  TrainConfig train;
  AggregatorConfig aggregator;
  DistillConfig distill;
  SeedConfig seeds;
  std::size_t workers = toy::kNumClients;

  bool operator==(const FederationSetup&) const = default;
};

struct RunResult {
  Checkpoint initial;
  Checkpoint final_model;
  Checkpoint best_model;
  double best_validation = -1.0;
  std::vector<nlohmann::json> log;

  std::string log_jsonl() const {
    std::string out;
    for (const auto& rec : log) out += rec.dump() + "\n";
    return out;
  }
};

/// Classes a client can validate: its own foreground, union-merged if requested.
inline std::vector<std::size_t> validation_classes(const ClassTopology& topo, bool union_mode) {
  const UnionMap map = toy_union_map();
  std::set<std::size_t> out;
  for (auto c : topo.foreground) out.insert(union_mode ? map.apply(c) : c);
  return {out.begin(), out.end()};
}

inline RunResult run_federation(const FederationSetup& setup, const GeneratedData& data) {
  setup.model.validate();
  setup.train.validate();
  setup.aggregator.validate();
  DistillConfig distill = setup.distill;
  distill.total_rounds = setup.train.rounds;
  distill.validate();

  std::vector<ClientContext> clients;
  for (std::size_t k = 0; k < toy::kNumClients; ++k) {
    clients.push_back({toy::kClientNames[k], toy::client_topology(k), &data.clients[k].train, setup.seeds.clients[k]});
  }
  const std::size_t workers = std::clamp<std::size_t>(setup.workers, 1, clients.size());
  if (workers > 1) detail::set_blas_threads(1);

  struct Task {
    std::size_t client;
    Broadcast message;
  };
  Channel<Task> tasks;
  Channel<RoundMessage> replies;
  std::vector<std::jthread> pool;
  for (std::size_t i = 0; i < workers; ++i) {
    pool.emplace_back([&] {
      while (auto task = tasks.pop()) {
        const auto& ctx = clients[task->client];
        try {
          replies.push(local_train(ctx, *task->message.global, task->message.round, setup.train, distill,
                                   setup.aggregator, setup.model));
        } catch (const std::exception& e) {
          replies.push(ClientFailure{ctx.id, e.what()});
        }
      }
    });
  }
  struct PoolGuard {
    Channel<Task>& tasks;
    ~PoolGuard() { tasks.close(); }
  } guard{tasks};

  RunResult result;
  result.initial = SegNet<float>(setup.model, setup.seeds.server).to_checkpoint(0, 0);
  auto global = std::make_shared<const Checkpoint>(result.initial);
  FedOptState fedopt;
  for (std::uint32_t r = 0; r < setup.train.rounds; ++r) {
    const double weight = schedule_weight(r, distill);
    for (std::size_t k = 0; k < clients.size(); ++k) tasks.push({k, Broadcast{r, global, weight}});

    std::vector<ClientUpdate> updates;
    std::vector<ClientFailure> failures;
    for (std::size_t n = 0; n < clients.size(); ++n) {
      auto reply = replies.pop();
      if (auto* u = std::get_if<ClientUpdate>(&*reply)) {
        updates.push_back(std::move(*u));
      } else if (auto* f = std::get_if<ClientFailure>(&*reply)) {
        failures.push_back(std::move(*f));
      } else {
        throw std::logic_error("server received a broadcast");
      }
    }
    if (!failures.empty()) {
      std::sort(failures.begin(), failures.end(), [](auto& a, auto& b) { return a.client_id < b.client_id; });
      throw TrainingAborted("round " + std::to_string(r) + " aborted: " + failures.front().message);
    }
    if (updates.size() != clients.size()) throw std::logic_error("round barrier released early");
    std::sort(updates.begin(), updates.end(), [](auto& a, auto& b) { return a.client_id < b.client_id; });

    for (const auto& u : updates) {
      result.log.push_back({{"type", "client"},
                            {"round", r},
                            {"client", u.client_id},
                            {"weight", weight},
                            {"samples", u.sample_count},
                            {"steps", u.metrics.steps},
                            {"supervised", u.metrics.supervised},
                            {"distill", u.metrics.distill},
                            {"prox", u.metrics.prox},
                            {"total", u.metrics.total}});
    }

    Checkpoint next = setup.aggregator.kind == AggregatorKind::fedopt
                          ? aggregate_fedopt(*global, updates, setup.aggregator, fedopt)
                          : aggregate_fedavg(updates);
    next.round = r + 1;
    next.step = static_cast<std::uint64_t>(r + 1) * setup.train.local_steps;
    global = std::make_shared<const Checkpoint>(std::move(next));

    nlohmann::json per_class = nlohmann::json::object();
    double score_sum = 0.0;
    std::size_t score_count = 0;
    for (std::size_t k = 0; k < clients.size(); ++k) {
      auto report = evaluate(*global, setup.model, data.clients[k].val, setup.train.union_mode,
                             validation_classes(clients[k].topology, setup.train.union_mode));
      for (const auto& [c, v] : report.per_class) {
        per_class[std::to_string(c)] = v;
        score_sum += v;
        ++score_count;
      }
    }
    const double average = score_count ? score_sum / static_cast<double>(score_count) : 0.0;
    result.log.push_back({{"type", "validation"}, {"round", r}, {"per_class", per_class}, {"average", average}});
    if (average > result.best_validation) {
      result.best_validation = average;
      result.best_model = *global;
    }
  }
  result.final_model = *global;
  return result;
}

}  // namespace condistfl
