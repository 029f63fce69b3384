#pragma once

// Whole-run drivers: training with artifact output, method presets and the
// local-steps ablation.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "condistfl/config.hpp"
#include "condistfl/evaluation.hpp"
#include "condistfl/federation.hpp"

namespace condistfl {

/// Rewrites loss mode, aggregator and union flag for a named method.
inline ExperimentConfig with_method(ExperimentConfig cfg, const std::string& method) {
  auto set = [&](LossMode mode, AggregatorKind kind, bool union_mode) {
    cfg.train.loss_mode = mode;
    cfg.aggregator.kind = kind;
    cfg.train.union_mode = union_mode;
    cfg.eval.union_mode = union_mode;
  };
  if (method == "fedavg_star") set(LossMode::dice_ce_standard, AggregatorKind::fedavg, false);
  else if (method == "fedavg") set(LossMode::marginal, AggregatorKind::fedavg, false);
  else if (method == "fedprox") set(LossMode::marginal, AggregatorKind::fedprox, false);
  else if (method == "fedopt") set(LossMode::marginal, AggregatorKind::fedopt, false);
  else if (method == "condistfl") set(LossMode::marginal_plus_condist, AggregatorKind::fedopt, false);
  else if (method == "condistfl_union") set(LossMode::marginal_plus_condist, AggregatorKind::fedopt, true);
  else throw ConfigError("unknown method '" + method + "'");
  return cfg;
}

/// Shifts every training seed; replicate 0 is the configured seeds.
inline ExperimentConfig with_replicate(ExperimentConfig cfg, std::size_t replicate) {
  cfg.seeds.server += 1000 * replicate;
  for (auto& s : cfg.seeds.clients) s += 1000 * replicate;
  return cfg;
}

inline RunResult run_experiment(const ExperimentConfig& cfg, const GeneratedData& data) {
  validate(cfg);
  return run_federation(cfg.federation(), data);
}

namespace run_layout {
inline std::filesystem::path final_checkpoint(const std::filesystem::path& out) { return out / "final.ckpt"; }
inline std::filesystem::path best_checkpoint(const std::filesystem::path& out) { return out / "best.ckpt"; }
inline std::filesystem::path metrics(const std::filesystem::path& out) { return out / "metrics.jsonl"; }
inline std::filesystem::path config(const std::filesystem::path& out) { return out / "config.ini"; }
}  // namespace run_layout

inline void write_run(const RunResult& run, const ExperimentConfig& cfg, const std::filesystem::path& out) {
  save_checkpoint(run.final_model, run_layout::final_checkpoint(out));
  save_checkpoint(run.best_model, run_layout::best_checkpoint(out));
  write_text(run_layout::metrics(out), run.log_jsonl());
  write_text(run_layout::config(out), render_config(cfg));
}

/// Scores a checkpoint on the datasets named in cfg.eval.
inline std::vector<DiceReport> evaluate_datasets(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                                                 const GeneratedData& data, const std::string& run_id) {
  std::vector<DiceReport> reports;
  for (const auto& name : cfg.eval.datasets) {
    if (name == "external") {
      auto r = evaluate(ckpt, cfg.model, data.external, cfg.eval.union_mode);
      r.run_id = run_id;
      r.dataset_id = "external";
      reports.push_back(std::move(r));
    } else {
      for (std::size_t k = 0; k < toy::kNumClients; ++k) {
        auto r = evaluate(ckpt, cfg.model, data.clients[k].test, cfg.eval.union_mode,
                          validation_classes(toy::client_topology(k), cfg.eval.union_mode));
        r.run_id = run_id;
        r.dataset_id = "client_" + toy::kClientNames[k] + "/test";
        reports.push_back(std::move(r));
      }
    }
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Local-steps ablation

struct AblationRow {
  std::string method;
  std::size_t local_steps = 0;
  std::size_t rounds = 0;
  std::vector<double> scores;  // external average Dice per replicate
  std::vector<DiceReport> reports;

  double median() const {
    auto s = scores;
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();
    if (n == 0) return 0.0;
    return n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  }
};

using AblationProgress = std::function<void(const AblationRow&, std::size_t replicate, double score)>;

/// One run per (method, S, replicate) at R = total_steps / S; scored on the external set
/// with the final global model.
inline std::vector<AblationRow> ablation_local_steps(const ExperimentConfig& base, const GeneratedData& data,
                                                     const AblationProgress& progress = {}) {
  validate(base);
  std::vector<AblationRow> rows;
  for (const auto& method : base.ablation.methods) {
    for (auto steps : base.ablation.local_steps) {
      AblationRow row{method, steps, base.ablation.total_steps / steps, {}, {}};
      for (std::size_t rep = 0; rep < base.ablation.replicates; ++rep) {
        auto cfg = with_replicate(with_method(base, method), rep);
        cfg.train.local_steps = steps;
        cfg.train.rounds = row.rounds;
        auto run = run_experiment(cfg, data);
        auto report = evaluate(run.final_model, cfg.model, data.external, cfg.eval.union_mode);
        report.run_id = method + "_s" + std::to_string(steps) + "_r" + std::to_string(rep);
        report.dataset_id = "external";
        row.scores.push_back(report.average);
        row.reports.push_back(report);
        if (progress) progress(row, rep, report.average);
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline std::string ablation_tsv(const std::vector<AblationRow>& rows) {
  std::string out = "method\tlocal_steps\trounds\tmedian_dice";
  const std::size_t reps = rows.empty() ? 0 : rows.front().scores.size();
  for (std::size_t i = 0; i < reps; ++i) out += "\treplicate_" + std::to_string(i);
  out += "\n";
  for (const auto& r : rows) {
    out += r.method + "\t" + std::to_string(r.local_steps) + "\t" + std::to_string(r.rounds) + "\t" +
           detail::format_value(r.median());
    for (double s : r.scores) out += "\t" + detail::format_value(s);
    out += "\n";
  }
  return out;
}

}  // namespace condistfl
