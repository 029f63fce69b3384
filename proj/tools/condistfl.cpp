// Command-line driver: gen-data, train, eval, ablation, defaults.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime abort.

#include <malloc.h>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "condistfl/condistfl.hpp"

namespace fs = std::filesystem;
using namespace condistfl;

namespace {

constexpr int kConfigError = 1;
constexpr int kRuntimeAbort = 2;

struct UsageError : ConfigError {
  using ConfigError::ConfigError;
};

ExperimentConfig load_or_default(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_config(path);
}

void prepare_output(const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_directory(out)) throw UsageError(out.string() + " exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) throw UsageError(out.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

GeneratedData load_data(const fs::path& dir) {
  if (!fs::exists(layout::spec_file(dir))) throw UsageError("no generated dataset under " + dir.string());
  return read_generated(dir);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void print_report(const DiceReport& r) {
  std::cout << r.dataset_id << ": average " << r.average << " over " << r.per_class.size() << " classes (";
  bool first = true;
  for (const auto& [c, v] : r.per_class) {
    std::cout << (first ? "" : ", ") << c << ": " << v;
    first = false;
  }
  std::cout << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  // Per-step activations are large enough to be mmapped; keep them on the heap instead.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);

  CLI::App app{"Federated partial-label segmentation with conditional distillation"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, checkpoint_path;
  bool force = false, union_flag = false, reference = false, tsv = false;
  std::optional<std::size_t> workers;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic client splits and external test set");
  gen->add_option("--config", config_path, "Experiment config (defaults when omitted)");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_flag("--force", force, "Overwrite a non-empty output directory");

  auto* train = app.add_subcommand("train", "Run one federated experiment");
  train->add_option("--config", config_path, "Experiment config (defaults when omitted)");
  train->add_option("--data", data_dir, "Directory written by gen-data")->required();
  train->add_option("--out", out_dir, "Run directory")->required();
  train->add_option("--workers", workers, "Concurrent client trainers");
  train->add_flag("--force", force, "Overwrite a non-empty run directory");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint");
  eval->add_option("--config", config_path, "Experiment config (defaults when omitted)");
  eval->add_option("--data", data_dir, "Directory written by gen-data")->required();
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  eval->add_option("--out", out_dir, "Directory for report.csv and report.json")->required();
  eval->add_flag("--union", union_flag, "Merge tumour labels into their organs before scoring");

  auto* ablation = app.add_subcommand("ablation", "Local-steps ablation at a fixed step budget");
  ablation->add_option("--config", config_path, "Experiment config (defaults when omitted)");
  ablation->add_option("--data", data_dir, "Directory written by gen-data")->required();
  ablation->add_option("--out", out_dir, "Directory for the ablation table")->required();
  ablation->add_option("--workers", workers, "Concurrent client trainers");
  ablation->add_flag("--tsv", tsv, "Also write a plot-ready ablation.tsv");
  ablation->add_flag("--force", force, "Overwrite a non-empty output directory");

  auto* defaults = app.add_subcommand("defaults", "Print the default config");
  defaults->add_flag("--reference", reference, "Print a markdown table of every key instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (defaults->parsed()) {
      std::cout << (reference ? config_reference() : render_config(ExperimentConfig{}, true));
      return 0;
    }

    auto cfg = load_or_default(config_path);
    if (workers) cfg.workers = *workers;
    if (union_flag) cfg.eval.union_mode = true;
    validate(cfg);
    const auto t0 = std::chrono::steady_clock::now();

    if (gen->parsed()) {
      prepare_output(out_dir, force);
      write_generated(generate(cfg.data), cfg.data, out_dir);
      std::cout << "wrote dataset to " << out_dir << " in " << seconds_since(t0) << " s\n";
    } else if (train->parsed()) {
      const auto data = load_data(data_dir);
      prepare_output(out_dir, force);
      const auto run = run_experiment(cfg, data);
      write_run(run, cfg, out_dir);
      std::cout << "trained " << cfg.train.rounds << " rounds x " << cfg.train.local_steps << " steps ("
                << to_string(cfg.train.loss_mode) << ", " << to_string(cfg.aggregator.kind) << ") in "
                << seconds_since(t0) << " s; best validation Dice " << run.best_validation << "\n";
    } else if (eval->parsed()) {
      const auto data = load_data(data_dir);
      const auto ckpt = load_checkpoint(checkpoint_path);
      const auto reports = evaluate_datasets(ckpt, cfg, data, fs::path(checkpoint_path).stem().string());
      nlohmann::json doc = nlohmann::json::array();
      for (const auto& r : reports) {
        print_report(r);
        doc.push_back(to_json(r));
      }
      write_text(fs::path(out_dir) / "report.csv", reports_to_csv(reports));
      write_text(fs::path(out_dir) / "report.json", doc.dump(2) + "\n");
    } else if (ablation->parsed()) {
      const auto data = load_data(data_dir);
      prepare_output(out_dir, force);
      const auto rows = ablation_local_steps(cfg, data, [](const AblationRow& row, std::size_t rep, double score) {
        std::cout << row.method << " S=" << row.local_steps << " R=" << row.rounds << " replicate " << rep
                  << ": external Dice " << score << std::endl;
      });
      std::vector<DiceReport> reports;
      for (const auto& row : rows) reports.insert(reports.end(), row.reports.begin(), row.reports.end());
      write_text(fs::path(out_dir) / "ablation.csv", reports_to_csv(reports));
      if (tsv) write_text(fs::path(out_dir) / "ablation.tsv", ablation_tsv(rows));
      for (const auto& row : rows)
        std::cout << row.method << " S=" << row.local_steps << ": median " << row.median() << "\n";
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return kRuntimeAbort;
  }
}
