#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "framelet/config.hpp"
#include "framelet/metrics.hpp"

namespace framelet {

// Result of one method inside an experiment run. A method that throws is
// recorded with ok = false and its error text; the other methods proceed.
struct MethodOutcome {
  MethodKind kind = MethodKind::Grappa;
  bool ok = false;
  std::string error;
  ReconReport report;  // finalized when ok
  double runtime_seconds = 0.0;
};

struct ExperimentResult {
  std::filesystem::path dir;
  std::string config_hash;
  std::vector<MethodOutcome> outcomes;
};

// One summary row per method, in CSV and aligned-text form. Mean columns are
// recomputed from the per-sample metrics so the summary can never disagree
// with the per-sample CSV files.
std::string summary_to_csv(const ExperimentResult& result);
std::string summary_to_text(const ExperimentResult& result);

// Generates the train/val/test splits from the config seed, then runs every
// requested method over the test split. Per method, writes a report pair
// (JSON + CSV) and a timings sidecar under out_dir/<method>/, plus a
// checkpoint and training log for network methods and geometry artifacts
// (frame identity report, activation-region census) when enabled. The run
// directory keeps the resolved config and its hash, and summary.csv /
// summary.txt cover all methods. Method failures land in their summary row;
// the runner itself only throws for config or filesystem errors.
ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::filesystem::path& out_dir);

}  // namespace framelet
