#pragma once

// Target-task evaluation grid shared by the CLI and the acceptance suite:
// per-episode result rows, best-over-grid baseline selection, result CSVs
// and summary statistics.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metapu/baselines.hpp"
#include "metapu/model.hpp"
#include "metapu/tasks.hpp"

namespace metapu {

enum class Ablation { full, no_z, no_prior, true_prior };

const char* to_string(Ablation a);
Ablation ablation_from_string(const std::string& name);

struct EvalGrid {
  std::vector<int> support_sizes{1, 3, 5};
  std::vector<double> priors{0.2, 0.4, 0.6, 0.8};
  int total_support = 30;
  int n_test = 200;
  int repeats = 5;

  void validate() const;
  std::size_t episodes_per_task() const { return support_sizes.size() * priors.size() * static_cast<std::size_t>(repeats); }
};

inline constexpr int kResultFormatVersion = 1;

struct ResultRow {
  int split_id = 0;
  int task_id = 0;
  std::string method;    // "ours" or a baseline name
  std::string ablation;  // Ablation name for "ours", "none" for baselines
  int n_support_pos = 0;
  double target_prior = 0.0;
  double accuracy = 0.0;
  std::optional<double> prior_error;  // |estimated - true prior|, absent when the prior is supplied
  std::uint64_t seed = 0;
  std::string hyperparam;  // chosen grid point for baselines
  bool best_over_grid = false;
};

/// Episode of one grid cell; identical for every method given (seed, task, cell, repeat).
TargetEpisode grid_episode(const TaskDataset& task, const EvalGrid& grid, std::size_t support_index,
                           std::size_t prior_index, int repeat, std::uint64_t seed);

/// Fraction of predictions equal to labels.
double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);

/// One row per (target task, support size, prior, repeat). For Ablation::no_z
/// pass a model trained without task representations.
std::vector<ResultRow> evaluate_model(const MetaParams& theta, const std::vector<TaskDataset>& targets,
                                      const EvalGrid& grid, Ablation ablation, int split_id, std::uint64_t seed,
                                      int threads = 1);

/// Runs every grid point of the baseline on every episode, then keeps the
/// hyperparameter with the best mean accuracy over the whole split.
std::vector<ResultRow> evaluate_baseline(BaselineKind kind, const std::vector<TaskDataset>& targets,
                                         const EvalGrid& grid, const BaselineConfig& base, int split_id,
                                         std::uint64_t seed, int threads = 1);

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_results_csv(std::istream& in);

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;  // across split repetitions; 0 with a single split
  std::size_t splits = 0;
};

struct MethodSummary {
  std::string method;
  std::string ablation;
  MeanStderr overall;
  std::map<int, MeanStderr> by_support;
  std::map<double, MeanStderr> by_prior;
  std::optional<double> prior_rmse;
};

/// Accuracy is averaged uniformly within each (task, support size, prior)
/// cell, then over cells of a split; statistics are taken across splits.
std::vector<MethodSummary> summarize(const std::vector<ResultRow>& rows);

/// Summary row for (method, ablation), or nullptr.
const MethodSummary* find_summary(const std::vector<MethodSummary>& s, const std::string& method,
                                  const std::string& ablation);

}  // namespace metapu
