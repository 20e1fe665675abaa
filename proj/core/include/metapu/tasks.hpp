#pragma once

// Synthetic PU benchmark: Gaussian-mixture and half-moon tasks rotated about
// the origin, with labeled/unlabeled splits and target-episode construction.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "metapu/model.hpp"

namespace metapu {

using Rng = std::mt19937_64;

enum class GeneratorKind { gaussian_mixture, half_moon, external };

const char* to_string(GeneratorKind kind);
GeneratorKind generator_kind_from_string(const std::string& name);

/// Points with labels in {+1, -1}.
struct LabeledSample {
  Matrix x;
  std::vector<int> labels;

  ad::Index size() const { return x.rows(); }
  double positive_fraction() const;
};

/// Positives ~ N((-1.5, 0), I), negatives ~ N((1.5, 0), I); each label is +1 with probability prior.
LabeledSample gen_gaussian_mixture(int n, double prior, Rng& rng);
/// Positives on the upper arc (cos t, sin t), negatives on (1 - cos t, 0.5 - sin t), t ~ U[0, pi],
/// plus N(0, noise_var) noise per coordinate.
LabeledSample gen_half_moon(int n, double prior, double noise_var, Rng& rng);
/// Counter-clockwise rotation of 2-D points about the origin.
Matrix rotate(const Matrix& points, double theta);

/// Draws exactly n_pos positives and n_neg negatives from a generator
/// (used for stratified test pools).
LabeledSample gen_stratified(GeneratorKind kind, int n_pos, int n_neg, double angle, Rng& rng);
/// Draws n points with i.i.d. class membership at the given prior, then rotates.
LabeledSample gen_task_sample(GeneratorKind kind, int n, double prior, double angle, Rng& rng);

inline constexpr double kHalfMoonNoiseVar = 0.4;

struct TaskDataset {
  int id = 0;
  GeneratorKind kind = GeneratorKind::external;
  double angle = 0.0;
  double true_prior = 0.5;
  Matrix positives;
  Matrix negatives;
  Matrix unlabeled;
  /// Labels of the unlabeled rows; kept for diagnostics and scoring, never for adaptation.
  std::vector<int> hidden_unlabeled_labels;

  int input_dim() const { return static_cast<int>(positives.cols()); }
  double labeled_positive_ratio() const;
};

struct BenchmarkSplit {
  std::vector<TaskDataset> source;
  std::vector<TaskDataset> validation;
  std::vector<TaskDataset> target;
  std::uint64_t seed = 0;
};

struct BenchmarkConfig {
  int total_tasks = 140;
  int n_source = 100;
  int n_validation = 20;
  int n_target = 20;
  int points_per_task = 300;
  std::vector<double> priors{0.2, 0.4, 0.6, 0.8};
};

/// Builds total_tasks tasks (task t rotated by 2 pi (t - 1) / 180) and
/// assigns disjoint random subsets to the source, validation and target splits.
BenchmarkSplit build_synthetic_benchmark(std::uint64_t seed, const BenchmarkConfig& config = {});

/// Deterministic per-task stream derived from (seed, task id).
Rng task_rng(std::uint64_t seed, std::uint64_t stream);

/// A target-task episode: PU support plus a labeled test pool.
struct TargetEpisode {
  SupportSet support;
  Matrix test_x;
  std::vector<int> test_labels;
  double prior = 0.5;  // prior of the unlabeled and test data
};

/// Builds a support set of n_support_pos labeled positives and
/// total_support - n_support_pos unlabeled instances, plus a test pool of
/// n_test instances drawn like the unlabeled part. With prior_override the
/// unlabeled and test pools are regenerated at that prior (generated tasks only).
TargetEpisode make_target_episode(const TaskDataset& task, int n_support_pos, int total_support,
                                  std::optional<double> prior_override, int n_test, Rng& rng);

// Persistence (JSON Lines, see docs/task_format.md).
inline constexpr int kTaskFormatVersion = 1;

void save_tasks(const BenchmarkSplit& split, const std::filesystem::path& path);
BenchmarkSplit load_tasks(const std::filesystem::path& path);

}  // namespace metapu
