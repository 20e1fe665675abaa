#pragma once

// Episodic meta-training: sample a source task, draw a PU support set and a
// labeled query set, adapt in closed form and take an Adam step on the
// smoothed query risk. Validation accuracy drives early stopping.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "metapu/model.hpp"
#include "metapu/nn.hpp"
#include "metapu/tasks.hpp"

namespace metapu {

struct EpisodeConfig {
  int n_support_pos = 5;
  int n_support_unl = 25;
  int n_query = 50;
  /// When nonempty, each episode draws its positive support size from this
  /// list and fills the rest of the n_support_pos + n_support_unl budget
  /// with unlabeled instances.
  std::vector<int> support_pos_choices;

  int support_budget() const { return n_support_pos + n_support_unl; }
  void validate() const;
};

struct Episode {
  SupportSet support;
  QuerySet query;
};

/// Positive query count: round(n_query * ratio) clamped to [1, n_query - 1].
int query_positive_count(int n_query, double labeled_positive_ratio);

Episode sample_episode(const TaskDataset& task, const EpisodeConfig& cfg, Rng& rng);

struct TrainConfig {
  double learning_rate = 1e-3;
  int max_iterations = 30000;
  int validation_every = 250;
  int validation_episodes = 10;  // per validation task
  int patience = 20;             // validations without improvement
  double tau = 10.0;
  std::uint64_t seed = 0;
  double lambda_init = 0.1;
  ModelDims dims{};
  /// Abort when more than this fraction of episodes is degenerate.
  double max_skip_rate = 0.01;
  int threads = 1;

  void validate() const;
};

struct StepResult {
  double loss = 0.0;
  bool skipped = false;
};

/// One Adam step on the smoothed risk of a single episode. Returns the
/// pre-update loss. Degenerate support ratios leave the parameters untouched.
StepResult train_step(MetaParams& theta, nn::Adam& opt, const Episode& episode, double tau);

/// Mean of 1 - zero_one_risk over episodes_per_task episodes of every task.
double validate(const MetaParams& theta, const std::vector<TaskDataset>& tasks, const EpisodeConfig& ecfg,
                std::uint64_t seed, int episodes_per_task, int threads = 1);

struct ValidationRecord {
  long iteration = 0;
  double mean_train_loss = 0.0;
  double val_accuracy = 0.0;
  bool best_so_far = false;
};

struct TrainResult {
  MetaParams best;
  double best_accuracy = 0.0;
  long best_iteration = 0;
  long iterations_run = 0;
  long skipped_episodes = 0;
  std::vector<ValidationRecord> log;
};

struct TrainHooks {
  /// Replaces validate() when set; receives the current parameters and iteration.
  std::function<double(const MetaParams&, long)> validator;
  /// Called after each validation with the record just appended.
  std::function<void(const ValidationRecord&, const MetaParams& best)> on_validation;
  /// Resume from these parameters at this iteration.
  std::optional<MetaParams> initial;
  long start_iteration = 0;
};

TrainResult meta_train(const std::vector<TaskDataset>& source, const std::vector<TaskDataset>& validation,
                       const TrainConfig& cfg, const EpisodeConfig& ecfg, const TrainHooks& hooks = {});

}  // namespace metapu
