#include "metapu/metatrain.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "metapu/errors.hpp"
#include "metapu/parallel.hpp"

namespace metapu {

namespace {

// Stream identifiers for task_rng; keep training and validation draws independent.
constexpr std::uint64_t kTrainStream = 0x7261696eULL;
constexpr std::uint64_t kValidationStream = 0x76616c00ULL;

Matrix take_rows(const Matrix& x, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t count) {
  Matrix out(static_cast<ad::Index>(count), x.cols());
  for (std::size_t i = 0; i < count; ++i) {
    out.row(static_cast<ad::Index>(i)) = x.row(static_cast<ad::Index>(idx[begin + i]));
  }
  return out;
}

std::vector<std::size_t> permutation(ad::Index n, Rng& rng) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

int max_support_pos(const EpisodeConfig& cfg) {
  if (cfg.support_pos_choices.empty()) return cfg.n_support_pos;
  return *std::max_element(cfg.support_pos_choices.begin(), cfg.support_pos_choices.end());
}

bool can_sample(const TaskDataset& task, const EpisodeConfig& cfg) {
  const int np = max_support_pos(cfg);
  const int nu = cfg.support_budget() - (cfg.support_pos_choices.empty()
                                             ? cfg.n_support_pos
                                             : *std::min_element(cfg.support_pos_choices.begin(),
                                                                 cfg.support_pos_choices.end()));
  const int qpos = query_positive_count(cfg.n_query, task.labeled_positive_ratio());
  return task.positives.rows() >= np + qpos && task.unlabeled.rows() >= nu &&
         task.negatives.rows() >= cfg.n_query - qpos;
}

}  // namespace

void EpisodeConfig::validate() const {
  if (n_support_pos < 1 || n_support_unl < 1 || n_query < 2) {
    throw ConfigError("episode config: support sizes must be >= 1 and the query size >= 2");
  }
  for (int c : support_pos_choices) {
    if (c < 1 || c >= support_budget()) {
      throw ConfigError(fmt::format("episode config: positive support size {} leaves no unlabeled budget", c));
    }
  }
}

int query_positive_count(int n_query, double labeled_positive_ratio) {
  const auto nearest = static_cast<int>(std::lround(static_cast<double>(n_query) * labeled_positive_ratio));
  return std::clamp(nearest, 1, n_query - 1);
}

Episode sample_episode(const TaskDataset& task, const EpisodeConfig& cfg, Rng& rng) {
  cfg.validate();
  int np = cfg.n_support_pos;
  if (!cfg.support_pos_choices.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, cfg.support_pos_choices.size() - 1);
    np = cfg.support_pos_choices[pick(rng)];
  }
  const int nu = cfg.support_budget() - np;
  if (task.positives.rows() + task.negatives.rows() == 0) {
    throw EpisodeSamplingError(fmt::format("task {}: no labeled data", task.id));
  }
  const int qpos = query_positive_count(cfg.n_query, task.labeled_positive_ratio());
  const int qneg = cfg.n_query - qpos;
  if (task.positives.rows() < np + qpos) {
    throw EpisodeSamplingError(fmt::format("task {}: positive pool has {} instances, {} support + {} query needed",
                                           task.id, task.positives.rows(), np, qpos));
  }
  if (task.unlabeled.rows() < nu) {
    throw EpisodeSamplingError(fmt::format("task {}: unlabeled pool has {} instances, {} needed", task.id,
                                           task.unlabeled.rows(), nu));
  }
  if (task.negatives.rows() < qneg) {
    throw EpisodeSamplingError(fmt::format("task {}: negative pool has {} instances, {} needed for the query",
                                           task.id, task.negatives.rows(), qneg));
  }
  const auto pos = permutation(task.positives.rows(), rng);
  const auto unl = permutation(task.unlabeled.rows(), rng);
  const auto neg = permutation(task.negatives.rows(), rng);
  Episode ep;
  ep.support.positives = take_rows(task.positives, pos, 0, static_cast<std::size_t>(np));
  ep.support.unlabeled = take_rows(task.unlabeled, unl, 0, static_cast<std::size_t>(nu));
  // Query positives come from the positives not used in the support set.
  ep.query.positives = take_rows(task.positives, pos, static_cast<std::size_t>(np), static_cast<std::size_t>(qpos));
  ep.query.negatives = take_rows(task.negatives, neg, 0, static_cast<std::size_t>(qneg));
  return ep;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be positive");
  if (!(tau > 0.0)) throw ConfigError("train config: tau must be positive");
  if (max_iterations < 1) throw ConfigError("train config: max_iterations must be at least 1");
  if (validation_every < 1) throw ConfigError("train config: validation_every must be at least 1");
  if (validation_episodes < 1) throw ConfigError("train config: validation_episodes must be at least 1");
  if (patience < 1) throw ConfigError("train config: patience must be at least 1");
  if (!(lambda_init > 0.0)) throw ConfigError("train config: lambda_init must be positive");
}

StepResult train_step(MetaParams& theta, nn::Adam& opt, const Episode& episode, double tau) {
  Tape tape;
  const BoundParams bound = bind(tape, theta, true);
  TapedAdaptation adapted;
  try {
    adapted = adapt(tape, bound, episode.support);
  } catch (const DegenerateRatioError&) {
    return {std::numeric_limits<double>::quiet_NaN(), true};
  }
  const DiffArray loss = smoothed_risk(tape, bound, adapted, episode.query, tau);
  tape.backward(loss);
  opt.step(theta.mutable_arrays(), gradients(bound));
  return {loss.scalar(), false};
}

double validate(const MetaParams& theta, const std::vector<TaskDataset>& tasks, const EpisodeConfig& ecfg,
                std::uint64_t seed, int episodes_per_task, int threads) {
  if (episodes_per_task < 1) throw ConfigError("validate: episodes_per_task must be at least 1");
  if (tasks.empty()) throw ConfigError("validate: no validation tasks");
  std::vector<double> per_task(tasks.size(), 0.0);
  parallel_for(tasks.size(), threads, [&](std::size_t i) {
    Rng rng = task_rng(seed ^ kValidationStream, static_cast<std::uint64_t>(i) + 1);
    double total = 0.0;
    for (int e = 0; e < episodes_per_task; ++e) {
      const Episode ep = sample_episode(tasks[i], ecfg, rng);
      double risk = 0.0;
      try {
        risk = zero_one_risk(ep.query, adapt(ep.support, theta));
      } catch (const DegenerateRatioError&) {
        // An all-zero ratio labels everything negative.
        risk = ep.query.pi_q();
      }
      total += 1.0 - risk;
    }
    per_task[i] = total / episodes_per_task;
  });
  return std::accumulate(per_task.begin(), per_task.end(), 0.0) / static_cast<double>(per_task.size());
}

TrainResult meta_train(const std::vector<TaskDataset>& source, const std::vector<TaskDataset>& validation,
                       const TrainConfig& cfg, const EpisodeConfig& ecfg, const TrainHooks& hooks) {
  cfg.validate();
  ecfg.validate();
  if (source.empty()) throw ConfigError("meta_train: no source tasks");
  if (validation.empty() && !hooks.validator) throw ConfigError("meta_train: no validation tasks");

  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (can_sample(source[i], ecfg)) usable.push_back(i);
  }
  if (usable.empty()) {
    throw ConfigError("meta_train: no source task has enough data for the episode configuration");
  }
  std::vector<TaskDataset> val_usable;
  for (const auto& t : validation) {
    if (can_sample(t, ecfg)) val_usable.push_back(t);
  }
  if (val_usable.empty() && !hooks.validator) {
    throw ConfigError("meta_train: no validation task has enough data for the episode configuration");
  }

  MetaParams theta = hooks.initial ? *hooks.initial : MetaParams::init(cfg.dims, cfg.lambda_init, cfg.seed);
  nn::Adam opt(cfg.learning_rate);
  Rng rng = task_rng(cfg.seed, kTrainStream);
  std::uniform_int_distribution<std::size_t> pick_task(0, usable.size() - 1);

  auto run_validation = [&](long iteration) {
    if (hooks.validator) return hooks.validator(theta, iteration);
    return validate(theta, val_usable, ecfg, cfg.seed, cfg.validation_episodes, cfg.threads);
  };

  TrainResult result;
  result.best = theta;
  result.best_accuracy = -std::numeric_limits<double>::infinity();
  result.best_iteration = hooks.start_iteration;
  double loss_sum = 0.0;
  long loss_count = 0;
  long steps = 0;
  int stale = 0;

  for (long it = hooks.start_iteration + 1; it <= cfg.max_iterations; ++it) {
    const TaskDataset& task = source[usable[pick_task(rng)]];
    const Episode ep = sample_episode(task, ecfg, rng);
    const StepResult step = train_step(theta, opt, ep, cfg.tau);
    ++steps;
    if (step.skipped) {
      ++result.skipped_episodes;
      if (steps >= 100 && static_cast<double>(result.skipped_episodes) > cfg.max_skip_rate * static_cast<double>(steps)) {
        throw Error(fmt::format("meta_train: {} of {} episodes had an all-zero density ratio; "
                                "check the initialization and lambda_init",
                                result.skipped_episodes, steps));
      }
    } else {
      loss_sum += step.loss;
      ++loss_count;
    }
    result.iterations_run = it;

    if (it % cfg.validation_every != 0 && it != cfg.max_iterations) continue;
    ValidationRecord rec;
    rec.iteration = it;
    rec.mean_train_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
    rec.val_accuracy = run_validation(it);
    loss_sum = 0.0;
    loss_count = 0;
    if (rec.val_accuracy > result.best_accuracy) {
      rec.best_so_far = true;
      result.best_accuracy = rec.val_accuracy;
      result.best_iteration = it;
      result.best = theta;
      stale = 0;
    } else {
      ++stale;
    }
    result.log.push_back(rec);
    if (hooks.on_validation) hooks.on_validation(rec, result.best);
    if (stale >= cfg.patience) break;
  }
  return result;
}

}  // namespace metapu
