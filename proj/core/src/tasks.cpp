#include "metapu/tasks.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "metapu/errors.hpp"

namespace metapu {

namespace {

void check_prior(double prior, const char* where) {
  if (!(prior > 0.0 && prior < 1.0)) throw ConfigError(fmt::format("{}: prior {} is outside (0, 1)", where, prior));
}

Eigen::RowVector2d gaussian_point(bool positive, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double mx = positive ? -1.5 : 1.5;
  const double x = mx + normal(rng);
  const double y = normal(rng);
  return {x, y};
}

Eigen::RowVector2d moon_point(bool positive, double noise_sd, Rng& rng) {
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double t = angle(rng);
  double x = positive ? std::cos(t) : 1.0 - std::cos(t);
  double y = positive ? std::sin(t) : 0.5 - std::sin(t);
  if (noise_sd > 0.0) {
    x += noise_sd * normal(rng);
    y += noise_sd * normal(rng);
  }
  return {x, y};
}

Eigen::RowVector2d draw_point(GeneratorKind kind, bool positive, Rng& rng) {
  switch (kind) {
    case GeneratorKind::gaussian_mixture: return gaussian_point(positive, rng);
    case GeneratorKind::half_moon: return moon_point(positive, std::sqrt(kHalfMoonNoiseVar), rng);
    case GeneratorKind::external: break;
  }
  throw UnsupportedOperationError("cannot generate points for an external task");
}

Matrix take_rows(const Matrix& x, std::span<const std::size_t> rows) {
  Matrix out(static_cast<ad::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<ad::Index>(i)) = x.row(static_cast<ad::Index>(rows[i]));
  return out;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

const char* to_string(GeneratorKind kind) {
  switch (kind) {
    case GeneratorKind::gaussian_mixture: return "gaussian_mixture";
    case GeneratorKind::half_moon: return "half_moon";
    case GeneratorKind::external: return "external";
  }
  return "external";
}

GeneratorKind generator_kind_from_string(const std::string& name) {
  if (name == "gaussian_mixture") return GeneratorKind::gaussian_mixture;
  if (name == "half_moon") return GeneratorKind::half_moon;
  if (name == "external") return GeneratorKind::external;
  throw SchemaError(fmt::format("unknown task kind '{}'", name));
}

double LabeledSample::positive_fraction() const {
  if (labels.empty()) return 0.0;
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  return static_cast<double>(pos) / static_cast<double>(labels.size());
}

double TaskDataset::labeled_positive_ratio() const {
  const auto np = static_cast<double>(positives.rows());
  const auto nn = static_cast<double>(negatives.rows());
  return np / (np + nn);
}

LabeledSample gen_gaussian_mixture(int n, double prior, Rng& rng) {
  if (n < 2) throw ConfigError("gen_gaussian_mixture: n must be at least 2");
  check_prior(prior, "gen_gaussian_mixture");
  std::bernoulli_distribution coin(prior);
  LabeledSample s;
  s.x.resize(n, 2);
  s.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const bool positive = coin(rng);
    s.labels[static_cast<std::size_t>(i)] = positive ? 1 : -1;
    s.x.row(i) = gaussian_point(positive, rng);
  }
  return s;
}

LabeledSample gen_half_moon(int n, double prior, double noise_var, Rng& rng) {
  if (n < 2) throw ConfigError("gen_half_moon: n must be at least 2");
  check_prior(prior, "gen_half_moon");
  if (!(noise_var >= 0.0)) throw ConfigError("gen_half_moon: noise variance must be nonnegative");
  const double sd = std::sqrt(noise_var);
  std::bernoulli_distribution coin(prior);
  LabeledSample s;
  s.x.resize(n, 2);
  s.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const bool positive = coin(rng);
    s.labels[static_cast<std::size_t>(i)] = positive ? 1 : -1;
    s.x.row(i) = moon_point(positive, sd, rng);
  }
  return s;
}

Matrix rotate(const Matrix& points, double theta) {
  if (points.cols() != 2) throw ShapeError(fmt::format("rotate: expected 2 columns, got {}", points.cols()));
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  Matrix out(points.rows(), 2);
  out.col(0) = c * points.col(0) - s * points.col(1);
  out.col(1) = s * points.col(0) + c * points.col(1);
  return out;
}

LabeledSample gen_task_sample(GeneratorKind kind, int n, double prior, double angle, Rng& rng) {
  LabeledSample s;
  switch (kind) {
    case GeneratorKind::gaussian_mixture: s = gen_gaussian_mixture(n, prior, rng); break;
    case GeneratorKind::half_moon: s = gen_half_moon(n, prior, kHalfMoonNoiseVar, rng); break;
    case GeneratorKind::external:
      throw UnsupportedOperationError("cannot generate points for an external task");
  }
  s.x = rotate(s.x, angle);
  return s;
}

LabeledSample gen_stratified(GeneratorKind kind, int n_pos, int n_neg, double angle, Rng& rng) {
  if (n_pos < 0 || n_neg < 0) throw ConfigError("gen_stratified: counts must be nonnegative");
  LabeledSample s;
  s.x.resize(n_pos + n_neg, 2);
  for (int i = 0; i < n_pos + n_neg; ++i) {
    const bool positive = i < n_pos;
    s.labels.push_back(positive ? 1 : -1);
    s.x.row(i) = draw_point(kind, positive, rng);
  }
  s.x = rotate(s.x, angle);
  return s;
}

Rng task_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x5eedu};
  return Rng(seq);
}

BenchmarkSplit build_synthetic_benchmark(std::uint64_t seed, const BenchmarkConfig& config) {
  if (config.n_source < 1 || config.n_validation < 0 || config.n_target < 0) {
    throw ConfigError("build_synthetic_benchmark: split sizes must be nonnegative and n_source >= 1");
  }
  if (config.n_source + config.n_validation + config.n_target > config.total_tasks) {
    throw ConfigError(fmt::format("build_synthetic_benchmark: {} + {} + {} tasks requested from a pool of {}",
                                  config.n_source, config.n_validation, config.n_target, config.total_tasks));
  }
  if (config.points_per_task < 4) throw ConfigError("build_synthetic_benchmark: points_per_task must be >= 4");
  if (config.priors.empty()) throw ConfigError("build_synthetic_benchmark: prior list is empty");

  std::vector<TaskDataset> pool;
  pool.reserve(static_cast<std::size_t>(config.total_tasks));
  for (int t = 1; t <= config.total_tasks; ++t) {
    Rng rng = task_rng(seed, static_cast<std::uint64_t>(t));
    TaskDataset task;
    task.id = t;
    task.kind = std::bernoulli_distribution(0.5)(rng) ? GeneratorKind::half_moon : GeneratorKind::gaussian_mixture;
    task.angle = 2.0 * std::numbers::pi * static_cast<double>(t - 1) / 180.0;
    std::uniform_int_distribution<std::size_t> pick(0, config.priors.size() - 1);
    task.true_prior = config.priors[pick(rng)];
    const LabeledSample s = gen_task_sample(task.kind, config.points_per_task, task.true_prior, task.angle, rng);
    const int n_labeled = config.points_per_task / 2;
    std::vector<std::size_t> pos, neg, unl;
    for (int i = 0; i < s.size(); ++i) {
      const auto idx = static_cast<std::size_t>(i);
      if (i < n_labeled) {
        (s.labels[idx] > 0 ? pos : neg).push_back(idx);
      } else {
        unl.push_back(idx);
        task.hidden_unlabeled_labels.push_back(s.labels[idx]);
      }
    }
    task.positives = take_rows(s.x, pos);
    task.negatives = take_rows(s.x, neg);
    task.unlabeled = take_rows(s.x, unl);
    pool.push_back(std::move(task));
  }

  Rng split_rng = task_rng(seed, 0);
  const auto order = shuffled_indices(pool.size(), split_rng);
  BenchmarkSplit split;
  split.seed = seed;
  std::size_t cursor = 0;
  auto take = [&](int count, std::vector<TaskDataset>& dst) {
    for (int i = 0; i < count; ++i) dst.push_back(pool[order[cursor++]]);
  };
  take(config.n_source, split.source);
  take(config.n_validation, split.validation);
  take(config.n_target, split.target);
  return split;
}

TargetEpisode make_target_episode(const TaskDataset& task, int n_support_pos, int total_support,
                                  std::optional<double> prior_override, int n_test, Rng& rng) {
  if (n_support_pos < 1 || n_support_pos > total_support - 1) {
    throw ConfigError(fmt::format("make_target_episode: n_support_pos {} must lie in [1, {}]", n_support_pos,
                                  total_support - 1));
  }
  if (n_test < 1) throw ConfigError("make_target_episode: n_test must be positive");
  if (task.positives.rows() < n_support_pos) {
    throw EpisodeSamplingError(fmt::format("task {}: {} labeled positives, {} needed for the support set", task.id,
                                           task.positives.rows(), n_support_pos));
  }
  const int n_unl = total_support - n_support_pos;
  TargetEpisode ep;
  const auto pos_idx = shuffled_indices(static_cast<std::size_t>(task.positives.rows()), rng);
  ep.support.positives = take_rows(task.positives, std::span(pos_idx).first(static_cast<std::size_t>(n_support_pos)));

  if (prior_override) {
    if (task.kind == GeneratorKind::external) {
      throw UnsupportedOperationError(
          fmt::format("task {}: prior override requires a generated task, this one was ingested", task.id));
    }
    check_prior(*prior_override, "make_target_episode");
    ep.prior = *prior_override;
    ep.support.unlabeled = gen_task_sample(task.kind, std::max(n_unl, 2), ep.prior, task.angle, rng).x.topRows(n_unl);
    const int test_pos = static_cast<int>(std::lround(static_cast<double>(n_test) * ep.prior));
    LabeledSample test = gen_stratified(task.kind, test_pos, n_test - test_pos, task.angle, rng);
    ep.test_x = std::move(test.x);
    ep.test_labels = std::move(test.labels);
    return ep;
  }

  if (task.hidden_unlabeled_labels.size() != static_cast<std::size_t>(task.unlabeled.rows())) {
    throw UnsupportedOperationError(
        fmt::format("task {}: scoring without a prior override needs hidden labels for the unlabeled pool", task.id));
  }
  if (task.unlabeled.rows() < n_unl + 1) {
    throw EpisodeSamplingError(fmt::format("task {}: unlabeled pool of {} is too small for {} support + test",
                                           task.id, task.unlabeled.rows(), n_unl));
  }
  ep.prior = task.true_prior;
  const auto unl_idx = shuffled_indices(static_cast<std::size_t>(task.unlabeled.rows()), rng);
  const std::span all(unl_idx);
  ep.support.unlabeled = take_rows(task.unlabeled, all.first(static_cast<std::size_t>(n_unl)));
  const auto rest = all.subspan(static_cast<std::size_t>(n_unl));
  const auto test_rows = rest.first(std::min(rest.size(), static_cast<std::size_t>(n_test)));
  ep.test_x = take_rows(task.unlabeled, test_rows);
  for (std::size_t r : test_rows) ep.test_labels.push_back(task.hidden_unlabeled_labels[r]);
  return ep;
}

}  // namespace metapu
