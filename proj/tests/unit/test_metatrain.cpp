#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "metapu/errors.hpp"
#include "metapu/metatrain.hpp"

using namespace metapu;

namespace {

ModelDims tiny_dims() {
  ModelDims d;
  d.repr_dim = 4;
  d.embed_dim = 8;
  d.hidden = 10;
  return d;
}

TaskDataset pool_task(int n_pos, int n_neg, int n_unl, std::uint64_t seed, double separation = 1.5) {
  Rng rng(seed);
  std::normal_distribution<double> g;
  auto block = [&](int n, double shift) {
    Matrix m(n, 2);
    for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    m.col(0).array() += shift;
    return m;
  };
  TaskDataset t;
  t.id = static_cast<int>(seed);
  t.positives = block(n_pos, -separation);
  t.negatives = block(n_neg, separation);
  t.unlabeled = Matrix(n_unl, 2);
  t.unlabeled.topRows(n_unl / 2) = block(n_unl / 2, -separation);
  t.unlabeled.bottomRows(n_unl - n_unl / 2) = block(n_unl - n_unl / 2, separation);
  t.true_prior = 0.5;
  return t;
}

std::set<std::pair<double, double>> rows_of(const Matrix& m) {
  std::set<std::pair<double, double>> out;
  for (ad::Index i = 0; i < m.rows(); ++i) out.insert({m(i, 0), m(i, 1)});
  return out;
}

}  // namespace

TEST(QueryCount, RoundsAndClamps) {
  EXPECT_EQ(query_positive_count(25, 30.0 / 75.0), 10);
  EXPECT_EQ(query_positive_count(50, 0.001), 1);
  EXPECT_EQ(query_positive_count(50, 0.999), 49);
}

TEST(SampleEpisode, QueryCountsFollowLabeledRatio) {
  const TaskDataset task = pool_task(30, 45, 40, 1);
  EpisodeConfig cfg;
  cfg.n_support_pos = 5;
  cfg.n_support_unl = 25;
  cfg.n_query = 25;
  Rng rng(1);
  const Episode ep = sample_episode(task, cfg, rng);
  EXPECT_EQ(ep.query.positives.rows(), 10);
  EXPECT_EQ(ep.query.negatives.rows(), 15);
}

TEST(SampleEpisode, SinglePositiveSupport) {
  const TaskDataset task = pool_task(60, 60, 60, 2);
  EpisodeConfig cfg;
  cfg.n_support_pos = 1;
  cfg.n_support_unl = 29;
  Rng rng(2);
  EXPECT_EQ(sample_episode(task, cfg, rng).support.positives.rows(), 1);
}

TEST(SampleEpisode, SupportPositivesNeverInQuery) {
  const TaskDataset task = pool_task(75, 75, 150, 3);
  EpisodeConfig cfg;
  cfg.support_pos_choices = {1, 3, 5};
  Rng rng(3);
  for (int e = 0; e < 1000; ++e) {
    const Episode ep = sample_episode(task, cfg, rng);
    const auto sp = rows_of(ep.support.positives);
    for (const auto& q : rows_of(ep.query.positives)) ASSERT_FALSE(sp.count(q));
    ASSERT_EQ(ep.support.positives.rows() + ep.support.unlabeled.rows(), 30);
  }
}

TEST(SampleEpisode, QueryRatioPreserved) {
  EpisodeConfig cfg;
  for (int n_pos : {20, 45, 70, 100}) {
    const TaskDataset task = pool_task(n_pos, 150 - n_pos, 150, 4);
    Rng rng(4);
    const Episode ep = sample_episode(task, cfg, rng);
    const double ratio = static_cast<double>(n_pos) / 150.0;
    EXPECT_LT(std::abs(ep.query.positives.rows() - cfg.n_query * ratio), 1.0);
  }
}

TEST(SampleEpisode, DeficientPoolIsNamed) {
  EpisodeConfig cfg;
  Rng rng(5);
  try {
    sample_episode(pool_task(3, 100, 100, 5), cfg, rng);
    FAIL() << "expected EpisodeSamplingError";
  } catch (const EpisodeSamplingError& e) {
    EXPECT_NE(std::string(e.what()).find("positive"), std::string::npos);
  }
  try {
    sample_episode(pool_task(100, 100, 10, 6), cfg, rng);
    FAIL() << "expected EpisodeSamplingError";
  } catch (const EpisodeSamplingError& e) {
    EXPECT_NE(std::string(e.what()).find("unlabeled"), std::string::npos);
  }
  try {
    sample_episode(pool_task(60, 0, 100, 7), cfg, rng);
    FAIL() << "expected EpisodeSamplingError";
  } catch (const EpisodeSamplingError& e) {
    EXPECT_NE(std::string(e.what()).find("negative"), std::string::npos);
  }
}

TEST(SampleEpisode, DeterministicUnderSeed) {
  const TaskDataset task = pool_task(75, 75, 150, 8);
  EpisodeConfig cfg;
  cfg.support_pos_choices = {1, 3, 5};
  Rng a(9), b(9);
  for (int i = 0; i < 10; ++i) {
    const Episode x = sample_episode(task, cfg, a);
    const Episode y = sample_episode(task, cfg, b);
    EXPECT_EQ(x.support.positives, y.support.positives);
    EXPECT_EQ(x.support.unlabeled, y.support.unlabeled);
    EXPECT_EQ(x.query.positives, y.query.positives);
    EXPECT_EQ(x.query.negatives, y.query.negatives);
  }
}

TEST(TrainStep, LossInUnitIntervalAndParametersMove) {
  const TaskDataset task = pool_task(75, 75, 150, 10);
  MetaParams theta = MetaParams::init(tiny_dims(), 0.1, 1);
  const MetaParams before = theta;
  nn::Adam opt(1e-3);
  Rng rng(10);
  const StepResult r = train_step(theta, opt, sample_episode(task, EpisodeConfig{}, rng), 10.0);
  ASSERT_FALSE(r.skipped);
  EXPECT_GE(r.loss, 0.0);
  EXPECT_LE(r.loss, 1.0);
  EXPECT_EQ(opt.step_count(), 1);
  EXPECT_NE(theta.log_lambda(0, 0), before.log_lambda(0, 0));
  // Adam's first step moves every coordinate with a nonzero gradient by about lr.
  EXPECT_NEAR(std::abs(theta.log_lambda(0, 0) - before.log_lambda(0, 0)), 1e-3, 1e-6);
}

TEST(TrainStep, IdenticalSeedsGiveIdenticalLossTraces) {
  const TaskDataset task = pool_task(75, 75, 150, 11);
  auto trace = [&] {
    MetaParams theta = MetaParams::init(tiny_dims(), 0.1, 2);
    nn::Adam opt(1e-3);
    Rng rng(11);
    std::vector<double> out;
    for (int i = 0; i < 20; ++i) out.push_back(train_step(theta, opt, sample_episode(task, EpisodeConfig{}, rng), 10.0).loss);
    return out;
  };
  EXPECT_EQ(trace(), trace());
}

TEST(MetaTrain, RejectsZeroIterations) {
  TrainConfig cfg;
  cfg.max_iterations = 0;
  EXPECT_THROW(meta_train({pool_task(75, 75, 150, 1)}, {pool_task(75, 75, 150, 2)}, cfg, EpisodeConfig{}), ConfigError);
}

TEST(MetaTrain, UnsampleableTasksRejected) {
  TrainConfig cfg;
  cfg.dims = tiny_dims();
  cfg.max_iterations = 10;
  EXPECT_THROW(meta_train({pool_task(2, 2, 2, 1)}, {pool_task(75, 75, 150, 2)}, cfg, EpisodeConfig{}), ConfigError);
}

TEST(MetaTrain, PatienceOneStopsAfterTwoValidations) {
  TrainConfig cfg;
  cfg.dims = tiny_dims();
  cfg.max_iterations = 100;
  cfg.validation_every = 5;
  cfg.patience = 1;
  TrainHooks hooks;
  hooks.validator = [](const MetaParams&, long) { return 0.5; };
  const auto r = meta_train({pool_task(75, 75, 150, 1)}, {}, cfg, EpisodeConfig{}, hooks);
  EXPECT_EQ(r.log.size(), 2u);
  EXPECT_EQ(r.iterations_run, 10);
  EXPECT_EQ(r.best_iteration, 5);
}

TEST(MetaTrain, BestCheckpointNeverWorseThanEarlierValidation) {
  TrainConfig cfg;
  cfg.dims = tiny_dims();
  cfg.max_iterations = 60;
  cfg.validation_every = 10;
  cfg.patience = 10;
  const std::vector<double> scores{0.6, 0.7, 0.65, 0.8, 0.75, 0.72};
  std::size_t call = 0;
  TrainHooks hooks;
  hooks.validator = [&](const MetaParams&, long) { return scores[call++]; };
  const auto r = meta_train({pool_task(75, 75, 150, 1)}, {}, cfg, EpisodeConfig{}, hooks);
  EXPECT_DOUBLE_EQ(r.best_accuracy, 0.8);
  EXPECT_EQ(r.best_iteration, 40);
  for (const auto& rec : r.log) EXPECT_LE(rec.val_accuracy, r.best_accuracy);
}

TEST(MetaTrain, ReproducibleBitwise) {
  TrainConfig cfg;
  cfg.dims = tiny_dims();
  cfg.max_iterations = 30;
  cfg.validation_every = 10;
  cfg.seed = 5;
  const std::vector<TaskDataset> src{pool_task(75, 75, 150, 1), pool_task(60, 90, 150, 2)};
  const std::vector<TaskDataset> val{pool_task(75, 75, 150, 3)};
  const auto a = meta_train(src, val, cfg, EpisodeConfig{});
  const auto b = meta_train(src, val, cfg, EpisodeConfig{});
  const auto pa = a.best.arrays();
  const auto pb = b.best.arrays();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i], pb[i]);
  EXPECT_EQ(a.best_accuracy, b.best_accuracy);
}

TEST(Validate, DeterministicAndThreadIndependent) {
  const MetaParams theta = MetaParams::init(tiny_dims(), 0.1, 4);
  const std::vector<TaskDataset> tasks{pool_task(75, 75, 150, 1), pool_task(75, 75, 150, 2), pool_task(75, 75, 150, 3)};
  const double a = validate(theta, tasks, EpisodeConfig{}, 7, 4, 1);
  EXPECT_EQ(a, validate(theta, tasks, EpisodeConfig{}, 7, 4, 1));
  EXPECT_EQ(a, validate(theta, tasks, EpisodeConfig{}, 7, 4, 3));
}

TEST(Validate, SeparableTaskNearPerfectAfterTraining) {
  TrainConfig cfg;
  cfg.dims = tiny_dims();
  cfg.max_iterations = 300;
  cfg.validation_every = 100;
  cfg.seed = 1;
  const std::vector<TaskDataset> src{pool_task(75, 75, 150, 1, 6.0), pool_task(75, 75, 150, 2, 6.0)};
  const std::vector<TaskDataset> val{pool_task(75, 75, 150, 3, 6.0)};
  const auto r = meta_train(src, val, cfg, EpisodeConfig{});
  EXPECT_GT(validate(r.best, val, EpisodeConfig{}, 99, 10), 0.95);
}

TEST(Validate, RejectsZeroEpisodes) {
  const MetaParams theta = MetaParams::init(tiny_dims(), 0.1, 4);
  EXPECT_THROW(validate(theta, {pool_task(75, 75, 150, 1)}, EpisodeConfig{}, 1, 0), ConfigError);
}
