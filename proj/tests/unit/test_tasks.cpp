#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "metapu/errors.hpp"
#include "metapu/tasks.hpp"

using namespace metapu;

namespace {

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

BenchmarkSplit small_split(std::uint64_t seed) {
  BenchmarkConfig cfg;
  cfg.total_tasks = 3;
  cfg.n_source = 1;
  cfg.n_validation = 1;
  cfg.n_target = 1;
  cfg.points_per_task = 40;
  return build_synthetic_benchmark(seed, cfg);
}

void expect_same_task(const TaskDataset& a, const TaskDataset& b) {
  EXPECT_EQ(a.id, b.id);
  EXPECT_EQ(a.kind, b.kind);
  EXPECT_EQ(a.angle, b.angle);
  EXPECT_EQ(a.true_prior, b.true_prior);
  EXPECT_EQ(a.positives, b.positives);
  EXPECT_EQ(a.negatives, b.negatives);
  EXPECT_EQ(a.unlabeled, b.unlabeled);
  EXPECT_EQ(a.hidden_unlabeled_labels, b.hidden_unlabeled_labels);
}

}  // namespace

TEST(GaussianMixture, PositiveMeanAndFraction) {
  Rng rng(1);
  const auto s = gen_gaussian_mixture(10000, 0.5, rng);
  Eigen::RowVector2d mean = Eigen::RowVector2d::Zero();
  int np = 0;
  for (ad::Index i = 0; i < s.size(); ++i) {
    if (s.labels[static_cast<std::size_t>(i)] == 1) {
      mean += s.x.row(i);
      ++np;
    }
  }
  mean /= np;
  const double tol = 3.0 / std::sqrt(static_cast<double>(np));
  EXPECT_NEAR(mean(0), -1.5, tol);
  EXPECT_NEAR(mean(1), 0.0, tol);
  EXPECT_NEAR(s.positive_fraction(), 0.5, 0.02);
}

TEST(GaussianMixture, LowPriorFraction) {
  Rng rng(2);
  EXPECT_NEAR(gen_gaussian_mixture(10000, 0.2, rng).positive_fraction(), 0.2, 0.02);
}

TEST(HalfMoon, NoiselessPositivesOnUpperUnitArc) {
  Rng rng(3);
  const auto s = gen_half_moon(500, 0.5, 0.0, rng);
  for (ad::Index i = 0; i < s.size(); ++i) {
    if (s.labels[static_cast<std::size_t>(i)] != 1) continue;
    EXPECT_NEAR(s.x.row(i).norm(), 1.0, 1e-12);
    EXPECT_GE(s.x(i, 1), -1e-12);
  }
}

TEST(HalfMoon, NoiseVariancePerCoordinate) {
  Rng rng(4);
  const auto a = gen_half_moon(10000, 0.5, kHalfMoonNoiseVar, rng);
  double ss = 0.0;
  int n = 0;
  for (ad::Index i = 0; i < a.size(); ++i) {
    if (a.labels[static_cast<std::size_t>(i)] != 1) continue;
    ss += a.x.row(i).squaredNorm();
    ++n;
  }
  // E|arc + e|^2 = 1 + 2 * noise_var for an arc point at unit radius.
  EXPECT_NEAR(ss / n, 1.0 + 2.0 * kHalfMoonNoiseVar, 0.06);
}

TEST(HalfMoon, HighPriorFraction) {
  Rng rng(5);
  EXPECT_NEAR(gen_half_moon(10000, 0.8, 0.4, rng).positive_fraction(), 0.8, 0.02);
}

TEST(Generators, DeterministicUnderSeed) {
  Rng a(6), b(6);
  EXPECT_EQ(gen_half_moon(50, 0.4, 0.4, a).x, gen_half_moon(50, 0.4, 0.4, b).x);
}

TEST(Rotate, HalfTurnOfTask91) {
  Matrix p(1, 2);
  p << 1.0, 0.0;
  const Matrix r = rotate(p, 2.0 * M_PI * 90.0 / 180.0);
  EXPECT_NEAR(r(0, 0), -1.0, 1e-12);
  EXPECT_NEAR(r(0, 1), 0.0, 1e-12);
}

TEST(Rotate, ZeroIsIdentity) {
  const Matrix p = Matrix::Random(5, 2);
  EXPECT_EQ(rotate(p, 0.0), p);
}

TEST(Rotate, IsometryAndComposition) {
  const Matrix p = Matrix::Random(50, 2) * 3.0;
  const Matrix r = rotate(p, 0.7);
  for (ad::Index i = 0; i < p.rows(); ++i) EXPECT_NEAR(r.row(i).norm(), p.row(i).norm(), 1e-12);
  EXPECT_LT((rotate(rotate(p, 0.3), 1.1) - rotate(p, 1.4)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Rotate, RejectsNon2D) { EXPECT_THROW(rotate(Matrix::Zero(3, 3), 0.1), ShapeError); }

TEST(Benchmark, SizesAndDisjointIds) {
  const auto split = build_synthetic_benchmark(7);
  EXPECT_EQ(split.source.size(), 100u);
  EXPECT_EQ(split.validation.size(), 20u);
  EXPECT_EQ(split.target.size(), 20u);
  std::set<int> ids;
  for (const auto* part : {&split.source, &split.validation, &split.target}) {
    for (const auto& t : *part) ids.insert(t.id);
  }
  EXPECT_EQ(ids.size(), 140u);
  EXPECT_EQ(*ids.begin(), 1);
  EXPECT_EQ(*ids.rbegin(), 140);
}

TEST(Benchmark, TaskContents) {
  const auto split = build_synthetic_benchmark(8);
  const std::set<double> priors{0.2, 0.4, 0.6, 0.8};
  int within = 0;
  for (const auto& t : split.source) {
    EXPECT_EQ(t.positives.rows() + t.negatives.rows(), 150);
    EXPECT_EQ(t.unlabeled.rows(), 150);
    EXPECT_EQ(t.hidden_unlabeled_labels.size(), 150u);
    EXPECT_TRUE(priors.count(t.true_prior));
    EXPECT_NEAR(t.angle, 2.0 * M_PI * (t.id - 1) / 180.0, 1e-15);
    int pos = 0;
    for (int l : t.hidden_unlabeled_labels) pos += l == 1;
    within += std::abs(pos / 150.0 - t.true_prior) <= 0.1;
  }
  // Binomial(150, pi) stays within 0.1 of pi in nearly every task.
  EXPECT_GE(within, 95);
}

TEST(Benchmark, RegenerationIsIdentical) {
  const auto a = small_split(9);
  const auto b = small_split(9);
  expect_same_task(a.source[0], b.source[0]);
  expect_same_task(a.target[0], b.target[0]);
}

TEST(TargetEpisode, SupportBudget) {
  const auto split = build_synthetic_benchmark(10);
  Rng rng(1);
  const auto ep = make_target_episode(split.target[0], 3, 30, 0.4, 200, rng);
  EXPECT_EQ(ep.support.positives.rows(), 3);
  EXPECT_EQ(ep.support.unlabeled.rows(), 27);
  EXPECT_EQ(ep.test_x.rows(), 200);
  EXPECT_EQ(ep.test_labels.size(), 200u);
}

TEST(TargetEpisode, OverrideSetsTestFraction) {
  const auto split = build_synthetic_benchmark(11);
  Rng rng(2);
  const auto ep = make_target_episode(split.target[1], 1, 30, 0.8, 1000, rng);
  int pos = 0;
  for (int l : ep.test_labels) pos += l == 1;
  EXPECT_EQ(pos, 800);
  EXPECT_DOUBLE_EQ(ep.prior, 0.8);
}

TEST(TargetEpisode, WithoutOverrideUsesTaskPools) {
  const auto split = build_synthetic_benchmark(12);
  Rng rng(3);
  const auto& task = split.target[0];
  const auto ep = make_target_episode(task, 5, 30, std::nullopt, 100, rng);
  EXPECT_EQ(ep.support.unlabeled.rows(), 25);
  EXPECT_EQ(ep.test_x.rows(), 100);
  EXPECT_DOUBLE_EQ(ep.prior, task.true_prior);
}

TEST(TargetEpisode, OverrideOnExternalTaskUnsupported) {
  auto task = build_synthetic_benchmark(13).target[0];
  task.kind = GeneratorKind::external;
  Rng rng(4);
  EXPECT_THROW(make_target_episode(task, 3, 30, 0.4, 50, rng), UnsupportedOperationError);
}

TEST(TargetEpisode, RejectsBadSupportSize) {
  const auto task = build_synthetic_benchmark(14).target[0];
  Rng rng(5);
  EXPECT_THROW(make_target_episode(task, 0, 30, 0.4, 50, rng), ConfigError);
  EXPECT_THROW(make_target_episode(task, 30, 30, 0.4, 50, rng), ConfigError);
}

TEST(TaskIo, RoundTripIsBitwise) {
  const auto split = small_split(15);
  const auto path = temp_file("metapu_tasks_roundtrip.jsonl");
  save_tasks(split, path);
  const auto loaded = load_tasks(path);
  EXPECT_EQ(loaded.seed, split.seed);
  ASSERT_EQ(loaded.source.size(), 1u);
  expect_same_task(split.source[0], loaded.source[0]);
  expect_same_task(split.validation[0], loaded.validation[0]);
  expect_same_task(split.target[0], loaded.target[0]);
  std::filesystem::remove(path);
}

TEST(TaskIo, TruncatedFileIsParseError) {
  const auto path = temp_file("metapu_tasks_truncated.jsonl");
  save_tasks(small_split(16), path);
  std::string text;
  {
    std::ifstream in(path);
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  {
    std::ofstream out(path, std::ios::trunc);
    out << text.substr(0, text.size() / 2);
  }
  EXPECT_THROW(load_tasks(path), ParseError);
  {
    std::ofstream out(path, std::ios::trunc);
    const auto first_task_end = text.find('\n', text.find('\n') + 1);
    out << text.substr(0, first_task_end + 1);
  }
  EXPECT_THROW(load_tasks(path), ParseError);
  std::filesystem::remove(path);
}

TEST(TaskIo, VersionMismatchNamesBothVersions) {
  const auto path = temp_file("metapu_tasks_version.jsonl");
  save_tasks(small_split(17), path);
  std::string text;
  {
    std::ifstream in(path);
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  const auto pos = text.find("\"format_version\":1");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 18, "\"format_version\":7");
  {
    std::ofstream out(path, std::ios::trunc);
    out << text;
  }
  try {
    load_tasks(path);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find('7'), std::string::npos) << msg;
    EXPECT_NE(msg.find('1'), std::string::npos) << msg;
  }
  std::filesystem::remove(path);
}

TEST(TaskIo, MalformedJsonReportsLine) {
  const auto path = temp_file("metapu_tasks_malformed.jsonl");
  save_tasks(small_split(18), path);
  {
    std::ofstream out(path, std::ios::app);
    out << "{not json\n";
  }
  try {
    load_tasks(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 5u);
  }
  std::filesystem::remove(path);
}
