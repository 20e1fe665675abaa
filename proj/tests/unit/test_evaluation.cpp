#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "metapu/errors.hpp"
#include "metapu/evaluation.hpp"

namespace {

using namespace metapu;

BenchmarkSplit small_benchmark(std::uint64_t seed) {
  BenchmarkConfig cfg;
  cfg.total_tasks = 8;
  cfg.n_source = 4;
  cfg.n_validation = 2;
  cfg.n_target = 2;
  cfg.points_per_task = 120;
  return build_synthetic_benchmark(seed, cfg);
}

EvalGrid small_grid() {
  EvalGrid g;
  g.n_test = 40;
  g.repeats = 2;
  return g;
}

ResultRow row(int split, int task, int support, double prior, double acc) {
  ResultRow r;
  r.split_id = split;
  r.task_id = task;
  r.method = "ours";
  r.ablation = "full";
  r.n_support_pos = support;
  r.target_prior = prior;
  r.accuracy = acc;
  return r;
}

TEST(GridEpisode, SameArgumentsSameEpisode) {
  const auto b = small_benchmark(1);
  const EvalGrid g = small_grid();
  const TargetEpisode a = grid_episode(b.target[0], g, 1, 2, 0, 9);
  const TargetEpisode c = grid_episode(b.target[0], g, 1, 2, 0, 9);
  EXPECT_EQ(a.support.positives, c.support.positives);
  EXPECT_EQ(a.support.unlabeled, c.support.unlabeled);
  EXPECT_EQ(a.test_labels, c.test_labels);
  EXPECT_EQ(a.support.positives.rows(), 3);
  EXPECT_EQ(a.support.unlabeled.rows(), 27);
  EXPECT_EQ(a.test_x.rows(), 40);
  EXPECT_DOUBLE_EQ(a.prior, 0.6);
  const TargetEpisode d = grid_episode(b.target[0], g, 1, 2, 1, 9);
  EXPECT_NE(a.test_x, d.test_x);
}

TEST(Accuracy, CountsMatches) {
  EXPECT_DOUBLE_EQ(accuracy({1, -1, 1, 1}, {1, 1, 1, -1}), 0.5);
  EXPECT_THROW(accuracy({1}, {1, 1}), ShapeError);
  EXPECT_THROW(accuracy({}, {}), EmptyReductionError);
}

TEST(EvaluateModel, RowCountAndFields) {
  const auto b = small_benchmark(2);
  const EvalGrid g = small_grid();
  ModelDims dims;
  dims.repr_dim = 4;
  dims.embed_dim = 8;
  dims.hidden = 10;
  const MetaParams theta = MetaParams::init(dims, 0.1, 3);
  const auto rows = evaluate_model(theta, b.target, g, Ablation::full, 1, 5);
  ASSERT_EQ(rows.size(), b.target.size() * 3 * 4 * 2);
  std::set<std::tuple<int, int, double>> cells;
  for (const auto& r : rows) {
    EXPECT_EQ(r.method, "ours");
    EXPECT_EQ(r.ablation, "full");
    EXPECT_EQ(r.split_id, 1);
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
    ASSERT_TRUE(r.prior_error.has_value());
    EXPECT_GE(*r.prior_error, 0.0);
    cells.insert({r.task_id, r.n_support_pos, r.target_prior});
  }
  EXPECT_EQ(cells.size(), b.target.size() * 12);

  const auto given = evaluate_model(theta, b.target, g, Ablation::true_prior, 1, 5);
  for (const auto& r : given) EXPECT_FALSE(r.prior_error.has_value());
  EXPECT_THROW(evaluate_model(theta, b.target, g, Ablation::no_z, 1, 5), ConfigError);
}

TEST(EvaluateModel, ThreadCountDoesNotChangeRows) {
  const auto b = small_benchmark(4);
  const EvalGrid g = small_grid();
  ModelDims dims;
  dims.repr_dim = 4;
  dims.embed_dim = 8;
  dims.hidden = 10;
  const MetaParams theta = MetaParams::init(dims, 0.1, 3);
  const auto one = evaluate_model(theta, b.target, g, Ablation::full, 0, 5, 1);
  const auto two = evaluate_model(theta, b.target, g, Ablation::full, 0, 5, 2);
  ASSERT_EQ(one.size(), two.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    EXPECT_EQ(one[i].task_id, two[i].task_id);
    EXPECT_EQ(one[i].accuracy, two[i].accuracy);
  }
}

TEST(EvaluateBaseline, KeepsOneHyperparameterPerSplit) {
  const auto b = small_benchmark(3);
  EvalGrid g = small_grid();
  g.repeats = 1;
  BaselineConfig cfg;
  cfg.lambda_grid = {1e-2, 1.0};
  const auto rows = evaluate_baseline(BaselineKind::dre, b.target, g, cfg, 0, 5);
  ASSERT_EQ(rows.size(), b.target.size() * 12);
  std::set<std::string> chosen;
  for (const auto& r : rows) {
    EXPECT_EQ(r.method, "dre");
    EXPECT_EQ(r.ablation, "none");
    EXPECT_TRUE(r.best_over_grid);
    EXPECT_FALSE(r.prior_error.has_value());
    chosen.insert(r.hyperparam);
  }
  EXPECT_EQ(chosen.size(), 1u);

  // The chosen setting is at least as good on average as each single-setting run.
  auto mean = [](const std::vector<ResultRow>& rs) {
    double s = 0.0;
    for (const auto& r : rs) s += r.accuracy;
    return s / static_cast<double>(rs.size());
  };
  for (double lambda : cfg.lambda_grid) {
    BaselineConfig single = cfg;
    single.lambda_grid = {lambda};
    EXPECT_GE(mean(rows), mean(evaluate_baseline(BaselineKind::dre, b.target, g, single, 0, 5)));
  }
}

TEST(ResultsCsv, RoundTrip) {
  std::vector<ResultRow> rows{row(0, 3, 1, 0.2, 0.8125), row(1, 4, 5, 0.8, 1.0 / 3.0)};
  rows[0].prior_error = 0.1 + 1e-17;
  rows[1].method = "nnpu";
  rows[1].ablation = "none";
  rows[1].hyperparam = "iterations=500";
  rows[1].best_over_grid = true;
  rows[1].seed = 12345678901234ULL;
  std::stringstream buf;
  write_results_csv(buf, rows);
  const auto back = read_results_csv(buf);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].split_id, rows[i].split_id);
    EXPECT_EQ(back[i].task_id, rows[i].task_id);
    EXPECT_EQ(back[i].method, rows[i].method);
    EXPECT_EQ(back[i].ablation, rows[i].ablation);
    EXPECT_EQ(back[i].n_support_pos, rows[i].n_support_pos);
    EXPECT_EQ(back[i].target_prior, rows[i].target_prior);
    EXPECT_EQ(back[i].accuracy, rows[i].accuracy);
    EXPECT_EQ(back[i].prior_error, rows[i].prior_error);
    EXPECT_EQ(back[i].seed, rows[i].seed);
    EXPECT_EQ(back[i].hyperparam, rows[i].hyperparam);
    EXPECT_EQ(back[i].best_over_grid, rows[i].best_over_grid);
  }
}

TEST(ResultsCsv, MissingColumnIsNamed) {
  std::stringstream buf;
  buf << "format_version,split_id,task_id,method,ablation,n_support_pos,target_prior,prior_rmse,seed,hyperparam,"
         "best_over_grid\n";
  try {
    read_results_csv(buf);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("accuracy"), std::string::npos) << e.what();
  }
}

TEST(ResultsCsv, UnknownVersionRejected) {
  std::stringstream buf;
  write_results_csv(buf, {row(0, 1, 1, 0.2, 0.5)});
  std::string text = buf.str();
  const auto nl = text.find('\n');
  text.replace(nl + 1, 1, "9");
  std::stringstream in(text);
  EXPECT_THROW(read_results_csv(in), SchemaError);
}

TEST(ResultsCsv, BadCellReportsLine) {
  std::stringstream buf;
  write_results_csv(buf, {row(0, 1, 1, 0.2, 0.5), row(0, 2, 1, 0.2, 0.5)});
  std::string text = buf.str();
  const auto pos = text.find("0.5", text.rfind("ours"));
  text.replace(pos, 3, "abc");
  std::stringstream in(text);
  try {
    read_results_csv(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(Summarize, SingleRowHasZeroStderr) {
  const auto s = summarize({row(0, 1, 1, 0.2, 0.75)});
  ASSERT_EQ(s.size(), 1u);
  EXPECT_DOUBLE_EQ(s[0].overall.mean, 0.75);
  EXPECT_DOUBLE_EQ(s[0].overall.stderr_, 0.0);
  EXPECT_EQ(s[0].overall.splits, 1u);
  EXPECT_FALSE(s[0].prior_rmse.has_value());
}

TEST(Summarize, AveragesCellsBeforeSplits) {
  // Split 0: cell A has repeats 1.0 and 0.0 (mean 0.5), cell B has 1.0 -> split mean 0.75.
  // Split 1: one cell at 0.25. Mean over splits 0.5, stderr = sd / sqrt(2) = 0.25.
  std::vector<ResultRow> rows{row(0, 1, 1, 0.2, 1.0), row(0, 1, 1, 0.2, 0.0), row(0, 1, 3, 0.2, 1.0),
                              row(1, 1, 1, 0.2, 0.25)};
  rows[0].prior_error = 0.3;
  rows[1].prior_error = 0.4;
  const auto s = summarize(rows);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_DOUBLE_EQ(s[0].overall.mean, 0.5);
  EXPECT_DOUBLE_EQ(s[0].overall.stderr_, 0.25);
  EXPECT_DOUBLE_EQ(s[0].by_support.at(3).mean, 1.0);
  EXPECT_DOUBLE_EQ(s[0].by_support.at(1).mean, 0.375);
  ASSERT_TRUE(s[0].prior_rmse.has_value());
  EXPECT_DOUBLE_EQ(*s[0].prior_rmse, std::sqrt((0.09 + 0.16) / 2.0));
  EXPECT_NE(find_summary(s, "ours", "full"), nullptr);
  EXPECT_EQ(find_summary(s, "ours", "no_z"), nullptr);
}

TEST(AblationNames, RoundTrip) {
  for (Ablation a : {Ablation::full, Ablation::no_z, Ablation::no_prior, Ablation::true_prior}) {
    EXPECT_EQ(ablation_from_string(to_string(a)), a);
  }
  EXPECT_THROW(ablation_from_string("none"), ConfigError);
}

TEST(EvalGridConfig, Validation) {
  EvalGrid g;
  EXPECT_NO_THROW(g.validate());
  EXPECT_EQ(g.episodes_per_task(), 60u);
  g.support_sizes = {30};
  EXPECT_THROW(g.validate(), ConfigError);
}

}  // namespace
