#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "metapu/checkpoint.hpp"
#include "metapu/errors.hpp"
#include "metapu/model.hpp"

using namespace metapu;

namespace {

Matrix gaussian(ad::Index n, ad::Index d, double shift, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix m(n, d);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  m.col(0).array() += shift;
  return m;
}

ModelDims tiny_dims() {
  ModelDims d;
  d.input_dim = 2;
  d.repr_dim = 4;
  d.embed_dim = 8;
  d.hidden = 10;
  return d;
}

Matrix permute_rows(const Matrix& x, std::uint64_t seed) {
  std::vector<ad::Index> idx(static_cast<std::size_t>(x.rows()));
  std::iota(idx.begin(), idx.end(), ad::Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<ad::Index>(i)) = x.row(idx[i]);
  return out;
}

struct Fixture {
  MetaParams theta = MetaParams::init(tiny_dims(), 0.1, 3);
  SupportSet s;
  QuerySet q;
  Fixture() {
    std::mt19937_64 rng(8);
    s.positives = gaussian(4, 2, -1.5, rng);
    s.unlabeled = gaussian(12, 2, 0.5, rng);
    q.positives = gaussian(5, 2, -1.5, rng);
    q.negatives = gaussian(7, 2, 1.5, rng);
  }
};

}  // namespace

TEST(MetaParams, LambdaIsPositiveAndInitialized) {
  const auto theta = MetaParams::init(tiny_dims(), 0.1, 1);
  EXPECT_NEAR(theta.lambda(), 0.1, 1e-15);
  EXPECT_EQ(theta.f.input_dim(), 2);
  EXPECT_EQ(theta.f.output_dim(), 10);
  EXPECT_EQ(theta.g.output_dim(), 4);
  EXPECT_EQ(theta.h.input_dim(), 2 + 2 * 4);
  EXPECT_EQ(theta.h.output_dim(), 8);
}

TEST(MetaParams, WithoutTaskReprHSeesInputOnly) {
  ModelDims d = tiny_dims();
  d.use_task_repr = false;
  const auto theta = MetaParams::init(d, 0.1, 1);
  EXPECT_TRUE(theta.f.layers.empty());
  EXPECT_EQ(theta.h.input_dim(), 2);
}

TEST(EncodeTask, PermutationInvariantBitwise) {
  Fixture fx;
  Tape t1, t2;
  const auto a = encode_task(t1, bind(t1, fx.theta, false), fx.s);
  SupportSet p = fx.s;
  p.positives = permute_rows(p.positives, 1);
  p.unlabeled = permute_rows(p.unlabeled, 2);
  const auto b = encode_task(t2, bind(t2, fx.theta, false), p);
  EXPECT_EQ(a.z_p.value(), b.z_p.value());
  EXPECT_EQ(a.z_u.value(), b.z_u.value());
}

TEST(EncodeTask, DuplicatingUnlabeledRowsKeepsMean) {
  Fixture fx;
  SupportSet d = fx.s;
  d.unlabeled.resize(fx.s.unlabeled.rows() * 2, 2);
  d.unlabeled << fx.s.unlabeled, fx.s.unlabeled;
  Tape t1, t2;
  const auto a = encode_task(t1, bind(t1, fx.theta, false), fx.s);
  const auto b = encode_task(t2, bind(t2, fx.theta, false), d);
  EXPECT_TRUE(a.z_u.value().isApprox(b.z_u.value(), 1e-13));
}

TEST(EncodeTask, SinglePositiveIsGOfF) {
  Fixture fx;
  SupportSet s = fx.s;
  s.positives = s.positives.topRows(1).eval();
  Tape t;
  const auto z = encode_task(t, bind(t, fx.theta, false), s);
  const Matrix direct = nn::forward(fx.theta.g, nn::forward(fx.theta.f, s.positives));
  EXPECT_TRUE(z.z_p.value().isApprox(direct, 1e-14));
}

TEST(EncodeTask, EmptyPartRejected) {
  Fixture fx;
  SupportSet s = fx.s;
  s.positives = Matrix(0, 2);
  EXPECT_THROW(adapt(s, fx.theta), Error);
}

TEST(Embed, ShapeAndPositivity) {
  ModelDims d;
  d.repr_dim = 8;
  const auto theta = MetaParams::init(d, 0.1, 2);
  std::mt19937_64 rng(3);
  SupportSet s{gaussian(5, 2, 0, rng), gaussian(25, 2, 0, rng)};
  Tape t;
  const auto bound = bind(t, theta, false);
  const auto repr = encode_task(t, bound, s);
  Matrix x = gaussian(30, 2, 0, rng);
  x.row(1) = x.row(0);
  const auto h = embed(bound, t.constant(x), repr);
  EXPECT_EQ(h.rows(), 30);
  EXPECT_EQ(h.cols(), 100);
  EXPECT_GT(h.value().minCoeff(), 0.0);
  EXPECT_EQ(h.value().row(0), h.value().row(1));
}

TEST(FitDensityRatio, ConstantOneDimensionalEmbedding) {
  Tape t;
  const auto [w_tilde, w_hat] =
      fit_density_ratio(t.constant(Matrix::Ones(3, 1)), t.constant(Matrix::Ones(5, 1)), t.constant(Matrix::Ones(1, 1)));
  EXPECT_DOUBLE_EQ(w_tilde.scalar(), 0.5);
  EXPECT_DOUBLE_EQ(w_hat.scalar(), 0.5);
}

TEST(FitDensityRatio, LargeLambdaShrinksTowardKOverLambda) {
  std::mt19937_64 rng(5);
  const Matrix hp = gaussian(4, 3, 2.0, rng).cwiseAbs();
  const Matrix hu = gaussian(9, 3, 2.0, rng).cwiseAbs();
  Tape t;
  const double lambda = 1e8;
  const auto [w_tilde, w_hat] =
      fit_density_ratio(t.constant(hp), t.constant(hu), t.constant(Matrix::Constant(1, 1, lambda)));
  const Matrix k = hp.colwise().mean().transpose();
  EXPECT_LT(w_tilde.value().norm(), 1e-6);
  EXPECT_TRUE((w_tilde.value() * lambda).isApprox(k, 1e-6));
}

TEST(FitDensityRatio, MonotoneFeaturesCorrelateWithAnalyticRatio) {
  // p^p = N(0,1), p = 0.5 N(0,1) + 0.5 N(4,1); analytic ratio 1 / (0.5 + 0.5 exp(4x - 8)).
  // Decreasing sigmoid features plus a bias column keep the target near the
  // nonnegative cone, so clamping does not distort the fit.
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  std::bernoulli_distribution coin(0.5);
  const int n = 500;
  Matrix xp(n, 1), xu(n, 1);
  for (int i = 0; i < n; ++i) {
    xp(i, 0) = g(rng);
    xu(i, 0) = g(rng) + (coin(rng) ? 4.0 : 0.0);
  }
  const int n_centers = 7;
  auto features = [&](const Matrix& x) {
    Matrix f(x.rows(), n_centers + 1);
    for (ad::Index i = 0; i < x.rows(); ++i) {
      for (int c = 0; c < n_centers; ++c) f(i, c) = 1.0 / (1.0 + std::exp(-2.0 * (-2.0 + c - x(i, 0))));
      f(i, n_centers) = 1.0;
    }
    return f;
  };
  Tape t;
  const auto [w_tilde, w_hat] = fit_density_ratio(t.constant(features(xp)), t.constant(features(xu)),
                                                  t.constant(Matrix::Constant(1, 1, 0.1)));
  std::vector<double> est, truth;
  for (int i = 0; i <= 120; ++i) {
    Matrix pt(1, 1);
    pt(0, 0) = -3.0 + 0.05 * i;
    est.push_back((features(pt) * w_hat.value())(0, 0));
    truth.push_back(1.0 / (0.5 + 0.5 * std::exp(4.0 * pt(0, 0) - 8.0)));
  }
  const auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  const double me = mean(est), mt = mean(truth);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    sxy += (est[i] - me) * (truth[i] - mt);
    sxx += (est[i] - me) * (est[i] - me);
    syy += (truth[i] - mt) * (truth[i] - mt);
  }
  EXPECT_GT(sxy / std::sqrt(sxx * syy), 0.8);
}

TEST(EstimatePrior, InverseOfMaximum) {
  Tape t;
  Matrix r(3, 1);
  r << 0.4, 2.0, 2.5;
  EXPECT_DOUBLE_EQ(estimate_prior(t.constant(r)).scalar(), 0.4);
}

TEST(EstimatePrior, ClampedAtOne) {
  Tape t;
  Matrix r(2, 1);
  r << 0.8, 0.1;
  EXPECT_DOUBLE_EQ(estimate_prior(t.constant(r)).scalar(), 1.0);
}

TEST(EstimatePrior, DegenerateRatioRaises) {
  Tape t;
  EXPECT_THROW(estimate_prior(t.constant(Matrix::Zero(4, 1))), DegenerateRatioError);
}

TEST(Adapt, DeterministicAndPermutationInvariant) {
  Fixture fx;
  const auto a = adapt(fx.s, fx.theta);
  const auto b = adapt(fx.s, fx.theta);
  EXPECT_EQ(a.w_hat, b.w_hat);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SupportSet p = fx.s;
    p.positives = permute_rows(p.positives, seed);
    p.unlabeled = permute_rows(p.unlabeled, seed + 100);
    const auto c = adapt(p, fx.theta);
    EXPECT_EQ(a.z_p, c.z_p);
    EXPECT_EQ(a.z_u, c.z_u);
    EXPECT_EQ(a.w_hat, c.w_hat);
    EXPECT_EQ(a.pi_hat, c.pi_hat);
  }
}

TEST(Adapt, OutputInvariants) {
  Fixture fx;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto theta = MetaParams::init(tiny_dims(), 0.1, seed);
    try {
      const auto c = adapt(fx.s, theta);
      EXPECT_GE(c.w_hat.minCoeff(), 0.0);
      EXPECT_GT(c.pi_hat, 0.0);
      EXPECT_LE(c.pi_hat, 1.0);
      EXPECT_GE(ratio(fx.q.negatives, c).minCoeff(), 0.0);
    } catch (const DegenerateRatioError&) {
    }
  }
}

TEST(Ratio, ZeroWeightsGiveZeroRatio) {
  Fixture fx;
  auto c = adapt(fx.s, fx.theta);
  c.w_hat.setZero();
  EXPECT_EQ(ratio(fx.q.positives, c), Vector::Zero(5));
}

TEST(Classify, SignConvention) {
  Vector r(3);
  r << 1.2, 1.0, 1.0;
  auto labels = classify_ratios(r, 0.5);
  EXPECT_EQ(labels[0], 1);
  EXPECT_EQ(labels[1], 1);  // u = 0 maps to +1
  EXPECT_EQ(classify_ratios(r, 0.2)[2], -1);
}

TEST(Classify, PriorModes) {
  Fixture fx;
  const auto c = adapt(fx.s, fx.theta);
  const Matrix x = fx.q.negatives;
  const Vector r = ratio(x, c);
  EXPECT_EQ(classify(x, c, PriorMode::estimated), classify_ratios(r, c.pi_hat));
  EXPECT_EQ(classify(x, c, PriorMode::none), classify_ratios(r, 1.0));
  EXPECT_EQ(classify(x, c, PriorMode::given, 0.3), classify_ratios(r, 0.3));
}

TEST(ZeroOneRisk, ConstantClassifiers) {
  Fixture fx;
  auto c = adapt(fx.s, fx.theta);
  // Zero weights label every point negative.
  c.w_hat.setZero();
  EXPECT_DOUBLE_EQ(zero_one_risk(fx.q, c), fx.q.pi_q());
  // Positive weights with a huge prior label every point positive.
  c.w_hat.setOnes();
  EXPECT_NEAR(zero_one_risk(fx.q, c, PriorMode::given, 1e6), 1.0 - fx.q.pi_q(), 1e-15);
}

TEST(SmoothedRisk, ZeroPriorGivesClosedForm) {
  // pi_hat = 0 makes u = -0.5 at every query point.
  Fixture fx;
  Tape t;
  const auto bound = bind(t, fx.theta, false);
  TapedAdaptation a = adapt(t, bound, fx.s);
  a.pi_hat = t.constant(Matrix::Zero(1, 1));
  const double v = smoothed_risk(t, bound, a, fx.q, 10.0).scalar();
  const double pq = fx.q.pi_q();
  EXPECT_NEAR(v, pq / (1.0 + std::exp(-5.0)) + (1.0 - pq) / (1.0 + std::exp(5.0)), 1e-14);
}

TEST(SmoothedRisk, ApproachesZeroOneRiskAsTauGrows) {
  Fixture fx;
  const auto c = adapt(fx.s, fx.theta);
  const double target = zero_one_risk(fx.q, c);
  double previous = std::abs(smoothed_risk(fx.q, c, 10.0) - target);
  for (double tau : {100.0, 1000.0}) {
    const double gap = std::abs(smoothed_risk(fx.q, c, tau) - target);
    EXPECT_LE(gap, previous);
    previous = gap;
  }
  EXPECT_LT(previous, 0.05);
}

TEST(SmoothedRisk, TauTenTermsBounded) {
  Fixture fx;
  const auto c = adapt(fx.s, fx.theta);
  const double v = smoothed_risk(fx.q, c, 10.0);
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 1.0);
}

TEST(SmoothedRisk, TapedAndValueAgree) {
  Fixture fx;
  Tape t;
  const auto bound = bind(t, fx.theta, false);
  const auto a = adapt(t, bound, fx.s);
  EXPECT_NEAR(smoothed_risk(t, bound, a, fx.q, 10.0).scalar(), smoothed_risk(fx.q, adapt(fx.s, fx.theta), 10.0),
              1e-14);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const auto theta = MetaParams::init(tiny_dims(), 0.1, 9);
  const auto path = std::filesystem::temp_directory_path() / "metapu_test_ckpt.bin";
  CheckpointManifest m;
  m.dims = theta.dims;
  m.iteration = 1234;
  m.validation_accuracy = 0.75;
  m.seed = 42;
  save_checkpoint(path, m, theta);
  const auto loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.manifest.iteration, 1234);
  EXPECT_EQ(loaded.manifest.seed, 42u);
  EXPECT_EQ(loaded.manifest.dims.repr_dim, 4);
  const auto a = theta.arrays();
  const auto b = loaded.params.arrays();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto theta = MetaParams::init(tiny_dims(), 0.1, 9);
  const auto path = std::filesystem::temp_directory_path() / "metapu_test_ckpt_bad.bin";
  CheckpointManifest m;
  m.dims = theta.dims;
  save_checkpoint(path, m, theta);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << b;
  };
  write(bytes.substr(0, bytes.size() - 8));
  EXPECT_THROW(load_checkpoint(path), SchemaError);
  write(bytes + "x");
  EXPECT_THROW(load_checkpoint(path), SchemaError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  write(bad_magic);
  EXPECT_THROW(load_checkpoint(path), SchemaError);
  std::string bad_version = bytes;
  bad_version[8] = 9;
  write(bad_version);
  EXPECT_THROW(load_checkpoint(path), SchemaError);
  std::filesystem::remove(path);
}
