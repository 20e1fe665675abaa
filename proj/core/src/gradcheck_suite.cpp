#include "metapu/gradcheck_suite.hpp"

#include <fmt/format.h>

#include <random>

#include "metapu/errors.hpp"

namespace metapu {

namespace {

using ad::Index;
using Rng = std::mt19937_64;

Matrix uniform(Index r, Index c, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Entries with |x - kink| >= gap, sign chosen at random.
Matrix away_from(Index r, Index c, double kink, double gap, Rng& rng) {
  std::uniform_real_distribution<double> mag(gap, 1.0);
  std::bernoulli_distribution coin(0.5);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = kink + (coin(rng) ? 1.0 : -1.0) * mag(rng);
  return m;
}

Matrix normal(Index r, Index c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Reduces an array to a scalar through fixed random weights so every entry's adjoint differs.
DiffArray weighted_sum(Tape& tape, const DiffArray& a, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(a, tape.constant(uniform(a.rows(), a.cols(), 0.5, 1.5, rng))));
}

GradCheckEntry entry(const std::string& name, const ad::GradCheckResult& r, double tol) {
  return {name, r.max_rel_error, tol, r.max_rel_error < tol};
}

}  // namespace

std::vector<GradCheckEntry> check_ops(std::uint64_t seed) {
  Rng rng(seed);
  const double h = kGradCheckStep;
  const double tol = kOpGradTolerance;
  std::vector<GradCheckEntry> out;
  auto unary = [&](const std::string& name, const Matrix& x, auto op) {
    const auto r = ad::grad_check(
        [&](Tape& t, const DiffArray& a) { return weighted_sum(t, op(t, a), seed + out.size()); }, x, h);
    out.push_back(entry(name, r, tol));
  };
  auto binary = [&](const std::string& name, const Matrix& x, const Matrix& y, auto op) {
    const auto r = ad::grad_check(
        [&](Tape& t, std::span<const DiffArray> p) { return weighted_sum(t, op(t, p[0], p[1]), seed + out.size()); },
        {x, y}, h);
    out.push_back(entry(name, r, tol));
  };

  binary("matmul", normal(3, 4, rng), normal(4, 2, rng), [](Tape&, auto a, auto b) { return ad::matmul(a, b); });
  unary("transpose", normal(3, 2, rng), [](Tape&, auto a) { return ad::transpose(a); });
  binary("add", normal(3, 2, rng), normal(3, 2, rng), [](Tape&, auto a, auto b) { return ad::add(a, b); });
  binary("sub", normal(3, 2, rng), normal(3, 2, rng), [](Tape&, auto a, auto b) { return ad::sub(a, b); });
  binary("mul", normal(3, 2, rng), normal(3, 2, rng), [](Tape&, auto a, auto b) { return ad::mul(a, b); });
  unary("neg", normal(3, 2, rng), [](Tape&, auto a) { return ad::neg(a); });
  unary("reciprocal", uniform(3, 2, 0.5, 2.0, rng), [](Tape&, auto a) { return ad::reciprocal(a); });
  unary("relu", away_from(3, 3, 0.0, 0.05, rng), [](Tape&, auto a) { return ad::relu(a); });
  unary("softplus", uniform(3, 3, -4.0, 4.0, rng), [](Tape&, auto a) { return ad::softplus(a); });
  unary("sigmoid_scaled", uniform(3, 3, -0.3, 0.3, rng), [](Tape&, auto a) { return ad::sigmoid_scaled(a, 10.0); });
  unary("exp", uniform(3, 2, -1.0, 1.0, rng), [](Tape&, auto a) { return ad::exp(a); });
  unary("affine", normal(3, 2, rng), [](Tape&, auto a) { return ad::affine(a, -1.7, 0.3); });
  unary("clamp_nonneg", away_from(3, 3, 0.0, 0.05, rng), [](Tape&, auto a) { return ad::clamp_nonneg(a); });
  unary("clamp_max", away_from(3, 3, 0.5, 0.05, rng), [](Tape&, auto a) { return ad::clamp_max(a, 0.5); });
  binary("scale_by", normal(3, 2, rng), normal(1, 1, rng), [](Tape&, auto a, auto s) { return ad::scale_by(a, s); });
  binary("add_row_bias", normal(4, 3, rng), normal(1, 3, rng),
         [](Tape&, auto a, auto b) { return ad::add_row_bias(a, b); });
  unary("repeat_rows", normal(1, 3, rng), [](Tape&, auto a) { return ad::repeat_rows(a, 4); });
  binary("add_diag", normal(3, 3, rng), normal(1, 1, rng), [](Tape&, auto a, auto s) { return ad::add_diag(a, s); });
  unary("mean_rows", normal(5, 3, rng), [](Tape&, auto a) { return ad::mean_rows(a); });
  unary("sum", normal(3, 3, rng), [](Tape&, auto a) { return ad::sum(a); });
  {
    // Distinct entries spaced well beyond the step size.
    Matrix x = normal(3, 3, rng);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] += 0.5 * static_cast<double>(i);
    unary("max_entry", x, [](Tape&, auto a) { return ad::max_entry(a); });
  }
  binary("concat_cols", normal(3, 2, rng), normal(3, 1, rng), [](Tape&, auto a, auto b) {
    const DiffArray parts[] = {a, b};
    return ad::concat_cols(parts);
  });
  unary("slice_rows", normal(5, 2, rng), [](Tape&, auto a) { return ad::slice_rows(a, 1, 3); });
  {
    // A = B B^T + 0.5 I keeps the perturbed system symmetric positive definite.
    binary("solve_spd", normal(5, 5, rng), normal(5, 2, rng), [](Tape& t, auto b, auto rhs) {
      const DiffArray a = ad::add_diag(ad::matmul(b, ad::transpose(b)), t.constant(Matrix::Constant(1, 1, 0.5)));
      return ad::solve_spd(a, rhs);
    });
  }
  return out;
}

EpisodeFixture make_episode_fixture(std::uint64_t seed) {
  ModelDims dims;
  dims.input_dim = 2;
  dims.repr_dim = 4;
  dims.embed_dim = 8;
  dims.hidden = 10;
  for (std::uint64_t s = seed; s < seed + 1000; ++s) {
    Rng rng(s);
    EpisodeFixture fx;
    fx.theta = MetaParams::init(dims, 0.1, s);
    fx.support.positives = normal(3, 2, rng);
    fx.support.positives.col(0).array() -= 1.0;
    fx.support.unlabeled = normal(7, 2, rng);
    fx.query.positives = normal(4, 2, rng);
    fx.query.positives.col(0).array() -= 1.0;
    fx.query.negatives = normal(4, 2, rng);
    fx.query.negatives.col(0).array() += 1.0;
    try {
      const AdaptedClassifier c = adapt(fx.support, fx.theta);
      fx.pi_hat = c.pi_hat;
      for (Index i = 0; i < c.w_hat.size(); ++i) fx.clamped_weights += c.w_hat[i] == 0.0 ? 1 : 0;
      if (fx.pi_hat < 0.99 && fx.clamped_weights > 0 && fx.clamped_weights < c.w_hat.size()) return fx;
    } catch (const DegenerateRatioError&) {
    }
  }
  throw Error("make_episode_fixture: no seed in range exercises every gradient path");
}

GradCheckEntry check_episode(const EpisodeFixture& fx, double tau) {
  const auto r = ad::grad_check(
      [&](Tape& tape, std::span<const DiffArray> handles) {
        const BoundParams bound = bind_from_handles(fx.theta, handles);
        const TapedAdaptation c = adapt(tape, bound, fx.support);
        return smoothed_risk(tape, bound, c, fx.query, tau);
      },
      fx.theta.arrays(), kGradCheckStep);
  return {"episode", r.max_rel_error, kEpisodeGradTolerance, r.max_rel_error < kEpisodeGradTolerance};
}

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed) {
  auto out = check_ops(seed);
  out.push_back(check_episode(make_episode_fixture()));
  return out;
}

}  // namespace metapu
