#include "metapu/model.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "metapu/errors.hpp"

namespace metapu {

namespace {

constexpr double kDegenerateRatio = 1e-12;

void for_each_mlp_array(const nn::Mlp& mlp, const std::string& prefix,
                        const std::function<void(const std::string&, const Matrix&)>& fn) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    fn(fmt::format("{}.{}.weight", prefix, l), mlp.layers[l].weight);
    fn(fmt::format("{}.{}.bias", prefix, l), mlp.layers[l].bias);
  }
}

void collect_mutable(nn::Mlp& mlp, std::vector<Matrix*>& out) {
  for (auto& layer : mlp.layers) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
  }
}

void collect_handles(const nn::BoundMlp& net, std::vector<DiffArray>& out) {
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    out.push_back(net.weights[l]);
    out.push_back(net.biases[l]);
  }
}

nn::BoundMlp take_mlp(const nn::Mlp& layout, std::span<const DiffArray> handles, std::size_t& pos) {
  nn::BoundMlp net;
  net.output = layout.output;
  for (std::size_t l = 0; l < layout.layers.size(); ++l) {
    net.weights.push_back(handles[pos++]);
    net.biases.push_back(handles[pos++]);
  }
  return net;
}

Matrix stack_rows(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

Matrix as_row(const Vector& v) { return v.transpose(); }

// Rows sorted lexicographically. Floating-point sums then see the same order
// regardless of how the caller arranged the set.
Matrix canonical_rows(const Matrix& x) {
  std::vector<ad::Index> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), ad::Index{0});
  std::stable_sort(order.begin(), order.end(), [&x](ad::Index a, ad::Index b) {
    for (ad::Index j = 0; j < x.cols(); ++j) {
      if (x(a, j) != x(b, j)) return x(a, j) < x(b, j);
    }
    return false;
  });
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < order.size(); ++i) out.row(static_cast<ad::Index>(i)) = x.row(order[i]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// MetaParams

MetaParams MetaParams::init(const ModelDims& dims, double lambda_init, std::uint64_t seed) {
  if (dims.input_dim < 1 || dims.repr_dim < 1 || dims.embed_dim < 1 || dims.hidden < 1) {
    throw ConfigError("MetaParams::init: every dimension must be positive");
  }
  if (!(lambda_init > 0.0)) throw ConfigError("MetaParams::init: lambda_init must be positive");
  std::mt19937_64 rng(seed);
  MetaParams p;
  p.dims = dims;
  const int hw = dims.hidden;
  if (dims.use_task_repr) {
    p.f = nn::Mlp::init({dims.input_dim, hw, hw, hw}, nn::OutputActivation::identity, rng);
    p.g = nn::Mlp::init({hw, hw, dims.repr_dim}, nn::OutputActivation::identity, rng);
  }
  const int h_in = dims.input_dim + (dims.use_task_repr ? 2 * dims.repr_dim : 0);
  p.h = nn::Mlp::init({h_in, hw, hw, hw, dims.embed_dim}, nn::OutputActivation::softplus, rng);
  p.log_lambda = Matrix::Constant(1, 1, std::log(lambda_init));
  return p;
}

double MetaParams::lambda() const { return std::exp(log_lambda(0, 0)); }

void MetaParams::for_each_array(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  for_each_mlp_array(f, "f", fn);
  for_each_mlp_array(g, "g", fn);
  for_each_mlp_array(h, "h", fn);
  fn("log_lambda", log_lambda);
}

std::vector<Matrix*> MetaParams::mutable_arrays() {
  std::vector<Matrix*> out;
  collect_mutable(f, out);
  collect_mutable(g, out);
  collect_mutable(h, out);
  out.push_back(&log_lambda);
  return out;
}

std::vector<Matrix> MetaParams::arrays() const {
  std::vector<Matrix> out;
  for_each_array([&out](const std::string&, const Matrix& m) { out.push_back(m); });
  return out;
}

std::size_t MetaParams::parameter_count() const {
  std::size_t n = 0;
  for_each_array([&n](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

// ---------------------------------------------------------------------------
// Sets

void SupportSet::validate(int input_dim) const {
  if (positives.rows() < 1) throw EmptyReductionError("support set: no positive instances");
  if (unlabeled.rows() < 1) throw EmptyReductionError("support set: no unlabeled instances");
  if (positives.cols() != input_dim || unlabeled.cols() != input_dim) {
    throw ShapeError(fmt::format("support set: expected {} columns, got positives {} and unlabeled {}", input_dim,
                                 positives.cols(), unlabeled.cols()));
  }
}

double QuerySet::pi_q() const {
  const auto np = static_cast<double>(positives.rows());
  const auto nn = static_cast<double>(negatives.rows());
  return np / (np + nn);
}

void QuerySet::validate(int input_dim) const {
  if (positives.rows() < 1 || negatives.rows() < 1) {
    throw EmptyReductionError("query set: both positives and negatives must be nonempty");
  }
  if (positives.cols() != input_dim || negatives.cols() != input_dim) {
    throw ShapeError(fmt::format("query set: expected {} columns", input_dim));
  }
}

// ---------------------------------------------------------------------------
// Taped model

BoundParams bind(Tape& tape, const MetaParams& theta, bool trainable) {
  BoundParams b;
  b.use_task_repr = theta.dims.use_task_repr;
  b.f = nn::bind(tape, theta.f, trainable);
  b.g = nn::bind(tape, theta.g, trainable);
  b.h = nn::bind(tape, theta.h, trainable);
  b.log_lambda = trainable ? tape.parameter(theta.log_lambda) : tape.constant(theta.log_lambda);
  return b;
}

BoundParams bind_from_handles(const MetaParams& layout, std::span<const DiffArray> handles) {
  const std::size_t expected =
      2 * (layout.f.layers.size() + layout.g.layers.size() + layout.h.layers.size()) + 1;
  if (handles.size() != expected) {
    throw ShapeError(fmt::format("bind_from_handles: expected {} arrays, got {}", expected, handles.size()));
  }
  BoundParams b;
  b.use_task_repr = layout.dims.use_task_repr;
  std::size_t pos = 0;
  b.f = take_mlp(layout.f, handles, pos);
  b.g = take_mlp(layout.g, handles, pos);
  b.h = take_mlp(layout.h, handles, pos);
  b.log_lambda = handles[pos];
  return b;
}

std::vector<Matrix> gradients(const BoundParams& bound) {
  std::vector<DiffArray> handles;
  collect_handles(bound.f, handles);
  collect_handles(bound.g, handles);
  collect_handles(bound.h, handles);
  handles.push_back(bound.log_lambda);
  std::vector<Matrix> out;
  out.reserve(handles.size());
  for (const auto& h : handles) out.push_back(h.grad());
  return out;
}

TaskRepr encode_task(Tape& tape, const BoundParams& theta, const SupportSet& s) {
  if (!theta.use_task_repr) return {};
  if (s.positives.rows() < 1 || s.unlabeled.rows() < 1) {
    throw EmptyReductionError("encode_task: support parts must be nonempty");
  }
  auto summarize = [&](const Matrix& x) {
    return nn::forward(theta.g, ad::mean_rows(nn::forward(theta.f, tape.constant(canonical_rows(x)))));
  };
  return {summarize(s.positives), summarize(s.unlabeled)};
}

DiffArray embed(const BoundParams& theta, const DiffArray& x, const TaskRepr& repr) {
  if (!theta.use_task_repr) return nn::forward(theta.h, x);
  const ad::Index n = x.rows();
  const DiffArray parts[] = {x, ad::repeat_rows(repr.z_p, n), ad::repeat_rows(repr.z_u, n)};
  return nn::forward(theta.h, ad::concat_cols(parts));
}

std::pair<DiffArray, DiffArray> fit_density_ratio(const DiffArray& h_pos, const DiffArray& h_unl,
                                                  const DiffArray& lambda) {
  if (h_pos.cols() != h_unl.cols()) {
    throw ShapeError(fmt::format("fit_density_ratio: embedding widths differ, {} vs {}", h_pos.shape_string(),
                                 h_unl.shape_string()));
  }
  const DiffArray k = ad::transpose(ad::mean_rows(h_pos));
  const double inv_nu = 1.0 / static_cast<double>(h_unl.rows());
  const DiffArray gram = ad::affine(ad::matmul(ad::transpose(h_unl), h_unl), inv_nu, 0.0);
  const DiffArray w_tilde = ad::solve_spd(ad::add_diag(gram, lambda), k);
  return {w_tilde, ad::clamp_nonneg(w_tilde)};
}

DiffArray estimate_prior(const DiffArray& ratios) {
  const DiffArray peak = ad::max_entry(ratios);
  if (!(peak.scalar() >= kDegenerateRatio)) {
    throw DegenerateRatioError(
        fmt::format("estimate_prior: maximum support ratio {:.3e} is below {:.0e}", peak.scalar(), kDegenerateRatio));
  }
  return ad::clamp_max(ad::reciprocal(peak), 1.0);
}

TapedAdaptation adapt(Tape& tape, const BoundParams& theta, const SupportSet& support) {
  const SupportSet s{canonical_rows(support.positives), canonical_rows(support.unlabeled)};
  TapedAdaptation out;
  out.repr = encode_task(tape, theta, s);
  const ad::Index np = s.positives.rows();
  const ad::Index nu = s.unlabeled.rows();
  // Positives first, then unlabeled; the order only affects max tie-breaking.
  const DiffArray h_all = embed(theta, tape.constant(stack_rows(s.positives, s.unlabeled)), out.repr);
  const DiffArray lambda = ad::exp(theta.log_lambda);
  std::tie(out.w_tilde, out.w_hat) =
      fit_density_ratio(ad::slice_rows(h_all, 0, np), ad::slice_rows(h_all, np, nu), lambda);
  out.pi_hat = estimate_prior(ad::matmul(h_all, out.w_hat));
  return out;
}

DiffArray smoothed_risk(Tape& tape, const BoundParams& theta, const TapedAdaptation& c, const QuerySet& q,
                        double tau) {
  if (!(tau > 0.0)) throw NumericDomainError("smoothed_risk: tau must be positive");
  if (q.positives.rows() < 1 || q.negatives.rows() < 1) {
    throw EmptyReductionError("smoothed_risk: query parts must be nonempty");
  }
  const ad::Index np = q.positives.rows();
  const ad::Index nn = q.negatives.rows();
  const DiffArray h_q = embed(theta, tape.constant(stack_rows(q.positives, q.negatives)), c.repr);
  const DiffArray u = ad::affine(ad::scale_by(ad::matmul(h_q, c.w_hat), c.pi_hat), 1.0, -0.5);
  const double pi_q = q.pi_q();
  const DiffArray miss_pos = ad::sigmoid_scaled(ad::neg(ad::slice_rows(u, 0, np)), tau);
  const DiffArray miss_neg = ad::sigmoid_scaled(ad::slice_rows(u, np, nn), tau);
  return ad::add(ad::affine(ad::sum(miss_pos), pi_q / static_cast<double>(np), 0.0),
                 ad::affine(ad::sum(miss_neg), (1.0 - pi_q) / static_cast<double>(nn), 0.0));
}

// ---------------------------------------------------------------------------
// Value interface

AdaptedClassifier adapt(const SupportSet& s, const MetaParams& theta) {
  s.validate(theta.dims.input_dim);
  Tape tape;
  const BoundParams bound = bind(tape, theta, false);
  const TapedAdaptation a = adapt(tape, bound, s);
  AdaptedClassifier c;
  if (theta.dims.use_task_repr) {
    c.z_p = a.repr.z_p.value().row(0).transpose();
    c.z_u = a.repr.z_u.value().row(0).transpose();
  }
  c.w_hat = a.w_hat.value().col(0);
  c.pi_hat = a.pi_hat.scalar();
  c.theta = &theta;
  return c;
}

Vector ratio(const Matrix& x, const AdaptedClassifier& c) {
  if (c.theta == nullptr) throw StateError("ratio: classifier has no parameters attached");
  const MetaParams& theta = *c.theta;
  if (x.cols() != theta.dims.input_dim) {
    throw ShapeError(fmt::format("ratio: expected {} columns, got {}", theta.dims.input_dim, x.cols()));
  }
  if (x.rows() == 0) return Vector(0);
  Tape tape;
  BoundParams bound;
  bound.use_task_repr = theta.dims.use_task_repr;
  bound.h = nn::bind(tape, theta.h, false);
  TaskRepr repr;
  if (bound.use_task_repr) {
    repr.z_p = tape.constant(as_row(c.z_p));
    repr.z_u = tape.constant(as_row(c.z_u));
  }
  const Matrix h = embed(bound, tape.constant(x), repr).value();
  return h * c.w_hat;
}

std::vector<int> classify_ratios(const Vector& ratios, double prior) {
  std::vector<int> labels(static_cast<std::size_t>(ratios.size()));
  for (ad::Index i = 0; i < ratios.size(); ++i) {
    labels[static_cast<std::size_t>(i)] = prior * ratios[i] - 0.5 >= 0.0 ? 1 : -1;
  }
  return labels;
}

namespace {
double prior_for(const AdaptedClassifier& c, PriorMode mode, double given_prior) {
  switch (mode) {
    case PriorMode::estimated: return c.pi_hat;
    case PriorMode::none: return 1.0;
    case PriorMode::given: return given_prior;
  }
  return c.pi_hat;
}
}  // namespace

std::vector<int> classify(const Matrix& x, const AdaptedClassifier& c, PriorMode mode, double given_prior) {
  return classify_ratios(ratio(x, c), prior_for(c, mode, given_prior));
}

double zero_one_risk(const QuerySet& q, const AdaptedClassifier& c, PriorMode mode, double given_prior) {
  if (q.positives.rows() < 1 || q.negatives.rows() < 1) {
    throw EmptyReductionError("zero_one_risk: query parts must be nonempty");
  }
  const auto pos = classify(q.positives, c, mode, given_prior);
  const auto neg = classify(q.negatives, c, mode, given_prior);
  double fn = 0.0;
  for (int y : pos) fn += y < 0 ? 1.0 : 0.0;
  double fp = 0.0;
  for (int y : neg) fp += y > 0 ? 1.0 : 0.0;
  const double pi_q = q.pi_q();
  return pi_q * fn / static_cast<double>(pos.size()) + (1.0 - pi_q) * fp / static_cast<double>(neg.size());
}

double smoothed_risk(const QuerySet& q, const AdaptedClassifier& c, double tau) {
  if (!(tau > 0.0)) throw NumericDomainError("smoothed_risk: tau must be positive");
  auto sigma = [tau](double u) { return 1.0 / (1.0 + std::exp(-tau * u)); };
  const Vector rp = ratio(q.positives, c);
  const Vector rn = ratio(q.negatives, c);
  double sp = 0.0;
  for (ad::Index i = 0; i < rp.size(); ++i) sp += sigma(-(c.pi_hat * rp[i] - 0.5));
  double sn = 0.0;
  for (ad::Index i = 0; i < rn.size(); ++i) sn += sigma(c.pi_hat * rn[i] - 0.5);
  const double pi_q = q.pi_q();
  return pi_q * sp / static_cast<double>(rp.size()) + (1.0 - pi_q) * sn / static_cast<double>(rn.size());
}

}  // namespace metapu
