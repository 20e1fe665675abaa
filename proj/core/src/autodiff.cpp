#include "metapu/autodiff.hpp"

#include <Eigen/Dense>
#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "metapu/errors.hpp"

namespace metapu::ad {

namespace {

std::atomic<bool> g_solve_adjoint_fault{false};

std::string shape_of(const Matrix& m) { return fmt::format("[{}x{}]", m.rows(), m.cols()); }

double stable_softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void require_same_tape(const DiffArray& a, const DiffArray& b, const char* op) {
  if (!a.valid() || !b.valid()) throw StateError(fmt::format("{}: uninitialized operand", op));
  if (a.tape() != b.tape()) throw StateError(fmt::format("{}: operands recorded on different tapes", op));
}

void require_same_shape(const DiffArray& a, const DiffArray& b, const char* op) {
  require_same_tape(a, b, op);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, a.shape_string(), b.shape_string()));
  }
}

void require_scalar(const DiffArray& s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw ShapeError(fmt::format("{}: expected a 1x1 scalar, got {}", op, s.shape_string()));
  }
}

// Cholesky factor with the index of the failing pivot on breakdown.
Matrix cholesky_lower(const Matrix& a) {
  const Index n = a.rows();
  Matrix l = Matrix::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    const double d = a(j, j) - l.row(j).head(j).squaredNorm();
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw NotPositiveDefiniteError(static_cast<std::size_t>(j),
                                     fmt::format("solve_spd: matrix is not positive definite (pivot {} = {})", j, d));
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    const Index below = n - j - 1;
    if (below > 0) {
      l.col(j).tail(below) =
          (a.col(j).tail(below) - l.bottomLeftCorner(below, j) * l.row(j).head(j).transpose()) / ljj;
    }
  }
  return l;
}

Matrix cholesky_solve(const Matrix& lower, const Matrix& rhs) {
  Matrix y = lower.triangularView<Eigen::Lower>().solve(rhs);
  return lower.transpose().triangularView<Eigen::Upper>().solve(y);
}

}  // namespace

struct TapeAccess {
  static Tape::Node make(OpKind kind, std::initializer_list<DiffArray> inputs, Matrix value) {
    Tape::Node node;
    node.kind = kind;
    node.value = std::move(value);
    for (const auto& in : inputs) {
      node.inputs.push_back(in.node());
      node.requires_grad = node.requires_grad || in.requires_grad();
    }
    return node;
  }

  static DiffArray push(Tape* tape, Tape::Node node) { return DiffArray(tape, tape->push(std::move(node))); }
};

const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::neg: return "neg";
    case OpKind::reciprocal: return "reciprocal";
    case OpKind::relu: return "relu";
    case OpKind::softplus: return "softplus";
    case OpKind::sigmoid_scaled: return "sigmoid_scaled";
    case OpKind::exp: return "exp";
    case OpKind::affine: return "affine";
    case OpKind::scale_by: return "scale_by";
    case OpKind::add_row_bias: return "add_row_bias";
    case OpKind::repeat_rows: return "repeat_rows";
    case OpKind::add_diag: return "add_diag";
    case OpKind::mean_rows: return "mean_rows";
    case OpKind::sum: return "sum";
    case OpKind::max_entry: return "max_entry";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::clamp_nonneg: return "clamp_nonneg";
    case OpKind::clamp_max: return "clamp_max";
    case OpKind::solve_spd: return "solve_spd";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// DiffArray

const Matrix& DiffArray::value() const {
  if (!tape_) throw StateError("DiffArray: uninitialized handle");
  return tape_->at(id_).value;
}

const Matrix& DiffArray::grad() const {
  if (!tape_) throw StateError("DiffArray: uninitialized handle");
  return tape_->grad_of(id_);
}

std::string DiffArray::shape_string() const { return shape_of(value()); }

double DiffArray::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError(fmt::format("scalar(): expected 1x1, got {}", shape_of(v)));
  return v(0, 0);
}

bool DiffArray::requires_grad() const { return tape_ && tape_->at(id_).requires_grad; }

// ---------------------------------------------------------------------------
// Tape

int Tape::push(Node node) {
  if (backward_done_) throw StateError("tape: cannot record after backward; reset the tape first");
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size() - 1);
}

DiffArray Tape::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  return DiffArray(this, push(std::move(node)));
}

DiffArray Tape::parameter(Matrix value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  return DiffArray(this, push(std::move(node)));
}

void Tape::reset() {
  nodes_.clear();
  backward_done_ = false;
}

const Matrix& Tape::grad_of(int id) {
  Node& node = at(id);
  if (node.grad.size() == 0) node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

void Tape::accumulate(int id, const Matrix& adjoint) {
  Node& node = at(id);
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = adjoint;
  } else {
    node.grad += adjoint;
  }
}

void Tape::backward(const DiffArray& loss) {
  if (loss.tape() != this) throw StateError("backward: loss was not recorded on this tape");
  if (backward_done_) throw StateError("backward: already run on this tape; reset before recording again");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError(fmt::format("backward: loss must be a 1x1 scalar, got {}", loss.shape_string()));
  }
  backward_done_ = true;
  if (!loss.requires_grad()) return;
  accumulate(loss.node(), Matrix::Ones(1, 1));
  for (int id = loss.node(); id >= 0; --id) {
    const Node& node = at(id);
    if (node.kind == OpKind::leaf || !node.requires_grad || node.grad.size() == 0) continue;
    propagate(id);
  }
}

void Tape::propagate(int id) {
  const Node& node = at(id);
  const Matrix& g = node.grad;
  const Matrix& y = node.value;
  auto in_value = [&](std::size_t k) -> const Matrix& { return at(node.inputs[k]).value; };
  auto needs = [&](std::size_t k) { return at(node.inputs[k]).requires_grad; };
  const int a = node.inputs.empty() ? -1 : node.inputs[0];
  const int b = node.inputs.size() > 1 ? node.inputs[1] : -1;

  switch (node.kind) {
    case OpKind::leaf:
      break;
    case OpKind::matmul:
      if (needs(0)) accumulate(a, g * in_value(1).transpose());
      if (needs(1)) accumulate(b, in_value(0).transpose() * g);
      break;
    case OpKind::transpose:
      accumulate(a, g.transpose());
      break;
    case OpKind::add:
      if (needs(0)) accumulate(a, g);
      if (needs(1)) accumulate(b, g);
      break;
    case OpKind::sub:
      if (needs(0)) accumulate(a, g);
      if (needs(1)) accumulate(b, -g);
      break;
    case OpKind::mul:
      if (needs(0)) accumulate(a, g.cwiseProduct(in_value(1)));
      if (needs(1)) accumulate(b, g.cwiseProduct(in_value(0)));
      break;
    case OpKind::neg:
      accumulate(a, -g);
      break;
    case OpKind::reciprocal:
      accumulate(a, -g.cwiseProduct(y.cwiseProduct(y)));
      break;
    case OpKind::relu:
      accumulate(a, g.cwiseProduct(in_value(0).unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; })));
      break;
    case OpKind::clamp_nonneg:
      accumulate(a, g.cwiseProduct(in_value(0).unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; })));
      break;
    case OpKind::clamp_max: {
      const double upper = node.param;
      accumulate(a, g.cwiseProduct(in_value(0).unaryExpr([upper](double v) { return v < upper ? 1.0 : 0.0; })));
      break;
    }
    case OpKind::softplus:
      accumulate(a, g.cwiseProduct(in_value(0).unaryExpr([](double v) { return stable_sigmoid(v); })));
      break;
    case OpKind::sigmoid_scaled: {
      const double tau = node.param;
      accumulate(a, g.cwiseProduct(y.unaryExpr([tau](double s) { return tau * s * (1.0 - s); })));
      break;
    }
    case OpKind::exp:
      accumulate(a, g.cwiseProduct(y));
      break;
    case OpKind::affine:
      accumulate(a, node.param * g);
      break;
    case OpKind::scale_by: {
      const double s = in_value(1)(0, 0);
      if (needs(0)) accumulate(a, s * g);
      if (needs(1)) accumulate(b, Matrix::Constant(1, 1, g.cwiseProduct(in_value(0)).sum()));
      break;
    }
    case OpKind::add_row_bias:
      if (needs(0)) accumulate(a, g);
      if (needs(1)) accumulate(b, g.colwise().sum());
      break;
    case OpKind::repeat_rows:
      accumulate(a, g.colwise().sum());
      break;
    case OpKind::add_diag:
      if (needs(0)) accumulate(a, g);
      if (needs(1)) accumulate(b, Matrix::Constant(1, 1, g.trace()));
      break;
    case OpKind::mean_rows: {
      const Index n = in_value(0).rows();
      accumulate(a, g.replicate(n, 1) / static_cast<double>(n));
      break;
    }
    case OpKind::sum: {
      const Matrix& x = in_value(0);
      accumulate(a, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
      break;
    }
    case OpKind::max_entry: {
      const Matrix& x = in_value(0);
      Matrix adj = Matrix::Zero(x.rows(), x.cols());
      adj.data()[node.index] = g(0, 0);
      accumulate(a, adj);
      break;
    }
    case OpKind::concat_cols:
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        if (!needs(k)) continue;
        const Index begin = node.offsets[k];
        const Index width = node.offsets[k + 1] - begin;
        accumulate(node.inputs[k], g.middleCols(begin, width));
      }
      break;
    case OpKind::slice_rows: {
      const Matrix& x = in_value(0);
      Matrix adj = Matrix::Zero(x.rows(), x.cols());
      adj.middleRows(node.index, g.rows()) = g;
      accumulate(a, adj);
      break;
    }
    case OpKind::solve_spd: {
      Matrix b_adj = cholesky_solve(*node.factor, g);
      if (g_solve_adjoint_fault.load(std::memory_order_relaxed)) b_adj = -b_adj;
      if (needs(1)) accumulate(b, b_adj);
      if (needs(0)) accumulate(a, -b_adj * y.transpose());
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

DiffArray matmul(const DiffArray& a, const DiffArray& b) {
  require_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError(fmt::format("matmul: inner dimensions differ, {} x {}", a.shape_string(), b.shape_string()));
  }
  Matrix out = a.value() * b.value();
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::matmul, {a, b}, std::move(out)));
}

DiffArray transpose(const DiffArray& a) {
  Matrix out = a.value().transpose();
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::transpose, {a}, std::move(out)));
}

DiffArray solve_spd(const DiffArray& a, const DiffArray& b) {
  require_same_tape(a, b, "solve_spd");
  const Matrix& m = a.value();
  if (m.rows() != m.cols() || m.rows() == 0) {
    throw ShapeError(fmt::format("solve_spd: expected a nonempty square matrix, got {}", a.shape_string()));
  }
  if (b.rows() != m.rows()) {
    throw ShapeError(fmt::format("solve_spd: right-hand side {} does not match {}", b.shape_string(), a.shape_string()));
  }
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (!(asym <= 1e-10 * scale)) {
    throw NumericDomainError(fmt::format("solve_spd: matrix is not symmetric (max |A - A^T| = {:.3e})", asym));
  }
  Matrix sym = 0.5 * (m + m.transpose());
  auto factor = std::make_shared<const Matrix>(cholesky_lower(sym));
  Matrix w = cholesky_solve(*factor, b.value());
  auto node = TapeAccess::make(OpKind::solve_spd, {a, b}, std::move(w));
  if (node.requires_grad) node.factor = std::move(factor);
  return TapeAccess::push(a.tape(), std::move(node));
}

DiffArray add(const DiffArray& a, const DiffArray& b) {
  require_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::add, {a, b}, std::move(out)));
}

DiffArray sub(const DiffArray& a, const DiffArray& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::sub, {a, b}, std::move(out)));
}

DiffArray mul(const DiffArray& a, const DiffArray& b) {
  require_same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::mul, {a, b}, std::move(out)));
}

DiffArray neg(const DiffArray& a) {
  Matrix out = -a.value();
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::neg, {a}, std::move(out)));
}

DiffArray reciprocal(const DiffArray& a) {
  const Matrix& x = a.value();
  for (Index i = 0; i < x.size(); ++i) {
    if (!(std::abs(x.data()[i]) >= 1e-300)) {
      throw NumericDomainError(fmt::format("reciprocal: entry {} has magnitude below 1e-300", i));
    }
  }
  Matrix out = x.cwiseInverse();
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::reciprocal, {a}, std::move(out)));
}

DiffArray relu(const DiffArray& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::relu, {a}, std::move(out)));
}

DiffArray softplus(const DiffArray& a) {
  Matrix out = a.value().unaryExpr([](double v) { return stable_softplus(v); });
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::softplus, {a}, std::move(out)));
}

DiffArray sigmoid_scaled(const DiffArray& a, double tau) {
  Matrix out = a.value().unaryExpr([tau](double v) { return stable_sigmoid(tau * v); });
  auto node = TapeAccess::make(OpKind::sigmoid_scaled, {a}, std::move(out));
  node.param = tau;
  return TapeAccess::push(a.tape(), std::move(node));
}

DiffArray exp(const DiffArray& a) {
  Matrix out = a.value().array().exp().matrix();
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::exp, {a}, std::move(out)));
}

DiffArray affine(const DiffArray& a, double scale, double shift) {
  Matrix out = (scale * a.value().array() + shift).matrix();
  auto node = TapeAccess::make(OpKind::affine, {a}, std::move(out));
  node.param = scale;
  return TapeAccess::push(a.tape(), std::move(node));
}

DiffArray clamp_nonneg(const DiffArray& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::clamp_nonneg, {a}, std::move(out)));
}

DiffArray clamp_max(const DiffArray& a, double upper) {
  Matrix out = a.value().cwiseMin(upper);
  auto node = TapeAccess::make(OpKind::clamp_max, {a}, std::move(out));
  node.param = upper;
  return TapeAccess::push(a.tape(), std::move(node));
}

DiffArray scale_by(const DiffArray& a, const DiffArray& s) {
  require_same_tape(a, s, "scale_by");
  require_scalar(s, "scale_by");
  Matrix out = s.value()(0, 0) * a.value();
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::scale_by, {a, s}, std::move(out)));
}

DiffArray add_row_bias(const DiffArray& a, const DiffArray& bias) {
  require_same_tape(a, bias, "add_row_bias");
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ShapeError(fmt::format("add_row_bias: bias {} does not match {}", bias.shape_string(), a.shape_string()));
  }
  Matrix out = a.value().rowwise() + bias.value().row(0);
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::add_row_bias, {a, bias}, std::move(out)));
}

DiffArray repeat_rows(const DiffArray& row, Index n) {
  if (row.rows() != 1) throw ShapeError(fmt::format("repeat_rows: expected a single row, got {}", row.shape_string()));
  if (n < 1) throw ShapeError("repeat_rows: repeat count must be positive");
  Matrix out = row.value().replicate(n, 1);
  return TapeAccess::push(row.tape(), TapeAccess::make(OpKind::repeat_rows, {row}, std::move(out)));
}

DiffArray add_diag(const DiffArray& a, const DiffArray& s) {
  require_same_tape(a, s, "add_diag");
  require_scalar(s, "add_diag");
  if (a.rows() != a.cols()) throw ShapeError(fmt::format("add_diag: expected square matrix, got {}", a.shape_string()));
  Matrix out = a.value();
  out.diagonal().array() += s.value()(0, 0);
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::add_diag, {a, s}, std::move(out)));
}

DiffArray mean_rows(const DiffArray& a) {
  if (a.rows() == 0 || a.cols() == 0) {
    throw EmptyReductionError(fmt::format("mean_rows: empty input {}", a.shape_string()));
  }
  Matrix out = a.value().colwise().mean();
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::mean_rows, {a}, std::move(out)));
}

DiffArray sum(const DiffArray& a) {
  if (a.value().size() == 0) throw EmptyReductionError(fmt::format("sum: empty input {}", a.shape_string()));
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return TapeAccess::push(a.tape(), TapeAccess::make(OpKind::sum, {a}, std::move(out)));
}

DiffArray max_entry(const DiffArray& a) {
  const Matrix& x = a.value();
  if (x.size() == 0) throw EmptyReductionError(fmt::format("max_entry: empty input {}", a.shape_string()));
  Index best = 0;
  for (Index i = 1; i < x.size(); ++i) {
    if (x.data()[i] > x.data()[best]) best = i;
  }
  auto node = TapeAccess::make(OpKind::max_entry, {a}, Matrix::Constant(1, 1, x.data()[best]));
  node.index = best;
  return TapeAccess::push(a.tape(), std::move(node));
}

DiffArray concat_cols(std::span<const DiffArray> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const Index rows = parts.front().rows();
  Tape* tape = parts.front().tape();
  std::vector<Index> offsets{0};
  for (const auto& p : parts) {
    require_same_tape(parts.front(), p, "concat_cols");
    if (p.rows() != rows) {
      throw ShapeError(fmt::format("concat_cols: row counts differ, {} vs {}", parts.front().shape_string(),
                                   p.shape_string()));
    }
    offsets.push_back(offsets.back() + p.cols());
  }
  Matrix out(rows, offsets.back());
  auto node = TapeAccess::make(OpKind::concat_cols, {}, Matrix());
  for (std::size_t k = 0; k < parts.size(); ++k) {
    out.middleCols(offsets[k], parts[k].cols()) = parts[k].value();
    node.inputs.push_back(parts[k].node());
    node.requires_grad = node.requires_grad || parts[k].requires_grad();
  }
  node.value = std::move(out);
  node.offsets = std::move(offsets);
  return TapeAccess::push(tape, std::move(node));
}

DiffArray slice_rows(const DiffArray& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) {
    throw ShapeError(fmt::format("slice_rows: rows [{}, {}) out of range for {}", begin, begin + count,
                                 a.shape_string()));
  }
  Matrix out = a.value().middleRows(begin, count);
  auto node = TapeAccess::make(OpKind::slice_rows, {a}, std::move(out));
  node.index = begin;
  return TapeAccess::push(a.tape(), std::move(node));
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckResult grad_check(const TapedFunction& fn, const std::vector<Matrix>& params, double step) {
  if (!(step > 0.0)) throw NumericDomainError("grad_check: step must be positive");

  std::vector<Matrix> analytic;
  {
    Tape tape;
    std::vector<DiffArray> handles;
    handles.reserve(params.size());
    for (const auto& p : params) handles.push_back(tape.parameter(p));
    DiffArray loss = fn(tape, handles);
    if (!std::isfinite(loss.scalar())) throw NumericDomainError("grad_check: function value is not finite");
    tape.backward(loss);
    for (const auto& h : handles) analytic.push_back(h.grad());
  }

  auto evaluate = [&](const std::vector<Matrix>& values) {
    Tape tape;
    std::vector<DiffArray> handles;
    handles.reserve(values.size());
    for (const auto& v : values) handles.push_back(tape.constant(v));
    const double out = fn(tape, handles).scalar();
    if (!std::isfinite(out)) throw NumericDomainError("grad_check: function value is not finite");
    return out;
  };

  GradCheckResult result;
  std::vector<Matrix> probe = params;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Index i = 0; i < params[k].size(); ++i) {
      const double original = params[k].data()[i];
      probe[k].data()[i] = original + step;
      const double up = evaluate(probe);
      probe[k].data()[i] = original - step;
      const double down = evaluate(probe);
      probe[k].data()[i] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double exact = analytic[k].data()[i];
      const double err = std::abs(exact - numeric) / std::max({1.0, std::abs(exact), std::abs(numeric)});
      if (err > result.max_rel_error) result = GradCheckResult{err, k, i};
    }
  }
  return result;
}

GradCheckResult grad_check(const std::function<DiffArray(Tape&, const DiffArray&)>& fn, const Matrix& theta,
                           double step) {
  return grad_check([&fn](Tape& tape, std::span<const DiffArray> p) { return fn(tape, p[0]); },
                    std::vector<Matrix>{theta}, step);
}

namespace testing {
ScopedSolveAdjointFault::ScopedSolveAdjointFault() { g_solve_adjoint_fault.store(true); }
ScopedSolveAdjointFault::~ScopedSolveAdjointFault() { g_solve_adjoint_fault.store(false); }
}  // namespace testing

}  // namespace metapu::ad
