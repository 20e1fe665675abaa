#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// Every DiffArray is a handle to a node on a Tape. Nodes created with
// Tape::constant never receive gradients; nodes created with
// Tape::parameter (and anything computed from them) do. A tape supports
// exactly one backward pass; call reset() before recording a new graph.

#include <Eigen/Core>

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace metapu::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

class Tape;

enum class OpKind {
  leaf,
  matmul,
  transpose,
  add,
  sub,
  mul,
  neg,
  reciprocal,
  relu,
  softplus,
  sigmoid_scaled,
  exp,
  affine,
  scale_by,
  add_row_bias,
  repeat_rows,
  add_diag,
  mean_rows,
  sum,
  max_entry,
  concat_cols,
  slice_rows,
  clamp_nonneg,
  clamp_max,
  solve_spd,
};

const char* to_string(OpKind kind);

class DiffArray {
 public:
  DiffArray() = default;

  const Matrix& value() const;
  /// Gradient accumulated by the last backward pass; zeros if none reached this node.
  const Matrix& grad() const;

  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  std::string shape_string() const;
  double scalar() const;

  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return id_; }

 private:
  friend class Tape;
  friend struct TapeAccess;
  DiffArray(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  DiffArray constant(Matrix value);
  DiffArray parameter(Matrix value);

  /// Seeds d(loss)/d(loss) = 1 and propagates adjoints to every reachable node.
  void backward(const DiffArray& loss);

  /// Drops all nodes. Outstanding DiffArray handles become dangling.
  void reset();

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

 private:
  friend class DiffArray;
  friend struct TapeAccess;

  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<int> inputs;
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    double param = 0.0;
    Index index = 0;
    std::vector<Index> offsets;
    std::shared_ptr<const Matrix> factor;  // lower Cholesky factor
  };

  int push(Node node);
  const Node& at(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Node& at(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  void accumulate(int id, const Matrix& adjoint);
  const Matrix& grad_of(int id);
  void propagate(int id);

  // deque keeps node references stable while the graph grows.
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

// Linear algebra.
DiffArray matmul(const DiffArray& a, const DiffArray& b);
DiffArray transpose(const DiffArray& a);
/// Solves A w = b for symmetric positive-definite A via Cholesky.
DiffArray solve_spd(const DiffArray& a, const DiffArray& b);

// Elementwise.
DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray neg(const DiffArray& a);
DiffArray reciprocal(const DiffArray& a);
DiffArray relu(const DiffArray& a);
DiffArray softplus(const DiffArray& a);
/// 1 / (1 + exp(-tau * a))
DiffArray sigmoid_scaled(const DiffArray& a, double tau);
DiffArray exp(const DiffArray& a);
/// scale * a + shift with constant scale and shift.
DiffArray affine(const DiffArray& a, double scale, double shift);
DiffArray clamp_nonneg(const DiffArray& a);
/// min(a, upper) entrywise.
DiffArray clamp_max(const DiffArray& a, double upper);

// Broadcasting helpers.
/// Multiplies every entry of a by the 1x1 array s.
DiffArray scale_by(const DiffArray& a, const DiffArray& s);
/// Adds the 1xm row to every row of the nxm array a.
DiffArray add_row_bias(const DiffArray& a, const DiffArray& bias);
DiffArray repeat_rows(const DiffArray& row, Index n);
/// a + s * I for square a and 1x1 s.
DiffArray add_diag(const DiffArray& a, const DiffArray& s);

// Reductions and reshaping.
DiffArray mean_rows(const DiffArray& a);
DiffArray sum(const DiffArray& a);
/// Maximum entry; the adjoint goes to the lowest index attaining it.
DiffArray max_entry(const DiffArray& a);
DiffArray concat_cols(std::span<const DiffArray> parts);
DiffArray slice_rows(const DiffArray& a, Index begin, Index count);

/// Result of a finite-difference gradient check.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_array = 0;
  Index worst_entry = 0;
};

/// Scalar-valued function recorded on a tape from a list of parameter arrays.
using TapedFunction = std::function<DiffArray(Tape&, std::span<const DiffArray>)>;

/// Compares the reverse-mode gradient of fn against central differences.
/// The error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckResult grad_check(const TapedFunction& fn, const std::vector<Matrix>& params, double step);

/// Single-array convenience overload.
GradCheckResult grad_check(const std::function<DiffArray(Tape&, const DiffArray&)>& fn,
                           const Matrix& theta, double step);

namespace testing {
/// Negates the b-adjoint of solve_spd while alive. Used as a negative control
/// for the gradient-check suite.
class ScopedSolveAdjointFault {
 public:
  ScopedSolveAdjointFault();
  ~ScopedSolveAdjointFault();
  ScopedSolveAdjointFault(const ScopedSolveAdjointFault&) = delete;
  ScopedSolveAdjointFault& operator=(const ScopedSolveAdjointFault&) = delete;
};
}  // namespace testing

}  // namespace metapu::ad
