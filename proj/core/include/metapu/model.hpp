#pragma once

// Meta-learned PU classifier.
//
// Given a support set of positive and unlabeled instances, the model
//   1. summarizes each part into a task representation z = g(mean f(x)),
//   2. embeds instances with h([x, z_p, z_u]) > 0,
//   3. fits linear density-ratio weights in closed form,
//        w = max(0, (K + lambda I)^-1 k),
//   4. estimates the positive prior as min(1, 1 / max_S r(x)),
//   5. classifies with sign(prior * r(x) - 0.5).
// Every step is recorded on an autodiff tape so the query risk can be
// differentiated with respect to the shared networks and lambda.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "metapu/autodiff.hpp"
#include "metapu/nn.hpp"

namespace metapu {

using ad::DiffArray;
using ad::Matrix;
using ad::Tape;
using Vector = Eigen::VectorXd;

struct ModelDims {
  int input_dim = 2;
  int repr_dim = 32;    // K, size of z_p and z_u
  int embed_dim = 100;  // M, size of h's output
  int hidden = 100;     // width of every hidden layer
  bool use_task_repr = true;
};

/// Shared parameters: networks f, g, h and log(lambda).
struct MetaParams {
  ModelDims dims;
  nn::Mlp f;  // input_dim -> hidden -> hidden -> hidden
  nn::Mlp g;  // hidden -> hidden -> repr_dim
  nn::Mlp h;  // input_dim (+ 2 repr_dim) -> hidden x3 -> embed_dim, softplus
  Matrix log_lambda = Matrix::Zero(1, 1);

  static MetaParams init(const ModelDims& dims, double lambda_init, std::uint64_t seed);

  double lambda() const;

  /// Visits every learnable array in a fixed order: f, g, h layers
  /// (weight then bias) followed by log_lambda.
  void for_each_array(const std::function<void(const std::string&, const Matrix&)>& fn) const;
  std::vector<Matrix*> mutable_arrays();
  std::vector<Matrix> arrays() const;
  std::size_t parameter_count() const;
};

/// Positive and unlabeled instances available for adaptation.
struct SupportSet {
  Matrix positives;  // [Np x D]
  Matrix unlabeled;  // [Nu x D]

  void validate(int input_dim) const;
};

/// Labeled instances used to score an adapted classifier.
struct QuerySet {
  Matrix positives;
  Matrix negatives;

  double pi_q() const;
  void validate(int input_dim) const;
};

/// Outcome of adapting to one support set.
struct AdaptedClassifier {
  Vector z_p;
  Vector z_u;
  Vector w_hat;  // >= 0 entrywise
  double pi_hat = 1.0;
  const MetaParams* theta = nullptr;  // not owned; must outlive the classifier
};

/// Which prior multiplies the ratio inside the decision rule.
enum class PriorMode { estimated, none, given };

// ---------------------------------------------------------------------------
// Taped interface (training and gradient checks)

struct BoundParams {
  nn::BoundMlp f, g, h;
  DiffArray log_lambda;
  bool use_task_repr = true;
};

BoundParams bind(Tape& tape, const MetaParams& theta, bool trainable);
/// Same as bind, but reuses existing tape handles (used by grad_check).
BoundParams bind_from_handles(const MetaParams& layout, std::span<const DiffArray> handles);
/// Gradients of every array in for_each_array order after tape.backward().
std::vector<Matrix> gradients(const BoundParams& bound);

struct TaskRepr {
  DiffArray z_p;  // [1 x K]
  DiffArray z_u;
};

struct TapedAdaptation {
  TaskRepr repr;
  DiffArray w_tilde;  // [M x 1] unclamped solution
  DiffArray w_hat;    // [M x 1]
  DiffArray pi_hat;   // [1 x 1]
};

TaskRepr encode_task(Tape& tape, const BoundParams& theta, const SupportSet& s);
/// h([x, z_p, z_u]) for every row of x. Without task representations h sees x only.
DiffArray embed(const BoundParams& theta, const DiffArray& x, const TaskRepr& repr);
/// Closed-form ridge fit: clamp_nonneg(solve(K + lambda I, k)) with
/// k = mean of positive embeddings and K = mean outer product of unlabeled ones.
/// Returns {w_tilde, w_hat}.
std::pair<DiffArray, DiffArray> fit_density_ratio(const DiffArray& h_pos, const DiffArray& h_unl,
                                                  const DiffArray& lambda);
/// min(1, 1 / max(ratios)); throws DegenerateRatioError if the max is below 1e-12.
DiffArray estimate_prior(const DiffArray& ratios);
TapedAdaptation adapt(Tape& tape, const BoundParams& theta, const SupportSet& s);
/// Sigmoid-smoothed query risk with u(x) = prior * r(x) - 0.5.
DiffArray smoothed_risk(Tape& tape, const BoundParams& theta, const TapedAdaptation& c, const QuerySet& q,
                        double tau);

// ---------------------------------------------------------------------------
// Value interface (evaluation)

AdaptedClassifier adapt(const SupportSet& s, const MetaParams& theta);
/// Nonnegative ratio estimates w_hat^T h([x, z_p, z_u]).
Vector ratio(const Matrix& x, const AdaptedClassifier& c);
/// Labels in {+1, -1}; +1 iff prior * r(x) - 0.5 >= 0.
std::vector<int> classify(const Matrix& x, const AdaptedClassifier& c, PriorMode mode = PriorMode::estimated,
                          double given_prior = 0.0);
/// Decision rule on precomputed ratios.
std::vector<int> classify_ratios(const Vector& ratios, double prior);
/// pi_Q * FNR + (1 - pi_Q) * FPR.
double zero_one_risk(const QuerySet& q, const AdaptedClassifier& c, PriorMode mode = PriorMode::estimated,
                     double given_prior = 0.0);
double smoothed_risk(const QuerySet& q, const AdaptedClassifier& c, double tau);

}  // namespace metapu
