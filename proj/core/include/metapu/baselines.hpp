#pragma once

// Per-task PU baselines fitted on a support set alone, all given the true
// class prior: Naive (unlabeled treated as negative), kernel density-ratio
// estimation (DRE), unbiased PU (uPU) and non-negative PU (nnPU).

#include <cstdint>
#include <string>
#include <vector>

#include "metapu/model.hpp"
#include "metapu/nn.hpp"

namespace metapu {

enum class BaselineKind { naive, dre, upu, nnpu };

const char* to_string(BaselineKind kind);
BaselineKind baseline_kind_from_string(const std::string& name);

/// Median of all pairwise Euclidean distances; falls back to the smallest
/// positive distance when the median is zero.
double median_bandwidth(const Matrix& points);

/// Gaussian-kernel linear model exp(-|x - c|^2 / (2 bandwidth^2)).
struct KernelModel {
  Matrix centers;
  double bandwidth = 1.0;
  Vector weights;

  Matrix features(const Matrix& x) const;
  Vector score(const Matrix& x) const;
};

struct BaselineConfig {
  BaselineKind kind = BaselineKind::nnpu;
  std::vector<double> lambda_grid{1e-3, 1e-2, 1e-1, 1.0, 10.0};
  std::vector<int> iterations_grid{100, 500, 1000};
  double true_prior = 0.5;
  std::uint64_t seed = 0;
  int hidden = 100;
  double learning_rate = 1e-3;  // Adam, neural baselines
  double upu_step = 0.1;        // gradient descent, uPU

  void validate() const;
};

/// Density-ratio classifier sign(prior * r(x) - 0.5) with a kernel ratio model.
struct DreClassifier {
  KernelModel model;  // weights are the clamped ridge solution
  double prior = 0.5;

  Vector ratio(const Matrix& x) const { return model.score(x); }
  std::vector<int> predict(const Matrix& x) const;
};

/// Classifier sign(g(x)) with a kernel-linear score.
struct KernelScoreClassifier {
  KernelModel model;
  std::vector<int> predict(const Matrix& x) const;
};

/// Classifier sign(g(x)) with g a ReLU network D -> hidden x4 -> 1.
struct NetworkClassifier {
  nn::Mlp net;
  std::vector<int> predict(const Matrix& x) const;
};

DreClassifier fit_dre_kernel(const SupportSet& s, double lambda, double true_prior);

/// Unbiased PU risk pi E_p[l(g,+1)] - pi E_p[l(g,-1)] + E_u[l(g,-1)] + lambda/2 |w|^2
/// with the sigmoid loss l(g, y) = 1 / (1 + exp(y g)), minimized by full-batch
/// gradient descent. Returns one classifier per requested iteration count
/// (ascending), and the per-iteration risk trace (without the regularizer).
struct UpuFit {
  std::vector<KernelScoreClassifier> snapshots;
  std::vector<double> risk_trace;
};
UpuFit fit_upu(const SupportSet& s, double lambda, std::vector<int> iterations, const BaselineConfig& cfg);

struct NetworkFit {
  std::vector<NetworkClassifier> snapshots;  // one per requested iteration count, ascending
  std::vector<double> objective_trace;
};
/// Non-negative PU risk pi R_p^+ + max(0, R_u^- - pi R_p^-), Adam.
NetworkFit fit_nnpu(const SupportSet& s, std::vector<int> iterations, const BaselineConfig& cfg);
/// Sigmoid loss with S^p labeled +1 and S^u labeled -1, Adam.
NetworkFit fit_naive(const SupportSet& s, std::vector<int> iterations, const BaselineConfig& cfg);

/// Predictions for every point of one hyperparameter setting.
struct GridPrediction {
  std::string hyperparam;  // e.g. "lambda=0.1" or "iterations=500"
  std::vector<int> labels;
};

/// Fits the configured baseline at every grid point and predicts test_x.
/// Grid order is deterministic: lambda-major, then iterations ascending.
std::vector<GridPrediction> run_baseline_grid(const SupportSet& s, const Matrix& test_x, const BaselineConfig& cfg);

}  // namespace metapu
