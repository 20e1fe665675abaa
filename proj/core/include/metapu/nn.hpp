#pragma once

// Feed-forward networks built on the autodiff tape.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "metapu/autodiff.hpp"

namespace metapu::nn {

using ad::DiffArray;
using ad::Matrix;
using ad::Tape;

enum class OutputActivation { identity, softplus };

struct DenseLayer {
  Matrix weight;  // [in x out]
  Matrix bias;    // [1 x out]
};

/// Multi-layer perceptron with ReLU hidden activations.
struct Mlp {
  std::vector<DenseLayer> layers;
  OutputActivation output = OutputActivation::identity;

  /// widths = {in, hidden..., out}. Glorot-uniform weights, zero biases.
  static Mlp init(const std::vector<int>& widths, OutputActivation output, std::mt19937_64& rng);

  int input_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().weight.rows()); }
  int output_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().weight.cols()); }
  std::size_t parameter_count() const;
};

/// Tape handles for one Mlp.
struct BoundMlp {
  std::vector<DiffArray> weights;
  std::vector<DiffArray> biases;
  OutputActivation output = OutputActivation::identity;
};

BoundMlp bind(Tape& tape, const Mlp& mlp, bool trainable);

DiffArray forward(const BoundMlp& net, const DiffArray& x);

/// Untaped forward pass.
Matrix forward(const Mlp& net, const Matrix& x);

/// Adam with bias correction.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);

  /// Applies one update. params and grads are matched by position and
  /// must keep the same shapes across calls.
  void step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads);

  long step_count() const { return step_count_; }
  double learning_rate() const { return lr_; }
  const std::vector<Matrix>& first_moment() const { return m_; }
  const std::vector<Matrix>& second_moment() const { return v_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long step_count_ = 0;
  std::vector<Matrix> m_, v_;
};

}  // namespace metapu::nn
