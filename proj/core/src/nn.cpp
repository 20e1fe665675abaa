#include "metapu/nn.hpp"

#include <fmt/format.h>

#include <cassert>
#include <cmath>

#include "metapu/errors.hpp"

namespace metapu::nn {

Mlp Mlp::init(const std::vector<int>& widths, OutputActivation output, std::mt19937_64& rng) {
  if (widths.size() < 2) throw ConfigError("Mlp::init: need at least input and output widths");
  Mlp mlp;
  mlp.output = output;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int in = widths[l];
    const int out = widths[l + 1];
    if (in < 1 || out < 1) throw ConfigError(fmt::format("Mlp::init: layer {} has non-positive width", l));
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    DenseLayer layer;
    layer.weight.resize(in, out);
    for (ad::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = dist(rng);
    layer.bias = Matrix::Zero(1, out);
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

BoundMlp bind(Tape& tape, const Mlp& mlp, bool trainable) {
  BoundMlp out;
  out.output = mlp.output;
  for (const auto& l : mlp.layers) {
    out.weights.push_back(trainable ? tape.parameter(l.weight) : tape.constant(l.weight));
    out.biases.push_back(trainable ? tape.parameter(l.bias) : tape.constant(l.bias));
  }
  return out;
}

DiffArray forward(const BoundMlp& net, const DiffArray& x) {
  DiffArray h = x;
  const std::size_t n = net.weights.size();
  for (std::size_t l = 0; l < n; ++l) {
    h = ad::add_row_bias(ad::matmul(h, net.weights[l]), net.biases[l]);
    if (l + 1 < n) {
      h = ad::relu(h);
    } else if (net.output == OutputActivation::softplus) {
      h = ad::softplus(h);
    }
  }
  return h;
}

Matrix forward(const Mlp& net, const Matrix& x) {
  Tape tape;
  return forward(bind(tape, net, false), tape.constant(x)).value();
}

Adam::Adam(double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
  if (!(learning_rate > 0.0)) throw ConfigError("Adam: learning rate must be positive");
}

void Adam::step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads) {
  if (params.size() != grads.size()) throw ShapeError("Adam::step: parameter and gradient counts differ");
  if (m_.empty()) {
    for (const Matrix* p : params) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params.size()) throw ShapeError("Adam::step: parameter count changed between steps");
  ++step_count_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& p = *params[k];
    const Matrix& g = grads[k];
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw ShapeError(fmt::format("Adam::step: gradient {} has shape [{}x{}], parameter [{}x{}]", k, g.rows(),
                                   g.cols(), p.rows(), p.cols()));
    }
    m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * g;
    v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * g.cwiseProduct(g);
    const Matrix update = lr_ * ((m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + eps_)).matrix();
    // Bias-corrected Adam steps stay within lr / (1 - beta1) per coordinate.
    assert(update.cwiseAbs().maxCoeff() <= lr_ / (1.0 - beta1_) * (1.0 + 1e-12));
    p -= update;
  }
}

}  // namespace metapu::nn
