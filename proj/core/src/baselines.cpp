#include "metapu/baselines.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "metapu/errors.hpp"

namespace metapu {

namespace {

Matrix stack_rows(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

std::vector<int> signs(const Vector& score) {
  std::vector<int> out(static_cast<std::size_t>(score.size()));
  for (ad::Index i = 0; i < score.size(); ++i) out[static_cast<std::size_t>(i)] = score[i] >= 0.0 ? 1 : -1;
  return out;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<int> sorted_unique(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  if (!v.empty() && v.front() < 0) throw ConfigError("iteration counts must be nonnegative");
  return v;
}

KernelModel kernel_on_support(const SupportSet& s) {
  KernelModel m;
  m.centers = stack_rows(s.positives, s.unlabeled);
  m.bandwidth = median_bandwidth(m.centers);
  return m;
}

enum class NetObjective { nnpu, naive };

NetworkFit fit_network(const SupportSet& s, std::vector<int> iterations, const BaselineConfig& cfg,
                       NetObjective objective) {
  cfg.validate();
  s.validate(static_cast<int>(s.positives.cols()));
  iterations = sorted_unique(std::move(iterations));
  const int d = static_cast<int>(s.positives.cols());
  std::mt19937_64 rng(cfg.seed);
  const int hw = cfg.hidden;
  nn::Mlp net = nn::Mlp::init({d, hw, hw, hw, hw, 1}, nn::OutputActivation::identity, rng);
  nn::Adam opt(cfg.learning_rate);
  const Matrix x = stack_rows(s.positives, s.unlabeled);
  const ad::Index np = s.positives.rows();
  const ad::Index nu = s.unlabeled.rows();
  const double pi = cfg.true_prior;

  NetworkFit fit;
  std::size_t next = 0;
  const int total = iterations.empty() ? 0 : iterations.back();
  for (int it = 0; it <= total; ++it) {
    while (next < iterations.size() && iterations[next] == it) {
      fit.snapshots.push_back(NetworkClassifier{net});
      ++next;
    }
    if (it == total) break;
    Tape tape;
    const nn::BoundMlp bound = nn::bind(tape, net, true);
    const DiffArray g = nn::forward(bound, tape.constant(x));
    const DiffArray gp = ad::slice_rows(g, 0, np);
    const DiffArray gu = ad::slice_rows(g, np, nu);
    DiffArray loss;
    if (objective == NetObjective::nnpu) {
      const DiffArray risk_p_pos = ad::affine(ad::sum(ad::sigmoid_scaled(ad::neg(gp), 1.0)), pi / np, 0.0);
      const DiffArray risk_p_neg = ad::affine(ad::sum(ad::sigmoid_scaled(gp, 1.0)), pi / np, 0.0);
      const DiffArray risk_u_neg = ad::affine(ad::sum(ad::sigmoid_scaled(gu, 1.0)), 1.0 / nu, 0.0);
      loss = ad::add(risk_p_pos, ad::relu(ad::sub(risk_u_neg, risk_p_neg)));
    } else {
      const double scale = 1.0 / static_cast<double>(np + nu);
      loss = ad::affine(ad::add(ad::sum(ad::sigmoid_scaled(ad::neg(gp), 1.0)), ad::sum(ad::sigmoid_scaled(gu, 1.0))),
                        scale, 0.0);
    }
    fit.objective_trace.push_back(loss.scalar());
    tape.backward(loss);
    std::vector<Matrix*> params;
    std::vector<Matrix> grads;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      params.push_back(&net.layers[l].weight);
      params.push_back(&net.layers[l].bias);
      grads.push_back(bound.weights[l].grad());
      grads.push_back(bound.biases[l].grad());
    }
    opt.step(params, grads);
  }
  return fit;
}

}  // namespace

const char* to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::naive: return "naive";
    case BaselineKind::dre: return "dre";
    case BaselineKind::upu: return "upu";
    case BaselineKind::nnpu: return "nnpu";
  }
  return "unknown";
}

BaselineKind baseline_kind_from_string(const std::string& name) {
  if (name == "naive") return BaselineKind::naive;
  if (name == "dre") return BaselineKind::dre;
  if (name == "upu") return BaselineKind::upu;
  if (name == "nnpu") return BaselineKind::nnpu;
  throw ConfigError(fmt::format("unknown baseline '{}' (expected naive, dre, upu or nnpu)", name));
}

void BaselineConfig::validate() const {
  if (lambda_grid.empty() || iterations_grid.empty()) throw ConfigError("baseline config: grids must be nonempty");
  if (!(true_prior > 0.0 && true_prior <= 1.0)) throw ConfigError("baseline config: true_prior must lie in (0, 1]");
  if (hidden < 1) throw ConfigError("baseline config: hidden width must be positive");
}

double median_bandwidth(const Matrix& points) {
  const ad::Index n = points.rows();
  if (n < 2) throw ConfigError("median_bandwidth: need at least two points");
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (ad::Index i = 0; i < n; ++i) {
    for (ad::Index j = i + 1; j < n; ++j) dist.push_back((points.row(i) - points.row(j)).norm());
  }
  std::sort(dist.begin(), dist.end());
  const std::size_t m = dist.size();
  const double median = m % 2 == 1 ? dist[m / 2] : 0.5 * (dist[m / 2 - 1] + dist[m / 2]);
  if (median > 0.0) return median;
  const auto positive = std::find_if(dist.begin(), dist.end(), [](double v) { return v > 0.0; });
  if (positive == dist.end()) throw DegenerateGeometryError("median_bandwidth: all points coincide");
  return *positive;
}

Matrix KernelModel::features(const Matrix& x) const {
  if (x.cols() != centers.cols()) {
    throw ShapeError(fmt::format("kernel features: expected {} columns, got {}", centers.cols(), x.cols()));
  }
  const double denom = 2.0 * bandwidth * bandwidth;
  const Eigen::VectorXd xn = x.rowwise().squaredNorm();
  const Eigen::RowVectorXd cn = centers.rowwise().squaredNorm().transpose();
  Matrix sq = (-2.0 * x * centers.transpose()).colwise() + xn;
  sq.rowwise() += cn;
  return (-(sq.cwiseMax(0.0)) / denom).array().exp().matrix();
}

Vector KernelModel::score(const Matrix& x) const { return features(x) * weights; }

std::vector<int> DreClassifier::predict(const Matrix& x) const {
  return classify_ratios(ratio(x), prior);
}

std::vector<int> KernelScoreClassifier::predict(const Matrix& x) const { return signs(model.score(x)); }

std::vector<int> NetworkClassifier::predict(const Matrix& x) const {
  const Matrix g = nn::forward(net, x);
  return signs(g.col(0));
}

DreClassifier fit_dre_kernel(const SupportSet& s, double lambda, double true_prior) {
  s.validate(static_cast<int>(s.positives.cols()));
  if (!(lambda > 0.0)) throw ConfigError("fit_dre_kernel: lambda must be positive");
  DreClassifier c;
  c.prior = true_prior;
  c.model = kernel_on_support(s);
  const Matrix phi_p = c.model.features(s.positives);
  const Matrix phi_u = c.model.features(s.unlabeled);
  Tape tape;
  const DiffArray k = tape.constant(phi_p.colwise().mean().transpose());
  const Matrix gram = phi_u.transpose() * phi_u / static_cast<double>(phi_u.rows());
  const DiffArray a = ad::add_diag(tape.constant(gram), tape.constant(Matrix::Constant(1, 1, lambda)));
  c.model.weights = ad::clamp_nonneg(ad::solve_spd(a, k)).value().col(0);
  return c;
}

UpuFit fit_upu(const SupportSet& s, double lambda, std::vector<int> iterations, const BaselineConfig& cfg) {
  cfg.validate();
  s.validate(static_cast<int>(s.positives.cols()));
  if (!(lambda >= 0.0)) throw ConfigError("fit_upu: lambda must be nonnegative");
  iterations = sorted_unique(std::move(iterations));
  KernelModel model = kernel_on_support(s);
  const Matrix phi_p = model.features(s.positives);
  const Matrix phi_u = model.features(s.unlabeled);
  const double np = static_cast<double>(phi_p.rows());
  const double nu = static_cast<double>(phi_u.rows());
  const double pi = cfg.true_prior;
  model.weights = Vector::Zero(model.centers.rows());

  UpuFit fit;
  std::size_t next = 0;
  const int total = iterations.empty() ? 0 : iterations.back();
  for (int it = 0; it <= total; ++it) {
    while (next < iterations.size() && iterations[next] == it) {
      fit.snapshots.push_back(KernelScoreClassifier{model});
      ++next;
    }
    if (it == total) break;
    const Vector gp = phi_p * model.weights;
    const Vector gu = phi_u * model.weights;
    double risk = 0.0;
    Vector dp(gp.size());
    for (ad::Index i = 0; i < gp.size(); ++i) {
      const double sg = sigmoid(gp[i]);
      risk += pi * ((1.0 - sg) - sg) / np;
      dp[i] = -2.0 * pi * sg * (1.0 - sg) / np;
    }
    Vector du(gu.size());
    for (ad::Index i = 0; i < gu.size(); ++i) {
      const double sg = sigmoid(gu[i]);
      risk += sg / nu;
      du[i] = sg * (1.0 - sg) / nu;
    }
    fit.risk_trace.push_back(risk);
    const Vector grad = phi_p.transpose() * dp + phi_u.transpose() * du + lambda * model.weights;
    model.weights -= cfg.upu_step * grad;
  }
  return fit;
}

NetworkFit fit_nnpu(const SupportSet& s, std::vector<int> iterations, const BaselineConfig& cfg) {
  return fit_network(s, std::move(iterations), cfg, NetObjective::nnpu);
}

NetworkFit fit_naive(const SupportSet& s, std::vector<int> iterations, const BaselineConfig& cfg) {
  return fit_network(s, std::move(iterations), cfg, NetObjective::naive);
}

std::vector<GridPrediction> run_baseline_grid(const SupportSet& s, const Matrix& test_x, const BaselineConfig& cfg) {
  cfg.validate();
  std::vector<GridPrediction> out;
  const std::vector<int> iters = sorted_unique(cfg.iterations_grid);
  switch (cfg.kind) {
    case BaselineKind::dre:
      for (double lambda : cfg.lambda_grid) {
        out.push_back({fmt::format("lambda={:g}", lambda), fit_dre_kernel(s, lambda, cfg.true_prior).predict(test_x)});
      }
      break;
    case BaselineKind::upu:
      for (double lambda : cfg.lambda_grid) {
        const UpuFit fit = fit_upu(s, lambda, iters, cfg);
        for (std::size_t k = 0; k < iters.size(); ++k) {
          out.push_back({fmt::format("lambda={:g};iterations={}", lambda, iters[k]), fit.snapshots[k].predict(test_x)});
        }
      }
      break;
    case BaselineKind::nnpu:
    case BaselineKind::naive: {
      const NetworkFit fit = cfg.kind == BaselineKind::nnpu ? fit_nnpu(s, iters, cfg) : fit_naive(s, iters, cfg);
      for (std::size_t k = 0; k < iters.size(); ++k) {
        out.push_back({fmt::format("iterations={}", iters[k]), fit.snapshots[k].predict(test_x)});
      }
      break;
    }
  }
  return out;
}

}  // namespace metapu
