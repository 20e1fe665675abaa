#include "metapu/evaluation.hpp"

#include <fmt/format.h>

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <mutex>
#include <tuple>

#include "metapu/errors.hpp"
#include "metapu/parallel.hpp"

namespace metapu {

namespace {

const std::vector<std::string> kColumns{"format_version", "split_id",  "task_id",  "method",
                                        "ablation",       "n_support_pos", "target_prior", "accuracy",
                                        "prior_rmse",     "seed",      "hyperparam", "best_over_grid"};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <typename T>
T parse_number(const std::string& text, std::size_t line, const std::string& column) {
  std::istringstream in(text);
  in.imbue(std::locale::classic());
  T value{};
  in >> value;
  if (in.fail() || !in.eof()) {
    throw ParseError(line, fmt::format("column '{}': cannot parse '{}'", column, text));
  }
  return value;
}

struct Cell {
  std::string method, ablation;
  int split = 0;
  int task = 0;
  int support = 0;
  double prior = 0.0;
  auto key() const { return std::tie(method, ablation, split, task, support, prior); }
  bool operator<(const Cell& o) const { return key() < o.key(); }
};

MeanStderr across_splits(const std::map<int, std::pair<double, std::size_t>>& per_split) {
  MeanStderr m;
  m.splits = per_split.size();
  if (m.splits == 0) return m;
  std::vector<double> means;
  for (const auto& [split, acc] : per_split) means.push_back(acc.first / static_cast<double>(acc.second));
  double sum = 0.0;
  for (double v : means) sum += v;
  m.mean = sum / static_cast<double>(means.size());
  if (means.size() > 1) {
    double ss = 0.0;
    for (double v : means) ss += (v - m.mean) * (v - m.mean);
    const double sd = std::sqrt(ss / static_cast<double>(means.size() - 1));
    m.stderr_ = sd / std::sqrt(static_cast<double>(means.size()));
  }
  return m;
}

}  // namespace

const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_z: return "no_z";
    case Ablation::no_prior: return "no_prior";
    case Ablation::true_prior: return "true_prior";
  }
  return "unknown";
}

Ablation ablation_from_string(const std::string& name) {
  if (name == "full") return Ablation::full;
  if (name == "no_z") return Ablation::no_z;
  if (name == "no_prior") return Ablation::no_prior;
  if (name == "true_prior") return Ablation::true_prior;
  throw ConfigError(fmt::format("unknown ablation '{}' (expected full, no_z, no_prior or true_prior)", name));
}

void EvalGrid::validate() const {
  if (support_sizes.empty() || priors.empty()) throw ConfigError("evaluation grid: support sizes and priors must be nonempty");
  for (int s : support_sizes) {
    if (s < 1 || s >= total_support) {
      throw ConfigError(fmt::format("evaluation grid: support size {} must lie in [1, {})", s, total_support));
    }
  }
  for (double p : priors) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError(fmt::format("evaluation grid: prior {} must lie in (0, 1)", p));
  }
  if (n_test < 1 || repeats < 1) throw ConfigError("evaluation grid: n_test and repeats must be positive");
}

TargetEpisode grid_episode(const TaskDataset& task, const EvalGrid& grid, std::size_t support_index,
                           std::size_t prior_index, int repeat, std::uint64_t seed) {
  const std::uint64_t stream =
      ((static_cast<std::uint64_t>(task.id) * 64 + support_index) * 64 + prior_index) * 4096 +
      static_cast<std::uint64_t>(repeat);
  Rng rng = task_rng(seed, stream);
  const std::optional<double> prior =
      task.kind == GeneratorKind::external ? std::nullopt : std::optional<double>(grid.priors[prior_index]);
  return make_target_episode(task, grid.support_sizes[support_index], grid.total_support, prior, grid.n_test, rng);
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.size() != labels.size()) {
    throw ShapeError(fmt::format("accuracy: {} predictions for {} labels", predicted.size(), labels.size()));
  }
  if (labels.empty()) throw EmptyReductionError("accuracy: no labels");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<ResultRow> evaluate_model(const MetaParams& theta, const std::vector<TaskDataset>& targets,
                                      const EvalGrid& grid, Ablation ablation, int split_id, std::uint64_t seed,
                                      int threads) {
  grid.validate();
  if (ablation == Ablation::no_z && theta.dims.use_task_repr) {
    throw ConfigError("evaluate_model: the no_z ablation needs a model trained without task representations");
  }
  const std::size_t per_task = grid.episodes_per_task();
  std::vector<ResultRow> rows(targets.size() * per_task);
  parallel_for(targets.size(), threads, [&](std::size_t t) {
    const TaskDataset& task = targets[t];
    std::size_t slot = t * per_task;
    for (std::size_t si = 0; si < grid.support_sizes.size(); ++si) {
      for (std::size_t pi = 0; pi < grid.priors.size(); ++pi) {
        for (int r = 0; r < grid.repeats; ++r) {
          const TargetEpisode ep = grid_episode(task, grid, si, pi, r, seed);
          ResultRow row;
          row.split_id = split_id;
          row.task_id = task.id;
          row.method = "ours";
          row.ablation = to_string(ablation);
          row.n_support_pos = grid.support_sizes[si];
          row.target_prior = ep.prior;
          row.seed = seed;
          try {
            const AdaptedClassifier c = adapt(ep.support, theta);
            const PriorMode mode = ablation == Ablation::no_prior     ? PriorMode::none
                                   : ablation == Ablation::true_prior ? PriorMode::given
                                                                      : PriorMode::estimated;
            row.accuracy = accuracy(classify(ep.test_x, c, mode, ep.prior), ep.test_labels);
            if (ablation != Ablation::true_prior) row.prior_error = std::abs(c.pi_hat - ep.prior);
          } catch (const DegenerateRatioError&) {
            // An all-zero ratio labels every test point negative.
            row.accuracy = accuracy(std::vector<int>(ep.test_labels.size(), -1), ep.test_labels);
            if (ablation != Ablation::true_prior) row.prior_error = std::abs(1.0 - ep.prior);
          }
          rows[slot++] = std::move(row);
        }
      }
    }
  });
  return rows;
}

std::vector<ResultRow> evaluate_baseline(BaselineKind kind, const std::vector<TaskDataset>& targets,
                                         const EvalGrid& grid, const BaselineConfig& base, int split_id,
                                         std::uint64_t seed, int threads) {
  grid.validate();
  const std::size_t per_task = grid.episodes_per_task();
  const std::size_t n = targets.size() * per_task;
  std::vector<ResultRow> rows(n);
  std::vector<std::vector<double>> acc(n);
  std::vector<std::string> names;
  std::mutex names_mutex;
  parallel_for(targets.size(), threads, [&](std::size_t t) {
    const TaskDataset& task = targets[t];
    std::size_t slot = t * per_task;
    for (std::size_t si = 0; si < grid.support_sizes.size(); ++si) {
      for (std::size_t pi = 0; pi < grid.priors.size(); ++pi) {
        for (int r = 0; r < grid.repeats; ++r) {
          const TargetEpisode ep = grid_episode(task, grid, si, pi, r, seed);
          BaselineConfig cfg = base;
          cfg.kind = kind;
          cfg.true_prior = ep.prior;
          cfg.seed = base.seed ^ (seed * 0x9e3779b97f4a7c15ULL + slot);
          const auto grid_preds = run_baseline_grid(ep.support, ep.test_x, cfg);
          {
            std::lock_guard lock(names_mutex);
            if (names.empty()) {
              for (const auto& g : grid_preds) names.push_back(g.hyperparam);
            }
          }
          for (const auto& g : grid_preds) acc[slot].push_back(accuracy(g.labels, ep.test_labels));
          ResultRow& row = rows[slot];
          row.split_id = split_id;
          row.task_id = task.id;
          row.method = to_string(kind);
          row.ablation = "none";
          row.n_support_pos = grid.support_sizes[si];
          row.target_prior = ep.prior;
          row.seed = seed;
          row.best_over_grid = true;
          ++slot;
        }
      }
    }
  });
  if (n == 0) return rows;
  std::size_t best = 0;
  double best_mean = -std::numeric_limits<double>::infinity();
  for (std::size_t h = 0; h < names.size(); ++h) {
    double total = 0.0;
    for (const auto& a : acc) total += a[h];
    if (total / static_cast<double>(n) > best_mean) {
      best_mean = total / static_cast<double>(n);
      best = h;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    rows[i].accuracy = acc[i][best];
    rows[i].hyperparam = names[best];
  }
  return rows;
}

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  for (std::size_t i = 0; i < kColumns.size(); ++i) out << (i ? "," : "") << kColumns[i];
  out << '\n';
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{},{},{},{:.17g},{:.17g},{},{},{},{}\n", kResultFormatVersion, r.split_id, r.task_id,
                       r.method, r.ablation, r.n_support_pos, r.target_prior, r.accuracy,
                       r.prior_error ? fmt::format("{:.17g}", *r.prior_error) : std::string(), r.seed, r.hyperparam,
                       r.best_over_grid ? "true" : "false");
  }
}

std::vector<ResultRow> read_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("result CSV: missing header row");
  const auto header = split_csv(line);
  for (std::size_t i = 0; i < kColumns.size(); ++i) {
    if (i >= header.size() || header[i] != kColumns[i]) {
      throw SchemaError(fmt::format("result CSV: expected column '{}' at position {}, found '{}'", kColumns[i], i + 1,
                                    i < header.size() ? header[i] : std::string("<missing>")));
    }
  }
  if (header.size() != kColumns.size()) {
    throw SchemaError(fmt::format("result CSV: unexpected column '{}'", header[kColumns.size()]));
  }
  std::vector<ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != kColumns.size()) {
      throw ParseError(lineno,
                       fmt::format("expected {} cells, found {}", kColumns.size(), cells.size()));
    }
    const int version = parse_number<int>(cells[0], lineno, kColumns[0]);
    if (version != kResultFormatVersion) {
      throw SchemaError(fmt::format("result CSV line {}: format_version {} is not supported (expected {})", lineno,
                                    version, kResultFormatVersion));
    }
    ResultRow r;
    r.split_id = parse_number<int>(cells[1], lineno, kColumns[1]);
    r.task_id = parse_number<int>(cells[2], lineno, kColumns[2]);
    r.method = cells[3];
    r.ablation = cells[4];
    r.n_support_pos = parse_number<int>(cells[5], lineno, kColumns[5]);
    r.target_prior = parse_number<double>(cells[6], lineno, kColumns[6]);
    r.accuracy = parse_number<double>(cells[7], lineno, kColumns[7]);
    if (!cells[8].empty()) r.prior_error = parse_number<double>(cells[8], lineno, kColumns[8]);
    r.seed = parse_number<std::uint64_t>(cells[9], lineno, kColumns[9]);
    r.hyperparam = cells[10];
    if (cells[11] != "true" && cells[11] != "false") {
      throw ParseError(lineno, fmt::format("column 'best_over_grid': expected true or false, got '{}'", cells[11]));
    }
    r.best_over_grid = cells[11] == "true";
    if (!(r.accuracy >= 0.0 && r.accuracy <= 1.0)) {
      throw ParseError(lineno, "column 'accuracy': value outside [0, 1]");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MethodSummary> summarize(const std::vector<ResultRow>& rows) {
  // Cell means first, so unequal repeat counts do not reweight cells.
  std::map<Cell, std::pair<double, std::size_t>> cells;
  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> sq_error;
  for (const auto& r : rows) {
    auto& c = cells[Cell{r.method, r.ablation, r.split_id, r.task_id, r.n_support_pos, r.target_prior}];
    c.first += r.accuracy;
    c.second += 1;
    if (r.prior_error) {
      auto& e = sq_error[{r.method, r.ablation}];
      e.first += *r.prior_error * *r.prior_error;
      e.second += 1;
    }
  }
  using SplitAcc = std::map<int, std::pair<double, std::size_t>>;
  struct Acc {
    SplitAcc overall;
    std::map<int, SplitAcc> support;
    std::map<double, SplitAcc> prior;
  };
  std::map<std::pair<std::string, std::string>, Acc> accs;
  for (const auto& [cell, sum] : cells) {
    const double mean = sum.first / static_cast<double>(sum.second);
    Acc& a = accs[{cell.method, cell.ablation}];
    auto add = [&](SplitAcc& s) {
      s[cell.split].first += mean;
      s[cell.split].second += 1;
    };
    add(a.overall);
    add(a.support[cell.support]);
    add(a.prior[cell.prior]);
  }
  std::vector<MethodSummary> out;
  for (const auto& [key, a] : accs) {
    MethodSummary s;
    s.method = key.first;
    s.ablation = key.second;
    s.overall = across_splits(a.overall);
    for (const auto& [k, v] : a.support) s.by_support[k] = across_splits(v);
    for (const auto& [k, v] : a.prior) s.by_prior[k] = across_splits(v);
    if (const auto it = sq_error.find(key); it != sq_error.end()) {
      s.prior_rmse = std::sqrt(it->second.first / static_cast<double>(it->second.second));
    }
    out.push_back(std::move(s));
  }
  return out;
}

const MethodSummary* find_summary(const std::vector<MethodSummary>& s, const std::string& method,
                                  const std::string& ablation) {
  for (const auto& m : s) {
    if (m.method == method && m.ablation == ablation) return &m;
  }
  return nullptr;
}

}  // namespace metapu
