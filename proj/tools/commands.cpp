#include "commands.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "metapu/checkpoint.hpp"
#include "metapu/errors.hpp"
#include "metapu/gradcheck_suite.hpp"

namespace metapu::cli {

namespace {

std::vector<int> selected_splits(const RunConfig& cfg, std::optional<int> split) {
  if (split) {
    if (*split < 0 || *split >= cfg.splits) {
      throw ConfigError(fmt::format("--split {} is outside [0, {})", *split, cfg.splits));
    }
    return {*split};
  }
  std::vector<int> all(static_cast<std::size_t>(cfg.splits));
  for (int i = 0; i < cfg.splits; ++i) all[static_cast<std::size_t>(i)] = i;
  return all;
}

BenchmarkSplit load_split(const RunConfig& cfg, int split) {
  const auto path = cfg.task_file(split);
  if (!std::filesystem::exists(path)) {
    throw ConfigError(fmt::format("task file '{}' does not exist; run 'generate' first", path.string()));
  }
  return load_tasks(path);
}

std::uint64_t split_seed(const RunConfig& cfg, int split) { return cfg.seed + static_cast<std::uint64_t>(split); }

bool refuse_existing(const std::filesystem::path& path, bool force, std::ostream& log) {
  if (std::filesystem::exists(path) && !force) {
    log << fmt::format("error: '{}' exists; pass --force to overwrite\n", path.string());
    return true;
  }
  return false;
}

void write_results(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  std::ostringstream buf;
  write_results_csv(buf, rows);
  std::filesystem::create_directories(path.parent_path());
  write_file_atomically(path, buf.str());
}

std::string percent(double v) { return fmt::format("{:.2f}", 100.0 * v); }

std::string mean_pm(const MeanStderr& m) {
  return fmt::format("{:.2f} ± {:.2f}", 100.0 * m.mean, 100.0 * m.stderr_);
}

struct TrainOutcome {
  double best_accuracy = 0.0;
  long best_iteration = 0;
};

TrainOutcome train_one(const RunConfig& cfg, const BenchmarkSplit& data, int split, const std::string& variant,
                       ModelDims dims, bool resume, std::ostream& log) {
  const auto ckpt = cfg.checkpoint_file(split, variant);
  const auto log_path = cfg.train_log_file(split, variant);
  TrainConfig tcfg = cfg.train;
  tcfg.dims = dims;
  tcfg.seed = split_seed(cfg, split);
  tcfg.threads = cfg.threads;
  TrainHooks hooks;
  if (resume) {
    const Checkpoint c = load_checkpoint(ckpt);
    const ModelDims& d = c.manifest.dims;
    if (d.input_dim != dims.input_dim || d.repr_dim != dims.repr_dim || d.embed_dim != dims.embed_dim ||
        d.hidden != dims.hidden || d.use_task_repr != dims.use_task_repr) {
      throw ConfigError(fmt::format("checkpoint '{}' was trained with different model dimensions", ckpt.string()));
    }
    hooks.initial = c.params;
    hooks.start_iteration = c.manifest.iteration;
    log << fmt::format("split {} {}: resuming at iteration {}\n", split, variant, c.manifest.iteration);
  }
  std::filesystem::create_directories(ckpt.parent_path());
  CheckpointManifest manifest;
  manifest.dims = dims;
  manifest.tau = tcfg.tau;
  manifest.lambda_init = tcfg.lambda_init;
  manifest.seed = tcfg.seed;
  hooks.on_validation = [&](const ValidationRecord& rec, const MetaParams& best) {
    log << fmt::format("split {} {}: iteration {:>6}  train loss {:.4f}  val acc {:.4f}{}\n", split, variant,
                       rec.iteration, rec.mean_train_loss, rec.val_accuracy, rec.best_so_far ? "  *" : "");
    if (rec.best_so_far) {
      manifest.iteration = rec.iteration;
      manifest.validation_accuracy = rec.val_accuracy;
      save_checkpoint(ckpt, manifest, best);
    }
  };
  const TrainResult result = meta_train(data.source, data.validation, tcfg, cfg.episode, hooks);

  std::string csv;
  const bool append = resume && std::filesystem::exists(log_path);
  if (append) {
    std::ifstream in(log_path);
    std::stringstream prev;
    prev << in.rdbuf();
    csv = prev.str();
  } else {
    csv = "format_version,iteration,mean_train_loss,val_accuracy,best_so_far\n";
  }
  for (const auto& r : result.log) {
    csv += fmt::format("1,{},{:.17g},{:.17g},{}\n", r.iteration, r.mean_train_loss, r.val_accuracy,
                       r.best_so_far ? "true" : "false");
  }
  write_file_atomically(log_path, csv);
  if (result.skipped_episodes > 0) {
    log << fmt::format("split {} {}: skipped {} degenerate episodes\n", split, variant, result.skipped_episodes);
  }
  return {result.best_accuracy, result.best_iteration};
}

}  // namespace

int cmd_generate(const RunConfig& cfg, std::ostream& log) {
  for (int i = 0; i < cfg.splits; ++i) {
    if (refuse_existing(cfg.task_file(i), cfg.force, log)) return kFailure;
  }
  std::filesystem::create_directories(cfg.tasks_dir);
  for (int i = 0; i < cfg.splits; ++i) {
    save_tasks(build_synthetic_benchmark(split_seed(cfg, i), cfg.bench), cfg.task_file(i));
    log << fmt::format("wrote {}\n", cfg.task_file(i).string());
  }
  return kSuccess;
}

int cmd_train(const RunConfig& cfg, const TrainOptions& opts, std::ostream& log) {
  if (opts.variant != "full" && opts.variant != "no_z") {
    throw ConfigError(fmt::format("unknown model variant '{}' (expected full or no_z)", opts.variant));
  }
  if (opts.k_sweep && opts.variant != "full") throw ConfigError("the K sweep applies to the full model only");
  if (opts.k_sweep && opts.resume) throw ConfigError("--resume cannot be combined with --k-sweep");
  const auto splits = selected_splits(cfg, opts.split);
  for (int s : splits) {
    if (opts.resume) {
      if (!std::filesystem::exists(cfg.checkpoint_file(s, opts.variant))) {
        throw ConfigError(fmt::format("cannot resume: '{}' does not exist", cfg.checkpoint_file(s, opts.variant).string()));
      }
    } else if (refuse_existing(cfg.checkpoint_file(s, opts.variant), cfg.force, log)) {
      return kFailure;
    }
  }
  for (int s : splits) {
    const BenchmarkSplit data = load_split(cfg, s);
    ModelDims dims = cfg.train.dims;
    dims.input_dim = data.source.empty() ? dims.input_dim : data.source.front().input_dim();
    dims.use_task_repr = opts.variant == "full";
    if (!opts.k_sweep) {
      const auto out = train_one(cfg, data, s, opts.variant, dims, opts.resume, log);
      log << fmt::format("split {} {}: best validation accuracy {:.4f} at iteration {}\n", s, opts.variant,
                         out.best_accuracy, out.best_iteration);
      continue;
    }
    std::string csv = "format_version,k_dim,val_accuracy,best_iteration,selected\n";
    int best_k = 0;
    double best_acc = -1.0;
    std::vector<std::pair<int, TrainOutcome>> runs;
    for (int k : cfg.k_sweep) {
      dims.repr_dim = k;
      const auto out = train_one(cfg, data, s, fmt::format("k{}", k), dims, false, log);
      runs.emplace_back(k, out);
      if (out.best_accuracy > best_acc) {
        best_acc = out.best_accuracy;
        best_k = k;
      }
    }
    for (const auto& [k, out] : runs) {
      csv += fmt::format("1,{},{:.17g},{},{}\n", k, out.best_accuracy, out.best_iteration, k == best_k ? "true" : "false");
    }
    write_file_atomically(cfg.models_dir / fmt::format("split_{}_k_sweep.csv", s), csv);
    std::filesystem::copy_file(cfg.checkpoint_file(s, fmt::format("k{}", best_k)), cfg.checkpoint_file(s, "full"),
                               std::filesystem::copy_options::overwrite_existing);
    log << fmt::format("split {}: selected K={} (validation accuracy {:.4f})\n", s, best_k, best_acc);
  }
  return kSuccess;
}

int cmd_eval(const RunConfig& cfg, std::optional<int> split, std::ostream& log) {
  const auto out_path = cfg.results_dir / (split ? fmt::format("ours_split_{}.csv", *split) : "ours.csv");
  if (refuse_existing(out_path, cfg.force, log)) return kFailure;
  std::vector<ResultRow> rows;
  for (int s : selected_splits(cfg, split)) {
    const BenchmarkSplit data = load_split(cfg, s);
    for (Ablation a : cfg.ablations) {
      if (a == Ablation::true_prior) {
        for (const auto& t : data.target) {
          if (t.kind == GeneratorKind::external && !(t.true_prior > 0.0 && t.true_prior <= 1.0)) {
            throw ConfigError(fmt::format("true_prior ablation: target task {} has no class prior", t.id));
          }
        }
      }
      const std::string variant = a == Ablation::no_z ? "no_z" : "full";
      const auto ckpt = cfg.checkpoint_file(s, variant);
      if (!std::filesystem::exists(ckpt)) {
        throw ConfigError(fmt::format("checkpoint '{}' does not exist; run 'train{}' first", ckpt.string(),
                                      a == Ablation::no_z ? " --variant no_z" : ""));
      }
      const Checkpoint c = load_checkpoint(ckpt);
      auto part = evaluate_model(c.params, data.target, cfg.grid, a, s, split_seed(cfg, s), cfg.threads);
      log << fmt::format("split {} {}: {} rows\n", s, to_string(a), part.size());
      rows.insert(rows.end(), part.begin(), part.end());
    }
  }
  write_results(out_path, rows);
  log << fmt::format("wrote {}\n", out_path.string());
  return kSuccess;
}

int cmd_baseline(const RunConfig& cfg, std::optional<int> split, std::ostream& log) {
  std::vector<std::filesystem::path> paths;
  for (BaselineKind k : cfg.baselines) {
    paths.push_back(cfg.results_dir / (split ? fmt::format("baseline_{}_split_{}.csv", to_string(k), *split)
                                             : fmt::format("baseline_{}.csv", to_string(k))));
    if (refuse_existing(paths.back(), cfg.force, log)) return kFailure;
  }
  std::vector<BenchmarkSplit> data;
  const auto splits = selected_splits(cfg, split);
  for (int s : splits) data.push_back(load_split(cfg, s));
  for (std::size_t m = 0; m < cfg.baselines.size(); ++m) {
    std::vector<ResultRow> rows;
    for (std::size_t i = 0; i < splits.size(); ++i) {
      const int s = splits[i];
      auto part = evaluate_baseline(cfg.baselines[m], data[i].target, cfg.grid, cfg.baseline, s, split_seed(cfg, s),
                                    cfg.threads);
      log << fmt::format("split {} {}: best over grid {}\n", s, to_string(cfg.baselines[m]),
                         part.empty() ? std::string("-") : part.front().hyperparam);
      rows.insert(rows.end(), part.begin(), part.end());
    }
    write_results(paths[m], rows);
    log << fmt::format("wrote {}\n", paths[m].string());
  }
  return kSuccess;
}

std::optional<double> reference_accuracy(const std::string& method, const std::string& ablation) {
  static const std::map<std::pair<std::string, std::string>, double> ref{
      {{"ours", "full"}, 82.37},       {{"ours", "no_z"}, 75.92},  {{"ours", "no_prior"}, 79.01},
      {{"ours", "true_prior"}, 84.78}, {{"naive", "none"}, 66.05}, {{"dre", "none"}, 73.84},
      {{"upu", "none"}, 76.98},        {{"nnpu", "none"}, 78.97}};
  const auto it = ref.find({method, ablation});
  if (it == ref.end()) return std::nullopt;
  return it->second;
}

std::string render_report(const std::vector<MethodSummary>& summary) {
  std::string out;
  out += "## Mean test accuracy [%]\n\n";
  out += "Baselines use the best setting over their hyperparameter grid (best_over_grid).\n\n";
  out += "| method | ablation | mean | stderr | splits | reference |\n|---|---|---|---|---|---|\n";
  for (const auto& m : summary) {
    const auto ref = reference_accuracy(m.method, m.ablation);
    out += fmt::format("| {} | {} | {} | {:.2f} | {} | {} |\n", m.method, m.ablation, percent(m.overall.mean),
                       100.0 * m.overall.stderr_, m.overall.splits, ref ? fmt::format("{:.2f}", *ref) : "-");
  }

  std::set<int> supports;
  std::set<double> priors;
  for (const auto& m : summary) {
    for (const auto& [k, v] : m.by_support) supports.insert(k);
    for (const auto& [k, v] : m.by_prior) priors.insert(k);
  }
  auto table = [&](const std::string& title, const auto& keys, auto label, auto lookup) {
    out += fmt::format("\n## {}\n\n| method | ablation |", title);
    for (const auto& k : keys) out += fmt::format(" {} |", label(k));
    out += "\n|---|---|";
    for (std::size_t i = 0; i < keys.size(); ++i) out += "---|";
    out += "\n";
    for (const auto& m : summary) {
      out += fmt::format("| {} | {} |", m.method, m.ablation);
      for (const auto& k : keys) {
        const MeanStderr* v = lookup(m, k);
        out += fmt::format(" {} |", v ? mean_pm(*v) : "-");
      }
      out += "\n";
    }
  };
  table("Accuracy [%] by positive support size (mean ± stderr)", supports,
        [](int k) { return fmt::format("N_pos={}", k); },
        [](const MethodSummary& m, int k) -> const MeanStderr* {
          const auto it = m.by_support.find(k);
          return it == m.by_support.end() ? nullptr : &it->second;
        });
  table("Accuracy [%] by target class prior (mean ± stderr)", priors,
        [](double k) { return fmt::format("prior={:g}", k); },
        [](const MethodSummary& m, double k) -> const MeanStderr* {
          const auto it = m.by_prior.find(k);
          return it == m.by_prior.end() ? nullptr : &it->second;
        });

  out += "\n## Class-prior estimation\n\n| method | ablation | RMSE | reference |\n|---|---|---|---|\n";
  for (const auto& m : summary) {
    if (!m.prior_rmse) continue;
    out += fmt::format("| {} | {} | {:.4f} | {} |\n", m.method, m.ablation, *m.prior_rmse,
                       m.method == "ours" && m.ablation == "full" ? fmt::format("{:.3f}", kReferencePriorRmse) : "-");
  }
  return out;
}

int cmd_report(const RunConfig& cfg, const ReportOptions& opts, std::ostream& out) {
  std::vector<std::filesystem::path> inputs = opts.inputs;
  if (inputs.empty() && std::filesystem::is_directory(cfg.results_dir)) {
    for (const auto& e : std::filesystem::directory_iterator(cfg.results_dir)) {
      if (e.path().extension() == ".csv") inputs.push_back(e.path());
    }
    std::sort(inputs.begin(), inputs.end());
  }
  if (inputs.empty()) throw ConfigError("report: no result files given and none found in the results directory");
  std::vector<ResultRow> rows;
  for (const auto& p : inputs) {
    std::ifstream in(p);
    if (!in) throw ConfigError(fmt::format("report: cannot open '{}'", p.string()));
    try {
      auto part = read_results_csv(in);
      rows.insert(rows.end(), part.begin(), part.end());
    } catch (const Error& e) {
      throw SchemaError(fmt::format("{}: {}", p.string(), e.what()));
    }
  }
  const std::string text = render_report(summarize(rows));
  out << text;
  std::filesystem::create_directories(cfg.out);
  write_file_atomically(cfg.out / "report.md", text);
  return kSuccess;
}

int cmd_gradcheck(bool inject_solve_fault, std::ostream& out) {
  std::vector<GradCheckEntry> entries;
  if (inject_solve_fault) {
    ad::testing::ScopedSolveAdjointFault fault;
    entries = run_gradcheck_suite();
  } else {
    entries = run_gradcheck_suite();
  }
  std::vector<std::string> failed;
  out << fmt::format("{:<16} {:>12} {:>10}  status\n", "check", "max_rel_err", "tolerance");
  for (const auto& e : entries) {
    out << fmt::format("{:<16} {:>12.3e} {:>10.0e}  {}\n", e.name, e.max_rel_error, e.tolerance,
                       e.passed ? "pass" : "FAIL");
    if (!e.passed) failed.push_back(e.name);
  }
  if (failed.empty()) {
    out << fmt::format("all {} gradient checks passed\n", entries.size());
    return kSuccess;
  }
  std::string names;
  for (const auto& n : failed) names += (names.empty() ? "" : ", ") + n;
  out << fmt::format("gradient check failed: {}\n", names);
  return kFailure;
}

}  // namespace metapu::cli
