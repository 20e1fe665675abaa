#include <CLI11.hpp>
#include <fmt/format.h>

#include <iostream>

#include "commands.hpp"
#include "metapu/errors.hpp"

using namespace metapu;
using namespace metapu::cli;

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned positive-unlabeled classification: data, training, evaluation and reports"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool force = false;
  std::optional<int> threads;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "key=value config file with [sections]")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "base seed; split i uses seed + i");
  app.add_option("--out", out_dir, "output directory");
  app.add_flag("--force", force, "overwrite existing outputs");
  app.add_option("--threads", threads, "worker threads for validation and evaluation")->check(CLI::PositiveNumber);
  app.add_option("--set", overrides, "override a config key, e.g. --set train.max_iterations=2000");

  auto* generate = app.add_subcommand("generate", "write one synthetic benchmark file per split");

  TrainOptions train_opts;
  std::optional<int> split;
  auto* train = app.add_subcommand("train", "meta-train one model per split");
  train->add_option("--split", train_opts.split, "train this split only");
  train->add_option("--variant", train_opts.variant, "full or no_z")->check(CLI::IsMember({"full", "no_z"}));
  train->add_flag("--resume", train_opts.resume, "continue from the checkpoint's recorded iteration");
  train->add_flag("--k-sweep", train_opts.k_sweep, "train one model per train.k_sweep value and keep the best");

  auto* eval = app.add_subcommand("eval", "evaluate trained models on the target grid");
  eval->add_option("--split", split, "evaluate this split only");

  std::vector<std::string> methods;
  auto* baseline = app.add_subcommand("baseline", "run per-task baselines on the target grid");
  baseline->add_option("--split", split, "evaluate this split only");
  baseline->add_option("--methods", methods, "subset of naive, dre, upu, nnpu")->delimiter(',');

  ReportOptions report_opts;
  std::vector<std::string> report_inputs;
  auto* report = app.add_subcommand("report", "summarize result CSVs");
  report->add_option("inputs", report_inputs, "result CSV files (default: every CSV in the results directory)");

  bool inject_fault = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of every gradient");
  gradcheck->add_flag("--inject-solve-fault", inject_fault, "negate the solver adjoint (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (gradcheck->parsed()) return cmd_gradcheck(inject_fault, std::cout);

    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& o : overrides) cfg.set_override(o);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out = out_dir;
    if (threads) cfg.threads = *threads;
    cfg.force = cfg.force || force;
    if (!methods.empty()) {
      cfg.baselines.clear();
      for (const auto& m : methods) cfg.baselines.push_back(baseline_kind_from_string(m));
    }
    cfg.resolve_paths();
    cfg.validate();

    if (generate->parsed()) return cmd_generate(cfg, std::cerr);
    if (train->parsed()) return cmd_train(cfg, train_opts, std::cerr);
    if (eval->parsed()) return cmd_eval(cfg, split, std::cerr);
    if (baseline->parsed()) return cmd_baseline(cfg, split, std::cerr);
    if (report->parsed()) {
      for (const auto& p : report_inputs) report_opts.inputs.emplace_back(p);
      return cmd_report(cfg, report_opts, std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
