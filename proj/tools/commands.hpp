#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "metapu/evaluation.hpp"
#include "run_config.hpp"

namespace metapu::cli {

enum ExitCode : int { kSuccess = 0, kFailure = 1, kUsage = 2 };

struct TrainOptions {
  std::optional<int> split;         // all splits when empty
  std::string variant = "full";     // "full" or "no_z"
  bool resume = false;
  bool k_sweep = false;
};

struct ReportOptions {
  std::vector<std::filesystem::path> inputs;  // defaults to every CSV in the results directory
};

int cmd_generate(const RunConfig& cfg, std::ostream& log);
int cmd_train(const RunConfig& cfg, const TrainOptions& opts, std::ostream& log);
int cmd_eval(const RunConfig& cfg, std::optional<int> split, std::ostream& log);
int cmd_baseline(const RunConfig& cfg, std::optional<int> split, std::ostream& log);
int cmd_report(const RunConfig& cfg, const ReportOptions& opts, std::ostream& out);
int cmd_gradcheck(bool inject_solve_fault, std::ostream& out);

/// Reference accuracies [%] on the synthetic benchmark, display only.
std::optional<double> reference_accuracy(const std::string& method, const std::string& ablation);
inline constexpr double kReferencePriorRmse = 0.205;

/// Markdown summary of result rows.
std::string render_report(const std::vector<MethodSummary>& summary);

}  // namespace metapu::cli
