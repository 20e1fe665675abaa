#pragma once

// Run configuration: a flat key=value file with [sections], overridable by
// command-line flags. Unknown sections or keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "metapu/baselines.hpp"
#include "metapu/evaluation.hpp"
#include "metapu/metatrain.hpp"
#include "metapu/tasks.hpp"

namespace metapu::cli {

struct RunConfig {
  std::filesystem::path out = "run";
  std::filesystem::path tasks_dir;    // default: <out>/tasks
  std::filesystem::path models_dir;   // default: <out>/models
  std::filesystem::path results_dir;  // default: <out>/results
  std::uint64_t seed = 0;
  int splits = 5;
  BenchmarkConfig bench;
  EpisodeConfig episode = default_episode();
  TrainConfig train = default_train();
  std::vector<int> k_sweep{16, 32, 64, 128};
  EvalGrid grid;
  std::vector<Ablation> ablations{Ablation::full, Ablation::no_z, Ablation::no_prior, Ablation::true_prior};
  std::vector<BaselineKind> baselines{BaselineKind::naive, BaselineKind::dre, BaselineKind::upu, BaselineKind::nnpu};
  BaselineConfig baseline;
  int threads = 1;
  bool force = false;

  static EpisodeConfig default_episode();
  static TrainConfig default_train();

  /// Applies one setting; throws ConfigError on unknown keys or bad values.
  void set(const std::string& section, const std::string& key, const std::string& value);
  /// "section.key=value"
  void set_override(const std::string& assignment);
  /// Fills default directories below out and makes every path absolute.
  void resolve_paths();
  void validate() const;

  std::filesystem::path task_file(int split) const;
  std::filesystem::path checkpoint_file(int split, const std::string& variant) const;
  std::filesystem::path train_log_file(int split, const std::string& variant) const;
};

/// Parses config text; `source` names the origin in error messages.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source);
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// Every recognized "section.key", for documentation and tests.
std::vector<std::string> known_keys();

}  // namespace metapu::cli
