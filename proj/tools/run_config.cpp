#include "run_config.hpp"

#include <fmt/format.h>

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "metapu/errors.hpp"

namespace metapu::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_scalar(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  in.imbue(std::locale::classic());
  T v{};
  in >> v;
  if (in.fail() || !in.eof()) throw ConfigError(fmt::format("{}: cannot parse '{}'", key, text));
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(fmt::format("{}: expected true or false, got '{}'", key, text));
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError(fmt::format("{}: empty list item in '{}'", key, text));
    out.push_back(parse_scalar<T>(key, item));
  }
  if (out.empty()) throw ConfigError(fmt::format("{}: list must not be empty", key));
  return out;
}

std::vector<std::string> parse_names(const std::string& key, const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError(fmt::format("{}: empty list item in '{}'", key, text));
    out.push_back(item);
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto path = [&](const std::string& k, std::filesystem::path RunConfig::*m) {
      t[k] = [m](RunConfig& c, const std::string&, const std::string& v) { c.*m = v; };
    };
    path("paths.out", &RunConfig::out);
    path("paths.tasks", &RunConfig::tasks_dir);
    path("paths.models", &RunConfig::models_dir);
    path("paths.results", &RunConfig::results_dir);

    t["run.seed"] = [](RunConfig& c, auto& k, auto& v) { c.seed = parse_scalar<std::uint64_t>(k, v); };
    t["run.splits"] = [](RunConfig& c, auto& k, auto& v) { c.splits = parse_scalar<int>(k, v); };
    t["run.threads"] = [](RunConfig& c, auto& k, auto& v) { c.threads = parse_scalar<int>(k, v); };

    t["data.total_tasks"] = [](RunConfig& c, auto& k, auto& v) { c.bench.total_tasks = parse_scalar<int>(k, v); };
    t["data.n_source"] = [](RunConfig& c, auto& k, auto& v) { c.bench.n_source = parse_scalar<int>(k, v); };
    t["data.n_validation"] = [](RunConfig& c, auto& k, auto& v) { c.bench.n_validation = parse_scalar<int>(k, v); };
    t["data.n_target"] = [](RunConfig& c, auto& k, auto& v) { c.bench.n_target = parse_scalar<int>(k, v); };
    t["data.points_per_task"] = [](RunConfig& c, auto& k, auto& v) {
      c.bench.points_per_task = parse_scalar<int>(k, v);
    };
    t["data.priors"] = [](RunConfig& c, auto& k, auto& v) { c.bench.priors = parse_list<double>(k, v); };

    t["episode.n_support_pos"] = [](RunConfig& c, auto& k, auto& v) {
      c.episode.n_support_pos = parse_scalar<int>(k, v);
    };
    t["episode.n_support_unl"] = [](RunConfig& c, auto& k, auto& v) {
      c.episode.n_support_unl = parse_scalar<int>(k, v);
    };
    t["episode.n_query"] = [](RunConfig& c, auto& k, auto& v) { c.episode.n_query = parse_scalar<int>(k, v); };
    t["episode.support_pos_choices"] = [](RunConfig& c, auto& k, auto& v) {
      c.episode.support_pos_choices = v == "none" ? std::vector<int>{} : parse_list<int>(k, v);
    };

    t["train.learning_rate"] = [](RunConfig& c, auto& k, auto& v) {
      c.train.learning_rate = parse_scalar<double>(k, v);
    };
    t["train.max_iterations"] = [](RunConfig& c, auto& k, auto& v) {
      c.train.max_iterations = parse_scalar<int>(k, v);
    };
    t["train.validation_every"] = [](RunConfig& c, auto& k, auto& v) {
      c.train.validation_every = parse_scalar<int>(k, v);
    };
    t["train.validation_episodes"] = [](RunConfig& c, auto& k, auto& v) {
      c.train.validation_episodes = parse_scalar<int>(k, v);
    };
    t["train.patience"] = [](RunConfig& c, auto& k, auto& v) { c.train.patience = parse_scalar<int>(k, v); };
    t["train.tau"] = [](RunConfig& c, auto& k, auto& v) { c.train.tau = parse_scalar<double>(k, v); };
    t["train.lambda_init"] = [](RunConfig& c, auto& k, auto& v) { c.train.lambda_init = parse_scalar<double>(k, v); };
    t["train.k_dim"] = [](RunConfig& c, auto& k, auto& v) { c.train.dims.repr_dim = parse_scalar<int>(k, v); };
    t["train.m_dim"] = [](RunConfig& c, auto& k, auto& v) { c.train.dims.embed_dim = parse_scalar<int>(k, v); };
    t["train.hidden"] = [](RunConfig& c, auto& k, auto& v) { c.train.dims.hidden = parse_scalar<int>(k, v); };
    t["train.k_sweep"] = [](RunConfig& c, auto& k, auto& v) { c.k_sweep = parse_list<int>(k, v); };

    t["eval.support_sizes"] = [](RunConfig& c, auto& k, auto& v) { c.grid.support_sizes = parse_list<int>(k, v); };
    t["eval.priors"] = [](RunConfig& c, auto& k, auto& v) { c.grid.priors = parse_list<double>(k, v); };
    t["eval.total_support"] = [](RunConfig& c, auto& k, auto& v) { c.grid.total_support = parse_scalar<int>(k, v); };
    t["eval.n_test"] = [](RunConfig& c, auto& k, auto& v) { c.grid.n_test = parse_scalar<int>(k, v); };
    t["eval.repeats"] = [](RunConfig& c, auto& k, auto& v) { c.grid.repeats = parse_scalar<int>(k, v); };
    t["eval.ablations"] = [](RunConfig& c, auto& k, auto& v) {
      c.ablations.clear();
      for (const auto& n : parse_names(k, v)) c.ablations.push_back(ablation_from_string(n));
    };

    t["baseline.methods"] = [](RunConfig& c, auto& k, auto& v) {
      c.baselines.clear();
      for (const auto& n : parse_names(k, v)) c.baselines.push_back(baseline_kind_from_string(n));
    };
    t["baseline.lambda_grid"] = [](RunConfig& c, auto& k, auto& v) {
      c.baseline.lambda_grid = parse_list<double>(k, v);
    };
    t["baseline.iterations_grid"] = [](RunConfig& c, auto& k, auto& v) {
      c.baseline.iterations_grid = parse_list<int>(k, v);
    };
    t["baseline.hidden"] = [](RunConfig& c, auto& k, auto& v) { c.baseline.hidden = parse_scalar<int>(k, v); };
    t["baseline.learning_rate"] = [](RunConfig& c, auto& k, auto& v) {
      c.baseline.learning_rate = parse_scalar<double>(k, v);
    };
    t["baseline.upu_step"] = [](RunConfig& c, auto& k, auto& v) { c.baseline.upu_step = parse_scalar<double>(k, v); };
    t["baseline.seed"] = [](RunConfig& c, auto& k, auto& v) { c.baseline.seed = parse_scalar<std::uint64_t>(k, v); };

    t["run.force"] = [](RunConfig& c, auto& k, auto& v) { c.force = parse_bool(k, v); };
    return t;
  }();
  return table;
}

}  // namespace

EpisodeConfig RunConfig::default_episode() {
  EpisodeConfig e;
  e.support_pos_choices = {1, 3, 5};
  return e;
}

TrainConfig RunConfig::default_train() {
  TrainConfig t;
  t.dims.repr_dim = 64;
  return t;
}

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  const std::string full = section + "." + key;
  const auto it = setters().find(full);
  if (it == setters().end()) throw ConfigError(fmt::format("unknown configuration key '{}'", full));
  it->second(*this, full, value);
}

void RunConfig::set_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError(fmt::format("override '{}' is not of the form section.key=value", assignment));
  }
  set(trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)), trim(assignment.substr(eq + 1)));
}

void RunConfig::resolve_paths() {
  out = std::filesystem::absolute(out).lexically_normal();
  auto fill = [&](std::filesystem::path& p, const char* sub) {
    p = p.empty() ? out / sub : std::filesystem::absolute(p).lexically_normal();
  };
  fill(tasks_dir, "tasks");
  fill(models_dir, "models");
  fill(results_dir, "results");
}

void RunConfig::validate() const {
  if (splits < 1) throw ConfigError("run.splits must be at least 1");
  if (threads < 1) throw ConfigError("run.threads must be at least 1");
  episode.validate();
  train.validate();
  grid.validate();
  baseline.validate();
  for (int k : k_sweep) {
    if (k < 1) throw ConfigError("train.k_sweep entries must be positive");
  }
}

std::filesystem::path RunConfig::task_file(int split) const {
  return tasks_dir / fmt::format("split_{}.jsonl", split);
}

std::filesystem::path RunConfig::checkpoint_file(int split, const std::string& variant) const {
  return models_dir / fmt::format("split_{}_{}.ckpt", split, variant);
}

std::filesystem::path RunConfig::train_log_file(int split, const std::string& variant) const {
  return models_dir / fmt::format("split_{}_{}_log.csv", split, variant);
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(fmt::format("{}:{}: malformed section header", source, lineno));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(fmt::format("{}:{}: expected key = value", source, lineno));
    if (section.empty()) throw ConfigError(fmt::format("{}:{}: key outside of any [section]", source, lineno));
    try {
      cfg.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("{}:{}: {}", source, lineno, e.what()));
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config file '{}'", path.string()));
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(cfg, buf.str(), path.string());
}

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& [k, v] : setters()) out.push_back(k);
  return out;
}

}  // namespace metapu::cli
