#pragma once

// Finite-difference checks for every autodiff operation and for the full
// episode loss (adapt followed by the smoothed query risk).

#include <cstdint>
#include <string>
#include <vector>

#include "metapu/model.hpp"

namespace metapu {

inline constexpr double kOpGradTolerance = 1e-5;
inline constexpr double kEpisodeGradTolerance = 1e-4;
inline constexpr double kGradCheckStep = 1e-6;

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// One entry per differentiable operation, inputs drawn away from kinks.
std::vector<GradCheckEntry> check_ops(std::uint64_t seed = 7);

/// Tiny episode (D=2, K=4, M=8, hidden width 10) chosen so that the
/// density-ratio weights are partly clamped and the prior estimate is below 1,
/// putting solve_spd, clamp_nonneg, max_entry and log_lambda on the gradient path.
struct EpisodeFixture {
  MetaParams theta;
  SupportSet support;
  QuerySet query;
  int clamped_weights = 0;
  double pi_hat = 1.0;
};
EpisodeFixture make_episode_fixture(std::uint64_t seed = 11);

GradCheckEntry check_episode(const EpisodeFixture& fixture, double tau = 10.0);

/// check_ops followed by check_episode.
std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed = 7);

}  // namespace metapu
