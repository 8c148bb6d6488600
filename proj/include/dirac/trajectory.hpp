#pragma once

#include "dirac/phase_space.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace dirac {

/// Provenance carried with every trajectory and written to metadata sidecars.
struct TrajectoryMeta {
  std::string system;
  std::vector<std::pair<std::string, double>> parameters;
  std::uint64_t seed = 0;
};

/// Uniformly sampled physical trajectory: states[k].t == t0 + k·dt and
/// states[k].u is the control held over [t_k, t_{k+1}).
struct Trajectory {
  double dt = 0.0;
  std::vector<PhasePoint> states;
  TrajectoryMeta meta;

  std::size_t steps() const { return states.empty() ? 0 : states.size() - 1; }
};

/// Dirac-lifted trajectory with the auxiliary work channels
///   p_ctrl(t) = −∫ uᵀBᵀq̇ dτ,  p_diss(t) = −∫ q̇ᵀDq̇ dτ.
struct LiftedTrajectory {
  double dt = 0.0;
  std::vector<LiftedPoint> points;
  std::vector<Vec> controls;
  std::vector<double> p_ctrl;
  std::vector<double> p_diss;
  TrajectoryMeta meta;

  std::size_t size() const { return points.size(); }
  double time(std::size_t k) const { return points[k].q0; }
};

}  // namespace dirac
