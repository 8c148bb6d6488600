#pragma once

#include "dirac/errors.hpp"
#include "dirac/systems.hpp"
#include "dirac/trajectory.hpp"
#include "dirac/types.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace dirac {

/// Classical RK4 step of ż = f(z, t).
template <typename F, typename Scalar>
Vector<Scalar> rk4_step(F&& f, const Vector<Scalar>& z, Scalar t, Scalar dt) {
  const Scalar h = dt / Scalar(2);
  const Vector<Scalar> k1 = f(z, t);
  const Vector<Scalar> k2 = f((z + h * k1).eval(), t + h);
  const Vector<Scalar> k3 = f((z + h * k2).eval(), t + h);
  const Vector<Scalar> k4 = f((z + dt * k3).eval(), t + dt);
  Vector<Scalar> out = z + (dt / Scalar(6)) * (k1 + Scalar(2) * k2 + Scalar(2) * k3 + k4);
  if (!out.allFinite()) throw NumericalError("rk4_step: non-finite stage value");
  return out;
}

struct MidpointSolve {
  Vec z;
  int iterations = 0;
  double residual = 0.0;
};

/// Solves z' = z + dt·v((z + z')/2, t + dt/2) by fixed-point iteration.
/// Full steps for the first max_iter/2 iterations, half steps after; converged
/// when ‖update‖ ≤ tol·(1 + ‖z‖). Converges when dt·Lip(v) < 1.
template <typename V>
MidpointSolve implicit_midpoint_solve(V&& v, const Vec& z, double t, double dt, double tol = 1e-10,
                                      int max_iter = 50) {
  MidpointSolve out{z, 0, 0.0};
  if (dt == 0.0) return out;
  const double tm = t + dt / 2;
  const double scale = tol * (1.0 + z.norm());
  Vec next = z + dt * v(z, tm);
  for (int it = 1; it <= max_iter; ++it) {
    const Vec target = z + dt * v(((z + next) / 2).eval(), tm);
    const Vec update = target - next;
    out.residual = update.norm();
    out.iterations = it;
    if (!std::isfinite(out.residual)) break;
    const double damping = it <= max_iter / 2 ? 1.0 : 0.5;
    next += damping * update;
    if (out.residual <= scale) {
      out.z = next;
      return out;
    }
  }
  throw NoConvergence("implicit midpoint fixed-point iteration", out.residual, out.iterations);
}

template <typename V>
Vec implicit_midpoint_step(V&& v, const Vec& z, double t, double dt, double tol = 1e-10, int max_iter = 50) {
  return implicit_midpoint_solve(std::forward<V>(v), z, t, dt, tol, max_iter).z;
}

/// N successive midpoint steps; the result holds z0 followed by N states.
/// NoConvergence is rethrown tagged with the failing step.
template <typename V>
std::vector<Vec> midpoint_rollout(V&& v, const Vec& z0, double t0, std::size_t N, double dt, double tol = 1e-10,
                                  int max_iter = 50) {
  std::vector<Vec> out;
  out.reserve(N + 1);
  out.push_back(z0);
  for (std::size_t k = 0; k < N; ++k) {
    try {
      out.push_back(implicit_midpoint_step(v, out.back(), t0 + static_cast<double>(k) * dt, dt, tol, max_iter));
    } catch (const NoConvergence& e) {
      throw e.at_step(k);
    }
  }
  return out;
}

struct ProjectionSettings {
  int max_iter = 20;
  double tol = 1e-12;
};

/// Gauss-Newton projection of q onto φ = 0 (minimum-norm steps), then the
/// momentum correction p' = p − J_cᵀμ with (J_c M⁻¹ J_cᵀ) μ = J_c M⁻¹ p, so
/// that J_c M⁻¹ p' = 0. Throws NoConvergence or SingularMatrix.
std::pair<Vec, Vec> project_to_manifold(const MechanicalSystem& sys, const Vec& q, const Vec& p,
                                        const ProjectionSettings& settings = {});

/// N data steps of size dt. Each data step runs `substeps` RK4 steps of the
/// constrained dynamics with projection after each, under the control sampled
/// at the data-step start (zero-order hold). The initial state is projected
/// first; failures are tagged with the data step.
Trajectory generate_trajectory(const MechanicalSystem& sys, const PhasePoint& x0, const ControlSignal& ctrl,
                               std::size_t N, double dt, int substeps = 10);

/// max |φ| over the trajectory (0 for unconstrained systems).
double max_constraint_violation(const MechanicalSystem& sys, const Trajectory& traj);

}  // namespace dirac
