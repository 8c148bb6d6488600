#pragma once

#include "dirac/errors.hpp"
#include "dirac/phase_space.hpp"
#include "dirac/systems.hpp"
#include "dirac/trajectory.hpp"
#include "dirac/types.hpp"

#include <functional>

namespace dirac {

inline Index lifted_dimension(Index n_q, Index n_p, Index m) {
  if (n_q < 0 || n_p < 0 || m < 0) throw DimensionError("lifted_dimension: negative count");
  return n_q + n_p + 2 + 2 * m;
}

/// J = [[0, I_N], [−I_N, 0]] in the (all positions, all momenta) ordering.
template <typename Scalar = double>
Matrix<Scalar> canonical_form(Index N) {
  if (N < 1) throw DimensionError("canonical_form: N must be positive");
  Matrix<Scalar> J = Matrix<Scalar>::Zero(2 * N, 2 * N);
  J.topRightCorner(N, N).setIdentity();
  J.bottomLeftCorner(N, N) = -Matrix<Scalar>::Identity(N, N);
  return J;
}

/// aᵀ J b.
template <typename Scalar>
Scalar symplectic_pairing(const Vector<Scalar>& a, const Vector<Scalar>& b, const Matrix<Scalar>& J) {
  if (a.size() != J.rows() || b.size() != J.rows() || J.rows() != J.cols())
    throw DimensionError("symplectic_pairing: dimension mismatch");
  return a.dot(J * b);
}

struct GaugeResidual {
  double r0 = 0.0;    // p0 + H + λ·φ
  double r_pi = 0.0;  // max |π|
};

GaugeResidual gauge_residual(const LiftedPoint& z, const MechanicalSystem& sys);

/// H̃ = H(q, p) + p0 + λ·φ(q).
double extended_hamiltonian(const LiftedPoint& z, const MechanicalSystem& sys);

/// Gauge tolerance: r0 and r_pi at most 1e−8·(1 + |H|).
bool satisfies_gauge(const LiftedPoint& z, const MechanicalSystem& sys, double rtol = 1e-8);

/// Lift of one state: q0 = t, λ from the multiplier elimination, π = 0,
/// p0 = −(H + λ·φ).
LiftedPoint lift_point(const MechanicalSystem& sys, const PhasePoint& x);

struct LiftSettings {
  int substeps = 10;  // RK4 substeps per interval for the work channels
};

/// Lifts a whole trajectory and integrates the work channels
///   p_ctrl = −∫ uᵀBᵀq̇,  p_diss = −∫ q̇ᵀDq̇
/// along the reference flow of each hold interval (u_k on [t_k, t_{k+1})).
/// Rank drops raise SingularMatrix tagged with the step.
LiftedTrajectory dirac_lift(const Trajectory& traj, const MechanicalSystem& sys, const LiftSettings& settings = {});

/// max_k |(H_k − H_0) − (W_ctrl,k − W_diss,k)| with W = −p_channel.
double work_energy_residual(const LiftedTrajectory& lifted, const MechanicalSystem& sys);

/// max_k |H̃_k − H̃_0|.
double extended_hamiltonian_drift(const LiftedTrajectory& lifted, const MechanicalSystem& sys);

using FlatMap = std::function<Vec(const Vec&)>;

/// ‖DΨᵀ J̃ DΨ − J‖_max with DΨ from central differences. x is the flat (q, p)
/// state; the lift returns a flat lifted vector.
double pullback_residual(const FlatMap& lift, const Vec& x, double fd_step = 1e-5);

/// The analytic lift at a frozen clock value t0 and fixed control u, as a
/// flat map (q, p) ↦ (t0, q, λ, −(H + λφ), p, 0).
FlatMap frozen_clock_lift(const MechanicalSystem& sys, double t0, const Vec& u);

/// Central-difference Jacobian of a flat map.
Mat finite_difference_jacobian(const FlatMap& f, const Vec& x, double fd_step = 1e-5);

/// ‖Aᵀ J A − J‖_max for a square Jacobian A.
double symplecticity_residual(const Mat& A);

/// α = ω♭ v, i.e. α(v') = ω(v, v').
Vec omega_flat(const Mat& omega, const Vec& v);

/// ⟨(v, α), (w, β)⟩ = α(w) + β(v).
double dirac_pairing(const Vec& v, const Vec& alpha, const Vec& w, const Vec& beta);

/// True when the pair is isotropic under dirac_pairing, to tol·(1 + |v||w|).
bool isotropy_check(const Vec& v, const Vec& alpha, const Vec& w, const Vec& beta, const Mat& omega,
                    double tol = 1e-12);

}  // namespace dirac
