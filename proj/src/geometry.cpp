#include "dirac/geometry.hpp"

#include "dirac/integrators.hpp"

#include <algorithm>
#include <cmath>

namespace dirac {

namespace {

void check_lifted(const LiftedPoint& z, const MechanicalSystem& sys) {
  if (z.q.size() != sys.n_q() || z.p.size() != sys.n_p() || z.lambda.size() != sys.n_constraints() ||
      z.pi.size() != sys.n_constraints())
    throw DimensionError("lifted point does not match system " + sys.id());
}

double lambda_phi(const LiftedPoint& z, const MechanicalSystem& sys) {
  return z.lambda.size() == 0 ? 0.0 : z.lambda.dot(sys.constraints(z.q));
}

}  // namespace

GaugeResidual gauge_residual(const LiftedPoint& z, const MechanicalSystem& sys) {
  check_lifted(z, sys);
  GaugeResidual r;
  r.r0 = z.p0 + hamiltonian(sys, z.q, z.p) + lambda_phi(z, sys);
  r.r_pi = z.pi.size() == 0 ? 0.0 : z.pi.cwiseAbs().maxCoeff();
  return r;
}

double extended_hamiltonian(const LiftedPoint& z, const MechanicalSystem& sys) {
  check_lifted(z, sys);
  return hamiltonian(sys, z.q, z.p) + z.p0 + lambda_phi(z, sys);
}

bool satisfies_gauge(const LiftedPoint& z, const MechanicalSystem& sys, double rtol) {
  const GaugeResidual r = gauge_residual(z, sys);
  const double scale = rtol * (1.0 + std::abs(hamiltonian(sys, z.q, z.p)));
  return std::abs(r.r0) <= scale && r.r_pi <= scale;
}

LiftedPoint lift_point(const MechanicalSystem& sys, const PhasePoint& x) {
  LiftedPoint z;
  z.q0 = x.t;
  z.q = x.q;
  z.p = x.p;
  z.lambda = constraint_multipliers(sys, x.q, x.p, x.u);
  z.pi = Vec::Zero(z.lambda.size());
  z.p0 = -(hamiltonian(sys, x.q, x.p) + lambda_phi(z, sys));
  return z;
}

LiftedTrajectory dirac_lift(const Trajectory& traj, const MechanicalSystem& sys, const LiftSettings& settings) {
  LiftedTrajectory out;
  out.dt = traj.dt;
  out.meta = traj.meta;
  const std::size_t n = traj.states.size();
  out.points.reserve(n);
  out.controls.reserve(n);
  out.p_ctrl.assign(n, 0.0);
  out.p_diss.assign(n, 0.0);

  for (std::size_t k = 0; k < n; ++k) {
    const PhasePoint& x = traj.states[k];
    try {
      out.points.push_back(lift_point(sys, x));
    } catch (const SingularMatrix& e) {
      throw e.at_step(k);
    }
    out.controls.push_back(x.u);
  }

  // Each hold interval is re-propagated from x_k under u_k with the reference
  // RK4 scheme, carrying the two power integrals as extra state.
  const Index nq = sys.n_q();
  const int substeps = std::max(1, settings.substeps);
  const double h = traj.dt / substeps;
  for (std::size_t k = 0; k + 1 < n; ++k) {
    const PhasePoint& a = traj.states[k];
    auto rhs = [&](const Vec& z, double t) {
      const Vec q = z.head(nq), p = z.segment(nq, nq);
      const PhaseVelocity d = dynamics_rhs(sys, q, p, t, a.u);
      const NonconservativePower pw = nonconservative_power(sys, q, p, a.u);
      Vec out(2 * nq + 2);
      out << d.dq, d.dp, pw.control, pw.dissipation;
      return out;
    };
    Vec z(2 * nq + 2);
    z << a.q, a.p, 0.0, 0.0;
    try {
      for (int s = 0; s < substeps; ++s) {
        z = rk4_step(rhs, z, a.t + s * h, h);
        auto [q, p] = project_to_manifold(sys, z.head(nq), z.segment(nq, nq));
        z.head(nq) = q;
        z.segment(nq, nq) = p;
      }
    } catch (const NoConvergence& e) {
      throw e.at_step(k);
    } catch (const SingularMatrix& e) {
      throw e.at_step(k);
    }
    out.p_ctrl[k + 1] = out.p_ctrl[k] - z(2 * nq);
    out.p_diss[k + 1] = out.p_diss[k] - z(2 * nq + 1);
  }
  return out;
}

double work_energy_residual(const LiftedTrajectory& lifted, const MechanicalSystem& sys) {
  if (lifted.points.empty()) return 0.0;
  const double h0 = hamiltonian(sys, lifted.points[0].q, lifted.points[0].p);
  double worst = 0.0;
  for (std::size_t k = 0; k < lifted.points.size(); ++k) {
    const double dh = hamiltonian(sys, lifted.points[k].q, lifted.points[k].p) - h0;
    const double work = -(lifted.p_ctrl[k] - lifted.p_ctrl[0]) + (lifted.p_diss[k] - lifted.p_diss[0]);
    worst = std::max(worst, std::abs(dh - work));
  }
  return worst;
}

double extended_hamiltonian_drift(const LiftedTrajectory& lifted, const MechanicalSystem& sys) {
  if (lifted.points.empty()) return 0.0;
  const double h0 = extended_hamiltonian(lifted.points[0], sys);
  double worst = 0.0;
  for (const LiftedPoint& z : lifted.points) worst = std::max(worst, std::abs(extended_hamiltonian(z, sys) - h0));
  return worst;
}

Mat finite_difference_jacobian(const FlatMap& f, const Vec& x, double fd_step) {
  if (!(fd_step > 0.0)) throw DimensionError("finite_difference_jacobian: fd_step must be positive");
  Mat jac;
  Vec xp = x, xm = x;
  for (Index j = 0; j < x.size(); ++j) {
    xp(j) = x(j) + fd_step;
    xm(j) = x(j) - fd_step;
    const Vec fp = f(xp), fm = f(xm);
    if (!fp.allFinite() || !fm.allFinite())
      throw NumericalError("non-finite map output in finite-difference stencil");
    if (j == 0) jac.resize(fp.size(), x.size());
    jac.col(j) = (fp - fm) / (2.0 * fd_step);
    xp(j) = xm(j) = x(j);
  }
  return jac;
}

double symplecticity_residual(const Mat& A) {
  if (A.rows() != A.cols() || A.rows() % 2 != 0) throw DimensionError("symplecticity_residual: need an even square matrix");
  const Mat J = canonical_form(A.rows() / 2);
  return (A.transpose() * J * A - J).cwiseAbs().maxCoeff();
}

double pullback_residual(const FlatMap& lift, const Vec& x, double fd_step) {
  if (x.size() % 2 != 0) throw DimensionError("pullback_residual: base state must have even length");
  const Mat D = finite_difference_jacobian(lift, x, fd_step);
  if (D.rows() % 2 != 0) throw DimensionError("pullback_residual: lifted state must have even length");
  const Mat Jt = canonical_form(D.rows() / 2);
  const Mat J = canonical_form(x.size() / 2);
  return (D.transpose() * Jt * D - J).cwiseAbs().maxCoeff();
}

FlatMap frozen_clock_lift(const MechanicalSystem& sys, double t0, const Vec& u) {
  const Index n = sys.n_q();
  return [&sys, t0, u, n](const Vec& x) {
    PhasePoint s{x.head(n), x.tail(n), t0, u};
    return lift_point(sys, s).flatten().eval();
  };
}

Vec omega_flat(const Mat& omega, const Vec& v) {
  if (omega.rows() != v.size()) throw DimensionError("omega_flat: dimension mismatch");
  return omega.transpose() * v;
}

double dirac_pairing(const Vec& v, const Vec& alpha, const Vec& w, const Vec& beta) {
  if (v.size() != alpha.size() || w.size() != beta.size() || v.size() != w.size())
    throw DimensionError("dirac_pairing: dimension mismatch");
  return alpha.dot(w) + beta.dot(v);
}

bool isotropy_check(const Vec& v, const Vec& alpha, const Vec& w, const Vec& beta, const Mat& omega,
                    double tol) {
  if (omega.rows() != v.size() || omega.cols() != v.size())
    throw DimensionError("isotropy_check: form does not match vectors");
  return std::abs(dirac_pairing(v, alpha, w, beta)) <=
         tol * (1.0 + (v.norm() + alpha.norm()) * (w.norm() + beta.norm()));
}

}  // namespace dirac
