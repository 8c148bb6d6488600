#include "dirac/integrators.hpp"

#include <algorithm>

namespace dirac {

std::pair<Vec, Vec> project_to_manifold(const MechanicalSystem& sys, const Vec& q, const Vec& p,
                                        const ProjectionSettings& settings) {
  if (sys.n_constraints() == 0) return {q, p};
  Vec qn = q;
  double residual = sys.constraints(qn).cwiseAbs().maxCoeff();
  int it = 0;
  const double scale = std::max(1.0, q.squaredNorm());
  while (residual > settings.tol * scale) {
    if (it == settings.max_iter || !std::isfinite(residual))
      throw NoConvergence("constraint projection", residual, it);
    const Mat J = sys.constraint_jacobian(qn);
    const Eigen::LDLT<Mat> gram(J * J.transpose());
    if (gram.info() != Eigen::Success || !gram.isPositive() ||
        gram.vectorD().minCoeff() <= 1e-14 * std::max(1.0, gram.vectorD().maxCoeff()))
      throw SingularMatrix("constraint projection: rank-deficient constraint Jacobian");
    qn -= J.transpose() * gram.solve(sys.constraints(qn));
    residual = sys.constraints(qn).cwiseAbs().maxCoeff();
    ++it;
  }

  const Mat J = sys.constraint_jacobian(qn);
  const Eigen::LDLT<Mat> mass(sys.mass_matrix(qn));
  const Mat MinvJt = mass.solve(J.transpose());
  const Eigen::LDLT<Mat> gram(J * MinvJt);
  if (gram.info() != Eigen::Success || gram.vectorD().minCoeff() <= 1e-14 * std::max(1.0, gram.vectorD().maxCoeff()))
    throw SingularMatrix("constraint projection: singular Gram matrix");
  const Vec mu = gram.solve(J * mass.solve(p));
  return {qn, p - J.transpose() * mu};
}

Trajectory generate_trajectory(const MechanicalSystem& sys, const PhasePoint& x0, const ControlSignal& ctrl,
                               std::size_t N, double dt, int substeps) {
  if (x0.q.size() != sys.n_q() || x0.p.size() != sys.n_p())
    throw DimensionError("generate_trajectory: initial state does not match system " + sys.id());
  if (!(dt > 0.0) || substeps < 1) throw ConfigError("generate_trajectory: dt and substeps must be positive");
  if (ctrl.kind != ControlSignal::Kind::zero && ctrl.channels() != sys.n_u())
    throw DimensionError("generate_trajectory: control has " + std::to_string(ctrl.channels()) +
                         " channels, system expects " + std::to_string(sys.n_u()));
  const Index n = sys.n_q();

  auto control_at = [&](double t) {
    Vec u = ctrl(t);
    return u.size() == 0 ? Vec::Zero(sys.n_u()).eval() : u;
  };

  Trajectory traj;
  traj.dt = dt;
  traj.meta.system = sys.id();
  traj.meta.parameters = sys.parameters();
  traj.meta.seed = ctrl.seed;
  traj.states.reserve(N + 1);

  Vec q, p;
  try {
    std::tie(q, p) = project_to_manifold(sys, x0.q, x0.p);
  } catch (const NumericalError& e) {
    throw NumericalError("initial state is infeasible: " + std::string(e.what()), 0);
  }
  const double t0 = x0.t;
  traj.states.push_back(PhasePoint{q, p, t0, control_at(t0)});

  const double h = dt / substeps;
  for (std::size_t k = 0; k < N; ++k) {
    const double tk = t0 + static_cast<double>(k) * dt;
    const Vec u = traj.states.back().u;
    auto rhs = [&](const Vec& z, double t) {
      const PhaseVelocity d = dynamics_rhs(sys, z.head(n), z.tail(n), t, u);
      Vec out(2 * n);
      out << d.dq, d.dp;
      return out;
    };
    try {
      Vec z(2 * n);
      z << q, p;
      for (int s = 0; s < substeps; ++s) {
        z = rk4_step(rhs, z, tk + s * h, h);
        std::tie(q, p) = project_to_manifold(sys, z.head(n), z.tail(n));
        z << q, p;
      }
    } catch (const NoConvergence& e) {
      throw e.at_step(k);
    } catch (const SingularMatrix& e) {
      throw e.at_step(k);
    } catch (const NumericalError& e) {
      throw NumericalError(e.detail(), k);
    }
    const double t_next = t0 + static_cast<double>(k + 1) * dt;
    traj.states.push_back(PhasePoint{q, p, t_next, control_at(t_next)});
  }
  return traj;
}

double max_constraint_violation(const MechanicalSystem& sys, const Trajectory& traj) {
  if (sys.n_constraints() == 0) return 0.0;
  double worst = 0.0;
  for (const PhasePoint& x : traj.states) worst = std::max(worst, sys.constraints(x.q).cwiseAbs().maxCoeff());
  return worst;
}

}  // namespace dirac
