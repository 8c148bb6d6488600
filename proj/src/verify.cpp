#include "dirac/verify.hpp"

#include "dirac/geometry.hpp"
#include "dirac/integrators.hpp"
#include "dirac/training.hpp"

#include <cmath>

namespace dirac {

namespace {

Check make_check(std::string name, double measured, double threshold, std::string note = "") {
  return {std::move(name), measured, threshold, std::isfinite(measured) && measured <= threshold, std::move(note)};
}

Vec uniform_vec(Rng& rng, Index n, double lo, double hi) {
  Vec v(n);
  for (Index i = 0; i < n; ++i) v(i) = uniform(rng, lo, hi);
  return v;
}

Mat uniform_mat(Rng& rng, Index r, Index c, double lo, double hi) {
  Mat m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = uniform(rng, lo, hi);
  return m;
}

}  // namespace

std::vector<Check> verify_geometry() {
  double square = 0.0, skew = 0.0;
  for (Index N = 1; N <= 16; ++N) {
    const Mat J = canonical_form(N);
    square = std::max(square, (J * J + Mat::Identity(2 * N, 2 * N)).cwiseAbs().maxCoeff());
    skew = std::max(skew, (J.transpose() + J).cwiseAbs().maxCoeff());
  }
  const Index lifted = lifted_dimension(19, 18, 24);

  Rng rng = seeded_rng(3);
  double isotropy = 0.0;
  for (int i = 0; i < 50; ++i) {
    const Index N = 1 + static_cast<Index>(uniform_index(rng, 8));
    const Mat J = canonical_form(N);
    const Vec v = uniform_vec(rng, 2 * N, -1, 1), w = uniform_vec(rng, 2 * N, -1, 1);
    isotropy = std::max(isotropy, std::abs(dirac_pairing(v, omega_flat(J, v), w, omega_flat(J, w))));
  }
  return {make_check("geometry.J_squared", square, 0.0, "N = 1..16, exact"),
          make_check("geometry.J_skew", skew, 0.0, "N = 1..16, exact"),
          make_check("geometry.lifted_dimension", std::abs(static_cast<double>(lifted) - 87.0), 0.0,
                     "(19, 18, 24) -> " + std::to_string(lifted)),
          make_check("geometry.graph_isotropy", isotropy, 1e-12)};
}

std::vector<Check> verify_integrators() {
  // Linear Hamiltonian field ż = J S z with S symmetric positive definite.
  Rng rng = seeded_rng(5);
  const Index N = 3;
  const Mat R = uniform_mat(rng, 2 * N, 2 * N, -1, 1);
  const Mat S = R.transpose() * R + Mat::Identity(2 * N, 2 * N);
  const Mat A = canonical_form(N) * S;
  auto field = [&](const Vec& z, double) { return (A * z).eval(); };
  const double dt = 0.01;
  const Mat I = Mat::Identity(2 * N, 2 * N);
  const Mat cayley = (I - dt / 2 * A).partialPivLu().solve(I + dt / 2 * A);

  double cayley_err = 0.0;
  for (int i = 0; i < 20; ++i) {
    const Vec z = uniform_vec(rng, 2 * N, -1, 1);
    cayley_err = std::max(cayley_err, (implicit_midpoint_step(field, z, 0.0, dt, 1e-14) - cayley * z).cwiseAbs().maxCoeff());
  }

  Vec z = uniform_vec(rng, 2 * N, -1, 1);
  const double e0 = 0.5 * z.dot(S * z);
  double invariant = 0.0;
  for (int k = 0; k < 10000; ++k) {
    z = implicit_midpoint_step(field, z, k * dt, dt, 1e-14);
    invariant = std::max(invariant, std::abs(0.5 * z.dot(S * z) - e0));
  }

  // RK4 on the damped oscillator against its closed-form solution.
  const DampedDrivenOscillator osc(1.0, 1.0, 0.1);
  const double gamma = 0.05, wd = std::sqrt(1.0 - gamma * gamma), x0 = 1.0, v0 = 0.0, T = 2.0;
  const double exact = std::exp(-gamma * T) * (x0 * std::cos(wd * T) + (v0 + gamma * x0) / wd * std::sin(wd * T));
  auto rhs = [&](const Vec& y, double t) {
    const PhaseVelocity f = dynamics_rhs(osc, y.head(1), y.tail(1), t, Vec::Zero(1));
    Vec out(2);
    out << f.dq, f.dp;
    return out;
  };
  std::vector<double> errors;
  for (int steps : {20, 40, 80}) {
    Vec y(2);
    y << x0, v0;
    const double h = T / steps;
    for (int k = 0; k < steps; ++k) y = rk4_step(rhs, y, k * h, h);
    errors.push_back(std::abs(y(0) - exact));
  }
  const double order = std::log2(errors[1] / errors[2]);

  return {make_check("integrators.midpoint_vs_cayley", cayley_err, 1e-9),
          make_check("integrators.quadratic_invariant", invariant, 1e-10, "10^4 midpoint steps"),
          {"integrators.rk4_order", order, 3.8, std::isfinite(order) && order >= 3.8, "measured order, must be >= 3.8"}};
}

std::vector<Check> verify_lift(int points, std::uint64_t seed) {
  std::vector<Check> out;
  for (const std::string id : {"damped_oscillator", "pendulum_on_circle", "two_link_pinned"}) {
    const std::unique_ptr<MechanicalSystem> sys = make_system(id, {});
    Rng rng = seeded_rng(splitmix64(seed) ^ std::hash<std::string>{}(id));
    double worst = 0.0;
    for (int i = 0; i < points; ++i) {
      const auto [q, p] = sys->sample_state(rng, 1.0, 1.0);
      Vec x(q.size() + p.size());
      x << q, p;
      const Vec u = uniform_vec(rng, sys->n_u(), -1, 1);
      worst = std::max(worst, pullback_residual(frozen_clock_lift(*sys, uniform(rng, 0, 5), u), x));
    }
    out.push_back(make_check("lift.pullback." + id, worst, 1e-5, std::to_string(points) + " states"));
  }
  return out;
}

std::vector<Check> verify_gradients(std::uint64_t seed) {
  Rng rng = seeded_rng(seed);
  std::vector<Check> out;

  // PSN: 4 inputs, hidden 4, scalar head (333 parameters).
  PsnParams psn = init_psn(4, 4, 1, rng);
  psn.weights.head_W1 = uniform_mat(rng, 1, 4, -0.5, 0.5);
  psn.weights.head_W2 = uniform_mat(rng, 1, 4, -0.5, 0.5);
  psn.weights.head_b = uniform_mat(rng, 1, 1, -0.5, 0.5);
  psn.input_shift = uniform_vec(rng, 4, -0.5, 0.5);
  psn.input_scale = uniform_vec(rng, 4, 0.5, 2.0);
  psn.output_scale = uniform_vec(rng, 1, 0.5, 2.0);
  const int T = 4;
  const Index B = 5;
  std::vector<Mat> context;
  for (int i = 0; i < T; ++i) context.push_back(uniform_mat(rng, 4, B, -1, 1));
  const Mat target = uniform_mat(rng, 1, B, -1, 1);
  const GradientMismatch fm = compare_gradients(psn.weights, [&](ad::Tape& tape, const PsnWeights<ad::Var>& w) {
    return flow_matching_loss(tape, w, psn, context, target);
  });
  out.push_back(make_check("gradients.flow_matching", fm.worst, 1e-4,
                           std::to_string(fm.checked) + " parameters, worst at " + fm.where));

  const double dt = 0.01;
  const GradientMismatch mid = compare_gradients(psn.weights, [&](ad::Tape& tape, const PsnWeights<ad::Var>& w) {
    return flow_matching_loss_midpoint(tape, w, psn, context, target, dt, nullptr, 1e-13, 60);
  });
  out.push_back(make_check("gradients.flow_matching_midpoint", mid.worst, 1e-4,
                           std::to_string(mid.checked) + " parameters, worst at " + mid.where));

  // SympNet on a 4-position lifted space: 4 modules of width 6 (144 parameters).
  SympNetParams sn = init_sympnet(2, 1, 4, 6, rng);
  sn.q_shift = uniform_vec(rng, 4, -0.5, 0.5);
  sn.p_shift = uniform_vec(rng, 4, -0.5, 0.5);
  sn.q_scale = uniform_vec(rng, 4, 0.5, 2.0);
  sn.p_scale = sn.q_scale.cwiseInverse() * 1.3;
  const Mat inputs = uniform_mat(rng, 8, B, -1, 1);
  const Mat targets = inputs + uniform_mat(rng, 8, B, -0.1, 0.1);
  const Vec weights = uniform_vec(rng, 8, 0.5, 2.0);
  const GradientMismatch pl = compare_gradients(sn.weights, [&](ad::Tape& tape, const SympNetWeights<ad::Var>& w) {
    return prediction_loss(tape, w, sn, inputs, targets, 0.1, weights);
  });
  out.push_back(make_check("gradients.prediction", pl.worst, 1e-4,
                           std::to_string(pl.checked) + " parameters, worst at " + pl.where));
  return out;
}

double map_symplecticity(const std::function<Vec(const Vec&)>& map, const std::vector<Vec>& states) {
  double worst = 0.0;
  for (const Vec& z : states) {
    const double h = 1e-5 * std::max(1.0, z.cwiseAbs().maxCoeff());
    worst = std::max(worst, symplecticity_residual(finite_difference_jacobian(map, z, h)));
  }
  return worst;
}

std::vector<Vec> sympnet_sample_states(const SympNetParams& params, int points, Rng& rng) {
  const Index N = params.positions();
  std::vector<Vec> out;
  for (int i = 0; i < points; ++i) {
    Vec z(2 * N);
    for (Index j = 0; j < N; ++j) {
      z(j) = params.q_shift(j) + uniform(rng, -1, 1) / params.q_scale(j);
      z(N + j) = params.p_shift(j) + uniform(rng, -1, 1) / params.p_scale(j);
    }
    out.push_back(std::move(z));
  }
  return out;
}

double sympnet_symplecticity(const SympNetParams& params, double dt, int points, Rng& rng) {
  validate(params);
  return map_symplecticity([&](const Vec& z) { return sympnet_map(params, z, dt); },
                           sympnet_sample_states(params, points, rng));
}

std::vector<Check> verify_sympnet(const SympNetParams& params, double dt, const std::string& label, int points,
                                  std::uint64_t seed) {
  Rng rng = seeded_rng(seed);
  const double r = sympnet_symplecticity(params, dt, points, rng);
  return {make_check("sympnet.symplecticity", r, 1e-5, label + ", " + std::to_string(points) + " points")};
}

}  // namespace dirac
