#include "dirac/systems.hpp"

#include "dirac/errors.hpp"
#include "dirac/random.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace dirac {

namespace {

Eigen::Vector2d perp(const Eigen::Vector2d& v) { return {-v.y(), v.x()}; }

void require_size(const Vec& v, Index n, const char* what) {
  if (v.size() != n) {
    std::ostringstream os;
    os << what << " has length " << v.size() << ", expected " << n;
    throw DimensionError(os.str());
  }
}

}  // namespace

// --- MechanicalSystem defaults ----------------------------------------------

Vec MechanicalSystem::constraints(const Vec&) const { return Vec(0); }

Mat MechanicalSystem::constraint_jacobian(const Vec&) const { return Mat(0, n_q()); }

Vec MechanicalSystem::constraint_curvature(const Vec& q, const Vec& qdot) const {
  if (n_constraints() == 0) return Vec(0);
  const double h = 1e-6 / (1.0 + qdot.norm());
  const Mat dj = (constraint_jacobian(q + h * qdot) - constraint_jacobian(q - h * qdot)) / (2 * h);
  return dj * qdot;
}

Vec MechanicalSystem::coriolis(const Vec&, const Vec&) const { return Vec::Zero(n_p()); }

// --- DampedDrivenOscillator ---------------------------------------------------

DampedDrivenOscillator::DampedDrivenOscillator(double mass, double stiffness, double damping)
    : mass_(mass), stiffness_(stiffness), damping_(damping) {
  if (!(mass > 0)) throw ConfigError("oscillator mass must be positive");
  if (damping < 0) throw ConfigError("oscillator damping must be non-negative");
}

std::vector<std::pair<std::string, double>> DampedDrivenOscillator::parameters() const {
  return {{"mass", mass_}, {"stiffness", stiffness_}, {"damping", damping_}};
}

Mat DampedDrivenOscillator::mass_matrix(const Vec&) const { return Mat::Constant(1, 1, mass_); }

double DampedDrivenOscillator::potential(const Vec& q) const {
  require_size(q, 1, "q");
  return 0.5 * stiffness_ * q(0) * q(0);
}

Vec DampedDrivenOscillator::potential_gradient(const Vec& q) const {
  require_size(q, 1, "q");
  return Vec::Constant(1, stiffness_ * q(0));
}

Mat DampedDrivenOscillator::damping_matrix(const Vec&) const {
  return Mat::Constant(1, 1, damping_);
}

Mat DampedDrivenOscillator::input_matrix(const Vec&) const { return Mat::Constant(1, 1, 1.0); }

std::pair<Vec, Vec> DampedDrivenOscillator::sample_state(Rng& rng, double position_range,
                                                         double rate_range) const {
  const double q = uniform(rng, -position_range, position_range);
  const double v = uniform(rng, -rate_range, rate_range);
  return {Vec::Constant(1, q), Vec::Constant(1, mass_ * v)};
}

// --- PendulumOnCircle ---------------------------------------------------------

PendulumOnCircle::PendulumOnCircle(double mass, double length, double gravity, double damping)
    : mass_(mass), length_(length), gravity_(gravity), damping_(damping) {
  if (!(mass > 0) || !(length > 0)) throw ConfigError("pendulum mass and length must be positive");
  if (damping < 0) throw ConfigError("pendulum damping must be non-negative");
}

std::vector<std::pair<std::string, double>> PendulumOnCircle::parameters() const {
  return {{"mass", mass_}, {"length", length_}, {"gravity", gravity_}, {"damping", damping_}};
}

Mat PendulumOnCircle::mass_matrix(const Vec&) const { return mass_ * Mat::Identity(2, 2); }

double PendulumOnCircle::potential(const Vec& q) const {
  require_size(q, 2, "q");
  return mass_ * gravity_ * (q(1) + length_);
}

Vec PendulumOnCircle::potential_gradient(const Vec& q) const {
  require_size(q, 2, "q");
  return Eigen::Vector2d(0.0, mass_ * gravity_);
}

Mat PendulumOnCircle::damping_matrix(const Vec&) const { return damping_ * Mat::Identity(2, 2); }

Mat PendulumOnCircle::input_matrix(const Vec& q) const {
  require_size(q, 2, "q");
  Mat b(2, 1);
  b.col(0) = perp(q.head<2>()) / length_;
  return b;
}

Vec PendulumOnCircle::constraints(const Vec& q) const {
  require_size(q, 2, "q");
  return Vec::Constant(1, 0.5 * (q.squaredNorm() - length_ * length_));
}

Mat PendulumOnCircle::constraint_jacobian(const Vec& q) const {
  require_size(q, 2, "q");
  return q.transpose();
}

Vec PendulumOnCircle::constraint_curvature(const Vec&, const Vec& qdot) const {
  return Vec::Constant(1, qdot.squaredNorm());
}

std::pair<Vec, Vec> PendulumOnCircle::sample_state(Rng& rng, double position_range,
                                                   double rate_range) const {
  const double theta = uniform(rng, -position_range, position_range);
  const double omega = uniform(rng, -rate_range, rate_range);
  const Eigen::Vector2d x(length_ * std::sin(theta), -length_ * std::cos(theta));
  const Eigen::Vector2d v = length_ * omega * Eigen::Vector2d(std::cos(theta), std::sin(theta));
  return {x, mass_ * v};
}

// --- TwoLinkPinned ------------------------------------------------------------

TwoLinkPinned::TwoLinkPinned(double mass1, double mass2, double length1, double length2,
                             double gravity, double damping1, double damping2)
    : mass1_(mass1),
      mass2_(mass2),
      length1_(length1),
      length2_(length2),
      gravity_(gravity),
      damping1_(damping1),
      damping2_(damping2) {
  if (!(mass1 > 0) || !(mass2 > 0) || !(length1 > 0) || !(length2 > 0))
    throw ConfigError("two-link masses and lengths must be positive");
  if (damping1 < 0 || damping2 < 0) throw ConfigError("two-link damping must be non-negative");
}

std::vector<std::pair<std::string, double>> TwoLinkPinned::parameters() const {
  return {{"mass1", mass1_},     {"mass2", mass2_},       {"length1", length1_},
          {"length2", length2_}, {"gravity", gravity_},   {"damping1", damping1_},
          {"damping2", damping2_}};
}

Mat TwoLinkPinned::mass_matrix(const Vec&) const {
  Vec d(4);
  d << mass1_, mass1_, mass2_, mass2_;
  return d.asDiagonal();
}

double TwoLinkPinned::potential(const Vec& q) const {
  require_size(q, 4, "q");
  return gravity_ * (mass1_ * (q(1) + length1_) + mass2_ * (q(3) + length1_ + length2_));
}

Vec TwoLinkPinned::potential_gradient(const Vec& q) const {
  require_size(q, 4, "q");
  Vec g(4);
  g << 0.0, gravity_ * mass1_, 0.0, gravity_ * mass2_;
  return g;
}

Mat TwoLinkPinned::damping_matrix(const Vec&) const {
  const Mat i2 = Mat::Identity(2, 2);
  Mat d(4, 4);
  d << (damping1_ + damping2_) * i2, -damping2_ * i2, -damping2_ * i2, damping2_ * i2;
  return d;
}

Mat TwoLinkPinned::input_matrix(const Vec& q) const {
  require_size(q, 4, "q");
  const Eigen::Vector2d x1 = q.segment<2>(0);
  const Eigen::Vector2d d = q.segment<2>(2) - x1;
  const Eigen::Vector2d t1 = perp(x1) / (length1_ * length1_);
  const Eigen::Vector2d t2 = perp(d) / (length2_ * length2_);
  Mat b = Mat::Zero(4, 2);
  b.block<2, 1>(0, 0) = t1;
  b.block<2, 1>(0, 1) = -t1 - t2;
  b.block<2, 1>(2, 1) = t2;
  return b;
}

Vec TwoLinkPinned::constraints(const Vec& q) const {
  require_size(q, 4, "q");
  const Eigen::Vector2d x1 = q.segment<2>(0);
  const Eigen::Vector2d d = q.segment<2>(2) - x1;
  return Eigen::Vector2d(0.5 * (x1.squaredNorm() - length1_ * length1_),
                         0.5 * (d.squaredNorm() - length2_ * length2_));
}

Mat TwoLinkPinned::constraint_jacobian(const Vec& q) const {
  require_size(q, 4, "q");
  const Eigen::Vector2d x1 = q.segment<2>(0);
  const Eigen::Vector2d d = q.segment<2>(2) - x1;
  Mat j = Mat::Zero(2, 4);
  j.block<1, 2>(0, 0) = x1.transpose();
  j.block<1, 2>(1, 0) = -d.transpose();
  j.block<1, 2>(1, 2) = d.transpose();
  return j;
}

Vec TwoLinkPinned::constraint_curvature(const Vec&, const Vec& qdot) const {
  const Eigen::Vector2d v1 = qdot.segment<2>(0);
  const Eigen::Vector2d dv = qdot.segment<2>(2) - v1;
  return Eigen::Vector2d(v1.squaredNorm(), dv.squaredNorm());
}

std::pair<Vec, Vec> TwoLinkPinned::sample_state(Rng& rng, double position_range,
                                                double rate_range) const {
  const double th1 = uniform(rng, -position_range, position_range);
  const double th2 = uniform(rng, -position_range, position_range);
  const double w1 = uniform(rng, -rate_range, rate_range);
  const double w2 = uniform(rng, -rate_range, rate_range);
  const Eigen::Vector2d e1(std::sin(th1), -std::cos(th1));
  const Eigen::Vector2d e2(std::sin(th2), -std::cos(th2));
  const Eigen::Vector2d x1 = length1_ * e1;
  const Eigen::Vector2d x2 = x1 + length2_ * e2;
  const Eigen::Vector2d v1 = length1_ * w1 * perp(e1);
  const Eigen::Vector2d v2 = v1 + length2_ * w2 * perp(e2);
  Vec q(4), p(4);
  q << x1, x2;
  p << mass1_ * v1, mass2_ * v2;
  return {q, p};
}

// --- factory ------------------------------------------------------------------

std::vector<std::pair<std::string, double>> system_parameter_defaults(const std::string& id) {
  if (id == "damped_oscillator") return {{"mass", 1.0}, {"stiffness", 1.0}, {"damping", 0.1}};
  if (id == "pendulum_on_circle")
    return {{"mass", 1.0}, {"length", 1.0}, {"gravity", 9.81}, {"damping", 0.1}};
  if (id == "two_link_pinned")
    return {{"mass1", 1.0},   {"mass2", 1.0},    {"length1", 1.0},  {"length2", 1.0},
            {"gravity", 9.81}, {"damping1", 0.05}, {"damping2", 0.05}};
  throw ConfigError("unknown system id '" + id + "'");
}

std::unique_ptr<MechanicalSystem> make_system(const std::string& id,
                                              const std::map<std::string, double>& params) {
  auto defaults = system_parameter_defaults(id);
  std::map<std::string, double> v(defaults.begin(), defaults.end());
  for (const auto& [key, value] : params) {
    if (!v.contains(key)) throw ConfigError("unknown parameter '" + key + "' for system " + id);
    v[key] = value;
  }
  if (id == "damped_oscillator")
    return std::make_unique<DampedDrivenOscillator>(v["mass"], v["stiffness"], v["damping"]);
  if (id == "pendulum_on_circle")
    return std::make_unique<PendulumOnCircle>(v["mass"], v["length"], v["gravity"], v["damping"]);
  return std::make_unique<TwoLinkPinned>(v["mass1"], v["mass2"], v["length1"], v["length2"],
                                         v["gravity"], v["damping1"], v["damping2"]);
}

// --- dynamics -----------------------------------------------------------------

Vec velocity(const MechanicalSystem& sys, const Vec& q, const Vec& p) {
  require_size(q, sys.n_q(), "q");
  require_size(p, sys.n_p(), "p");
  const Eigen::LDLT<Mat> ldlt(sys.mass_matrix(q));
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      (ldlt.vectorD().array() <= 0.0).any())
    throw SingularMatrix("mass matrix is not positive definite");
  return ldlt.solve(p);
}

double hamiltonian(const MechanicalSystem& sys, const Vec& q, const Vec& p) {
  return 0.5 * p.dot(velocity(sys, q, p)) + sys.potential(q);
}

Vec constraint_multipliers(const MechanicalSystem& sys, const Vec& q, const Vec& p,
                           const Vec& u) {
  const Index m = sys.n_constraints();
  if (m == 0) return Vec(0);
  require_size(u, sys.n_u(), "u");

  const Mat mass = sys.mass_matrix(q);
  const Eigen::LDLT<Mat> mass_ldlt(mass);
  if (mass_ldlt.info() != Eigen::Success || !mass_ldlt.isPositive())
    throw SingularMatrix("mass matrix is not positive definite");

  const Vec qdot = mass_ldlt.solve(p);
  const Mat jc = sys.constraint_jacobian(q);
  const Mat minv_jt = mass_ldlt.solve(jc.transpose());
  const Mat gram = jc * minv_jt;

  const Eigen::SelfAdjointEigenSolver<Mat> eig(gram, Eigen::EigenvaluesOnly);
  const double largest = eig.eigenvalues().cwiseAbs().maxCoeff();
  const double smallest = eig.eigenvalues().minCoeff();
  if (!(smallest > 1e-12 * std::max(1.0, largest))) {
    std::ostringstream os;
    os << "constraint Gram matrix J_c M^-1 J_c^T is rank deficient (smallest eigenvalue "
       << smallest << ")";
    throw SingularMatrix(os.str());
  }

  const Vec force = sys.input_matrix(q) * u - sys.potential_gradient(q) -
                    sys.damping_matrix(q) * qdot - sys.coriolis(q, qdot);
  const Vec rhs = -jc * mass_ldlt.solve(force) - sys.constraint_curvature(q, qdot);
  return gram.ldlt().solve(rhs);
}

PhaseVelocity dynamics_rhs(const MechanicalSystem& sys, const Vec& q, const Vec& p, double,
                           const Vec& u) {
  require_size(u, sys.n_u(), "u");
  PhaseVelocity out;
  out.dq = velocity(sys, q, p);
  out.dp = sys.input_matrix(q) * u - sys.potential_gradient(q) - sys.damping_matrix(q) * out.dq -
           sys.coriolis(q, out.dq);
  if (sys.n_constraints() > 0)
    out.dp += sys.constraint_jacobian(q).transpose() * constraint_multipliers(sys, q, p, u);
  return out;
}

NonconservativePower nonconservative_power(const MechanicalSystem& sys, const Vec& q,
                                           const Vec& p, const Vec& u) {
  require_size(u, sys.n_u(), "u");
  const Vec qdot = velocity(sys, q, p);
  return {u.dot(sys.input_matrix(q).transpose() * qdot), qdot.dot(sys.damping_matrix(q) * qdot)};
}

// --- ControlSignal ------------------------------------------------------------

Vec ControlSignal::operator()(double t) const {
  const Index n = amplitude.size();
  switch (kind) {
    case Kind::zero:
      return Vec::Zero(n);
    case Kind::constant:
      return amplitude;
    case Kind::sinusoid:
      return amplitude * std::sin(2.0 * std::numbers::pi * frequency_hz * t);
    case Kind::piecewise_random: {
      // The small offset keeps grid times k·dt that land on an interval
      // boundary in the interval they start.
      const auto interval = static_cast<std::uint64_t>(std::floor(t / hold_s + 1e-9));
      Vec u(n);
      for (Index i = 0; i < n; ++i)
        u(i) = amplitude(i) *
               (2.0 * hashed_uniform01(seed, interval, static_cast<std::uint64_t>(i)) - 1.0);
      return u;
    }
  }
  return Vec::Zero(n);
}

ControlSignal::Kind parse_control_kind(const std::string& name) {
  if (name == "zero") return ControlSignal::Kind::zero;
  if (name == "constant") return ControlSignal::Kind::constant;
  if (name == "sinusoid") return ControlSignal::Kind::sinusoid;
  if (name == "piecewise_random") return ControlSignal::Kind::piecewise_random;
  throw ConfigError("unknown control kind '" + name + "'");
}

std::string to_string(ControlSignal::Kind kind) {
  switch (kind) {
    case ControlSignal::Kind::zero:
      return "zero";
    case ControlSignal::Kind::constant:
      return "constant";
    case ControlSignal::Kind::sinusoid:
      return "sinusoid";
    case ControlSignal::Kind::piecewise_random:
      return "piecewise_random";
  }
  return "zero";
}

}  // namespace dirac
