#pragma once

#include "dirac/random.hpp"
#include "dirac/types.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace dirac {

/// Constrained, damped, controlled mechanical system in the momentum form
///
///   q̇ = M(q)⁻¹ p
///   ṗ = -∂V/∂q - D(q) q̇ - C(q, q̇) + B(q) u + J_c(q)ᵀ λ,   φ(q) = 0.
///
/// Implementations describe the geometry only; the free functions below
/// (hamiltonian, constraint_multipliers, dynamics_rhs, ...) assemble it.
class MechanicalSystem {
 public:
  virtual ~MechanicalSystem() = default;

  virtual std::string id() const = 0;
  /// Physical parameters in a fixed order, for metadata and fingerprints.
  virtual std::vector<std::pair<std::string, double>> parameters() const = 0;

  virtual Index n_q() const = 0;
  virtual Index n_p() const { return n_q(); }
  virtual Index n_u() const = 0;
  virtual Index n_constraints() const { return 0; }

  virtual Mat mass_matrix(const Vec& q) const = 0;
  virtual double potential(const Vec& q) const = 0;
  virtual Vec potential_gradient(const Vec& q) const = 0;
  virtual Mat damping_matrix(const Vec& q) const = 0;
  virtual Mat input_matrix(const Vec& q) const = 0;

  virtual Vec constraints(const Vec& q) const;
  virtual Mat constraint_jacobian(const Vec& q) const;
  /// (dJ_c/dt) q̇. Central differences of J_c along q̇ unless overridden.
  virtual Vec constraint_curvature(const Vec& q, const Vec& qdot) const;
  /// C(q, q̇). The Cartesian benchmarks absorb it into the coordinate choice,
  /// so the default is zero.
  virtual Vec coriolis(const Vec& q, const Vec& qdot) const;

  /// Draws a feasible state from generalized coordinates: positions uniform in
  /// ±position_range, rates uniform in ±rate_range (system-specific meaning).
  virtual std::pair<Vec, Vec> sample_state(Rng& rng, double position_range,
                                           double rate_range) const = 0;
};

/// m₀ q̈ = -k q - c q̇ + u.
class DampedDrivenOscillator final : public MechanicalSystem {
 public:
  DampedDrivenOscillator(double mass, double stiffness, double damping);

  std::string id() const override { return "damped_oscillator"; }
  std::vector<std::pair<std::string, double>> parameters() const override;
  Index n_q() const override { return 1; }
  Index n_u() const override { return 1; }

  Mat mass_matrix(const Vec& q) const override;
  double potential(const Vec& q) const override;
  Vec potential_gradient(const Vec& q) const override;
  Mat damping_matrix(const Vec& q) const override;
  Mat input_matrix(const Vec& q) const override;
  std::pair<Vec, Vec> sample_state(Rng& rng, double position_range,
                                   double rate_range) const override;

 private:
  double mass_, stiffness_, damping_;
};

/// Point mass in the plane held on a circle of radius L by
/// φ(x) = ½(|x|² − L²). Potential m₀ g (y + L) vanishes at the bottom; a scalar
/// input pushes along the tangent (−y, x)/L.
class PendulumOnCircle final : public MechanicalSystem {
 public:
  PendulumOnCircle(double mass, double length, double gravity, double damping);

  std::string id() const override { return "pendulum_on_circle"; }
  std::vector<std::pair<std::string, double>> parameters() const override;
  Index n_q() const override { return 2; }
  Index n_u() const override { return 1; }
  Index n_constraints() const override { return 1; }

  Mat mass_matrix(const Vec& q) const override;
  double potential(const Vec& q) const override;
  Vec potential_gradient(const Vec& q) const override;
  Mat damping_matrix(const Vec& q) const override;
  Mat input_matrix(const Vec& q) const override;
  Vec constraints(const Vec& q) const override;
  Mat constraint_jacobian(const Vec& q) const override;
  Vec constraint_curvature(const Vec& q, const Vec& qdot) const override;
  std::pair<Vec, Vec> sample_state(Rng& rng, double position_range,
                                   double rate_range) const override;

  double mass() const { return mass_; }
  double length() const { return length_; }
  double gravity() const { return gravity_; }

 private:
  double mass_, length_, gravity_, damping_;
};

/// Planar two-link arm pinned at the origin, in Cartesian coordinates of the
/// two endpoint masses (x₁, y₁, x₂, y₂) with two distance constraints.
/// Joint damping dissipates c₁|v₁|² + c₂|v₂ − v₁|²; inputs are the shoulder
/// and elbow torques.
class TwoLinkPinned final : public MechanicalSystem {
 public:
  TwoLinkPinned(double mass1, double mass2, double length1, double length2, double gravity,
                double damping1, double damping2);

  std::string id() const override { return "two_link_pinned"; }
  std::vector<std::pair<std::string, double>> parameters() const override;
  Index n_q() const override { return 4; }
  Index n_u() const override { return 2; }
  Index n_constraints() const override { return 2; }

  Mat mass_matrix(const Vec& q) const override;
  double potential(const Vec& q) const override;
  Vec potential_gradient(const Vec& q) const override;
  Mat damping_matrix(const Vec& q) const override;
  Mat input_matrix(const Vec& q) const override;
  Vec constraints(const Vec& q) const override;
  Mat constraint_jacobian(const Vec& q) const override;
  Vec constraint_curvature(const Vec& q, const Vec& qdot) const override;
  std::pair<Vec, Vec> sample_state(Rng& rng, double position_range,
                                   double rate_range) const override;

 private:
  double mass1_, mass2_, length1_, length2_, gravity_, damping1_, damping2_;
};

/// Builds a system from its id and named parameters. Missing parameters take
/// the documented defaults; unknown names or ids raise ConfigError.
std::unique_ptr<MechanicalSystem> make_system(const std::string& id,
                                              const std::map<std::string, double>& params);

/// Parameter names accepted by make_system for the given id, with defaults.
std::vector<std::pair<std::string, double>> system_parameter_defaults(const std::string& id);

// ---------------------------------------------------------------------------

struct PhaseVelocity {
  Vec dq;
  Vec dp;
};

struct NonconservativePower {
  double control = 0.0;      // uᵀ Bᵀ q̇
  double dissipation = 0.0;  // q̇ᵀ D q̇ ≥ 0
};

/// M(q)⁻¹ p. Throws SingularMatrix when M is not positive definite.
Vec velocity(const MechanicalSystem& sys, const Vec& q, const Vec& p);

double hamiltonian(const MechanicalSystem& sys, const Vec& q, const Vec& p);

/// Multipliers λ such that d²φ/dt² = 0 along the dynamics. Empty when the
/// system is unconstrained. Throws SingularMatrix on a rank-deficient Gram
/// matrix J_c M⁻¹ J_cᵀ.
Vec constraint_multipliers(const MechanicalSystem& sys, const Vec& q, const Vec& p, const Vec& u);

PhaseVelocity dynamics_rhs(const MechanicalSystem& sys, const Vec& q, const Vec& p, double t,
                           const Vec& u);

NonconservativePower nonconservative_power(const MechanicalSystem& sys, const Vec& q,
                                           const Vec& p, const Vec& u);

/// Control input as a function of time. Piecewise-constant random signals are
/// counter-based (a hash of seed, interval and channel), so they can be
/// evaluated at any t without state.
struct ControlSignal {
  enum class Kind { zero, constant, sinusoid, piecewise_random };

  Kind kind = Kind::zero;
  Vec amplitude;              // per input channel
  double frequency_hz = 0.0;  // sinusoid
  double hold_s = 0.5;        // piecewise_random interval length
  std::uint64_t seed = 0;

  Vec operator()(double t) const;
  Index channels() const { return amplitude.size(); }
};

ControlSignal::Kind parse_control_kind(const std::string& name);
std::string to_string(ControlSignal::Kind kind);

}  // namespace dirac
