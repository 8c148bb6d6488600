#pragma once

#include "dirac/errors.hpp"
#include "dirac/types.hpp"

#include <string>

namespace dirac {

/// Physical state x = (q, p) on T*Q, with the sample time and the control
/// held over the following interval.
template <typename Scalar>
struct PhasePointT {
  Vector<Scalar> q;
  Vector<Scalar> p;
  Scalar t = Scalar(0);
  Vector<Scalar> u;

  bool finite() const { return q.allFinite() && p.allFinite() && u.allFinite() && std::isfinite(t); }
};

/// Extended state z = (q0, q, λ; p0, p, π) on the symplectified bundle.
/// flatten() orders it as (q0, q, λ, p0, p, π): all positions, then all
/// momenta, matching canonical_form(positions()).
template <typename Scalar>
struct LiftedPointT {
  Scalar q0 = Scalar(0);
  Vector<Scalar> q;
  Vector<Scalar> lambda;
  Scalar p0 = Scalar(0);
  Vector<Scalar> p;
  Vector<Scalar> pi;

  Index positions() const { return 1 + q.size() + lambda.size(); }
  Index dimension() const { return 2 + q.size() + p.size() + lambda.size() + pi.size(); }

  bool finite() const {
    return std::isfinite(q0) && std::isfinite(p0) && q.allFinite() && lambda.allFinite() &&
           p.allFinite() && pi.allFinite();
  }

  Vector<Scalar> flatten() const {
    if (q.size() != p.size() || lambda.size() != pi.size())
      throw DimensionError("lifted point is not canonically paired (len q != len p or len λ != len π)");
    Vector<Scalar> z(dimension());
    const Index n = q.size(), m = lambda.size(), half = positions();
    z(0) = q0;
    z.segment(1, n) = q;
    z.segment(1 + n, m) = lambda;
    z(half) = p0;
    z.segment(half + 1, n) = p;
    z.segment(half + 1 + n, m) = pi;
    return z;
  }

  static LiftedPointT unflatten(const Vector<Scalar>& z, Index n_q, Index m) {
    const Index half = 1 + n_q + m;
    if (z.size() != 2 * half)
      throw DimensionError("flat lifted vector has length " + std::to_string(z.size()) +
                           ", expected " + std::to_string(2 * half));
    LiftedPointT out;
    out.q0 = z(0);
    out.q = z.segment(1, n_q);
    out.lambda = z.segment(1 + n_q, m);
    out.p0 = z(half);
    out.p = z.segment(half + 1, n_q);
    out.pi = z.segment(half + 1 + n_q, m);
    return out;
  }
};

using PhasePoint = PhasePointT<double>;
using LiftedPoint = LiftedPointT<double>;

}  // namespace dirac
