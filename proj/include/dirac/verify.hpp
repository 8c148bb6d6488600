#pragma once

#include "dirac/nets.hpp"
#include "dirac/random.hpp"
#include "dirac/systems.hpp"

#include <functional>
#include <string>
#include <vector>

namespace dirac {

struct Check {
  std::string name;
  double measured = 0.0;
  double threshold = 0.0;
  bool pass = false;
  std::string note;
};

/// J² = −I and Jᵀ = −J for N = 1..16, the 87-dimensional lifted count, and
/// isotropy of the graph of J.
std::vector<Check> verify_geometry();

/// Midpoint vs. Cayley map, quadratic invariant over 10⁴ steps, RK4 order.
std::vector<Check> verify_integrators();

/// Pullback residual of the frozen-clock lift at `points` random states for
/// every built-in system.
std::vector<Check> verify_lift(int points = 100, std::uint64_t seed = 7);

/// Reverse-mode gradients of both training losses against central
/// differences on small models.
std::vector<Check> verify_gradients(std::uint64_t seed = 11);

/// max ‖DΦᵀJDΦ − J‖ over the given states, central differences with step
/// 1e−5·max(1, |z|∞).
double map_symplecticity(const std::function<Vec(const Vec&)>& map, const std::vector<Vec>& states);

/// Random states in the box shift ± 1/scale of the model's normalization.
std::vector<Vec> sympnet_sample_states(const SympNetParams& params, int points, Rng& rng);

/// map_symplecticity of the SympNet step at sympnet_sample_states.
double sympnet_symplecticity(const SympNetParams& params, double dt, int points, Rng& rng);

std::vector<Check> verify_sympnet(const SympNetParams& params, double dt, const std::string& label,
                                  int points = 100, std::uint64_t seed = 13);

/// Largest relative mismatch between two gradient sets:
/// max |g − g_fd| / max(|g|, |g_fd|, floor).
struct GradientMismatch {
  double worst = 0.0;
  std::string where;
  Index checked = 0;
};

template <template <typename> class W, typename F>
GradientMismatch compare_gradients(const W<Mat>& w, F&& loss, double step = 1e-5, double floor = 1e-5) {
  const W<Mat> analytic = param_gradients(w, loss).second;
  std::vector<const Mat*> g;
  visit(analytic, [&](const std::string&, const Mat& t) { g.push_back(&t); });

  auto value = [&](const W<Mat>& x) {
    ad::Tape tape;
    return loss(tape, bind(tape, x, false)).value()(0, 0);
  };
  W<Mat> work = w;
  std::vector<std::pair<std::string, Mat*>> tensors;
  visit(work, [&](const std::string& name, Mat& t) { tensors.emplace_back(name, &t); });

  GradientMismatch out;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Mat& t = *tensors[i].second;
    for (Index j = 0; j < t.size(); ++j) {
      const double saved = t.data()[j];
      t.data()[j] = saved + step;
      const double up = value(work);
      t.data()[j] = saved - step;
      const double down = value(work);
      t.data()[j] = saved;
      const double fd = (up - down) / (2 * step);
      const double an = g[i]->data()[j];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), floor});
      ++out.checked;
      if (rel > out.worst) {
        out.worst = rel;
        out.where = tensors[i].first + "[" + std::to_string(j) + "]";
      }
    }
  }
  return out;
}

}  // namespace dirac
