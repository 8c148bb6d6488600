#pragma once

#include "dirac/autodiff.hpp"
#include "dirac/errors.hpp"
#include "dirac/phase_space.hpp"
#include "dirac/random.hpp"
#include "dirac/types.hpp"

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace dirac {

// ---------------------------------------------------------------------------
// Weight containers. T is Mat for storage and ad::Var once bound to a tape.

template <typename T>
struct RecurrentCell {
  T W_z, W_r, W_h;  // hidden × input
  T U_z, U_r, U_h;  // hidden × hidden
  T b_z, b_r, b_h;  // hidden × 1
};

inline constexpr int kRecurrentLayers = 3;

template <typename T>
struct PsnWeights {
  std::array<RecurrentCell<T>, kRecurrentLayers> cells;
  T head_W1;  // out × input
  T head_W2;  // out × hidden
  T head_b;   // out × 1
};

enum class ModuleKind { up, low };

template <typename T>
struct GradientModule {
  ModuleKind kind = ModuleKind::up;
  T K;  // width × N
  T a;  // width × 1
  T b;  // width × 1
};

template <typename T>
struct SympNetWeights {
  std::vector<GradientModule<T>> modules;
};

/// Calls f(name, tensor) for every tensor in a fixed order. The order and
/// names define the archive layout and the optimizer state layout.
template <typename T, typename F>
void visit(RecurrentCell<T>& c, const std::string& prefix, F&& f) {
  f(prefix + "W_z", c.W_z);
  f(prefix + "W_r", c.W_r);
  f(prefix + "W_h", c.W_h);
  f(prefix + "U_z", c.U_z);
  f(prefix + "U_r", c.U_r);
  f(prefix + "U_h", c.U_h);
  f(prefix + "b_z", c.b_z);
  f(prefix + "b_r", c.b_r);
  f(prefix + "b_h", c.b_h);
}

template <typename T, typename F>
void visit(PsnWeights<T>& w, F&& f) {
  for (int l = 0; l < kRecurrentLayers; ++l) visit(w.cells[l], "cell" + std::to_string(l) + ".", f);
  f(std::string("head.W1"), w.head_W1);
  f(std::string("head.W2"), w.head_W2);
  f(std::string("head.b"), w.head_b);
}

template <typename T, typename F>
void visit(SympNetWeights<T>& w, F&& f) {
  for (std::size_t i = 0; i < w.modules.size(); ++i) {
    const std::string p = "module" + std::to_string(i) + ".";
    f(p + "K", w.modules[i].K);
    f(p + "a", w.modules[i].a);
    f(p + "b", w.modules[i].b);
  }
}

template <typename W, typename F>
void visit(const W& w, F&& f) {
  visit(const_cast<W&>(w), [&](const std::string& name, const auto& t) { f(name, t); });
}

/// Structure-preserving map of every tensor: f(name, const T&) -> U.
template <typename U, typename T, typename F>
RecurrentCell<U> map_tensors(const RecurrentCell<T>& c, const std::string& p, F&& f) {
  return {f(p + "W_z", c.W_z), f(p + "W_r", c.W_r), f(p + "W_h", c.W_h), f(p + "U_z", c.U_z), f(p + "U_r", c.U_r),
          f(p + "U_h", c.U_h), f(p + "b_z", c.b_z), f(p + "b_r", c.b_r), f(p + "b_h", c.b_h)};
}

template <typename U, typename T, typename F>
PsnWeights<U> map_tensors(const PsnWeights<T>& w, F&& f) {
  PsnWeights<U> out;
  for (int l = 0; l < kRecurrentLayers; ++l) out.cells[l] = map_tensors<U>(w.cells[l], "cell" + std::to_string(l) + ".", f);
  out.head_W1 = f(std::string("head.W1"), w.head_W1);
  out.head_W2 = f(std::string("head.W2"), w.head_W2);
  out.head_b = f(std::string("head.b"), w.head_b);
  return out;
}

template <typename U, typename T, typename F>
SympNetWeights<U> map_tensors(const SympNetWeights<T>& w, F&& f) {
  SympNetWeights<U> out;
  out.modules.reserve(w.modules.size());
  for (std::size_t i = 0; i < w.modules.size(); ++i) {
    const std::string p = "module" + std::to_string(i) + ".";
    const auto& m = w.modules[i];
    out.modules.push_back({m.kind, f(p + "K", m.K), f(p + "a", m.a), f(p + "b", m.b)});
  }
  return out;
}

template <typename W>
Index parameter_count(const W& w) {
  Index n = 0;
  visit(w, [&](const std::string&, const Mat& t) { n += t.size(); });
  return n;
}

template <template <typename> class W>
W<ad::Var> bind(ad::Tape& tape, const W<Mat>& w, bool trainable) {
  return map_tensors<ad::Var>(w, [&](const std::string&, const Mat& m) {
    return trainable ? tape.parameter(m) : tape.constant(m);
  });
}

/// Loss value and reverse-mode gradient of a scalar closure
/// loss(tape, bound_weights) -> 1×1 Var, in the weights' own layout.
template <template <typename> class W, typename F>
std::pair<double, W<Mat>> param_gradients(const W<Mat>& w, F&& loss) {
  ad::Tape tape;
  const W<ad::Var> bound = bind(tape, w, true);
  const ad::Var l = loss(tape, bound);
  const double value = l.value()(0, 0);
  if (!std::isfinite(value)) throw NumericalError("non-finite loss");
  tape.backward(l);
  return {value, map_tensors<Mat>(bound, [&](const std::string&, const ad::Var& v) { return tape.grad(v); })};
}

// ---------------------------------------------------------------------------
// Recurrent encoder with linear velocity head.

/// Learnable weights plus fixed affine normalization:
///   input  ẑ ↦ (ẑ − input_shift) ⊙ input_scale
///   output v = output_scale ⊙ head(·)
struct PsnParams {
  PsnWeights<Mat> weights;
  Vec input_shift;
  Vec input_scale;
  Vec output_scale;

  Index input_dim() const { return weights.head_W1.cols(); }
  Index hidden_dim() const { return weights.head_W2.cols(); }
  Index output_dim() const { return weights.head_W1.rows(); }
};

/// Recurrent weights uniform in ±1/√fan_in; head and biases zero; identity
/// normalization.
PsnParams init_psn(Index input_dim, Index hidden_dim, Index output_dim, Rng& rng);
void validate(const PsnParams& params);

ad::Var recurrent_step(const RecurrentCell<ad::Var>& cell, const ad::Var& x, const ad::Var& h);
Vec recurrent_step(const RecurrentCell<Mat>& cell, const Vec& x, const Vec& h);

struct EncoderTrace {
  ad::Var v;                                            // head output, output_dim × B
  ad::Var h_top;                                        // top-layer h_{t−1}
  std::array<std::vector<ad::Var>, kRecurrentLayers> h;  // per layer, per consumed step
};

/// Runs the stack over context[0..T−2] from h0 (zero when empty), then the
/// head on (context[T−1], top-layer state). Inputs are already normalized;
/// each entry is input_dim × B.
EncoderTrace encoder_forward(ad::Tape& tape, const PsnWeights<ad::Var>& w, const std::vector<ad::Var>& context,
                             const std::vector<ad::Var>& h0 = {});

ad::Var head_forward(const PsnWeights<ad::Var>& w, const ad::Var& z, const ad::Var& h_top);

/// Single-sample physical-units evaluation on raw context vectors.
struct EncoderOutput {
  Vec v;
  Vec h_top;
  std::array<std::vector<Vec>, kRecurrentLayers> h;
};
EncoderOutput encoder_forward(const PsnParams& params, const std::vector<Vec>& context);

/// Physical velocity of the head at raw input z with a frozen top state.
Vec head_velocity(const PsnParams& params, const Vec& z, const Vec& h_top);

/// Velocity field in input space: the head output itself when it spans the
/// input, otherwise a single channel written into the inpainted slot.
Vec embed_velocity(const PsnParams& params, const Vec& v);

/// Slot of the inpainted channel in the lifted-channel input vector.
inline constexpr Index kInpaintSlot = 1;

/// Implicit-midpoint step of the head's velocity field with the hidden state
/// frozen at the context's h_{t−1}.
Vec psn_step(const PsnParams& params, const std::vector<Vec>& context, const Vec& z_t, double dt,
             double tol = 1e-10, int max_iter = 50);

// ---------------------------------------------------------------------------
// Symplectic step predictor.

/// Gradient modules acting on conformally normalized coordinates
///   q̃ = (Q − q_shift) ⊙ q_scale,  p̃ = (P − p_shift) ⊙ p_scale,
/// with q_scale ⊙ p_scale a constant vector, so the physical map stays
/// exactly symplectic. Multiplier columns can be masked out of the up
/// modules, which keeps their conjugate momenta fixed.
struct SympNetParams {
  SympNetWeights<Mat> weights;
  Vec q_shift, q_scale, p_shift, p_scale;
  Index n_q = 0;
  Index n_multipliers = 0;
  bool mask_multipliers = false;

  Index positions() const { return 1 + n_q + n_multipliers; }
  Index width() const { return weights.modules.empty() ? 0 : weights.modules.front().K.rows(); }
};

/// L modules of the given width alternating up/low starting with up. K
/// uniform in ±1/√N, a uniform in ±0.1, b zero; identity normalization.
SympNetParams init_sympnet(Index n_q, Index n_multipliers, int modules, Index width, Rng& rng,
                           bool mask_multipliers = false);
void validate(const SympNetParams& params);

/// Up: p' = p + h·Kᵀ(a ⊙ tanh(Kq + b)). Low: q' = q + h·Kᵀ(a ⊙ tanh(Kp + b)).
std::pair<Vec, Vec> up_module(const Vec& q, const Vec& p, const Mat& K, const Vec& a, const Vec& b, double h = 1.0);
std::pair<Vec, Vec> low_module(const Vec& q, const Vec& p, const Mat& K, const Vec& a, const Vec& b, double h = 1.0);

/// Batched forward on physical (Q, P), N × B each. Returns (Q', P').
std::pair<ad::Var, ad::Var> sympnet_forward(ad::Tape& tape, const SympNetWeights<ad::Var>& w,
                                            const SympNetParams& params, const ad::Var& Q, const ad::Var& P,
                                            double dt);

/// Flat (positions, momenta) map and its explicit inverse.
Vec sympnet_map(const SympNetParams& params, const Vec& z, double dt);
Vec sympnet_inverse(const SympNetParams& params, const Vec& z, double dt);

LiftedPoint sympnet_step(const SympNetParams& params, const LiftedPoint& z, double dt);

}  // namespace dirac
