#include "dirac/nets.hpp"

#include "dirac/integrators.hpp"

namespace dirac {

namespace {

Mat uniform_matrix(Index rows, Index cols, double bound, Rng& rng) {
  Mat m(rows, cols);
  // Column-major fill order is part of the determinism contract.
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = uniform(rng, -bound, bound);
  return m;
}

void expect_shape(const Mat& m, Index rows, Index cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols)
    throw DimensionError(name + " has shape " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                         ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  if (!m.allFinite()) throw DataError(name + " has non-finite entries");
}

Vec normalize_input(const PsnParams& params, const Vec& z) {
  return (z - params.input_shift).cwiseProduct(params.input_scale);
}

}  // namespace

// --- PSN ----------------------------------------------------------------------

PsnParams init_psn(Index input_dim, Index hidden_dim, Index output_dim, Rng& rng) {
  if (input_dim < 1 || hidden_dim < 1 || output_dim < 1) throw DimensionError("init_psn: sizes must be positive");
  PsnParams params;
  for (int l = 0; l < kRecurrentLayers; ++l) {
    const Index in = l == 0 ? input_dim : hidden_dim;
    const double bw = 1.0 / std::sqrt(static_cast<double>(in));
    const double bu = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    RecurrentCell<Mat>& c = params.weights.cells[l];
    c.W_z = uniform_matrix(hidden_dim, in, bw, rng);
    c.W_r = uniform_matrix(hidden_dim, in, bw, rng);
    c.W_h = uniform_matrix(hidden_dim, in, bw, rng);
    c.U_z = uniform_matrix(hidden_dim, hidden_dim, bu, rng);
    c.U_r = uniform_matrix(hidden_dim, hidden_dim, bu, rng);
    c.U_h = uniform_matrix(hidden_dim, hidden_dim, bu, rng);
    c.b_z = c.b_r = c.b_h = Mat::Zero(hidden_dim, 1);
  }
  // Zero head: the untrained field is v = 0.
  params.weights.head_W1 = Mat::Zero(output_dim, input_dim);
  params.weights.head_W2 = Mat::Zero(output_dim, hidden_dim);
  params.weights.head_b = Mat::Zero(output_dim, 1);
  params.input_shift = Vec::Zero(input_dim);
  params.input_scale = Vec::Ones(input_dim);
  params.output_scale = Vec::Ones(output_dim);
  validate(params);
  return params;
}

void validate(const PsnParams& params) {
  const Index in = params.input_dim(), hid = params.hidden_dim(), out = params.output_dim();
  if (in < 1 || hid < 1 || out < 1) throw DimensionError("PSN head has an empty dimension");
  for (int l = 0; l < kRecurrentLayers; ++l) {
    const Index x = l == 0 ? in : hid;
    const std::string p = "cell" + std::to_string(l) + ".";
    const RecurrentCell<Mat>& c = params.weights.cells[l];
    expect_shape(c.W_z, hid, x, p + "W_z");
    expect_shape(c.W_r, hid, x, p + "W_r");
    expect_shape(c.W_h, hid, x, p + "W_h");
    expect_shape(c.U_z, hid, hid, p + "U_z");
    expect_shape(c.U_r, hid, hid, p + "U_r");
    expect_shape(c.U_h, hid, hid, p + "U_h");
    expect_shape(c.b_z, hid, 1, p + "b_z");
    expect_shape(c.b_r, hid, 1, p + "b_r");
    expect_shape(c.b_h, hid, 1, p + "b_h");
  }
  expect_shape(params.weights.head_b, out, 1, "head.b");
  if (params.input_shift.size() != in || params.input_scale.size() != in || params.output_scale.size() != out)
    throw DimensionError("PSN normalization does not match the head dimensions");
  if (out != 1 && out != in) throw DimensionError("PSN head output must be 1 (inpainted channel) or input_dim");
  if (out == 1 && in <= kInpaintSlot) throw DimensionError("PSN input has no inpainted slot");
}

ad::Var recurrent_step(const RecurrentCell<ad::Var>& c, const ad::Var& x, const ad::Var& h) {
  using namespace ad;
  const Var z = sigmoid(add_bias(matmul(c.W_z, x) + matmul(c.U_z, h), c.b_z));
  const Var r = sigmoid(add_bias(matmul(c.W_r, x) + matmul(c.U_r, h), c.b_r));
  const Var cand = ad::tanh(add_bias(matmul(c.W_h, x) + matmul(c.U_h, hadamard(r, h)), c.b_h));
  return hadamard(affine(z, -1.0, 1.0), h) + hadamard(z, cand);
}

Vec recurrent_step(const RecurrentCell<Mat>& cell, const Vec& x, const Vec& h) {
  if (x.size() != cell.W_z.cols() || h.size() != cell.U_z.cols())
    throw DimensionError("recurrent_step: input or state size does not match the cell");
  ad::Tape tape;
  const RecurrentCell<ad::Var> c =
      map_tensors<ad::Var>(cell, "", [&](const std::string&, const Mat& m) { return tape.constant(m); });
  return recurrent_step(c, tape.constant(x), tape.constant(h)).value().col(0);
}

ad::Var head_forward(const PsnWeights<ad::Var>& w, const ad::Var& z, const ad::Var& h_top) {
  return ad::add_bias(ad::matmul(w.head_W1, z) + ad::matmul(w.head_W2, h_top), w.head_b);
}

EncoderTrace encoder_forward(ad::Tape& tape, const PsnWeights<ad::Var>& w, const std::vector<ad::Var>& context,
                             const std::vector<ad::Var>& h0) {
  if (context.empty()) throw DimensionError("encoder_forward: empty context");
  const Index batch = context.front().cols();
  const Index hidden = w.head_W2.cols();
  if (!h0.empty() && h0.size() != kRecurrentLayers) throw DimensionError("encoder_forward: h0 needs one state per layer");

  EncoderTrace trace;
  std::array<ad::Var, kRecurrentLayers> h;
  for (int l = 0; l < kRecurrentLayers; ++l) h[l] = h0.empty() ? tape.constant(Mat::Zero(hidden, batch)) : h0[l];

  for (std::size_t k = 0; k + 1 < context.size(); ++k) {
    ad::Var x = context[k];
    for (int l = 0; l < kRecurrentLayers; ++l) {
      h[l] = recurrent_step(w.cells[l], x, h[l]);
      trace.h[l].push_back(h[l]);
      x = h[l];
    }
  }
  trace.h_top = h[kRecurrentLayers - 1];
  trace.v = head_forward(w, context.back(), trace.h_top);
  return trace;
}

EncoderOutput encoder_forward(const PsnParams& params, const std::vector<Vec>& context) {
  validate(params);
  ad::Tape tape;
  const PsnWeights<ad::Var> w = bind(tape, params.weights, false);
  std::vector<ad::Var> ctx;
  ctx.reserve(context.size());
  for (const Vec& z : context) {
    if (z.size() != params.input_dim()) throw DimensionError("encoder_forward: context entry has the wrong length");
    ctx.push_back(tape.constant(normalize_input(params, z)));
  }
  const EncoderTrace trace = encoder_forward(tape, w, ctx);
  EncoderOutput out;
  out.v = params.output_scale.cwiseProduct(trace.v.value().col(0));
  out.h_top = trace.h_top.value().col(0);
  for (int l = 0; l < kRecurrentLayers; ++l)
    for (const ad::Var& s : trace.h[l]) out.h[l].push_back(s.value().col(0));
  return out;
}

Vec head_velocity(const PsnParams& params, const Vec& z, const Vec& h_top) {
  const PsnWeights<Mat>& w = params.weights;
  const Vec raw = w.head_W1 * normalize_input(params, z) + w.head_W2 * h_top + w.head_b.col(0);
  return params.output_scale.cwiseProduct(raw);
}

Vec embed_velocity(const PsnParams& params, const Vec& v) {
  if (params.output_dim() == params.input_dim()) return v;
  Vec full = Vec::Zero(params.input_dim());
  full(kInpaintSlot) = v(0);
  return full;
}

Vec psn_step(const PsnParams& params, const std::vector<Vec>& context, const Vec& z_t, double dt, double tol,
             int max_iter) {
  if (z_t.size() != params.input_dim()) throw DimensionError("psn_step: state has the wrong length");
  const Vec h_top = encoder_forward(params, context).h_top;
  auto field = [&](const Vec& z, double) { return embed_velocity(params, head_velocity(params, z, h_top)); };
  return implicit_midpoint_step(field, z_t, 0.0, dt, tol, max_iter);
}

// --- SympNet --------------------------------------------------------------------

SympNetParams init_sympnet(Index n_q, Index n_multipliers, int modules, Index width, Rng& rng,
                           bool mask_multipliers) {
  if (n_q < 0 || n_multipliers < 0 || modules < 1 || width < 1)
    throw DimensionError("init_sympnet: invalid sizes");
  SympNetParams params;
  params.n_q = n_q;
  params.n_multipliers = n_multipliers;
  params.mask_multipliers = mask_multipliers;
  const Index N = params.positions();
  for (int i = 0; i < modules; ++i) {
    GradientModule<Mat> m;
    m.kind = i % 2 == 0 ? ModuleKind::up : ModuleKind::low;
    m.K = uniform_matrix(width, N, 1.0 / std::sqrt(static_cast<double>(N)), rng);
    m.a = uniform_matrix(width, 1, 0.1, rng);
    m.b = Mat::Zero(width, 1);
    if (mask_multipliers && m.kind == ModuleKind::up) m.K.middleCols(1 + n_q, n_multipliers).setZero();
    params.weights.modules.push_back(std::move(m));
  }
  params.q_shift = params.p_shift = Vec::Zero(N);
  params.q_scale = params.p_scale = Vec::Ones(N);
  return params;
}

void validate(const SympNetParams& params) {
  const Index N = params.positions();
  if (params.weights.modules.empty()) throw DimensionError("SympNet has no modules");
  const Index width = params.width();
  for (std::size_t i = 0; i < params.weights.modules.size(); ++i) {
    const GradientModule<Mat>& m = params.weights.modules[i];
    const std::string p = "module" + std::to_string(i) + ".";
    const ModuleKind expected = i % 2 == 0 ? ModuleKind::up : ModuleKind::low;
    if (m.kind != expected) throw DimensionError(p + "kind: modules must alternate starting with up");
    expect_shape(m.K, width, N, p + "K");
    expect_shape(m.a, width, 1, p + "a");
    expect_shape(m.b, width, 1, p + "b");
  }
  if (params.q_shift.size() != N || params.q_scale.size() != N || params.p_shift.size() != N ||
      params.p_scale.size() != N)
    throw DimensionError("SympNet normalization does not match the lifted dimension");
  const Vec c = params.q_scale.cwiseProduct(params.p_scale);
  if ((c.array() <= 0.0).any() || (c.array() - c(0)).abs().maxCoeff() > 1e-12 * std::abs(c(0)))
    throw DimensionError("SympNet normalization is not conformal (q_scale ⊙ p_scale must be constant)");
}

std::pair<Vec, Vec> up_module(const Vec& q, const Vec& p, const Mat& K, const Vec& a, const Vec& b, double h) {
  if (q.size() != K.cols() || p.size() != K.cols() || a.size() != K.rows() || b.size() != K.rows())
    throw DimensionError("up_module: shape mismatch");
  return {q, p + h * K.transpose() * a.cwiseProduct((K * q + b).array().tanh().matrix())};
}

std::pair<Vec, Vec> low_module(const Vec& q, const Vec& p, const Mat& K, const Vec& a, const Vec& b, double h) {
  if (q.size() != K.cols() || p.size() != K.cols() || a.size() != K.rows() || b.size() != K.rows())
    throw DimensionError("low_module: shape mismatch");
  return {q + h * K.transpose() * a.cwiseProduct((K * p + b).array().tanh().matrix()), p};
}

std::pair<ad::Var, ad::Var> sympnet_forward(ad::Tape& tape, const SympNetWeights<ad::Var>& w,
                                            const SympNetParams& params, const ad::Var& Q, const ad::Var& P,
                                            double dt) {
  using namespace ad;
  const Index N = params.positions();
  if (Q.rows() != N || P.rows() != N) throw DimensionError("sympnet_forward: lifted dimension mismatch");
  const Index B = Q.cols();
  auto shift = [&](const Vec& s) {
    return tape.constant(s.replicate(1, B));
  };
  Var q = scale_rows(Q - shift(params.q_shift), params.q_scale);
  Var p = scale_rows(P - shift(params.p_shift), params.p_scale);

  Var mask;
  if (params.mask_multipliers && params.n_multipliers > 0) {
    Mat m = Mat::Ones(params.width(), N);
    m.middleCols(1 + params.n_q, params.n_multipliers).setZero();
    mask = tape.constant(std::move(m));
  }
  for (const GradientModule<Var>& m : w.modules) {
    const bool up = m.kind == ModuleKind::up;
    const Var K = up && mask.tape() != nullptr ? hadamard(m.K, mask) : m.K;
    const Var act = scale_rows(ad::tanh(add_bias(matmul(K, up ? q : p), m.b)), m.a);
    const Var step = dt * matmul(transpose(K), act);
    if (up)
      p = p + step;
    else
      q = q + step;
  }
  return {scale_rows(q, params.q_scale.cwiseInverse()) + shift(params.q_shift),
          scale_rows(p, params.p_scale.cwiseInverse()) + shift(params.p_shift)};
}

namespace {

Mat effective_K(const SympNetParams& params, const GradientModule<Mat>& m) {
  if (!params.mask_multipliers || m.kind != ModuleKind::up || params.n_multipliers == 0) return m.K;
  Mat K = m.K;
  K.middleCols(1 + params.n_q, params.n_multipliers).setZero();
  return K;
}

}  // namespace

Vec sympnet_map(const SympNetParams& params, const Vec& z, double dt) {
  const Index N = params.positions();
  if (z.size() != 2 * N) throw DimensionError("sympnet_map: lifted dimension mismatch");
  Vec q = (z.head(N) - params.q_shift).cwiseProduct(params.q_scale);
  Vec p = (z.tail(N) - params.p_shift).cwiseProduct(params.p_scale);
  for (const GradientModule<Mat>& m : params.weights.modules) {
    const Mat K = effective_K(params, m);
    if (m.kind == ModuleKind::up)
      std::tie(q, p) = up_module(q, p, K, m.a.col(0), m.b.col(0), dt);
    else
      std::tie(q, p) = low_module(q, p, K, m.a.col(0), m.b.col(0), dt);
  }
  Vec out(2 * N);
  out << q.cwiseQuotient(params.q_scale) + params.q_shift, p.cwiseQuotient(params.p_scale) + params.p_shift;
  return out;
}

Vec sympnet_inverse(const SympNetParams& params, const Vec& z, double dt) {
  const Index N = params.positions();
  if (z.size() != 2 * N) throw DimensionError("sympnet_inverse: lifted dimension mismatch");
  Vec q = (z.head(N) - params.q_shift).cwiseProduct(params.q_scale);
  Vec p = (z.tail(N) - params.p_shift).cwiseProduct(params.p_scale);
  for (auto it = params.weights.modules.rbegin(); it != params.weights.modules.rend(); ++it) {
    const Mat K = effective_K(params, *it);
    if (it->kind == ModuleKind::up)
      std::tie(q, p) = up_module(q, p, K, it->a.col(0), it->b.col(0), -dt);
    else
      std::tie(q, p) = low_module(q, p, K, it->a.col(0), it->b.col(0), -dt);
  }
  Vec out(2 * N);
  out << q.cwiseQuotient(params.q_scale) + params.q_shift, p.cwiseQuotient(params.p_scale) + params.p_shift;
  return out;
}

LiftedPoint sympnet_step(const SympNetParams& params, const LiftedPoint& z, double dt) {
  if (z.q.size() != params.n_q || z.lambda.size() != params.n_multipliers)
    throw DimensionError("sympnet_step: lifted point does not match the network");
  return LiftedPoint::unflatten(sympnet_map(params, z.flatten(), dt), params.n_q, params.n_multipliers);
}

}  // namespace dirac
