#include "dirac/training.hpp"

#include "dirac/geometry.hpp"
#include "dirac/integrators.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <limits>

namespace dirac {

// --- channels -------------------------------------------------------------------

Vec lifted_channels(const LiftedTrajectory& traj, std::size_t k) {
  const LiftedPoint& z = traj.points.at(k);
  Vec out(channel_count(z.q.size()));
  out << z.q0, z.p0, z.q, z.p;
  return out;
}

Vec masked_channels(const LiftedTrajectory& traj, std::size_t k) {
  Vec out = lifted_channels(traj, k);
  out(kInpaintSlot) = traj.p_ctrl.at(k);
  return out;
}

Vec data_velocity(const LiftedTrajectory& traj, std::size_t k, const std::vector<Index>& channels) {
  const std::size_t n = traj.points.size();
  if (n < 2) throw DimensionError("data_velocity: trajectory needs at least two samples");
  if (k >= n) throw DimensionError("data_velocity: index " + std::to_string(k) + " out of range");
  std::size_t lo = k == 0 ? 0 : k - 1;
  std::size_t hi = k + 1 == n ? k : k + 1;
  const Vec a = lifted_channels(traj, lo), b = lifted_channels(traj, hi);
  const double span = static_cast<double>(hi - lo) * traj.dt;
  Vec out(static_cast<Index>(channels.size()));
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] < 0 || channels[i] >= a.size()) throw DimensionError("data_velocity: channel out of range");
    out(static_cast<Index>(i)) = (b(channels[i]) - a(channels[i])) / span;
  }
  return out;
}

Supervision parse_supervision(const std::string& name) {
  if (name == "p0_only") return Supervision::p0_only;
  if (name == "full") return Supervision::full;
  throw ConfigError("unknown supervision '" + name + "' (expected p0_only or full)");
}

std::string to_string(Supervision s) { return s == Supervision::p0_only ? "p0_only" : "full"; }

LossWeighting parse_loss_weighting(const std::string& name) {
  if (name == "physical") return LossWeighting::physical;
  if (name == "normalized") return LossWeighting::normalized;
  throw ConfigError("unknown loss weighting '" + name + "' (expected physical or normalized)");
}

std::string to_string(LossWeighting w) { return w == LossWeighting::physical ? "physical" : "normalized"; }

P0Source parse_p0_source(const std::string& name) {
  if (name == "analytic") return P0Source::analytic;
  if (name == "psn") return P0Source::psn;
  throw ConfigError("unknown p0 source '" + name + "' (expected analytic or psn)");
}

std::string to_string(P0Source s) { return s == P0Source::analytic ? "analytic" : "psn"; }

std::vector<Index> supervised_channels(Supervision s, Index n_q) {
  if (s == Supervision::p0_only) return {kInpaintSlot};
  std::vector<Index> all(static_cast<std::size_t>(channel_count(n_q)));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<Index>(i);
  return all;
}

FlowMatchSample make_sample(const LiftedTrajectory& traj, std::size_t k, int T, Supervision s) {
  if (T < 1) throw DimensionError("make_sample: context length must be positive");
  if (k >= traj.points.size()) throw DimensionError("make_sample: index out of range");
  FlowMatchSample out;
  for (long j = static_cast<long>(k) - T + 1; j <= static_cast<long>(k); ++j)
    out.context.push_back(masked_channels(traj, static_cast<std::size_t>(std::max(j, 0L))));
  out.target_v = data_velocity(traj, k, supervised_channels(s, traj.points[k].q.size()));
  out.target_p0 = traj.points[k].p0;
  return out;
}

// --- batches ----------------------------------------------------------------------

namespace {

// Per-trajectory channel matrices, one column per step.
struct Prepared {
  Mat masked;
  Mat target;
};

Prepared prepare(const LiftedTrajectory& traj, Supervision s) {
  const std::size_t n = traj.points.size();
  const Index nq = n ? traj.points[0].q.size() : 0;
  const std::vector<Index> ch = supervised_channels(s, nq);
  Prepared p;
  p.masked.resize(channel_count(nq), static_cast<Index>(n));
  p.target.resize(static_cast<Index>(ch.size()), static_cast<Index>(n));
  for (std::size_t k = 0; k < n; ++k) {
    p.masked.col(static_cast<Index>(k)) = masked_channels(traj, k);
    p.target.col(static_cast<Index>(k)) = data_velocity(traj, k, ch);
  }
  return p;
}

struct Window {
  std::size_t traj;
  std::size_t k;
};

void assemble(const std::vector<Prepared>& data, const std::vector<Window>& windows, std::size_t begin,
              std::size_t end, int T, std::vector<Mat>& context, Mat& target) {
  const Index B = static_cast<Index>(end - begin);
  const Index in = data[windows[begin].traj].masked.rows();
  context.assign(static_cast<std::size_t>(T), Mat(in, B));
  target.resize(data[windows[begin].traj].target.rows(), B);
  for (Index c = 0; c < B; ++c) {
    const Window& w = windows[begin + static_cast<std::size_t>(c)];
    const Prepared& p = data[w.traj];
    for (int i = 0; i < T; ++i) {
      const long j = std::max(0L, static_cast<long>(w.k) - T + 1 + i);
      context[static_cast<std::size_t>(i)].col(c) = p.masked.col(j);
    }
    target.col(c) = p.target.col(static_cast<Index>(w.k));
  }
}

Mat normalize_columns(const Mat& x, const Vec& shift, const Vec& scale) {
  return scale.asDiagonal() * (x.colwise() - shift);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Rng stream(std::uint64_t seed, std::uint64_t tag) { return seeded_rng(splitmix64(seed ^ splitmix64(tag))); }

double robust_std(const Eigen::ArrayXd& x) {
  if (x.size() < 2) return 1.0;
  const double mean = x.mean();
  const double sd = std::sqrt((x - mean).square().sum() / static_cast<double>(x.size()));
  return sd > 1e-8 * std::max(1.0, std::abs(mean)) ? sd : 1.0;
}

}  // namespace

// --- losses -----------------------------------------------------------------------

ad::Var flow_matching_loss(ad::Tape& tape, const PsnWeights<ad::Var>& w, const PsnParams& params,
                           const std::vector<Mat>& context, const Mat& target) {
  if (context.empty() || target.cols() == 0) throw DimensionError("flow_matching_loss: empty batch");
  if (target.rows() != params.output_dim()) throw DimensionError("flow_matching_loss: target has the wrong size");
  std::vector<ad::Var> ctx;
  ctx.reserve(context.size());
  for (const Mat& c : context) ctx.push_back(tape.constant(normalize_columns(c, params.input_shift, params.input_scale)));
  const EncoderTrace trace = encoder_forward(tape, w, ctx);
  const ad::Var pred = ad::scale_rows(trace.v, params.output_scale);
  const ad::Var diff = pred - tape.constant(target);
  return (1.0 / static_cast<double>(target.cols())) * ad::sum_squares(diff);
}

ad::Var flow_matching_loss_midpoint(ad::Tape& tape, const PsnWeights<ad::Var>& w, const PsnParams& params,
                                    const std::vector<Mat>& context, const Mat& target, double dt,
                                    std::size_t* failed, double tol, int max_iter) {
  if (context.empty() || target.cols() == 0) throw DimensionError("flow_matching_loss: empty batch");
  if (!(dt > 0.0)) throw DimensionError("flow_matching_loss: dt must be positive");
  const Index B = target.cols();
  const Index in = params.input_dim();
  std::vector<ad::Var> ctx;
  for (const Mat& c : context) ctx.push_back(tape.constant(normalize_columns(c, params.input_shift, params.input_scale)));
  const ad::Var h_top = encoder_forward(tape, w, ctx).h_top;

  const ad::Var shift = tape.constant(params.input_shift.replicate(1, B));
  const bool embedded = params.output_dim() != in;
  const ad::Var above = tape.constant(Mat::Zero(kInpaintSlot, B));
  const ad::Var below = tape.constant(Mat::Zero(in - kInpaintSlot - 1, B));
  auto field = [&](const ad::Var& z) {
    const ad::Var zn = ad::scale_rows(z - shift, params.input_scale);
    const ad::Var v = ad::scale_rows(head_forward(w, zn, h_top), params.output_scale);
    return embedded ? ad::vstack({above, v, below}) : v;
  };

  const Mat& z0v = context.back();
  const ad::Var z0 = tape.constant(z0v);
  const Eigen::ArrayXd scale = tol * (1.0 + z0v.colwise().norm().transpose().array());
  ad::Var next = z0 + dt * field(z0);
  Eigen::ArrayXd residual = Eigen::ArrayXd::Constant(B, std::numeric_limits<double>::infinity());
  for (int it = 1; it <= max_iter; ++it) {
    const ad::Var update = (z0 + dt * field(0.5 * (z0 + next))) - next;
    residual = update.value().colwise().norm().transpose().array();
    next = next + (it <= max_iter / 2 ? 1.0 : 0.5) * update;
    if ((residual <= scale).all()) break;
  }

  Vec weights = Vec::Zero(B);
  std::size_t ok = 0;
  for (Index j = 0; j < B; ++j)
    if (std::isfinite(residual(j)) && residual(j) <= scale(j) && next.value().col(j).allFinite()) {
      weights(j) = 1.0;
      ++ok;
    }
  if (failed) *failed = static_cast<std::size_t>(B) - ok;
  if (ok == 0) throw NoConvergence("implicit midpoint layer: no column converged", residual.maxCoeff(), max_iter);
  weights /= static_cast<double>(ok);
  ad::Var vpred = (1.0 / dt) * (next - z0);
  if (embedded) vpred = ad::rows(vpred, kInpaintSlot, 1);
  // Failed columns may hold non-finite values; zeroing them keeps the
  // weighted sum (and its gradient) finite.
  Mat keep = Mat::Zero(vpred.rows(), B);
  for (Index j = 0; j < B; ++j)
    if (weights(j) > 0.0) keep.col(j).setOnes();
  const ad::Var diff = ad::hadamard(vpred - tape.constant(target.cwiseProduct(keep)), tape.constant(keep));
  return ad::weighted_column_sum_squares(diff, weights);
}

double flow_matching_loss(const PsnParams& params, const std::vector<FlowMatchSample>& batch) {
  if (batch.empty()) throw DimensionError("flow_matching_loss: empty batch");
  validate(params);
  const std::size_t T = batch.front().context.size();
  std::vector<Mat> context(T, Mat(params.input_dim(), static_cast<Index>(batch.size())));
  Mat target(params.output_dim(), static_cast<Index>(batch.size()));
  for (std::size_t j = 0; j < batch.size(); ++j) {
    if (batch[j].context.size() != T) throw DimensionError("flow_matching_loss: context lengths differ");
    for (std::size_t i = 0; i < T; ++i) context[i].col(static_cast<Index>(j)) = batch[j].context[i];
    target.col(static_cast<Index>(j)) = batch[j].target_v;
  }
  ad::Tape tape;
  const double loss = flow_matching_loss(tape, bind(tape, params.weights, false), params, context, target).value()(0, 0);
  if (!std::isfinite(loss)) throw NumericalError("flow_matching_loss: non-finite prediction");
  return loss;
}

ad::Var prediction_loss(ad::Tape& tape, const SympNetWeights<ad::Var>& w, const SympNetParams& params,
                        const Mat& inputs, const Mat& targets, double dt, const Vec& weights) {
  const Index N = params.positions();
  if (inputs.rows() != 2 * N || targets.rows() != 2 * N || inputs.cols() != targets.cols() || inputs.cols() == 0)
    throw DimensionError("prediction_loss: pairs do not match the lifted dimension");
  if (weights.size() != 0 && weights.size() != 2 * N) throw DimensionError("prediction_loss: weight length mismatch");
  const auto [q, p] = sympnet_forward(tape, w, params, tape.constant(inputs.topRows(N)),
                                      tape.constant(inputs.bottomRows(N)), dt);
  ad::Var diff = ad::vstack({q, p}) - tape.constant(targets);
  if (weights.size() != 0) diff = ad::scale_rows(diff, weights.cwiseSqrt().eval());
  return (1.0 / static_cast<double>(inputs.cols())) * ad::sum_squares(diff);
}

double prediction_loss(const SympNetParams& params, const Mat& inputs, const Mat& targets, double dt,
                       const Vec& weights) {
  validate(params);
  ad::Tape tape;
  return prediction_loss(tape, bind(tape, params.weights, false), params, inputs, targets, dt, weights).value()(0, 0);
}

// --- splitting and normalization --------------------------------------------------------

DataSplit split_by_trajectory(std::size_t count, double val_fraction, std::uint64_t seed) {
  if (count == 0) throw DataError("empty dataset");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must lie in [0, 1)");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng = stream(seed, 1);
  shuffle(order, rng);
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(count)));
  if (count == 1) n_val = 0;
  n_val = std::min(n_val, count - 1);
  DataSplit split;
  split.val.assign(order.begin(), order.begin() + static_cast<long>(n_val));
  split.train.assign(order.begin() + static_cast<long>(n_val), order.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  if (split.val.empty()) split.val = split.train;
  return split;
}

void fit_normalization(PsnParams& params, const std::vector<LiftedTrajectory>& data,
                       const std::vector<std::size_t>& which, int, Supervision s) {
  std::vector<Prepared> prepared;
  Index total = 0;
  for (std::size_t i : which) {
    prepared.push_back(prepare(data[i], s));
    total += prepared.back().masked.cols();
  }
  if (total == 0) throw DataError("cannot fit normalization on an empty dataset");
  Mat in(params.input_dim(), total), out(params.output_dim(), total);
  Index c = 0;
  for (const Prepared& p : prepared) {
    in.middleCols(c, p.masked.cols()) = p.masked;
    out.middleCols(c, p.target.cols()) = p.target;
    c += p.masked.cols();
  }
  for (Index r = 0; r < in.rows(); ++r) {
    params.input_shift(r) = in.row(r).mean();
    params.input_scale(r) = 1.0 / robust_std(in.row(r).transpose().array());
  }
  for (Index r = 0; r < out.rows(); ++r) params.output_scale(r) = robust_std(out.row(r).transpose().array());
}

void fit_normalization(SympNetParams& params, const std::vector<LiftedTrajectory>& data,
                       const std::vector<std::size_t>& which) {
  const Index N = params.positions();
  std::vector<Vec> cols;
  for (std::size_t i : which)
    for (const LiftedPoint& z : data[i].points) cols.push_back(z.flatten());
  if (cols.empty()) throw DataError("cannot fit normalization on an empty dataset");
  Mat all(2 * N, static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) all.col(static_cast<Index>(j)) = cols[j];
  Vec sq(N), sp(N);
  for (Index r = 0; r < N; ++r) {
    params.q_shift(r) = all.row(r).mean();
    params.p_shift(r) = all.row(N + r).mean();
    sq(r) = robust_std(all.row(r).transpose().array());
    sp(r) = robust_std(all.row(N + r).transpose().array());
  }
  // q̃ = (q − μ)/σ_q and p̃ = (p − ν)·c·σ_q with c = 1/geomean(σ_q σ_p): every
  // pair is scaled by the same factor c, so the map stays symplectic.
  const double c = 1.0 / std::exp((sq.array() * sp.array()).log().mean());
  params.q_scale = sq.cwiseInverse();
  params.p_scale = c * sq;
}

// --- training loops -------------------------------------------------------------------

namespace {

EpochMetrics epoch_metrics(std::size_t epoch, double train, double val, const TrainConfig& cfg,
                           std::chrono::steady_clock::time_point t0) {
  EpochMetrics m{epoch, train, val, std::nullopt};
  if (cfg.record_wall_time) m.wall_time_s = seconds_since(t0);
  return m;
}

void check_config(const TrainConfig& cfg) {
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw ConfigError("batch_size and epochs must be positive");
  if (cfg.context < 2) throw ConfigError("context length T must be at least 2");
  if (!(cfg.adam.learning_rate > 0.0) || !(cfg.adam.eps > 0.0) || !(cfg.adam.beta1 >= 0.0 && cfg.adam.beta1 < 1.0) ||
      !(cfg.adam.beta2 >= 0.0 && cfg.adam.beta2 < 1.0))
    throw ConfigError("invalid Adam hyperparameters");
}

void check_dataset(const std::vector<LiftedTrajectory>& data) {
  if (data.empty()) throw DataError("empty dataset");
  const Index nq = data.front().points.empty() ? -1 : data.front().points.front().q.size();
  const Index m = data.front().points.empty() ? -1 : data.front().points.front().lambda.size();
  for (const LiftedTrajectory& t : data) {
    if (t.points.size() < 2) throw DataError("every trajectory needs at least two samples");
    if (std::abs(t.dt - data.front().dt) > 1e-12 * data.front().dt) throw DataError("trajectories have different dt");
    for (const LiftedPoint& z : t.points)
      if (z.q.size() != nq || z.lambda.size() != m) throw DataError("trajectories have different dimensions");
  }
}

}  // namespace

TrainResult<PsnParams> train_psn(const std::vector<LiftedTrajectory>& data, const TrainConfig& cfg,
                                 const PsnModelConfig& model) {
  check_config(cfg);
  check_dataset(data);
  const auto t0 = std::chrono::steady_clock::now();
  const Index nq = data.front().points.front().q.size();
  const Index in = channel_count(nq);
  const Index out = cfg.supervision == Supervision::p0_only ? 1 : in;
  const double dt = data.front().dt;
  const int T = cfg.context;

  const DataSplit split = split_by_trajectory(data.size(), cfg.val_fraction, cfg.seed);
  Rng init_rng = stream(cfg.seed, 2);
  Rng batch_rng = stream(cfg.seed, 3);

  TrainResult<PsnParams> result{init_psn(in, model.hidden, out, init_rng), {}, 0, 0, 0};
  PsnParams& params = result.params;
  fit_normalization(params, data, split.train, T, cfg.supervision);

  std::vector<Prepared> prepared;
  prepared.reserve(data.size());
  for (const LiftedTrajectory& t : data) prepared.push_back(prepare(t, cfg.supervision));
  std::vector<Window> train_windows, val_windows;
  for (std::size_t i : split.train)
    for (std::size_t k = 0; k < data[i].points.size(); ++k) train_windows.push_back({i, k});
  for (std::size_t i : split.val)
    for (std::size_t k = 0; k < data[i].points.size(); ++k) val_windows.push_back({i, k});

  auto batch_loss = [&](ad::Tape& tape, const PsnWeights<ad::Var>& w, const std::vector<Mat>& ctx, const Mat& tgt,
                        std::size_t* failed) {
    if (cfg.through_midpoint) return flow_matching_loss_midpoint(tape, w, params, ctx, tgt, dt, failed);
    return flow_matching_loss(tape, w, params, ctx, tgt);
  };

  auto evaluate = [&](const std::vector<Window>& windows) {
    constexpr std::size_t chunk = 1024;
    double total = 0.0;
    std::size_t count = 0;
    std::vector<Mat> ctx;
    Mat tgt;
    for (std::size_t b = 0; b < windows.size(); b += chunk) {
      const std::size_t e = std::min(windows.size(), b + chunk);
      assemble(prepared, windows, b, e, T, ctx, tgt);
      ad::Tape tape;
      std::size_t failed = 0;
      try {
        const double l = batch_loss(tape, bind(tape, params.weights, false), ctx, tgt, &failed).value()(0, 0);
        if (!std::isfinite(l)) continue;
        total += l * static_cast<double>(e - b - failed);
        count += e - b - failed;
      } catch (const NumericalError&) {
      }
    }
    return count ? total / static_cast<double>(count) : std::numeric_limits<double>::infinity();
  };

  PsnWeights<Mat> best = params.weights;
  double best_val = std::numeric_limits<double>::infinity();
  AdamState<PsnWeights> adam = adam_init(params.weights);
  std::vector<Mat> ctx;
  Mat tgt;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(train_windows, batch_rng);
    const std::size_t used = cfg.windows_per_epoch && cfg.windows_per_epoch < train_windows.size()
                                 ? cfg.windows_per_epoch
                                 : train_windows.size();
    double total = 0.0;
    std::size_t count = 0, batches = 0, skipped = 0;
    for (std::size_t b = 0; b < used; b += cfg.batch_size) {
      const std::size_t e = std::min(used, b + cfg.batch_size);
      assemble(prepared, train_windows, b, e, T, ctx, tgt);
      ++batches;
      std::size_t failed = 0;
      try {
        auto [loss, grads] = param_gradients(params.weights, [&](ad::Tape& tape, const PsnWeights<ad::Var>& w) {
          return batch_loss(tape, w, ctx, tgt, &failed);
        });
        if (!adam_step(params.weights, grads, adam, cfg.adam)) {
          ++skipped;
          continue;
        }
        total += loss * static_cast<double>(e - b - failed);
        count += e - b - failed;
        result.failed_samples += failed;
      } catch (const NumericalError&) {
        ++skipped;
      }
    }
    result.skipped_batches += skipped;
    if (batches > 0 && skipped == batches)
      throw NumericalError("train_psn: every batch in epoch " + std::to_string(epoch) + " was non-finite");
    const double train_loss = count ? total / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
    const double val_loss = evaluate(val_windows);
    if (val_loss < best_val) {
      best_val = val_loss;
      best = params.weights;
      result.best_epoch = epoch;
    }
    result.history.push_back(epoch_metrics(epoch, train_loss, val_loss, cfg, t0));
    if (cfg.verbose)
      std::fprintf(stderr, "psn epoch %zu train %.6e val %.6e\n", epoch, train_loss, val_loss);
  }
  params.weights = best;
  return result;
}

TrainResult<SympNetParams> train_sympnet(const std::vector<LiftedTrajectory>& data, const PsnParams* psn,
                                         const TrainConfig& cfg, const SympNetModelConfig& model) {
  check_config(cfg);
  check_dataset(data);
  const auto t0 = std::chrono::steady_clock::now();
  const Index nq = data.front().points.front().q.size();
  const Index m = data.front().points.front().lambda.size();
  const double dt = data.front().dt;
  if (model.p0_source == P0Source::psn && psn == nullptr)
    throw ConfigError("train_sympnet: p0 source 'psn' needs a PSN archive");

  const DataSplit split = split_by_trajectory(data.size(), cfg.val_fraction, cfg.seed);
  Rng init_rng = stream(cfg.seed, 4);
  Rng batch_rng = stream(cfg.seed, 5);

  // States with p0 replaced by the PSN track when requested.
  std::vector<LiftedTrajectory> states = data;
  if (model.p0_source == P0Source::psn)
    for (LiftedTrajectory& t : states) {
      const std::vector<double> track = psn_p0_track(*psn, t, cfg.context);
      for (std::size_t k = 0; k < t.points.size(); ++k) t.points[k].p0 = track[k];
    }

  TrainResult<SympNetParams> result{
      init_sympnet(nq, m, model.modules, model.width, init_rng, model.mask_multipliers), {}, 0, 0, 0};
  SympNetParams& params = result.params;
  fit_normalization(params, states, split.train);
  const Index N = params.positions();
  Vec weights;
  if (model.loss_weighting == LossWeighting::normalized) {
    weights.resize(2 * N);
    weights << params.q_scale.cwiseAbs2(), params.p_scale.cwiseAbs2();
  }

  auto pairs = [&](const std::vector<std::size_t>& which, Mat& in, Mat& out) {
    std::size_t n = 0;
    for (std::size_t i : which) n += states[i].points.size() - 1;
    in.resize(2 * N, static_cast<Index>(n));
    out.resize(2 * N, static_cast<Index>(n));
    Index c = 0;
    for (std::size_t i : which)
      for (std::size_t k = 0; k + 1 < states[i].points.size(); ++k, ++c) {
        in.col(c) = states[i].points[k].flatten();
        out.col(c) = states[i].points[k + 1].flatten();
      }
  };
  Mat train_in, train_out, val_in, val_out;
  pairs(split.train, train_in, train_out);
  pairs(split.val, val_in, val_out);

  std::vector<Index> order(static_cast<std::size_t>(train_in.cols()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Index>(i);

  SympNetWeights<Mat> best = params.weights;
  double best_val = std::numeric_limits<double>::infinity();
  AdamState<SympNetWeights> adam = adam_init(params.weights);
  Mat bin, bout;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order, batch_rng);
    const std::size_t used =
        cfg.windows_per_epoch && cfg.windows_per_epoch < order.size() ? cfg.windows_per_epoch : order.size();
    double total = 0.0;
    std::size_t count = 0, batches = 0, skipped = 0;
    for (std::size_t b = 0; b < used; b += cfg.batch_size) {
      const std::size_t e = std::min(used, b + cfg.batch_size);
      const Index B = static_cast<Index>(e - b);
      bin.resize(2 * N, B);
      bout.resize(2 * N, B);
      for (Index j = 0; j < B; ++j) {
        bin.col(j) = train_in.col(order[b + static_cast<std::size_t>(j)]);
        bout.col(j) = train_out.col(order[b + static_cast<std::size_t>(j)]);
      }
      ++batches;
      try {
        auto [loss, grads] = param_gradients(params.weights, [&](ad::Tape& tape, const SympNetWeights<ad::Var>& w) {
          return prediction_loss(tape, w, params, bin, bout, dt, weights);
        });
        if (!adam_step(params.weights, grads, adam, cfg.adam)) {
          ++skipped;
          continue;
        }
        total += loss * static_cast<double>(B);
        count += static_cast<std::size_t>(B);
      } catch (const NumericalError&) {
        ++skipped;
      }
    }
    result.skipped_batches += skipped;
    if (batches > 0 && skipped == batches)
      throw NumericalError("train_sympnet: every batch in epoch " + std::to_string(epoch) + " was non-finite");
    const double train_loss = count ? total / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
    double val_loss = prediction_loss(params, val_in, val_out, dt, weights);
    if (!std::isfinite(val_loss)) val_loss = std::numeric_limits<double>::infinity();
    if (val_loss < best_val) {
      best_val = val_loss;
      best = params.weights;
      result.best_epoch = epoch;
    }
    result.history.push_back(epoch_metrics(epoch, train_loss, val_loss, cfg, t0));
    if (cfg.verbose)
      std::fprintf(stderr, "sympnet epoch %zu train %.6e val %.6e\n", epoch, train_loss, val_loss);
  }
  params.weights = best;
  return result;
}

// --- evaluation --------------------------------------------------------------------------

std::vector<double> psn_p0_track(const PsnParams& params, const LiftedTrajectory& traj, int T, double tol,
                                 int max_iter) {
  validate(params);
  if (T < 1) throw DimensionError("psn_p0_track: context length must be positive");
  const std::size_t n = traj.points.size();
  std::vector<double> track(n);
  if (n == 0) return track;
  track[0] = traj.points[0].p0;
  std::vector<Vec> masked(n);
  for (std::size_t k = 0; k < n; ++k) masked[k] = masked_channels(traj, k);
  std::vector<Vec> context(static_cast<std::size_t>(T));
  for (std::size_t k = 0; k + 1 < n; ++k) {
    for (int i = 0; i < T; ++i)
      context[static_cast<std::size_t>(i)] = masked[static_cast<std::size_t>(std::max(0L, static_cast<long>(k) - T + 1 + i))];
    Vec next;
    try {
      next = psn_step(params, context, masked[k], traj.dt, tol, max_iter);
    } catch (const NoConvergence& e) {
      throw e.at_step(k);
    }
    track[k + 1] = track[k] + (next(kInpaintSlot) - masked[k](kInpaintSlot));
  }
  return track;
}

Rollout rollout(const StepPredictor& step, const LiftedTrajectory& traj, std::size_t start, std::size_t horizon,
                const std::vector<double>* p0_track) {
  if (start >= traj.points.size() || horizon > traj.points.size() - 1 - start)
    throw ConfigError("rollout: horizon " + std::to_string(horizon) + " from step " + std::to_string(start) +
                      " exceeds the trajectory (" + std::to_string(traj.points.size()) + " samples)");
  Rollout r;
  r.start = start;
  r.actual.assign(traj.points.begin() + static_cast<long>(start),
                  traj.points.begin() + static_cast<long>(start + horizon + 1));
  LiftedPoint z = traj.points[start];
  if (p0_track) z.p0 = p0_track->at(start);
  r.predicted.push_back(z);
  for (std::size_t k = 0; k < horizon; ++k) {
    z = step(z);
    if (!z.finite()) throw NumericalError("rollout: predictor produced a non-finite state", start + k);
    r.predicted.push_back(z);
  }
  return r;
}

RolloutMetrics evaluate_rollouts(const MechanicalSystem& sys, const std::vector<Rollout>& rollouts,
                                 const std::vector<LiftedTrajectory>& trajs,
                                 const std::vector<std::vector<double>>& p0_tracks) {
  RolloutMetrics m;
  m.rollouts = rollouts.size();
  if (rollouts.empty()) return m;
  const Index D = rollouts.front().actual.front().dimension();
  Vec sq = Vec::Zero(D), lo = Vec::Constant(D, std::numeric_limits<double>::infinity()), hi = -lo;
  std::size_t count = 0;
  auto widen = [&](const Vec& z) {
    lo = lo.cwiseMin(z);
    hi = hi.cwiseMax(z);
  };
  for (const Rollout& r : rollouts) {
    const double h0 = extended_hamiltonian(r.predicted.front(), sys);
    for (std::size_t k = 0; k < r.predicted.size(); ++k) {
      const LiftedPoint& z = r.predicted[k];
      const Vec a = r.actual[k].flatten();
      if (trajs.empty()) widen(a);
      if (k > 0) {
        sq += (z.flatten() - a).cwiseAbs2();
        ++count;
      }
      m.hamiltonian_drift = std::max(m.hamiltonian_drift, std::abs(extended_hamiltonian(z, sys) - h0));
      if (sys.n_constraints() > 0)
        m.constraint_drift = std::max(m.constraint_drift, sys.constraints(z.q).cwiseAbs().maxCoeff());
      const GaugeResidual g = gauge_residual(z, sys);
      m.gauge_residual = std::max({m.gauge_residual, std::abs(g.r0), g.r_pi});
    }
  }
  for (const LiftedTrajectory& t : trajs)
    for (const LiftedPoint& z : t.points) widen(z.flatten());
  m.coordinate_rmse = count ? (sq / static_cast<double>(count)).cwiseSqrt().eval() : Vec::Zero(D);
  m.coordinate_range = hi - lo;

  double p0_sq = 0.0;
  std::size_t p0_n = 0;
  for (std::size_t i = 0; i < p0_tracks.size() && i < trajs.size(); ++i)
    for (std::size_t k = 0; k < trajs[i].points.size(); ++k) {
      const double e = p0_tracks[i][k] - trajs[i].points[k].p0;
      p0_sq += e * e;
      m.p0_max_error = std::max(m.p0_max_error, std::abs(e));
      ++p0_n;
    }
  m.p0_rmse = p0_n ? std::sqrt(p0_sq / static_cast<double>(p0_n)) : 0.0;
  return m;
}

RolloutMetrics evaluate_rollout(const MechanicalSystem& sys, const StepPredictor& step, const LiftedTrajectory& traj,
                                std::size_t horizon, std::size_t start, const std::vector<double>* p0_track) {
  const Rollout r = rollout(step, traj, start, horizon, p0_track);
  if (p0_track) return evaluate_rollouts(sys, {r}, {traj}, {*p0_track});
  return evaluate_rollouts(sys, {r});
}

StepPredictor sympnet_predictor(const SympNetParams& params, double dt) {
  validate(params);
  return [&params, dt](const LiftedPoint& z) { return sympnet_step(params, z, dt); };
}

}  // namespace dirac
