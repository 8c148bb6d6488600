#pragma once

#include "dirac/nets.hpp"
#include "dirac/systems.hpp"
#include "dirac/trajectory.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

namespace dirac {

// ---------------------------------------------------------------------------
// Channels and samples

/// Lifted-channel vector ẑ_k = (t_k, p0_k, q_k, p_k).
Vec lifted_channels(const LiftedTrajectory& traj, std::size_t k);
/// Network input: ẑ_k with the p0 slot replaced by p_ctrl_k.
Vec masked_channels(const LiftedTrajectory& traj, std::size_t k);
inline Index channel_count(Index n_q) { return 2 + 2 * n_q; }

/// Central difference of the selected lifted channels at k; one-sided at the
/// two ends.
Vec data_velocity(const LiftedTrajectory& traj, std::size_t k, const std::vector<Index>& channels);

enum class Supervision { p0_only, full };
Supervision parse_supervision(const std::string& name);
std::string to_string(Supervision s);

/// Supervised channel indices for a selector.
std::vector<Index> supervised_channels(Supervision s, Index n_q);

struct FlowMatchSample {
  std::vector<Vec> context;  // T masked inputs, the last one is ẑ_t
  Vec target_v;
  double target_p0 = 0.0;
};

/// Window ending at k (k ≥ T − 1).
FlowMatchSample make_sample(const LiftedTrajectory& traj, std::size_t k, int T, Supervision s);

// ---------------------------------------------------------------------------
// Losses

/// mean_j ‖v*_j − v_pred_j‖² over the batch, v_pred in physical units.
double flow_matching_loss(const PsnParams& params, const std::vector<FlowMatchSample>& batch);

/// Tape version on stacked windows: context[k] and target are column batches
/// in physical units.
ad::Var flow_matching_loss(ad::Tape& tape, const PsnWeights<ad::Var>& w, const PsnParams& params,
                           const std::vector<Mat>& context, const Mat& target);

/// Same, with the prediction taken through unrolled implicit-midpoint
/// iterations: v_pred = (z' − z)/dt. Columns that do not converge are dropped
/// from the mean; their count is written to *failed.
ad::Var flow_matching_loss_midpoint(ad::Tape& tape, const PsnWeights<ad::Var>& w, const PsnParams& params,
                                    const std::vector<Mat>& context, const Mat& target, double dt,
                                    std::size_t* failed, double tol = 1e-10, int max_iter = 50);

/// mean_j Σ_i w_i (Φ(z_j) − z'_j)_i² over pairs stored as columns (2N × B).
/// weights empty means unit weights.
double prediction_loss(const SympNetParams& params, const Mat& inputs, const Mat& targets, double dt,
                       const Vec& weights = Vec());
ad::Var prediction_loss(ad::Tape& tape, const SympNetWeights<ad::Var>& w, const SympNetParams& params,
                        const Mat& inputs, const Mat& targets, double dt, const Vec& weights = Vec());

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <template <typename> class W>
struct AdamState {
  W<Mat> m;
  W<Mat> v;
  std::uint64_t step = 0;
};

template <template <typename> class W>
AdamState<W> adam_init(const W<Mat>& params) {
  auto zeros = [](const std::string&, const Mat& t) { return Mat::Zero(t.rows(), t.cols()).eval(); };
  return {map_tensors<Mat>(params, zeros), map_tensors<Mat>(params, zeros), 0};
}

/// One bias-corrected Adam update. Non-finite gradients leave parameters and
/// moments untouched and return false; the step counter advances either way.
template <template <typename> class W>
bool adam_step(W<Mat>& params, const W<Mat>& grads, AdamState<W>& state, const AdamConfig& cfg) {
  std::vector<Mat*> p, m, v;
  std::vector<const Mat*> g;
  visit(params, [&](const std::string&, Mat& t) { p.push_back(&t); });
  visit(state.m, [&](const std::string&, Mat& t) { m.push_back(&t); });
  visit(state.v, [&](const std::string&, Mat& t) { v.push_back(&t); });
  visit(grads, [&](const std::string&, const Mat& t) { g.push_back(&t); });
  if (g.size() != p.size() || m.size() != p.size()) throw DimensionError("adam_step: layout mismatch");
  ++state.step;
  for (const Mat* t : g)
    if (!t->allFinite()) return false;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (g[i]->rows() != p[i]->rows() || g[i]->cols() != p[i]->cols())
      throw DimensionError("adam_step: gradient shape mismatch");
    *m[i] = cfg.beta1 * *m[i] + (1.0 - cfg.beta1) * *g[i];
    *v[i] = cfg.beta2 * *v[i] + (1.0 - cfg.beta2) * g[i]->cwiseAbs2();
    p[i]->array() -= cfg.learning_rate * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + cfg.eps);
  }
  return true;
}

// ---------------------------------------------------------------------------
// Training loops

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  int context = 10;
  std::uint64_t seed = 0;
  Supervision supervision = Supervision::p0_only;
  std::size_t windows_per_epoch = 0;  // 0 = every training window
  bool through_midpoint = false;
  double val_fraction = 0.2;
  bool record_wall_time = false;
  bool verbose = false;
};

struct PsnModelConfig {
  Index hidden = 64;
};

enum class LossWeighting { physical, normalized };
LossWeighting parse_loss_weighting(const std::string& name);
std::string to_string(LossWeighting w);

enum class P0Source { analytic, psn };
P0Source parse_p0_source(const std::string& name);
std::string to_string(P0Source s);

struct SympNetModelConfig {
  int modules = 6;
  Index width = 32;
  bool mask_multipliers = false;
  LossWeighting loss_weighting = LossWeighting::physical;
  P0Source p0_source = P0Source::analytic;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::optional<double> wall_time_s;
};

template <typename P>
struct TrainResult {
  P params;
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  std::size_t skipped_batches = 0;
  std::size_t failed_samples = 0;
};

struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Seeded split by whole trajectory. With a single trajectory both sides
/// share it.
DataSplit split_by_trajectory(std::size_t count, double val_fraction, std::uint64_t seed);

/// Normalization of PSN inputs/outputs fitted to the given trajectories.
void fit_normalization(PsnParams& params, const std::vector<LiftedTrajectory>& data,
                       const std::vector<std::size_t>& which, int T, Supervision s);
void fit_normalization(SympNetParams& params, const std::vector<LiftedTrajectory>& data,
                       const std::vector<std::size_t>& which);

TrainResult<PsnParams> train_psn(const std::vector<LiftedTrajectory>& data, const TrainConfig& cfg,
                                 const PsnModelConfig& model);

/// Trains on consecutive lifted pairs. With a PSN the p0 coordinate of every
/// state is replaced by the PSN's open-loop p0 track; the PSN is read only.
TrainResult<SympNetParams> train_sympnet(const std::vector<LiftedTrajectory>& data, const PsnParams* psn,
                                         const TrainConfig& cfg, const SympNetModelConfig& model);

// ---------------------------------------------------------------------------
// Evaluation

/// Open-loop p0 track over the whole trajectory: anchored at the gauge value
/// p0_0, then advanced by the PSN midpoint step on the inpainted slot with a
/// context window of up to T entries.
std::vector<double> psn_p0_track(const PsnParams& params, const LiftedTrajectory& traj, int T, double tol = 1e-10,
                                 int max_iter = 50);

using StepPredictor = std::function<LiftedPoint(const LiftedPoint&)>;

struct RolloutMetrics {
  double p0_rmse = 0.0;
  double p0_max_error = 0.0;
  Vec coordinate_rmse;   // per flattened lifted coordinate
  Vec coordinate_range;  // max − min of the actual coordinates
  double hamiltonian_drift = 0.0;
  double constraint_drift = 0.0;
  double gauge_residual = 0.0;
  std::size_t rollouts = 0;
};

struct Rollout {
  std::size_t start = 0;
  std::vector<LiftedPoint> predicted;
  std::vector<LiftedPoint> actual;
};

/// Rolls the predictor forward `horizon` steps from `start`. The initial
/// state takes p0 from p0_track when given.
Rollout rollout(const StepPredictor& step, const LiftedTrajectory& traj, std::size_t start, std::size_t horizon,
                const std::vector<double>* p0_track = nullptr);

/// Metrics over a set of rollouts. p0 errors compare the tracks with the data
/// over whole trajectories (zero when no tracks are given).
RolloutMetrics evaluate_rollouts(const MechanicalSystem& sys, const std::vector<Rollout>& rollouts,
                                 const std::vector<LiftedTrajectory>& trajs = {},
                                 const std::vector<std::vector<double>>& p0_tracks = {});

RolloutMetrics evaluate_rollout(const MechanicalSystem& sys, const StepPredictor& step, const LiftedTrajectory& traj,
                                std::size_t horizon, std::size_t start = 0,
                                const std::vector<double>* p0_track = nullptr);

StepPredictor sympnet_predictor(const SympNetParams& params, double dt);

}  // namespace dirac
