#include "dirac/geometry.hpp"
#include "dirac/integrators.hpp"
#include "dirac/training.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <functional>

namespace dirac {
namespace {

using test::max_abs;
using test::random_mat;
using test::random_vec;

// One-coordinate lifted trajectory sampled from closed-form q(t), p(t), p0(t).
LiftedTrajectory synthetic(std::size_t n, double dt, const std::function<double(double)>& q,
                           const std::function<double(double)>& p, const std::function<double(double)>& p0) {
  LiftedTrajectory traj;
  traj.dt = dt;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) * dt;
    traj.points.push_back(LiftedPoint{t, Vec::Constant(1, q(t)), Vec(), p0(t), Vec::Constant(1, p(t)), Vec()});
    traj.controls.push_back(Vec::Zero(1));
    traj.p_ctrl.push_back(0.0);
    traj.p_diss.push_back(0.0);
  }
  return traj;
}

std::vector<LiftedTrajectory> oscillator_data(std::size_t count, std::size_t steps, double damping, double amplitude,
                                              std::uint64_t seed) {
  const DampedDrivenOscillator osc(1.0, 1.0, damping);
  Rng rng = seeded_rng(seed);
  std::vector<LiftedTrajectory> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto [q, p] = osc.sample_state(rng, 1.0, 1.0);
    const ControlSignal ctrl{amplitude == 0.0 ? ControlSignal::Kind::zero : ControlSignal::Kind::sinusoid,
                             Vec::Constant(1, amplitude), 0.3};
    out.push_back(dirac_lift(generate_trajectory(osc, PhasePoint{q, p, 0.0, Vec()}, ctrl, steps, 0.05), osc));
  }
  return out;
}

TEST(Channels, LayoutAndMask) {
  LiftedTrajectory traj = synthetic(3, 0.1, [](double t) { return 2 * t; }, [](double) { return 5.0; },
                                    [](double) { return -4.0; });
  traj.p_ctrl[1] = 0.75;
  const Vec z = lifted_channels(traj, 1);
  ASSERT_EQ(z.size(), channel_count(1));
  EXPECT_EQ(z, (Vec(4) << 0.1, -4.0, 0.2, 5.0).finished());
  const Vec m = masked_channels(traj, 1);
  EXPECT_EQ(m, (Vec(4) << 0.1, 0.75, 0.2, 5.0).finished());
  EXPECT_EQ(supervised_channels(Supervision::p0_only, 2), std::vector<Index>{1});
  EXPECT_EQ(supervised_channels(Supervision::full, 2).size(), 6u);
}

TEST(DataVelocity, ConstantAndLinear) {
  const LiftedTrajectory constant = synthetic(20, 0.1, [](double) { return 1.5; }, [](double) { return -0.5; },
                                              [](double) { return 2.0; });
  const LiftedTrajectory linear = synthetic(20, 0.1, [](double t) { return 3.0 * t - 1.0; },
                                            [](double t) { return -2.0 * t; }, [](double t) { return 0.5 * t; });
  for (std::size_t k : {0u, 7u, 19u}) {
    EXPECT_EQ(data_velocity(constant, k, {1, 2, 3}), Vec::Zero(3));
    const Vec v = data_velocity(linear, k, {0, 1, 2, 3});
    EXPECT_NEAR(v(0), 1.0, 1e-12);
    EXPECT_NEAR(v(1), 0.5, 1e-12);
    EXPECT_NEAR(v(2), 3.0, 1e-12);
    EXPECT_NEAR(v(3), -2.0, 1e-12);
  }
  EXPECT_THROW(data_velocity(linear, 20, {1}), DimensionError);
  EXPECT_THROW(data_velocity(linear, 3, {4}), DimensionError);
}

TEST(DataVelocity, SecondOrderOnSmoothData) {
  const double dt = 0.01;
  const LiftedTrajectory s = synthetic(200, dt, [](double t) { return std::sin(t); },
                                       [](double t) { return std::cos(t); }, [](double) { return 0.0; });
  double worst = 0.0;
  for (std::size_t k = 1; k + 1 < 200; ++k) {
    const double t = static_cast<double>(k) * dt;
    worst = std::max(worst, std::abs(data_velocity(s, k, {2})(0) - std::cos(t)));
  }
  EXPECT_LE(worst, 2e-5);
}

TEST(MakeSample, WindowIsLeftPadded) {
  const LiftedTrajectory traj = synthetic(10, 0.1, [](double t) { return t * t; }, [](double t) { return t; },
                                          [](double t) { return -t; });
  const FlowMatchSample s = make_sample(traj, 2, 5, Supervision::p0_only);
  ASSERT_EQ(s.context.size(), 5u);
  EXPECT_EQ(s.context[0], masked_channels(traj, 0));
  EXPECT_EQ(s.context[2], masked_channels(traj, 0));
  EXPECT_EQ(s.context[3], masked_channels(traj, 1));
  EXPECT_EQ(s.context[4], masked_channels(traj, 2));
  EXPECT_NEAR(s.target_v(0), -1.0, 1e-12);
  EXPECT_EQ(s.target_p0, traj.points[2].p0);
}

PsnParams constant_head(Index in, Index out, const Vec& value) {
  Rng rng = seeded_rng(0);
  PsnParams p = init_psn(in, 4, out, rng);
  p.weights = map_tensors<Mat>(p.weights, [](const std::string&, const Mat& m) { return Mat::Zero(m.rows(), m.cols()).eval(); });
  p.weights.head_b = value;
  return p;
}

TEST(FlowMatchingLoss, Examples) {
  Rng rng = seeded_rng(71);
  std::vector<FlowMatchSample> batch(6);
  for (FlowMatchSample& s : batch) {
    s.context = {random_vec(rng, 4), random_vec(rng, 4), random_vec(rng, 4)};
    s.target_v = Vec::Constant(1, 0.3);
  }
  EXPECT_EQ(flow_matching_loss(constant_head(4, 1, Vec::Constant(1, 0.3)), batch), 0.0);

  for (FlowMatchSample& s : batch) s.target_v = Vec::Ones(1);
  EXPECT_EQ(flow_matching_loss(constant_head(4, 1, Vec::Zero(1)), batch), 1.0);

  PsnParams net = init_psn(4, 4, 1, rng);
  net.weights.head_W1 = random_mat(rng, 1, 4);
  net.weights.head_W2 = random_mat(rng, 1, 4);
  const double base = flow_matching_loss(net, batch);
  for (FlowMatchSample& s : batch) {
    const double pred = encoder_forward(net, s.context).v(0);
    s.target_v(0) = pred + 2.0 * (s.target_v(0) - pred);
  }
  EXPECT_NEAR(flow_matching_loss(net, batch), 4.0 * base, 1e-12 * base);
}

TEST(FlowMatchingLoss, TapeMatchesDirectEvaluation) {
  Rng rng = seeded_rng(72);
  PsnParams net = init_psn(4, 5, 4, rng);
  net.weights.head_W1 = random_mat(rng, 4, 4);
  net.weights.head_W2 = random_mat(rng, 4, 5);
  net.input_shift = random_vec(rng, 4);
  net.input_scale = random_vec(rng, 4, 0.5, 2.0);
  net.output_scale = random_vec(rng, 4, 0.5, 2.0);
  std::vector<FlowMatchSample> batch(5);
  std::vector<Mat> ctx(3, Mat(4, 5));
  Mat target(4, 5);
  for (Index j = 0; j < 5; ++j) {
    FlowMatchSample& s = batch[static_cast<std::size_t>(j)];
    for (int i = 0; i < 3; ++i) {
      s.context.push_back(random_vec(rng, 4));
      ctx[static_cast<std::size_t>(i)].col(j) = s.context.back();
    }
    s.target_v = random_vec(rng, 4);
    target.col(j) = s.target_v;
  }
  ad::Tape tape;
  const double taped = flow_matching_loss(tape, bind(tape, net.weights, false), net, ctx, target).value()(0, 0);
  EXPECT_NEAR(taped, flow_matching_loss(net, batch), 1e-13);
}

SympNetParams small_sympnet(Rng& rng) {
  SympNetParams s = init_sympnet(2, 1, 4, 8, rng);
  for (auto& m : s.weights.modules) m.a *= 10.0;
  return s;
}

TEST(PredictionLoss, Examples) {
  Rng rng = seeded_rng(73);
  const SympNetParams s = small_sympnet(rng);
  const Mat in = random_mat(rng, 8, 7);
  Mat out(8, 7);
  for (Index j = 0; j < 7; ++j) out.col(j) = sympnet_map(s, in.col(j), 0.1);
  EXPECT_LT(prediction_loss(s, in, out, 0.1), 1e-28);

  const Mat other = random_mat(rng, 8, 7);
  EXPECT_NEAR(prediction_loss(s, in, other, 0.0), (in - other).colwise().squaredNorm().mean(), 1e-14);

  Vec w = Vec::Zero(8);
  w(3) = 2.0;
  EXPECT_NEAR(prediction_loss(s, in, other, 0.0, w), 2.0 * (in - other).row(3).squaredNorm() / 7.0, 1e-14);

  Mat pin = in, pout = other;
  pin.col(0).swap(pin.col(5));
  pout.col(0).swap(pout.col(5));
  EXPECT_NEAR(prediction_loss(s, pin, pout, 0.1), prediction_loss(s, in, other, 0.1), 1e-14);

  ad::Tape tape;
  EXPECT_NEAR(prediction_loss(tape, bind(tape, s.weights, false), s, in, other, 0.1).value()(0, 0),
              prediction_loss(s, in, other, 0.1), 1e-13);
}

TEST(Adam, UpdatesAndBookkeeping) {
  Rng rng = seeded_rng(74);
  const SympNetParams s = init_sympnet(1, 0, 2, 3, rng);
  SympNetWeights<Mat> w = s.weights;
  AdamState<SympNetWeights> state = adam_init(w);
  const SympNetWeights<Mat> zeros = state.m;
  EXPECT_TRUE(adam_step(w, zeros, state, AdamConfig{}));
  EXPECT_EQ(state.step, 1u);
  EXPECT_EQ(w.modules[0].K, s.weights.modules[0].K);

  SympNetWeights<Mat> g = map_tensors<Mat>(w, [](const std::string&, const Mat& m) { return Mat::Constant(m.rows(), m.cols(), 3.0).eval(); });
  g.modules[1].a *= -1.0;
  const SympNetWeights<Mat> before = w;
  AdamConfig cfg;
  cfg.learning_rate = 0.01;
  state = adam_init(w);
  EXPECT_TRUE(adam_step(w, g, state, cfg));
  EXPECT_LT(max_abs(w.modules[0].K - (before.modules[0].K.array() - 0.01).matrix()), 1e-9);
  EXPECT_LT(max_abs(w.modules[1].a - (before.modules[1].a.array() + 0.01).matrix()), 1e-9);

  g.modules[0].b(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const SympNetWeights<Mat> held = w;
  EXPECT_FALSE(adam_step(w, g, state, cfg));
  EXPECT_EQ(state.step, 2u);
  EXPECT_EQ(w.modules[1].K, held.modules[1].K);
}

TEST(Split, ByTrajectory) {
  const DataSplit a = split_by_trajectory(10, 0.2, 5);
  EXPECT_EQ(a.val.size(), 2u);
  EXPECT_EQ(a.train.size(), 8u);
  std::vector<std::size_t> all = a.train;
  all.insert(all.end(), a.val.begin(), a.val.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(all[i], i);
  const DataSplit b = split_by_trajectory(10, 0.2, 5);
  EXPECT_EQ(a.val, b.val);

  const DataSplit one = split_by_trajectory(1, 0.2, 5);
  EXPECT_EQ(one.train, std::vector<std::size_t>{0});
  EXPECT_EQ(one.val, std::vector<std::size_t>{0});
  EXPECT_THROW(split_by_trajectory(0, 0.2, 5), DataError);
  EXPECT_THROW(split_by_trajectory(4, 1.0, 5), ConfigError);
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.context = 4;
  cfg.seed = 9;
  cfg.batch_size = 32;
  cfg.adam.learning_rate = 3e-3;
  return cfg;
}

TEST(TrainPsn, ConservativeP0IsLearned) {
  const std::vector<LiftedTrajectory> data = oscillator_data(4, 100, 0.0, 0.0, 75);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.seed = 9;
  const TrainResult<PsnParams> r = train_psn(data, cfg, PsnModelConfig{});
  ASSERT_EQ(r.history.size(), 50u);
  EXPECT_EQ(r.history.front().epoch, 1u);
  for (const EpochMetrics& m : r.history) {
    EXPECT_TRUE(std::isfinite(m.train_loss));
    EXPECT_TRUE(std::isfinite(m.val_loss));
    EXPECT_FALSE(m.wall_time_s.has_value());
  }
  EXPECT_GE(r.best_epoch, 1u);
  EXPECT_LT(r.history[r.best_epoch - 1].val_loss, 1e-6);

  // The track stays on the constant energy level.
  const std::vector<double> track = psn_p0_track(r.params, data[0], cfg.context);
  double worst = 0.0;
  for (std::size_t k = 0; k < track.size(); ++k) worst = std::max(worst, std::abs(track[k] - data[0].points[k].p0));
  EXPECT_LT(worst, 1e-2);
}

TEST(TrainPsn, DeterministicAndValidated) {
  const std::vector<LiftedTrajectory> data = oscillator_data(3, 40, 0.1, 0.5, 76);
  TrainConfig cfg = quick_config(3);
  cfg.record_wall_time = true;
  const TrainResult<PsnParams> a = train_psn(data, cfg, PsnModelConfig{6});
  const TrainResult<PsnParams> b = train_psn(data, cfg, PsnModelConfig{6});
  visit(a.params.weights, [&, i = 0](const std::string& name, const Mat& t) mutable {
    std::vector<const Mat*> other;
    visit(b.params.weights, [&](const std::string&, const Mat& u) { other.push_back(&u); });
    EXPECT_EQ(t, *other[static_cast<std::size_t>(i++)]) << name;
  });
  EXPECT_TRUE(a.history.back().wall_time_s.has_value());
  EXPECT_THROW(train_psn({}, cfg, PsnModelConfig{6}), DataError);
  cfg.context = 1;
  EXPECT_THROW(train_psn(data, cfg, PsnModelConfig{6}), ConfigError);
}

TEST(TrainSympNet, DampedOscillatorOneStep) {
  const std::vector<LiftedTrajectory> data = oscillator_data(5, 200, 0.1, 0.0, 77);
  TrainConfig cfg = quick_config(150);
  const TrainResult<SympNetParams> r = train_sympnet(data, nullptr, cfg, SympNetModelConfig{});
  ASSERT_EQ(r.history.size(), 150u);
  EXPECT_LT(r.history[r.best_epoch - 1].val_loss, r.history.front().val_loss);

  // One-step error relative to the target state on the validation trajectory.
  double err = 0.0, norm = 0.0;
  for (std::size_t i : split_by_trajectory(data.size(), cfg.val_fraction, cfg.seed).val) {
    const LiftedTrajectory& t = data[i];
    for (std::size_t k = 0; k + 1 < t.points.size(); ++k) {
      err += (sympnet_step(r.params, t.points[k], t.dt).flatten() - t.points[k + 1].flatten()).squaredNorm();
      norm += t.points[k + 1].flatten().squaredNorm();
    }
  }
  EXPECT_LT(std::sqrt(err / norm), 0.01);

  SympNetModelConfig psn_p0;
  psn_p0.p0_source = P0Source::psn;
  EXPECT_THROW(train_sympnet(data, nullptr, cfg, psn_p0), ConfigError);
}

TEST(TrainSympNet, EquilibriumIsNearIdentity) {
  const PendulumOnCircle pend(1.0, 1.0, 9.81, 0.0);
  Vec q(2);
  q << 0.0, -1.0;
  const Trajectory rest = generate_trajectory(pend, PhasePoint{q, Vec::Zero(2), 0.0, Vec()}, ControlSignal{}, 50, 0.05);
  const std::vector<LiftedTrajectory> data{dirac_lift(rest, pend), dirac_lift(rest, pend)};
  const TrainResult<SympNetParams> r = train_sympnet(data, nullptr, quick_config(100), SympNetModelConfig{});
  EXPECT_LT(r.history[r.best_epoch - 1].val_loss, 1e-8);
}

TEST(Rollout, OracleAndIdentity) {
  const DampedDrivenOscillator osc(1.0, 1.0, 0.1);
  const LiftedTrajectory traj = oscillator_data(1, 60, 0.1, 0.5, 78)[0];
  const StepPredictor oracle = [&](const LiftedPoint& z) {
    const auto k = static_cast<std::size_t>(std::llround(z.q0 / traj.dt));
    return traj.points.at(k + 1);
  };
  const RolloutMetrics exact = evaluate_rollout(osc, oracle, traj, 40, 5);
  EXPECT_EQ(exact.coordinate_rmse.size(), 4);
  EXPECT_EQ(max_abs(exact.coordinate_rmse), 0.0);
  EXPECT_EQ(exact.rollouts, 1u);
  EXPECT_LT(exact.gauge_residual, 1e-12);

  const StepPredictor still = [](const LiftedPoint& z) { return z; };
  const RolloutMetrics frozen = evaluate_rollout(osc, still, traj, 40, 5);
  Vec sq = Vec::Zero(4);
  for (std::size_t k = 6; k <= 45; ++k) sq += (traj.points[k].flatten() - traj.points[5].flatten()).cwiseAbs2();
  EXPECT_LT(max_abs(frozen.coordinate_rmse - (sq / 40.0).cwiseSqrt()), 1e-14);
  EXPECT_GE(frozen.hamiltonian_drift, 0.0);
  EXPECT_GT(frozen.coordinate_range(2), 0.0);

  EXPECT_THROW(rollout(still, traj, 30, 31), ConfigError);
  EXPECT_NO_THROW(rollout(still, traj, 30, 30));
}

TEST(Rollout, TrackReplacesInitialP0) {
  const DampedDrivenOscillator osc(1.0, 1.0, 0.1);
  const LiftedTrajectory traj = oscillator_data(1, 20, 0.1, 0.5, 79)[0];
  std::vector<double> track(traj.size());
  for (std::size_t k = 0; k < track.size(); ++k) track[k] = traj.points[k].p0 + 0.5;
  const Rollout r = rollout([](const LiftedPoint& z) { return z; }, traj, 3, 4, &track);
  EXPECT_EQ(r.predicted.front().p0, traj.points[3].p0 + 0.5);
  const RolloutMetrics m = evaluate_rollout(osc, [](const LiftedPoint& z) { return z; }, traj, 4, 3, &track);
  EXPECT_NEAR(m.p0_rmse, 0.5, 1e-12);
  EXPECT_NEAR(m.p0_max_error, 0.5, 1e-12);
}

}  // namespace
}  // namespace dirac
