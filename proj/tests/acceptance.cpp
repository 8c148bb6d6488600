// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// non-zero if any selected criterion fails. Arguments select criteria by
// number; no arguments runs all of them.
#include "cli.hpp"

#include "dirac/dataio.hpp"
#include "dirac/geometry.hpp"
#include "dirac/integrators.hpp"
#include "dirac/training.hpp"
#include "dirac/verify.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace {

using namespace dirac;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", x);
  return buf;
}

std::string fixed(double x, int digits = 1) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + what + (ok ? "" : " [over limit]");
  }
};

std::string all_checks(const std::vector<Check>& checks, Outcome& out) {
  std::string failed;
  for (const Check& c : checks) {
    out.pass = out.pass && c.pass;
    if (!c.pass) failed += " " + c.name + "=" + sci(c.measured);
  }
  return failed;
}

std::string repo_file(const std::string& rel) { return (fs::path(DIRAC_SOURCE_DIR) / rel).string(); }

// ---------------------------------------------------------------------------
// Pendulum study shared by criteria 2, 3, 7, 8 and 10: damped pendulum on a
// circle driven by a random piecewise-constant torque.

struct StudySettings {
  std::size_t train = 200, held_out = 50, steps = 500;
  double dt = 0.01;
  int context = 10;
  Index psn_hidden = 32;
  std::size_t psn_epochs = 60, psn_windows = 20000;
  int modules = 8;
  Index width = 32;
  std::size_t sympnet_epochs = 150, sympnet_windows = 20000;
  std::size_t horizon = 100;
};

RunConfig study_config(std::uint64_t seed, std::size_t count, double range) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.system = "pendulum_on_circle";
  cfg.control_kind = ControlSignal::Kind::piecewise_random;
  cfg.control_amplitude = {1.0};
  cfg.control_hold_s = 0.5;
  cfg.dt = StudySettings{}.dt;
  cfg.steps = StudySettings{}.steps;
  cfg.trajectories = count;
  cfg.position_range = range;
  cfg.rate_range = range;
  return cfg;
}

struct Study {
  StudySettings s;
  std::unique_ptr<MechanicalSystem> sys;
  std::vector<LiftedTrajectory> train, held_out;
  PsnParams psn;
  SympNetParams sympnet;
  double data_s = 0.0, psn_s = 0.0, sympnet_s = 0.0;
};

std::vector<LiftedTrajectory> lift_all(const RunConfig& cfg, const MechanicalSystem& sys) {
  std::vector<LiftedTrajectory> out;
  for (std::size_t i = 0; i < cfg.trajectories; ++i) {
    out.push_back(dirac_lift(generate_dataset_trajectory(cfg, sys, i), sys, {cfg.substeps}));
  }
  return out;
}

Study& study() {
  static std::optional<Study> st;
  if (st) return *st;
  st.emplace();
  Study& s = *st;
  auto t0 = Clock::now();
  // Held-out initial conditions come from a wider box than the training set.
  const RunConfig train_cfg = study_config(101, s.s.train, 1.0);
  const RunConfig held_cfg = study_config(202, s.s.held_out, 1.25);
  s.sys = make_system(train_cfg);
  s.train = lift_all(train_cfg, *s.sys);
  s.held_out = lift_all(held_cfg, *s.sys);
  s.data_s = seconds_since(t0);
  std::cerr << "study: " << s.train.size() << " + " << s.held_out.size() << " trajectories in " << fixed(s.data_s) << " s\n";

  t0 = Clock::now();
  TrainConfig pc;
  pc.context = s.s.context;
  pc.epochs = s.s.psn_epochs;
  pc.windows_per_epoch = s.s.psn_windows;
  pc.seed = 7;
  s.psn = train_psn(s.train, pc, {s.s.psn_hidden}).params;
  s.psn_s = seconds_since(t0);
  std::cerr << "study: PSN trained in " << fixed(s.psn_s) << " s\n";

  t0 = Clock::now();
  TrainConfig sc;
  sc.epochs = s.s.sympnet_epochs;
  sc.windows_per_epoch = s.s.sympnet_windows;
  sc.seed = 8;
  SympNetModelConfig mc;
  mc.modules = s.s.modules;
  mc.width = s.s.width;
  mc.mask_multipliers = true;
  mc.loss_weighting = LossWeighting::normalized;
  s.sympnet = train_sympnet(s.train, nullptr, sc, mc).params;
  s.sympnet_s = seconds_since(t0);
  std::cerr << "study: SympNet trained in " << fixed(s.sympnet_s) << " s\n";
  return s;
}

// ---------------------------------------------------------------------------

Outcome criterion_1() {
  Outcome o;
  const auto t0 = Clock::now();
  const std::vector<Check> checks = verify_geometry();
  const std::string failed = all_checks(checks, o);
  const double s = seconds_since(t0);
  o.require(lifted_dimension(19, 18, 24) == 87, "lifted_dimension(19,18,24) = " + std::to_string(lifted_dimension(19, 18, 24)));
  o.require(s < 1.0, std::to_string(checks.size()) + " checks" + failed + " in " + fixed(s, 3) + " s");
  return o;
}

Outcome criterion_2() {
  Outcome o;
  double random_worst = 0.0;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng = seeded_rng(seed);
    // Pendulum and two-link lifted dimensions.
    random_worst = std::max(random_worst, sympnet_symplecticity(init_sympnet(2, 1, 6, 32, rng), 0.01, 100, rng));
    random_worst = std::max(random_worst, sympnet_symplecticity(init_sympnet(4, 2, 6, 32, rng), 0.01, 100, rng));
  }
  const double random_s = seconds_since(t0);
  const Study& st = study();
  const auto t1 = Clock::now();
  Rng rng = seeded_rng(13);
  const double trained = sympnet_symplecticity(st.sympnet, st.s.dt, 100, rng);
  const double trained_s = seconds_since(t1);
  o.require(random_worst <= 1e-5, "random SympNets (6 nets x 100 points) " + sci(random_worst));
  o.require(trained <= 1e-5, "trained SympNet (100 points) " + sci(trained));
  o.require(random_s + trained_s < 10.0, "certificate time " + fixed(random_s + trained_s, 2) + " s");
  return o;
}

struct DatasetCheck {
  double gauge = 0.0, drift = 0.0, work = 0.0, max_h = 0.0;
};

DatasetCheck check_dataset(const std::vector<LiftedTrajectory>& data, const MechanicalSystem& sys) {
  DatasetCheck c;
  for (const LiftedTrajectory& t : data) {
    for (const LiftedPoint& z : t.points) {
      const GaugeResidual g = gauge_residual(z, sys);
      c.gauge = std::max({c.gauge, std::abs(g.r0), g.r_pi});
      c.max_h = std::max(c.max_h, std::abs(hamiltonian(sys, z.q, z.p)));
    }
    c.drift = std::max(c.drift, extended_hamiltonian_drift(t, sys));
    c.work = std::max(c.work, work_energy_residual(t, sys));
  }
  return c;
}

Outcome criterion_3() {
  Outcome o;
  // The shipped configurations plus the pendulum study sets.
  for (const char* name : {"oscillator", "pendulum", "two_link"}) {
    const auto t0 = Clock::now();
    const RunConfig cfg = load_config(repo_file(std::string("configs/") + name + ".ini"));
    const auto sys = make_system(cfg);
    const DatasetCheck c = check_dataset(lift_all(cfg, *sys), *sys);
    const double s = seconds_since(t0);
    const double limit = 1e-6 * (1.0 + c.max_h);
    o.require(c.gauge <= 1e-8 && c.drift <= limit && c.work <= limit && s < 10.0,
              std::string(name) + ": gauge " + sci(c.gauge) + ", H~ drift " + sci(c.drift) + ", work-energy " +
                  sci(c.work) + " (limit " + sci(limit) + "), " + fixed(s, 2) + " s");
  }
  const Study& st = study();
  for (const auto* set : {&st.train, &st.held_out}) {
    const DatasetCheck c = check_dataset(*set, *st.sys);
    const double limit = 1e-6 * (1.0 + c.max_h);
    o.require(c.gauge <= 1e-8 && c.drift <= limit && c.work <= limit,
              std::string(set == &st.train ? "study train" : "study held-out") + ": gauge " + sci(c.gauge) +
                  ", H~ drift " + sci(c.drift) + ", work-energy " + sci(c.work));
  }
  o.require(st.data_s < 10.0 * 2, "study generation " + fixed(st.data_s, 2) + " s for 2 datasets");
  return o;
}

Outcome criterion_4() {
  Outcome o;
  for (const Check& c : verify_lift(100, 7))
    o.require(c.pass, c.name + " " + sci(c.measured) + " over 100 states (limit " + sci(c.threshold) + ")");
  return o;
}

Outcome criterion_5() {
  Outcome o;
  for (const Check& c : verify_integrators()) o.require(c.pass, c.name + " " + sci(c.measured) + " (limit " + sci(c.threshold) + ")");
  return o;
}

Outcome criterion_6() {
  Outcome o;
  const auto t0 = Clock::now();
  for (const Check& c : verify_gradients()) o.require(c.pass, c.name + " " + sci(c.measured) + " (" + c.note + ")");
  const double s = seconds_since(t0);
  o.require(s < 60.0, fixed(s, 2) + " s");
  return o;
}

Outcome criterion_7() {
  Outcome o;
  const Study& st = study();
  double sq = 0.0, within = 0.0, pooled = 0.0, mean = 0.0, anchored = 0.0;
  std::size_t n = 0;
  for (const LiftedTrajectory& t : st.held_out)
    for (const LiftedPoint& z : t.points) {
      mean += z.p0;
      ++n;
    }
  mean /= static_cast<double>(n);
  for (const LiftedTrajectory& t : st.held_out) {
    const std::vector<double> track = psn_p0_track(st.psn, t, st.s.context);
    double tm = 0.0;
    for (const LiftedPoint& z : t.points) tm += z.p0;
    tm /= static_cast<double>(t.size());
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double p0 = t.points[k].p0;
      sq += (track[k] - p0) * (track[k] - p0);
      within += (p0 - tm) * (p0 - tm);
      pooled += (p0 - mean) * (p0 - mean);
      anchored += (t.points[0].p0 - p0) * (t.points[0].p0 - p0);
    }
  }
  const double rmse = std::sqrt(sq / n), sd_within = std::sqrt(within / n), sd = std::sqrt(pooled / n);
  const double rmse_anchor = std::sqrt(anchored / n);
  // The best single constant over the held-out set is its mean, whose RMSE is
  // the pooled std. The within-trajectory spread is reported alongside.
  o.require(rmse <= 0.1 * sd, "p0 RMSE " + sci(rmse) + " = " + fixed(100 * rmse / sd, 2) + "% of held-out std " + sci(sd) +
                                  " (" + fixed(100 * rmse / sd_within, 2) + "% of within-trajectory std " +
                                  sci(sd_within) + ")");
  o.require(rmse <= 0.25 * sd, "vs best constant " + fixed(rmse / sd, 3) + "x, vs anchored constant p0(0) " +
                                   fixed(rmse / rmse_anchor, 3) + "x");
  o.require(st.data_s + st.psn_s < 1800.0, "data + PSN training " + fixed(st.data_s + st.psn_s) + " s");
  return o;
}

Outcome criterion_8() {
  Outcome o;
  const Study& st = study();
  const auto t0 = Clock::now();
  const StepPredictor step = sympnet_predictor(st.sympnet, st.s.dt);
  std::vector<Rollout> rollouts;
  std::vector<std::vector<double>> tracks;
  for (const LiftedTrajectory& t : st.held_out) {
    tracks.push_back(psn_p0_track(st.psn, t, st.s.context));
    for (std::size_t start = 0; start + st.s.horizon < t.size(); start += st.s.horizon)
      rollouts.push_back(rollout(step, t, start, st.s.horizon, &tracks.back()));
  }
  const RolloutMetrics m = evaluate_rollouts(*st.sys, rollouts, st.held_out, tracks);
  double max_h = 0.0;
  for (const LiftedTrajectory& t : st.held_out)
    for (const LiftedPoint& z : t.points) max_h = std::max(max_h, std::abs(hamiltonian(*st.sys, z.q, z.p)));

  const std::vector<std::string> names = {"q0", "x", "y", "lambda", "p0", "px", "py", "pi"};
  double worst = 0.0;
  std::string per;
  for (Index c = 0; c < m.coordinate_rmse.size(); ++c) {
    const double range = m.coordinate_range(c), rmse = m.coordinate_rmse(c);
    // A coordinate with no spread must be reproduced exactly.
    const double ratio = range > 0.0 ? rmse / range : (rmse == 0.0 ? 0.0 : INFINITY);
    worst = std::max(worst, ratio);
    per += " " + names[static_cast<std::size_t>(c)] + " " + fixed(100 * ratio, 2) + "%";
  }
  const double L = dynamic_cast<const PendulumOnCircle&>(*st.sys).length();
  o.require(worst <= 0.05, std::to_string(rollouts.size()) + " rollouts x " + std::to_string(st.s.horizon) +
                               " steps, RMSE/range:" + per);
  o.require(m.constraint_drift <= 1e-3 * L * L, "max|phi| " + sci(m.constraint_drift) + " (limit " + sci(1e-3 * L * L) + ")");
  o.require(m.hamiltonian_drift <= 0.01 * max_h,
            "H~ drift " + sci(m.hamiltonian_drift) + " = " + fixed(100 * m.hamiltonian_drift / max_h, 2) + "% of max|H| " + sci(max_h));
  o.require(st.data_s + st.psn_s + st.sympnet_s + seconds_since(t0) < 1800.0,
            "SympNet training " + fixed(st.sympnet_s) + " s, total " + fixed(st.data_s + st.psn_s + st.sympnet_s + seconds_since(t0)) + " s");
  return o;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) {
      std::ifstream is(e.path(), std::ios::binary);
      std::ostringstream ss;
      ss << is.rdbuf();
      out[fs::relative(e.path(), root).string()] = ss.str();
    }
  return out;
}

Outcome criterion_9() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "dirac_acceptance_9";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string cfg = repo_file("configs/pendulum.ini");
  std::string log;
  auto pipeline = [&](const fs::path& dir) {
    const std::string d = dir.string();
    const std::vector<std::vector<std::string>> commands = {
        {"generate", "--config", cfg, "--out", d, "--quiet"},
        {"lift", "--in", d + "/trajectories.csv", "--config", cfg, "--out", d + "/lifted.csv", "--quiet"},
        {"train-psn", "--in", d + "/lifted.csv", "--config", cfg, "--out", d, "--quiet"},
        {"train-sympnet", "--in", d + "/lifted.csv", "--psn", d + "/psn.weights", "--config", cfg, "--out", d, "--quiet"},
        {"rollout", "--weights", d + "/sympnet.weights", "--psn", d + "/psn.weights", "--in", d + "/lifted.csv",
         "--config", cfg, "--out", d + "/rollout.csv", "--quiet"},
        {"verify", "--weights", d + "/sympnet.weights"}};
    for (const auto& args : commands) {
      std::ostringstream out, err;
      const int code = cli::run(args, out, err);
      if (code != 0) throw std::runtime_error(args[0] + " exited " + std::to_string(code) + ": " + err.str());
      if (args[0] == "verify") {
        std::string text = out.str();
        for (std::size_t at; (at = text.find(d)) != std::string::npos;) text.replace(at, d.size(), "<run>");
        log += text;
      }
    }
  };
  const auto t0 = Clock::now();
  pipeline(root / "a");
  const std::string first_log = log;
  log.clear();
  pipeline(root / "b");
  const auto a = tree_bytes(root / "a"), b = tree_bytes(root / "b");
  std::string differing;
  for (const auto& [name, bytes] : a)
    if (!b.contains(name) || b.at(name) != bytes) differing += " " + name;
  o.require(a.size() == b.size() && differing.empty(),
            std::to_string(a.size()) + " files from generate/lift/train-psn/train-sympnet/rollout" +
                (differing.empty() ? " byte-identical" : ", differing:" + differing));
  o.require(first_log == log, "verify output identical");
  o.detail += "; " + fixed(seconds_since(t0)) + " s";
  fs::remove_all(root);
  return o;
}

Outcome criterion_10() {
  Outcome o;
  const Study& st = study();
  // Least-squares affine step z' ≈ A z + c on the SympNet's training pairs.
  std::vector<std::pair<Vec, Vec>> pairs;
  for (const LiftedTrajectory& t : st.train)
    for (std::size_t k = 0; k + 1 < t.size(); k += 5) pairs.emplace_back(t.points[k].flatten(), t.points[k + 1].flatten());
  const Index D = pairs.front().first.size();
  Mat X(static_cast<Index>(pairs.size()), D + 1), Y(static_cast<Index>(pairs.size()), D);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    X.row(static_cast<Index>(i)) << pairs[i].first.transpose(), 1.0;
    Y.row(static_cast<Index>(i)) = pairs[i].second.transpose();
  }
  // x² + y² = L² and the gauge make columns nearly dependent; take the
  // minimum-norm solution.
  Eigen::CompleteOrthogonalDecomposition<Mat> cod;
  cod.setThreshold(1e-10);
  cod.compute(X);
  const Mat W = cod.solve(Y);  // (D+1) × D
  const Mat A = W.topRows(D).transpose();
  const Vec c = W.row(D).transpose();
  const FlatMap affine = [&](const Vec& z) { return (A * z + c).eval(); };
  double fit = 0.0, scale = 0.0;
  for (const auto& [z, z1] : pairs) {
    fit += (affine(z) - z1).squaredNorm();
    scale += (z1 - z).squaredNorm();
  }
  Rng rng = seeded_rng(13);
  const std::vector<Vec> states = sympnet_sample_states(st.sympnet, 100, rng);
  const double residual = map_symplecticity(affine, states);
  const double trained = map_symplecticity([&](const Vec& z) { return sympnet_map(st.sympnet, z, st.s.dt); }, states);
  o.require(residual >= 1e-2, "affine predictor residual " + sci(residual) + " at the trained SympNet's 100 certificate states (SympNet " +
                                  sci(trained) + "); affine one-step error " + fixed(100 * std::sqrt(fit / scale), 1) +
                                  "% of the step");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"canonical form identities", criterion_1},
      {"symplecticity certificate", criterion_2},
      {"lift correctness", criterion_3},
      {"pullback condition", criterion_4},
      {"integrator certificates", criterion_5},
      {"gradient correctness", criterion_6},
      {"p0 prediction on held-out pendulum data", criterion_7},
      {"100-step rollouts on held-out pendulum data", criterion_8},
      {"byte-identical reruns", criterion_9},
      {"non-symplectic negative control", criterion_10}};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
