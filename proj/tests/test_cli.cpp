#include "cli.hpp"

#include "dirac/dataio.hpp"
#include "dirac/geometry.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

namespace dirac {
namespace {

namespace fs = std::filesystem;
using test::scratch_dir;

struct Result {
  int code;
  std::string out, err;
};

Result dirac(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  os << s;
}

fs::path write_config(const fs::path& dir, const std::string& body) {
  const fs::path p = dir / "run.ini";
  spit(p, "[run]\nseed = 4\noutput_dir = " + (dir / "out").string() + "\n" + body);
  return p;
}

const char* kPendulum = R"(
[system]
id = pendulum_on_circle
damping = 0.05

[control]
kind = piecewise_random
amplitude = 1.0
hold_s = 0.3

[integrator]
dt = 0.02
steps = 60

[dataset]
trajectories = 4

[psn]
hidden = 6
context = 4
epochs = 3

[sympnet]
modules = 4
width = 8
epochs = 3

[train]
batch_size = 32
val_fraction = 0.25

[rollout]
horizon = 20
)";

// generate + lift into dir/out.
fs::path pendulum_lifted(const fs::path& dir) {
  const fs::path cfg = write_config(dir, kPendulum);
  EXPECT_EQ(dirac({"generate", "--config", cfg.string(), "--quiet"}).code, 0);
  EXPECT_EQ(dirac({"lift", "--in", (dir / "out" / "trajectories.csv").string(), "--config", cfg.string(), "--quiet"}).code, 0);
  return dir / "out" / "lifted.csv";
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(dirac({}).code, 1);
  EXPECT_EQ(dirac({"frobnicate"}).code, 1);
  EXPECT_EQ(dirac({"generate"}).code, 1);
  EXPECT_EQ(dirac({"verify", "--bogus"}).code, 1);
  EXPECT_EQ(dirac({"--help"}).code, 0);
  const Result r = dirac({"lift", "--in", "/nonexistent/trajectories.csv"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_EQ(dirac({"generate", "--config", "/nonexistent.ini"}).code, 1);
}

TEST(Cli, GenerateWritesDeterministicDataset) {
  const fs::path dir = scratch_dir();
  const fs::path cfg = write_config(dir, kPendulum);
  const Result r = dirac({"generate", "--config", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("wrote 4 trajectories"), std::string::npos) << r.out;
  const std::vector<Trajectory> trajs = load_trajectories(dir / "out" / "trajectories.csv");
  ASSERT_EQ(trajs.size(), 4u);
  for (const Trajectory& t : trajs) EXPECT_EQ(t.steps(), 60u);

  ASSERT_EQ(dirac({"generate", "--config", cfg.string(), "--out", (dir / "again").string(), "--quiet"}).code, 0);
  EXPECT_EQ(slurp(dir / "out" / "trajectories.csv"), slurp(dir / "again" / "trajectories.csv"));
  ASSERT_EQ(dirac({"generate", "--config", cfg.string(), "--out", (dir / "other").string(), "--seed", "5", "--quiet"}).code, 0);
  EXPECT_NE(slurp(dir / "out" / "trajectories.csv"), slurp(dir / "other" / "trajectories.csv"));
}

TEST(Cli, InfeasibleInitialStateIsNumerical) {
  const fs::path dir = scratch_dir();
  std::string body = kPendulum;
  body.replace(body.find("trajectories = 4\n"), 17, "trajectories = 4\ninitial_q = 0, 0\ninitial_p = 0, 0\n");
  const fs::path cfg = write_config(dir, body);
  const Result r = dirac({"generate", "--config", cfg.string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(r.err.rfind("ERR ", 0), 0u) << r.err;
  EXPECT_NE(r.err.find("traj=0 step=0"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "out" / "trajectories.csv"));
}

TEST(Cli, LiftOfConservativeData) {
  const fs::path dir = scratch_dir();
  const fs::path cfg = write_config(dir, R"(
[system]
id = damped_oscillator
damping = 0

[integrator]
dt = 0.01
steps = 300

[dataset]
trajectories = 3
)");
  ASSERT_EQ(dirac({"generate", "--config", cfg.string(), "--quiet"}).code, 0);
  const Result r = dirac({"lift", "--in", (dir / "out" / "trajectories.csv").string(), "--out", (dir / "l.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("max |H~ drift|"), std::string::npos);
  const auto sys = system_from_sidecar(dir / "l.csv");
  const std::vector<LiftedTrajectory> lifted = load_lifted(dir / "l.csv");
  ASSERT_EQ(lifted.size(), 3u);
  for (const LiftedTrajectory& t : lifted) {
    EXPECT_LE(extended_hamiltonian_drift(t, *sys), 1e-8);
    EXPECT_LE(std::abs(t.points.back().p0 - t.points.front().p0), 1e-8);
  }
}

TEST(Cli, LiftReportsSingularStep) {
  const fs::path dir = scratch_dir();
  const fs::path cfg = write_config(dir, kPendulum);
  ASSERT_EQ(dirac({"generate", "--config", cfg.string(), "--quiet"}).code, 0);
  const fs::path csv = dir / "out" / "trajectories.csv";
  // Put trajectory 1 at the circle's centre at step 7.
  std::istringstream is(slurp(csv));
  std::string line, text;
  while (std::getline(is, line)) {
    if (line.rfind("1,7,", 0) == 0) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
      f[3] = f[4] = "0";  // traj_id,k,t,q_0,q_1,...
      line.clear();
      for (std::size_t i = 0; i < f.size(); ++i) line += (i ? "," : "") + f[i];
    }
    text += line + "\n";
  }
  spit(csv, text);
  const Result r = dirac({"lift", "--in", csv.string(), "--out", (dir / "l.csv").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("ERR singular_matrix traj=1 step=7"), std::string::npos) << r.err;
}

TEST(Cli, TrainingArtifactsAreReproducible) {
  const fs::path dir = scratch_dir();
  const fs::path lifted = pendulum_lifted(dir);
  const fs::path cfg = dir / "run.ini";
  const Result p = dirac({"train-psn", "--in", lifted.string(), "--config", cfg.string()});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_NE(p.out.find("best val epoch"), std::string::npos);
  const fs::path psn = dir / "out" / "psn.weights";
  const std::string psn_bytes = slurp(psn);
  EXPECT_EQ(psn_from_archive(load_weights(psn, "psn")).hidden_dim(), 6);
  const std::string metrics = slurp(dir / "out" / "psn_metrics.csv");
  EXPECT_EQ(metrics.rfind("epoch,train_loss,val_loss,wall_time_s\n1,", 0), 0u) << metrics;
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 4);

  const Result s = dirac({"train-sympnet", "--in", lifted.string(), "--psn", psn.string(), "--config", cfg.string(), "--quiet"});
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_EQ(slurp(psn), psn_bytes);
  const std::string sym_bytes = slurp(dir / "out" / "sympnet.weights");

  ASSERT_EQ(dirac({"train-psn", "--in", lifted.string(), "--config", cfg.string(), "--quiet"}).code, 0);
  ASSERT_EQ(dirac({"train-sympnet", "--in", lifted.string(), "--psn", psn.string(), "--config", cfg.string(), "--quiet"}).code, 0);
  EXPECT_EQ(slurp(psn), psn_bytes);
  EXPECT_EQ(slurp(dir / "out" / "sympnet.weights"), sym_bytes);

  // A SympNet archive is not a PSN archive.
  const Result wrong = dirac({"train-sympnet", "--in", lifted.string(), "--psn", (dir / "out" / "sympnet.weights").string(),
                              "--config", cfg.string(), "--quiet"});
  EXPECT_EQ(wrong.code, 2);
  EXPECT_NE(wrong.err.find("expected kind psn"), std::string::npos) << wrong.err;
}

TEST(Cli, RolloutMetricsMatchLibrary) {
  const fs::path dir = scratch_dir();
  const fs::path lifted = pendulum_lifted(dir);
  const fs::path cfg = dir / "run.ini";
  ASSERT_EQ(dirac({"train-psn", "--in", lifted.string(), "--config", cfg.string(), "--quiet"}).code, 0);
  const fs::path psn = dir / "out" / "psn.weights";
  ASSERT_EQ(dirac({"train-sympnet", "--in", lifted.string(), "--psn", psn.string(), "--config", cfg.string(), "--quiet"}).code, 0);
  const fs::path weights = dir / "out" / "sympnet.weights";

  const Result r = dirac({"rollout", "--weights", weights.string(), "--in", lifted.string(), "--horizon", "1",
                          "--oracle-lift", "--out", (dir / "r.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const SympNetParams params = sympnet_from_archive(load_weights(weights));
  const std::vector<LiftedTrajectory> data = load_lifted(lifted);
  const auto sys = system_from_sidecar(lifted);
  std::vector<Rollout> rollouts;
  for (const LiftedTrajectory& t : data) rollouts.push_back(rollout(sympnet_predictor(params, t.dt), t, 0, 1));
  const RolloutMetrics m = evaluate_rollouts(*sys, rollouts, data);
  const std::string metrics = slurp(dir / "r_metrics.csv");
  EXPECT_NE(metrics.find("rmse_q_0," + format_double(m.coordinate_rmse(1)) + "\n"), std::string::npos) << metrics;
  EXPECT_NE(metrics.find("rmse_p0," + format_double(m.coordinate_rmse(4)) + "\n"), std::string::npos) << metrics;
  EXPECT_NE(metrics.find("hamiltonian_drift," + format_double(m.hamiltonian_drift) + "\n"), std::string::npos);
  EXPECT_NE(metrics.find("rollouts,4\n"), std::string::npos);
  const std::string csv = slurp(dir / "r.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "traj_id,start,step,t,pred_q0,true_q0,pred_q_0,true_q_0,pred_q_1,true_q_1,pred_lambda_0,true_lambda_0,"
            "pred_p0,true_p0,pred_p_0,true_p_0,pred_p_1,true_p_1,pred_pi_0,true_pi_0");

  // With the PSN track; repeated runs agree byte for byte.
  ASSERT_EQ(dirac({"rollout", "--weights", weights.string(), "--in", lifted.string(), "--psn", psn.string(), "--config",
                   cfg.string(), "--out", (dir / "a.csv").string(), "--quiet"}).code, 0);
  ASSERT_EQ(dirac({"rollout", "--weights", weights.string(), "--in", lifted.string(), "--psn", psn.string(), "--config",
                   cfg.string(), "--out", (dir / "b.csv").string(), "--quiet"}).code, 0);
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  EXPECT_EQ(slurp(dir / "a_metrics.csv"), slurp(dir / "b_metrics.csv"));

  const Result big = dirac({"rollout", "--weights", weights.string(), "--in", lifted.string(), "--horizon", "61",
                            "--out", (dir / "c.csv").string()});
  EXPECT_EQ(big.code, 1);
  EXPECT_NE(big.err.find("exceeds"), std::string::npos) << big.err;
}

TEST(Cli, VerifyCertifiesArchives) {
  const fs::path dir = scratch_dir();
  Result r = dirac({"verify"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_NE(r.out.find("checks passed"), std::string::npos);

  Rng rng = seeded_rng(3);
  WeightArchive a = to_archive(init_sympnet(2, 1, 4, 8, rng), "x");
  a.attributes.emplace_back("dt", "0.02");
  save_weights(a, dir / "good.weights");
  r = dirac({"verify", "--sympnet", "--weights", (dir / "good.weights").string()});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS sympnet.symplecticity"), std::string::npos) << r.out;

  // Store module0.K transposed.
  for (TensorRecord& t : a.tensors)
    if (t.name == "module0.K") {
      const std::vector<double> v = t.values;
      const std::size_t rows = t.shape[0], cols = t.shape[1];
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) t.values[j * rows + i] = v[i * cols + j];
      std::swap(t.shape[0], t.shape[1]);
    }
  save_weights(a, dir / "bad.weights");
  r = dirac({"verify", "--sympnet", "--weights", (dir / "bad.weights").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("FAIL sympnet.archive"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("module0.K"), std::string::npos) << r.out;
}

}  // namespace
}  // namespace dirac
