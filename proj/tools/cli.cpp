#include "cli.hpp"

#include "dirac/dataio.hpp"
#include "dirac/geometry.hpp"
#include "dirac/integrators.hpp"
#include "dirac/training.hpp"
#include "dirac/verify.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

namespace dirac::cli {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  std::string in;
  std::string psn;
  std::string weights;
  std::optional<std::size_t> horizon;
  std::optional<std::size_t> start;
  bool oracle_lift = false;
  bool geometry = false, integrators = false, lift = false, gradients = false, sympnet = false;
};

// Numerical failures are reported on one machine-readable line.
struct Failure {
  std::string kind;
  std::optional<std::size_t> traj;
  std::optional<std::size_t> step;
  std::string detail;
};

std::string err_line(const Failure& f) {
  std::string s = "ERR " + f.kind;
  if (f.traj) s += " traj=" + std::to_string(*f.traj);
  if (f.step) s += " step=" + std::to_string(*f.step);
  return s + " " + f.detail;
}

class NumericalFailure : public std::runtime_error {
 public:
  explicit NumericalFailure(Failure f) : std::runtime_error(err_line(f)) {}
};

std::string kind_of(const NumericalError& e) {
  if (dynamic_cast<const SingularMatrix*>(&e)) return "singular_matrix";
  if (dynamic_cast<const NoConvergence*>(&e)) return "no_convergence";
  return "numerical";
}

[[noreturn]] void rethrow_tagged(const NumericalError& e, std::size_t traj) {
  throw NumericalFailure({kind_of(e), traj, e.step(), e.detail()});
}

std::string sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", x);
  return buf;
}

RunConfig config_or_default(const Options& o) {
  RunConfig cfg = o.config.empty() ? parse_config("") : load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  return cfg;
}

fs::path out_dir(const Options& o, const RunConfig& cfg) { return o.out.empty() ? fs::path(cfg.output_dir) : fs::path(o.out); }

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string("missing required option ") + flag);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string attribute_or(const WeightArchive& a, const std::string& key, const std::string& fallback) {
  for (const auto& [k, v] : a.attributes)
    if (k == key) return v;
  return fallback;
}

void warn_fingerprint(const WeightArchive& a, const RunConfig& cfg, const Options& o, std::ostream& err) {
  if (!o.config.empty() && a.fingerprint != config_fingerprint(cfg))
    err << "warning: " << a.kind << " archive was written under a different configuration\n";
}

std::vector<std::string> coordinate_names(Index n_q, Index m) {
  std::vector<std::string> names = {"q0"};
  for (Index i = 0; i < n_q; ++i) names.push_back("q_" + std::to_string(i));
  for (Index i = 0; i < m; ++i) names.push_back("lambda_" + std::to_string(i));
  names.push_back("p0");
  for (Index i = 0; i < n_q; ++i) names.push_back("p_" + std::to_string(i));
  for (Index i = 0; i < m; ++i) names.push_back("pi_" + std::to_string(i));
  return names;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw DataError("write to '" + path.string() + "' failed");
}

// --- subcommands ---------------------------------------------------------------------------

int cmd_generate(const Options& o, std::ostream& out) {
  require(o.config, "--config");
  const RunConfig cfg = config_or_default(o);
  const auto sys = make_system(cfg);
  std::vector<Trajectory> trajs;
  double worst_energy = 0.0, worst_phi = 0.0;
  for (std::size_t i = 0; i < cfg.trajectories; ++i) {
    Trajectory traj;
    LiftedTrajectory lifted;
    try {
      traj = generate_dataset_trajectory(cfg, *sys, i);
      lifted = dirac_lift(traj, *sys, {cfg.substeps});
    } catch (const NumericalError& e) {
      rethrow_tagged(e, i);
    }
    const double energy = work_energy_residual(lifted, *sys);
    const double phi = max_constraint_violation(*sys, traj);
    worst_energy = std::max(worst_energy, energy);
    worst_phi = std::max(worst_phi, phi);
    if (!o.quiet)
      out << "traj " << i << ": steps " << traj.steps() << ", max|phi| " << sci(phi) << ", work-energy residual "
          << sci(energy) << "\n";
    trajs.push_back(std::move(traj));
  }
  const fs::path path = out_dir(o, cfg) / "trajectories.csv";
  save_trajectories(trajs, path);
  if (!o.quiet)
    out << "wrote " << trajs.size() << " trajectories to " << path.string() << " (max work-energy residual "
        << sci(worst_energy) << ", max|phi| " << sci(worst_phi) << ")\n";
  return ok;
}

int cmd_lift(const Options& o, std::ostream& out) {
  require(o.in, "--in");
  const RunConfig cfg = config_or_default(o);
  const std::vector<Trajectory> trajs = load_trajectories(o.in);
  const auto sys = system_from_sidecar(o.in);
  std::vector<LiftedTrajectory> lifted;
  double gauge = 0.0, drift = 0.0, max_h = 0.0;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    for (const PhasePoint& x : trajs[i].states)
      if (x.q.size() != sys->n_q() || x.p.size() != sys->n_p() || x.u.size() != sys->n_u())
        throw DataError("trajectory " + std::to_string(i) + " does not match system " + sys->id());
    try {
      lifted.push_back(dirac_lift(trajs[i], *sys, {cfg.substeps}));
    } catch (const NumericalError& e) {
      rethrow_tagged(e, i);
    }
    for (const LiftedPoint& z : lifted.back().points) {
      const GaugeResidual g = gauge_residual(z, *sys);
      gauge = std::max({gauge, std::abs(g.r0), g.r_pi});
      max_h = std::max(max_h, std::abs(hamiltonian(*sys, z.q, z.p)));
    }
    drift = std::max(drift, extended_hamiltonian_drift(lifted.back(), *sys));
  }
  const fs::path path = o.out.empty() ? fs::path(cfg.output_dir) / "lifted.csv" : fs::path(o.out);
  save_lifted(lifted, path);
  if (!o.quiet)
    out << "lifted " << lifted.size() << " trajectories to " << path.string() << "\nmax gauge residual "
        << sci(gauge) << "\nmax |H~ drift| " << sci(drift) << " (max|H| " << sci(max_h) << ")\n";
  return ok;
}

void report_training(const std::vector<EpochMetrics>& history, std::size_t best, std::size_t skipped,
                     std::size_t failed, const std::string& what, std::ostream& out) {
  out << what << ": " << history.size() << " epochs, best val epoch " << best;
  if (best >= 1 && best <= history.size()) out << " (val loss " << sci(history[best - 1].val_loss) << ")";
  out << "\n";
  if (skipped) out << "skipped batches with non-finite gradients: " << skipped << "\n";
  if (failed) out << "samples dropped by the midpoint layer: " << failed << "\n";
}

int cmd_train_psn(const Options& o, std::ostream& out) {
  require(o.in, "--in");
  require(o.config, "--config");
  const RunConfig cfg = config_or_default(o);
  const std::vector<LiftedTrajectory> data = load_lifted(o.in);
  TrainConfig tc = psn_train_config(cfg);
  tc.verbose = !o.quiet;
  TrainResult<PsnParams> result;
  try {
    result = train_psn(data, tc, {cfg.psn_hidden});
  } catch (const NumericalError& e) {
    throw NumericalFailure({kind_of(e), std::nullopt, e.step(), e.detail()});
  }
  WeightArchive a = to_archive(result.params, config_fingerprint(cfg));
  a.attributes.emplace_back("context", std::to_string(cfg.psn_context));
  a.attributes.emplace_back("supervision", to_string(cfg.psn_supervision));
  a.attributes.emplace_back("dt", format_double(data.front().dt));
  const fs::path dir = out_dir(o, cfg);
  save_weights(a, dir / "psn.weights");
  save_metrics(result.history, dir / "psn_metrics.csv");
  if (!o.quiet) {
    report_training(result.history, result.best_epoch, result.skipped_batches, result.failed_samples, "psn", out);
    out << "wrote " << (dir / "psn.weights").string() << " and " << (dir / "psn_metrics.csv").string() << "\n";
  }
  return ok;
}

int cmd_train_sympnet(const Options& o, std::ostream& out, std::ostream& err) {
  require(o.in, "--in");
  require(o.psn, "--psn");
  require(o.config, "--config");
  const RunConfig cfg = config_or_default(o);
  const std::string psn_bytes = read_bytes(o.psn);
  const WeightArchive psn_archive = load_weights(o.psn, "psn");
  warn_fingerprint(psn_archive, cfg, o, err);
  const PsnParams psn = psn_from_archive(psn_archive);
  const std::vector<LiftedTrajectory> data = load_lifted(o.in);

  TrainConfig tc = sympnet_train_config(cfg);
  tc.verbose = !o.quiet;
  SympNetModelConfig mc = sympnet_model_config(cfg);
  TrainResult<SympNetParams> result;
  try {
    result = train_sympnet(data, mc.p0_source == P0Source::psn ? &psn : nullptr, tc, mc);
  } catch (const NumericalError& e) {
    throw NumericalFailure({kind_of(e), std::nullopt, e.step(), e.detail()});
  }
  if (read_bytes(o.psn) != psn_bytes) throw std::logic_error("PSN archive changed during SympNet training");

  WeightArchive a = to_archive(result.params, config_fingerprint(cfg));
  a.attributes.emplace_back("dt", format_double(data.front().dt));
  const fs::path dir = out_dir(o, cfg);
  save_weights(a, dir / "sympnet.weights");
  save_metrics(result.history, dir / "sympnet_metrics.csv");
  if (!o.quiet) {
    report_training(result.history, result.best_epoch, result.skipped_batches, 0, "sympnet", out);
    out << "wrote " << (dir / "sympnet.weights").string() << " and " << (dir / "sympnet_metrics.csv").string()
        << "\n";
  }
  return ok;
}

int cmd_rollout(const Options& o, std::ostream& out, std::ostream& err) {
  require(o.weights, "--weights");
  require(o.in, "--in");
  const RunConfig cfg = config_or_default(o);
  const std::size_t horizon = o.horizon.value_or(cfg.rollout_horizon);
  const std::size_t start = o.start.value_or(cfg.rollout_start);
  if (horizon == 0) throw ConfigError("--horizon must be positive");

  const WeightArchive archive = load_weights(o.weights, "sympnet");
  warn_fingerprint(archive, cfg, o, err);
  const SympNetParams params = sympnet_from_archive(archive);
  const std::vector<LiftedTrajectory> data = load_lifted(o.in);
  const auto sys = system_from_sidecar(o.in);
  if (data.empty()) throw DataError("'" + o.in + "' holds no trajectories");
  if (params.n_q != sys->n_q() || params.n_multipliers != sys->n_constraints())
    throw DataError("SympNet dimensions do not match system " + sys->id());
  const double dt = data.front().dt;
  const std::string trained_dt = attribute_or(archive, "dt", "");
  if (!trained_dt.empty() && parse_double(trained_dt, "archive dt") != dt)
    throw DataError("SympNet was trained at dt = " + trained_dt + ", data has dt = " + format_double(dt));

  std::optional<PsnParams> psn;
  int context = cfg.psn_context;
  if (!o.psn.empty() && !o.oracle_lift) {
    const WeightArchive pa = load_weights(o.psn, "psn");
    warn_fingerprint(pa, cfg, o, err);
    psn = psn_from_archive(pa);
    context = static_cast<int>(parse_double(attribute_or(pa, "context", std::to_string(context)), "archive context"));
  }

  const StepPredictor step = sympnet_predictor(params, dt);
  std::vector<Rollout> rollouts;
  std::vector<std::vector<double>> tracks;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (start + horizon >= data[i].size())
      throw ConfigError("horizon " + std::to_string(horizon) + " from step " + std::to_string(start) +
                        " exceeds trajectory " + std::to_string(i) + " (" + std::to_string(data[i].size()) +
                        " samples)");
    try {
      if (psn) tracks.push_back(psn_p0_track(*psn, data[i], context));
      rollouts.push_back(rollout(step, data[i], start, horizon, psn ? &tracks.back() : nullptr));
    } catch (const NumericalError& e) {
      rethrow_tagged(e, i);
    }
  }
  const RolloutMetrics m = evaluate_rollouts(*sys, rollouts, data, tracks);

  const std::vector<std::string> names = coordinate_names(sys->n_q(), sys->n_constraints());
  std::string csv = "traj_id,start,step,t";
  for (const std::string& n : names) csv += ",pred_" + n + ",true_" + n;
  csv += "\n";
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const Rollout& r = rollouts[i];
    for (std::size_t k = 0; k < r.predicted.size(); ++k) {
      const Vec pred = r.predicted[k].flatten(), truth = r.actual[k].flatten();
      csv += std::to_string(i) + "," + std::to_string(r.start) + "," + std::to_string(k) + "," +
             format_double(data[i].time(r.start + k));
      for (Index c = 0; c < pred.size(); ++c) csv += "," + format_double(pred(c)) + "," + format_double(truth(c));
      csv += "\n";
    }
  }
  const fs::path path = o.out.empty() ? fs::path(cfg.output_dir) / "rollout.csv" : fs::path(o.out);
  write_text(path, csv);

  std::vector<std::pair<std::string, double>> rows = {{"p0_rmse", m.p0_rmse}, {"p0_max_error", m.p0_max_error}};
  for (std::size_t c = 0; c < names.size(); ++c) {
    rows.emplace_back("rmse_" + names[c], m.coordinate_rmse(static_cast<Index>(c)));
    rows.emplace_back("range_" + names[c], m.coordinate_range(static_cast<Index>(c)));
  }
  rows.insert(rows.end(), {{"hamiltonian_drift", m.hamiltonian_drift},
                           {"constraint_drift", m.constraint_drift},
                           {"gauge_residual", m.gauge_residual},
                           {"rollouts", static_cast<double>(m.rollouts)},
                           {"horizon", static_cast<double>(horizon)}});
  std::string metrics = "metric,value\n";
  for (const auto& [k, v] : rows) metrics += k + "," + format_double(v) + "\n";
  const fs::path metrics_path = path.parent_path() / (path.stem().string() + "_metrics.csv");
  write_text(metrics_path, metrics);

  if (!o.quiet) {
    out << "rollouts " << m.rollouts << " x " << horizon << " steps from step " << start
        << (psn ? " (p0 from PSN track)" : " (p0 from data)") << "\n";
    for (const auto& [k, v] : rows) out << "  " << k << " " << sci(v) << "\n";
    out << "wrote " << path.string() << " and " << metrics_path.string() << "\n";
  }
  return ok;
}

int cmd_verify(const Options& o, std::ostream& out) {
  const bool all = !(o.geometry || o.integrators || o.lift || o.gradients || o.sympnet);
  std::vector<Check> checks;
  auto add = [&](std::vector<Check> c) { checks.insert(checks.end(), c.begin(), c.end()); };
  if (all || o.geometry) add(verify_geometry());
  if (all || o.integrators) add(verify_integrators());
  if (all || o.lift) add(verify_lift());
  if (all || o.gradients) add(verify_gradients());
  if (all || o.sympnet) {
    if (o.weights.empty()) {
      Rng rng = seeded_rng(o.seed.value_or(0));
      add(verify_sympnet(init_sympnet(2, 1, 6, 32, rng), 0.01, "fresh random SympNet"));
    } else {
      try {
        const WeightArchive a = load_weights(o.weights, "sympnet");
        const double dt = parse_double(attribute_or(a, "dt", "0.01"), "archive dt");
        add(verify_sympnet(sympnet_from_archive(a), dt, o.weights));
      } catch (const DataError& e) {
        checks.push_back({"sympnet.archive", 1.0, 0.0, false, e.what()});
      }
    }
  }

  std::size_t failed = 0;
  std::size_t width = 0;
  for (const Check& c : checks) width = std::max(width, c.name.size());
  for (const Check& c : checks) {
    failed += !c.pass;
    std::string name = c.name;
    name.resize(width, ' ');
    out << (c.pass ? "PASS " : "FAIL ") << name << "  measured " << sci(c.measured) << "  limit " << sci(c.threshold);
    if (!c.note.empty()) out << "  " << c.note;
    out << "\n";
  }
  out << checks.size() - failed << "/" << checks.size() << " checks passed\n";
  return failed == 0 ? ok : data;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dirac-lifted dynamics: data generation, lifting, training, rollout and verification", "dirac"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", o.config, "run configuration (INI)");
    if (config_required) c->required();
    sub->add_option("--out", o.out, "output path or directory");
    sub->add_option("--seed", o.seed, "overrides [run] seed");
    sub->add_flag("--quiet", o.quiet, "suppress progress output");
  };

  auto* gen = app.add_subcommand("generate", "simulate trajectories");
  common(gen, true);

  auto* lift = app.add_subcommand("lift", "lift trajectories to the extended phase space");
  common(lift, false);
  lift->add_option("--in", o.in, "trajectory CSV")->required();

  auto* tpsn = app.add_subcommand("train-psn", "train the p0 network");
  common(tpsn, true);
  tpsn->add_option("--in", o.in, "lifted CSV")->required();

  auto* tsym = app.add_subcommand("train-sympnet", "train the SympNet with a frozen p0 network");
  common(tsym, true);
  tsym->add_option("--in", o.in, "lifted CSV")->required();
  tsym->add_option("--psn", o.psn, "PSN weight archive (read only)")->required();

  auto* roll = app.add_subcommand("rollout", "multi-step prediction against lifted data");
  common(roll, false);
  roll->add_option("--weights", o.weights, "SympNet weight archive")->required();
  roll->add_option("--in", o.in, "lifted CSV")->required();
  roll->add_option("--psn", o.psn, "PSN weight archive for the p0 track");
  roll->add_option("--horizon", o.horizon, "steps per rollout");
  roll->add_option("--start", o.start, "first step of every rollout");
  roll->add_flag("--oracle-lift", o.oracle_lift, "take p0 from the data instead of the PSN");

  auto* ver = app.add_subcommand("verify", "run the property suites");
  ver->add_option("--weights", o.weights, "SympNet weight archive to certify");
  ver->add_option("--seed", o.seed, "seed of the fresh SympNet");
  ver->add_flag("--quiet", o.quiet, "accepted for symmetry; the table is always printed");
  ver->add_flag("--geometry", o.geometry, "canonical form identities");
  ver->add_flag("--integrators", o.integrators, "midpoint, Cayley and RK4 checks");
  ver->add_flag("--lift", o.lift, "pullback condition of the lift");
  ver->add_flag("--gradients", o.gradients, "gradients against finite differences");
  ver->add_flag("--sympnet", o.sympnet, "SympNet symplecticity (fresh net or --weights)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : usage;
  }

  try {
    if (gen->parsed()) return cmd_generate(o, out);
    if (lift->parsed()) return cmd_lift(o, out);
    if (tpsn->parsed()) return cmd_train_psn(o, out);
    if (tsym->parsed()) return cmd_train_sympnet(o, out, err);
    if (roll->parsed()) return cmd_rollout(o, out, err);
    if (ver->parsed()) return cmd_verify(o, out);
    return usage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n" << "run 'dirac --help' for usage\n";
    return usage;
  } catch (const NumericalFailure& e) {
    err << e.what() << "\n";
    return numerical;
  } catch (const NumericalError& e) {
    err << err_line({kind_of(e), std::nullopt, e.step(), e.detail()}) << "\n";
    return numerical;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return data;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return data;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return data;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return internal;
  }
}

}  // namespace dirac::cli
