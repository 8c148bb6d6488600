#pragma once

#include "dirac/nets.hpp"
#include "dirac/systems.hpp"
#include "dirac/training.hpp"
#include "dirac/trajectory.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace dirac {

// ---------------------------------------------------------------------------
// Run configuration

/// Typed run configuration. The text form is an INI file with the sections
/// [run] [system] [control] [integrator] [dataset] [psn] [sympnet] [train]
/// [rollout]; every key is optional and unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  std::string system = "damped_oscillator";
  std::map<std::string, double> system_params;  // missing keys take defaults

  ControlSignal::Kind control_kind = ControlSignal::Kind::zero;
  std::vector<double> control_amplitude;  // one value broadcasts to every channel
  double control_frequency_hz = 0.0;
  double control_hold_s = 0.5;

  double dt = 0.01;
  std::size_t steps = 500;
  int substeps = 10;

  std::size_t trajectories = 10;
  double position_range = 1.0;
  double rate_range = 1.0;
  std::vector<double> initial_q;  // explicit initial state for every trajectory
  std::vector<double> initial_p;

  Index psn_hidden = 64;
  int psn_context = 10;
  Supervision psn_supervision = Supervision::p0_only;
  bool psn_through_midpoint = false;
  std::size_t psn_epochs = 200;
  std::size_t psn_windows_per_epoch = 0;

  int sympnet_modules = 6;
  Index sympnet_width = 32;
  bool sympnet_mask_multipliers = false;
  LossWeighting sympnet_loss_weighting = LossWeighting::physical;
  P0Source sympnet_p0_source = P0Source::analytic;
  std::size_t sympnet_epochs = 200;
  std::size_t sympnet_windows_per_epoch = 0;

  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 64;
  double val_fraction = 0.2;
  bool record_wall_time = false;

  std::size_t rollout_horizon = 100;
  std::size_t rollout_start = 0;

  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// Canonical text: every key in schema order, reals with 17 significant digits.
std::string to_ini(const RunConfig& cfg);
/// SHA-256 (hex) of the canonical text.
std::string config_fingerprint(const RunConfig& cfg);

std::unique_ptr<MechanicalSystem> make_system(const RunConfig& cfg);
ControlSignal make_control(const RunConfig& cfg, Index channels, std::uint64_t seed);
TrainConfig psn_train_config(const RunConfig& cfg);
TrainConfig sympnet_train_config(const RunConfig& cfg);
SympNetModelConfig sympnet_model_config(const RunConfig& cfg);

/// Trajectory i of a dataset: initial state and control seed drawn from
/// counter-based streams of (seed, i), so datasets are prefix-stable.
Trajectory generate_dataset_trajectory(const RunConfig& cfg, const MechanicalSystem& sys, std::size_t i);

// ---------------------------------------------------------------------------
// Hashing and number formatting

std::string sha256_hex(const std::string& bytes);
std::string format_double(double x);
double parse_double(const std::string& s, const std::string& context);

// ---------------------------------------------------------------------------
// Trajectory files: CSV plus a key=value sidecar (<path>.meta)

void save_trajectories(const std::vector<Trajectory>& trajs, const std::filesystem::path& path);
std::vector<Trajectory> load_trajectories(const std::filesystem::path& path);

void save_lifted(const std::vector<LiftedTrajectory>& trajs, const std::filesystem::path& path);
/// Validates finiteness, the uniform grid and the Dirac gauge against the
/// system recorded in the sidecar.
std::vector<LiftedTrajectory> load_lifted(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& path);

/// System described by a trajectory file's sidecar.
std::unique_ptr<MechanicalSystem> system_from_sidecar(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Weight archives

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;  // row-major

  bool operator==(const TensorRecord&) const = default;
};

struct WeightArchive {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t version = kVersion;
  std::string kind;  // "psn" or "sympnet"
  std::string fingerprint;
  std::vector<std::pair<std::string, std::string>> attributes;
  std::vector<TensorRecord> tensors;

  bool operator==(const WeightArchive&) const = default;
};

void save_weights(const WeightArchive& archive, const std::filesystem::path& path);
/// Throws DataError on bad magic, unknown version, truncation, or (when
/// expected_kind is given) a different model kind.
WeightArchive load_weights(const std::filesystem::path& path, const std::string& expected_kind = "");

WeightArchive to_archive(const PsnParams& params, const std::string& fingerprint);
WeightArchive to_archive(const SympNetParams& params, const std::string& fingerprint);
PsnParams psn_from_archive(const WeightArchive& archive);
SympNetParams sympnet_from_archive(const WeightArchive& archive);

// ---------------------------------------------------------------------------
// Metrics

void save_metrics(const std::vector<EpochMetrics>& history, const std::filesystem::path& path);

}  // namespace dirac
