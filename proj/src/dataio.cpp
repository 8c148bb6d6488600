#include "dirac/dataio.hpp"

#include "dirac/geometry.hpp"
#include "dirac/integrators.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

namespace dirac {

namespace fs = std::filesystem;

// --- numbers and hashing ----------------------------------------------------------

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_double(const std::string& s, const std::string& context) {
  const char* begin = s.c_str();
  while (*begin == ' ' || *begin == '\t') ++begin;
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(begin, &end);
  while (end && (*end == ' ' || *end == '\t' || *end == '\r')) ++end;
  if (end == begin || *end != '\0' || (errno == ERANGE && std::isinf(v)))
    throw DataError(context + ": '" + s + "' is not a number");
  return v;
}

namespace {

std::uint64_t parse_u64(const std::string& s, const std::string& context) {
  std::string t = s;
  t.erase(std::remove_if(t.begin(), t.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r'; }), t.end());
  if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw DataError(context + ": '" + s + "' is not a non-negative integer");
  errno = 0;
  const unsigned long long v = std::strtoull(t.c_str(), nullptr, 10);
  if (errno == ERANGE) throw DataError(context + ": '" + s + "' is out of range");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

std::vector<double> parse_doubles(const std::string& s, const std::string& context) {
  std::vector<double> out;
  if (trim(s).empty()) return out;
  for (const std::string& part : split(s, ',')) out.push_back(parse_double(trim(part), context));
  return out;
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write to '" + path.string() + "' failed");
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

// --- run configuration ---------------------------------------------------------------

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string bool_text(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& s, const std::string& ctx) {
  const std::string t = trim(s);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError(ctx + ": '" + s + "' is not a boolean (true/false)");
}

template <typename M>
Field real(const char* section, const char* key, M member) {
  return {section, key, [member](const RunConfig& c) { return format_double(c.*member); },
          [member, section, key](RunConfig& c, const std::string& v) {
            c.*member = parse_double(trim(v), std::string(section) + "." + key);
          }};
}

template <typename M>
Field count(const char* section, const char* key, M member) {
  return {section, key, [member](const RunConfig& c) { return std::to_string(c.*member); },
          [member, section, key](RunConfig& c, const std::string& v) {
            using T = std::remove_reference_t<decltype(c.*member)>;
            const std::uint64_t x = parse_u64(v, std::string(section) + "." + key);
            if (x > static_cast<std::uint64_t>(std::numeric_limits<T>::max()))
              throw ConfigError(std::string(section) + "." + key + " is out of range");
            c.*member = static_cast<T>(x);
          }};
}

template <typename M>
Field flag(const char* section, const char* key, M member) {
  return {section, key, [member](const RunConfig& c) { return bool_text(c.*member); },
          [member, section, key](RunConfig& c, const std::string& v) {
            c.*member = parse_bool(v, std::string(section) + "." + key);
          }};
}

template <typename M, typename Parse, typename Show>
Field named(const char* section, const char* key, M member, Parse parse, Show show) {
  return {section, key, [member, show](const RunConfig& c) { return show(c.*member); },
          [member, parse](RunConfig& c, const std::string& v) { c.*member = parse(trim(v)); }};
}

template <typename M>
Field reals(const char* section, const char* key, M member) {
  return {section, key, [member](const RunConfig& c) { return join_doubles(c.*member); },
          [member, section, key](RunConfig& c, const std::string& v) {
            c.*member = parse_doubles(v, std::string(section) + "." + key);
          }};
}

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = {
      count("run", "seed", &RunConfig::seed),
      named("run", "output_dir", &RunConfig::output_dir, [](const std::string& s) { return s; },
            [](const std::string& s) { return s; }),
      named("control", "kind", &RunConfig::control_kind, parse_control_kind,
            [](ControlSignal::Kind k) { return to_string(k); }),
      reals("control", "amplitude", &RunConfig::control_amplitude),
      real("control", "frequency_hz", &RunConfig::control_frequency_hz),
      real("control", "hold_s", &RunConfig::control_hold_s),
      real("integrator", "dt", &RunConfig::dt),
      count("integrator", "steps", &RunConfig::steps),
      count("integrator", "substeps", &RunConfig::substeps),
      count("dataset", "trajectories", &RunConfig::trajectories),
      real("dataset", "position_range", &RunConfig::position_range),
      real("dataset", "rate_range", &RunConfig::rate_range),
      reals("dataset", "initial_q", &RunConfig::initial_q),
      reals("dataset", "initial_p", &RunConfig::initial_p),
      count("psn", "hidden", &RunConfig::psn_hidden),
      count("psn", "context", &RunConfig::psn_context),
      named("psn", "supervision", &RunConfig::psn_supervision, parse_supervision,
            [](Supervision s) { return to_string(s); }),
      flag("psn", "through_midpoint", &RunConfig::psn_through_midpoint),
      count("psn", "epochs", &RunConfig::psn_epochs),
      count("psn", "windows_per_epoch", &RunConfig::psn_windows_per_epoch),
      count("sympnet", "modules", &RunConfig::sympnet_modules),
      count("sympnet", "width", &RunConfig::sympnet_width),
      flag("sympnet", "mask_multipliers", &RunConfig::sympnet_mask_multipliers),
      named("sympnet", "loss_weighting", &RunConfig::sympnet_loss_weighting, parse_loss_weighting,
            [](LossWeighting w) { return to_string(w); }),
      named("sympnet", "p0_source", &RunConfig::sympnet_p0_source, parse_p0_source,
            [](P0Source s) { return to_string(s); }),
      count("sympnet", "epochs", &RunConfig::sympnet_epochs),
      count("sympnet", "windows_per_epoch", &RunConfig::sympnet_windows_per_epoch),
      real("train", "learning_rate", &RunConfig::learning_rate),
      real("train", "beta1", &RunConfig::beta1),
      real("train", "beta2", &RunConfig::beta2),
      real("train", "eps", &RunConfig::eps),
      count("train", "batch_size", &RunConfig::batch_size),
      real("train", "val_fraction", &RunConfig::val_fraction),
      flag("train", "record_wall_time", &RunConfig::record_wall_time),
      count("rollout", "horizon", &RunConfig::rollout_horizon),
      count("rollout", "start", &RunConfig::rollout_start),
  };
  return fields;
}

const std::vector<std::string>& section_order() {
  static const std::vector<std::string> order = {"run",     "system",  "control", "integrator", "dataset",
                                                 "psn",     "sympnet", "train",   "rollout"};
  return order;
}

std::map<std::string, double> complete_system_params(const RunConfig& cfg) {
  const auto defaults = system_parameter_defaults(cfg.system);
  std::map<std::string, double> out(defaults.begin(), defaults.end());
  for (const auto& [k, v] : cfg.system_params) {
    if (!out.contains(k)) throw ConfigError("system." + k + ": unknown parameter for system " + cfg.system);
    out[k] = v;
  }
  return out;
}

void check_config(const RunConfig& c) {
  auto positive = [](double x, const char* name) {
    if (!(x > 0.0) || !std::isfinite(x)) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(c.dt, "integrator.dt");
  positive(c.control_hold_s, "control.hold_s");
  positive(c.learning_rate, "train.learning_rate");
  positive(c.eps, "train.eps");
  if (c.substeps < 1) throw ConfigError("integrator.substeps must be at least 1");
  if (c.psn_context < 2) throw ConfigError("psn.context must be at least 2");
  if (c.psn_hidden < 1 || c.sympnet_width < 1 || c.sympnet_modules < 1)
    throw ConfigError("network sizes must be positive");
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0))
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0)) throw ConfigError("train.val_fraction must lie in [0, 1)");
  if (c.initial_q.size() != c.initial_p.size())
    throw ConfigError("dataset.initial_q and dataset.initial_p must both be given (or both empty)");
  if (c.position_range < 0.0 || c.rate_range < 0.0) throw ConfigError("dataset ranges must be non-negative");
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config syntax error at line " + std::to_string(e.line()) + ": " + e.message());
  }

  RunConfig cfg;
  std::map<std::string, std::string> system_keys;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("key '" + section + "' outside of any section");
    if (std::find(section_order().begin(), section_order().end(), section) == section_order().end())
      throw ConfigError("unknown section [" + section + "]");
    for (const auto& [key, node] : body) {
      const std::string value = node.get_value<std::string>();
      if (section == "system") {
        if (key == "id")
          cfg.system = trim(value);
        else
          system_keys[key] = value;
        continue;
      }
      const auto& fields = schema();
      auto it = std::find_if(fields.begin(), fields.end(),
                             [&](const Field& f) { return f.section == section && f.key == key; });
      if (it == fields.end()) throw ConfigError("unknown key '" + key + "' in section [" + section + "]");
      try {
        it->set(cfg, value);
      } catch (const DataError& e) {
        throw ConfigError(e.what());
      }
    }
  }
  for (const auto& [key, value] : system_keys) {
    try {
      cfg.system_params[key] = parse_double(trim(value), "system." + key);
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }
  cfg.system_params = complete_system_params(cfg);
  check_config(cfg);
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string to_ini(const RunConfig& cfg) {
  std::ostringstream os;
  bool first = true;
  for (const std::string& section : section_order()) {
    os << (first ? "" : "\n") << "[" << section << "]\n";
    first = false;
    if (section == "system") {
      os << "id = " << cfg.system << "\n";
      for (const auto& [k, v] : complete_system_params(cfg)) os << k << " = " << format_double(v) << "\n";
      continue;
    }
    for (const Field& f : schema())
      if (f.section == section) os << f.key << " = " << f.get(cfg) << "\n";
  }
  return os.str();
}

std::string config_fingerprint(const RunConfig& cfg) { return sha256_hex(to_ini(cfg)); }

std::unique_ptr<MechanicalSystem> make_system(const RunConfig& cfg) {
  return make_system(cfg.system, cfg.system_params);
}

ControlSignal make_control(const RunConfig& cfg, Index channels, std::uint64_t seed) {
  ControlSignal c;
  c.kind = cfg.control_kind;
  c.frequency_hz = cfg.control_frequency_hz;
  c.hold_s = cfg.control_hold_s;
  c.seed = seed;
  if (cfg.control_amplitude.size() == 1)
    c.amplitude = Vec::Constant(channels, cfg.control_amplitude[0]);
  else if (static_cast<Index>(cfg.control_amplitude.size()) == channels)
    c.amplitude = Eigen::Map<const Vec>(cfg.control_amplitude.data(), channels);
  else if (cfg.control_amplitude.empty())
    c.amplitude = Vec::Zero(channels);
  else
    throw ConfigError("control.amplitude has " + std::to_string(cfg.control_amplitude.size()) +
                      " values, system has " + std::to_string(channels) + " inputs");
  return c;
}

TrainConfig psn_train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.adam = {cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps};
  t.batch_size = cfg.batch_size;
  t.epochs = cfg.psn_epochs;
  t.context = cfg.psn_context;
  t.seed = cfg.seed;
  t.supervision = cfg.psn_supervision;
  t.windows_per_epoch = cfg.psn_windows_per_epoch;
  t.through_midpoint = cfg.psn_through_midpoint;
  t.val_fraction = cfg.val_fraction;
  t.record_wall_time = cfg.record_wall_time;
  return t;
}

TrainConfig sympnet_train_config(const RunConfig& cfg) {
  TrainConfig t = psn_train_config(cfg);
  t.epochs = cfg.sympnet_epochs;
  t.windows_per_epoch = cfg.sympnet_windows_per_epoch;
  t.through_midpoint = false;
  return t;
}

SympNetModelConfig sympnet_model_config(const RunConfig& cfg) {
  SympNetModelConfig m;
  m.modules = cfg.sympnet_modules;
  m.width = cfg.sympnet_width;
  m.mask_multipliers = cfg.sympnet_mask_multipliers;
  m.loss_weighting = cfg.sympnet_loss_weighting;
  m.p0_source = cfg.sympnet_p0_source;
  return m;
}

Trajectory generate_dataset_trajectory(const RunConfig& cfg, const MechanicalSystem& sys, std::size_t i) {
  const std::uint64_t key = splitmix64(cfg.seed ^ splitmix64(0x7472616aULL + i));
  Rng rng = seeded_rng(key);
  PhasePoint x0;
  x0.t = 0.0;
  if (!cfg.initial_q.empty()) {
    if (static_cast<Index>(cfg.initial_q.size()) != sys.n_q() || static_cast<Index>(cfg.initial_p.size()) != sys.n_p())
      throw ConfigError("dataset.initial_q/initial_p do not match system " + sys.id());
    x0.q = Eigen::Map<const Vec>(cfg.initial_q.data(), sys.n_q());
    x0.p = Eigen::Map<const Vec>(cfg.initial_p.data(), sys.n_p());
  } else {
    std::tie(x0.q, x0.p) = sys.sample_state(rng, cfg.position_range, cfg.rate_range);
  }
  const std::uint64_t control_seed = splitmix64(key ^ 0x636f6e74ULL);
  Trajectory traj = generate_trajectory(sys, x0, make_control(cfg, sys.n_u(), control_seed), cfg.steps, cfg.dt,
                                        cfg.substeps);
  traj.meta.seed = control_seed;
  return traj;
}

// --- trajectory files ------------------------------------------------------------------

fs::path sidecar_path(const fs::path& path) { return fs::path(path.string() + ".meta"); }

namespace {

struct Dims {
  Index n_q = 0, n_p = 0, n_u = 0, m = 0;
};

std::vector<std::string> trajectory_columns(const Dims& d, bool lifted) {
  std::vector<std::string> cols = {"traj_id", "k", "t"};
  for (Index i = 0; i < d.n_q; ++i) cols.push_back("q_" + std::to_string(i));
  for (Index i = 0; i < d.n_p; ++i) cols.push_back("p_" + std::to_string(i));
  for (Index i = 0; i < d.n_u; ++i) cols.push_back("u_" + std::to_string(i));
  if (lifted) {
    for (Index i = 0; i < d.m; ++i) cols.push_back("lambda_" + std::to_string(i));
    for (Index i = 0; i < d.m; ++i) cols.push_back("pi_" + std::to_string(i));
    cols.insert(cols.end(), {"p0", "p_ctrl", "p_diss"});
  }
  return cols;
}

using Sidecar = std::vector<std::pair<std::string, std::string>>;

std::string render_sidecar(const Sidecar& s) {
  std::string out;
  for (const auto& [k, v] : s) out += k + "=" + v + "\n";
  return out;
}

std::map<std::string, std::string> read_sidecar(const fs::path& data_path) {
  const fs::path path = sidecar_path(data_path);
  if (!fs::exists(path)) throw DataError("missing metadata sidecar '" + path.string() + "'");
  std::map<std::string, std::string> out;
  std::istringstream is(read_file(path));
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError(path.string() + ":" + std::to_string(no) + ": expected key=value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

const std::string& sidecar_get(const std::map<std::string, std::string>& s, const std::string& key) {
  auto it = s.find(key);
  if (it == s.end()) throw DataError("metadata sidecar lacks '" + key + "'");
  return it->second;
}

Sidecar make_sidecar(const std::string& format, const TrajectoryMeta& meta, double dt, const Dims& d,
                     const std::vector<std::uint64_t>& seeds) {
  Sidecar s = {{"format", format}, {"system", meta.system}};
  for (const auto& [k, v] : meta.parameters) s.emplace_back("param." + k, format_double(v));
  s.emplace_back("dt", format_double(dt));
  s.emplace_back("n_q", std::to_string(d.n_q));
  s.emplace_back("n_p", std::to_string(d.n_p));
  s.emplace_back("n_u", std::to_string(d.n_u));
  s.emplace_back("m", std::to_string(d.m));
  s.emplace_back("count", std::to_string(seeds.size()));
  std::string joined;
  for (std::size_t i = 0; i < seeds.size(); ++i) joined += (i ? "," : "") + std::to_string(seeds[i]);
  s.emplace_back("seeds", joined);
  return s;
}

struct ParsedFile {
  std::map<std::string, std::string> meta;
  TrajectoryMeta traj_meta;
  Dims dims;
  double dt = 0.0;
  std::size_t count = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<std::vector<double>>> rows;  // per trajectory, per step
};

ParsedFile parse_trajectory_file(const fs::path& path, const std::string& format) {
  ParsedFile f;
  f.meta = read_sidecar(path);
  if (sidecar_get(f.meta, "format") != format)
    throw DataError("'" + path.string() + "' holds " + sidecar_get(f.meta, "format") + " data, expected " + format);
  f.traj_meta.system = sidecar_get(f.meta, "system");
  for (const auto& [k, v] : f.meta)
    if (k.rfind("param.", 0) == 0) f.traj_meta.parameters.emplace_back(k.substr(6), parse_double(v, "sidecar " + k));
  // Keep the system's own parameter order.
  try {
    std::vector<std::string> order;
    for (const auto& [k, v] : system_parameter_defaults(f.traj_meta.system)) order.push_back(k);
    auto rank = [&](const std::string& k) { return std::find(order.begin(), order.end(), k) - order.begin(); };
    std::stable_sort(f.traj_meta.parameters.begin(), f.traj_meta.parameters.end(),
                     [&](const auto& a, const auto& b) { return rank(a.first) < rank(b.first); });
  } catch (const ConfigError&) {
  }
  f.dt = parse_double(sidecar_get(f.meta, "dt"), "sidecar dt");
  f.dims.n_q = static_cast<Index>(parse_u64(sidecar_get(f.meta, "n_q"), "sidecar n_q"));
  f.dims.n_p = static_cast<Index>(parse_u64(sidecar_get(f.meta, "n_p"), "sidecar n_p"));
  f.dims.n_u = static_cast<Index>(parse_u64(sidecar_get(f.meta, "n_u"), "sidecar n_u"));
  f.dims.m = static_cast<Index>(parse_u64(sidecar_get(f.meta, "m"), "sidecar m"));
  f.count = parse_u64(sidecar_get(f.meta, "count"), "sidecar count");
  for (const std::string& s : split(sidecar_get(f.meta, "seeds"), ','))
    if (!trim(s).empty()) f.seeds.push_back(parse_u64(s, "sidecar seeds"));
  if (f.count > 0 && !(f.dt > 0.0)) throw DataError("sidecar dt must be positive");

  const std::vector<std::string> expected = trajectory_columns(f.dims, format == "lifted");
  std::istringstream is(read_file(path));
  std::string line;
  if (!std::getline(is, line)) throw DataError("'" + path.string() + "' is empty (no header row)");
  const std::vector<std::string> header = split(trim(line), ',');
  for (std::size_t i = 0; i < std::max(header.size(), expected.size()); ++i) {
    const std::string got = i < header.size() ? trim(header[i]) : "<missing>";
    const std::string want = i < expected.size() ? expected[i] : "<none>";
    if (got != want)
      throw DataError("header mismatch in '" + path.string() + "': column " + std::to_string(i) + " is '" + got +
                      "', expected '" + want + "'");
  }

  f.rows.assign(f.count, {});
  std::size_t no = 1;
  while (std::getline(is, line)) {
    ++no;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(no);
    const std::vector<std::string> cells = split(trim(line), ',');
    if (cells.size() != expected.size())
      throw DataError(where + ": expected " + std::to_string(expected.size()) + " fields, found " +
                      std::to_string(cells.size()));
    const std::uint64_t id = parse_u64(cells[0], where + " traj_id");
    const std::uint64_t k = parse_u64(cells[1], where + " k");
    if (id >= f.count) throw DataError(where + ": traj_id " + std::to_string(id) + " exceeds count " + std::to_string(f.count));
    if (k != f.rows[id].size()) throw DataError(where + ": step index " + std::to_string(k) + " is out of sequence");
    std::vector<double> values;
    values.reserve(cells.size() - 2);
    for (std::size_t c = 2; c < cells.size(); ++c) {
      const double v = parse_double(cells[c], where + " column " + expected[c]);
      if (!std::isfinite(v)) throw DataError(where + ": non-finite value in column " + expected[c]);
      values.push_back(v);
    }
    const double t = values[0];
    if (!f.rows[id].empty()) {
      const double t0 = f.rows[id].front()[0];
      const double want = t0 + static_cast<double>(k) * f.dt;
      if (std::abs(t - want) > 1e-9 * (1.0 + std::abs(want)))
        throw DataError(where + ": non-uniform time grid (t = " + format_double(t) + ", expected " +
                        format_double(want) + ")");
    }
    f.rows[id].push_back(std::move(values));
  }
  if (f.seeds.size() != f.count) f.seeds.resize(f.count, 0);
  return f;
}

void append_row(std::string& out, std::size_t id, std::size_t k, const std::vector<double>& values) {
  out += std::to_string(id);
  out += ',';
  out += std::to_string(k);
  for (double v : values) {
    out += ',';
    out += format_double(v);
  }
  out += '\n';
}

std::string header_line(const std::vector<std::string>& cols) {
  std::string out;
  for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
  return out + "\n";
}

template <typename T>
void check_common(const std::vector<T>& trajs) {
  for (const T& t : trajs)
    if (t.meta.system != trajs.front().meta.system || t.dt != trajs.front().dt)
      throw DataError("all trajectories in one file must share system and dt");
}

}  // namespace

void save_trajectories(const std::vector<Trajectory>& trajs, const fs::path& path) {
  check_common(trajs);
  Dims d;
  TrajectoryMeta meta;
  double dt = 0.0;
  if (!trajs.empty() && !trajs.front().states.empty()) {
    const PhasePoint& x = trajs.front().states.front();
    d = {x.q.size(), x.p.size(), x.u.size(), 0};
    meta = trajs.front().meta;
    dt = trajs.front().dt;
  }
  std::string out = header_line(trajectory_columns(d, false));
  std::vector<std::uint64_t> seeds;
  for (std::size_t id = 0; id < trajs.size(); ++id) {
    seeds.push_back(trajs[id].meta.seed);
    for (std::size_t k = 0; k < trajs[id].states.size(); ++k) {
      const PhasePoint& x = trajs[id].states[k];
      if (x.q.size() != d.n_q || x.p.size() != d.n_p || x.u.size() != d.n_u)
        throw DimensionError("save_trajectories: inconsistent state dimensions");
      std::vector<double> v = {x.t};
      v.insert(v.end(), x.q.data(), x.q.data() + x.q.size());
      v.insert(v.end(), x.p.data(), x.p.data() + x.p.size());
      v.insert(v.end(), x.u.data(), x.u.data() + x.u.size());
      append_row(out, id, k, v);
    }
  }
  write_file(path, out);
  write_file(sidecar_path(path), render_sidecar(make_sidecar("trajectory", meta, dt, d, seeds)));
}

std::vector<Trajectory> load_trajectories(const fs::path& path) {
  const ParsedFile f = parse_trajectory_file(path, "trajectory");
  std::vector<Trajectory> out(f.count);
  for (std::size_t id = 0; id < f.count; ++id) {
    Trajectory& t = out[id];
    t.dt = f.dt;
    t.meta = f.traj_meta;
    t.meta.seed = f.seeds[id];
    for (const std::vector<double>& r : f.rows[id]) {
      PhasePoint x;
      x.t = r[0];
      x.q = Eigen::Map<const Vec>(r.data() + 1, f.dims.n_q);
      x.p = Eigen::Map<const Vec>(r.data() + 1 + f.dims.n_q, f.dims.n_p);
      x.u = Eigen::Map<const Vec>(r.data() + 1 + f.dims.n_q + f.dims.n_p, f.dims.n_u);
      t.states.push_back(std::move(x));
    }
  }
  return out;
}

void save_lifted(const std::vector<LiftedTrajectory>& trajs, const fs::path& path) {
  check_common(trajs);
  Dims d;
  TrajectoryMeta meta;
  double dt = 0.0;
  if (!trajs.empty() && !trajs.front().points.empty()) {
    const LiftedPoint& z = trajs.front().points.front();
    d = {z.q.size(), z.p.size(), trajs.front().controls.front().size(), z.lambda.size()};
    meta = trajs.front().meta;
    dt = trajs.front().dt;
  }
  std::string out = header_line(trajectory_columns(d, true));
  std::vector<std::uint64_t> seeds;
  for (std::size_t id = 0; id < trajs.size(); ++id) {
    const LiftedTrajectory& t = trajs[id];
    seeds.push_back(t.meta.seed);
    for (std::size_t k = 0; k < t.points.size(); ++k) {
      const LiftedPoint& z = t.points[k];
      const Vec& u = t.controls[k];
      if (z.q.size() != d.n_q || z.p.size() != d.n_p || u.size() != d.n_u || z.lambda.size() != d.m)
        throw DimensionError("save_lifted: inconsistent state dimensions");
      std::vector<double> v = {z.q0};
      for (const Vec* part : {&z.q, &z.p, &u, &z.lambda, &z.pi}) v.insert(v.end(), part->data(), part->data() + part->size());
      v.insert(v.end(), {z.p0, t.p_ctrl[k], t.p_diss[k]});
      append_row(out, id, k, v);
    }
  }
  write_file(path, out);
  write_file(sidecar_path(path), render_sidecar(make_sidecar("lifted", meta, dt, d, seeds)));
}

std::unique_ptr<MechanicalSystem> system_from_sidecar(const fs::path& path) {
  const auto meta = read_sidecar(path);
  std::map<std::string, double> params;
  for (const auto& [k, v] : meta)
    if (k.rfind("param.", 0) == 0) params[k.substr(6)] = parse_double(v, "sidecar " + k);
  try {
    return make_system(sidecar_get(meta, "system"), params);
  } catch (const ConfigError& e) {
    throw DataError(std::string("sidecar describes an invalid system: ") + e.what());
  }
}

std::vector<LiftedTrajectory> load_lifted(const fs::path& path) {
  const ParsedFile f = parse_trajectory_file(path, "lifted");
  const std::unique_ptr<MechanicalSystem> sys = system_from_sidecar(path);
  if (sys->n_q() != f.dims.n_q || sys->n_p() != f.dims.n_p || sys->n_u() != f.dims.n_u ||
      sys->n_constraints() != f.dims.m)
    throw DataError("'" + path.string() + "': dimensions do not match system " + sys->id());
  const Dims& d = f.dims;
  std::vector<LiftedTrajectory> out(f.count);
  for (std::size_t id = 0; id < f.count; ++id) {
    LiftedTrajectory& t = out[id];
    t.dt = f.dt;
    t.meta = f.traj_meta;
    t.meta.seed = f.seeds[id];
    for (std::size_t k = 0; k < f.rows[id].size(); ++k) {
      const std::vector<double>& r = f.rows[id][k];
      const double* x = r.data();
      LiftedPoint z;
      z.q0 = *x++;
      z.q = Eigen::Map<const Vec>(x, d.n_q);
      x += d.n_q;
      z.p = Eigen::Map<const Vec>(x, d.n_p);
      x += d.n_p;
      Vec u = Eigen::Map<const Vec>(x, d.n_u);
      x += d.n_u;
      z.lambda = Eigen::Map<const Vec>(x, d.m);
      x += d.m;
      z.pi = Eigen::Map<const Vec>(x, d.m);
      x += d.m;
      z.p0 = x[0];
      if (!satisfies_gauge(z, *sys))
        throw DataError("'" + path.string() + "': trajectory " + std::to_string(id) + " step " + std::to_string(k) +
                        " violates the Dirac gauge (r0 = " + format_double(gauge_residual(z, *sys).r0) + ")");
      t.points.push_back(std::move(z));
      t.controls.push_back(std::move(u));
      t.p_ctrl.push_back(x[1]);
      t.p_diss.push_back(x[2]);
    }
  }
  return out;
}

// --- weight archives ----------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'I', 'R', 'A', 'C', 'W', 'T', 'S'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    le(bits);
  }
  void str(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& data() const { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) throw DataError(std::string("corrupt archive: truncated while reading ") + what);
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  double f64(const char* what) {
    const std::uint64_t bits = le<std::uint64_t>(what);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string str(const char* what) {
    const std::uint32_t n = le<std::uint32_t>(what);
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

TensorRecord record(const std::string& name, const Mat& m) {
  TensorRecord r{name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
  r.values.reserve(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) r.values.push_back(m(i, j));
  return r;
}

Mat to_matrix(const TensorRecord& r) {
  if (r.shape.size() != 2) throw DataError("tensor " + r.name + " has rank " + std::to_string(r.shape.size()) + ", expected 2");
  const Index rows = static_cast<Index>(r.shape[0]), cols = static_cast<Index>(r.shape[1]);
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = r.values[static_cast<std::size_t>(i * cols + j)];
  return m;
}

class TensorTable {
 public:
  explicit TensorTable(const WeightArchive& a) {
    for (const TensorRecord& r : a.tensors)
      if (!by_name_.emplace(r.name, &r).second) throw DataError("archive holds tensor " + r.name + " twice");
  }
  Mat take(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw DataError("archive lacks tensor " + name);
    used_.insert(name);
    return to_matrix(*it->second);
  }
  void finish() const {
    if (used_.size() != by_name_.size())
      for (const auto& [name, r] : by_name_)
        if (!used_.contains(name)) throw DataError("record count mismatch: unexpected tensor " + name);
  }

 private:
  std::map<std::string, const TensorRecord*> by_name_;
  std::set<std::string> used_;
};

std::string attribute(const WeightArchive& a, const std::string& key) {
  for (const auto& [k, v] : a.attributes)
    if (k == key) return v;
  throw DataError("archive lacks attribute " + key);
}

Vec column(const Mat& m, const std::string& name) {
  if (m.cols() != 1) throw DataError("tensor " + name + " must be a column");
  return m.col(0);
}

}  // namespace

void save_weights(const WeightArchive& a, const fs::path& path) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.le(a.version);
  w.str(a.kind);
  w.str(a.fingerprint);
  w.le(static_cast<std::uint32_t>(a.attributes.size()));
  for (const auto& [k, v] : a.attributes) {
    w.str(k);
    w.str(v);
  }
  w.le(static_cast<std::uint32_t>(a.tensors.size()));
  for (const TensorRecord& t : a.tensors) {
    std::uint64_t n = 1;
    for (std::uint64_t d : t.shape) n *= d;
    if (n != t.values.size()) throw DimensionError("tensor " + t.name + ": value count does not match its shape");
    w.str(t.name);
    w.le(static_cast<std::uint32_t>(t.shape.size()));
    for (std::uint64_t d : t.shape) w.le(d);
    for (double v : t.values) w.f64(v);
  }
  write_file(path, w.data());
}

WeightArchive load_weights(const fs::path& path, const std::string& expected_kind) {
  Reader r(read_file(path));
  if (r.raw(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic))
    throw DataError("'" + path.string() + "' is not a weight archive (bad magic)");
  WeightArchive a;
  a.version = r.le<std::uint32_t>("version");
  if (a.version != WeightArchive::kVersion)
    throw DataError("unknown weight archive version " + std::to_string(a.version));
  a.kind = r.str("model kind");
  if (!expected_kind.empty() && a.kind != expected_kind)
    throw DataError("'" + path.string() + "' holds a " + a.kind + " model, expected kind " + expected_kind);
  a.fingerprint = r.str("fingerprint");
  const std::uint32_t n_attr = r.le<std::uint32_t>("attribute count");
  for (std::uint32_t i = 0; i < n_attr; ++i) {
    std::string k = r.str("attribute key");
    a.attributes.emplace_back(std::move(k), r.str("attribute value"));
  }
  const std::uint32_t n_tensors = r.le<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    TensorRecord t;
    t.name = r.str("tensor name");
    const std::uint32_t rank = r.le<std::uint32_t>("tensor rank");
    if (rank > 8) throw DataError("corrupt archive: tensor " + t.name + " has rank " + std::to_string(rank));
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.le<std::uint64_t>("tensor shape"));
      n *= t.shape.back();
    }
    r.need(n * 8, "tensor values");
    t.values.reserve(n);
    for (std::uint64_t j = 0; j < n; ++j) t.values.push_back(r.f64("tensor values"));
    a.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw DataError("corrupt archive: trailing bytes after the last record");
  return a;
}

WeightArchive to_archive(const PsnParams& params, const std::string& fingerprint) {
  validate(params);
  WeightArchive a;
  a.kind = "psn";
  a.fingerprint = fingerprint;
  a.attributes = {{"input_dim", std::to_string(params.input_dim())},
                  {"hidden_dim", std::to_string(params.hidden_dim())},
                  {"output_dim", std::to_string(params.output_dim())}};
  visit(params.weights, [&](const std::string& name, const Mat& m) { a.tensors.push_back(record(name, m)); });
  a.tensors.push_back(record("norm.input_shift", params.input_shift));
  a.tensors.push_back(record("norm.input_scale", params.input_scale));
  a.tensors.push_back(record("norm.output_scale", params.output_scale));
  return a;
}

WeightArchive to_archive(const SympNetParams& params, const std::string& fingerprint) {
  validate(params);
  WeightArchive a;
  a.kind = "sympnet";
  a.fingerprint = fingerprint;
  a.attributes = {{"n_q", std::to_string(params.n_q)},
                  {"n_multipliers", std::to_string(params.n_multipliers)},
                  {"mask_multipliers", params.mask_multipliers ? "true" : "false"},
                  {"modules", std::to_string(params.weights.modules.size())}};
  visit(params.weights, [&](const std::string& name, const Mat& m) { a.tensors.push_back(record(name, m)); });
  a.tensors.push_back(record("norm.q_shift", params.q_shift));
  a.tensors.push_back(record("norm.q_scale", params.q_scale));
  a.tensors.push_back(record("norm.p_shift", params.p_shift));
  a.tensors.push_back(record("norm.p_scale", params.p_scale));
  return a;
}

PsnParams psn_from_archive(const WeightArchive& a) {
  if (a.kind != "psn") throw DataError("archive holds a " + a.kind + " model, expected kind psn");
  TensorTable table(a);
  PsnParams p;
  p.weights = map_tensors<Mat>(p.weights, [&](const std::string& name, const Mat&) { return table.take(name); });
  p.input_shift = column(table.take("norm.input_shift"), "norm.input_shift");
  p.input_scale = column(table.take("norm.input_scale"), "norm.input_scale");
  p.output_scale = column(table.take("norm.output_scale"), "norm.output_scale");
  table.finish();
  try {
    validate(p);
  } catch (const DimensionError& e) {
    throw DataError(std::string("shape mismatch: ") + e.what());
  }
  return p;
}

SympNetParams sympnet_from_archive(const WeightArchive& a) {
  if (a.kind != "sympnet") throw DataError("archive holds a " + a.kind + " model, expected kind sympnet");
  TensorTable table(a);
  SympNetParams p;
  p.n_q = static_cast<Index>(parse_u64(attribute(a, "n_q"), "attribute n_q"));
  p.n_multipliers = static_cast<Index>(parse_u64(attribute(a, "n_multipliers"), "attribute n_multipliers"));
  p.mask_multipliers = attribute(a, "mask_multipliers") == "true";
  const std::uint64_t modules = parse_u64(attribute(a, "modules"), "attribute modules");
  if (modules == 0 || modules > 100000) throw DataError("archive declares " + std::to_string(modules) + " modules");
  p.weights.modules.resize(modules);
  for (std::size_t i = 0; i < modules; ++i) p.weights.modules[i].kind = i % 2 == 0 ? ModuleKind::up : ModuleKind::low;
  p.weights = map_tensors<Mat>(p.weights, [&](const std::string& name, const Mat&) { return table.take(name); });
  p.q_shift = column(table.take("norm.q_shift"), "norm.q_shift");
  p.q_scale = column(table.take("norm.q_scale"), "norm.q_scale");
  p.p_shift = column(table.take("norm.p_shift"), "norm.p_shift");
  p.p_scale = column(table.take("norm.p_scale"), "norm.p_scale");
  table.finish();
  try {
    validate(p);
  } catch (const DimensionError& e) {
    throw DataError(std::string("shape mismatch: ") + e.what());
  }
  return p;
}

// --- metrics -------------------------------------------------------------------------------

void save_metrics(const std::vector<EpochMetrics>& history, const fs::path& path) {
  std::string out = "epoch,train_loss,val_loss,wall_time_s\n";
  for (const EpochMetrics& m : history) {
    out += std::to_string(m.epoch) + "," + format_double(m.train_loss) + "," + format_double(m.val_loss) + ",";
    if (m.wall_time_s) out += format_double(*m.wall_time_s);
    out += "\n";
  }
  write_file(path, out);
}

}  // namespace dirac
