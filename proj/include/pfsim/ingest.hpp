#pragma once

// Study datasets and the synthetic fixtures that stand in for the finite
// element simulator.
//
// File schemas (UTF-8, header row mandatory, '.' decimal separator):
//   observations  variable,value           (long format; or one file per variable)
//   design        X0001,X0002,...,X00NN    (one column per variable, manifest order)
//   outputs       peak_accel_g             (raw simulator output)
//
// The JSON manifest ties them together:
//   {
//     "rescale_factor": 1000,
//     "observations": "observations.csv",
//     "design": "design.csv",
//     "outputs": "outputs.csv",
//     "variables": [ {"name": "X0001", "family": "Normal"},
//                    {"name": "X0002", "family": "Weibull", "file": "x0002.csv"}, ... ]
//   }
// A per-variable "file" overrides the shared observations file for that
// variable. Relative paths resolve against the manifest's directory.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "pfsim/csv.hpp"
#include "pfsim/dists.hpp"
#include "pfsim/errors.hpp"
#include "pfsim/failure.hpp"
#include "pfsim/parallel.hpp"
#include "pfsim/random.hpp"

namespace pfsim::ingest {

inline constexpr const char* kOutputColumn = "peak_accel_g";

inline std::string variable_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "X%04zu", k + 1);
  return buf;
}

struct StudyDataset {
  std::vector<dists::InputVariableSpec> variables;
  Eigen::MatrixXd design;        // n x K raw inputs
  Eigen::VectorXd outputs_raw;   // simulator units (Gs)
  Eigen::VectorXd outputs;       // outputs_raw / rescale_factor
  double rescale_factor = 1000.0;
  std::vector<std::string> warnings;
  std::vector<std::filesystem::path> source_files;  // manifest first, then data files as read

  void validate() const {
    if (design.rows() != outputs_raw.size())
      throw ConfigError("design has " + std::to_string(design.rows()) + " rows but outputs has " +
                        std::to_string(outputs_raw.size()));
    if (static_cast<std::size_t>(design.cols()) != variables.size())
      throw ConfigError("design has " + std::to_string(design.cols()) + " columns but " +
                        std::to_string(variables.size()) + " variables are declared");
    if (!(rescale_factor > 0.0)) throw ConfigError("rescale_factor must be positive");
  }
};

// Inputs with fewer than 3 or more than 12 observations are unusual enough to flag.
inline void check_observation_counts(StudyDataset& ds) {
  for (const auto& v : ds.variables) {
    const auto n = v.observations().size();
    if (n < 3 || n > 12)
      ds.warnings.push_back(v.name() + ": " + std::to_string(n) + " observations, outside the usual 3-12 range");
  }
}

namespace detail {

inline std::map<std::string, std::vector<double>> read_observations(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("observations file not found: " + path.string());
  const csv::Table t = csv::read(path);
  const auto vc = t.column("variable"), xc = t.column("value");
  if (vc < 0 || xc < 0) throw ConfigError(path.string() + ": expected columns 'variable,value'");
  std::map<std::string, std::vector<double>> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    out[row[static_cast<std::size_t>(vc)]].push_back(
        csv::parse_double(row[static_cast<std::size_t>(xc)], path.string() + " row " + std::to_string(r + 1)));
  }
  return out;
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

inline StudyDataset load_dataset(const std::filesystem::path& manifest_path) {
  const nlohmann::json m = detail::read_json(manifest_path);
  const auto base = manifest_path.parent_path();
  auto resolve = [&](const std::string& p) { return std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base / p; };

  StudyDataset ds;
  ds.source_files.push_back(manifest_path);
  try {
    ds.rescale_factor = m.value("rescale_factor", 1000.0);
    if (!m.contains("variables") || !m["variables"].is_array() || m["variables"].empty())
      throw ConfigError(manifest_path.string() + ": 'variables' must be a non-empty array");

    std::map<std::string, std::vector<double>> shared;
    if (m.contains("observations")) {
      const auto path = resolve(m["observations"].get<std::string>());
      shared = detail::read_observations(path);
      ds.source_files.push_back(path);
    }

    for (const auto& v : m["variables"]) {
      const auto name = v.at("name").get<std::string>();
      const auto family = dists::family_from_string(v.at("family").get<std::string>());
      std::vector<double> obs;
      if (v.contains("file")) {
        const auto path = resolve(v["file"].get<std::string>());
        if (!std::filesystem::exists(path)) throw ConfigError(name + ": observation file not found: " + path.string());
        auto per = detail::read_observations(path);
        ds.source_files.push_back(path);
        obs = per.count(name) ? per[name] : std::vector<double>{};
      } else if (shared.count(name)) {
        obs = shared[name];
      }
      if (obs.empty()) throw ConfigError(name + ": no observations found");
      try {
        ds.variables.emplace_back(name, family, std::move(obs));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }

    const auto design_path = resolve(m.at("design").get<std::string>());
    if (!std::filesystem::exists(design_path)) throw ConfigError("design file not found: " + design_path.string());
    const csv::Table dt = csv::read(design_path);
    ds.source_files.push_back(design_path);
    if (dt.header.size() != ds.variables.size())
      throw ConfigError(design_path.string() + ": " + std::to_string(dt.header.size()) + " columns for " +
                        std::to_string(ds.variables.size()) + " variables");
    for (std::size_t k = 0; k < dt.header.size(); ++k)
      if (dt.header[k] != ds.variables[k].name())
        throw ConfigError(design_path.string() + ": column " + std::to_string(k + 1) + " is '" + dt.header[k] +
                          "', expected '" + ds.variables[k].name() + "'");
    ds.design = csv::to_matrix(dt, design_path.string());

    const auto out_path = resolve(m.at("outputs").get<std::string>());
    if (!std::filesystem::exists(out_path)) throw ConfigError("outputs file not found: " + out_path.string());
    const csv::Table ot = csv::read(out_path);
    ds.source_files.push_back(out_path);
    if (ot.header.size() != 1 || ot.header[0] != kOutputColumn)
      throw ConfigError(out_path.string() + ": expected the single column '" + std::string(kOutputColumn) + "'");
    ds.outputs_raw = csv::to_matrix(ot, out_path.string()).col(0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(manifest_path.string() + ": " + e.what());
  }

  ds.validate();
  ds.outputs = ds.outputs_raw / ds.rescale_factor;
  check_observation_counts(ds);
  return ds;
}

inline void write_dataset(const std::filesystem::path& dir, const StudyDataset& ds) {
  ds.validate();
  std::filesystem::create_directories(dir);
  {
    csv::Writer w(dir / "observations.csv", {"variable", "value"});
    for (const auto& v : ds.variables)
      for (double x : v.observations()) w.row(std::vector<std::string>{v.name(), csv::format(x)});
  }
  std::vector<std::string> names;
  for (const auto& v : ds.variables) names.push_back(v.name());
  csv::write_matrix(dir / "design.csv", names, ds.design);
  csv::write_matrix(dir / "outputs.csv", {kOutputColumn}, Eigen::MatrixXd(ds.outputs_raw));

  nlohmann::json m;
  m["rescale_factor"] = ds.rescale_factor;
  m["observations"] = "observations.csv";
  m["design"] = "design.csv";
  m["outputs"] = "outputs.csv";
  m["variables"] = nlohmann::json::array();
  for (const auto& v : ds.variables) m["variables"].push_back({{"name", v.name()}, {"family", dists::to_string(v.family())}});
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic simulator
// ---------------------------------------------------------------------------

// Deterministic stand-in for the simulator, in raw output units (Gs):
//
//   y(s) = intercept + sum_k linear_k u_k + curvature (1 - cos u_1) + interaction u_1 u_2,
//
// where u_k = (s_k - E s_k) / sd(s_k) standardizes by the true marginal.
struct SimulatorConfig {
  std::vector<dists::InputParams> marginals;  // true input distributions
  std::vector<std::size_t> observations;      // observations per variable
  double intercept = 2600.0;
  std::vector<double> linear;
  double curvature = 0.0;
  double interaction = 0.0;
  double rescale_factor = 1000.0;
  double z_crit = 3.0;  // rescaled units

  std::size_t K() const { return marginals.size(); }

  void validate() const {
    if (marginals.empty()) throw ConfigError("simulator config: no variables");
    if (observations.size() != K() || linear.size() != K())
      throw ConfigError("simulator config: observations and linear must have one entry per variable");
    for (const auto& p : marginals)
      if (!p.valid()) throw ConfigError("simulator config: invalid marginal");
  }
};

inline double synth_simulator(const Eigen::VectorXd& s, const SimulatorConfig& cfg) {
  if (static_cast<std::size_t>(s.size()) != cfg.K()) throw std::invalid_argument("synth_simulator: wrong input dimension");
  double y = cfg.intercept;
  double u0 = 0.0, u1 = 0.0;
  for (std::size_t k = 0; k < cfg.K(); ++k) {
    const auto& p = cfg.marginals[k];
    const double u = (s(static_cast<Eigen::Index>(k)) - dists::distribution_mean(p)) / std::sqrt(dists::distribution_variance(p));
    y += cfg.linear[k] * u;
    if (k == 0) u0 = u;
    if (k == 1) u1 = u;
  }
  y += cfg.curvature * (1.0 - std::cos(u0)) + cfg.interaction * u0 * u1;
  return y;
}

// Mirrors the observed workflow: draw material observations from the true
// marginals, fit them by maximum likelihood, build an n-point LHS through the
// fitted marginals, and run the simulator at every design point.
inline StudyDataset synth_study(std::uint64_t seed, std::size_t n, std::size_t K, const SimulatorConfig& cfg) {
  cfg.validate();
  if (K != cfg.K()) throw ConfigError("synth_study: preset has " + std::to_string(cfg.K()) + " variables, asked for " + std::to_string(K));
  StudyDataset ds;
  ds.rescale_factor = cfg.rescale_factor;
  std::vector<dists::InputParams> fitted;
  for (std::size_t k = 0; k < K; ++k) {
    Rng rng = make_rng(seed, "synth-observations", {k});
    std::vector<double> obs(cfg.observations[k]);
    for (double& x : obs) x = dists::sample(cfg.marginals[k], rng);
    ds.variables.emplace_back(variable_name(k), cfg.marginals[k].family(), std::move(obs));
    fitted.push_back(dists::mle_fit(ds.variables.back()));
  }
  Rng rng = make_rng(seed, "synth-lhs");
  ds.design = failure::lhs_sample(n, fitted, rng).S;
  ds.outputs_raw.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < ds.design.rows(); ++i) ds.outputs_raw(i) = synth_simulator(ds.design.row(i).transpose(), cfg);
  ds.outputs = ds.outputs_raw / ds.rescale_factor;
  check_observation_counts(ds);
  return ds;
}

struct DirectEstimate {
  double p = 0.0;
  double se = 0.0;
  std::size_t draws = 0;
};

// Plain Monte Carlo of P(y(s) > z_crit * rescale) under the true marginals.
inline DirectEstimate direct_exceedance(const SimulatorConfig& cfg, std::size_t draws, std::uint64_t seed,
                                        unsigned jobs = 1) {
  cfg.validate();
  constexpr std::size_t kBlock = 1u << 20;
  const std::size_t blocks = (draws + kBlock - 1) / kBlock;
  const double threshold = cfg.z_crit * cfg.rescale_factor;
  std::vector<std::size_t> hits(blocks, 0);
  parallel_for(blocks, jobs, [&](std::size_t b) {
    Rng rng = make_rng(seed, "direct-mc", {b});
    const std::size_t len = std::min(kBlock, draws - b * kBlock);
    Eigen::VectorXd s(static_cast<Eigen::Index>(cfg.K()));
    for (std::size_t j = 0; j < len; ++j) {
      for (std::size_t k = 0; k < cfg.K(); ++k) s(static_cast<Eigen::Index>(k)) = dists::sample(cfg.marginals[k], rng);
      if (synth_simulator(s, cfg) > threshold) ++hits[b];
    }
  });
  DirectEstimate e;
  e.draws = draws;
  std::size_t total = 0;
  for (auto h : hits) total += h;
  e.p = static_cast<double>(total) / static_cast<double>(draws);
  e.se = std::sqrt(e.p * (1.0 - e.p) / static_cast<double>(draws));
  return e;
}

// Three inputs, small exceedance probability; p_true is verified by
// direct_exceedance.
inline SimulatorConfig small_p_preset() {
  SimulatorConfig c;
  c.marginals = {dists::InputParams::normal(100.0, 64.0), dists::InputParams::weibull(50.0, 8.0),
                 dists::InputParams::normal(20.0, 4.0)};
  c.observations = {8, 10, 6};
  c.intercept = 2573.0;
  c.linear = {90.0, -60.0, 40.0};
  c.curvature = 20.0;
  c.interaction = 10.0;
  return c;
}

// Fifteen inputs with the family and observation-count layout of the
// 15-variable material table; outputs fall near 2.5-2.75 after
// rescaling.
inline SimulatorConfig table_preset() {
  using dists::InputParams;
  SimulatorConfig c;
  const std::vector<bool> normal = {true, true, false, false, false, false, false, true,
                                    true, true, false, false, false, false, false};
  c.observations = {8, 4, 3, 4, 3, 4, 4, 4, 4, 4, 12, 4, 11, 4, 4};
  for (std::size_t k = 0; k < 15; ++k) {
    const double level = 50.0 + 10.0 * static_cast<double>(k);
    c.marginals.push_back(normal[k] ? InputParams::normal(level, 0.0025 * level * level)
                                    : InputParams::weibull(level, 12.0));
    const double sign = (k % 3 == 0) ? -1.0 : 1.0;
    c.linear.push_back(sign * (30.0 - 1.5 * static_cast<double>(k)));
  }
  c.intercept = 2610.0;
  c.curvature = 15.0;
  c.interaction = 8.0;
  return c;
}

inline SimulatorConfig preset(const std::string& name) {
  if (name == "small-p") return small_p_preset();
  if (name == "table") return table_preset();
  throw ConfigError("unknown synthetic preset '" + name + "'");
}

}  // namespace pfsim::ingest
