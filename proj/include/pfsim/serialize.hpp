#pragma once

// On-disk forms of pipeline artifacts. Chains are CSV (one retained draw per
// row) with a JSON sidecar for the metadata; fits and CV reports are JSON.
// Doubles survive a write/read cycle bit-exactly.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "pfsim/csv.hpp"
#include "pfsim/errors.hpp"
#include "pfsim/gp.hpp"
#include "pfsim/mcmc.hpp"
#include "pfsim/tuning.hpp"

namespace pfsim::serialize {

using nlohmann::json;

// JSON has no inf/nan; non-finite numbers are written as null.
inline json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline double to_double(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline json vector_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(number(v(i)));
  return a;
}

inline Eigen::VectorXd vector_from(const json& a) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = to_double(a[i]);
  return v;
}

inline json matrix_json(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(vector_json(m.row(r).transpose()));
  return a;
}

inline Eigen::MatrixXd matrix_from(const json& a) {
  if (a.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(a[0].size()));
  for (std::size_t r = 0; r < a.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = vector_from(a[r]).transpose();
  return m;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---- chains ---------------------------------------------------------------

inline std::filesystem::path sidecar(const std::filesystem::path& csv_path) {
  auto p = csv_path;
  p.replace_extension(".json");
  return p;
}

inline void write_chain(const std::filesystem::path& path, const mcmc::PosteriorChain& c,
                        const std::vector<std::string>& names) {
  if (names.size() != static_cast<std::size_t>(c.dim())) throw std::invalid_argument("write_chain: one name per column");
  csv::write_matrix(path, names, c.draws);
  json meta;
  meta["thin"] = c.thin;
  meta["burned_rows"] = c.burned_rows;
  meta["burn_in_fraction"] = c.burn_in_fraction;
  meta["acceptance_rate"] = c.acceptance_rate;
  json z = json::array();
  for (double v : c.geweke_z) z.push_back(number(v));
  meta["geweke_z"] = z;
  meta["rows"] = c.rows();
  write_json(sidecar(path), meta);
}

inline mcmc::PosteriorChain read_chain(const std::filesystem::path& path, std::vector<std::string>* names = nullptr) {
  if (!std::filesystem::exists(path)) throw ConfigError("chain file not found: " + path.string());
  const csv::Table t = csv::read(path);
  mcmc::PosteriorChain c;
  c.draws = csv::to_matrix(t, path.string());
  if (names) *names = t.header;
  const auto meta_path = sidecar(path);
  if (std::filesystem::exists(meta_path)) {
    const json m = read_json(meta_path);
    c.thin = m.value("thin", std::size_t{1});
    c.burned_rows = m.value("burned_rows", std::size_t{0});
    c.burn_in_fraction = m.value("burn_in_fraction", 0.0);
    c.acceptance_rate = m.value("acceptance_rate", 0.0);
    if (m.contains("geweke_z"))
      for (const auto& v : m["geweke_z"]) c.geweke_z.push_back(to_double(v));
  }
  return c;
}

// ---- GP fits --------------------------------------------------------------

inline json fit_json(const gp::GpFit& f) {
  json j;
  j["theta"] = vector_json(f.theta);
  j["alpha_hat"] = number(f.alpha_hat);
  j["alpha_profile"] = number(f.alpha_profile);
  j["alpha_reml"] = number(f.alpha_reml);
  j["beta"] = vector_json(f.beta_mean);
  j["nugget"] = f.nugget;
  j["objective"] = number(f.objective);
  j["lambda"] = f.lambda;
  j["hessian"] = matrix_json(f.hessian);
  j["at_bound"] = f.at_bound;
  j["starts_converged"] = f.starts_converged;
  j["warnings"] = f.warnings;
  return j;
}

// The Cholesky factor is not stored; consumers rebuild it from theta.
inline gp::GpFit fit_from(const json& j) {
  gp::GpFit f;
  try {
    f.theta = vector_from(j.at("theta"));
    f.alpha_hat = to_double(j.at("alpha_hat"));
    f.alpha_profile = to_double(j.at("alpha_profile"));
    f.alpha_reml = to_double(j.at("alpha_reml"));
    f.beta_mean = vector_from(j.at("beta"));
    f.nugget = j.at("nugget").get<double>();
    f.objective = to_double(j.at("objective"));
    f.lambda = j.at("lambda").get<double>();
    f.hessian = matrix_from(j.at("hessian"));
    f.at_bound = j.at("at_bound").get<bool>();
    f.starts_converged = j.at("starts_converged").get<int>();
    f.warnings = j.at("warnings").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("GP fit record: ") + e.what());
  }
  return f;
}

// ---- CV reports -----------------------------------------------------------

inline json cv_json(const tuning::CvReport& r) {
  json j;
  json cands = json::array();
  for (const auto& c : r.candidates) cands.push_back(vector_json(c));
  j["candidates"] = cands;
  json scores = json::array();
  for (double s : r.scores) scores.push_back(number(s));
  j["scores"] = scores;
  j["winner"] = r.winner;
  j["failures"] = r.failures;
  return j;
}

inline tuning::CvReport cv_from(const json& j) {
  tuning::CvReport r;
  try {
    for (const auto& c : j.at("candidates")) r.candidates.push_back(vector_from(c));
    for (const auto& s : j.at("scores"))
      r.scores.push_back(s.is_null() ? std::numeric_limits<double>::infinity() : s.get<double>());
    r.winner = j.at("winner").get<std::size_t>();
    r.failures = j.at("failures").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("CV report: ") + e.what());
  }
  if (r.winner >= r.candidates.size()) throw ConfigError("CV report: winner index out of range");
  return r;
}

// Long-format fold table: candidate, fold, observed, predicted, loss.
inline void write_cv_folds(const std::filesystem::path& path, const tuning::CvReport& r, const Eigen::VectorXd& observed) {
  csv::Writer w(path, {"candidate", "fold", "observed", "predicted", "loss"});
  for (Eigen::Index q = 0; q < r.fold_losses.rows(); ++q)
    for (Eigen::Index i = 0; i < r.fold_losses.cols(); ++i)
      w.row(std::vector<std::string>{std::to_string(q), std::to_string(i), csv::format(observed(i)),
                                     csv::format(r.predictions(q, i)), csv::format(r.fold_losses(q, i))});
}

}  // namespace pfsim::serialize
