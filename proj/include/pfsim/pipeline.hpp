#pragma once

// Pipeline orchestration behind the pfsim CLI.
//
// Stages and their artifacts (relative to output_dir):
//   fit-inputs    inputs/<prior>/<variable>.csv (+ .json), inputs/summary.csv
//   tune-lambda   tune_lambda/{report.json, scores.csv, folds.csv}
//   fit-gp        gp/{fit.json, loo.csv}                      needs tune-lambda unless gp.lambda is set
//   tune-prior    tune_prior/{report.json, scores.csv, folds.csv, draw_losses.csv,
//                             theta_chain.csv (+ .json), loo.csv}   needs fit-gp
//   simulate-pf   pf_<A|B>/{posterior.csv, summary.json}      needs fit-inputs and fit-gp (A) or tune-prior (B)
//   report        report/...                                  whatever upstream exists
//
// Every stage writes <stage>.manifest.json with SHA-256 hashes of its config
// slice, its input files and its outputs. A stage whose manifest still matches
// is skipped ("up to date"). No timestamps are written anywhere.
//
// Stage seeds: derive_seed(seed, <stage name>), with per-variable streams
// derive_seed(seed, "fit-inputs/<prior>", {k}) and the final theta chain on
// derive_seed(seed, "theta-chain"). Settings A and B share the simulate-pf seed.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <Eigen/Dense>

#include "json.hpp"
#include "pfsim/csv.hpp"
#include "pfsim/dists.hpp"
#include "pfsim/errors.hpp"
#include "pfsim/failure.hpp"
#include "pfsim/gp.hpp"
#include "pfsim/ingest.hpp"
#include "pfsim/kriging.hpp"
#include "pfsim/mcmc.hpp"
#include "pfsim/random.hpp"
#include "pfsim/serialize.hpp"
#include "pfsim/stats.hpp"
#include "pfsim/tuning.hpp"

namespace pfsim::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- hashing --------------------------------------------------------------

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return out.str();
}

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

// ---- configuration ----------------------------------------------------------

enum class Stage { FitInputs, TuneLambda, FitGp, TunePrior, SimulatePf, Report };
enum class Setting { A, B };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::FitInputs: return "fit-inputs";
    case Stage::TuneLambda: return "tune-lambda";
    case Stage::FitGp: return "fit-gp";
    case Stage::TunePrior: return "tune-prior";
    case Stage::SimulatePf: return "simulate-pf";
    case Stage::Report: return "report";
  }
  return "?";
}

inline const char* to_string(Setting s) { return s == Setting::A ? "A" : "B"; }

inline Setting setting_from_string(const std::string& s) {
  if (s == "A" || s == "a") return Setting::A;
  if (s == "B" || s == "b") return Setting::B;
  throw ConfigError("setting must be A or B, got '" + s + "'");
}

struct PipelineConfig {
  fs::path dataset;     // study manifest
  fs::path output_dir;
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
  Setting setting = Setting::B;

  // synth
  std::string synth_preset = "small-p";
  std::size_t synth_n = 25;

  // fit-inputs
  std::vector<std::string> input_priors{"jeffreys"};  // every listed prior is fitted
  std::string input_prior = "jeffreys";               // the one carried downstream
  dists::JeffreysForm jeffreys_form = dists::JeffreysForm::Joint;
  mcmc::AmSettings input_am{};
  double burn_in = 0.2;

  // GP
  int restarts = 8;
  gp::ScaleEstimate scale = gp::ScaleEstimate::Reml;
  double nugget = 1e-8;
  bool standardize = true;
  std::optional<double> lambda;  // fixed penalty; otherwise the tune-lambda winner
  std::vector<double> lambdas{0.0, 0.5, 1.0, 2.0, 4.0, 8.0};

  // tune-prior
  std::vector<gp::ThetaPrior> prior_candidates;  // empty: tau_hat + offsets at nu_sq_hat
  std::vector<double> tau_offsets{-0.5, -0.25, 0.0, 0.25, 0.5};
  mcmc::AmSettings cv_am{20000, 2000, 10, 20, 1e-4, 0.0};
  mcmc::AmSettings theta_am{};
  bool keep_cv_chains = false;

  // simulate-pf
  double z_crit = 3.0;
  std::size_t N = 2000;
  std::size_t M = 1000;

  gp::NuggetPolicy nugget_policy() const { return {nugget, std::max(nugget, 1e-4), 10.0}; }
  std::uint64_t master_seed() const {
    if (!seed) throw ConfigError("a seed is required (config \"seed\" or --seed)");
    return *seed;
  }
};

namespace detail {

inline mcmc::AmSettings am_from(const json& j, mcmc::AmSettings a) {
  static const std::vector<std::string> keys{"iterations", "non_adaptive", "adapt_interval", "thin", "epsilon", "scaling"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) throw ConfigError("unknown AM setting '" + it.key() + "'");
  a.iterations = j.value("iterations", a.iterations);
  a.non_adaptive = j.value("non_adaptive", a.non_adaptive);
  a.adapt_interval = j.value("adapt_interval", a.adapt_interval);
  a.thin = j.value("thin", a.thin);
  a.epsilon = j.value("epsilon", a.epsilon);
  a.scaling = j.value("scaling", a.scaling);
  try {
    a.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return a;
}

inline json am_json(const mcmc::AmSettings& a) {
  return {{"iterations", a.iterations}, {"non_adaptive", a.non_adaptive}, {"adapt_interval", a.adapt_interval},
          {"thin", a.thin},             {"epsilon", a.epsilon},           {"scaling", a.scaling}};
}

inline void check_keys(const json& j, const std::string& where, const std::vector<std::string>& keys) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

inline gp::ScaleEstimate scale_from(const std::string& s) {
  if (s == "reml") return gp::ScaleEstimate::Reml;
  if (s == "profile") return gp::ScaleEstimate::Profile;
  throw ConfigError("gp.scale must be 'reml' or 'profile'");
}

}  // namespace detail

// Relative paths in the config resolve against the config file's directory.
inline PipelineConfig parse_config(const json& j, const fs::path& base_dir) {
  PipelineConfig c;
  try {
    detail::check_keys(j, "config", {"dataset", "output_dir", "seed", "jobs", "setting", "synth", "inputs", "gp",
                                     "tune_lambda", "tune_prior", "simulate"});
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };
    c.dataset = resolve(j.at("dataset").get<std::string>());
    c.output_dir = resolve(j.value("output_dir", std::string("out")));
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    c.jobs = j.value("jobs", 1u);
    if (j.contains("setting")) c.setting = setting_from_string(j["setting"].get<std::string>());

    if (j.contains("synth")) {
      const auto& s = j["synth"];
      detail::check_keys(s, "synth", {"preset", "n"});
      c.synth_preset = s.value("preset", c.synth_preset);
      c.synth_n = s.value("n", c.synth_n);
    }
    if (j.contains("inputs")) {
      const auto& s = j["inputs"];
      detail::check_keys(s, "inputs", {"priors", "use", "jeffreys_form", "am", "burn_in"});
      if (s.contains("priors")) c.input_priors = s["priors"].get<std::vector<std::string>>();
      c.input_prior = s.value("use", c.input_prior);
      const auto form = s.value("jeffreys_form", std::string("joint"));
      if (form == "joint") c.jeffreys_form = dists::JeffreysForm::Joint;
      else if (form == "independence") c.jeffreys_form = dists::JeffreysForm::Independence;
      else throw ConfigError("inputs.jeffreys_form must be 'joint' or 'independence'");
      if (s.contains("am")) c.input_am = detail::am_from(s["am"], c.input_am);
      c.burn_in = s.value("burn_in", c.burn_in);
    }
    if (j.contains("gp")) {
      const auto& s = j["gp"];
      detail::check_keys(s, "gp", {"restarts", "scale", "nugget", "standardize", "lambda"});
      c.restarts = s.value("restarts", c.restarts);
      if (s.contains("scale")) c.scale = detail::scale_from(s["scale"].get<std::string>());
      c.nugget = s.value("nugget", c.nugget);
      c.standardize = s.value("standardize", c.standardize);
      if (s.contains("lambda") && !s["lambda"].is_null()) c.lambda = s["lambda"].get<double>();
    }
    if (j.contains("tune_lambda")) {
      const auto& s = j["tune_lambda"];
      detail::check_keys(s, "tune_lambda", {"lambdas"});
      if (s.contains("lambdas")) c.lambdas = s["lambdas"].get<std::vector<double>>();
    }
    if (j.contains("tune_prior")) {
      const auto& s = j["tune_prior"];
      detail::check_keys(s, "tune_prior", {"candidates", "tau_offsets", "cv_am", "am", "keep_cv_chains"});
      if (s.contains("candidates"))
        for (const auto& p : s["candidates"]) c.prior_candidates.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      if (s.contains("tau_offsets")) c.tau_offsets = s["tau_offsets"].get<std::vector<double>>();
      if (s.contains("cv_am")) c.cv_am = detail::am_from(s["cv_am"], c.cv_am);
      if (s.contains("am")) c.theta_am = detail::am_from(s["am"], c.theta_am);
      c.keep_cv_chains = s.value("keep_cv_chains", c.keep_cv_chains);
    }
    if (j.contains("simulate")) {
      const auto& s = j["simulate"];
      detail::check_keys(s, "simulate", {"z_crit", "N", "M"});
      c.z_crit = s.value("z_crit", c.z_crit);
      c.N = s.value("N", c.N);
      c.M = s.value("M", c.M);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  if (c.jobs == 0) throw ConfigError("jobs must be at least 1");
  if (c.input_priors.empty()) throw ConfigError("inputs.priors must list at least one prior");
  for (const auto& p : c.input_priors) dists::prior_kind_from_string(p);
  if (std::find(c.input_priors.begin(), c.input_priors.end(), c.input_prior) == c.input_priors.end())
    throw ConfigError("inputs.use ('" + c.input_prior + "') must be one of inputs.priors");
  if (!(c.burn_in >= 0.0 && c.burn_in < 1.0)) throw ConfigError("inputs.burn_in must lie in [0, 1)");
  if (c.restarts < 1) throw ConfigError("gp.restarts must be at least 1");
  if (!(c.nugget >= 0.0 && c.nugget <= 1e-4)) throw ConfigError("gp.nugget must lie in [0, 1e-4]");
  if (c.lambdas.empty()) throw ConfigError("tune_lambda.lambdas must be non-empty");
  for (double l : c.lambdas)
    if (!(l >= 0.0)) throw ConfigError("tune_lambda.lambdas must be non-negative");
  if (c.lambda && !(*c.lambda >= 0.0)) throw ConfigError("gp.lambda must be non-negative");
  for (const auto& p : c.prior_candidates)
    if (!(p.nu_sq > 0.0)) throw ConfigError("tune_prior.candidates: nu_sq must be positive");
  if (c.prior_candidates.empty() && c.tau_offsets.empty()) throw ConfigError("tune_prior: no candidates");
  if (c.N == 0 || c.M == 0) throw ConfigError("simulate.N and simulate.M must be positive");
  if (c.synth_n < 2) throw ConfigError("synth.n must be at least 2");
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

// ---- provenance -------------------------------------------------------------

struct StageOutcome {
  std::string stage;
  bool up_to_date = false;
  std::vector<std::string> messages;
};

class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, std::ostream& log) : cfg_(std::move(cfg)), log_(log) {}

  const PipelineConfig& config() const { return cfg_; }

  StageOutcome run(Stage s) {
    try {
      switch (s) {
        case Stage::FitInputs: return fit_inputs();
        case Stage::TuneLambda: return tune_lambda();
        case Stage::FitGp: return fit_gp();
        case Stage::TunePrior: return tune_prior();
        case Stage::SimulatePf: return simulate_pf();
        case Stage::Report: return report();
      }
    } catch (const DegenerateDataError& e) {
      throw DegenerateDataError(std::string("stage ") + to_string(s) + ": " + e.what());
    } catch (const NumericalError& e) {
      throw NumericalError(std::string("stage ") + to_string(s) + ": " + e.what());
    }
    return {};
  }

  // Every stage in order; simulate-pf for the configured setting.
  std::vector<StageOutcome> run_all() {
    std::vector<StageOutcome> out;
    for (Stage s : {Stage::FitInputs, Stage::TuneLambda, Stage::FitGp, Stage::TunePrior, Stage::SimulatePf, Stage::Report}) {
      if (s == Stage::TuneLambda && cfg_.lambda) continue;
      out.push_back(run(s));
    }
    return out;
  }

  // Writes the configured synthetic study to the dataset location.
  void synth() {
    const auto preset = ingest::preset(cfg_.synth_preset);
    const auto ds = ingest::synth_study(derive_seed(cfg_.master_seed(), "synth"), cfg_.synth_n, preset.K(), preset);
    const fs::path dir = cfg_.dataset.parent_path().empty() ? fs::path(".") : cfg_.dataset.parent_path();
    ingest::write_dataset(dir, ds);
    if (cfg_.dataset.filename() != "manifest.json") fs::rename(dir / "manifest.json", cfg_.dataset);
    log_ << "synth: wrote " << ds.design.rows() << " x " << ds.design.cols() << " study to " << dir.string() << '\n';
  }

  // Artifact paths.
  fs::path out(const fs::path& rel) const { return cfg_.output_dir / rel; }
  fs::path input_chain(const std::string& prior, const std::string& var) const {
    return out(fs::path("inputs") / prior / (var + ".csv"));
  }
  fs::path pf_dir(Setting s) const { return out(std::string("pf_") + to_string(s)); }

  const ingest::StudyDataset& dataset() {
    if (!dataset_) {
      dataset_ = ingest::load_dataset(cfg_.dataset);
      for (const auto& w : dataset_->warnings) log_ << "warning: " << w << '\n';
    }
    return *dataset_;
  }

  gp::GpDesign design() { return gp::GpDesign::make(dataset().design, dataset().outputs, cfg_.standardize); }

 private:
  using Body = std::function<std::vector<fs::path>()>;

  std::string rel(const fs::path& p) const {
    const auto r = p.lexically_relative(cfg_.output_dir);
    if (!r.empty() && *r.begin() != "..") return r.generic_string();
    return fs::weakly_canonical(p).generic_string();
  }

  fs::path manifest_path(const std::string& stage) const { return out(stage + ".manifest.json"); }

  json hash_inputs(const std::vector<fs::path>& inputs) const {
    json h = json::object();
    for (const auto& p : inputs) h[rel(p)] = sha256_file(p);
    return h;
  }

  bool up_to_date(const std::string& stage, const std::string& config_hash, const std::vector<fs::path>& inputs) const {
    const auto mp = manifest_path(stage);
    if (!fs::exists(mp)) return false;
    json m;
    try {
      m = serialize::read_json(mp);
    } catch (const ConfigError&) {
      return false;
    }
    if (m.value("config_hash", std::string()) != config_hash) return false;
    if (m.value("inputs", json::object()) != hash_inputs(inputs)) return false;
    for (auto it = m["outputs"].begin(); it != m["outputs"].end(); ++it) {
      const auto p = cfg_.output_dir / it.key();
      if (!fs::exists(p) || sha256_file(p) != it.value().get<std::string>()) return false;
    }
    return true;
  }

  StageOutcome run_stage(const std::string& stage, const json& config_slice, const std::vector<fs::path>& inputs,
                         const Body& body) {
    for (const auto& p : inputs)
      if (!fs::exists(p)) throw ConfigError("stage " + stage + " is missing its input " + p.string());
    const std::string config_hash = sha256_hex(config_slice.dump());
    StageOutcome outcome{stage, false, {}};
    if (up_to_date(stage, config_hash, inputs)) {
      outcome.up_to_date = true;
      log_ << stage << ": up to date\n";
      return outcome;
    }
    fs::create_directories(cfg_.output_dir);
    const auto outputs = body();
    json m;
    m["stage"] = stage;
    m["config"] = config_slice;
    m["config_hash"] = config_hash;
    m["inputs"] = hash_inputs(inputs);
    json o = json::object();
    for (const auto& p : outputs) o[rel(p)] = sha256_file(p);
    m["outputs"] = o;
    serialize::write_json(manifest_path(stage), m);
    log_ << stage << ": wrote " << outputs.size() << " artifacts\n";
    return outcome;
  }

  std::vector<fs::path> dataset_files() {
    if (!fs::exists(cfg_.dataset)) throw ConfigError("dataset manifest not found: " + cfg_.dataset.string());
    return dataset().source_files;
  }

  json base_slice() const {
    return {{"seed", cfg_.master_seed()}, {"dataset", fs::weakly_canonical(cfg_.dataset).generic_string()}};
  }

  json gp_slice() const {
    json j = base_slice();
    j["restarts"] = cfg_.restarts;
    j["scale"] = cfg_.scale == gp::ScaleEstimate::Reml ? "reml" : "profile";
    j["nugget"] = cfg_.nugget;
    j["standardize"] = cfg_.standardize;
    return j;
  }

  gp::FitOptions fit_options(double lambda, std::uint64_t seed) const {
    gp::FitOptions fo;
    fo.lambda = lambda;
    fo.restarts = cfg_.restarts;
    fo.nugget = cfg_.nugget_policy();
    fo.scale = cfg_.scale;
    fo.seed = seed;
    fo.jobs = cfg_.jobs;
    return fo;
  }

  dists::PriorSpec prior_for(const std::string& name, const dists::InputVariableSpec& v) const {
    switch (dists::prior_kind_from_string(name)) {
      case dists::PriorKind::Flat: return dists::PriorSpec::flat();
      case dists::PriorKind::Jeffreys: return dists::PriorSpec::jeffreys(cfg_.jeffreys_form);
      case dists::PriorKind::Conjugate: return dists::default_conjugate(v);
    }
    return {};
  }

  // ---- stages -------------------------------------------------------------

  StageOutcome fit_inputs() {
    json slice = base_slice();
    slice["priors"] = cfg_.input_priors;
    slice["jeffreys_form"] = cfg_.jeffreys_form == dists::JeffreysForm::Joint ? "joint" : "independence";
    slice["am"] = detail::am_json(cfg_.input_am);
    slice["burn_in"] = cfg_.burn_in;
    const auto inputs = dataset_files();
    return run_stage("fit-inputs", slice, inputs, [&] {
      const auto& ds = dataset();
      const std::uint64_t seed = cfg_.master_seed();
      std::vector<fs::path> outputs;
      const fs::path summary_path = out("inputs/summary.csv");
      fs::create_directories(summary_path.parent_path());
      csv::Writer summary(summary_path, {"variable", "family", "prior", "parameter", "mle", "mean", "lower", "upper",
                                         "acceptance_rate", "geweke_z"});
      for (const auto& prior_name : cfg_.input_priors) {
        fs::create_directories(out(fs::path("inputs") / prior_name));
        const std::size_t V = ds.variables.size();
        std::vector<mcmc::PosteriorChain> chains(V);
        std::vector<dists::InputParams> mles;
        for (const auto& v : ds.variables) mles.push_back(dists::mle_fit(v));
        parallel_for(V, cfg_.jobs, [&](std::size_t k) {
          const auto& v = ds.variables[k];
          const auto prior = prior_for(prior_name, v);
          const auto target = dists::make_posterior_target(v, prior);
          dists::InputParams start = mles[k];
          if (target.fixed_shape) start = dists::InputParams::weibull(start.scale(), *target.fixed_shape);
          const Eigen::VectorXd init = target.from_params(start);
          if (!std::isfinite(target.log_target(init)))
            throw NumericalError(v.name() + ": log posterior is not finite at the MLE");
          Rng rng = make_rng(seed, "fit-inputs/" + prior_name, {k});
          const Eigen::MatrixXd cov = mcmc::default_initial_covariance(target.log_target, init);
          auto chain = mcmc::remove_burn_in(mcmc::am_sample(target.log_target, init, cov, cfg_.input_am, rng), cfg_.burn_in);
          try {
            chain.geweke_z = mcmc::geweke(chain);
          } catch (const std::exception&) {
            chain.geweke_z.assign(static_cast<std::size_t>(chain.dim()), std::numeric_limits<double>::quiet_NaN());
          }
          if (target.fixed_shape) {
            // Store (scale, shape) pairs so every chain has the same layout.
            Eigen::MatrixXd full(chain.draws.rows(), 2);
            full.col(0) = chain.draws.col(0);
            full.col(1).setConstant(*target.fixed_shape);
            chain.draws = full;
            chain.geweke_z.push_back(std::numeric_limits<double>::quiet_NaN());
          }
          chains[k] = std::move(chain);
        });
        for (std::size_t k = 0; k < V; ++k) {
          const auto& v = ds.variables[k];
          const auto names = mles[k].names();
          const std::vector<std::string> cols{names[0], names[1]};
          const auto path = input_chain(prior_name, v.name());
          serialize::write_chain(path, chains[k], cols);
          outputs.push_back(path);
          outputs.push_back(serialize::sidecar(path));
          for (int c = 0; c < 2; ++c) {
            const Eigen::VectorXd col = chains[k].draws.col(c);
            const std::span<const double> s(col.data(), static_cast<std::size_t>(col.size()));
            summary.row(std::vector<std::string>{
                v.name(), dists::to_string(v.family()), prior_name, cols[static_cast<std::size_t>(c)],
                csv::format(c == 0 ? mles[k].first() : mles[k].second()), csv::format(stats::mean(s)),
                csv::format(stats::quantile(s, 0.025)), csv::format(stats::quantile(s, 0.975)),
                csv::format(chains[k].acceptance_rate), csv::format(chains[k].geweke_z[static_cast<std::size_t>(c)])});
          }
        }
      }
      outputs.push_back(summary_path);
      return outputs;
    });
  }

  StageOutcome tune_lambda() {
    json slice = gp_slice();
    slice["lambdas"] = cfg_.lambdas;
    const auto inputs = dataset_files();
    return run_stage("tune-lambda", slice, inputs, [&] {
      const auto d = design();
      tuning::LambdaCvOptions opt;
      opt.fit = fit_options(0.0, 0);
      opt.fit.jobs = 1;
      opt.seed = derive_seed(cfg_.master_seed(), "tune-lambda");
      opt.jobs = cfg_.jobs;
      const auto r = tuning::cv_lambda(d, cfg_.lambdas, opt);
      for (const auto& f : r.failures) log_ << "tune-lambda: " << f << '\n';
      fs::create_directories(out("tune_lambda"));
      const auto report_path = out("tune_lambda/report.json");
      serialize::write_json(report_path, serialize::cv_json(r));
      const auto scores_path = out("tune_lambda/scores.csv");
      {
        csv::Writer w(scores_path, {"lambda", "score", "winner"});
        for (std::size_t q = 0; q < r.scores.size(); ++q)
          w.row(std::vector<std::string>{csv::format(cfg_.lambdas[q]),
                                         std::isfinite(r.scores[q]) ? csv::format(r.scores[q]) : "inf",
                                         q == r.winner ? "1" : "0"});
      }
      const auto folds_path = out("tune_lambda/folds.csv");
      serialize::write_cv_folds(folds_path, r, d.Z);
      return std::vector<fs::path>{report_path, scores_path, folds_path};
    });
  }

  StageOutcome fit_gp() {
    json slice = gp_slice();
    auto inputs = dataset_files();
    const auto cv_path = out("tune_lambda/report.json");
    if (cfg_.lambda) {
      slice["lambda"] = *cfg_.lambda;
    } else {
      if (!fs::exists(cv_path)) throw ConfigError("stage fit-gp needs " + cv_path.string() + " (run tune-lambda first or set gp.lambda)");
      inputs.push_back(cv_path);
    }
    return run_stage("fit-gp", slice, inputs, [&] {
      double lambda = 0.0;
      if (cfg_.lambda) {
        lambda = *cfg_.lambda;
      } else {
        const auto r = serialize::cv_from(serialize::read_json(cv_path));
        lambda = r.candidates[r.winner](0);
      }
      const auto d = design();
      const auto fit = gp::fit_reml(d, fit_options(lambda, derive_seed(cfg_.master_seed(), "fit-gp")));
      for (const auto& w : fit.warnings) log_ << "fit-gp: warning: " << w << '\n';
      json j = serialize::fit_json(fit);
      j["scaling"] = {{"center", serialize::vector_json(d.scaling.center)}, {"scale", serialize::vector_json(d.scaling.scale)}};
      try {
        const auto e = gp::hessian_nu_estimate(fit);
        j["prior_estimate"] = {{"tau", e.tau}, {"nu_sq", serialize::number(e.nu_sq)},
                               {"point_spread", e.point_spread}, {"pseudo_inverse", e.pseudo_inverse}};
      } catch (const NumericalError& e) {
        log_ << "fit-gp: warning: " << e.what() << '\n';
        j["prior_estimate"] = nullptr;
      }
      fs::create_directories(out("gp"));
      const auto fit_path = out("gp/fit.json");
      serialize::write_json(fit_path, j);
      const Eigen::VectorXd loo = kriging::loo_predictions(d, fit.theta, cfg_.scale, cfg_.nugget_policy());
      const auto loo_path = out("gp/loo.csv");
      {
        csv::Writer w(loo_path, {"fold", "observed", "predicted"});
        for (Eigen::Index i = 0; i < d.n(); ++i)
          w.row(std::vector<std::string>{std::to_string(i), csv::format(d.Z(i)), csv::format(loo(i))});
      }
      return std::vector<fs::path>{fit_path, loo_path};
    });
  }

  // Empirical-Bayes nu^2 with a fallback when the inverse Hessian has a
  // non-positive mean diagonal.
  static double usable_nu_sq(const json& fit, std::vector<std::string>& notes) {
    const auto& pe = fit.at("prior_estimate");
    if (pe.is_null()) {
      notes.emplace_back("no Hessian-based nu^2; using 1");
      return 1.0;
    }
    const double nu = serialize::to_double(pe.at("nu_sq"));
    if (nu > 0.0 && std::isfinite(nu)) return nu;
    const double spread = pe.at("point_spread").get<double>();
    notes.emplace_back("Hessian-based nu^2 not positive; using the spread of theta_hat");
    return spread > 0.0 ? spread : 1.0;
  }

  StageOutcome tune_prior() {
    const auto fit_path = out("gp/fit.json");
    if (!fs::exists(fit_path)) throw ConfigError("stage tune-prior needs " + fit_path.string() + " (run fit-gp first)");
    json slice = gp_slice();
    json cands = json::array();
    for (const auto& p : cfg_.prior_candidates) cands.push_back({p.tau, p.nu_sq});
    slice["candidates"] = cands;
    slice["tau_offsets"] = cfg_.tau_offsets;
    slice["cv_am"] = detail::am_json(cfg_.cv_am);
    slice["am"] = detail::am_json(cfg_.theta_am);
    slice["burn_in"] = cfg_.burn_in;
    slice["keep_cv_chains"] = cfg_.keep_cv_chains;
    auto inputs = dataset_files();
    inputs.push_back(fit_path);
    return run_stage("tune-prior", slice, inputs, [&] {
      const json fj = serialize::read_json(fit_path);
      const gp::GpFit fit = serialize::fit_from(fj);
      std::vector<std::string> notes;
      const double tau_hat = fit.theta.mean();
      const double nu_hat = usable_nu_sq(fj, notes);
      std::vector<gp::ThetaPrior> cands = cfg_.prior_candidates;
      if (cands.empty())
        for (double off : cfg_.tau_offsets) cands.push_back({tau_hat + off, nu_hat});

      const auto d = design();
      tuning::PriorCvOptions opt;
      opt.am = cfg_.cv_am;
      opt.burn_in = cfg_.burn_in;
      opt.nugget = cfg_.nugget_policy();
      opt.scale = cfg_.scale;
      opt.init_theta = fit.theta;
      opt.seed = derive_seed(cfg_.master_seed(), "tune-prior");
      opt.jobs = cfg_.jobs;
      opt.keep_chains = cfg_.keep_cv_chains;
      const auto res = tuning::cv_hyperparams(d, cands, opt);
      const auto& r = res.report;
      for (const auto& f : r.failures) log_ << "tune-prior: " << f << '\n';

      std::vector<fs::path> outputs;
      fs::create_directories(out("tune_prior"));
      json rj = serialize::cv_json(r);
      rj["tau_hat"] = tau_hat;
      rj["nu_sq_hat"] = nu_hat;
      rj["notes"] = notes;
      outputs.push_back(out("tune_prior/report.json"));
      serialize::write_json(outputs.back(), rj);
      outputs.push_back(out("tune_prior/scores.csv"));
      {
        csv::Writer w(outputs.back(), {"tau", "nu_sq", "score", "winner"});
        for (std::size_t q = 0; q < cands.size(); ++q)
          w.row(std::vector<std::string>{csv::format(cands[q].tau), csv::format(cands[q].nu_sq),
                                         std::isfinite(r.scores[q]) ? csv::format(r.scores[q]) : "inf",
                                         q == r.winner ? "1" : "0"});
      }
      outputs.push_back(out("tune_prior/folds.csv"));
      serialize::write_cv_folds(outputs.back(), r, d.Z);
      outputs.push_back(out("tune_prior/draw_losses.csv"));
      {
        csv::Writer w(outputs.back(), {"candidate", "draw", "loss"});
        for (std::size_t q = 0; q < r.draw_losses.size(); ++q)
          for (Eigen::Index j = 0; j < r.draw_losses[q].size(); ++j)
            w.row(std::vector<std::string>{std::to_string(q), std::to_string(j), csv::format(r.draw_losses[q](j))});
      }
      if (cfg_.keep_cv_chains) {
        fs::create_directories(out("tune_prior/chains"));
        std::vector<std::string> names;
        for (Eigen::Index k = 0; k < d.K(); ++k) names.push_back("theta" + std::to_string(k + 1));
        for (std::size_t q = 0; q < res.chains.size(); ++q)
          for (std::size_t i = 0; i < res.chains[q].size(); ++i) {
            outputs.push_back(out("tune_prior/chains/c" + std::to_string(q) + "_fold" + std::to_string(i) + ".csv"));
            serialize::write_chain(outputs.back(), res.chains[q][i], names);
          }
      }

      // Final theta chain on all n rows under the winning prior.
      Rng rng = make_rng(cfg_.master_seed(), "theta-chain");
      auto chain = tuning::sample_theta_posterior(d, cands[r.winner], fit.theta, cfg_.theta_am, cfg_.burn_in,
                                                  cfg_.nugget_policy(), rng);
      try {
        chain.geweke_z = mcmc::geweke(chain);
      } catch (const std::exception& e) {
        log_ << "tune-prior: warning: " << e.what() << '\n';
      }
      std::vector<std::string> names;
      for (Eigen::Index k = 0; k < d.K(); ++k) names.push_back("theta" + std::to_string(k + 1));
      outputs.push_back(out("tune_prior/theta_chain.csv"));
      serialize::write_chain(outputs.back(), chain, names);
      outputs.push_back(serialize::sidecar(outputs[outputs.size() - 1]));

      const Eigen::MatrixXd loo = kriging::loo_predictions(d, chain.draws, cfg_.scale, cfg_.nugget_policy(), cfg_.jobs);
      outputs.push_back(out("tune_prior/loo.csv"));
      {
        csv::Writer w(outputs.back(), {"fold", "observed", "predicted"});
        for (Eigen::Index i = 0; i < d.n(); ++i)
          w.row(std::vector<std::string>{std::to_string(i), csv::format(d.Z(i)), csv::format(loo.row(i).mean())});
      }
      return outputs;
    });
  }

  StageOutcome simulate_pf() {
    const Setting s = cfg_.setting;
    const auto fit_path = out("gp/fit.json");
    const auto chain_path = out("tune_prior/theta_chain.csv");
    auto inputs = dataset_files();
    for (const auto& v : dataset().variables) inputs.push_back(input_chain(cfg_.input_prior, v.name()));
    inputs.push_back(fit_path);
    if (s == Setting::B) inputs.push_back(chain_path);
    for (const auto& p : inputs)
      if (!fs::exists(p)) {
        const std::string producer = p == fit_path ? "fit-gp" : p == chain_path ? "tune-prior" : "fit-inputs";
        throw ConfigError("stage simulate-pf needs " + p.string() + " (run " + producer + " first)");
      }
    json slice = gp_slice();
    slice["setting"] = to_string(s);
    slice["prior"] = cfg_.input_prior;
    slice["z_crit"] = cfg_.z_crit;
    slice["N"] = cfg_.N;
    slice["M"] = cfg_.M;
    return run_stage(std::string("simulate-pf-") + to_string(s), slice, inputs, [&] {
      const auto& ds = dataset();
      std::vector<failure::InputPosterior> posts;
      for (const auto& v : ds.variables) {
        const auto c = serialize::read_chain(input_chain(cfg_.input_prior, v.name()));
        posts.push_back({v.family(), c.draws});
      }
      const auto d = design();
      failure::PfOptions opt;
      opt.z_crit = cfg_.z_crit;
      opt.N = cfg_.N;
      opt.M = cfg_.M;
      opt.scale = cfg_.scale;
      opt.nugget = cfg_.nugget_policy();
      opt.seed = derive_seed(cfg_.master_seed(), "simulate-pf");
      opt.jobs = cfg_.jobs;
      const Eigen::MatrixXd theta = s == Setting::A
                                        ? Eigen::MatrixXd(serialize::fit_from(serialize::read_json(fit_path)).theta.transpose())
                                        : serialize::read_chain(chain_path).draws;
      const auto post = failure::simulate_pf(posts, theta, d, opt);
      if (post.unhealthy_predictions > 0)
        log_ << "simulate-pf: warning: " << post.unhealthy_predictions << " predictions had a negative MSPE below -1e-8\n";
      const fs::path dir = pf_dir(s);
      fs::create_directories(dir);
      const auto post_path = dir / "posterior.csv";
      {
        csv::Writer w(post_path, {"draw", "p", "mc_se"});
        for (std::size_t i = 0; i < post.p.size(); ++i)
          w.row(std::vector<std::string>{std::to_string(i), csv::format(post.p[i]), csv::format(post.mc_se[i])});
      }
      const auto sum_path = dir / "summary.json";
      json sj = summary_json(failure::summarize(post));
      sj["setting"] = to_string(s);
      sj["theta_source"] = s == Setting::A ? "gp/fit.json" : "tune_prior/theta_chain.csv";
      sj["z_crit"] = post.z_crit;
      sj["N"] = post.N;
      sj["M"] = post.M;
      sj["unhealthy_predictions"] = post.unhealthy_predictions;
      serialize::write_json(sum_path, sj);
      return std::vector<fs::path>{post_path, sum_path};
    });
  }

 public:
  static json summary_json(const failure::PfSummary& s) {
    return {{"mean", s.mean},
            {"median", s.median},
            {"lower", s.lower},
            {"upper", s.upper},
            {"target", s.target},
            {"median_meets_target", s.median_meets_target},
            {"mean_meets_target", s.mean_meets_target},
            {"per_million", {{"mean", s.per_million(s.mean)}, {"median", s.per_million(s.median)},
                             {"lower", s.per_million(s.lower)}, {"upper", s.per_million(s.upper)}}}};
  }

  static failure::FailurePosterior read_pf_posterior(const fs::path& dir) {
    const auto t = csv::read(dir / "posterior.csv");
    const auto m = csv::to_matrix(t, (dir / "posterior.csv").string());
    failure::FailurePosterior p;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      p.p.push_back(m(i, 1));
      p.mc_se.push_back(m(i, 2));
    }
    p.N = p.p.size();
    return p;
  }

 private:
  StageOutcome report() {
    const std::vector<std::pair<std::string, fs::path>> candidates{
        {"inputs", out("inputs/summary.csv")},          {"lambda", out("tune_lambda/scores.csv")},
        {"gp", out("gp/fit.json")},                     {"loo_reml", out("gp/loo.csv")},
        {"prior", out("tune_prior/scores.csv")},        {"theta_chain", out("tune_prior/theta_chain.csv")},
        {"loo_bayes", out("tune_prior/loo.csv")},       {"pf_A", pf_dir(Setting::A) / "posterior.csv"},
        {"pf_B", pf_dir(Setting::B) / "posterior.csv"}};
    std::map<std::string, fs::path> have;
    std::vector<fs::path> inputs;
    for (const auto& [k, p] : candidates)
      if (fs::exists(p)) {
        have[k] = p;
        inputs.push_back(p);
      }
    if (have.empty()) throw ConfigError("stage report found no upstream artifacts in " + cfg_.output_dir.string());
    return run_stage("report", json{{"bins", 40}}, inputs, [&] {
      std::vector<fs::path> outputs;
      const fs::path dir = out("report");
      fs::create_directories(dir);

      if (have.count("inputs")) {
        const auto t = csv::read(have["inputs"]);
        outputs.push_back(dir / "input_posteriors.csv");
        csv::Writer w(outputs.back(), {"variable", "family", "prior", "parameter", "mean", "lower", "upper"});
        const std::vector<std::string> cols{"variable", "family", "prior", "parameter", "mean", "lower", "upper"};
        for (const auto& row : t.rows) {
          std::vector<std::string> cells;
          for (const auto& c : cols) cells.push_back(row[static_cast<std::size_t>(t.column(c))]);
          w.row(cells);
        }
      }
      if (have.count("lambda")) {
        outputs.push_back(dir / "cv_lambda.csv");
        fs::copy_file(have["lambda"], outputs.back(), fs::copy_options::overwrite_existing);
      }
      if (have.count("prior")) {
        outputs.push_back(dir / "cv_prior.csv");
        fs::copy_file(have["prior"], outputs.back(), fs::copy_options::overwrite_existing);
      }

      // Observed vs expected (leave-one-out) for REML and Bayesian fits.
      auto read_loo = [](const fs::path& p) {
        const auto m = csv::to_matrix(csv::read(p), p.string());
        return std::pair<Eigen::VectorXd, Eigen::VectorXd>{m.col(1), m.col(2)};
      };
      if (have.count("loo_reml") || have.count("loo_bayes")) {
        json oj;
        std::optional<std::pair<Eigen::VectorXd, Eigen::VectorXd>> reml, bayes;
        if (have.count("loo_reml")) reml = read_loo(have["loo_reml"]);
        if (have.count("loo_bayes")) bayes = read_loo(have["loo_bayes"]);
        const Eigen::VectorXd obs = reml ? reml->first : bayes->first;
        outputs.push_back(dir / "observed_expected.csv");
        {
          csv::Writer w(outputs.back(), {"fold", "observed", "reml", "bayes"});
          for (Eigen::Index i = 0; i < obs.size(); ++i)
            w.row(std::vector<std::string>{std::to_string(i), csv::format(obs(i)),
                                           reml ? csv::format(reml->second(i)) : "",
                                           bayes ? csv::format(bayes->second(i)) : ""});
        }
        auto diag = [](const std::pair<Eigen::VectorXd, Eigen::VectorXd>& p) {
          const auto d = kriging::diagnostics(p.first, p.second);
          return json{{"correlation", serialize::number(d.correlation)},
                      {"signal_to_noise", serialize::number(d.signal_to_noise)}};
        };
        oj["n"] = obs.size();
        if (reml) oj["reml"] = diag(*reml);
        if (bayes) oj["bayes"] = diag(*bayes);
        outputs.push_back(dir / "observed_expected.json");
        serialize::write_json(outputs.back(), oj);
      }

      // REML point estimate against the Bayesian posterior of theta.
      if (have.count("gp")) {
        const auto fit = serialize::fit_from(serialize::read_json(have["gp"]));
        std::optional<mcmc::PosteriorChain> chain;
        if (have.count("theta_chain")) chain = serialize::read_chain(have["theta_chain"]);
        outputs.push_back(dir / "theta_comparison.csv");
        csv::Writer w(outputs.back(), {"k", "reml", "bayes_mean", "bayes_lower", "bayes_upper"});
        for (Eigen::Index k = 0; k < fit.theta.size(); ++k) {
          std::vector<std::string> row{std::to_string(k + 1), csv::format(fit.theta(k)), "", "", ""};
          if (chain && chain->dim() == fit.theta.size()) {
            const Eigen::VectorXd col = chain->draws.col(k);
            const std::span<const double> s(col.data(), static_cast<std::size_t>(col.size()));
            row[2] = csv::format(stats::mean(s));
            row[3] = csv::format(stats::quantile(s, 0.025));
            row[4] = csv::format(stats::quantile(s, 0.975));
          }
          w.row(row);
        }
      }

      json pf = json::object();
      for (Setting s : {Setting::A, Setting::B}) {
        const std::string key = std::string("pf_") + to_string(s);
        if (!have.count(key)) continue;
        const auto post = read_pf_posterior(pf_dir(s));
        pf[to_string(s)] = summary_json(failure::summarize(post));
        outputs.push_back(dir / (key + "_histogram.csv"));
        write_histogram(outputs.back(), post.p, 40);
      }
      if (!pf.empty()) {
        outputs.push_back(dir / "pf_summary.json");
        serialize::write_json(outputs.back(), pf);
      }
      return outputs;
    });
  }

  static void write_histogram(const fs::path& path, const std::vector<double>& v, int bins) {
    const double lo = *std::min_element(v.begin(), v.end());
    const double hi = *std::max_element(v.begin(), v.end());
    const double width = hi > lo ? (hi - lo) / bins : 1.0;
    std::vector<std::size_t> count(static_cast<std::size_t>(bins), 0);
    for (double x : v) {
      auto b = static_cast<std::size_t>(std::floor((x - lo) / width));
      ++count[std::min(b, count.size() - 1)];
    }
    csv::Writer w(path, {"bin_lower", "bin_upper", "count"});
    for (int b = 0; b < bins; ++b)
      w.row(std::vector<std::string>{csv::format(lo + b * width), csv::format(lo + (b + 1) * width),
                                     std::to_string(count[static_cast<std::size_t>(b)])});
  }

  PipelineConfig cfg_;
  std::ostream& log_;
  std::optional<ingest::StudyDataset> dataset_;
};

}  // namespace pfsim::pipeline
