#pragma once

// Leave-one-out cross-validation with squared-error loss.
//
// cv_lambda: for each penalty lambda_q and each fold i, refit the penalized
// REML model without row i, krige row i, and score L_q = sum_i (z_i - z_i^q)^2.
//
// cv_hyperparams: for each prior (tau_q, nu_q^2) and each fold i, run the AM
// sampler on the Bayesian objective without row i, drop burn-in, and krige
// row i once per retained draw j. Then L_qj = sum_i (z_i - z_ij^q)^2 and the
// score is L*_q = mean_j L_qj.
//
// Fold seeds are derive_seed(seed, "cv-lambda" | "cv-prior", {q, i}), so all
// candidates see common random numbers and results do not depend on `jobs`.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfsim/errors.hpp"
#include "pfsim/gp.hpp"
#include "pfsim/kriging.hpp"
#include "pfsim/mcmc.hpp"
#include "pfsim/parallel.hpp"
#include "pfsim/random.hpp"

namespace pfsim::tuning {

struct CvReport {
  std::vector<Eigen::VectorXd> candidates;  // (lambda) or (tau, nu_sq)
  std::vector<double> scores;               // L or L*; +inf for a failed candidate
  std::size_t winner = 0;
  Eigen::MatrixXd fold_losses;  // Q x n squared errors (prior CV: averaged over draws)
  Eigen::MatrixXd predictions;  // Q x n held-out predictions (prior CV: averaged over draws)
  std::vector<Eigen::VectorXd> draw_losses;  // prior CV only: per-draw loss L_qj
  std::vector<std::string> failures;
};

namespace detail {

inline std::size_t argmin_first(const std::vector<double>& s) {
  std::size_t best = 0;
  for (std::size_t q = 1; q < s.size(); ++q)
    if (s[q] < s[best]) best = q;
  return best;
}

inline void finish(CvReport& r) {
  bool any = false;
  for (double s : r.scores) any = any || std::isfinite(s);
  if (!any) throw NumericalError("cross-validation: every candidate failed");
  r.winner = argmin_first(r.scores);
}

}  // namespace detail

inline std::uint64_t fold_seed(std::uint64_t seed, std::string_view label, std::size_t q, Eigen::Index i) {
  return derive_seed(seed, label, {static_cast<std::uint64_t>(q), static_cast<std::uint64_t>(i)});
}

struct LambdaCvOptions {
  gp::FitOptions fit{};  // lambda and seed are set per fold
  std::uint64_t seed = 0;
  unsigned jobs = 1;
};

inline CvReport cv_lambda(const gp::GpDesign& d, const std::vector<double>& lambdas, const LambdaCvOptions& opt) {
  if (lambdas.empty()) throw std::invalid_argument("cv_lambda: no candidates");
  if (d.n() < 3) throw std::invalid_argument("cv_lambda: need at least three observations");
  const std::size_t Q = lambdas.size();
  const auto n = static_cast<std::size_t>(d.n());

  CvReport r;
  r.fold_losses = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(Q), d.n(), std::numeric_limits<double>::quiet_NaN());
  r.predictions = r.fold_losses;
  std::vector<std::string> fold_error(Q * n);

  parallel_for(Q * n, opt.jobs, [&](std::size_t task) {
    const std::size_t q = task / n;
    const auto i = static_cast<Eigen::Index>(task % n);
    try {
      const gp::GpDesign reduced = d.without_row(i);
      gp::FitOptions fo = opt.fit;
      fo.lambda = lambdas[q];
      fo.seed = fold_seed(opt.seed, "cv-lambda", q, i);
      fo.jobs = 1;
      const gp::GpFit fit = gp::fit_reml(reduced, fo);
      const kriging::Predictor pred(fit, reduced);
      const double z_hat = pred.predict_scaled(d.S.row(i).transpose(), d.X.row(i).transpose(), d.S.row(i).transpose()).z_hat;
      const double e = d.Z(i) - z_hat;
      r.predictions(static_cast<Eigen::Index>(q), i) = z_hat;
      r.fold_losses(static_cast<Eigen::Index>(q), i) = e * e;
    } catch (const std::exception& ex) {
      fold_error[task] = ex.what();
    }
  });

  for (std::size_t q = 0; q < Q; ++q) {
    r.candidates.push_back(Eigen::VectorXd::Constant(1, lambdas[q]));
    double total = 0.0;
    bool failed = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!fold_error[q * n + i].empty()) {
        failed = true;
        r.failures.push_back("lambda=" + std::to_string(lambdas[q]) + " fold " + std::to_string(i) + ": " +
                             fold_error[q * n + i]);
        continue;
      }
      total += r.fold_losses(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(i));
    }
    r.scores.push_back(failed ? std::numeric_limits<double>::infinity() : total);
  }
  detail::finish(r);
  return r;
}

struct PriorCvOptions {
  mcmc::AmSettings am{};
  double burn_in = 0.2;
  gp::NuggetPolicy nugget{};
  gp::ScaleEstimate scale = gp::ScaleEstimate::Reml;
  std::optional<Eigen::VectorXd> init_theta;  // default: tau in every coordinate
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  bool keep_chains = false;
};

struct PriorCvResult {
  CvReport report;
  // chains[q][i]: burn-in-stripped theta chain for candidate q, fold i
  // (only when keep_chains is set).
  std::vector<std::vector<mcmc::PosteriorChain>> chains;
};

// Burn-in-stripped AM chain for theta on a design under a N(tau, nu^2) prior.
inline mcmc::PosteriorChain sample_theta_posterior(const gp::GpDesign& d, const gp::ThetaPrior& prior,
                                                   const Eigen::VectorXd& init, const mcmc::AmSettings& am,
                                                   double burn_in, const gp::NuggetPolicy& nugget, Rng& rng) {
  const auto target = gp::theta_log_posterior(d, prior, nugget);
  const Eigen::MatrixXd cov = mcmc::default_initial_covariance(target, init);
  return mcmc::remove_burn_in(mcmc::am_sample(target, init, cov, am, rng), burn_in);
}

inline PriorCvResult cv_hyperparams(const gp::GpDesign& d, const std::vector<gp::ThetaPrior>& candidates,
                                    const PriorCvOptions& opt) {
  if (candidates.empty()) throw std::invalid_argument("cv_hyperparams: no candidates");
  if (d.n() < 3) throw std::invalid_argument("cv_hyperparams: need at least three observations");
  opt.am.validate();
  const std::size_t Q = candidates.size();
  const auto n = static_cast<std::size_t>(d.n());
  const auto T = static_cast<Eigen::Index>(opt.am.iterations / opt.am.thin);
  const Eigen::Index J = T - static_cast<Eigen::Index>(std::floor(opt.burn_in * static_cast<double>(T)));

  // per task: J predictions for held-out row i
  std::vector<Eigen::VectorXd> preds(Q * n);
  std::vector<std::string> fold_error(Q * n);
  std::vector<mcmc::PosteriorChain> kept(opt.keep_chains ? Q * n : 0);

  parallel_for(Q * n, opt.jobs, [&](std::size_t task) {
    const std::size_t q = task / n;
    const auto i = static_cast<Eigen::Index>(task % n);
    try {
      const gp::GpDesign reduced = d.without_row(i);
      const Eigen::VectorXd init = opt.init_theta ? *opt.init_theta : Eigen::VectorXd::Constant(d.K(), candidates[q].tau);
      Rng rng(fold_seed(opt.seed, "cv-prior", q, i));
      mcmc::PosteriorChain chain =
          sample_theta_posterior(reduced, candidates[q], init, opt.am, opt.burn_in, opt.nugget, rng);
      Eigen::VectorXd p(chain.draws.rows());
      for (Eigen::Index j = 0; j < chain.draws.rows(); ++j) {
        const kriging::Predictor pred(reduced, chain.draws.row(j).transpose(), opt.scale, opt.nugget);
        p(j) = pred.predict_scaled(d.S.row(i).transpose(), d.X.row(i).transpose(), d.S.row(i).transpose()).z_hat;
      }
      preds[task] = std::move(p);
      if (opt.keep_chains) kept[task] = std::move(chain);
    } catch (const std::exception& ex) {
      fold_error[task] = ex.what();
    }
  });

  PriorCvResult out;
  CvReport& r = out.report;
  r.fold_losses = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(Q), d.n(), std::numeric_limits<double>::quiet_NaN());
  r.predictions = r.fold_losses;
  for (std::size_t q = 0; q < Q; ++q) {
    r.candidates.push_back(Eigen::Vector2d(candidates[q].tau, candidates[q].nu_sq));
    bool failed = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!fold_error[q * n + i].empty()) {
        failed = true;
        r.failures.push_back("tau=" + std::to_string(candidates[q].tau) + " nu_sq=" +
                             std::to_string(candidates[q].nu_sq) + " fold " + std::to_string(i) + ": " +
                             fold_error[q * n + i]);
      }
    }
    if (failed) {
      r.scores.push_back(std::numeric_limits<double>::infinity());
      r.draw_losses.emplace_back();
      continue;
    }
    Eigen::VectorXd lqj = Eigen::VectorXd::Zero(J);
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::VectorXd& p = preds[q * n + i];
      const Eigen::ArrayXd e2 = (d.Z(static_cast<Eigen::Index>(i)) - p.array()).square();
      lqj += e2.matrix();
      r.fold_losses(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(i)) = e2.mean();
      r.predictions(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(i)) = p.mean();
    }
    r.scores.push_back(lqj.mean());
    r.draw_losses.push_back(std::move(lqj));
  }
  detail::finish(r);

  if (opt.keep_chains) {
    out.chains.resize(Q);
    for (std::size_t q = 0; q < Q; ++q)
      for (std::size_t i = 0; i < n; ++i) out.chains[q].push_back(std::move(kept[q * n + i]));
  }
  return out;
}

}  // namespace pfsim::tuning
