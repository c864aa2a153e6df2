#pragma once

// Gaussian-process surrogate core.
//
// Z ~ N_n(X beta, alpha V(theta)) with the anisotropic squared-exponential
// correlation
//
//   v_ij = exp( - sum_k (s_ik - s_jk)^2 / exp(theta_k)^2 ).
//
// Everything is computed from a Cholesky factor of V (plus a small nugget);
// no explicit inverses. With L L^T = V, Xw = L^-1 X and Zw = L^-1 Z:
//
//   beta_hat = (Xw^T Xw)^-1 Xw^T Zw
//   G^2      = |Zw - Xw beta_hat|^2     ( = Z^T H Z )
//
// and the negative log-likelihoods over theta are
//
//   profile  l*   = n/2 log 2pi + n/2 log(G^2/n) + 1/2 log|V| + n/2
//   REML     l*_w = (n-q)/2 log 2pi + (n-q)/2 log(G^2/(n-q)) - 1/2 log|X^T X|
//                   + 1/2 log|X^T V^-1 X| + 1/2 log|V| + (n-q)/2
//   penalized l_R = l*_w + lambda sum_k (theta_k - mean(theta))^2
//   Bayesian  l_B = -log pi(theta) + 1/2 log|V| + (n-q)/2 log G^2 + 1/2 log|X^T V^-1 X|
//
// where pi(theta) = prod_k N(theta_k | tau, nu^2).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfsim/errors.hpp"
#include "pfsim/mcmc.hpp"
#include "pfsim/optimize.hpp"
#include "pfsim/parallel.hpp"
#include "pfsim/random.hpp"

namespace pfsim::gp {

// Affine map applied to raw simulator inputs before distances are taken.
struct InputScaling {
  Eigen::VectorXd center;
  Eigen::VectorXd scale;

  static InputScaling identity(Eigen::Index k) {
    return {Eigen::VectorXd::Zero(k), Eigen::VectorXd::Ones(k)};
  }

  // Column means and (n-1) standard deviations; constant columns keep scale 1.
  static InputScaling standardize(const Eigen::MatrixXd& s) {
    InputScaling t;
    const auto n = static_cast<double>(s.rows());
    t.center = s.colwise().mean().transpose();
    t.scale.resize(s.cols());
    for (Eigen::Index k = 0; k < s.cols(); ++k) {
      const double sd = n > 1 ? std::sqrt((s.col(k).array() - t.center(k)).square().sum() / (n - 1.0)) : 0.0;
      t.scale(k) = sd > 0.0 ? sd : 1.0;
    }
    return t;
  }

  Eigen::VectorXd apply(const Eigen::VectorXd& raw) const {
    return (raw - center).cwiseQuotient(scale);
  }
  Eigen::MatrixXd apply_rows(const Eigen::MatrixXd& raw) const {
    return (raw.rowwise() - center.transpose()).array().rowwise() / scale.transpose().array();
  }
};

// Training data: S holds the (scaled) input locations, X the mean-model
// design matrix and Z the outputs.
struct GpDesign {
  Eigen::MatrixXd S;
  Eigen::MatrixXd X;
  Eigen::VectorXd Z;
  InputScaling scaling;

  Eigen::Index n() const { return S.rows(); }
  Eigen::Index K() const { return S.cols(); }
  Eigen::Index q() const { return X.cols(); }

  static GpDesign make(const Eigen::MatrixXd& raw_inputs, const Eigen::VectorXd& outputs, bool standardize = true,
                       std::optional<Eigen::MatrixXd> mean_design = std::nullopt) {
    GpDesign d;
    d.scaling = standardize ? InputScaling::standardize(raw_inputs) : InputScaling::identity(raw_inputs.cols());
    d.S = d.scaling.apply_rows(raw_inputs);
    d.X = mean_design ? *mean_design : Eigen::MatrixXd::Ones(raw_inputs.rows(), 1);
    d.Z = outputs;
    d.validate();
    return d;
  }

  void validate() const {
    if (X.rows() != n() || Z.size() != n()) throw std::invalid_argument("GpDesign: row counts of S, X and Z differ");
    if (q() < 1) throw std::invalid_argument("GpDesign: mean design needs at least one column");
    if (n() <= q()) throw std::invalid_argument("GpDesign: need more observations than mean coefficients");
    if (!S.allFinite() || !X.allFinite() || !Z.allFinite()) throw std::invalid_argument("GpDesign: non-finite entries");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < q()) throw std::invalid_argument("GpDesign: mean design matrix is rank deficient");
    for (Eigen::Index i = 0; i < n(); ++i)
      for (Eigen::Index j = 0; j < i; ++j)
        if ((S.row(i) - S.row(j)).squaredNorm() == 0.0)
          throw std::invalid_argument("GpDesign: duplicate input rows " + std::to_string(j) + " and " + std::to_string(i));
  }

  // Same scaling, row i removed.
  GpDesign without_row(Eigen::Index i) const {
    GpDesign d;
    d.scaling = scaling;
    const Eigen::Index m = n() - 1;
    d.S.resize(m, K());
    d.X.resize(m, q());
    d.Z.resize(m);
    for (Eigen::Index r = 0, w = 0; r < n(); ++r) {
      if (r == i) continue;
      d.S.row(w) = S.row(r);
      d.X.row(w) = X.row(r);
      d.Z(w) = Z(r);
      ++w;
    }
    return d;
  }
};

// Squared-exponential correlation between two scaled input points.
inline double correlation(const Eigen::Ref<const Eigen::RowVectorXd>& a, const Eigen::Ref<const Eigen::RowVectorXd>& b,
                          const Eigen::VectorXd& inv_len_sq) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    const double d = a(k) - b(k);
    s += d * d * inv_len_sq(k);
  }
  return std::exp(-s);
}

inline Eigen::VectorXd inverse_squared_lengths(const Eigen::VectorXd& theta) {
  return (-2.0 * theta.array()).exp().matrix();
}

inline Eigen::MatrixXd covariance_matrix(const Eigen::MatrixXd& S, const Eigen::VectorXd& theta, double nugget) {
  if (theta.size() != S.cols()) throw std::invalid_argument("covariance_matrix: theta has wrong length");
  if (!(nugget >= 0.0)) throw std::invalid_argument("covariance_matrix: nugget must be non-negative");
  const Eigen::VectorXd w = inverse_squared_lengths(theta);
  const Eigen::Index n = S.rows();
  Eigen::MatrixXd V(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    V(i, i) = 1.0 + nugget;
    for (Eigen::Index j = 0; j < i; ++j) V(i, j) = V(j, i) = correlation(S.row(i), S.row(j), w);
  }
  return V;
}

// Nugget escalation: start at `initial` (0 allowed), multiply by `factor` on
// Cholesky failure (a zero nugget escalates to 1e-8) until `max`, then fail.
struct NuggetPolicy {
  double initial = 1e-8;
  double max = 1e-4;
  double factor = 10.0;
};

struct CovarianceFactor {
  Eigen::MatrixXd L;  // lower Cholesky factor of V + nugget I
  double nugget = 0.0;
  double log_det = 0.0;
};

inline CovarianceFactor factorize_covariance(const Eigen::MatrixXd& S, const Eigen::VectorXd& theta,
                                             const NuggetPolicy& policy) {
  Eigen::MatrixXd V = covariance_matrix(S, theta, 0.0);
  double nugget = policy.initial;
  for (;;) {
    Eigen::MatrixXd A = V;
    A.diagonal().array() += nugget;
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() == Eigen::Success) {
      CovarianceFactor f;
      f.L = llt.matrixL();
      const Eigen::ArrayXd diag = f.L.diagonal().array();
      if ((diag > 0.0).all() && diag.allFinite()) {
        f.nugget = nugget;
        f.log_det = 2.0 * diag.log().sum();
        return f;
      }
    }
    const double next = nugget == 0.0 ? 1e-8 : nugget * policy.factor;
    if (next > policy.max * (1.0 + 1e-12))
      throw NumericalError("covariance matrix not positive definite even with nugget " + std::to_string(policy.max));
    nugget = next;
  }
}

// Generalized least squares quantities at fixed theta.
struct GlsState {
  CovarianceFactor factor;
  Eigen::MatrixXd Xw;            // L^-1 X
  Eigen::VectorXd residual_w;    // L^-1 (Z - X beta_hat)
  Eigen::MatrixXd xtvx_chol;     // lower Cholesky factor of X^T V^-1 X
  Eigen::VectorXd beta_mean;     // GLS coefficients
  double g_sq = 0.0;             // Z^T H Z
  double log_det_xtvx = 0.0;
  Eigen::Index n = 0, q = 0;

  double log_det_v() const { return factor.log_det; }
  double alpha_profile() const { return g_sq / static_cast<double>(n); }
  double alpha_reml() const { return g_sq / static_cast<double>(n - q); }
};

inline GlsState gls_state(const GpDesign& d, const Eigen::VectorXd& theta, const NuggetPolicy& policy = {}) {
  GlsState g;
  g.n = d.n();
  g.q = d.q();
  g.factor = factorize_covariance(d.S, theta, policy);
  const auto L = g.factor.L.triangularView<Eigen::Lower>();
  g.Xw = L.solve(d.X);
  const Eigen::VectorXd zw = L.solve(d.Z);
  const Eigen::MatrixXd xtvx = g.Xw.transpose() * g.Xw;
  Eigen::LLT<Eigen::MatrixXd> llt(xtvx);
  if (llt.info() != Eigen::Success) throw NumericalError("X^T V^-1 X is singular");
  g.xtvx_chol = llt.matrixL();
  g.log_det_xtvx = 2.0 * g.xtvx_chol.diagonal().array().log().sum();
  g.beta_mean = llt.solve(g.Xw.transpose() * zw);
  g.residual_w = zw - g.Xw * g.beta_mean;
  g.g_sq = g.residual_w.squaredNorm();
  return g;
}

struct GlsEstimate {
  Eigen::VectorXd beta_mean;
  double g_sq = 0.0;
};

inline GlsEstimate gls_beta(const GpDesign& d, const Eigen::VectorXd& theta, const NuggetPolicy& policy = {}) {
  const GlsState g = gls_state(d, theta, policy);
  return {g.beta_mean, g.g_sq};
}

namespace detail {

inline void require_nondegenerate(const GlsState& g, const GpDesign& d) {
  if (!(g.g_sq > 1e-24 * (1.0 + d.Z.squaredNorm())))
    throw DegenerateDataError("G^2 = 0: outputs are reproduced exactly by the mean model");
}

inline double log_det_xtx(const GpDesign& d) {
  Eigen::LLT<Eigen::MatrixXd> llt(d.X.transpose() * d.X);
  return 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
}

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

}  // namespace detail

inline double nll_profile(const GpDesign& d, const Eigen::VectorXd& theta, const NuggetPolicy& policy = {}) {
  const GlsState g = gls_state(d, theta, policy);
  detail::require_nondegenerate(g, d);
  const auto n = static_cast<double>(d.n());
  return 0.5 * n * detail::kLog2Pi + 0.5 * n * std::log(g.g_sq / n) + 0.5 * g.log_det_v() + 0.5 * n;
}

inline double nll_reml(const GpDesign& d, const Eigen::VectorXd& theta, const NuggetPolicy& policy = {}) {
  const GlsState g = gls_state(d, theta, policy);
  detail::require_nondegenerate(g, d);
  const auto m = static_cast<double>(d.n() - d.q());
  return 0.5 * m * detail::kLog2Pi + 0.5 * m * std::log(g.g_sq / m) - 0.5 * detail::log_det_xtx(d) +
         0.5 * g.log_det_xtvx + 0.5 * g.log_det_v() + 0.5 * m;
}

inline double ridge_penalty(const Eigen::VectorXd& theta, double lambda) {
  const double centre = theta.mean();
  return lambda * (theta.array() - centre).square().sum();
}

inline double nll_reml_regularized(const GpDesign& d, const Eigen::VectorXd& theta, double lambda,
                                   const NuggetPolicy& policy = {}) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("penalty lambda must be non-negative");
  return nll_reml(d, theta, policy) + ridge_penalty(theta, lambda);
}

// Independent N(tau, nu_sq) prior on every range parameter.
struct ThetaPrior {
  double tau = 0.0;
  double nu_sq = 1.0;

  double log_density(const Eigen::VectorXd& theta) const {
    if (!(nu_sq > 0.0)) throw std::invalid_argument("theta prior variance must be positive");
    const auto k = static_cast<double>(theta.size());
    return -0.5 * k * (detail::kLog2Pi + std::log(nu_sq)) - (theta.array() - tau).square().sum() / (2.0 * nu_sq);
  }
};

inline double nll_bayes(const GpDesign& d, const Eigen::VectorXd& theta, const ThetaPrior& prior,
                        const NuggetPolicy& policy = {}) {
  const double log_prior = prior.log_density(theta);
  const GlsState g = gls_state(d, theta, policy);
  detail::require_nondegenerate(g, d);
  const auto m = static_cast<double>(d.n() - d.q());
  return -log_prior + 0.5 * g.log_det_v() + 0.5 * m * std::log(g.g_sq) + 0.5 * g.log_det_xtvx;
}

// Log posterior of theta for the sampler: -l_B, or -inf where the covariance
// cannot be factorized.
inline mcmc::LogTarget theta_log_posterior(const GpDesign& d, const ThetaPrior& prior, const NuggetPolicy& policy = {}) {
  return [d, prior, policy](const Eigen::VectorXd& theta) {
    try {
      const double v = -nll_bayes(d, theta, prior, policy);
      return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
    } catch (const NumericalError&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
}

// ---------------------------------------------------------------------------
// Penalized REML fit
// ---------------------------------------------------------------------------

enum class ScaleEstimate { Profile, Reml };  // G^2/n or G^2/(n-q)

struct FitOptions {
  double lambda = 2.0;
  int restarts = 8;
  optimize::Box box{-10.0, 10.0};
  double start_sd = 2.0;
  NuggetPolicy nugget{};
  ScaleEstimate scale = ScaleEstimate::Reml;
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  double hessian_step = 1e-4;
};

struct GpFit {
  Eigen::VectorXd theta;
  double alpha_hat = 0.0;      // selected scale estimate
  double alpha_profile = 0.0;  // G^2 / n
  double alpha_reml = 0.0;     // G^2 / (n - q)
  Eigen::VectorXd beta_mean;
  Eigen::MatrixXd chol_v;
  double nugget = 0.0;
  double objective = 0.0;
  double lambda = 0.0;
  Eigen::MatrixXd hessian;
  bool at_bound = false;
  int starts_converged = 0;
  std::vector<std::string> warnings;
};

inline GpFit fit_at(const GpDesign& d, const Eigen::VectorXd& theta, const FitOptions& opt) {
  const GlsState g = gls_state(d, theta, opt.nugget);
  GpFit f;
  f.theta = theta;
  f.alpha_profile = g.alpha_profile();
  f.alpha_reml = g.alpha_reml();
  f.alpha_hat = opt.scale == ScaleEstimate::Reml ? f.alpha_reml : f.alpha_profile;
  f.beta_mean = g.beta_mean;
  f.chol_v = g.factor.L;
  f.nugget = g.factor.nugget;
  f.lambda = opt.lambda;
  return f;
}

// Multi-start minimization of the penalized REML objective over the box.
// Starts are drawn N(0, start_sd^2) per coordinate (clamped); ties between
// starts go to the lowest objective, then the lexicographically smallest theta.
inline GpFit fit_reml(const GpDesign& d, const FitOptions& opt) {
  if (opt.restarts < 1) throw std::invalid_argument("fit_reml: need at least one start");
  const Eigen::Index K = d.K();
  auto objective = [&](const Eigen::VectorXd& theta) { return nll_reml_regularized(d, theta, opt.lambda, opt.nugget); };

  // Outputs in the column space of X leave theta unidentified for every
  // theta alike. Return the theta = 0 fit, which still predicts exactly.
  {
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(K);
    try {
      detail::require_nondegenerate(gls_state(d, zero, opt.nugget), d);
    } catch (const DegenerateDataError& e) {
      GpFit f = fit_at(d, zero, opt);
      f.objective = -std::numeric_limits<double>::infinity();
      f.hessian = Eigen::MatrixXd::Zero(K, K);
      f.warnings.emplace_back(e.what());
      f.warnings.emplace_back("range parameters unidentified; theta set to 0");
      return f;
    }
  }

  Rng rng(opt.seed);
  std::vector<Eigen::VectorXd> starts(static_cast<std::size_t>(opt.restarts));
  for (auto& s : starts) {
    s.resize(K);
    for (Eigen::Index k = 0; k < K; ++k) s(k) = opt.start_sd * standard_normal(rng);
    s = opt.box.clamp(s);
  }

  std::vector<optimize::Result> results(starts.size());
  parallel_for(starts.size(), opt.jobs,
               [&](std::size_t i) { results[i] = optimize::minimize(objective, starts[i], opt.box); });

  const optimize::Result* best = nullptr;
  int converged = 0;
  for (const auto& r : results) {
    if (!std::isfinite(r.value)) continue;
    if (r.converged) ++converged;
    if (!best || r.value < best->value ||
        (r.value == best->value &&
         std::lexicographical_compare(r.x.begin(), r.x.end(), best->x.begin(), best->x.end())))
      best = &r;
  }
  if (!best) throw NumericalError("fit_reml: every start failed");

  GpFit f = fit_at(d, best->x, opt);
  f.objective = best->value;
  f.starts_converged = converged;
  f.hessian = mcmc::finite_difference_hessian(objective, best->x, opt.hessian_step, 1.0);
  for (Eigen::Index k = 0; k < K; ++k) {
    if (best->x(k) <= opt.box.lower + 1e-6 || best->x(k) >= opt.box.upper - 1e-6) f.at_bound = true;
  }
  if (f.at_bound) f.warnings.emplace_back("range parameter estimate on the optimization bound");
  if (converged == 0) f.warnings.emplace_back("no start met the convergence tolerance");
  if (!f.hessian.allFinite()) f.warnings.emplace_back("finite-difference Hessian is not finite");
  return f;
}

struct PriorEstimate {
  double tau = 0.0;
  double nu_sq = 0.0;
  double point_spread = 0.0;  // (1/K) sum (theta_k - tau)^2
  bool pseudo_inverse = false;
};

// Empirical-Bayes prior for theta from a fit: tau = mean(theta) and
// nu^2 = mean of the diagonal of the inverse Hessian. A non-SPD Hessian falls
// back to its pseudo-inverse and sets the flag.
inline PriorEstimate hessian_nu_estimate(const GpFit& fit) {
  const auto K = fit.theta.size();
  if (fit.hessian.rows() != K || fit.hessian.cols() != K)
    throw std::invalid_argument("hessian_nu_estimate: Hessian has wrong shape");
  if (!fit.hessian.allFinite()) throw NumericalError("hessian_nu_estimate: Hessian is not finite");
  PriorEstimate e;
  e.tau = fit.theta.mean();
  e.point_spread = (fit.theta.array() - e.tau).square().mean();
  const Eigen::MatrixXd h = 0.5 * (fit.hessian + fit.hessian.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(h);
  Eigen::MatrixXd inv;
  if (llt.info() == Eigen::Success) {
    inv = llt.solve(Eigen::MatrixXd::Identity(K, K));
  } else {
    inv = h.completeOrthogonalDecomposition().pseudoInverse();
    e.pseudo_inverse = true;
  }
  e.nu_sq = inv.diagonal().mean();
  return e;
}

}  // namespace pfsim::gp
