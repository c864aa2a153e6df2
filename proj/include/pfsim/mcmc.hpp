#pragma once

// Adaptive Metropolis (Haario, Saksman & Tamminen 2001).
//
// Gaussian random-walk proposal centred on the current state. For the first
// t0 steps the proposal covariance is s_d * C0; afterwards it is
//   s_d * Cov(X_0, ..., X_k) + s_d * eps * I,
// with the empirical covariance maintained by rank-1 (Welford) updates every
// step and the proposal Cholesky factor refreshed every t1 steps. Every t2-th
// state is retained, giving a (t / t2) x d draw matrix.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfsim/errors.hpp"
#include "pfsim/random.hpp"

namespace pfsim::mcmc {

using LogTarget = std::function<double(const Eigen::VectorXd&)>;

struct AmSettings {
  std::size_t iterations = 100000;     // t
  std::size_t non_adaptive = 10000;    // t0
  std::size_t adapt_interval = 10;     // t1
  std::size_t thin = 100;              // t2
  double epsilon = 1e-4;
  double scaling = 0.0;  // s_d; 0 selects 2.4^2 / d

  double scale_for(int d) const { return scaling > 0.0 ? scaling : 2.4 * 2.4 / d; }

  void validate() const {
    if (thin == 0 || iterations == 0 || adapt_interval == 0)
      throw std::invalid_argument("AM settings: t, t1 and t2 must be positive");
    if (iterations % thin != 0) throw std::invalid_argument("AM settings: t must be a multiple of t2");
    if (non_adaptive >= iterations) throw std::invalid_argument("AM settings: t0 must be below t");
    if (!(epsilon > 0.0)) throw std::invalid_argument("AM settings: epsilon must be positive");
  }
};

struct PosteriorChain {
  Eigen::MatrixXd draws;            // retained states, one per row
  std::size_t thin = 1;
  std::size_t burned_rows = 0;      // rows removed from the front so far
  double burn_in_fraction = 0.0;
  double acceptance_rate = 0.0;
  std::vector<double> geweke_z;

  std::size_t rows() const { return static_cast<std::size_t>(draws.rows()); }
  int dim() const { return static_cast<int>(draws.cols()); }

  // Sampler iteration at which retained row r was recorded.
  std::size_t iteration_of(std::size_t r) const { return (burned_rows + r + 1) * thin; }
};

inline PosteriorChain am_sample(const LogTarget& log_target, const Eigen::VectorXd& init,
                                const Eigen::MatrixXd& init_cov, const AmSettings& settings, Rng& rng) {
  settings.validate();
  const auto d = static_cast<int>(init.size());
  if (d == 0) throw std::invalid_argument("am_sample: empty initial state");
  if (init_cov.rows() != d || init_cov.cols() != d) throw std::invalid_argument("am_sample: init_cov has wrong shape");

  double current_lp = log_target(init);
  if (!std::isfinite(current_lp)) throw NumericalError("am_sample: log target is not finite at the initial state");

  const double sd = settings.scale_for(d);
  Eigen::LLT<Eigen::MatrixXd> llt(sd * init_cov);
  if (llt.info() != Eigen::Success) throw std::invalid_argument("am_sample: init_cov is not positive definite");
  Eigen::MatrixXd prop_chol = llt.matrixL();

  Eigen::VectorXd x = init;
  Eigen::VectorXd run_mean = init;
  Eigen::MatrixXd run_m2 = Eigen::MatrixXd::Zero(d, d);
  double count = 1.0;

  PosteriorChain chain;
  chain.thin = settings.thin;
  chain.draws.resize(static_cast<Eigen::Index>(settings.iterations / settings.thin), d);

  Eigen::VectorXd z(d), y(d), delta(d);
  std::size_t accepted = 0;
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);

  for (std::size_t k = 1; k <= settings.iterations; ++k) {
    for (int j = 0; j < d; ++j) z(j) = standard_normal(rng);
    y = x + prop_chol * z;
    const double lp = log_target(y);
    const double log_u = std::log(uniform_open(rng));
    if (std::isfinite(lp) && log_u < lp - current_lp) {
      x = y;
      current_lp = lp;
      ++accepted;
    }

    count += 1.0;
    delta = x - run_mean;
    run_mean += delta / count;
    run_m2.noalias() += delta * (x - run_mean).transpose();

    if (k >= settings.non_adaptive && k % settings.adapt_interval == 0) {
      Eigen::MatrixXd cov = run_m2 / (count - 1.0);
      cov = 0.5 * (cov + cov.transpose());
      Eigen::LLT<Eigen::MatrixXd> adapt(sd * (cov + settings.epsilon * eye));
      if (adapt.info() != Eigen::Success)
        throw NumericalError("am_sample: adapted proposal covariance lost positive definiteness");
      prop_chol = adapt.matrixL();
    }

    if (k % settings.thin == 0)
      chain.draws.row(static_cast<Eigen::Index>(k / settings.thin - 1)) = x.transpose();
  }
  chain.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(settings.iterations);
  return chain;
}

inline PosteriorChain remove_burn_in(const PosteriorChain& chain, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("burn-in fraction must lie in [0,1)");
  const auto drop = static_cast<Eigen::Index>(std::floor(fraction * static_cast<double>(chain.rows())));
  PosteriorChain out = chain;
  out.draws = chain.draws.bottomRows(chain.draws.rows() - drop);
  out.burned_rows = chain.burned_rows + static_cast<std::size_t>(drop);
  out.burn_in_fraction = fraction;
  out.geweke_z.clear();
  return out;
}

enum class GewekeVariance {
  SampleVariance,  // s^2 / n_window
  Spectral,        // Bartlett-windowed spectral density at zero / n_window
};

namespace detail {

inline double window_mean_variance(const Eigen::VectorXd& w, GewekeVariance method) {
  const auto n = static_cast<double>(w.size());
  const double m = w.mean();
  const Eigen::ArrayXd c = w.array() - m;
  const double gamma0 = c.square().sum() / n;
  if (method == GewekeVariance::SampleVariance) return c.square().sum() / (n - 1.0) / n;
  // Bartlett lag window, truncation at 4% of the window length (at least 1).
  const auto max_lag = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::ceil(0.04 * n)));
  double s = gamma0;
  for (Eigen::Index lag = 1; lag <= max_lag && lag < w.size(); ++lag) {
    const double g = (c.head(w.size() - lag) * c.tail(w.size() - lag)).sum() / n;
    s += 2.0 * (1.0 - static_cast<double>(lag) / static_cast<double>(max_lag + 1)) * g;
  }
  return std::max(s, 0.0) / n;
}

}  // namespace detail

// Geweke z-score per coordinate comparing the mean of the first `first_frac`
// of the draws with the mean of the last `last_frac`.
inline std::vector<double> geweke(const PosteriorChain& chain, double first_frac = 0.1, double last_frac = 0.5,
                                  GewekeVariance method = GewekeVariance::SampleVariance) {
  if (!(first_frac > 0.0 && last_frac > 0.0 && first_frac + last_frac <= 1.0))
    throw std::invalid_argument("geweke: invalid window fractions");
  const auto n = static_cast<double>(chain.rows());
  const auto na = static_cast<Eigen::Index>(std::floor(first_frac * n));
  const auto nb = static_cast<Eigen::Index>(std::floor(last_frac * n));
  if (na < 10 || nb < 10) throw std::invalid_argument("geweke: windows shorter than 10 draws");

  std::vector<double> z(static_cast<std::size_t>(chain.dim()));
  for (int j = 0; j < chain.dim(); ++j) {
    const Eigen::VectorXd a = chain.draws.col(j).head(na);
    const Eigen::VectorXd b = chain.draws.col(j).tail(nb);
    const double va = detail::window_mean_variance(a, method);
    const double vb = detail::window_mean_variance(b, method);
    if (!(va + vb > 0.0))
      throw NumericalError("geweke: zero variance in coordinate " + std::to_string(j) + "; diagnostic undefined");
    z[static_cast<std::size_t>(j)] = (a.mean() - b.mean()) / std::sqrt(va + vb);
  }
  return z;
}

// Cumulative means down the rows.
inline Eigen::MatrixXd running_average(const PosteriorChain& chain) {
  Eigen::MatrixXd out(chain.draws.rows(), chain.draws.cols());
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(chain.draws.cols());
  for (Eigen::Index r = 0; r < chain.draws.rows(); ++r) {
    sum += chain.draws.row(r);
    out.row(r) = sum / static_cast<double>(r + 1);
  }
  return out;
}

// Retained states with the sampler iteration in column 0.
inline Eigen::MatrixXd trace_export(const PosteriorChain& chain) {
  Eigen::MatrixXd out(chain.draws.rows(), chain.draws.cols() + 1);
  for (Eigen::Index r = 0; r < chain.draws.rows(); ++r) {
    out(r, 0) = static_cast<double>(chain.iteration_of(static_cast<std::size_t>(r)));
    out.row(r).tail(chain.draws.cols()) = chain.draws.row(r);
  }
  return out;
}

// Central finite-difference Hessian of f at x, step h_k = rel * max(floor, |x_k|)
// (a zero coordinate always gets step rel). Non-finite evaluations propagate
// as NaN entries.
inline Eigen::MatrixXd finite_difference_hessian(const std::function<double(const Eigen::VectorXd&)>& f,
                                                 const Eigen::VectorXd& x, double rel = 1e-4,
                                                 double floor = 1.0) {
  const auto d = x.size();
  Eigen::VectorXd h(d);
  for (Eigen::Index k = 0; k < d; ++k) {
    const double mag = std::max(floor, std::abs(x(k)));
    h(k) = rel * (mag > 0.0 ? mag : 1.0);
  }
  const double f0 = f(x);
  Eigen::MatrixXd hess(d, d);
  Eigen::VectorXd p = x;
  for (Eigen::Index i = 0; i < d; ++i) {
    p = x;
    p(i) = x(i) + h(i);
    const double fp = f(p);
    p(i) = x(i) - h(i);
    const double fm = f(p);
    hess(i, i) = (fp - 2.0 * f0 + fm) / (h(i) * h(i));
    for (Eigen::Index j = 0; j < i; ++j) {
      p = x;
      p(i) += h(i); p(j) += h(j);
      const double fpp = f(p);
      p(j) = x(j) - h(j);
      const double fpm = f(p);
      p(i) = x(i) - h(i);
      const double fmm = f(p);
      p(j) = x(j) + h(j);
      const double fmp = f(p);
      hess(i, j) = hess(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * h(i) * h(j));
    }
  }
  return hess;
}

// Inverse finite-difference Hessian of -log_target at init when it is SPD,
// otherwise 0.1 * diag(max(1, x_k^2)). Steps are relative to |x_k| so that
// parameters in raw physical units are differenced sensibly.
inline Eigen::MatrixXd default_initial_covariance(const LogTarget& log_target, const Eigen::VectorXd& init) {
  const auto d = init.size();
  auto neg = [&](const Eigen::VectorXd& v) { return -log_target(v); };
  const Eigen::MatrixXd hess = finite_difference_hessian(neg, init, 1e-4, 0.0);
  if (hess.allFinite()) {
    Eigen::LLT<Eigen::MatrixXd> llt(hess);
    if (llt.info() == Eigen::Success) {
      Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(d, d));
      cov = 0.5 * (cov + cov.transpose());
      if (cov.allFinite() && Eigen::LLT<Eigen::MatrixXd>(cov).info() == Eigen::Success) return cov;
    }
  }
  Eigen::MatrixXd fallback = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index k = 0; k < d; ++k) fallback(k, k) = 0.1 * std::max(1.0, init(k) * init(k));
  return fallback;
}

}  // namespace pfsim::mcmc
