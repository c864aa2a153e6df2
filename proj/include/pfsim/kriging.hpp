#pragma once

// Universal kriging (ordinary kriging for a constant mean).
//
// With Sigma = alpha V, phi = alpha v(s0, S) and sigma0^2 = alpha (1 + nugget)
// the best linear unbiased predictor subject to gamma^T X = x0^T is
//
//   z0_hat = x0^T beta_hat + phi^T Sigma^-1 (Z - X beta_hat)
//   MSPE   = sigma0^2 - phi^T Sigma^-1 phi
//            + (x0 - X^T Sigma^-1 phi)^T (X^T Sigma^-1 X)^-1 (x0 - X^T Sigma^-1 phi)
//
// The scale alpha cancels from the predictor and multiplies the MSPE. All
// solves reuse the Cholesky factor of V, so a prediction costs O(n^2).

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "pfsim/gp.hpp"
#include "pfsim/stats.hpp"

namespace pfsim::kriging {

struct KrigingPrediction {
  double z_hat = 0.0;
  double rmspe = 0.0;        // S0 = sqrt(max(MSPE, 0))
  double mspe_raw = 0.0;     // before clamping at zero
  double min_distance = 0.0; // to the nearest design point, scaled coordinates
  Eigen::VectorXd location;  // s0 as supplied

  // Pre-clamp MSPE below -1e-8 indicates loss of precision.
  bool numerically_healthy() const { return mspe_raw >= -1e-8; }
};

class Predictor {
 public:
  // Factorizes V(theta) for the design and plugs in the chosen scale estimate.
  Predictor(const gp::GpDesign& d, const Eigen::VectorXd& theta,
            gp::ScaleEstimate scale = gp::ScaleEstimate::Reml, const gp::NuggetPolicy& policy = {})
      : design_(d), theta_(theta), inv_len_sq_(gp::inverse_squared_lengths(theta)) {
    const gp::GlsState g = gp::gls_state(d, theta, policy);
    alpha_ = scale == gp::ScaleEstimate::Reml ? g.alpha_reml() : g.alpha_profile();
    init(g.factor.L, g.factor.nugget, g.beta_mean, g.Xw, g.xtvx_chol);
  }

  // Reuses a fitted factorization.
  Predictor(const gp::GpFit& fit, const gp::GpDesign& d)
      : design_(d), theta_(fit.theta), inv_len_sq_(gp::inverse_squared_lengths(fit.theta)), alpha_(fit.alpha_hat) {
    if (fit.chol_v.rows() != d.n()) throw std::invalid_argument("Predictor: fit and design sizes differ");
    const auto L = fit.chol_v.triangularView<Eigen::Lower>();
    const Eigen::MatrixXd xw = L.solve(d.X);
    Eigen::LLT<Eigen::MatrixXd> llt(xw.transpose() * xw);
    if (llt.info() != Eigen::Success) throw NumericalError("Predictor: X^T V^-1 X is singular");
    init(fit.chol_v, fit.nugget, fit.beta_mean, xw, llt.matrixL());
  }

  double alpha() const { return alpha_; }
  double nugget() const { return nugget_; }
  const Eigen::VectorXd& beta_mean() const { return beta_; }
  const Eigen::VectorXd& theta() const { return theta_; }

  // s0 in raw input units; x0 is the mean-model row at s0.
  KrigingPrediction predict(const Eigen::VectorXd& s0, const Eigen::VectorXd& x0) const {
    if (s0.size() != design_.K()) throw std::invalid_argument("predict: s0 has the wrong dimension");
    return predict_scaled(design_.scaling.apply(s0), x0, s0);
  }

  // Constant-mean shorthand.
  KrigingPrediction predict(const Eigen::VectorXd& s0) const {
    return predict(s0, Eigen::VectorXd::Ones(design_.q()));
  }

  KrigingPrediction predict_scaled(const Eigen::VectorXd& s0_scaled, const Eigen::VectorXd& x0,
                                   const Eigen::VectorXd& location) const {
    if (x0.size() != design_.q()) throw std::invalid_argument("predict: x0 does not match the mean design");
    const Eigen::Index n = design_.n();
    Eigen::VectorXd v(n);
    double min_d2 = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
      double s = 0.0, d2 = 0.0;
      for (Eigen::Index k = 0; k < design_.K(); ++k) {
        const double dk = s0_scaled(k) - design_.S(i, k);
        s += dk * dk * inv_len_sq_(k);
        d2 += dk * dk;
      }
      v(i) = std::exp(-s);
      min_d2 = std::min(min_d2, d2);
    }
    KrigingPrediction p;
    p.location = location;
    p.min_distance = std::sqrt(min_d2);
    p.z_hat = x0.dot(beta_) + v.dot(weights_);

    const Eigen::VectorXd w = L_.triangularView<Eigen::Lower>().solve(v);
    const Eigen::VectorXd m = x0 - xw_.transpose() * w;
    const Eigen::VectorXd c = xtvx_chol_.triangularView<Eigen::Lower>().solve(m);
    p.mspe_raw = alpha_ * ((1.0 + nugget_) - w.squaredNorm() + c.squaredNorm());
    p.rmspe = std::sqrt(std::max(p.mspe_raw, 0.0));
    return p;
  }

 private:
  void init(const Eigen::MatrixXd& L, double nugget, const Eigen::VectorXd& beta, const Eigen::MatrixXd& xw,
            const Eigen::MatrixXd& xtvx_chol) {
    L_ = L;
    nugget_ = nugget;
    beta_ = beta;
    xw_ = xw;
    xtvx_chol_ = xtvx_chol;
    const auto Lv = L_.triangularView<Eigen::Lower>();
    const Eigen::VectorXd rw = Lv.solve(design_.Z - design_.X * beta_);
    weights_ = L_.transpose().triangularView<Eigen::Upper>().solve(rw);
  }

  gp::GpDesign design_;
  Eigen::VectorXd theta_;
  Eigen::VectorXd inv_len_sq_;
  double alpha_ = 0.0;
  double nugget_ = 0.0;
  Eigen::MatrixXd L_;
  Eigen::VectorXd beta_;
  Eigen::MatrixXd xw_;
  Eigen::MatrixXd xtvx_chol_;
  Eigen::VectorXd weights_;  // V^-1 (Z - X beta_hat)
};

inline KrigingPrediction predict(const gp::GpFit& fit, const gp::GpDesign& d, const Eigen::VectorXd& s0,
                                 const Eigen::VectorXd& x0) {
  return Predictor(fit, d).predict(s0, x0);
}

// Prediction for held-out row i from the other n-1 rows at fixed theta. The
// held-out point is already in scaled coordinates.
inline KrigingPrediction loo_predict(const gp::GpDesign& d, Eigen::Index i, const Eigen::VectorXd& theta,
                                     gp::ScaleEstimate scale = gp::ScaleEstimate::Reml,
                                     const gp::NuggetPolicy& policy = {}) {
  const gp::GpDesign reduced = d.without_row(i);
  const Predictor pred(reduced, theta, scale, policy);
  return pred.predict_scaled(d.S.row(i).transpose(), d.X.row(i).transpose(),
                             d.scaling.scale.cwiseProduct(d.S.row(i).transpose()) + d.scaling.center);
}

// Leave-one-out predictions at one fixed theta (n values).
inline Eigen::VectorXd loo_predictions(const gp::GpDesign& d, const Eigen::VectorXd& theta,
                                       gp::ScaleEstimate scale = gp::ScaleEstimate::Reml,
                                       const gp::NuggetPolicy& policy = {}) {
  if (d.n() < 3) throw std::invalid_argument("loo_predictions: need at least three observations");
  Eigen::VectorXd out(d.n());
  for (Eigen::Index i = 0; i < d.n(); ++i) out(i) = loo_predict(d, i, theta, scale, policy).z_hat;
  return out;
}

// Leave-one-out predictions for every theta draw (rows of `draws`); the
// result is n x J with column j holding the predictions under draw j.
inline Eigen::MatrixXd loo_predictions(const gp::GpDesign& d, const Eigen::MatrixXd& draws,
                                       gp::ScaleEstimate scale = gp::ScaleEstimate::Reml,
                                       const gp::NuggetPolicy& policy = {}, unsigned jobs = 1) {
  if (d.n() < 3) throw std::invalid_argument("loo_predictions: need at least three observations");
  Eigen::MatrixXd out(d.n(), draws.rows());
  parallel_for(static_cast<std::size_t>(draws.rows()), jobs, [&](std::size_t j) {
    const Eigen::VectorXd theta = draws.row(static_cast<Eigen::Index>(j)).transpose();
    for (Eigen::Index i = 0; i < d.n(); ++i)
      out(i, static_cast<Eigen::Index>(j)) = loo_predict(d, i, theta, scale, policy).z_hat;
  });
  return out;
}

struct PredictionDiagnostics {
  double correlation = 0.0;
  double signal_to_noise = 0.0;  // var(predicted) / var(observed - predicted)
};

inline PredictionDiagnostics diagnostics(const Eigen::VectorXd& observed, const Eigen::VectorXd& predicted) {
  const std::span<const double> o(observed.data(), static_cast<std::size_t>(observed.size()));
  const std::span<const double> p(predicted.data(), static_cast<std::size_t>(predicted.size()));
  std::vector<double> resid(o.size());
  for (std::size_t i = 0; i < o.size(); ++i) resid[i] = o[i] - p[i];
  PredictionDiagnostics out;
  out.correlation = stats::correlation(o, p);
  out.signal_to_noise = stats::variance(p) / stats::variance(resid);
  return out;
}

}  // namespace pfsim::kriging
