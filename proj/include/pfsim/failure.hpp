#pragma once

// Latin hypercube designs and the nested simulation of the exceedance
// probability P_f = P(z > z_crit).
//
// Outer iteration i (1..N) picks one retained row uniformly at random from
// every input-parameter chain and from the theta chain (a fixed theta is a
// one-row chain), factorizes the surrogate once, then draws M trial inputs
// s0 and averages 1 - Phi((z_crit - z0_hat) / S0). The N averages are the
// posterior sample of P_f.
//
// Each outer iteration owns the stream derive_seed(seed, "simulate-pf", {i}),
// consumed in the order: one index per input chain, one theta index, then
// M x K input variates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "pfsim/dists.hpp"
#include "pfsim/gp.hpp"
#include "pfsim/kriging.hpp"
#include "pfsim/parallel.hpp"
#include "pfsim/random.hpp"
#include "pfsim/stats.hpp"

namespace pfsim::failure {

struct LhsDesign {
  Eigen::MatrixXd U;  // stratified uniforms in (0, 1)
  Eigen::MatrixXd S;  // U pushed through each column's inverse CDF
};

inline LhsDesign lhs_sample(std::size_t n, const std::vector<dists::InputParams>& marginals, Rng& rng) {
  if (n == 0) throw std::invalid_argument("lhs_sample: n must be positive");
  const auto K = static_cast<Eigen::Index>(marginals.size());
  const auto rows = static_cast<Eigen::Index>(n);
  LhsDesign out{Eigen::MatrixXd(rows, K), Eigen::MatrixXd(rows, K)};
  std::vector<std::size_t> perm(n);
  for (Eigen::Index k = 0; k < K; ++k) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double u = (static_cast<double>(perm[static_cast<std::size_t>(i)]) + uniform_open(rng)) / static_cast<double>(n);
      out.U(i, k) = u;
      out.S(i, k) = dists::quantile(marginals[static_cast<std::size_t>(k)], u);
    }
  }
  return out;
}

// Exceedance of z_crit by a Gaussian with mean z_hat and sd s0; the indicator
// when s0 = 0.
inline double exceedance(double z_hat, double s0, double z_crit) {
  if (s0 > 0.0) return stats::normal_upper_tail((z_crit - z_hat) / s0);
  return z_hat > z_crit ? 1.0 : 0.0;
}

// Retained posterior draws for one input variable: rows of (mu, sigma^2) or
// (scale, shape).
struct InputPosterior {
  dists::Family family = dists::Family::Normal;
  Eigen::MatrixXd draws;

  static InputPosterior point(const dists::InputParams& p) {
    return {p.family(), Eigen::RowVector2d(p.first(), p.second())};
  }
};

struct PfOptions {
  double z_crit = 3.0;
  std::size_t N = 2000;
  std::size_t M = 1000;
  gp::ScaleEstimate scale = gp::ScaleEstimate::Reml;
  gp::NuggetPolicy nugget{};
  std::uint64_t seed = 0;
  unsigned jobs = 1;
};

struct FailurePosterior {
  std::vector<double> p;      // N draws of the exceedance probability
  std::vector<double> mc_se;  // within-iteration Monte Carlo standard error
  double z_crit = 0.0;
  std::size_t N = 0, M = 0;
  std::size_t unhealthy_predictions = 0;  // pre-clamp MSPE below -1e-8
};

// Constant-mean surrogate only (x0 = 1).
inline FailurePosterior simulate_pf(const std::vector<InputPosterior>& inputs, const Eigen::MatrixXd& theta_draws,
                                    const gp::GpDesign& design, const PfOptions& opt) {
  if (opt.N == 0 || opt.M == 0) throw std::invalid_argument("simulate_pf: N and M must be positive");
  if (static_cast<Eigen::Index>(inputs.size()) != design.K())
    throw std::invalid_argument("simulate_pf: number of input posteriors differs from the design dimension");
  if (theta_draws.rows() == 0 || theta_draws.cols() != design.K())
    throw std::invalid_argument("simulate_pf: theta draws are empty or have the wrong width");
  if (design.q() != 1 || (design.X.array() != 1.0).any())
    throw std::invalid_argument("simulate_pf: requires a constant-mean surrogate");
  for (const auto& in : inputs)
    if (in.draws.rows() == 0 || in.draws.cols() != 2) throw std::invalid_argument("simulate_pf: empty input chain");

  FailurePosterior out;
  out.z_crit = opt.z_crit;
  out.N = opt.N;
  out.M = opt.M;
  out.p.assign(opt.N, 0.0);
  out.mc_se.assign(opt.N, 0.0);
  std::vector<std::size_t> unhealthy(opt.N, 0);
  const auto K = design.K();
  const Eigen::VectorXd x0 = Eigen::VectorXd::Ones(1);

  parallel_for(opt.N, opt.jobs, [&](std::size_t i) {
    Rng rng = make_rng(opt.seed, "simulate-pf", {static_cast<std::uint64_t>(i)});
    std::vector<dists::InputParams> params;
    params.reserve(inputs.size());
    for (const auto& in : inputs) {
      const auto r = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(in.draws.rows())));
      params.push_back(dists::InputParams::from_pair(in.family, in.draws(r, 0), in.draws(r, 1)));
    }
    const auto tr = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(theta_draws.rows())));
    const kriging::Predictor pred(design, theta_draws.row(tr).transpose(), opt.scale, opt.nugget);

    Eigen::VectorXd s0(K);
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t j = 0; j < opt.M; ++j) {
      for (Eigen::Index k = 0; k < K; ++k) s0(k) = dists::sample(params[static_cast<std::size_t>(k)], rng);
      const auto pr = pred.predict(s0, x0);
      if (!pr.numerically_healthy()) ++unhealthy[i];
      const double e = exceedance(pr.z_hat, pr.rmspe, opt.z_crit);
      sum += e;
      sum_sq += e * e;
    }
    const auto m = static_cast<double>(opt.M);
    out.p[i] = sum / m;
    out.mc_se[i] = opt.M > 1 ? std::sqrt(std::max(0.0, (sum_sq - sum * sum / m) / (m - 1.0)) / m) : 0.0;
  });
  out.unhealthy_predictions = std::accumulate(unhealthy.begin(), unhealthy.end(), std::size_t{0});
  return out;
}

// Fixed theta: identical to a one-row theta chain.
inline FailurePosterior simulate_pf(const std::vector<InputPosterior>& inputs, const Eigen::VectorXd& theta,
                                    const gp::GpDesign& design, const PfOptions& opt) {
  return simulate_pf(inputs, Eigen::MatrixXd(theta.transpose()), design, opt);
}

inline constexpr double kTargetPf = 1e-6;

struct PfSummary {
  double mean = 0.0;
  double median = 0.0;
  double lower = 0.0;  // 2.5% quantile
  double upper = 0.0;  // 97.5% quantile
  double target = kTargetPf;
  bool median_meets_target = false;  // median <= target
  bool mean_meets_target = false;

  double per_million(double v) const { return v * 1e6; }
};

inline PfSummary summarize(const FailurePosterior& post) {
  if (post.p.empty()) throw std::invalid_argument("summarize: empty posterior");
  PfSummary s;
  s.mean = stats::mean(post.p);
  s.median = stats::quantile(post.p, 0.5);
  s.lower = stats::quantile(post.p, 0.025);
  s.upper = stats::quantile(post.p, 0.975);
  s.median_meets_target = s.median <= s.target;
  s.mean_meets_target = s.mean <= s.target;
  return s;
}

}  // namespace pfsim::failure
