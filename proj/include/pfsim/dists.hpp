#pragma once

// Input-variable distributions: Normal (location, variance) and two-parameter
// Weibull (scale, shape), their maximum-likelihood fits, priors and
// unnormalized posteriors.
//
// Weibull density convention:
//   f(x) = (shape/scale) (x/scale)^(shape-1) exp(-(x/scale)^shape),  x > 0.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/erf.hpp>

#include "pfsim/errors.hpp"
#include "pfsim/random.hpp"

namespace pfsim::dists {

enum class Family { Normal, Weibull };

inline const char* to_string(Family f) { return f == Family::Normal ? "Normal" : "Weibull"; }

inline Family family_from_string(const std::string& s) {
  if (s == "Normal" || s == "normal") return Family::Normal;
  if (s == "Weibull" || s == "weibull") return Family::Weibull;
  throw ConfigError("unknown distribution family '" + s + "'");
}

class InputVariableSpec {
 public:
  InputVariableSpec(std::string name, Family family, std::vector<double> observations)
      : name_(std::move(name)), family_(family), observations_(std::move(observations)) {
    if (observations_.empty()) throw std::invalid_argument(name_ + ": no observations");
    for (double x : observations_) {
      if (!std::isfinite(x)) throw std::invalid_argument(name_ + ": non-finite observation");
      if (family_ == Family::Weibull && x <= 0.0)
        throw std::invalid_argument(name_ + ": Weibull observations must be strictly positive");
    }
  }

  const std::string& name() const { return name_; }
  Family family() const { return family_; }
  const std::vector<double>& observations() const { return observations_; }

 private:
  std::string name_;
  Family family_;
  std::vector<double> observations_;
};

// (mu, variance) for Normal, (scale, shape) for Weibull.
class InputParams {
 public:
  static InputParams normal(double mu, double variance) { return {Family::Normal, mu, variance}; }
  static InputParams weibull(double scale, double shape) { return {Family::Weibull, scale, shape}; }
  static InputParams from_pair(Family f, double a, double b) { return {f, a, b}; }

  Family family() const { return family_; }
  double first() const { return v_[0]; }
  double second() const { return v_[1]; }

  double mu() const { return v_[0]; }
  double variance() const { return v_[1]; }
  double scale() const { return v_[0]; }
  double shape() const { return v_[1]; }

  bool valid() const {
    if (!std::isfinite(v_[0]) || !std::isfinite(v_[1])) return false;
    if (family_ == Family::Normal) return v_[1] > 0.0;
    return v_[0] > 0.0 && v_[1] > 0.0;
  }

  void require_valid() const {
    if (!valid()) throw std::invalid_argument("invalid distribution parameters");
  }

  // Parameter names as used in chain files.
  std::array<const char*, 2> names() const {
    if (family_ == Family::Normal) return {"mu", "sigma_sq"};
    return {"alpha", "beta"};
  }

 private:
  InputParams(Family f, double a, double b) : family_(f), v_{a, b} {}
  Family family_;
  std::array<double, 2> v_;
};

inline double log_density(double x, const InputParams& p) {
  p.require_valid();
  if (p.family() == Family::Normal) {
    const double d = x - p.mu();
    return -0.5 * std::log(2.0 * std::numbers::pi * p.variance()) - 0.5 * d * d / p.variance();
  }
  if (!(x > 0.0)) throw std::domain_error("Weibull density evaluated outside x > 0");
  const double a = p.scale(), b = p.shape();
  const double lr = std::log(x / a);
  return std::log(b / a) + (b - 1.0) * lr - std::exp(b * lr);
}

inline double quantile(const InputParams& p, double u) {
  p.require_valid();
  if (!(u > 0.0 && u < 1.0)) throw std::domain_error("quantile probability must lie in (0,1)");
  if (p.family() == Family::Normal)
    return p.mu() - std::sqrt(2.0 * p.variance()) * boost::math::erfc_inv(2.0 * u);
  return p.scale() * std::pow(-std::log1p(-u), 1.0 / p.shape());
}

inline double distribution_mean(const InputParams& p) {
  if (p.family() == Family::Normal) return p.mu();
  return p.scale() * std::tgamma(1.0 + 1.0 / p.shape());
}

inline double distribution_variance(const InputParams& p) {
  if (p.family() == Family::Normal) return p.variance();
  const double g1 = std::tgamma(1.0 + 1.0 / p.shape());
  const double g2 = std::tgamma(1.0 + 2.0 / p.shape());
  return p.scale() * p.scale() * (g2 - g1 * g1);
}

// Weibull by inverse CDF on U in (0,1): x = scale (-log U)^(1/shape).
inline double weibull_from_uniform(double scale, double shape, double u) {
  return scale * std::pow(-std::log(u), 1.0 / shape);
}

inline double sample(const InputParams& p, Rng& rng) {
  if (p.family() == Family::Normal) return p.mu() + std::sqrt(p.variance()) * standard_normal(rng);
  return weibull_from_uniform(p.scale(), p.shape(), uniform_open(rng));
}

// ---------------------------------------------------------------------------
// Maximum likelihood
// ---------------------------------------------------------------------------

namespace detail {

struct WeibullSums {
  double s0 = 0, s1 = 0, s2 = 0;  // sum y^b, sum y^b ln y, sum y^b ln^2 y
};

inline WeibullSums weibull_sums(const std::vector<double>& logy, double b) {
  WeibullSums s;
  for (double l : logy) {
    const double w = std::exp(b * l);
    s.s0 += w;
    s.s1 += w * l;
    s.s2 += w * l * l;
  }
  return s;
}

// Mean gradient of the Weibull log-likelihood with respect to (scale, shape),
// observations already divided by a reference value.
inline std::array<double, 2> weibull_mean_gradient(const std::vector<double>& logy, double a, double b) {
  double ga = 0.0, gb = 0.0;
  const double la = std::log(a);
  for (double l : logy) {
    const double lr = l - la;
    const double u = std::exp(b * lr);
    ga += (b / a) * (u - 1.0);
    gb += 1.0 / b + lr - u * lr;
  }
  const auto n = static_cast<double>(logy.size());
  return {ga / n, gb / n};
}

}  // namespace detail

inline constexpr double kWeibullShapeLower = 1e-3;
inline constexpr double kWeibullShapeUpper = 1e3;
inline constexpr double kMleGradientTolerance = 1e-8;

// Normal: sample mean and the 1/n variance. Weibull: profile likelihood in
// the shape solved by safeguarded Newton on [1e-3, 1e3]; the scale follows in
// closed form. Observations are divided by their maximum first so that
// y^shape never overflows; the returned gradient check is on the mean
// per-observation log-likelihood in those units.
inline InputParams mle_fit(const InputVariableSpec& spec) {
  const auto& x = spec.observations();
  const auto n = static_cast<double>(x.size());
  if (x.size() < 2) throw std::invalid_argument(spec.name() + ": MLE needs at least two observations");

  if (spec.family() == Family::Normal) {
    double m = 0.0;
    for (double v : x) m += v;
    m /= n;
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    if (ss <= 0.0) throw DegenerateDataError(spec.name() + ": all observations equal");
    return InputParams::normal(m, ss / n);
  }

  const double xmax = *std::max_element(x.begin(), x.end());
  const double xmin = *std::min_element(x.begin(), x.end());
  if (xmin == xmax) throw DegenerateDataError(spec.name() + ": all observations equal, Weibull shape MLE diverges");

  std::vector<double> logy(x.size());
  double mean_log = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    logy[i] = std::log(x[i] / xmax);
    mean_log += logy[i];
  }
  mean_log /= n;

  // h(b) = s1/s0 - 1/b - mean(ln y) is increasing in b; its root is the MLE.
  auto h = [&](double b) {
    const auto s = detail::weibull_sums(logy, b);
    return s.s1 / s.s0 - 1.0 / b - mean_log;
  };
  auto dh = [&](double b) {
    const auto s = detail::weibull_sums(logy, b);
    return (s.s2 * s.s0 - s.s1 * s.s1) / (s.s0 * s.s0) + 1.0 / (b * b);
  };

  double lo = kWeibullShapeLower, hi = kWeibullShapeUpper;
  if (h(lo) > 0.0 || h(hi) < 0.0)
    throw NumericalError(spec.name() + ": Weibull shape MLE outside [1e-3, 1e3]");

  double b = 1.0;
  bool converged = false;
  for (int it = 0; it < 200; ++it) {
    const double hb = h(b);
    if (hb > 0.0) hi = b; else lo = b;
    double next = b - hb / dh(b);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - b) <= 1e-15 * b) {
      b = next;
      converged = true;
      break;
    }
    b = next;
  }
  if (!converged) throw NumericalError(spec.name() + ": Weibull MLE did not converge");

  const auto s = detail::weibull_sums(logy, b);
  const double a = std::pow(s.s0 / n, 1.0 / b);
  const auto g = detail::weibull_mean_gradient(logy, a, b);
  if (std::hypot(g[0], g[1]) > kMleGradientTolerance)
    throw NumericalError(spec.name() + ": Weibull MLE gradient above tolerance");
  return InputParams::weibull(a * xmax, b);
}

inline double log_likelihood(const InputParams& p, const InputVariableSpec& spec) {
  double ll = 0.0;
  for (double x : spec.observations()) ll += log_density(x, p);
  return ll;
}

// Per-observation Fisher information of the Weibull in (scale, shape).
inline Eigen::Matrix2d weibull_fisher_information(double scale, double shape) {
  constexpr double euler = std::numbers::egamma;
  constexpr double pi2_6 = std::numbers::pi * std::numbers::pi / 6.0;
  Eigen::Matrix2d info;
  info(0, 0) = shape * shape / (scale * scale);
  info(0, 1) = info(1, 0) = -(1.0 - euler) / scale;
  info(1, 1) = ((1.0 - euler) * (1.0 - euler) + pi2_6) / (shape * shape);
  return info;
}

// ---------------------------------------------------------------------------
// Priors
// ---------------------------------------------------------------------------

enum class PriorKind { Flat, Jeffreys, Conjugate };

// Joint: sqrt det of the full Fisher matrix (sigma^-3 for the Normal).
// Independence: product over parameters (sigma^-2). Only the Normal differs;
// the Weibull determinant already factorizes.
enum class JeffreysForm { Joint, Independence };

inline const char* to_string(PriorKind k) {
  switch (k) {
    case PriorKind::Flat: return "flat";
    case PriorKind::Jeffreys: return "jeffreys";
    case PriorKind::Conjugate: return "conjugate";
  }
  return "?";
}

inline PriorKind prior_kind_from_string(const std::string& s) {
  if (s == "flat") return PriorKind::Flat;
  if (s == "jeffreys") return PriorKind::Jeffreys;
  if (s == "conjugate") return PriorKind::Conjugate;
  throw ConfigError("unknown prior kind '" + s + "'");
}

// sigma^2 ~ InvGamma(a, b), mu | sigma^2 ~ N(m, sigma^2 / kappa).
struct NormalInverseGamma {
  double m = 0.0;
  double kappa = 1.0;
  double a = 2.0;
  double b = 1.0;
};

// Known shape; InvGamma(a, b) on lambda = scale^shape.
struct WeibullScaleConjugate {
  double shape = 1.0;
  double a = 2.0;
  double b = 1.0;
};

struct PriorSpec {
  PriorKind kind = PriorKind::Flat;
  JeffreysForm jeffreys_form = JeffreysForm::Joint;
  std::optional<NormalInverseGamma> normal_conjugate;
  std::optional<WeibullScaleConjugate> weibull_conjugate;

  static PriorSpec flat() { return {}; }
  static PriorSpec jeffreys(JeffreysForm form = JeffreysForm::Joint) {
    PriorSpec p;
    p.kind = PriorKind::Jeffreys;
    p.jeffreys_form = form;
    return p;
  }
  static PriorSpec conjugate(NormalInverseGamma nig) {
    if (!(nig.kappa > 0 && nig.a > 0 && nig.b > 0) || !std::isfinite(nig.m))
      throw std::invalid_argument("Normal-Inverse-Gamma hyperparameters must be positive");
    PriorSpec p;
    p.kind = PriorKind::Conjugate;
    p.normal_conjugate = nig;
    return p;
  }
  static PriorSpec conjugate(WeibullScaleConjugate w) {
    if (!(w.shape > 0 && w.a > 0 && w.b > 0))
      throw std::invalid_argument("Inverse-Gamma hyperparameters must be positive");
    PriorSpec p;
    p.kind = PriorKind::Conjugate;
    p.weibull_conjugate = w;
    return p;
  }
};

// Weakly informative data-centred defaults. Normal: NIG(m = mean, kappa = 1,
// a = 2, b = sample variance). Weibull: shape fixed at its MLE, InvGamma(2,
// mean of x^shape) on scale^shape.
inline PriorSpec default_conjugate(const InputVariableSpec& spec) {
  const auto& x = spec.observations();
  const auto n = static_cast<double>(x.size());
  if (spec.family() == Family::Normal) {
    double m = 0.0;
    for (double v : x) m += v;
    m /= n;
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    return PriorSpec::conjugate(NormalInverseGamma{m, 1.0, 2.0, ss / (n - 1.0)});
  }
  const double shape = mle_fit(spec).shape();
  double b = 0.0;
  for (double v : x) b += std::pow(v, shape);
  return PriorSpec::conjugate(WeibullScaleConjugate{shape, 2.0, b / n});
}

inline double log_inverse_gamma(double v, double a, double b) {
  return a * std::log(b) - std::lgamma(a) - (a + 1.0) * std::log(v) - b / v;
}

// log prior up to an additive constant. Flat is 0; Jeffreys-Normal is
// -3 log sigma (joint) or -2 log sigma (independence); Jeffreys-Weibull is
// exactly 1/2 log det of the Fisher information, i.e. log(pi/sqrt 6) - log scale.
// The conjugate Weibull density is expressed on the scale (the sampled
// coordinate), so it carries the Jacobian of lambda = scale^shape.
inline double log_prior(const InputParams& p, const PriorSpec& prior) {
  p.require_valid();
  switch (prior.kind) {
    case PriorKind::Flat:
      return 0.0;
    case PriorKind::Jeffreys:
      if (p.family() == Family::Normal) {
        const double log_sigma = 0.5 * std::log(p.variance());
        return (prior.jeffreys_form == JeffreysForm::Joint ? -3.0 : -2.0) * log_sigma;
      }
      return std::log(std::numbers::pi / std::sqrt(6.0)) - std::log(p.scale());
    case PriorKind::Conjugate:
      if (p.family() == Family::Normal) {
        if (!prior.normal_conjugate) throw std::invalid_argument("conjugate prior lacks Normal hyperparameters");
        const auto& h = *prior.normal_conjugate;
        const double v = p.variance() / h.kappa;
        const double d = p.mu() - h.m;
        return -0.5 * std::log(2.0 * std::numbers::pi * v) - 0.5 * d * d / v +
               log_inverse_gamma(p.variance(), h.a, h.b);
      } else {
        if (!prior.weibull_conjugate) throw std::invalid_argument("conjugate prior lacks Weibull hyperparameters");
        const auto& h = *prior.weibull_conjugate;
        if (p.shape() != h.shape)
          throw std::invalid_argument("conjugate Weibull prior requires the shape fixed at its known value");
        const double lambda = std::pow(p.scale(), h.shape);
        return log_inverse_gamma(lambda, h.a, h.b) + std::log(h.shape) + (h.shape - 1.0) * std::log(p.scale());
      }
  }
  return 0.0;
}

inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();

// log prior + log likelihood; -inf when the parameters leave the support.
inline double log_posterior_unnorm(const InputParams& p, const InputVariableSpec& spec, const PriorSpec& prior) {
  if (!p.valid()) return kLogZero;
  const double lp = log_prior(p, prior) + log_likelihood(p, spec);
  return std::isnan(lp) ? kLogZero : lp;
}

// The sampler's view of one variable's posterior: the chain coordinates, the
// map back to parameters, and the log target. The conjugate Weibull samples
// the scale only, with the shape pinned.
struct PosteriorTarget {
  Family family;
  int dim = 2;
  std::optional<double> fixed_shape;
  std::function<double(const Eigen::VectorXd&)> log_target;

  InputParams to_params(const Eigen::VectorXd& v) const {
    if (fixed_shape) return InputParams::weibull(v(0), *fixed_shape);
    return InputParams::from_pair(family, v(0), v(1));
  }
  Eigen::VectorXd from_params(const InputParams& p) const {
    if (fixed_shape) return Eigen::VectorXd::Constant(1, p.scale());
    return Eigen::Vector2d(p.first(), p.second());
  }
};

inline PosteriorTarget make_posterior_target(const InputVariableSpec& spec, const PriorSpec& prior) {
  PosteriorTarget t;
  t.family = spec.family();
  if (spec.family() == Family::Weibull && prior.kind == PriorKind::Conjugate) {
    if (!prior.weibull_conjugate) throw std::invalid_argument("conjugate prior lacks Weibull hyperparameters");
    t.dim = 1;
    t.fixed_shape = prior.weibull_conjugate->shape;
  }
  t.log_target = [spec, prior, t_copy = t](const Eigen::VectorXd& v) {
    return log_posterior_unnorm(t_copy.to_params(v), spec, prior);
  };
  return t;
}

}  // namespace pfsim::dists
