#pragma once

// Box-constrained local minimization for small smooth objectives: projected
// BFGS with central finite-difference gradients, and a Nelder-Mead simplex
// used when BFGS cannot make progress. Non-finite objective values are
// treated as +inf.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

namespace pfsim::optimize {

using Objective = std::function<double(const Eigen::VectorXd&)>;

struct Box {
  double lower = -10.0;
  double upper = 10.0;

  Eigen::VectorXd clamp(const Eigen::VectorXd& x) const { return x.cwiseMax(lower).cwiseMin(upper); }
};

struct Result {
  Eigen::VectorXd x;
  double value = std::numeric_limits<double>::infinity();
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

struct Options {
  int max_iterations = 200;
  double gradient_tolerance = 1e-6;
  double value_tolerance = 1e-12;
  double gradient_step = 1e-6;
};

namespace detail {

inline double safe_eval(const Objective& f, const Eigen::VectorXd& x, int& count) {
  ++count;
  double v;
  try {
    v = f(x);
  } catch (const std::exception&) {
    return std::numeric_limits<double>::infinity();
  }
  return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
}

// Central differences, one-sided against an active bound.
inline Eigen::VectorXd gradient(const Objective& f, const Eigen::VectorXd& x, double fx, const Box& box,
                                double rel_step, int& count) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd p = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double h = rel_step * std::max(1.0, std::abs(x(k)));
    const bool up_ok = x(k) + h <= box.upper;
    const bool down_ok = x(k) - h >= box.lower;
    double fp = fx, fm = fx, denom = 0.0;
    if (up_ok) { p(k) = x(k) + h; fp = safe_eval(f, p, count); denom += h; }
    if (down_ok) { p(k) = x(k) - h; fm = safe_eval(f, p, count); denom += h; }
    p(k) = x(k);
    g(k) = (std::isfinite(fp) && std::isfinite(fm) && denom > 0.0) ? (fp - fm) / denom
                                                                    : std::numeric_limits<double>::quiet_NaN();
  }
  return g;
}

// Gradient with components that push into an active bound zeroed.
inline Eigen::VectorXd projected(const Eigen::VectorXd& g, const Eigen::VectorXd& x, const Box& box) {
  Eigen::VectorXd pg = g;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    if ((x(k) <= box.lower && g(k) > 0.0) || (x(k) >= box.upper && g(k) < 0.0)) pg(k) = 0.0;
  }
  return pg;
}

}  // namespace detail

inline Result bfgs(const Objective& f, const Eigen::VectorXd& start, const Box& box, const Options& opt = {}) {
  Result r;
  const auto d = start.size();
  Eigen::VectorXd x = box.clamp(start);
  double fx = detail::safe_eval(f, x, r.evaluations);
  r.x = x;
  r.value = fx;
  if (!std::isfinite(fx)) return r;

  Eigen::VectorXd g = detail::gradient(f, x, fx, box, opt.gradient_step, r.evaluations);
  if (!g.allFinite()) return r;
  Eigen::MatrixXd inv_h = Eigen::MatrixXd::Identity(d, d);

  for (r.iterations = 0; r.iterations < opt.max_iterations; ++r.iterations) {
    Eigen::VectorXd pg = detail::projected(g, x, box);
    if (pg.lpNorm<Eigen::Infinity>() < opt.gradient_tolerance) {
      r.converged = true;
      break;
    }
    Eigen::VectorXd dir = -(inv_h * pg);
    if (dir.dot(pg) >= 0.0) {
      inv_h.setIdentity();
      dir = -pg;
    }
    // Backtracking on the projected path.
    double step = 1.0;
    Eigen::VectorXd xn;
    double fn = std::numeric_limits<double>::infinity();
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls) {
      xn = box.clamp(x + step * dir);
      fn = detail::safe_eval(f, xn, r.evaluations);
      if (fn <= fx + 1e-4 * pg.dot(xn - x)) {
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;

    const Eigen::VectorXd gn = detail::gradient(f, xn, fn, box, opt.gradient_step, r.evaluations);
    if (!gn.allFinite()) {
      x = xn;
      fx = fn;
      break;
    }
    const Eigen::VectorXd s = xn - x;
    const Eigen::VectorXd y = gn - g;
    const double sy = s.dot(y);
    const double df = fx - fn;
    x = xn;
    g = gn;
    const double f_prev = fx;
    fx = fn;
    if (sy > 1e-12 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
      inv_h = (eye - rho * s * y.transpose()) * inv_h * (eye - rho * y * s.transpose()) + rho * s * s.transpose();
    }
    if (df >= 0.0 && df <= opt.value_tolerance * std::max(1.0, std::abs(f_prev)) && s.norm() < 1e-10) {
      r.converged = true;
      break;
    }
  }
  r.x = x;
  r.value = fx;
  if (!r.converged) {
    const Eigen::VectorXd pg = detail::projected(g, x, box);
    r.converged = g.allFinite() && pg.lpNorm<Eigen::Infinity>() < 1e2 * opt.gradient_tolerance;
  }
  return r;
}

inline Result nelder_mead(const Objective& f, const Eigen::VectorXd& start, const Box& box, int max_evaluations = 20000,
                          double tolerance = 1e-10) {
  Result r;
  const auto d = start.size();
  std::vector<Eigen::VectorXd> simplex(static_cast<std::size_t>(d + 1), box.clamp(start));
  std::vector<double> fv(static_cast<std::size_t>(d + 1));
  for (Eigen::Index k = 0; k < d; ++k) {
    auto& v = simplex[static_cast<std::size_t>(k + 1)];
    const double h = 0.5 * std::max(1.0, std::abs(v(k)));
    v(k) = (v(k) + h <= box.upper) ? v(k) + h : v(k) - h;
  }
  for (std::size_t i = 0; i < simplex.size(); ++i) fv[i] = detail::safe_eval(f, simplex[i], r.evaluations);

  std::vector<std::size_t> order(simplex.size());
  while (r.evaluations < max_evaluations) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
    const std::size_t best = order.front(), worst = order.back(), second = order[order.size() - 2];
    if (std::isfinite(fv[worst]) && std::abs(fv[worst] - fv[best]) <= tolerance * std::max(1.0, std::abs(fv[best]))) {
      r.converged = true;
      break;
    }
    ++r.iterations;
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(d);
    for (std::size_t i : order)
      if (i != worst) centroid += simplex[i];
    centroid /= static_cast<double>(d);

    auto trial = [&](double coef) { return box.clamp(centroid + coef * (simplex[worst] - centroid)); };
    const Eigen::VectorXd xr = trial(-1.0);
    const double fr = detail::safe_eval(f, xr, r.evaluations);
    if (fr < fv[best]) {
      const Eigen::VectorXd xe = trial(-2.0);
      const double fe = detail::safe_eval(f, xe, r.evaluations);
      if (fe < fr) { simplex[worst] = xe; fv[worst] = fe; } else { simplex[worst] = xr; fv[worst] = fr; }
    } else if (fr < fv[second]) {
      simplex[worst] = xr;
      fv[worst] = fr;
    } else {
      const Eigen::VectorXd xc = fr < fv[worst] ? trial(-0.5) : trial(0.5);
      const double fc = detail::safe_eval(f, xc, r.evaluations);
      if (fc < std::min(fr, fv[worst])) {
        simplex[worst] = xc;
        fv[worst] = fc;
      } else {
        for (std::size_t i : order) {
          if (i == best) continue;
          simplex[i] = box.clamp(simplex[best] + 0.5 * (simplex[i] - simplex[best]));
          fv[i] = detail::safe_eval(f, simplex[i], r.evaluations);
        }
      }
    }
  }
  const auto best = static_cast<std::size_t>(std::min_element(fv.begin(), fv.end()) - fv.begin());
  r.x = simplex[best];
  r.value = fv[best];
  return r;
}

// BFGS, then a simplex polish when BFGS fails to converge; the better result
// wins.
inline Result minimize(const Objective& f, const Eigen::VectorXd& start, const Box& box, const Options& opt = {}) {
  Result q = bfgs(f, start, box, opt);
  if (q.converged && std::isfinite(q.value)) return q;
  Result s = nelder_mead(f, std::isfinite(q.value) ? q.x : start, box);
  s.evaluations += q.evaluations;
  if (std::isfinite(s.value) && s.value < q.value) return s;
  q.evaluations = s.evaluations;
  return q;
}

}  // namespace pfsim::optimize
