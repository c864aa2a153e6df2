#include <cmath>

#include <gtest/gtest.h>

#include "pfsim/mcmc.hpp"
#include "pfsim/stats.hpp"

using namespace pfsim;
using namespace pfsim::mcmc;

namespace {

AmSettings small_settings() { return {20000, 2000, 10, 10, 1e-4, 0.0}; }

LogTarget correlated_gaussian() {
  // N(mean, C) with C = [[1, 0.8], [0.8, 1]] and mean (1, -2)
  return [](const Eigen::VectorXd& x) {
    Eigen::Matrix2d c;
    c << 1.0, 0.8, 0.8, 1.0;
    const Eigen::Vector2d d = x - Eigen::Vector2d(1.0, -2.0);
    return -0.5 * d.dot(c.inverse() * d);
  };
}

PosteriorChain white_noise(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  PosteriorChain c;
  c.draws.resize(static_cast<Eigen::Index>(n), 1);
  for (std::size_t i = 0; i < n; ++i) c.draws(static_cast<Eigen::Index>(i), 0) = standard_normal(rng);
  return c;
}

}  // namespace

TEST(Mcmc, SettingsValidation) {
  AmSettings s;
  EXPECT_NO_THROW(s.validate());
  s.thin = 7;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = {};
  s.non_adaptive = s.iterations;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_DOUBLE_EQ(AmSettings{}.scale_for(2), 2.4 * 2.4 / 2.0);
}

TEST(Mcmc, ChainShapeAndThinning) {
  Rng rng(1);
  const auto c = am_sample(correlated_gaussian(), Eigen::Vector2d(0, 0), Eigen::Matrix2d::Identity(), small_settings(), rng);
  EXPECT_EQ(c.rows(), 2000u);
  EXPECT_EQ(c.dim(), 2);
  EXPECT_EQ(c.iteration_of(0), 10u);
  EXPECT_GT(c.acceptance_rate, 0.1);
  EXPECT_LT(c.acceptance_rate, 0.7);
}

TEST(Mcmc, RecoversGaussianMoments) {
  Rng rng(2);
  AmSettings s{100000, 10000, 10, 10, 1e-4, 0.0};
  const auto c = remove_burn_in(am_sample(correlated_gaussian(), Eigen::Vector2d(3, 3), Eigen::Matrix2d::Identity(), s, rng), 0.2);
  const Eigen::RowVectorXd m = c.draws.colwise().mean();
  EXPECT_NEAR(m(0), 1.0, 0.1);
  EXPECT_NEAR(m(1), -2.0, 0.1);
  const Eigen::MatrixXd centered = c.draws.rowwise() - m;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(c.rows() - 1);
  EXPECT_NEAR(cov(0, 0), 1.0, 0.15);
  EXPECT_NEAR(cov(0, 1), 0.8, 0.15);
}

TEST(Mcmc, SameSeedSameChain) {
  Rng a(5), b(5);
  const auto ca = am_sample(correlated_gaussian(), Eigen::Vector2d(0, 0), Eigen::Matrix2d::Identity(), small_settings(), a);
  const auto cb = am_sample(correlated_gaussian(), Eigen::Vector2d(0, 0), Eigen::Matrix2d::Identity(), small_settings(), b);
  EXPECT_TRUE(ca.draws == cb.draws);
}

TEST(Mcmc, RejectsInfeasibleStart) {
  Rng rng(1);
  auto lt = [](const Eigen::VectorXd& x) { return x(0) > 0 ? 0.0 : -std::numeric_limits<double>::infinity(); };
  EXPECT_ANY_THROW(am_sample(lt, Eigen::VectorXd::Constant(1, -1.0), Eigen::MatrixXd::Identity(1, 1), small_settings(), rng));
}

TEST(Mcmc, StaysInSupport) {
  Rng rng(4);
  auto lt = [](const Eigen::VectorXd& x) { return x(0) > 0 ? -x(0) : -std::numeric_limits<double>::infinity(); };
  const auto c = am_sample(lt, Eigen::VectorXd::Constant(1, 1.0), Eigen::MatrixXd::Identity(1, 1), small_settings(), rng);
  EXPECT_GT(c.draws.minCoeff(), 0.0);
}

TEST(Mcmc, BurnInUsesFloor) {
  PosteriorChain c = white_noise(10, 1);
  c.thin = 5;
  const auto b = remove_burn_in(c, 0.25);
  EXPECT_EQ(b.rows(), 8u);
  EXPECT_EQ(b.burned_rows, 2u);
  EXPECT_EQ(b.draws(0, 0), c.draws(2, 0));
  EXPECT_EQ(b.iteration_of(0), 15u);
  EXPECT_EQ(remove_burn_in(c, 0.0).rows(), 10u);
  EXPECT_THROW(remove_burn_in(c, 1.0), std::invalid_argument);
}

TEST(Mcmc, GewekeOnStationaryAndDriftingChains) {
  auto c = white_noise(5000, 7);
  EXPECT_LT(std::abs(geweke(c)[0]), 4.0);
  for (Eigen::Index i = 0; i < c.draws.rows(); ++i) c.draws(i, 0) += 1e-3 * static_cast<double>(i);
  EXPECT_GT(std::abs(geweke(c)[0]), 10.0);
}

TEST(Mcmc, GewekeErrors) {
  EXPECT_THROW(geweke(white_noise(50, 1)), std::invalid_argument);
  PosteriorChain flat;
  flat.draws = Eigen::MatrixXd::Constant(1000, 1, 2.0);
  EXPECT_THROW(geweke(flat), NumericalError);
}

TEST(Mcmc, SpectralGewekeMatchesSampleVarianceOnWhiteNoise) {
  const auto c = white_noise(20000, 9);
  const double a = geweke(c, 0.1, 0.5, GewekeVariance::SampleVariance)[0];
  const double b = geweke(c, 0.1, 0.5, GewekeVariance::Spectral)[0];
  EXPECT_NEAR(a, b, 0.25 * std::max(1.0, std::abs(a)));
}

TEST(Mcmc, RunningAverageAndTrace) {
  PosteriorChain c;
  c.draws = (Eigen::MatrixXd(3, 1) << 1.0, 2.0, 6.0).finished();
  c.thin = 100;
  c.burned_rows = 2;
  const auto r = running_average(c);
  EXPECT_DOUBLE_EQ(r(2, 0), 3.0);
  const auto t = trace_export(c);
  EXPECT_DOUBLE_EQ(t(0, 0), 300.0);
  EXPECT_DOUBLE_EQ(t(2, 1), 6.0);
}

TEST(Mcmc, DefaultInitialCovarianceIsInverseHessian) {
  auto lt = [](const Eigen::VectorXd& x) { return -0.5 * (x(0) * x(0) / 4.0 + x(1) * x(1) / 0.25); };
  const auto cov = default_initial_covariance(lt, Eigen::Vector2d(0.3, -0.2));
  EXPECT_NEAR(cov(0, 0), 4.0, 1e-4);
  EXPECT_NEAR(cov(1, 1), 0.25, 1e-5);
  EXPECT_NEAR(cov(0, 1), 0.0, 1e-5);
}
