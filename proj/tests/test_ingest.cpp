#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "pfsim/errors.hpp"
#include "pfsim/ingest.hpp"
#include "pfsim/stats.hpp"

using namespace pfsim;
using namespace pfsim::ingest;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("pfsim_ingest_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// Two variables, three runs, outputs in simulator units.
fs::path write_small_dataset(const fs::path& dir) {
  write_text(dir / "obs.csv", "variable,value\nstrength,10.5\nstrength,11.0\nstrength,9.8\n");
  write_text(dir / "mod.csv", "variable,value\nmodulus,200\nmodulus,210\nmodulus,190\nmodulus,205\n");
  write_text(dir / "design.csv", "strength,modulus\n10,200\n10.5,195\n11,207\n");
  write_text(dir / "outputs.csv", "peak_accel_g\n2474\n2600\n2749\n");
  write_text(dir / "manifest.json", R"({
    "rescale_factor": 1000,
    "observations": "obs.csv",
    "design": "design.csv",
    "outputs": "outputs.csv",
    "variables": [
      {"name": "strength", "family": "normal"},
      {"name": "modulus", "family": "weibull", "file": "mod.csv"}
    ]
  })");
  return dir / "manifest.json";
}

}  // namespace

TEST(Ingest, LoadsManifestAndRescales) {
  const auto ds = load_dataset(write_small_dataset(fresh_dir("load")));
  ASSERT_EQ(ds.variables.size(), 2u);
  EXPECT_EQ(ds.variables[1].family(), dists::Family::Weibull);
  EXPECT_EQ(ds.variables[1].observations().size(), 4u);
  EXPECT_EQ(ds.design.rows(), 3);
  EXPECT_DOUBLE_EQ(ds.outputs.minCoeff(), 2.474);
  EXPECT_DOUBLE_EQ(ds.outputs.maxCoeff(), 2.749);
  EXPECT_TRUE(ds.warnings.empty());
}

TEST(Ingest, RoundTripIsBitExact) {
  const auto ds = synth_study(7, 12, 3, small_p_preset());
  const auto dir = fresh_dir("roundtrip");
  write_dataset(dir, ds);
  const auto back = load_dataset(dir / "manifest.json");
  ASSERT_EQ(back.variables.size(), ds.variables.size());
  for (std::size_t k = 0; k < ds.variables.size(); ++k) {
    EXPECT_EQ(back.variables[k].name(), ds.variables[k].name());
    EXPECT_EQ(back.variables[k].family(), ds.variables[k].family());
    EXPECT_EQ(back.variables[k].observations(), ds.variables[k].observations());
  }
  EXPECT_TRUE(back.design == ds.design);
  EXPECT_TRUE(back.outputs_raw == ds.outputs_raw);
  EXPECT_TRUE(back.outputs == ds.outputs);
}

TEST(Ingest, MissingFileIsAConfigError) {
  const auto dir = fresh_dir("missing");
  const auto m = write_small_dataset(dir);
  fs::remove(dir / "mod.csv");
  try {
    load_dataset(m);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("mod.csv"), std::string::npos);
  }
  EXPECT_THROW(load_dataset(dir / "nope.json"), ConfigError);
}

TEST(Ingest, RowMismatchNamesBothCounts) {
  const auto dir = fresh_dir("mismatch");
  const auto m = write_small_dataset(dir);
  write_text(dir / "outputs.csv", "peak_accel_g\n2474\n2600\n");
  try {
    load_dataset(m);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find('3'), std::string::npos);
    EXPECT_NE(msg.find('2'), std::string::npos);
  }
}

TEST(Ingest, WrongColumnsAreRejected) {
  const auto dir = fresh_dir("columns");
  const auto m = write_small_dataset(dir);
  write_text(dir / "design.csv", "modulus,strength\n200,10\n195,10.5\n207,11\n");
  EXPECT_THROW(load_dataset(m), ConfigError);
  write_small_dataset(dir);
  write_text(dir / "outputs.csv", "accel\n1\n2\n3\n");
  EXPECT_THROW(load_dataset(m), ConfigError);
  write_small_dataset(dir);
  write_text(dir / "obs.csv", "variable,value\nstrength,-1\nstrength,abc\n");
  EXPECT_THROW(load_dataset(m), ConfigError);
}

TEST(Ingest, FlagsUnusualObservationCounts) {
  const auto dir = fresh_dir("counts");
  const auto m = write_small_dataset(dir);
  write_text(dir / "obs.csv", "variable,value\nstrength,10.5\nstrength,11.0\n");
  const auto ds = load_dataset(m);
  ASSERT_EQ(ds.warnings.size(), 1u);
  EXPECT_NE(ds.warnings[0].find("strength"), std::string::npos);
}

TEST(Ingest, SynthIsDeterministicWithTableShapes) {
  const auto cfg = table_preset();
  const auto a = synth_study(3, 25, 15, cfg);
  const auto b = synth_study(3, 25, 15, cfg);
  EXPECT_EQ(a.design.rows(), 25);
  EXPECT_EQ(a.design.cols(), 15);
  EXPECT_TRUE(a.design == b.design);
  EXPECT_TRUE(a.outputs_raw == b.outputs_raw);
  for (std::size_t k = 0; k < 15; ++k) EXPECT_EQ(a.variables[k].observations().size(), cfg.observations[k]);
  EXPECT_TRUE(a.warnings.empty());
  EXPECT_GT(a.outputs.minCoeff(), 2.3);
  EXPECT_LT(a.outputs.maxCoeff(), 3.0);
  EXPECT_FALSE(synth_study(4, 25, 15, cfg).design == a.design);
  EXPECT_THROW(synth_study(3, 25, 14, cfg), ConfigError);
}

TEST(Ingest, SimulatorAtMeansReturnsIntercept) {
  for (const auto& cfg : {small_p_preset(), table_preset()}) {
    Eigen::VectorXd s(static_cast<Eigen::Index>(cfg.K()));
    for (std::size_t k = 0; k < cfg.K(); ++k) s(static_cast<Eigen::Index>(k)) = dists::distribution_mean(cfg.marginals[k]);
    EXPECT_EQ(synth_simulator(s, cfg), cfg.intercept);
  }
}

// Linear simulator over Gaussian inputs: y ~ N(intercept, |linear|^2), so
// the exceedance is a single normal tail.
TEST(Ingest, LinearSimulatorExceedanceMatchesClosedForm) {
  SimulatorConfig cfg;
  cfg.marginals = {dists::InputParams::normal(10.0, 4.0), dists::InputParams::normal(-3.0, 1.0)};
  cfg.observations = {5, 5};
  cfg.intercept = 2700.0;
  cfg.linear = {120.0, 160.0};
  const double exact = stats::normal_upper_tail((3000.0 - 2700.0) / 200.0);
  const auto mc = direct_exceedance(cfg, 1u << 21, 9);
  EXPECT_NEAR(mc.p, exact, 4.0 * mc.se);
  EXPECT_EQ(mc.draws, 1u << 21);
}

TEST(Ingest, SmallPresetTruthIsReproduced) {
  // 1e8-draw reference: 9.504e-5 with standard error 9.75e-7
  const auto mc = direct_exceedance(small_p_preset(), 10000000, 12345);
  EXPECT_NEAR(mc.p, 9.504e-5, 4.0 * std::hypot(mc.se, 9.75e-7));
}

TEST(Ingest, PresetLookup) {
  EXPECT_EQ(preset("small-p").K(), 3u);
  EXPECT_EQ(preset("table").K(), 15u);
  EXPECT_THROW(preset("nope"), ConfigError);
  EXPECT_EQ(variable_name(0), "X0001");
  EXPECT_EQ(variable_name(14), "X0015");
}
