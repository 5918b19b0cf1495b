#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "gpabc/dataset.hpp"
#include "gpabc/integrators.hpp"
#include "gpabc/models.hpp"
#include "support/oracles.hpp"

using namespace gpabc;

namespace {

std::vector<double> uniform_grid(double t0, double t1, int n) {
  std::vector<double> g;
  for (int i = 0; i < n; ++i) g.push_back(t0 + (t1 - t0) * i / (n - 1));
  return g;
}

const RhsFn decay = [](std::span<const double> x, std::span<const double>, std::span<const double>,
                       std::span<double> d) { d[0] = -x[0]; };

// Sparse output so the step size is set by the tolerance rather than the grid.
std::vector<double> coarse_grid_for(const ModelSpec& m) {
  if (m.name == "lotka-volterra") return uniform_grid(0, 10, 5);
  if (m.name == "hes1") return uniform_grid(0, 300, 7);
  return uniform_grid(0, 100, 5);
}

}  // namespace

TEST(Models, LotkaVolterraRhs) {
  const auto m = lotka_volterra();
  const std::vector<double> x{1.0, 0.5};
  const auto d = rhs_eval(m, x, x, m.true_params);
  EXPECT_DOUBLE_EQ(d[0], 0.5);
  EXPECT_DOUBLE_EQ(d[1], 0.0);
}

TEST(Models, Hes1Rhs) {
  const auto m = hes1();
  const std::vector<double> x{3.0, 3.0};
  const auto d = rhs_eval(m, x, x, m.true_params);
  EXPECT_NEAR(d[0], 1.0 / (1.0 + std::pow(0.03, 5)) - 0.09, 1e-15);
  EXPECT_NEAR(d[0], 0.90999997570, 1e-10);
  EXPECT_NEAR(d[1], 2.91, 1e-15);
  // Only the delayed protein enters the Hill term.
  const std::vector<double> lag{3.0, 100.0};
  EXPECT_NEAR(rhs_eval(m, x, lag, m.true_params)[0], 0.5 - 0.09, 1e-15);
}

TEST(Models, SignalTransductionRhs) {
  const auto m = signal_transduction();
  const std::vector<double> x{1, 0, 1, 0, 0};
  const auto d = rhs_eval(m, x, x, m.true_params);
  const std::vector<double> want{-0.67, 0.07, -0.6, 0.6, 0.0};
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(d[i], want[i], 1e-15);
}

TEST(Models, SignalTransductionPoleReportsParameters) {
  const auto m = signal_transduction();
  auto p = m.true_params;
  p[5] = 0.2;
  const std::vector<double> x{1, 0, 1, 0, -0.2};
  try {
    rhs_eval(m, x, x, p);
    FAIL() << "expected ModelEvaluationError";
  } catch (const ModelEvaluationError& e) {
    EXPECT_NE(std::string(e.what()).find("0.20000000000000001"), std::string::npos) << e.what();
  }
}

TEST(Models, RhsIsPure) {
  for (const auto& name : model_names()) {
    const auto m = model_by_name(name);
    const auto& x = m.default_initial_state;
    EXPECT_EQ(rhs_eval(m, x, x, m.true_params), rhs_eval(m, x, x, m.true_params));
  }
}

TEST(Models, RegistryAndValidation) {
  for (const auto& name : model_names()) EXPECT_NO_THROW(model_by_name(name).validate());
  EXPECT_THROW(model_by_name("unknown"), std::invalid_argument);
  EXPECT_TRUE(hes1().is_delayed());
  EXPECT_FALSE(lotka_volterra().is_delayed());
  const auto m = lotka_volterra();
  EXPECT_THROW(rhs_eval(m, std::vector<double>{1.0}, std::vector<double>{1.0}, m.true_params), std::invalid_argument);
}

TEST(Integrators, ZeroFieldIsConstant) {
  const RhsFn zero = [](std::span<const double>, std::span<const double>, std::span<const double>,
                        std::span<double> d) { d[0] = 0.0; d[1] = 0.0; };
  const std::vector<double> x0{1.5, -2.0};
  const auto tr = integrate_ode(zero, {}, x0, uniform_grid(0, 5, 6));
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(tr.states(0, i), 1.5);
    EXPECT_EQ(tr.states(1, i), -2.0);
  }
}

TEST(Integrators, RejectsBadGrids) {
  const std::vector<double> x0{1.0};
  EXPECT_THROW(integrate_ode(decay, {}, x0, std::vector<double>{0.0, 1.0, 1.0}), std::invalid_argument);
  EXPECT_THROW(integrate_ode(decay, {}, x0, std::vector<double>{}), std::invalid_argument);
}

TEST(Integrators, BlowupIsAnIntegrationError) {
  const RhsFn quad = [](std::span<const double> x, std::span<const double>, std::span<const double>,
                        std::span<double> d) { d[0] = x[0] * x[0]; };
  const std::vector<double> x0{1.0};
  EXPECT_THROW(integrate_ode(quad, {}, x0, uniform_grid(0, 2, 3)), IntegrationError);
  const auto m = lotka_volterra();
  // Either outcome is allowed here; a non-finite trajectory is not.
  const std::vector<double> bad{-10.0, 10.0};
  try {
    const auto tr = simulate_model(m, bad, m.default_initial_state, uniform_grid(0, 10, 11));
    EXPECT_TRUE(tr.states.allFinite());
  } catch (const IntegrationError&) {
    SUCCEED();
  }
}

TEST(Integrators, DelayMustBePositive) {
  const auto m = hes1();
  auto p = m.true_params;
  p[3] = 0.0;
  EXPECT_THROW(simulate_model(m, p, m.default_initial_state, uniform_grid(0, 10, 6)), IntegrationError);
  p[3] = -1.0;
  EXPECT_THROW(simulate_model(m, p, m.default_initial_state, uniform_grid(0, 10, 6)), IntegrationError);
}

TEST(Integrators, Hes1Oscillates) {
  const auto m = hes1();
  const auto tr = simulate_model(m, m.true_params, m.default_initial_state, uniform_grid(0, 300, 151));
  EXPECT_TRUE(tr.states.allFinite());
  EXPECT_GT(tr.states.minCoeff(), 0.0);
  int maxima = 0;
  for (int i = 1; i < 150; ++i) {
    if (tr.states(0, i) > tr.states(0, i - 1) && tr.states(0, i) >= tr.states(0, i + 1)) ++maxima;
  }
  EXPECT_GE(maxima, 2);
}

TEST(IntegratorProperty, ExponentialDecayAnalytic) {
  const std::vector<double> x0{1.0};
  const auto tr = integrate_ode(decay, {}, x0, std::vector<double>{0.0, 0.5, 1.0});
  EXPECT_NEAR(tr.states(0, 2), std::exp(-1.0), 1e-6);
  EXPECT_NEAR(tr.states(0, 1), std::exp(-0.5), 1e-6);
}

TEST(IntegratorProperty, LotkaVolterraAgainstRk4AndSelfConvergence) {
  const auto m = lotka_volterra();
  const auto grid = uniform_grid(0, 10, 11);
  IntegratorOptions fine;
  fine.rtol = 1e-10;
  fine.atol = 1e-12;
  const auto ref = simulate_model(m, m.true_params, m.default_initial_state, grid, fine);
  const Eigen::VectorXd rk = oracle::rk4(
      [](const Eigen::VectorXd& x) {
        Eigen::VectorXd d(2);
        d << x(0) - x(0) * x(1), x(0) * x(1) - x(1);
        return d;
      },
      Eigen::Vector2d(1.0, 0.5), 10.0, 20000);
  EXPECT_LE((ref.states.col(10) - rk).cwiseAbs().maxCoeff(), 1e-8);

  IntegratorOptions a, b;
  b.rtol = a.rtol / 2;
  const auto ta = simulate_model(m, m.true_params, m.default_initial_state, grid, a);
  const auto tb = simulate_model(m, m.true_params, m.default_initial_state, grid, b);
  EXPECT_LE((ta.states.col(10) - tb.states.col(10)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(IntegratorProperty, DelayIndependentDdeMatchesOde) {
  const std::vector<double> x0{1.0};
  const auto grid = uniform_grid(0, 5, 11);
  const std::vector<double> p{0.7};
  const auto ode = integrate_ode(decay, p, x0, grid);
  const auto dde = integrate_dde(decay, p, 0.7, x0, grid);
  IntegratorOptions opt;
  EXPECT_LE((ode.states - dde.states).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((ode.states - dde.states).cwiseAbs().maxCoeff(), 10 * opt.rtol);
  EXPECT_NEAR(dde.states(0, 10), std::exp(-5.0), 1e-6);
}

TEST(IntegratorProperty, DdeAnalyticFirstInterval) {
  // x' = -x(t - 1), x = 1 on t <= 0: x(t) = 1 - t on [0, 1], 1 - t + (t-1)^2/2 on [1, 2].
  const RhsFn lag = [](std::span<const double>, std::span<const double> xd, std::span<const double>,
                       std::span<double> d) { d[0] = -xd[0]; };
  const std::vector<double> h{1.0};
  const auto tr = integrate_dde(lag, {}, 1.0, h, std::vector<double>{0.0, 0.5, 1.0, 1.5, 2.0});
  EXPECT_NEAR(tr.states(0, 1), 0.5, 1e-8);
  EXPECT_NEAR(tr.states(0, 2), 0.0, 1e-8);
  EXPECT_NEAR(tr.states(0, 3), 1 - 1.5 + 0.125, 1e-7);
  EXPECT_NEAR(tr.states(0, 4), 1 - 2.0 + 0.5, 1e-7);
}

TEST(IntegratorProperty, Hes1SelfConvergence) {
  const auto m = hes1();
  const auto grid = uniform_grid(0, 300, 151);
  IntegratorOptions a, b;
  b.rtol = a.rtol / 2;
  const auto ta = simulate_model(m, m.true_params, m.default_initial_state, grid, a);
  const auto tb = simulate_model(m, m.true_params, m.default_initial_state, grid, b);
  for (int k = 0; k < 2; ++k) {
    EXPECT_LE(std::abs(ta.states(k, 150) - tb.states(k, 150)) / std::abs(tb.states(k, 150)), 1e-4);
  }
}

TEST(IntegratorProperty, ErrorDecreasesWithTolerance) {
  for (const auto& name : model_names()) {
    const auto m = model_by_name(name);
    const auto grid = coarse_grid_for(m);
    IntegratorOptions ref_opt;
    ref_opt.rtol = 1e-10;
    ref_opt.atol = 1e-12;
    const auto ref = simulate_model(m, m.true_params, m.default_initial_state, grid, ref_opt);
    double previous = INFINITY;
    for (double rtol : {1e-3, 1e-5, 1e-7}) {
      IntegratorOptions opt;
      opt.rtol = rtol;
      opt.atol = rtol * 1e-2;
      const auto tr = simulate_model(m, m.true_params, m.default_initial_state, grid, opt);
      const double err = (tr.states - ref.states).cwiseAbs().maxCoeff();
      EXPECT_LT(err, previous) << name << " rtol=" << rtol;
      previous = err;
    }
  }
}

TEST(Dataset, LotkaVolterraProtocol) {
  const auto m = lotka_volterra();
  const auto ds = generate_dataset(m, m.true_params, m.default_initial_state, uniform_grid(0, 10, 11),
                                   NoiseRule::absolute({0.5}), 1);
  EXPECT_EQ(ds.length(), 11u);
  EXPECT_EQ(ds.noise_sd_true, (std::vector<double>{0.5, 0.5}));
  const auto clean = simulate_model(m, m.true_params, m.default_initial_state, ds.times);
  const double resid_sd = std::sqrt((ds.observations - clean.states).squaredNorm() / 22.0);
  EXPECT_GT(resid_sd, 0.25);
  EXPECT_LT(resid_sd, 0.8);
}

TEST(Dataset, Hes1RelativeNoiseUsesTrajectorySpread) {
  const auto m = hes1();
  const auto grid = uniform_grid(0, 300, 151);
  const auto ds = generate_dataset(m, m.true_params, m.default_initial_state, grid, NoiseRule::relative({0.1}), 1);
  const auto clean = simulate_model(m, m.true_params, m.default_initial_state, grid);
  const auto spread = row_std(clean.states);
  EXPECT_NEAR(ds.noise_sd_true[0], 0.1 * spread[0], 1e-12);
  EXPECT_NEAR(ds.noise_sd_true[1], 0.1 * spread[1], 1e-12);
  // Reported raw spreads of the noiseless trajectory: 6.0020 and 121.7670.
  EXPECT_NEAR(spread[0], 6.0020, 0.01);
  EXPECT_NEAR(spread[1], 121.7670, 0.1);
}

TEST(Dataset, SignalTransductionProtocol) {
  const auto m = signal_transduction();
  const std::vector<double> grid{0, 1, 2, 4, 5, 7, 10, 15, 20, 30, 40, 50, 60, 80, 100};
  const auto ds = generate_dataset(m, m.true_params, m.default_initial_state, grid, NoiseRule::absolute({0.1}), 2);
  EXPECT_EQ(ds.state_dim(), 5u);
  EXPECT_EQ(ds.length(), 15u);
}

TEST(Dataset, DeterministicForSeed) {
  const auto m = lotka_volterra();
  const auto g = uniform_grid(0, 10, 11);
  const auto a = generate_dataset(m, m.true_params, m.default_initial_state, g, NoiseRule::absolute({0.5}), 7);
  const auto b = generate_dataset(m, m.true_params, m.default_initial_state, g, NoiseRule::absolute({0.5}), 7);
  const auto c = generate_dataset(m, m.true_params, m.default_initial_state, g, NoiseRule::absolute({0.5}), 8);
  EXPECT_EQ(a.observations, b.observations);
  EXPECT_NE(a.observations, c.observations);
}

TEST(Dataset, CsvRoundTrip) {
  const auto m = hes1();
  const auto ds = generate_dataset(m, m.true_params, m.default_initial_state, uniform_grid(0, 20, 11),
                                   NoiseRule::relative({0.1}), 3);
  const auto dir = std::filesystem::temp_directory_path() / "gpabc_dataset_test";
  std::filesystem::remove_all(dir);
  save_dataset(ds, dir / "d");
  const auto back = load_dataset(dir / "d.csv");
  EXPECT_EQ(back.times, ds.times);
  EXPECT_EQ(back.observations, ds.observations);
  EXPECT_EQ(back.provenance.model, "hes1");
  EXPECT_EQ(back.provenance.seed, 3u);
  EXPECT_EQ(back.provenance.params, m.true_params);
  EXPECT_EQ(back.provenance.noise_rule.kind, NoiseRule::Kind::Relative);
  EXPECT_EQ(back.noise_sd_true, ds.noise_sd_true);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, LoadRejectsMalformedCsv) {
  const auto dir = std::filesystem::temp_directory_path() / "gpabc_bad_csv";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "bad.csv") << "t,x1\n0,1\n1,abc\n";
  EXPECT_THROW(load_dataset(dir / "bad.csv"), std::runtime_error);
  std::ofstream(dir / "ragged.csv") << "t,x1\n0,1\n1,2,3\n";
  EXPECT_THROW(load_dataset(dir / "ragged.csv"), std::runtime_error);
  EXPECT_THROW(load_dataset(dir / "missing.csv"), std::runtime_error);
  std::filesystem::remove_all(dir);
}
