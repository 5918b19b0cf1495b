#pragma once

// Zero-mean Gaussian process regression over time, one process per state
// dimension, with predictions of both the state and its time derivative.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <ceres/gradient_problem.h>
#include <ceres/gradient_problem_solver.h>
#include <json.hpp>

#include "gpabc/dataset.hpp"
#include "gpabc/kernels.hpp"
#include "gpabc/rng.hpp"

namespace gpabc {

class GpNumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GpFitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kNoiseFloor = 1e-6;

namespace detail {

// Cholesky of `m` with diagonal jitter escalating from 1e-10 to 1e-6 times the
// mean diagonal entry. Returns the jitter actually added.
inline double factorize_with_jitter(Eigen::MatrixXd m, Eigen::LLT<Eigen::MatrixXd>& llt) {
  if (!m.allFinite()) throw GpNumericError("covariance matrix has non-finite entries");
  llt.compute(m);
  if (llt.info() == Eigen::Success) return 0.0;
  const double scale = std::max(m.diagonal().mean(), std::numeric_limits<double>::min());
  for (double j = 1e-10; j <= 1.0000001e-6; j *= 10.0) {
    Eigen::MatrixXd shifted = m;
    shifted.diagonal().array() += j * scale;
    llt.compute(shifted);
    if (llt.info() == Eigen::Success) return j * scale;
  }
  throw GpNumericError("Cholesky factorisation failed after maximum jitter");
}

inline Eigen::VectorXd to_vector(std::span<const double> v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

struct StatePrediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

struct DerivativePrediction {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// A GP conditioned on (times, targets). Immutable after construction.
class GPPosterior {
 public:
  GPPosterior(std::vector<double> times, Eigen::VectorXd targets, KernelSpec kernel, double noise_sd)
      : times_(std::move(times)), targets_(std::move(targets)), kernel_(kernel),
        noise_sd_(std::max(noise_sd, kNoiseFloor)) {
    kernel_.validate();
    if (times_.empty() || static_cast<Eigen::Index>(times_.size()) != targets_.size()) {
      throw std::invalid_argument("GP training inputs and targets must be non-empty and equally sized");
    }
    if (!targets_.allFinite()) throw std::invalid_argument("GP targets must be finite");
    Eigen::MatrixXd ky = gram(kernel_, times_, times_);
    ky.diagonal().array() += noise_sd_ * noise_sd_;
    jitter_ = detail::factorize_with_jitter(std::move(ky), llt_);
    alpha_ = llt_.solve(targets_);
  }

  [[nodiscard]] const std::vector<double>& times() const { return times_; }
  [[nodiscard]] const Eigen::VectorXd& targets() const { return targets_; }
  [[nodiscard]] const KernelSpec& kernel() const { return kernel_; }
  [[nodiscard]] double noise_sd() const { return noise_sd_; }
  [[nodiscard]] double jitter() const { return jitter_; }
  [[nodiscard]] Eigen::MatrixXd chol() const { return llt_.matrixL(); }
  [[nodiscard]] const Eigen::VectorXd& alpha() const { return alpha_; }

  [[nodiscard]] double log_marginal_likelihood() const {
    const Eigen::MatrixXd l = llt_.matrixL();
    const double log_det = 2.0 * l.diagonal().array().log().sum();
    const auto n = static_cast<double>(times_.size());
    return -0.5 * targets_.dot(alpha_) - 0.5 * log_det - 0.5 * n * std::log(2.0 * std::numbers::pi);
  }

  /// Mean K(t*,t) Ky^-1 y and variance k(t*,t*) - K(t*,t) Ky^-1 K(t,t*), clamped at zero.
  [[nodiscard]] StatePrediction predict_state(std::span<const double> test_times) const {
    const Eigen::MatrixXd ks = gram(kernel_, test_times, times_);
    StatePrediction out;
    out.mean = ks * alpha_;
    const Eigen::MatrixXd v = llt_.matrixL().solve(ks.transpose());
    out.variance.resize(static_cast<Eigen::Index>(test_times.size()));
    for (Eigen::Index i = 0; i < out.variance.size(); ++i) {
      const double t = test_times[static_cast<std::size_t>(i)];
      out.variance(i) = std::max(0.0, kernel_eval(kernel_, t, t) - v.col(i).squaredNorm());
    }
    return out;
  }

  /// Derivative process: mean dK(t*,t)/dt* Ky^-1 y and covariance
  /// d2K(t*,t*)/dt*dt* - dK(t*,t)/dt* Ky^-1 dK(t,t*)/dt*.
  [[nodiscard]] DerivativePrediction predict_derivative(std::span<const double> test_times) const {
    const Eigen::MatrixXd d = gram(kernel_, test_times, times_, GramMode::d_left);
    DerivativePrediction out;
    out.mean = d * alpha_;
    const Eigen::MatrixXd w = llt_.matrixL().solve(d.transpose());
    out.covariance = gram(kernel_, test_times, test_times, GramMode::d_mixed) - w.transpose() * w;
    return out;
  }

 private:
  std::vector<double> times_;
  Eigen::VectorXd targets_;
  KernelSpec kernel_;
  double noise_sd_;
  double jitter_ = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd alpha_;
};

struct LmlWithGradient {
  double value = 0.0;
  /// d/d(kernel log-params..., log noise_sd)
  Eigen::VectorXd gradient;
};

namespace detail {

// Stationary kernel on a uniform grid: K + s^2 I is symmetric Toeplitz. Durbin's
// recursion gives the log determinant and the first column of the inverse, and
// the Trench recursion fills the rest of the inverse, all in O(n^2). Returns
// nothing when the grid is irregular or the recursion is poorly conditioned, in
// which case the caller falls back to Cholesky.
inline std::optional<LmlWithGradient> toeplitz_lml(std::span<const double> times, std::span<const double> targets,
                                                   const KernelSpec& kernel, double noise_sd, bool with_gradient) {
  const auto n = static_cast<Eigen::Index>(times.size());
  if (kernel.family != KernelFamily::SE || n < 2 || targets.size() != times.size()) return std::nullopt;
  kernel.validate();
  const double dt = times[1] - times[0];
  if (!(dt > 0.0)) return std::nullopt;
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (std::abs(times[i] - times[0] - static_cast<double>(i) * dt) > 1e-9 * dt * static_cast<double>(i)) {
      return std::nullopt;
    }
  }
  const Eigen::VectorXd y = to_vector(targets);
  if (!y.allFinite()) return std::nullopt;
  const double s2 = std::pow(std::max(noise_sd, kNoiseFloor), 2);

  Eigen::VectorXd r(n);
  for (Eigen::Index m = 0; m < n; ++m) r(m) = kernel_eval(kernel, 0.0, static_cast<double>(m) * dt);
  r(0) += s2;
  if (!r.allFinite()) return std::nullopt;

  Eigen::VectorXd a = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd prev(n);
  a(0) = 1.0;
  double e = r(0);
  double log_det = std::log(e);
  for (Eigen::Index k = 1; k < n; ++k) {
    double acc = r(k);
    for (Eigen::Index j = 1; j < k; ++j) acc += a(j) * r(k - j);
    const double kappa = -acc / e;
    prev.head(k) = a.head(k);
    for (Eigen::Index j = 1; j < k; ++j) a(j) = prev(j) + kappa * prev(k - j);
    a(k) = kappa;
    e *= 1.0 - kappa * kappa;
    if (!(e > 1e-10 * r(0))) return std::nullopt;
    log_det += std::log(e);
  }

  const Eigen::VectorXd x = a / e;
  Eigen::MatrixXd inv(n, n);
  inv.col(0) = x;
  inv.row(0) = x.transpose();
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    for (Eigen::Index j = i; j + 1 < n; ++j) {
      const double v = inv(i, j) + (x(i + 1) * x(j + 1) - x(n - 1 - i) * x(n - 1 - j)) / x(0);
      inv(i + 1, j + 1) = v;
      inv(j + 1, i + 1) = v;
    }
  }
  const Eigen::VectorXd alpha = inv * y;

  LmlWithGradient out;
  out.value = -0.5 * y.dot(alpha) - 0.5 * log_det - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  if (!std::isfinite(out.value)) return std::nullopt;
  if (!with_gradient) return out;

  // tr(W dK) for Toeplitz dK only needs the diagonal sums of W = alpha alpha^T - K^-1.
  const auto np = static_cast<Eigen::Index>(kernel.num_params());
  out.gradient = Eigen::VectorXd::Zero(np + 1);
  std::array<double, 3> g{};
  const std::span<double> gs(g.data(), static_cast<std::size_t>(np));
  for (Eigen::Index m = 0; m < n; ++m) {
    double diag = 0.0;
    for (Eigen::Index i = m; i < n; ++i) diag += alpha(i) * alpha(i - m) - inv(i, i - m);
    if (m == 0) out.gradient(np) = s2 * diag;
    kernel_log_param_grad(kernel, 0.0, static_cast<double>(m) * dt, gs);
    const double weight = m == 0 ? 0.5 : 1.0;
    for (Eigen::Index p = 0; p < np; ++p) out.gradient(p) += weight * diag * g[static_cast<std::size_t>(p)];
  }
  return out;
}

}  // namespace detail

inline double log_marginal_likelihood(std::span<const double> times, std::span<const double> targets,
                                      const KernelSpec& kernel, double noise_sd) {
  if (const auto fast = detail::toeplitz_lml(times, targets, kernel, noise_sd, false)) return fast->value;
  return GPPosterior({times.begin(), times.end()}, detail::to_vector(targets), kernel, noise_sd)
      .log_marginal_likelihood();
}

/// Cholesky route, valid for any kernel and grid.
inline LmlWithGradient dense_log_marginal_likelihood_with_gradient(std::span<const double> times,
                                                                   std::span<const double> targets,
                                                                   const KernelSpec& kernel, double noise_sd) {
  const GPPosterior gp({times.begin(), times.end()}, detail::to_vector(targets), kernel, noise_sd);
  const auto n = static_cast<Eigen::Index>(times.size());
  const auto np = static_cast<Eigen::Index>(kernel.num_params());
  const Eigen::MatrixXd l = gp.chol();
  Eigen::MatrixXd linv = Eigen::MatrixXd::Identity(n, n);
  l.triangularView<Eigen::Lower>().solveInPlace(linv);
  // W = alpha alpha^T - K^-1, with K^-1 = L^-T L^-1; only the lower triangle is filled.
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
  w.selfadjointView<Eigen::Lower>().rankUpdate(linv.transpose(), -1.0);
  w.selfadjointView<Eigen::Lower>().rankUpdate(gp.alpha(), 1.0);

  LmlWithGradient out;
  out.value = gp.log_marginal_likelihood();
  out.gradient = Eigen::VectorXd::Zero(np + 1);
  std::array<double, 3> acc{};
  std::array<double, 3> g{};
  const std::span<double> gs(g.data(), static_cast<std::size_t>(np));
  for (Eigen::Index b = 0; b < n; ++b) {
    for (Eigen::Index a = b; a < n; ++a) {
      const double weight = (a == b ? 1.0 : 2.0) * w(a, b);
      kernel_log_param_grad(kernel, times[static_cast<std::size_t>(a)], times[static_cast<std::size_t>(b)], gs);
      for (Eigen::Index p = 0; p < np; ++p) acc[static_cast<std::size_t>(p)] += weight * g[static_cast<std::size_t>(p)];
    }
  }
  for (Eigen::Index p = 0; p < np; ++p) out.gradient(p) = 0.5 * acc[static_cast<std::size_t>(p)];
  const double s2 = gp.noise_sd() * gp.noise_sd();
  out.gradient(np) = s2 * w.trace();
  return out;
}

inline LmlWithGradient log_marginal_likelihood_with_gradient(std::span<const double> times,
                                                             std::span<const double> targets,
                                                             const KernelSpec& kernel, double noise_sd) {
  if (auto fast = detail::toeplitz_lml(times, targets, kernel, noise_sd, true)) return *std::move(fast);
  return dense_log_marginal_likelihood_with_gradient(times, targets, kernel, noise_sd);
}

struct GPFit {
  KernelSpec kernel;
  double noise_sd = 0.0;
  double log_likelihood = -std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  std::size_t restarts = 0;
  std::size_t restarts_succeeded = 0;
  /// Log marginal likelihood at each restart's starting point (NaN when not evaluable).
  std::vector<double> initial_log_likelihoods;
};

struct FitOptions {
  std::size_t restarts = 10;
  std::uint64_t seed = 0;
  int max_iterations = 300;
};

namespace detail {

// Box in log-hyperparameter space, mapped smoothly onto R^n for the optimizer.
struct LogBox {
  Eigen::VectorXd lo, hi, scale;

  [[nodiscard]] Eigen::VectorXd to_log(const Eigen::VectorXd& z) const {
    const Eigen::ArrayXd s = 1.0 / (1.0 + (-z.array()).exp());
    return (lo.array() + (hi - lo).array() * s).matrix();
  }
  [[nodiscard]] Eigen::VectorXd dlog_dz(const Eigen::VectorXd& z) const {
    const Eigen::ArrayXd s = 1.0 / (1.0 + (-z.array()).exp());
    return ((hi - lo).array() * s * (1.0 - s)).matrix();
  }
  [[nodiscard]] Eigen::VectorXd to_z(const Eigen::VectorXd& u) const {
    const Eigen::ArrayXd f = ((u - lo).array() / (hi - lo).array()).cwiseMax(1e-9).cwiseMin(1.0 - 1e-9);
    return (f / (1.0 - f)).log().matrix();
  }
};

inline LogBox make_log_box(std::span<const double> times, std::span<const double> targets, KernelFamily family) {
  double s2 = 0.0;
  for (double y : targets) s2 += y * y;
  s2 /= static_cast<double>(targets.size());
  if (!(s2 > 0.0)) s2 = 1.0;
  double span = times.back() - times.front();
  if (!(span > 0.0)) span = 1.0;
  double dt_min = span;
  for (std::size_t i = 1; i < times.size(); ++i) dt_min = std::min(dt_min, times[i] - times[i - 1]);

  const auto np = static_cast<Eigen::Index>(KernelSpec::num_params(family));
  LogBox box{Eigen::VectorXd(np + 1), Eigen::VectorXd(np + 1), Eigen::VectorXd(np + 1)};
  auto set = [&](Eigen::Index i, double lo, double hi, double scale) {
    box.lo(i) = std::log(lo);
    box.hi(i) = std::log(hi);
    box.scale(i) = std::log(scale);
  };
  set(0, 1e-4 * s2, 1e4 * s2, s2);
  if (family == KernelFamily::SE) {
    set(1, std::pow(0.25 * dt_min, 2), std::pow(10.0 * span, 2), span * span / 10.0);
  } else {
    set(1, 1e-4 / (span * span), 1e6 / (span * span), 10.0 / (span * span));
    set(2, 1e-4, 1e4, 1.0);
  }
  const double sd = std::sqrt(s2);
  set(np, kNoiseFloor, std::max(10.0 * sd, 10.0 * kNoiseFloor), 0.1 * sd);
  return box;
}

class NegativeLml final : public ceres::FirstOrderFunction {
 public:
  NegativeLml(std::span<const double> times, std::span<const double> targets, KernelFamily family, LogBox box)
      : times_(times), targets_(targets), family_(family), box_(std::move(box)) {}

  bool Evaluate(const double* z_ptr, double* cost, double* gradient) const override {
    const Eigen::Map<const Eigen::VectorXd> z(z_ptr, box_.lo.size());
    const Eigen::VectorXd u = box_.to_log(z);
    const auto np = static_cast<Eigen::Index>(KernelSpec::num_params(family_));
    try {
      const KernelSpec k = KernelSpec::from_log_params(family_, u.head(np));
      const double sd = std::exp(u(np));
      if (gradient == nullptr) {
        *cost = -log_marginal_likelihood(times_, targets_, k, sd);
      } else {
        const auto r = log_marginal_likelihood_with_gradient(times_, targets_, k, sd);
        *cost = -r.value;
        const Eigen::VectorXd g = -(r.gradient.array() * box_.dlog_dz(z).array()).matrix();
        Eigen::Map<Eigen::VectorXd>(gradient, g.size()) = g;
        if (!g.allFinite()) return false;
      }
      return std::isfinite(*cost);
    } catch (const std::exception&) {
      return false;
    }
  }

  [[nodiscard]] int NumParameters() const override { return static_cast<int>(box_.lo.size()); }

 private:
  std::span<const double> times_;
  std::span<const double> targets_;
  KernelFamily family_;
  LogBox box_;
};

}  // namespace detail

/// Maximum-marginal-likelihood hyperparameters (kernel and noise) by BFGS in
/// log space from `restarts` log-uniform random starts.
inline GPFit fit_hyperparams(std::span<const double> times, std::span<const double> targets, KernelFamily family,
                             const FitOptions& options = {}) {
  if (times.size() != targets.size()) throw std::invalid_argument("fit_hyperparams: size mismatch");
  if (times.size() < 3) throw std::invalid_argument("fit_hyperparams: need at least 3 training points");
  if (options.restarts == 0) throw std::invalid_argument("fit_hyperparams: restarts must be >= 1");
  const detail::LogBox box = detail::make_log_box(times, targets, family);
  const auto np = static_cast<Eigen::Index>(KernelSpec::num_params(family));
  const auto dim = box.lo.size();

  Rng rng(derive_seed(options.seed, 0x6f1dULL));
  std::uniform_real_distribution<double> decades(-2.0, 2.0);
  auto* objective = new detail::NegativeLml(times, targets, family, box);
  ceres::GradientProblem problem(objective);  // takes ownership
  ceres::GradientProblemSolver::Options solver;
  solver.line_search_direction_type = ceres::BFGS;
  solver.max_num_iterations = options.max_iterations;
  solver.logging_type = ceres::SILENT;
  solver.minimizer_progress_to_stdout = false;
  solver.function_tolerance = 1e-8;
  solver.gradient_tolerance = 1e-6;

  GPFit best;
  best.seed = options.seed;
  best.restarts = options.restarts;
  std::vector<std::string> failures;
  for (std::size_t r = 0; r < options.restarts; ++r) {
    Eigen::VectorXd u0(dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
      const double margin = 1e-3 * (box.hi(i) - box.lo(i));
      u0(i) = std::clamp(box.scale(i) + std::numbers::ln10 * decades(rng), box.lo(i) + margin, box.hi(i) - margin);
    }
    Eigen::VectorXd z = box.to_z(u0);
    double init_cost = std::numeric_limits<double>::quiet_NaN();
    if (!objective->Evaluate(z.data(), &init_cost, nullptr)) init_cost = std::numeric_limits<double>::quiet_NaN();
    best.initial_log_likelihoods.push_back(-init_cost);

    const Eigen::VectorXd z0 = z;
    ceres::GradientProblemSolver::Summary summary;
    ceres::Solve(solver, problem, z.data(), &summary);
    double cost = std::numeric_limits<double>::quiet_NaN();
    if (!objective->Evaluate(z.data(), &cost, nullptr) || !(cost <= init_cost)) {
      // Never report a result worse than where the restart began.
      z = z0;
      cost = init_cost;
    }
    if (!std::isfinite(cost)) {
      failures.push_back("restart " + std::to_string(r) + ": " + summary.message);
      continue;
    }
    ++best.restarts_succeeded;
    if (-cost > best.log_likelihood) {
      const Eigen::VectorXd u = box.to_log(z);
      best.kernel = KernelSpec::from_log_params(family, u.head(np));
      best.noise_sd = std::exp(u(np));
      best.log_likelihood = -cost;
    }
  }
  if (best.restarts_succeeded == 0) {
    std::string msg = "GP hyperparameter fit failed on every restart";
    for (const auto& f : failures) msg += "; " + f;
    throw GpFitError(msg);
  }
  return best;
}

inline nlohmann::json to_json(const GPFit& fit) {
  const Eigen::VectorXd lp = fit.kernel.log_params();
  return {{"family", to_string(fit.kernel.family)},
          {"log_params", std::vector<double>(lp.data(), lp.data() + lp.size())},
          {"noise_sd", fit.noise_sd},
          {"log_likelihood", fit.log_likelihood},
          {"seed", fit.seed},
          {"restarts", fit.restarts},
          {"restarts_succeeded", fit.restarts_succeeded}};
}

inline GPFit gp_fit_from_json(const nlohmann::json& j) {
  GPFit fit;
  const auto family = kernel_family_from_string(j.at("family").get<std::string>());
  const auto lp = j.at("log_params").get<std::vector<double>>();
  fit.kernel = KernelSpec::from_log_params(family, detail::to_vector(lp));
  fit.noise_sd = j.at("noise_sd").get<double>();
  fit.log_likelihood = j.value("log_likelihood", fit.log_likelihood);
  fit.seed = j.value("seed", std::uint64_t{0});
  fit.restarts = j.value("restarts", std::size_t{0});
  fit.restarts_succeeded = j.value("restarts_succeeded", std::size_t{0});
  return fit;
}

/// Smoothed state and empirical vector field on the training grid, one GP per dimension.
struct SmoothedSystem {
  std::vector<GPPosterior> dims;
  std::vector<GPFit> fits;
  std::vector<double> eval_times;
  Eigen::MatrixXd state_mean;     // K x L
  Eigen::MatrixXd velocity_mean;  // K x L
  Eigen::MatrixXd velocity_var;   // K x L
  double fit_seconds = 0.0;

  [[nodiscard]] std::size_t state_dim() const { return dims.size(); }
  [[nodiscard]] std::size_t length() const { return eval_times.size(); }
  [[nodiscard]] std::vector<double> noise_sd() const {
    std::vector<double> out;
    for (const auto& d : dims) out.push_back(d.noise_sd());
    return out;
  }
};

/// Build a SmoothedSystem from already-fitted hyperparameters.
inline SmoothedSystem smooth_with(const TimeSeriesDataset& data, std::vector<GPFit> fits) {
  data.validate();
  if (fits.size() != data.state_dim()) throw std::invalid_argument("one GP fit per state dimension required");
  SmoothedSystem out;
  out.eval_times = data.times;
  const auto K = static_cast<Eigen::Index>(data.state_dim());
  const auto L = static_cast<Eigen::Index>(data.length());
  out.state_mean.resize(K, L);
  out.velocity_mean.resize(K, L);
  out.velocity_var.resize(K, L);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto& fit = fits[static_cast<std::size_t>(k)];
    out.dims.emplace_back(data.times, data.observations.row(k).transpose(), fit.kernel, fit.noise_sd);
    const auto& gp = out.dims.back();
    out.state_mean.row(k) = gp.predict_state(data.times).mean.transpose();
    const auto deriv = gp.predict_derivative(data.times);
    out.velocity_mean.row(k) = deriv.mean.transpose();
    out.velocity_var.row(k) = deriv.covariance.diagonal().cwiseMax(0.0).transpose();
  }
  out.fits = std::move(fits);
  return out;
}

/// Fit an independent GP to every state dimension and evaluate the smoothed
/// state and its derivative at the observation times.
inline SmoothedSystem smooth_dataset(const TimeSeriesDataset& data, KernelFamily family, std::size_t restarts,
                                     std::uint64_t seed) {
  data.validate();
  const auto start = std::chrono::steady_clock::now();
  std::vector<GPFit> fits;
  for (std::size_t k = 0; k < data.state_dim(); ++k) {
    const Eigen::VectorXd y = data.observations.row(static_cast<Eigen::Index>(k)).transpose();
    try {
      fits.push_back(fit_hyperparams(data.times, std::span<const double>(y.data(), static_cast<std::size_t>(y.size())),
                                     family, {restarts, derive_seed(seed, k)}));
    } catch (const GpFitError& e) {
      throw GpFitError("state dimension " + std::to_string(k + 1) + ": " + e.what());
    }
  }
  auto out = smooth_with(data, std::move(fits));
  out.fit_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace gpabc
