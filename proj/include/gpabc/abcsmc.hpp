#pragma once

// Sequential ABC sampler with importance weights, driven by an arbitrary
// distance function. The two distance families used by the benchmark
// algorithms live here as well:
//   - trajectory distance: integrate the model and compare to the data;
//   - gradient distance: compare the GP velocity field V(t) with the model
//     right-hand side evaluated on the GP-smoothed states, no integration.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gpabc/gp.hpp"
#include "gpabc/models.hpp"
#include "gpabc/rng.hpp"

namespace gpabc {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct Particle {
  Eigen::VectorXd theta;
  double weight = 1.0;
  double distance = 0.0;
};

struct Population {
  std::size_t index = 0;
  std::vector<Particle> particles;
  double tolerance = kInf;
  std::size_t generated_count = 0;  // simulations run (candidates inside the prior support)
  std::size_t proposed_count = 0;   // all candidates, including those outside the prior support
  double seconds = 0.0;
  bool tolerance_stalled = false;

  [[nodiscard]] std::size_t accepted_count() const { return particles.size(); }
  [[nodiscard]] std::size_t dim() const {
    return particles.empty() ? 0 : static_cast<std::size_t>(particles.front().theta.size());
  }
  [[nodiscard]] double weight_sum() const {
    double s = 0.0;
    for (const auto& p : particles) s += p.weight;
    return s;
  }
};

/// Product of independent uniform priors.
class Prior {
 public:
  Prior() = default;
  explicit Prior(std::vector<UniformPrior> bounds) : bounds_(std::move(bounds)) {
    log_density_ = 0.0;
    for (const auto& b : bounds_) {
      if (!(b.lo < b.hi)) throw std::invalid_argument("prior bounds must satisfy lo < hi");
      log_density_ -= std::log(b.width());
    }
  }

  [[nodiscard]] std::size_t dim() const { return bounds_.size(); }
  [[nodiscard]] const std::vector<UniformPrior>& bounds() const { return bounds_; }

  [[nodiscard]] bool contains(const Eigen::VectorXd& theta) const {
    if (static_cast<std::size_t>(theta.size()) != bounds_.size()) return false;
    for (std::size_t k = 0; k < bounds_.size(); ++k) {
      if (!bounds_[k].contains(theta(static_cast<Eigen::Index>(k)))) return false;
    }
    return true;
  }

  [[nodiscard]] double density(const Eigen::VectorXd& theta) const {
    return contains(theta) ? std::exp(log_density_) : 0.0;
  }

  [[nodiscard]] double log_density(const Eigen::VectorXd& theta) const {
    return contains(theta) ? log_density_ : -kInf;
  }

  Eigen::VectorXd sample(Rng& rng) const {
    Eigen::VectorXd theta(static_cast<Eigen::Index>(bounds_.size()));
    for (std::size_t k = 0; k < bounds_.size(); ++k) {
      theta(static_cast<Eigen::Index>(k)) = std::uniform_real_distribution<double>(bounds_[k].lo, bounds_[k].hi)(rng);
    }
    return theta;
  }

  /// 1e-12 x width^2 per component, the smallest proposal variance used anywhere.
  [[nodiscard]] Eigen::VectorXd variance_floor() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(bounds_.size()));
    for (std::size_t k = 0; k < bounds_.size(); ++k) {
      v(static_cast<Eigen::Index>(k)) = 1e-12 * bounds_[k].width() * bounds_[k].width();
    }
    return v;
  }

 private:
  std::vector<UniformPrior> bounds_;
  double log_density_ = 0.0;
};

// ---------------------------------------------------------------------------
// Distances and simulators

/// Sum of squared residuals over every state and time point; +inf if the
/// simulation contains non-finite values.
inline double distance_trajectory(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& simulated) {
  if (reference.rows() != simulated.rows() || reference.cols() != simulated.cols()) {
    throw std::invalid_argument("distance_trajectory: shape mismatch");
  }
  if (!simulated.allFinite()) return kInf;
  const double d = (reference - simulated).squaredNorm();
  return std::isfinite(d) ? d : kInf;
}

/// Simulates Y^s by integrating the model from a known initial state (or
/// constant history for delayed models) and compares against observations.
class IntegrationSimulator {
 public:
  IntegrationSimulator(ModelSpec model, std::vector<double> initial, std::vector<double> times,
                       Eigen::MatrixXd reference, IntegratorOptions options = {})
      : model_(std::move(model)), initial_(std::move(initial)), times_(std::move(times)),
        reference_(std::move(reference)), options_(options) {
    model_.validate();
    if (initial_.size() != model_.state_dim) throw std::invalid_argument("initial state has wrong dimension");
    if (reference_.rows() != static_cast<Eigen::Index>(model_.state_dim) ||
        reference_.cols() != static_cast<Eigen::Index>(times_.size())) {
      throw std::invalid_argument("reference data shape does not match model and time grid");
    }
  }

  /// Throws IntegrationError / ModelEvaluationError on failure.
  [[nodiscard]] Eigen::MatrixXd simulate(const Eigen::VectorXd& theta) const {
    return simulate_model(model_, std::span<const double>(theta.data(), static_cast<std::size_t>(theta.size())),
                          initial_, times_, options_)
        .states;
  }

  [[nodiscard]] double distance(const Eigen::VectorXd& theta) const {
    try {
      return distance_trajectory(reference_, simulate(theta));
    } catch (const IntegrationError&) {
      return kInf;
    } catch (const ModelEvaluationError&) {
      return kInf;
    }
  }

  [[nodiscard]] const ModelSpec& model() const { return model_; }

 private:
  ModelSpec model_;
  std::vector<double> initial_;
  std::vector<double> times_;
  Eigen::MatrixXd reference_;
  IntegratorOptions options_;
};

/// Simulates Y^s = f(X(t), theta) on the GP-smoothed states and compares it
/// with the GP velocity field. Delayed states are linearly interpolated on the
/// smoothed grid with constant extension before the first sample.
class GradientSimulator {
 public:
  GradientSimulator(const SmoothedSystem& smoothed, ModelSpec model)
      : model_(std::move(model)), times_(smoothed.eval_times), states_(smoothed.state_mean),
        velocity_(smoothed.velocity_mean) {
    model_.validate();
    if (static_cast<std::size_t>(states_.rows()) != model_.state_dim) {
      throw std::invalid_argument("smoothed system and model disagree on the state dimension");
    }
  }

  /// Model velocity field on the smoothed states; columns contain non-finite
  /// values when the right-hand side cannot be evaluated.
  [[nodiscard]] Eigen::MatrixXd simulate(const Eigen::VectorXd& theta) const {
    const auto K = states_.rows();
    const auto L = states_.cols();
    Eigen::MatrixXd out(K, L);
    Eigen::VectorXd lag(K);
    const std::span<const double> params(theta.data(), static_cast<std::size_t>(theta.size()));
    double delay = 0.0;
    if (model_.is_delayed()) delay = theta(static_cast<Eigen::Index>(*model_.delay_param_index));
    if (!std::isfinite(delay) || delay < 0.0 || delay > times_.back() - times_.front()) {
      out.setConstant(std::numeric_limits<double>::quiet_NaN());
      return out;
    }
    for (Eigen::Index i = 0; i < L; ++i) {
      const std::span<const double> x(states_.col(i).data(), static_cast<std::size_t>(K));
      std::span<const double> xd = x;
      if (model_.is_delayed() && delay > 0.0) {
        interpolate(times_[static_cast<std::size_t>(i)] - delay, lag);
        xd = std::span<const double>(lag.data(), static_cast<std::size_t>(K));
      }
      try {
        model_.rhs(x, xd, params, std::span<double>(out.col(i).data(), static_cast<std::size_t>(K)));
      } catch (const ModelEvaluationError&) {
        out.col(i).setConstant(std::numeric_limits<double>::quiet_NaN());
      }
    }
    return out;
  }

  [[nodiscard]] double distance(const Eigen::VectorXd& theta) const {
    return distance_trajectory(velocity_, simulate(theta));
  }

  [[nodiscard]] const ModelSpec& model() const { return model_; }

 private:
  void interpolate(double t, Eigen::VectorXd& out) const {
    if (t <= times_.front()) {
      out = states_.col(0);
      return;
    }
    const auto it = std::upper_bound(times_.begin(), times_.end(), t);
    if (it == times_.end()) {
      out = states_.col(states_.cols() - 1);
      return;
    }
    const auto hi = static_cast<Eigen::Index>(std::distance(times_.begin(), it));
    const double t0 = times_[static_cast<std::size_t>(hi - 1)];
    const double t1 = times_[static_cast<std::size_t>(hi)];
    const double s = (t - t0) / (t1 - t0);
    out = (1.0 - s) * states_.col(hi - 1) + s * states_.col(hi);
  }

  ModelSpec model_;
  std::vector<double> times_;
  Eigen::MatrixXd states_;
  Eigen::MatrixXd velocity_;
};

inline double distance_gradient(const SmoothedSystem& smoothed, const ModelSpec& model, const Eigen::VectorXd& theta) {
  return GradientSimulator(smoothed, model).distance(theta);
}

// ---------------------------------------------------------------------------
// Perturbation kernels

namespace detail {

inline double log_normal_pdf_diag(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::VectorXd& var) {
  const Eigen::ArrayXd r = (x - mean).array();
  return -0.5 * (r.square() / var.array()).sum() - 0.5 * (var.array().log().sum()) -
         0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi);
}

inline Eigen::VectorXd standard_normal(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = g(rng);
  return z;
}

inline double log_sum_exp(std::span<const double> v) {
  double m = -kInf;
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace detail

/// Weighted per-component variance of a population (weights normalised internally).
inline Eigen::VectorXd weighted_variance(const Population& pop) {
  const auto d = static_cast<Eigen::Index>(pop.dim());
  const double ws = pop.weight_sum();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const auto& p : pop.particles) mean += (p.weight / ws) * p.theta;
  Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
  for (const auto& p : pop.particles) var += (p.weight / ws) * (p.theta - mean).array().square().matrix();
  return var;
}

/// Diagonal Gaussian kernel with variance 2 x the weighted variance of the previous population.
class ComponentWiseKernel {
 public:
  ComponentWiseKernel(const Population& prev, const Prior& prior)
      : variance_((2.0 * weighted_variance(prev)).cwiseMax(prior.variance_floor())) {
    centers_.reserve(prev.particles.size());
    for (const auto& p : prev.particles) centers_.push_back(p.theta);
  }

  [[nodiscard]] const Eigen::VectorXd& variance() const { return variance_; }

  Eigen::VectorXd perturb_from(const Eigen::VectorXd& center, Rng& rng) const {
    return center + (variance_.array().sqrt() * detail::standard_normal(center.size(), rng).array()).matrix();
  }
  Eigen::VectorXd perturb(std::size_t j, Rng& rng) const { return perturb_from(centers_.at(j), rng); }

  [[nodiscard]] double log_density(const Eigen::VectorXd& theta, std::size_t j) const {
    return detail::log_normal_pdf_diag(theta, centers_[j], variance_);
  }

 private:
  Eigen::VectorXd variance_;
  std::vector<Eigen::VectorXd> centers_;
};

/// One component-wise perturbation of theta_star using the kernel fitted to prev.
inline Eigen::VectorXd perturb_componentwise(const Eigen::VectorXd& theta_star, const Population& prev,
                                             const Prior& prior, Rng& rng) {
  return ComponentWiseKernel(prev, prior).perturb_from(theta_star, rng);
}

struct FilteredSubset {
  std::vector<Eigen::VectorXd> thetas;
  std::vector<double> weights;  // sum to 1
  bool fell_back = false;       // no particle passed; the full population was used
};

/// Particles of the previous population whose stored distance is within the
/// next tolerance, with renormalised weights.
inline FilteredSubset olcm_filter(const Population& prev, double epsilon_next) {
  FilteredSubset out;
  for (const auto& p : prev.particles) {
    if (p.distance <= epsilon_next) {
      out.thetas.push_back(p.theta);
      out.weights.push_back(p.weight);
    }
  }
  if (out.thetas.empty()) {
    out.fell_back = true;
    for (const auto& p : prev.particles) {
      out.thetas.push_back(p.theta);
      out.weights.push_back(p.weight);
    }
  }
  double s = 0.0;
  for (double w : out.weights) s += w;
  if (!(s > 0.0)) throw std::domain_error("olcm_filter: subset has zero total weight");
  for (double& w : out.weights) w /= s;
  return out;
}

/// sum_j w_j (theta_j - theta_i)(theta_j - theta_i)^T plus a ridge of
/// 1e-8 * trace / d; `floor` (per-component variance) replaces the ridge when
/// the trace vanishes.
inline Eigen::MatrixXd olcm_covariance(const Eigen::VectorXd& theta_i, const FilteredSubset& subset,
                                       const Eigen::VectorXd& floor) {
  if (subset.thetas.empty()) throw std::invalid_argument("olcm_covariance: empty subset");
  const auto d = theta_i.size();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t j = 0; j < subset.thetas.size(); ++j) {
    const Eigen::VectorXd r = subset.thetas[j] - theta_i;
    cov.noalias() += subset.weights[j] * r * r.transpose();
  }
  const double ridge = 1e-8 * cov.trace() / static_cast<double>(d);
  cov.diagonal().array() += ridge;
  cov.diagonal() = cov.diagonal().cwiseMax(floor);
  return cov;
}

/// Multivariate normal kernel centred on each previous particle with its own
/// optimal local covariance.
class OlcmKernel {
 public:
  OlcmKernel(const Population& prev, double epsilon_next, const Prior& prior) {
    const FilteredSubset subset = olcm_filter(prev, epsilon_next);
    fell_back_ = subset.fell_back;
    const Eigen::VectorXd floor = prior.variance_floor();
    const auto d = static_cast<double>(prev.dim());
    for (const auto& p : prev.particles) {
      Local loc;
      loc.center = p.theta;
      Eigen::MatrixXd cov = olcm_covariance(p.theta, subset, floor);
      Eigen::LLT<Eigen::MatrixXd> llt(cov);
      if (llt.info() != Eigen::Success) {
        cov.diagonal() += floor + Eigen::VectorXd::Constant(cov.rows(), 1e-8 * cov.trace() / d);
        llt.compute(cov);
        if (llt.info() != Eigen::Success) throw std::domain_error("OLCM covariance is not positive definite");
      }
      loc.chol = llt.matrixL();
      loc.log_norm = -loc.chol.diagonal().array().log().sum() - 0.5 * d * std::log(2.0 * std::numbers::pi);
      locals_.push_back(std::move(loc));
    }
  }

  [[nodiscard]] bool fell_back() const { return fell_back_; }
  [[nodiscard]] Eigen::MatrixXd covariance(std::size_t j) const {
    return locals_.at(j).chol * locals_.at(j).chol.transpose();
  }

  Eigen::VectorXd perturb(std::size_t j, Rng& rng) const {
    const auto& loc = locals_.at(j);
    return loc.center + loc.chol * detail::standard_normal(loc.center.size(), rng);
  }

  [[nodiscard]] double log_density(const Eigen::VectorXd& theta, std::size_t j) const {
    const auto& loc = locals_[j];
    const Eigen::VectorXd z = loc.chol.triangularView<Eigen::Lower>().solve(theta - loc.center);
    return loc.log_norm - 0.5 * z.squaredNorm();
  }

 private:
  struct Local {
    Eigen::VectorXd center;
    Eigen::MatrixXd chol;
    double log_norm = 0.0;
  };
  std::vector<Local> locals_;
  bool fell_back_ = false;
};

enum class PerturbationKind { ComponentWise, OLCM };

inline std::string to_string(PerturbationKind k) { return k == PerturbationKind::OLCM ? "olcm" : "component-wise"; }

/// Importance weight pi(theta) / sum_j w_j K(theta | theta_j), evaluated in
/// log space. `log_kernel(theta, j)` must be the log density of the kernel
/// actually used to propose from particle j.
inline double compute_weight(const Eigen::VectorXd& theta, const Prior& prior, const Population& prev,
                             const std::function<double(const Eigen::VectorXd&, std::size_t)>& log_kernel) {
  if (prev.particles.empty()) return 1.0;
  const double ws = prev.weight_sum();
  std::vector<double> terms(prev.particles.size());
  for (std::size_t j = 0; j < prev.particles.size(); ++j) {
    const double w = prev.particles[j].weight / ws;
    terms[j] = (w > 0.0 ? std::log(w) : -kInf) + log_kernel(theta, j);
  }
  const double log_denominator = detail::log_sum_exp(terms);
  if (!std::isfinite(log_denominator)) throw std::domain_error("compute_weight: zero kernel mixture density");
  return std::exp(prior.log_density(theta) - log_denominator);
}

// ---------------------------------------------------------------------------
// Tolerance schedule

struct ToleranceUpdate {
  double epsilon = kInf;
  bool stalled = false;  // distances were degenerate; epsilon was nudged below their maximum
};

/// alpha-quantile of `distances` (linear interpolation between order
/// statistics), kept strictly below the largest distance.
inline ToleranceUpdate adaptive_tolerance(std::span<const double> distances, double alpha) {
  if (distances.empty()) throw std::invalid_argument("adaptive_tolerance: no distances");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("adaptive_tolerance: alpha must lie in (0, 1)");
  std::vector<double> d(distances.begin(), distances.end());
  for (double v : d) {
    if (!std::isfinite(v)) throw std::invalid_argument("adaptive_tolerance: distances must be finite");
  }
  std::sort(d.begin(), d.end());
  const double h = alpha * static_cast<double>(d.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, d.size() - 1);
  ToleranceUpdate out;
  out.epsilon = d[lo] + (h - static_cast<double>(lo)) * (d[hi] - d[lo]);
  const double top = d.back();
  if (out.epsilon >= top) {
    out.stalled = true;
    out.epsilon = top > 0.0 ? top * (1.0 - 1e-9) : 0.0;
  }
  return out;
}

struct ToleranceSchedule {
  std::vector<double> fixed;  // empty selects the adaptive quantile rule
  double alpha = 0.1;

  static ToleranceSchedule adaptive(double alpha) { return {{}, alpha}; }
  static ToleranceSchedule fixed_list(std::vector<double> eps) { return {std::move(eps), 0.0}; }
  [[nodiscard]] bool is_adaptive() const { return fixed.empty(); }
};

enum class DistanceKind { Trajectory, Gradient };

inline std::string to_string(DistanceKind k) { return k == DistanceKind::Gradient ? "gradient" : "trajectory"; }

struct SamplerConfig {
  std::size_t n_particles = 100;
  std::size_t n_generations = 5;  // index of the final population; n_generations + 1 populations in total
  ToleranceSchedule schedule = ToleranceSchedule::adaptive(0.1);
  PerturbationKind kernel = PerturbationKind::ComponentWise;
  DistanceKind distance = DistanceKind::Trajectory;
  std::uint64_t seed = 0;
  std::size_t max_attempts = 1'000'000;  // candidate proposals per generation
  unsigned jobs = 1;

  void validate() const {
    if (n_particles < 2) throw std::invalid_argument("n_particles must be at least 2");
    if (max_attempts == 0) throw std::invalid_argument("max_attempts must be positive");
    if (jobs == 0) throw std::invalid_argument("jobs must be at least 1");
    if (schedule.is_adaptive()) {
      if (!(schedule.alpha > 0.0 && schedule.alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
    } else {
      if (schedule.fixed.size() != n_generations + 1) {
        throw std::invalid_argument("fixed tolerance list needs n_generations + 1 entries");
      }
      for (std::size_t i = 1; i < schedule.fixed.size(); ++i) {
        if (!(schedule.fixed[i] < schedule.fixed[i - 1])) {
          throw std::invalid_argument("fixed tolerance list must be strictly decreasing");
        }
      }
    }
  }
};

inline nlohmann::json to_json(const SamplerConfig& c) {
  nlohmann::json j = {{"n_particles", c.n_particles},
                      {"n_generations", c.n_generations},
                      {"kernel", to_string(c.kernel)},
                      {"distance", to_string(c.distance)},
                      {"seed", c.seed},
                      {"max_attempts", c.max_attempts},
                      {"jobs", c.jobs}};
  if (c.schedule.is_adaptive()) {
    j["schedule"] = {{"kind", "adaptive"}, {"alpha", c.schedule.alpha}};
  } else {
    j["schedule"] = {{"kind", "fixed"}, {"tolerances", c.schedule.fixed}};
  }
  return j;
}

/// Distance between the observed data and data simulated at theta. The
/// generator is private to the attempt, so stochastic simulators stay reproducible.
using DistanceFn = std::function<double(const Eigen::VectorXd& theta, Rng& rng)>;

struct RunResult {
  std::vector<Population> populations;
  double seconds = 0.0;

  [[nodiscard]] const Population& final_population() const { return populations.back(); }
  [[nodiscard]] std::size_t total_generated() const {
    std::size_t n = 0;
    for (const auto& p : populations) n += p.generated_count;
    return n;
  }
  [[nodiscard]] std::size_t total_accepted() const {
    std::size_t n = 0;
    for (const auto& p : populations) n += p.accepted_count();
    return n;
  }
};

/// A generation hit the attempt cap; the completed populations are preserved.
class AttemptCapExceeded : public std::runtime_error {
 public:
  AttemptCapExceeded(const std::string& what, RunResult partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  [[nodiscard]] const RunResult& partial() const { return partial_; }

 private:
  RunResult partial_;
};

namespace detail {

class ProposalKernel {
 public:
  ProposalKernel(PerturbationKind kind, const Population& prev, double epsilon_next, const Prior& prior)
      : impl_(make(kind, prev, epsilon_next, prior)) {}

  Eigen::VectorXd perturb(std::size_t j, Rng& rng) const {
    return std::visit([&](const auto& k) { return k.perturb(j, rng); }, impl_);
  }
  [[nodiscard]] double log_density(const Eigen::VectorXd& theta, std::size_t j) const {
    return std::visit([&](const auto& k) { return k.log_density(theta, j); }, impl_);
  }

 private:
  using Impl = std::variant<ComponentWiseKernel, OlcmKernel>;
  static Impl make(PerturbationKind kind, const Population& prev, double eps, const Prior& prior) {
    if (kind == PerturbationKind::OLCM) return Impl(std::in_place_type<OlcmKernel>, prev, eps, prior);
    return Impl(std::in_place_type<ComponentWiseKernel>, prev, prior);
  }
  Impl impl_;
};

struct AttemptOutcome {
  bool simulated = false;
  bool accepted = false;
  Particle particle;
};

inline std::size_t sample_index(const std::vector<double>& cdf, Rng& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, cdf.back())(rng);
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min(static_cast<std::size_t>(std::distance(cdf.begin(), it)), cdf.size() - 1);
}

}  // namespace detail

/// Runs populations 0..n_generations. Attempt k of generation tau draws from
/// its own generator seeded by (seed, tau, k), so results do not depend on `jobs`.
inline RunResult run(const SamplerConfig& config, const Prior& prior, const DistanceFn& distance,
                     const std::function<void(const Population&)>& on_population = {}) {
  config.validate();
  if (prior.dim() == 0) throw std::invalid_argument("prior has no parameters");
  using Clock = std::chrono::steady_clock;
  const auto run_start = Clock::now();
  RunResult result;

  for (std::size_t tau = 0; tau <= config.n_generations; ++tau) {
    const auto gen_start = Clock::now();
    Population pop;
    pop.index = tau;
    const Population* prev = tau == 0 ? nullptr : &result.populations.back();

    if (!config.schedule.is_adaptive()) {
      pop.tolerance = config.schedule.fixed[tau];
    } else if (prev != nullptr) {
      std::vector<double> d;
      d.reserve(prev->particles.size());
      for (const auto& p : prev->particles) d.push_back(p.distance);
      const auto upd = adaptive_tolerance(d, config.schedule.alpha);
      pop.tolerance = upd.epsilon;
      pop.tolerance_stalled = upd.stalled;
    }

    std::optional<detail::ProposalKernel> kernel;
    std::vector<double> cdf;
    if (prev != nullptr) {
      kernel.emplace(config.kernel, *prev, pop.tolerance, prior);
      double acc = 0.0;
      for (const auto& p : prev->particles) cdf.push_back(acc += p.weight);
    }

    auto attempt = [&](std::size_t k) {
      detail::AttemptOutcome out;
      Rng rng = make_rng(config.seed, tau, k);
      Eigen::VectorXd theta;
      if (prev == nullptr) {
        theta = prior.sample(rng);
      } else {
        theta = kernel->perturb(detail::sample_index(cdf, rng), rng);
        if (!prior.contains(theta)) return out;
      }
      out.simulated = true;
      const double d = distance(theta, rng);
      if (!std::isfinite(d) || !(d <= pop.tolerance)) return out;
      out.accepted = true;
      out.particle.theta = std::move(theta);
      out.particle.distance = d;
      out.particle.weight =
          prev == nullptr ? 1.0
                          : compute_weight(out.particle.theta, prior, *prev, [&](const Eigen::VectorXd& t, std::size_t j) {
                              return kernel->log_density(t, j);
                            });
      return out;
    };

    std::size_t next = 0;
    auto consume = [&](detail::AttemptOutcome& o) {
      ++pop.proposed_count;
      if (o.simulated) ++pop.generated_count;
      if (o.accepted) pop.particles.push_back(std::move(o.particle));
    };

    if (config.jobs <= 1) {
      while (pop.particles.size() < config.n_particles && next < config.max_attempts) {
        auto o = attempt(next++);
        consume(o);
      }
    } else {
      const std::size_t batch = 4 * static_cast<std::size_t>(config.jobs);
      std::vector<detail::AttemptOutcome> outcomes;
      while (pop.particles.size() < config.n_particles && next < config.max_attempts) {
        const std::size_t count = std::min(batch, config.max_attempts - next);
        outcomes.assign(count, {});
        std::vector<std::exception_ptr> errors(config.jobs);
        std::vector<std::thread> workers;
        for (unsigned w = 0; w < config.jobs; ++w) {
          workers.emplace_back([&, w] {
            try {
              for (std::size_t i = w; i < count; i += config.jobs) outcomes[i] = attempt(next + i);
            } catch (...) {
              errors[w] = std::current_exception();
            }
          });
        }
        for (auto& t : workers) t.join();
        for (auto& e : errors) {
          if (e) std::rethrow_exception(e);
        }
        for (std::size_t i = 0; i < count && pop.particles.size() < config.n_particles; ++i) consume(outcomes[i]);
        next += count;
      }
    }

    pop.seconds = std::chrono::duration<double>(Clock::now() - gen_start).count();
    if (pop.particles.size() < config.n_particles) {
      result.seconds = std::chrono::duration<double>(Clock::now() - run_start).count();
      throw AttemptCapExceeded("generation " + std::to_string(tau) + " accepted " +
                                   std::to_string(pop.particles.size()) + " of " +
                                   std::to_string(config.n_particles) + " particles within " +
                                   std::to_string(config.max_attempts) + " proposals",
                               std::move(result));
    }
    double ws = pop.weight_sum();
    if (!(ws > 0.0) || !std::isfinite(ws)) throw std::domain_error("population weights are degenerate");
    for (auto& p : pop.particles) p.weight /= ws;
    result.populations.push_back(std::move(pop));
    if (on_population) on_population(result.populations.back());
  }
  result.seconds = std::chrono::duration<double>(Clock::now() - run_start).count();
  return result;
}

/// CSV with columns tau, <param names>, weight, distance.
inline void write_populations_csv(const std::filesystem::path& path, const std::vector<Population>& pops,
                                  const std::vector<std::string>& param_names) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "tau";
  for (const auto& n : param_names) out << ',' << n;
  out << ",weight,distance\n";
  for (const auto& pop : pops) {
    for (const auto& p : pop.particles) {
      out << pop.index;
      for (Eigen::Index k = 0; k < p.theta.size(); ++k) out << ',' << p.theta(k);
      out << ',' << p.weight << ',' << p.distance << '\n';
    }
  }
}

inline nlohmann::json run_report_json(const SamplerConfig& config, const RunResult& result) {
  nlohmann::json gens = nlohmann::json::array();
  for (const auto& p : result.populations) {
    gens.push_back({{"tau", p.index},
                    {"tolerance", std::isfinite(p.tolerance) ? nlohmann::json(p.tolerance) : nlohmann::json("inf")},
                    {"accepted", p.accepted_count()},
                    {"generated", p.generated_count},
                    {"proposed", p.proposed_count},
                    {"seconds", p.seconds},
                    {"tolerance_stalled", p.tolerance_stalled}});
  }
  return {{"config", to_json(config)},
          {"generations", gens},
          {"total_generated", result.total_generated()},
          {"total_accepted", result.total_accepted()},
          {"seconds", result.seconds}};
}

}  // namespace gpabc
