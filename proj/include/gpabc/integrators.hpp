#pragma once

// Dormand-Prince 4(5) integration for ODEs and constant-history DDEs.
//
// Steps are clipped so that every requested output time is hit exactly; no
// interpolation is involved in sampling the trajectory. For DDEs the accepted
// steps are recorded and a cubic Hermite interpolant over them supplies the
// delayed state (method of steps: the step size never exceeds the delay, so
// every delayed query lands in the already-computed solution).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace gpabc {

/// Integration could not be completed (blow-up, step-size underflow, step budget).
/// Samplers treat this as a rejected candidate rather than a fatal error.
class IntegrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct IntegratorOptions {
  double rtol = 1e-6;
  double atol = 1e-8;
  std::size_t max_steps = 200000;
  double max_abs_state = 1e12;
  double initial_step = 0.0;  // 0 selects automatically
};

struct Trajectory {
  std::vector<double> times;
  Eigen::MatrixXd states;  // K x L, column i is the state at times[i]

  [[nodiscard]] std::size_t size() const { return times.size(); }
  [[nodiscard]] Eigen::Index state_dim() const { return states.rows(); }
};

namespace detail {

inline void check_grid(std::span<const double> grid) {
  if (grid.empty()) throw std::invalid_argument("time grid is empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!std::isfinite(grid[i])) throw std::invalid_argument("time grid contains non-finite values");
    if (i > 0 && !(grid[i] > grid[i - 1])) throw std::invalid_argument("time grid must be strictly increasing");
  }
}

// Accepted steps stored with the Dormand-Prince continuous extension, so the
// history is as accurate as the steps themselves.
class DenseHistory {
 public:
  explicit DenseHistory(Eigen::VectorXd constant_history) : constant_(std::move(constant_history)) {}

  /// `coeffs` columns are the five dense-output vectors of the step [t0, t0 + h].
  void push(double t0, double h, const Eigen::MatrixXd& coeffs) {
    start_.push_back(t0);
    width_.push_back(h);
    coeffs_.push_back(coeffs);
  }

  void eval(double t, Eigen::Ref<Eigen::VectorXd> out) const {
    if (start_.empty() || t <= start_.front()) {
      out = constant_;
      return;
    }
    const double end = start_.back() + width_.back();
    if (t > end) {
      // Only reachable through rounding at the step boundary.
      if (t - end > 1e-9 * std::max(1.0, std::abs(t))) {
        throw std::logic_error("delayed state requested ahead of the integrated solution");
      }
      t = end;
    }
    const auto it = std::upper_bound(start_.begin(), start_.end(), t);
    const auto i = static_cast<std::size_t>(std::distance(start_.begin(), it)) - 1;
    const double s = std::min(1.0, (t - start_[i]) / width_[i]);
    const double s1 = 1.0 - s;
    const auto& c = coeffs_[i];
    out = c.col(0) + s * (c.col(1) + s1 * (c.col(2) + s * (c.col(3) + s1 * c.col(4))));
  }

 private:
  Eigen::VectorXd constant_;
  std::vector<double> start_;
  std::vector<double> width_;
  std::vector<Eigen::MatrixXd> coeffs_;
};

using SystemFn = std::function<void(double t, const Eigen::VectorXd& x, Eigen::VectorXd& dxdt)>;
using StepObserver = std::function<void(double t0, double h, const Eigen::MatrixXd& dense)>;

// Dormand-Prince 5(4) with FSAL and the standard PI-free step controller.
// `stops` must be sorted, start after t0, and contain every output time; the
// solver never steps across a stop. States at output times are written into
// the returned trajectory. `max_step` bounds the step size.
inline Trajectory dopri5(const SystemFn& f, Eigen::VectorXd x, std::span<const double> grid,
                         const std::vector<double>& stops, double max_step, const IntegratorOptions& opt,
                         const StepObserver& observer = {}) {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                          b6 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;
  static constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                          d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                          d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;

  const Eigen::Index n = x.size();
  Trajectory out;
  out.times.assign(grid.begin(), grid.end());
  out.states.resize(n, static_cast<Eigen::Index>(grid.size()));
  out.states.col(0) = x;
  if (grid.size() == 1) return out;

  double t = grid.front();
  const double t_end = grid.back();
  Eigen::VectorXd k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), tmp(n), x_new(n), err(n);
  f(t, x, k1);
  if (!k1.allFinite()) throw IntegrationError("non-finite derivative at the initial state");
  Eigen::MatrixXd dense(n, observer ? 5 : 0);

  auto error_norm = [&](const Eigen::VectorXd& e, const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sc = opt.atol + opt.rtol * std::max(std::abs(a(i)), std::abs(b(i)));
      const double r = e(i) / sc;
      acc += r * r;
    }
    return std::sqrt(acc / static_cast<double>(n));
  };

  double h = opt.initial_step;
  if (h <= 0.0) {
    // Hairer-Wanner starting step heuristic.
    Eigen::VectorXd sc = (opt.atol + opt.rtol * x.array().abs()).matrix();
    const double d0 = std::sqrt((x.array() / sc.array()).square().mean());
    const double d1 = std::sqrt((k1.array() / sc.array()).square().mean());
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min({h0, t_end - t, max_step});
    tmp = x + h0 * k1;
    f(t + h0, tmp, k2);
    const double d2 = std::sqrt(((k2 - k1).array() / sc.array()).square().mean()) / h0;
    const double h1 = std::max(d1, d2) <= 1e-15 ? std::max(1e-6, h0 * 1e-3)
                                                  : std::pow(0.01 / std::max(d1, d2), 1.0 / 5.0);
    h = std::min(100 * h0, h1);
  }
  h = std::min(h, max_step);

  std::size_t next_out = 1;
  std::size_t next_stop = 0;
  std::size_t steps = 0;
  while (next_out < grid.size()) {
    if (++steps > opt.max_steps) throw IntegrationError("step budget exhausted");
    while (next_stop < stops.size() && stops[next_stop] <= t) ++next_stop;
    const double stop = next_stop < stops.size() ? stops[next_stop] : t_end;
    bool hits_stop = false;
    double step = std::min(h, max_step);
    if (t + step >= stop - 1e-12 * std::max(1.0, std::abs(stop))) {
      step = stop - t;
      hits_stop = true;
    }
    if (!(step > 1e-13 * std::max(1.0, std::abs(t)))) throw IntegrationError("step size underflow");

    tmp = x + step * (a21 * k1);
    f(t + c2 * step, tmp, k2);
    tmp = x + step * (a31 * k1 + a32 * k2);
    f(t + c3 * step, tmp, k3);
    tmp = x + step * (a41 * k1 + a42 * k2 + a43 * k3);
    f(t + c4 * step, tmp, k4);
    tmp = x + step * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
    f(t + c5 * step, tmp, k5);
    tmp = x + step * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
    f(t + step, tmp, k6);
    x_new = x + step * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    f(t + step, x_new, k7);
    err = step * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    const double en = error_norm(err, x, x_new);

    if (!std::isfinite(en) || !x_new.allFinite() || !k7.allFinite()) {
      h = 0.25 * step;
      continue;
    }
    if (en <= 1.0) {
      if (observer) {
        dense.col(0) = x;
        dense.col(1) = x_new - x;
        dense.col(2) = step * k1 - dense.col(1);
        dense.col(3) = dense.col(1) - step * k7 - dense.col(2);
        dense.col(4) = step * (d1 * k1 + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);
        observer(t, hits_stop ? stop - t : step, dense);
      }
      t = hits_stop ? stop : t + step;
      x = x_new;
      k1 = k7;
      if (x.cwiseAbs().maxCoeff() > opt.max_abs_state) throw IntegrationError("state magnitude exceeded bound");
      while (next_out < grid.size() && std::abs(grid[next_out] - t) <= 1e-10 * std::max(1.0, std::abs(t))) {
        out.states.col(static_cast<Eigen::Index>(next_out)) = x;
        ++next_out;
      }
      const double fac = en == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 5.0);
      // A clipped step says nothing about the natural step size; keep the larger one.
      h = hits_stop ? std::max(h, step * fac) : step * fac;
    } else {
      h = step * std::clamp(0.9 * std::pow(en, -0.2), 0.1, 1.0);
    }
  }
  return out;
}

inline std::vector<double> merge_stops(std::span<const double> grid, std::vector<double> extra) {
  extra.insert(extra.end(), grid.begin() + 1, grid.end());
  std::sort(extra.begin(), extra.end());
  extra.erase(std::unique(extra.begin(), extra.end(),
                          [](double a, double b) { return std::abs(a - b) <= 1e-10 * std::max(1.0, std::abs(a)); }),
              extra.end());
  return extra;
}

}  // namespace detail

/// Right-hand side of an autonomous system with an optional delayed state:
/// dxdt = f(x(t), x(t - t_d), theta).
using RhsFn = std::function<void(std::span<const double> state, std::span<const double> delayed_state,
                                 std::span<const double> params, std::span<double> dxdt)>;

/// Integrate dx/dt = rhs(x, x, params) from grid.front() with x(grid.front()) = x0.
inline Trajectory integrate_ode(const RhsFn& rhs, std::span<const double> params, std::span<const double> x0,
                                std::span<const double> t_grid, const IntegratorOptions& opt = {}) {
  detail::check_grid(t_grid);
  const auto n = static_cast<Eigen::Index>(x0.size());
  Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(x0.data(), n);
  detail::SystemFn f = [&](double, const Eigen::VectorXd& s, Eigen::VectorXd& d) {
    std::span<const double> sv(s.data(), static_cast<std::size_t>(n));
    rhs(sv, sv, params, std::span<double>(d.data(), static_cast<std::size_t>(n)));
  };
  return detail::dopri5(f, std::move(x), t_grid, detail::merge_stops(t_grid, {}), INFINITY, opt);
}

/// Integrate a constant-history DDE dx/dt = rhs(x(t), x(t - delay), params) with
/// x(t) = history for t <= grid.front().
inline Trajectory integrate_dde(const RhsFn& rhs, std::span<const double> params, double delay,
                                std::span<const double> history, std::span<const double> t_grid,
                                const IntegratorOptions& opt = {}) {
  detail::check_grid(t_grid);
  if (!(delay > 0.0) || !std::isfinite(delay)) throw IntegrationError("delay must be positive and finite");
  const auto n = static_cast<Eigen::Index>(history.size());
  Eigen::VectorXd h0 = Eigen::Map<const Eigen::VectorXd>(history.data(), n);
  detail::DenseHistory past(h0);
  Eigen::VectorXd delayed(n);
  detail::SystemFn f = [&](double t, const Eigen::VectorXd& s, Eigen::VectorXd& d) {
    past.eval(t - delay, delayed);
    rhs(std::span<const double>(s.data(), static_cast<std::size_t>(n)),
        std::span<const double>(delayed.data(), static_cast<std::size_t>(n)), params,
        std::span<double>(d.data(), static_cast<std::size_t>(n)));
  };
  detail::StepObserver record = [&](double t, double h, const Eigen::MatrixXd& dense) { past.push(t, h, dense); };
  // Derivative discontinuities propagate from t0 at multiples of the delay;
  // landing on them keeps the error estimate honest.
  std::vector<double> breaks;
  const double t0 = t_grid.front();
  const double t_end = t_grid.back();
  for (int k = 1; k <= 8 && t0 + k * delay < t_end; ++k) breaks.push_back(t0 + k * delay);
  return detail::dopri5(f, std::move(h0), t_grid, detail::merge_stops(t_grid, std::move(breaks)), delay, opt,
                        record);
}

}  // namespace gpabc
