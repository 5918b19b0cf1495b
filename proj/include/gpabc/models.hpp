#pragma once

// Benchmark dynamical systems: Lotka-Volterra (ODE), Hes1 (DDE) and the
// five-species signal transduction cascade (ODE).

#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpabc/integrators.hpp"
#include "gpabc/kernels.hpp"

namespace gpabc {

struct UniformPrior {
  double lo = 0.0;
  double hi = 1.0;

  [[nodiscard]] double width() const { return hi - lo; }
  [[nodiscard]] bool contains(double v) const { return v >= lo && v <= hi; }
};

/// Evaluation of the right-hand side hit a pole (e.g. K_m + [Rpp] = 0).
class ModelEvaluationError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct ModelSpec {
  std::string name;
  std::size_t state_dim = 0;
  std::size_t param_dim = 0;
  std::vector<std::string> state_names;
  std::vector<std::string> param_names;
  RhsFn rhs;
  std::optional<std::size_t> delay_param_index;
  std::vector<UniformPrior> priors;
  std::vector<double> true_params;
  std::vector<double> default_initial_state;
  KernelFamily gp_kernel = KernelFamily::SE;

  [[nodiscard]] bool is_delayed() const { return delay_param_index.has_value(); }

  void validate() const {
    if (state_dim == 0 || param_dim == 0) throw std::invalid_argument(name + ": empty model dimensions");
    if (priors.size() != param_dim || true_params.size() != param_dim || param_names.size() != param_dim) {
      throw std::invalid_argument(name + ": parameter metadata size mismatch");
    }
    if (default_initial_state.size() != state_dim || state_names.size() != state_dim) {
      throw std::invalid_argument(name + ": state metadata size mismatch");
    }
    for (const auto& p : priors) {
      if (!(p.lo < p.hi)) throw std::invalid_argument(name + ": prior bounds must satisfy lo < hi");
    }
    if (delay_param_index && *delay_param_index >= param_dim) {
      throw std::invalid_argument(name + ": delay parameter index out of range");
    }
  }
};

inline std::string format_params(std::span<const double> params) {
  std::ostringstream os;
  os.precision(17);
  os << '(';
  for (std::size_t i = 0; i < params.size(); ++i) os << (i ? ", " : "") << params[i];
  os << ')';
  return os.str();
}

/// f(x(t), x(t - t_d), theta). For ODE models pass the current state twice.
inline std::vector<double> rhs_eval(const ModelSpec& model, std::span<const double> state,
                                    std::span<const double> delayed_state, std::span<const double> params) {
  if (state.size() != model.state_dim || delayed_state.size() != model.state_dim ||
      params.size() != model.param_dim) {
    throw std::invalid_argument(model.name + ": rhs_eval dimension mismatch");
  }
  std::vector<double> out(model.state_dim);
  model.rhs(state, delayed_state, params, out);
  return out;
}

/// x' = a x - x y,  y' = b x y - y.   theta = (a, b)
inline ModelSpec lotka_volterra() {
  ModelSpec m;
  m.name = "lotka-volterra";
  m.state_dim = 2;
  m.param_dim = 2;
  m.state_names = {"x", "y"};
  m.param_names = {"alpha", "beta"};
  m.rhs = [](std::span<const double> s, std::span<const double>, std::span<const double> p, std::span<double> d) {
    d[0] = p[0] * s[0] - s[0] * s[1];
    d[1] = p[1] * s[0] * s[1] - s[1];
  };
  m.priors = {{-10.0, 10.0}, {-10.0, 10.0}};
  m.true_params = {1.0, 1.0};
  m.default_initial_state = {1.0, 0.5};
  m.gp_kernel = KernelFamily::SE;
  return m;
}

inline constexpr double kHes1HillCoefficient = 5.0;

/// mu' = 1 / (1 + (p(t - t_d) / p0)^n) - mu_m mu,  p' = mu - mu_p p,  n = 5.
/// theta = (mu_m, mu_p, p0, t_d)
inline ModelSpec hes1() {
  ModelSpec m;
  m.name = "hes1";
  m.state_dim = 2;
  m.param_dim = 4;
  m.state_names = {"mu", "p"};
  m.param_names = {"mu_m", "mu_p", "p0", "t_d"};
  m.rhs = [](std::span<const double> s, std::span<const double> lag, std::span<const double> p,
             std::span<double> d) {
    const double r = lag[1] / p[2];
    const double r2 = r * r;
    d[0] = 1.0 / (1.0 + r2 * r2 * r) - p[0] * s[0];
    d[1] = s[0] - p[1] * s[1];
  };
  m.delay_param_index = 3;
  m.priors = {{-2.0, 2.0}, {-2.0, 2.0}, {0.0, 200.0}, {0.0, 50.0}};
  m.true_params = {0.03, 0.03, 100.0, 25.0};
  m.default_initial_state = {3.0, 3.0};
  m.gp_kernel = KernelFamily::SE;
  return m;
}

/// Signal transduction cascade, state ([S], [S_d], [R], [RS], [R_pp]),
/// theta = (k1, k2, k3, k4, V, K_m).
inline ModelSpec signal_transduction() {
  ModelSpec m;
  m.name = "signal-transduction";
  m.state_dim = 5;
  m.param_dim = 6;
  m.state_names = {"S", "S_d", "R", "RS", "R_pp"};
  m.param_names = {"k1", "k2", "k3", "k4", "V", "K_m"};
  m.rhs = [](std::span<const double> s, std::span<const double>, std::span<const double> p, std::span<double> d) {
    const double S = s[0], R = s[2], RS = s[3], Rpp = s[4];
    const double denom = p[5] + Rpp;
    if (denom == 0.0) {
      throw ModelEvaluationError("signal-transduction: K_m + [R_pp] = 0 for parameters " + format_params(p));
    }
    const double mm = p[4] * Rpp / denom;
    const double bind = p[1] * S * R;
    d[0] = -p[0] * S - bind + p[2] * RS;
    d[1] = p[0] * S;
    d[2] = -bind + p[2] * RS + mm;
    d[3] = bind - p[2] * RS - p[3] * RS;
    d[4] = p[3] * RS - mm;
  };
  m.priors = {{0.05, 0.09}, {0.4, 0.8}, {0.03, 0.07}, {0.1, 0.5}, {0.015, 0.0195}, {0.1, 0.5}};
  m.true_params = {0.07, 0.6, 0.05, 0.3, 0.017, 0.3};
  m.default_initial_state = {1.0, 0.0, 1.0, 0.0, 0.0};
  m.gp_kernel = KernelFamily::MLP;
  return m;
}

inline std::vector<std::string> model_names() { return {"lotka-volterra", "hes1", "signal-transduction"}; }

inline ModelSpec model_by_name(const std::string& name) {
  if (name == "lotka-volterra" || name == "lotka") return lotka_volterra();
  if (name == "hes1") return hes1();
  if (name == "signal-transduction" || name == "cascade") return signal_transduction();
  throw std::invalid_argument("unknown model: " + name);
}

/// Integrate a model at `params`. ODE models start from `initial`; delayed
/// models use `initial` as the constant history on t <= grid.front().
inline Trajectory simulate_model(const ModelSpec& model, std::span<const double> params,
                                 std::span<const double> initial, std::span<const double> t_grid,
                                 const IntegratorOptions& opt = {}) {
  if (params.size() != model.param_dim || initial.size() != model.state_dim) {
    throw std::invalid_argument(model.name + ": simulate_model dimension mismatch");
  }
  if (model.is_delayed()) {
    return integrate_dde(model.rhs, params, params[*model.delay_param_index], initial, t_grid, opt);
  }
  return integrate_ode(model.rhs, params, initial, t_grid, opt);
}

}  // namespace gpabc
