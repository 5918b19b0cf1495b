#pragma once

// Covariance functions over scalar time with analytic input derivatives.
//
// Two families are supported:
//   SE   k(t,t') = s2 * exp(-(t-t')^2 / (2 l2))
//   MLP  k(t,t') = s2 * (2/pi) * asin(Z),
//        Z = (w t t' + b) / sqrt((w t^2 + b + 1)(w t'^2 + b + 1))
//
// kernel_deriv_first differentiates with respect to the FIRST argument, so
// gram(..., d_left) yields dK(t*,t)/dt*, the cross-covariance between the
// derivative process at the test inputs and the function at the training
// inputs.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace gpabc {

enum class KernelFamily { SE, MLP };

inline std::string to_string(KernelFamily family) {
  return family == KernelFamily::SE ? "se" : "mlp";
}

inline KernelFamily kernel_family_from_string(const std::string& name) {
  if (name == "se" || name == "SE") return KernelFamily::SE;
  if (name == "mlp" || name == "MLP") return KernelFamily::MLP;
  throw std::invalid_argument("unknown kernel family: " + name);
}

struct KernelSpec {
  KernelFamily family = KernelFamily::SE;
  double variance = 1.0;         // signal variance, state units^2
  double lengthscale_sq = 1.0;   // SE only, time^2
  double weight_variance = 1.0;  // MLP only, 1/time^2
  double bias_variance = 1.0;    // MLP only

  static KernelSpec squared_exponential(double variance, double lengthscale_sq) {
    KernelSpec k;
    k.family = KernelFamily::SE;
    k.variance = variance;
    k.lengthscale_sq = lengthscale_sq;
    k.validate();
    return k;
  }

  static KernelSpec mlp(double variance, double weight_variance, double bias_variance) {
    KernelSpec k;
    k.family = KernelFamily::MLP;
    k.variance = variance;
    k.weight_variance = weight_variance;
    k.bias_variance = bias_variance;
    k.validate();
    return k;
  }

  static std::size_t num_params(KernelFamily family) { return family == KernelFamily::SE ? 2 : 3; }
  [[nodiscard]] std::size_t num_params() const { return num_params(family); }

  /// Hyperparameters in the order used by the optimizer:
  /// SE -> (log s2, log l2), MLP -> (log s2, log w, log b).
  [[nodiscard]] Eigen::VectorXd log_params() const {
    Eigen::VectorXd p(num_params());
    p(0) = std::log(variance);
    if (family == KernelFamily::SE) {
      p(1) = std::log(lengthscale_sq);
    } else {
      p(1) = std::log(weight_variance);
      p(2) = std::log(bias_variance);
    }
    return p;
  }

  static KernelSpec from_log_params(KernelFamily family, const Eigen::Ref<const Eigen::VectorXd>& p) {
    if (static_cast<std::size_t>(p.size()) != num_params(family)) {
      throw std::invalid_argument("wrong number of kernel log-parameters");
    }
    if (family == KernelFamily::SE) return squared_exponential(std::exp(p(0)), std::exp(p(1)));
    return mlp(std::exp(p(0)), std::exp(p(1)), std::exp(p(2)));
  }

  void validate() const {
    auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
    bool ok = positive(variance);
    if (family == KernelFamily::SE) {
      ok = ok && positive(lengthscale_sq);
    } else {
      ok = ok && positive(weight_variance) && positive(bias_variance);
    }
    if (!ok) throw std::invalid_argument("kernel hyperparameters must be finite and strictly positive");
  }
};

namespace detail {

inline void require_finite(double t, double tp) {
  if (!std::isfinite(t) || !std::isfinite(tp)) {
    throw std::invalid_argument("kernel inputs must be finite");
  }
}

inline constexpr double kMlpClamp = 1.0 - 1e-12;

// Pieces of the MLP kernel shared by value, derivatives and hyperparameter gradients.
struct MlpTerms {
  double a;      // w t t' + b
  double A;      // w t^2 + b + 1
  double B;      // w t'^2 + b + 1
  double root;   // sqrt(A B)
  double z;      // clamped a / root
  double inv_sqrt_one_minus_z2;
};

inline MlpTerms mlp_terms(const KernelSpec& k, double t, double tp) {
  const double w = k.weight_variance;
  const double b = k.bias_variance;
  MlpTerms m{};
  m.a = w * t * tp + b;
  m.A = w * t * t + b + 1.0;
  m.B = w * tp * tp + b + 1.0;
  m.root = std::sqrt(m.A * m.B);
  const double z = m.a / m.root;
  if (!std::isfinite(z)) throw std::domain_error("MLP kernel: non-finite normalised inner product");
  m.z = std::clamp(z, -kMlpClamp, kMlpClamp);
  m.inv_sqrt_one_minus_z2 = 1.0 / std::sqrt(1.0 - m.z * m.z);
  return m;
}

inline double mlp_scale(const KernelSpec& k) { return k.variance * 2.0 / std::numbers::pi; }

// dZ/dt
inline double mlp_dz_dt(const KernelSpec& k, const MlpTerms& m, double t, double tp) {
  return k.weight_variance / m.root * (tp - m.a * t / m.A);
}

}  // namespace detail

inline double kernel_eval(const KernelSpec& k, double t, double tp) {
  detail::require_finite(t, tp);
  if (k.family == KernelFamily::SE) {
    const double r = t - tp;
    return k.variance * std::exp(-0.5 * r * r / k.lengthscale_sq);
  }
  const auto m = detail::mlp_terms(k, t, tp);
  return detail::mlp_scale(k) * std::asin(m.z);
}

/// dk(t,t')/dt.
inline double kernel_deriv_first(const KernelSpec& k, double t, double tp) {
  detail::require_finite(t, tp);
  if (k.family == KernelFamily::SE) {
    const double r = t - tp;
    return -(r / k.lengthscale_sq) * k.variance * std::exp(-0.5 * r * r / k.lengthscale_sq);
  }
  const auto m = detail::mlp_terms(k, t, tp);
  return detail::mlp_scale(k) * m.inv_sqrt_one_minus_z2 * detail::mlp_dz_dt(k, m, t, tp);
}

/// d^2 k(t,t') / dt dt'.
inline double kernel_deriv_mixed(const KernelSpec& k, double t, double tp) {
  detail::require_finite(t, tp);
  if (k.family == KernelFamily::SE) {
    const double r = t - tp;
    const double l2 = k.lengthscale_sq;
    return (1.0 / l2 - r * r / (l2 * l2)) * k.variance * std::exp(-0.5 * r * r / l2);
  }
  const double w = k.weight_variance;
  const auto m = detail::mlp_terms(k, t, tp);
  const double zt = detail::mlp_dz_dt(k, m, t, tp);
  // Z is symmetric in its arguments, so dZ/dt' follows by swapping roles (A <-> B).
  const double ztp = w / m.root * (t - m.a * tp / m.B);
  const double ztt = w / m.root * ((1.0 - w * t * t / m.A) - w * tp * (tp - m.a * t / m.A) / m.B);
  const double s = m.inv_sqrt_one_minus_z2;
  return detail::mlp_scale(k) * (m.z * s * s * s * zt * ztp + s * ztt);
}

/// Gradient of k(t,t') with respect to the kernel log-parameters (see KernelSpec::log_params).
/// Writes d k(t, t') / d log(param) for each kernel parameter into `g` (size num_params()).
inline void kernel_log_param_grad(const KernelSpec& k, double t, double tp, std::span<double> g) {
  detail::require_finite(t, tp);
  if (k.family == KernelFamily::SE) {
    const double r = t - tp;
    const double val = k.variance * std::exp(-0.5 * r * r / k.lengthscale_sq);
    g[0] = val;
    g[1] = val * 0.5 * r * r / k.lengthscale_sq;
    return;
  }
  const auto m = detail::mlp_terms(k, t, tp);
  const double scale = detail::mlp_scale(k);
  g[0] = scale * std::asin(m.z);
  const double dz_dw = t * tp / m.root - 0.5 * m.z * (t * t / m.A + tp * tp / m.B);
  const double dz_db = 1.0 / m.root - 0.5 * m.z * (1.0 / m.A + 1.0 / m.B);
  g[1] = scale * m.inv_sqrt_one_minus_z2 * dz_dw * k.weight_variance;
  g[2] = scale * m.inv_sqrt_one_minus_z2 * dz_db * k.bias_variance;
}

inline Eigen::VectorXd kernel_log_param_grad(const KernelSpec& k, double t, double tp) {
  Eigen::VectorXd g(k.num_params());
  kernel_log_param_grad(k, t, tp, std::span<double>(g.data(), static_cast<std::size_t>(g.size())));
  return g;
}

enum class GramMode { plain, d_left, d_mixed };

inline Eigen::MatrixXd gram(const KernelSpec& k, std::span<const double> times_a, std::span<const double> times_b,
                            GramMode mode = GramMode::plain) {
  if (times_a.empty() || times_b.empty()) throw std::invalid_argument("gram: empty time grid");
  const auto rows = static_cast<Eigen::Index>(times_a.size());
  const auto cols = static_cast<Eigen::Index>(times_b.size());
  Eigen::MatrixXd out(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double ta = times_a[static_cast<std::size_t>(i)];
      const double tb = times_b[static_cast<std::size_t>(j)];
      switch (mode) {
        case GramMode::plain: out(i, j) = kernel_eval(k, ta, tb); break;
        case GramMode::d_left: out(i, j) = kernel_deriv_first(k, ta, tb); break;
        case GramMode::d_mixed: out(i, j) = kernel_deriv_mixed(k, ta, tb); break;
      }
    }
  }
  return out;
}

}  // namespace gpabc
