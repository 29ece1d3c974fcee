// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Pseudo-inverse guidance for Gaussian paths. The unconditional field is corrected as
//
//     v(x, y) = v(x) + sigma_t^2 d/dt ln(alpha_t / sigma_t) * gamma_t * g,
//     g = (y - A x1_hat)^T (r_t^2 A A^T + sigma_y^2 I)^{-1} A d x1_hat / d x,
//
// which is exact when q(x_1 | x_t) is Gaussian with covariance r_t^2 I.

#include "flowsolve/models.hpp"
#include "flowsolve/operators.hpp"

#include <string_view>

namespace flowsolve {

enum class Rt2Rule {
  FlowGeneral,  // sigma^2 / (sigma^2 + alpha^2)
  VpNative,     // 1 - alpha^2
  VpViaVe,      // (1 - alpha^2) / (2 - alpha^2)
};

enum class GammaRule {
  Unadaptive,  // 1
  VpAdaptive,  // sqrt(alpha / (alpha^2 + sigma^2))
  Disabled,    // 0, turns the correction off
};

struct GuidanceConfig {
  Rt2Rule rt2_rule = Rt2Rule::FlowGeneral;
  GammaRule gamma_rule = GammaRule::Unadaptive;
  double sigma_y = 0.0;
  bool null_range = false;

  void validate() const {
    if (!(sigma_y >= 0.0) || !std::isfinite(sigma_y))
      throw ConfigError(detail::cat("sigma_y must be finite and >= 0, got ", sigma_y));
    if (null_range && sigma_y != 0.0)
      throw ConfigError("null_range requires sigma_y = 0 (noiseless measurements)");
  }
};

inline std::string_view to_string(Rt2Rule r) {
  switch (r) {
    case Rt2Rule::FlowGeneral: return "flow";
    case Rt2Rule::VpNative: return "vp_native";
    case Rt2Rule::VpViaVe: return "vp_via_ve";
  }
  return "?";
}

inline std::string_view to_string(GammaRule g) {
  switch (g) {
    case GammaRule::Unadaptive: return "unadaptive";
    case GammaRule::VpAdaptive: return "vp_adaptive";
    case GammaRule::Disabled: return "disabled";
  }
  return "?";
}

inline Rt2Rule parse_rt2_rule(std::string_view s) {
  if (s == "flow") return Rt2Rule::FlowGeneral;
  if (s == "vp_native") return Rt2Rule::VpNative;
  if (s == "vp_via_ve") return Rt2Rule::VpViaVe;
  throw ConfigError(detail::cat("unknown rt2 rule '", s, "' (expected flow | vp_native | vp_via_ve)"));
}

inline GammaRule parse_gamma_rule(std::string_view s) {
  if (s == "unadaptive") return GammaRule::Unadaptive;
  if (s == "vp_adaptive") return GammaRule::VpAdaptive;
  if (s == "disabled") return GammaRule::Disabled;
  throw ConfigError(detail::cat("unknown gamma rule '", s, "' (expected unadaptive | vp_adaptive | disabled)"));
}

inline double rt2(Rt2Rule rule, const ProbPath& path, double t) {
  const ScheduleSample s = path.at(t);
  const double a2 = s.alpha * s.alpha, s2 = s.sigma * s.sigma;
  if (a2 + s2 == 0.0)
    throw DomainError(detail::cat("r_t^2 undefined where alpha and sigma both vanish (t = ", t, ")"));
  switch (rule) {
    case Rt2Rule::FlowGeneral: return s2 / (s2 + a2);
    case Rt2Rule::VpNative: return 1.0 - a2;
    case Rt2Rule::VpViaVe: return (1.0 - a2) / (2.0 - a2);
  }
  return 0.0;
}

inline double gamma(GammaRule rule, const ProbPath& path, double t) {
  switch (rule) {
    case GammaRule::Unadaptive: return 1.0;
    case GammaRule::Disabled: return 0.0;
    case GammaRule::VpAdaptive: {
      const ScheduleSample s = path.at(t);
      return std::sqrt(s.alpha / (s.alpha * s.alpha + s.sigma * s.sigma));
    }
  }
  return 0.0;
}

/// sigma_t^2 d/dt ln(alpha_t / sigma_t); equals (1 - t) / t on CondOT.
inline double correction_coefficient(const ProbPath& path, double t) {
  if (path.kind() == ProbPath::Kind::CondOT) {
    if (!(t > 0.0))
      throw SingularityError("guidance coefficient (1 - t) / t is infinite at t = 0 on cond_ot", t);
    return (1.0 - t) / t;
  }
  const ScheduleSample s = path.at(t);
  if (!(s.sigma > 0.0))
    throw SingularityError(detail::cat("guidance coefficient needs sigma_t > 0 (t = ", t, ")"), t);
  if (!(s.alpha > 0.0))
    throw SingularityError(detail::cat("guidance coefficient is infinite where alpha_t = 0 (t = ", t, ")"), t);
  return s.sigma * s.sigma * s.dalpha_dt / s.alpha - s.sigma * s.dsigma_dt;
}

/// g = vjp(A^T (r2 A A^T + sigma_y^2 I)^{-1} (y - A x1_hat)). Calls `vjp` exactly once.
template <typename VjpCallable>
Vector pigdm_g(const LinearOperator& op, const Vector& y, const Vector& x1_hat, VjpCallable&& vjp, double r2,
               double sigma_y, WarningLog* warnings = nullptr) {
  if (y.size() != op.out_dim())
    throw ShapeError(detail::cat("observation of shape ", detail::shape_str(y.size(), 1),
                                 " does not match operator ", op.shape_string()));
  const Vector residual = y - op.apply(x1_hat);
  const Vector cotangent = op.apply_transpose(op.solve_gram(r2, sigma_y * sigma_y, residual, warnings));
  return vjp(cotangent);
}

/// v + sigma_t^2 d/dt ln(alpha_t / sigma_t) gamma_t g.
inline Vector correct_vf(const Vector& v, const Vector& g, const ProbPath& path, double t, GammaRule rule) {
  const double weight = gamma(rule, path, t);
  if (weight == 0.0) return v;
  return v + (correction_coefficient(path, t) * weight) * g;
}

/// A^+ y + (I - A^+ A) x1_hat: keeps the measured row-space component exact.
inline Vector null_range_combine(const LinearOperator& op, const Vector& y, const Vector& x1_hat) {
  return op.pinv_apply(y) + x1_hat - op.range_project(x1_hat);
}

}  // namespace flowsolve
