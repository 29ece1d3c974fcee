// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Pretrained-model abstraction. A model is either a denoiser x1_hat(x_t, t) ≈ E[x_1 | x_t]
// or a vector field v(x_t, t); both are tied to the path they were "trained" under.
//
// For a Gaussian path the two are interchangeable:
//
//     v = (alpha_t d/dt ln(alpha_t / sigma_t)) x1_hat + (d/dt ln sigma_t) x_t
//
// and a denoiser trained under one path can be evaluated under another by matching
// SNR: x1_hat_q(x_t, t) = x1_hat_q'(alpha'_{t'} x_t / alpha_t, t') with snr_q'(t') = snr_q(t).

#include "flowsolve/paths.hpp"

#include <functional>

namespace flowsolve {

using EvalFn = std::function<Vector(const Vector& x, double t)>;
/// Vector-Jacobian product cotangent^T * d(output)/d(x) at (x, t).
using VjpFn = std::function<Vector(const Vector& x, double t, const Vector& cotangent)>;

struct Denoiser {
  EvalFn evaluate;
  VjpFn vjp;  // empty => finite-difference fallback
  ProbPath native_path = ProbPath::cond_ot();
};

struct VectorFieldModel {
  EvalFn evaluate;
  VjpFn vjp;  // empty => finite-difference fallback
  ProbPath native_path = ProbPath::cond_ot();
};

/// Central-difference vjp with h = 1e-4 (1 + |x|_inf). Costs 2 dim(x) evaluations.
inline Vector finite_difference_vjp(const EvalFn& f, const Vector& x, double t,
                                    const Vector& cotangent) {
  const double h = 1e-4 * (1.0 + x.cwiseAbs().maxCoeff());
  Vector out(x.size());
  Vector probe = x;
  for (Index j = 0; j < x.size(); ++j) {
    probe[j] = x[j] + h;
    const Vector fp = f(probe, t);
    probe[j] = x[j] - h;
    const Vector fm = f(probe, t);
    probe[j] = x[j];
    out[j] = cotangent.dot(fp - fm) / (2.0 * h);
  }
  return out;
}

inline VjpFn vjp_or_fallback(const VjpFn& vjp, const EvalFn& f) {
  if (vjp) return vjp;
  return [f](const Vector& x, double t, const Vector& c) { return finite_difference_vjp(f, x, t, c); };
}

// ---------------------------------------------------------------------------
// Denoiser <-> vector field
// ---------------------------------------------------------------------------

/// v = denoised * x1_hat + state * x_t.
struct ConversionCoefficients {
  double denoised;
  double state;
};

inline ConversionCoefficients conversion_coefficients(const ProbPath& path, double t) {
  const ScheduleSample s = path.at(t);
  if (!(s.sigma > 0.0))
    throw SingularityError(
        detail::cat("vector-field conversion is singular at t = ", t, " (sigma_t = 0) on path ",
                    path.name()),
        t);
  if (path.kind() == ProbPath::Kind::CondOT) return {1.0 / (1.0 - t), -1.0 / (1.0 - t)};
  const double dlog_sigma = s.dsigma_dt / s.sigma;
  // alpha d/dt ln(alpha/sigma) written without dividing by alpha, so alpha = 0 is fine
  return {s.dalpha_dt - s.alpha * dlog_sigma, dlog_sigma};
}

inline Vector vf_from_denoised(const ProbPath& path, double t, const Vector& x, const Vector& x1_hat) {
  if (path.kind() == ProbPath::Kind::CondOT) {
    if (!(t < 1.0))
      throw SingularityError("vector-field conversion is singular at t = 1 on path cond_ot", t);
    return (x1_hat - x) / (1.0 - t);
  }
  const ConversionCoefficients c = conversion_coefficients(path, t);
  return c.denoised * x1_hat + c.state * x;
}

inline Vector denoised_from_vf(const ProbPath& path, double t, const Vector& x, const Vector& v) {
  const ConversionCoefficients c = conversion_coefficients(path, t);
  if (!std::isfinite(c.denoised) || c.denoised == 0.0)
    throw SingularityError(
        detail::cat("denoiser recovery is degenerate at t = ", t, " on path ", path.name()), t);
  return (v - c.state * x) / c.denoised;
}

// ---------------------------------------------------------------------------
// Retiming across paths
// ---------------------------------------------------------------------------

struct RetimedPoint {
  double t_native;
  double scale;  // alpha'_{t'} / alpha_t
};

/// Range of target-path times whose SNR the native path can reach.
struct TimeWindow {
  double t_min;
  double t_max;
};

inline TimeWindow feasible_window(const ProbPath& native, const ProbPath& target) {
  if (native == target) return {0.0, 1.0};
  const SnrRange n = snr_range(native);
  const SnrRange q = snr_range(target);
  if (n.lower > q.upper || n.upper < q.lower)
    throw RangeUnattainable(detail::cat("path ", target.name(), " never reaches the SNR range of ",
                                        native.name()),
                            1.0, 0.0);
  const double t_min = n.lower <= q.lower ? 0.0 : inverse_snr(target, n.lower);
  const double t_max = n.upper >= q.upper ? 1.0 : inverse_snr(target, n.upper);
  return {t_min, t_max};
}

inline RetimedPoint retime_point(const ProbPath& native, const ProbPath& target, double t) {
  if (native == target) return {t, 1.0};
  const ScheduleSample st = target.at(t);
  const double s = st.sigma == 0.0 ? kInf : st.alpha / st.sigma;
  double t_native;
  try {
    t_native = inverse_snr(native, s);
  } catch (const RangeUnattainable&) {
    const TimeWindow w = feasible_window(native, target);
    throw RangeUnattainable(
        detail::cat("time ", t, " on path ", target.name(), " has snr ", s,
                    " which the model's native path ", native.name(),
                    " cannot reach; usable target times are [", w.t_min, ", ", w.t_max, "]"),
        w.t_min, w.t_max);
  }
  const ScheduleSample sn = native.at(t_native);
  double scale = 1.0;
  if (st.alpha > 0.0)
    scale = sn.alpha / st.alpha;
  else if (st.sigma > 0.0)
    scale = sn.sigma / st.sigma;  // same ratio at matched SNR
  return {t_native, scale};
}

/// Evaluate `d` under `target`. Identity when the paths already agree.
inline Denoiser retime(const Denoiser& d, const ProbPath& target) {
  if (d.native_path == target) return d;
  const ProbPath native = d.native_path;
  const EvalFn eval = d.evaluate;
  const VjpFn vjp = vjp_or_fallback(d.vjp, d.evaluate);
  Denoiser out;
  out.native_path = target;
  out.evaluate = [=](const Vector& x, double t) {
    const RetimedPoint p = retime_point(native, target, t);
    return eval(p.scale * x, p.t_native);
  };
  out.vjp = [=](const Vector& x, double t, const Vector& c) {
    const RetimedPoint p = retime_point(native, target, t);
    return Vector(p.scale * vjp(p.scale * x, p.t_native, c));
  };
  return out;
}

/// Vector field under `path` built from `d` (retimed first if its native path differs).
inline VectorFieldModel denoiser_to_vf(const Denoiser& d, const ProbPath& path) {
  const Denoiser dd = retime(d, path);
  const EvalFn eval = dd.evaluate;
  const VjpFn vjp = vjp_or_fallback(dd.vjp, dd.evaluate);
  VectorFieldModel m;
  m.native_path = path;
  m.evaluate = [=](const Vector& x, double t) { return vf_from_denoised(path, t, x, eval(x, t)); };
  m.vjp = [=](const Vector& x, double t, const Vector& c) {
    const ConversionCoefficients k = conversion_coefficients(path, t);
    return Vector(k.denoised * vjp(x, t, c) + k.state * c);
  };
  return m;
}

/// Denoiser under `path` recovered from `m`. The inversion happens on m's native path.
inline Denoiser vf_to_denoiser(const VectorFieldModel& m, const ProbPath& path) {
  const ProbPath native = m.native_path;
  const EvalFn eval = m.evaluate;
  const VjpFn vjp = vjp_or_fallback(m.vjp, m.evaluate);
  Denoiser d;
  d.native_path = native;
  d.evaluate = [=](const Vector& x, double t) { return denoised_from_vf(native, t, x, eval(x, t)); };
  d.vjp = [=](const Vector& x, double t, const Vector& c) {
    const ConversionCoefficients k = conversion_coefficients(native, t);
    if (!std::isfinite(k.denoised) || k.denoised == 0.0)
      throw SingularityError(detail::cat("denoiser recovery is degenerate at t = ", t), t);
    return Vector((vjp(x, t, c) - k.state * c) / k.denoised);
  };
  return retime(d, path);
}

}  // namespace flowsolve
