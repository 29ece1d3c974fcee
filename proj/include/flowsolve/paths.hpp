// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Affine Gaussian probability paths q(x_t | x_1) = N(alpha_t x_1, sigma_t^2 I).
//
// Time runs forward everywhere in this library: t = 0 is pure noise and t = 1
// is data. Diffusion schedules that are conventionally written in reverse time
// (VP, VE) are re-expressed here once, so callers never see reversed indices.

#include "flowsolve/core.hpp"

#include <functional>
#include <memory>
#include <string>

namespace flowsolve {

struct ScheduleSample {
  double t = 0.0;
  double alpha = 0.0;
  double sigma = 0.0;
  double dalpha_dt = 0.0;
  double dsigma_dt = 0.0;
};

class ProbPath {
 public:
  enum class Kind { CondOT, VP, VE, Custom };

  using ScheduleFn = std::function<ScheduleSample(double)>;

  /// alpha_t = t, sigma_t = 1 - t.
  static ProbPath cond_ot() { return ProbPath(Kind::CondOT); }

  /// Variance preserving path with linear noise rate beta(s) = beta_min + s (beta_max - beta_min)
  /// in reverse time s. `eps` truncates the reverse-time range to [eps, 1], which gives the
  /// path a finite maximum SNR (the usual training cut-off of score-based VP models).
  static ProbPath vp(double beta_min = 0.1, double beta_max = 20.0, double eps = 0.0) {
    if (!(beta_min >= 0.0) || !(beta_max >= beta_min) || !(beta_max > 0.0))
      throw DomainError(detail::cat("vp path needs 0 <= beta_min <= beta_max, beta_max > 0; got ",
                                    beta_min, ", ", beta_max));
    if (!(eps >= 0.0 && eps < 1.0))
      throw DomainError(detail::cat("vp path eps must lie in [0, 1), got ", eps));
    ProbPath p(Kind::VP);
    p.p0_ = beta_min;
    p.p1_ = beta_max;
    p.p2_ = eps;
    return p;
  }

  /// Variance exploding path: alpha = 1, sigma_t = sigma_min (sigma_max / sigma_min)^(1 - t).
  static ProbPath ve(double sigma_min = 0.01, double sigma_max = 50.0) {
    if (!(sigma_min > 0.0) || !(sigma_max > sigma_min))
      throw DomainError(detail::cat("ve path needs 0 < sigma_min < sigma_max; got ", sigma_min,
                                    ", ", sigma_max));
    ProbPath p(Kind::VE);
    p.p0_ = sigma_min;
    p.p1_ = sigma_max;
    return p;
  }

  /// A user supplied schedule. Two custom paths compare equal only if they share the handle.
  static ProbPath custom(std::string name, ScheduleFn fn) {
    ProbPath p(Kind::Custom);
    p.custom_ = std::make_shared<const CustomSchedule>(CustomSchedule{std::move(name), std::move(fn)});
    return p;
  }

  Kind kind() const noexcept { return kind_; }

  double beta_min() const noexcept { return p0_; }
  double beta_max() const noexcept { return p1_; }
  double vp_eps() const noexcept { return p2_; }
  double sigma_min() const noexcept { return p0_; }
  double sigma_max() const noexcept { return p1_; }

  std::string name() const {
    switch (kind_) {
      case Kind::CondOT: return "cond_ot";
      case Kind::VP: return "vp";
      case Kind::VE: return "ve";
      case Kind::Custom: return custom_->name;
    }
    return "?";
  }

  ScheduleSample at(double t) const {
    if (!(t >= 0.0 && t <= 1.0))
      throw DomainError(detail::cat("time ", t, " outside [0, 1] for path ", name()));
    switch (kind_) {
      case Kind::CondOT: return {t, t, 1.0 - t, 1.0, -1.0};
      case Kind::VP: return vp_at(t);
      case Kind::VE: return ve_at(t);
      case Kind::Custom: {
        ScheduleSample s = custom_->fn(t);
        s.t = t;
        return s;
      }
    }
    return {};
  }

  friend bool operator==(const ProbPath& a, const ProbPath& b) {
    if (a.kind_ != b.kind_) return false;
    if (a.kind_ == Kind::Custom) return a.custom_ == b.custom_;
    return a.p0_ == b.p0_ && a.p1_ == b.p1_ && a.p2_ == b.p2_;
  }

 private:
  struct CustomSchedule {
    std::string name;
    ScheduleFn fn;
  };

  explicit ProbPath(Kind kind) : kind_(kind) {}

  ScheduleSample vp_at(double t) const {
    const double beta_min = p0_, beta_max = p1_, eps = p2_;
    // reverse time s and its integrated noise rate T(s)
    const double s = eps + (1.0 - eps) * (1.0 - t);
    const double integral = beta_min * s + 0.5 * (beta_max - beta_min) * s * s;
    const double rate = beta_min + s * (beta_max - beta_min);
    const double alpha = std::exp(-0.5 * integral);
    const double sigma2 = -std::expm1(-integral);
    const double sigma = std::sqrt(std::max(sigma2, 0.0));
    const double dalpha = alpha * 0.5 * rate * (1.0 - eps);
    const double dsigma = sigma > 0.0 ? -alpha * dalpha / sigma : -kInf;
    return {t, alpha, sigma, dalpha, dsigma};
  }

  ScheduleSample ve_at(double t) const {
    const double log_ratio = std::log(p1_ / p0_);
    const double sigma = std::pow(p1_, 1.0 - t) * std::pow(p0_, t);
    return {t, 1.0, sigma, 0.0, -sigma * log_ratio};
  }

  Kind kind_;
  double p0_ = 0.0;
  double p1_ = 0.0;
  double p2_ = 0.0;
  std::shared_ptr<const CustomSchedule> custom_;
};

inline ScheduleSample schedule(const ProbPath& path, double t) { return path.at(t); }

/// alpha_t / sigma_t; +infinity where sigma_t = 0 (e.g. t = 1 on CondOT).
inline double snr(const ProbPath& path, double t) {
  const ScheduleSample s = path.at(t);
  if (s.sigma == 0.0) return kInf;
  return s.alpha / s.sigma;
}

struct SnrRange {
  double lower;
  double upper;
};

inline SnrRange snr_range(const ProbPath& path) { return {snr(path, 0.0), snr(path, 1.0)}; }

/// Time t with snr(path, t) = s. Throws RangeUnattainable carrying the attainable SNR bounds.
inline double inverse_snr(const ProbPath& path, double s) {
  if (std::isnan(s) || s < 0.0) throw DomainError(detail::cat("invalid snr ", s));
  const SnrRange range = snr_range(path);
  if (s < range.lower || s > range.upper)
    throw RangeUnattainable(detail::cat("snr ", s, " outside attainable range [", range.lower, ", ",
                                        range.upper, "] of path ", path.name()),
                            range.lower, range.upper);
  switch (path.kind()) {
    case ProbPath::Kind::CondOT:
      return std::isinf(s) ? 1.0 : s / (1.0 + s);
    case ProbPath::Kind::VE: {
      if (std::isinf(s)) return 1.0;
      const double t = 1.0 - std::log((1.0 / s) / path.sigma_min()) /
                                 std::log(path.sigma_max() / path.sigma_min());
      return std::clamp(t, 0.0, 1.0);
    }
    default:
      break;
  }
  if (s == range.upper) return 1.0;
  if (s == range.lower) return 0.0;
  // snr is monotone; bisect down to adjacent doubles
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (snr(path, mid) < s)
      lo = mid;
    else
      hi = mid;
  }
  const double err_lo = std::abs(snr(path, lo) - s);
  const double err_hi = std::abs(snr(path, hi) - s);
  return err_lo <= err_hi ? lo : hi;
}

/// alpha_t x1 + sigma_t eps with eps ~ N(0, I).
inline Vector sample_xt(const ProbPath& path, const Vector& x1, double t, Rng& rng) {
  const ScheduleSample s = path.at(t);
  return s.alpha * x1 + s.sigma * standard_normal(rng, x1.size());
}

}  // namespace flowsolve
