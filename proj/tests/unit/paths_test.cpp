// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace {

using namespace flowsolve;
using fstest::vec;

std::vector<ProbPath> all_paths() {
  return {ProbPath::cond_ot(), ProbPath::vp(), ProbPath::vp(0.1, 20.0, 1e-3), ProbPath::ve()};
}

// Adaptive Simpson quadrature of the linear VP noise rate, independent of the closed form.
double simpson(const std::function<double(double)>& f, double a, double b, double tol, int depth = 0) {
  const double m = 0.5 * (a + b);
  const double whole = (b - a) / 6.0 * (f(a) + 4 * f(m) + f(b));
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double left = (m - a) / 6.0 * (f(a) + 4 * f(lm) + f(m));
  const double right = (b - m) / 6.0 * (f(m) + 4 * f(rm) + f(b));
  if (depth > 40 || std::abs(left + right - whole) < 15 * tol) return left + right + (left + right - whole) / 15;
  return simpson(f, a, m, tol / 2, depth + 1) + simpson(f, m, b, tol / 2, depth + 1);
}

TEST(Schedule, CondOtQuarter) {
  const ScheduleSample s = schedule(ProbPath::cond_ot(), 0.25);
  EXPECT_DOUBLE_EQ(s.alpha, 0.25);
  EXPECT_DOUBLE_EQ(s.sigma, 0.75);
  EXPECT_DOUBLE_EQ(s.dalpha_dt, 1.0);
  EXPECT_DOUBLE_EQ(s.dsigma_dt, -1.0);
  EXPECT_DOUBLE_EQ(s.t, 0.25);
}

TEST(Schedule, CondOtDerivativesConstant) {
  for (double t : {0.0, 0.1, 0.5, 0.9, 1.0}) {
    const ScheduleSample s = schedule(ProbPath::cond_ot(), t);
    EXPECT_EQ(s.alpha, t);
    EXPECT_EQ(s.sigma, 1.0 - t);
    EXPECT_EQ(s.dalpha_dt, 1.0);
    EXPECT_EQ(s.dsigma_dt, -1.0);
  }
}

TEST(Schedule, VpEndpointIsData) {
  const ScheduleSample s = schedule(ProbPath::vp(), 1.0);
  EXPECT_EQ(s.alpha, 1.0);
  EXPECT_EQ(s.sigma, 0.0);
}

TEST(Schedule, VpMatchesQuadratureOfNoiseRate) {
  const double bmin = 0.1, bmax = 20.0;
  const auto beta = [&](double u) { return bmin + u * (bmax - bmin); };
  for (double t : {0.05, 0.25, 0.5, 0.75, 0.95}) {
    const double integral = simpson(beta, 0.0, 1.0 - t, 1e-13);
    const double alpha = std::exp(-0.5 * integral);
    const double sigma = std::sqrt(1.0 - alpha * alpha);
    const ScheduleSample s = schedule(ProbPath::vp(bmin, bmax), t);
    EXPECT_NEAR(s.alpha, alpha, 1e-12) << "t = " << t;
    EXPECT_NEAR(s.sigma, sigma, 1e-12) << "t = " << t;
  }
}

TEST(Schedule, VpIsVariancePreserving) {
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    const ScheduleSample s = schedule(ProbPath::vp(), t);
    EXPECT_NEAR(s.alpha * s.alpha + s.sigma * s.sigma, 1.0, 1e-14);
  }
}

TEST(Schedule, VeKeepsUnitSignal) {
  const ProbPath ve = ProbPath::ve(0.01, 50.0);
  EXPECT_DOUBLE_EQ(schedule(ve, 0.0).sigma, 50.0);
  EXPECT_DOUBLE_EQ(schedule(ve, 1.0).sigma, 0.01);
  EXPECT_EQ(schedule(ve, 0.3).alpha, 1.0);
}

TEST(Schedule, RejectsTimesOutsideUnitInterval) {
  for (const ProbPath& p : all_paths()) {
    EXPECT_THROW(schedule(p, -1e-9), DomainError);
    EXPECT_THROW(schedule(p, 1.0 + 1e-9), DomainError);
    EXPECT_THROW(schedule(p, std::nan("")), DomainError);
  }
}

TEST(Schedule, RejectsBadParameters) {
  EXPECT_THROW(ProbPath::vp(-1.0, 20.0), DomainError);
  EXPECT_THROW(ProbPath::vp(5.0, 1.0), DomainError);
  EXPECT_THROW(ProbPath::vp(0.1, 20.0, 1.0), DomainError);
  EXPECT_THROW(ProbPath::ve(0.0, 1.0), DomainError);
  EXPECT_THROW(ProbPath::ve(2.0, 1.0), DomainError);
}

TEST(Schedule, MonotoneOnHundredPairs) {
  for (const ProbPath& p : all_paths()) {
    for (int i = 0; i < 100; ++i) {
      const double t1 = i / 100.0, t2 = (i + 1) / 100.0;
      const ScheduleSample a = schedule(p, t1), b = schedule(p, t2);
      EXPECT_LE(a.alpha, b.alpha) << p.name() << " t=" << t1;
      EXPECT_GE(a.sigma, b.sigma) << p.name() << " t=" << t1;
      EXPECT_GE(a.alpha, 0.0);
      EXPECT_GE(a.sigma, 0.0);
    }
  }
}

TEST(Schedule, DerivativesMatchCentralDifferences) {
  const double h = 1e-5;
  for (const ProbPath& p : all_paths()) {
    for (int i = 1; i <= 50; ++i) {
      const double t = i / 51.0;
      const ScheduleSample s = schedule(p, t);
      const ScheduleSample sp = schedule(p, t + h), sm = schedule(p, t - h);
      const double da = (sp.alpha - sm.alpha) / (2 * h);
      const double ds = (sp.sigma - sm.sigma) / (2 * h);
      EXPECT_LE(std::abs(da - s.dalpha_dt), 1e-6 * std::max(1.0, std::abs(s.dalpha_dt))) << p.name() << " t=" << t;
      EXPECT_LE(std::abs(ds - s.dsigma_dt), 1e-6 * std::max(1.0, std::abs(s.dsigma_dt))) << p.name() << " t=" << t;
    }
  }
}

TEST(Schedule, CustomPathUsesSuppliedFunction) {
  const ProbPath p = ProbPath::custom("square", [](double t) {
    return ScheduleSample{t, t * t, 1.0 - t * t, 2.0 * t, -2.0 * t};
  });
  EXPECT_EQ(p.name(), "square");
  EXPECT_DOUBLE_EQ(schedule(p, 0.5).alpha, 0.25);
  EXPECT_TRUE(p == p);
  const ProbPath q = ProbPath::custom("square", [](double t) { return ScheduleSample{t, t * t, 1 - t * t, 2 * t, -2 * t}; });
  EXPECT_FALSE(p == q);
}

TEST(Snr, CondOtValues) {
  EXPECT_DOUBLE_EQ(snr(ProbPath::cond_ot(), 0.5), 1.0);
  EXPECT_NEAR(snr(ProbPath::cond_ot(), 0.8), 4.0, 1e-14);
  EXPECT_EQ(snr(ProbPath::cond_ot(), 0.0), 0.0);
}

TEST(Snr, InfiniteWhereSigmaVanishes) {
  EXPECT_TRUE(std::isinf(snr(ProbPath::cond_ot(), 1.0)));
  EXPECT_TRUE(std::isinf(snr(ProbPath::vp(), 1.0)));
}

TEST(Snr, VpEqualsScheduleRatio) {
  const ProbPath vp = ProbPath::vp();
  for (double t = 0.0; t < 1.0; t += 0.037) {
    const ScheduleSample s = schedule(vp, t);
    EXPECT_EQ(snr(vp, t), s.alpha / s.sigma);
  }
}

TEST(Snr, StrictlyIncreasingWhereBothPositive) {
  for (const ProbPath& p : all_paths()) {
    double prev = -1.0;
    for (int i = 1; i < 200; ++i) {
      const double s = snr(p, i / 200.0);
      EXPECT_GT(s, prev) << p.name();
      prev = s;
    }
  }
}

TEST(InverseSnr, CondOtClosedForm) {
  EXPECT_DOUBLE_EQ(inverse_snr(ProbPath::cond_ot(), 1.0), 0.5);
  EXPECT_DOUBLE_EQ(inverse_snr(ProbPath::cond_ot(), 4.0), 0.8);
  EXPECT_EQ(inverse_snr(ProbPath::cond_ot(), kInf), 1.0);
}

TEST(InverseSnr, VpAtFourSolvesTheSchedule) {
  const ProbPath vp = ProbPath::vp();
  const double t = inverse_snr(vp, 4.0);
  EXPECT_LE(std::abs(snr(vp, t) - 4.0) / 4.0, 1e-10);
  // bracket check on the same monotone function, independently of the solver
  EXPECT_LT(snr(vp, t - 1e-6), 4.0);
  EXPECT_GT(snr(vp, t + 1e-6), 4.0);
}

TEST(InverseSnr, RoundTripAcrossRange) {
  for (const ProbPath& p : all_paths()) {
    for (int i = 1; i < 100; ++i) {
      const double t = i / 100.0;
      const double back = inverse_snr(p, snr(p, t));
      EXPECT_NEAR(back, t, 1e-9) << p.name();
      const double s = snr(p, t);
      EXPECT_LE(std::abs(snr(p, back) - s) / std::max(1.0, s), 1e-10) << p.name();
    }
  }
}

TEST(InverseSnr, UnattainableCarriesBounds) {
  const ProbPath vp = ProbPath::vp(0.1, 20.0, 1e-3);
  const SnrRange range = snr_range(vp);
  EXPECT_GT(range.lower, 0.0);
  EXPECT_TRUE(std::isfinite(range.upper));
  try {
    inverse_snr(vp, range.upper * 2);
    FAIL() << "expected RangeUnattainable";
  } catch (const RangeUnattainable& e) {
    EXPECT_EQ(e.lower(), range.lower);
    EXPECT_EQ(e.upper(), range.upper);
  }
  EXPECT_THROW(inverse_snr(vp, range.lower / 2), RangeUnattainable);
  EXPECT_THROW(inverse_snr(ProbPath::ve(), 1e-4), RangeUnattainable);
  EXPECT_THROW(inverse_snr(ProbPath::cond_ot(), -1.0), DomainError);
}

TEST(SampleXt, EndpointsAndDeterminism) {
  Rng rng(7);
  const Vector x1 = vec({0.3, -1.2, 2.0});
  EXPECT_EQ(sample_xt(ProbPath::cond_ot(), x1, 1.0, rng), x1);

  Rng a(11), b(11);
  const Vector n = sample_xt(ProbPath::cond_ot(), Vector::Zero(3), 0.0, a);
  EXPECT_EQ(n, standard_normal(b, 3));

  Rng c(5), d(5);
  EXPECT_EQ(sample_xt(ProbPath::vp(), x1, 0.4, c), sample_xt(ProbPath::vp(), x1, 0.4, d));
}

TEST(SampleXt, MomentsMatchWithinThreeStandardErrors) {
  const ProbPath p = ProbPath::vp();
  const double t = 0.6;
  const ScheduleSample s = schedule(p, t);
  const Vector x1 = vec({1.0, -0.5});
  const int n = 100000;
  Rng rng(2024);
  Vector sum = Vector::Zero(2);
  Matrix sq = Matrix::Zero(2, 2);
  for (int i = 0; i < n; ++i) {
    const Vector x = sample_xt(p, x1, t, rng);
    sum += x;
    sq += (x - s.alpha * x1) * (x - s.alpha * x1).transpose();
  }
  const Vector mean = sum / n;
  const Matrix cov = sq / n;
  const double se_mean = s.sigma / std::sqrt(n);
  const double var = s.sigma * s.sigma;
  const double se_var = var * std::sqrt(2.0 / n);
  const double se_cov = var / std::sqrt(n);
  for (int i = 0; i < 2; ++i) {
    EXPECT_LE(std::abs(mean(i) - s.alpha * x1(i)), 3 * se_mean);
    EXPECT_LE(std::abs(cov(i, i) - var), 3 * se_var);
  }
  EXPECT_LE(std::abs(cov(0, 1)), 3 * se_cov);
}

}  // namespace
