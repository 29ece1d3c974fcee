// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace {

using namespace flowsolve;

// Straightforward SSIM: explicit loops over every 8x8 window with two-pass statistics.
double reference_ssim(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  const int h = static_cast<int>(a.size()), w = static_cast<int>(a[0].size()), win = 8;
  const double c1 = (0.01 * 2) * (0.01 * 2), c2 = (0.03 * 2) * (0.03 * 2);
  double total = 0.0;
  int windows = 0;
  for (int i = 0; i + win <= h; ++i)
    for (int j = 0; j + win <= w; ++j) {
      double ma = 0, mb = 0;
      for (int u = 0; u < win; ++u)
        for (int v = 0; v < win; ++v) {
          ma += a[i + u][j + v];
          mb += b[i + u][j + v];
        }
      ma /= win * win;
      mb /= win * win;
      double va = 0, vb = 0, cov = 0;
      for (int u = 0; u < win; ++u)
        for (int v = 0; v < win; ++v) {
          const double da = a[i + u][j + v] - ma, db = b[i + u][j + v] - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= win * win;
      vb /= win * win;
      cov /= win * win;
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  return total / windows;
}

TEST(Metrics, IdenticalInputs) {
  Rng rng(1);
  const Vector a = fstest::randn(rng, 64).cwiseMax(-1.0).cwiseMin(1.0);
  EXPECT_EQ(mse(a, a), 0.0);
  EXPECT_EQ(psnr(a, a), 100.0);
  EXPECT_NEAR(ssim(a, a, ImageShape{1, 8, 8}), 1.0, 1e-15);
}

TEST(Metrics, ConstantOffset) {
  Rng rng(2);
  const Vector a = fstest::randn(rng, 100);
  const Vector b = a.array() + 0.2;
  EXPECT_NEAR(mse(a, b), 0.04, 1e-15);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-12);
}

TEST(Metrics, PsnrCap) {
  const Vector a = Vector::Zero(10);
  Vector b = a;
  b(0) = 1e-6;  // mse = 1e-13 < 4e-10
  EXPECT_EQ(psnr(a, b), 100.0);
  b(0) = 1e-3;
  EXPECT_NEAR(psnr(a, b), 10 * std::log10(4.0 / 1e-7), 1e-9);
}

TEST(Metrics, SsimMatchesReference) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    Vector a(256), b(256);
    std::vector<std::vector<double>> ra(16, std::vector<double>(16)), rb = ra;
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) {
        a(i * 16 + j) = ra[i][j] = fstest::uniform(rng, -1, 1);
        b(i * 16 + j) = rb[i][j] = std::clamp(ra[i][j] + 0.3 * fstest::randn(rng, 1)(0), -1.0, 1.0);
      }
    EXPECT_NEAR(ssim(a, b, ImageShape{1, 16, 16}), reference_ssim(ra, rb), 1e-6);
  }
}

TEST(Metrics, SsimAveragesChannelsAndClampsWindow) {
  Rng rng(4);
  const Vector a = fstest::randn(rng, 2 * 16 * 16), b = fstest::randn(rng, 2 * 16 * 16);
  const double c0 = ssim(a.head(256), b.head(256), ImageShape{1, 16, 16});
  const double c1 = ssim(a.tail(256), b.tail(256), ImageShape{1, 16, 16});
  EXPECT_NEAR(ssim(a, b, ImageShape{2, 16, 16}), 0.5 * (c0 + c1), 1e-14);
  // a 4x4 image gets a single 4x4 window
  const Vector s = fstest::randn(rng, 16), t = fstest::randn(rng, 16);
  SsimOptions four;
  four.window = 4;
  EXPECT_NEAR(ssim(s, t, ImageShape{1, 4, 4}), ssim(s, t, ImageShape{1, 4, 4}, four), 1e-15);
  const double v = ssim(a, b, ImageShape{2, 16, 16});
  EXPECT_GE(v, -1.0);
  EXPECT_LE(v, 1.0);
}

TEST(Metrics, ShapeErrors) {
  EXPECT_THROW(mse(Vector::Zero(3), Vector::Zero(4)), ShapeError);
  EXPECT_THROW(psnr(Vector::Zero(3), Vector::Zero(4)), ShapeError);
  EXPECT_THROW(ssim(Vector::Zero(16), Vector::Zero(16), ImageShape{1, 3, 3}), ShapeError);
}

}  // namespace
