// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Pixel metrics for data normalized to [-1, 1], so the data range is R = 2.
//
// SSIM uses a uniform square window (8 x 8 by default, clamped to the image extent),
// population statistics per window, K1 = 0.01, K2 = 0.03, and is averaged over all
// valid window positions and then over channels.

#include "flowsolve/operators.hpp"

namespace flowsolve {

inline constexpr double kDataRange = 2.0;
inline constexpr double kPsnrCap = 100.0;

struct SsimOptions {
  Index window = 8;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = kDataRange;
};

namespace detail {

inline void check_same_size(const Vector& a, const Vector& b) {
  if (a.size() != b.size())
    throw ShapeError(detail::cat("metric inputs differ in size: ", a.size(), " vs ", b.size()));
  if (a.size() == 0) throw ShapeError("metric inputs are empty");
}

}  // namespace detail

inline double mse(const Vector& a, const Vector& b) {
  detail::check_same_size(a, b);
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

/// 10 log10(R^2 / mse), capped at 100 dB once mse < R^2 1e-10.
inline double psnr(const Vector& a, const Vector& b, double data_range = kDataRange) {
  const double m = mse(a, b);
  const double r2 = data_range * data_range;
  if (m < r2 * 1e-10) return kPsnrCap;
  return 10.0 * std::log10(r2 / m);
}

inline double ssim(const Vector& a, const Vector& b, const ImageShape& shape, const SsimOptions& opt = {}) {
  detail::check_same_size(a, b);
  if (shape.size() != a.size())
    throw ShapeError(detail::cat("image shape ", shape.channels, "x", shape.height, "x", shape.width,
                                 " does not hold ", a.size(), " values"));
  if (opt.window < 1) throw DomainError("ssim window must be >= 1");
  const Index wy = std::min(opt.window, shape.height);
  const Index wx = std::min(opt.window, shape.width);
  const double n = static_cast<double>(wy * wx);
  const double c1 = std::pow(opt.k1 * opt.data_range, 2);
  const double c2 = std::pow(opt.k2 * opt.data_range, 2);
  double total = 0.0;
  for (Index c = 0; c < shape.channels; ++c) {
    const auto ia = detail::channel_view(a, c, shape.height, shape.width);
    const auto ib = detail::channel_view(b, c, shape.height, shape.width);
    double channel_sum = 0.0;
    Index count = 0;
    for (Index i = 0; i + wy <= shape.height; ++i)
      for (Index j = 0; j + wx <= shape.width; ++j) {
        const auto pa = ia.block(i, j, wy, wx);
        const auto pb = ib.block(i, j, wy, wx);
        const double ma = pa.sum() / n, mb = pb.sum() / n;
        const double va = pa.array().square().sum() / n - ma * ma;
        const double vb = pb.array().square().sum() / n - mb * mb;
        const double cov = (pa.array() * pb.array()).sum() / n - ma * mb;
        channel_sum += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    total += channel_sum / static_cast<double>(count);
  }
  return total / static_cast<double>(shape.channels);
}

}  // namespace flowsolve
