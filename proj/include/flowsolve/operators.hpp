// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Linear measurement operators y = A x. Every operator carries a thin SVD computed at
// construction; the structured kinds (mask, block-average downsampling, circular
// Gaussian blur) keep it in factored form so nothing of size in_dim x in_dim is stored.
//
// Multichannel signals are laid out channel-major, row-major inside a channel:
// index = c * height * width + row * width + col. Downsampling and blur act per channel.

#include "flowsolve/core.hpp"

#include <Eigen/SVD>

#include <memory>
#include <numeric>
#include <variant>

namespace flowsolve {

struct ImageShape {
  Index channels = 1;
  Index height = 1;
  Index width = 1;

  Index size() const noexcept { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

namespace detail {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const RowMajorMatrix> channel_view(const Vector& v, Index c, Index rows, Index cols) {
  return Eigen::Map<const RowMajorMatrix>(v.data() + c * rows * cols, rows, cols);
}

inline Eigen::Map<RowMajorMatrix> channel_view(Vector& v, Index c, Index rows, Index cols) {
  return Eigen::Map<RowMajorMatrix>(v.data() + c * rows * cols, rows, cols);
}

/// Block-average matrix (n / f) x n.
inline Matrix block_average_1d(Index n, Index factor) {
  Matrix m = Matrix::Zero(n / factor, n);
  for (Index i = 0; i < n / factor; ++i)
    for (Index j = 0; j < factor; ++j) m(i, i * factor + j) = 1.0 / static_cast<double>(factor);
  return m;
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
inline std::vector<double> gaussian_taps(int size, double std_dev) {
  std::vector<double> taps(static_cast<std::size_t>(size));
  if (size == 1) {
    taps[0] = 1.0;
    return taps;
  }
  const double center = 0.5 * (size - 1);
  double total = 0.0;
  for (int j = 0; j < size; ++j) {
    const double d = j - center;
    taps[j] = std::exp(-d * d / (2.0 * std_dev * std_dev));
    total += taps[j];
  }
  for (double& v : taps) v /= total;
  return taps;
}

/// n x n circulant matrix applying the taps centered at (size - 1) / 2, wrapping around.
inline Matrix circulant_1d(Index n, const std::vector<double>& taps) {
  Matrix m = Matrix::Zero(n, n);
  const Index size = static_cast<Index>(taps.size());
  const Index center = (size - 1) / 2;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < size; ++j) {
      Index col = (i + j - center) % n;
      if (col < 0) col += n;
      m(i, col) += taps[j];
    }
  return m;
}

}  // namespace detail

/// Thin SVD A = U diag(s) V^T with s non-increasing, kept in whatever factored form the
/// operator allows. Coefficient vectors have length rank() and follow the order of s.
class SvdFactors {
 public:
  struct Dense {
    Matrix u, v;
  };
  struct Selection {
    std::vector<Index> keep;
    Index in_dim;
  };
  struct Separable {
    Index channels;
    Matrix uy, vy, ux, vx;       // per-axis thin factors
    std::vector<Index> order;    // coefficient position -> flat (channel, i, j) grid index
    Index ry, rx;
  };

  SvdFactors() = default;

  static SvdFactors dense(const Matrix& a) {
    SvdFactors f;
    if (a.rows() == 0 || a.cols() == 0) {
      f.s_ = Vector(0);
      f.impl_ = Dense{Matrix(a.rows(), 0), Matrix(a.cols(), 0)};
      return f;
    }
    Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) throw NumericalError("dense SVD did not converge");
    f.s_ = svd.singularValues();
    f.impl_ = Dense{svd.matrixU(), svd.matrixV()};
    return f;
  }

  static SvdFactors selection(std::vector<Index> keep, Index in_dim) {
    SvdFactors f;
    f.s_ = Vector::Ones(static_cast<Index>(keep.size()));
    f.impl_ = Selection{std::move(keep), in_dim};
    return f;
  }

  /// Per channel A_c = My (.) Mx^T, i.e. the Kronecker product My (x) Mx.
  static SvdFactors separable(Index channels, const Matrix& my, const Matrix& mx) {
    Eigen::JacobiSVD<Matrix> sy(my, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Eigen::JacobiSVD<Matrix> sx(mx, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Separable sep{channels, sy.matrixU(), sy.matrixV(), sx.matrixU(), sx.matrixV(), {}, 0, 0};
    sep.ry = sy.singularValues().size();
    sep.rx = sx.singularValues().size();
    const Index per_channel = sep.ry * sep.rx;
    std::vector<double> values(static_cast<std::size_t>(channels * per_channel));
    for (Index c = 0; c < channels; ++c)
      for (Index i = 0; i < sep.ry; ++i)
        for (Index j = 0; j < sep.rx; ++j)
          values[c * per_channel + i * sep.rx + j] = sy.singularValues()[i] * sx.singularValues()[j];
    sep.order.resize(values.size());
    std::iota(sep.order.begin(), sep.order.end(), Index{0});
    std::stable_sort(sep.order.begin(), sep.order.end(),
                     [&](Index a, Index b) { return values[a] > values[b]; });
    SvdFactors f;
    f.s_ = Vector(static_cast<Index>(values.size()));
    for (std::size_t p = 0; p < values.size(); ++p) f.s_[p] = values[sep.order[p]];
    f.impl_ = std::move(sep);
    return f;
  }

  Index rank() const noexcept { return s_.size(); }
  const Vector& singular_values() const noexcept { return s_; }

  /// U^T u for u in the output space.
  Vector apply_ut(const Vector& u) const {
    return std::visit(
        [&](const auto& impl) -> Vector {
          using T = std::decay_t<decltype(impl)>;
          if constexpr (std::is_same_v<T, Dense>) {
            return impl.u.transpose() * u;
          } else if constexpr (std::is_same_v<T, Selection>) {
            return u;
          } else {
            return to_coeffs(impl, u, impl.uy, impl.ux);
          }
        },
        impl_);
  }

  /// U c for c in coefficient space.
  Vector apply_u(const Vector& c) const {
    return std::visit(
        [&](const auto& impl) -> Vector {
          using T = std::decay_t<decltype(impl)>;
          if constexpr (std::is_same_v<T, Dense>) {
            return impl.u * c;
          } else if constexpr (std::is_same_v<T, Selection>) {
            return c;
          } else {
            return from_coeffs(impl, c, impl.uy, impl.ux);
          }
        },
        impl_);
  }

  /// V^T x for x in the input space.
  Vector apply_vt(const Vector& x) const {
    return std::visit(
        [&](const auto& impl) -> Vector {
          using T = std::decay_t<decltype(impl)>;
          if constexpr (std::is_same_v<T, Dense>) {
            return impl.v.transpose() * x;
          } else if constexpr (std::is_same_v<T, Selection>) {
            Vector out(static_cast<Index>(impl.keep.size()));
            for (std::size_t i = 0; i < impl.keep.size(); ++i) out[i] = x[impl.keep[i]];
            return out;
          } else {
            return to_coeffs(impl, x, impl.vy, impl.vx);
          }
        },
        impl_);
  }

  /// V c for c in coefficient space.
  Vector apply_v(const Vector& c) const {
    return std::visit(
        [&](const auto& impl) -> Vector {
          using T = std::decay_t<decltype(impl)>;
          if constexpr (std::is_same_v<T, Dense>) {
            return impl.v * c;
          } else if constexpr (std::is_same_v<T, Selection>) {
            Vector out = Vector::Zero(impl.in_dim);
            for (std::size_t i = 0; i < impl.keep.size(); ++i) out[impl.keep[i]] = c[i];
            return out;
          } else {
            return from_coeffs(impl, c, impl.vy, impl.vx);
          }
        },
        impl_);
  }

 private:
  static Vector to_coeffs(const Separable& sep, const Vector& x, const Matrix& fy, const Matrix& fx) {
    const Index rows = fy.rows(), cols = fx.rows();
    if (x.size() != sep.channels * rows * cols) throw ShapeError("svd factor applied to wrong size");
    Vector grid(sep.channels * sep.ry * sep.rx);
    for (Index c = 0; c < sep.channels; ++c)
      detail::channel_view(grid, c, sep.ry, sep.rx) =
          fy.transpose() * detail::channel_view(x, c, rows, cols) * fx;
    Vector out(grid.size());
    for (std::size_t p = 0; p < sep.order.size(); ++p) out[p] = grid[sep.order[p]];
    return out;
  }

  static Vector from_coeffs(const Separable& sep, const Vector& coeffs, const Matrix& fy, const Matrix& fx) {
    const Index rows = fy.rows(), cols = fx.rows();
    Vector grid(sep.channels * sep.ry * sep.rx);
    for (std::size_t p = 0; p < sep.order.size(); ++p) grid[sep.order[p]] = coeffs[p];
    Vector out(sep.channels * rows * cols);
    for (Index c = 0; c < sep.channels; ++c)
      detail::channel_view(out, c, rows, cols) =
          fy * detail::channel_view(grid, c, sep.ry, sep.rx) * fx.transpose();
    return out;
  }

  Vector s_;
  std::variant<Dense, Selection, Separable> impl_;
};

class LinearOperator {
 public:
  enum class Kind { Dense, InpaintMask, Downsample, GaussianBlur };

  /// Relative singular-value cutoff used by pinv_apply, range_project and noiseless solve_gram.
  static constexpr double kRankCutoff = 1e-10;

  static LinearOperator dense(Matrix a) {
    LinearOperator op(Kind::Dense, a.rows(), a.cols());
    auto impl = std::make_shared<Impl>();
    impl->svd = SvdFactors::dense(a);
    impl->matrix = std::move(a);
    op.impl_ = std::move(impl);
    op.finish();
    return op;
  }

  /// Keeps the listed coordinates of an in_dim vector (sorted ascending, duplicates rejected).
  static LinearOperator mask(Index in_dim, std::vector<Index> keep) {
    std::sort(keep.begin(), keep.end());
    for (std::size_t i = 0; i < keep.size(); ++i) {
      if (keep[i] < 0 || keep[i] >= in_dim)
        throw ConfigError(detail::cat("mask index ", keep[i], " outside [0, ", in_dim, ")"));
      if (i > 0 && keep[i] == keep[i - 1])
        throw ConfigError(detail::cat("mask index ", keep[i], " listed twice"));
    }
    LinearOperator op(Kind::InpaintMask, static_cast<Index>(keep.size()), in_dim);
    auto impl = std::make_shared<Impl>();
    impl->keep = keep;
    impl->svd = SvdFactors::selection(std::move(keep), in_dim);
    op.impl_ = std::move(impl);
    op.finish();
    return op;
  }

  static LinearOperator identity(Index dim) {
    std::vector<Index> keep(static_cast<std::size_t>(dim));
    std::iota(keep.begin(), keep.end(), Index{0});
    return mask(dim, std::move(keep));
  }

  /// Mask hiding a centered box of `box` x `box` pixels in every channel.
  static LinearOperator center_box_mask(const ImageShape& shape, Index box) {
    if (box < 0 || box > shape.height || box > shape.width)
      throw ConfigError(detail::cat("center box ", box, " does not fit a ", shape.height, "x",
                                    shape.width, " image"));
    const Index r0 = (shape.height - box) / 2, c0 = (shape.width - box) / 2;
    std::vector<Index> keep;
    for (Index c = 0; c < shape.channels; ++c)
      for (Index r = 0; r < shape.height; ++r)
        for (Index col = 0; col < shape.width; ++col) {
          const bool hidden = r >= r0 && r < r0 + box && col >= c0 && col < c0 + box;
          if (!hidden) keep.push_back((c * shape.height + r) * shape.width + col);
        }
    return mask(shape.size(), std::move(keep));
  }

  /// Mask hiding a seeded union of `count` random rectangles with sides in [1, max_side].
  static LinearOperator random_box_mask(const ImageShape& shape, int count, Index max_side,
                                        std::uint64_t seed) {
    if (count < 0 || max_side < 1) throw ConfigError("random box mask needs count >= 0, max_side >= 1");
    Rng rng(seed);
    std::vector<char> hidden(static_cast<std::size_t>(shape.height * shape.width), 0);
    for (int b = 0; b < count; ++b) {
      std::uniform_int_distribution<Index> side_h(1, std::min(max_side, shape.height));
      std::uniform_int_distribution<Index> side_w(1, std::min(max_side, shape.width));
      const Index h = side_h(rng), w = side_w(rng);
      std::uniform_int_distribution<Index> top(0, shape.height - h), left(0, shape.width - w);
      const Index r0 = top(rng), c0 = left(rng);
      for (Index r = r0; r < r0 + h; ++r)
        for (Index c = c0; c < c0 + w; ++c) hidden[r * shape.width + c] = 1;
    }
    std::vector<Index> keep;
    for (Index c = 0; c < shape.channels; ++c)
      for (Index p = 0; p < shape.height * shape.width; ++p)
        if (!hidden[p]) keep.push_back(c * shape.height * shape.width + p);
    return mask(shape.size(), std::move(keep));
  }

  /// Non-overlapping block means of factor x factor pixels. Signals with height 1 are
  /// treated as 1-D and averaged along the width only.
  static LinearOperator downsample(const ImageShape& shape, Index factor) {
    if (factor < 1) throw ConfigError(detail::cat("downsample factor ", factor, " must be >= 1"));
    const Index fy = shape.height == 1 ? 1 : factor;
    if (shape.height % fy != 0 || shape.width % factor != 0)
      throw ConfigError(detail::cat("downsample factor ", factor, " does not divide a ", shape.height,
                                    "x", shape.width, " image"));
    ImageShape out{shape.channels, shape.height / fy, shape.width / factor};
    LinearOperator op(Kind::Downsample, out.size(), shape.size());
    auto impl = std::make_shared<Impl>();
    impl->in_shape = shape;
    impl->out_shape = out;
    impl->factor_y = fy;
    impl->factor_x = factor;
    impl->my = detail::block_average_1d(shape.height, fy);
    impl->mx = detail::block_average_1d(shape.width, factor);
    impl->svd = SvdFactors::separable(shape.channels, impl->my, impl->mx);
    op.impl_ = std::move(impl);
    op.finish();
    return op;
  }

  /// Circular convolution with a normalized size x size Gaussian kernel of standard deviation std_dev.
  static LinearOperator gaussian_blur(const ImageShape& shape, int size, double std_dev) {
    if (size < 1) throw ConfigError(detail::cat("blur size ", size, " must be >= 1"));
    if (size > 1 && !(std_dev > 0.0)) throw ConfigError(detail::cat("blur std ", std_dev, " must be > 0"));
    LinearOperator op(Kind::GaussianBlur, shape.size(), shape.size());
    auto impl = std::make_shared<Impl>();
    impl->in_shape = shape;
    impl->out_shape = shape;
    impl->blur_size = size;
    impl->blur_std = std_dev;
    const auto taps = detail::gaussian_taps(size, std_dev);
    impl->my = shape.height == 1 ? Matrix::Identity(1, 1) : detail::circulant_1d(shape.height, taps);
    impl->mx = detail::circulant_1d(shape.width, taps);
    impl->svd = SvdFactors::separable(shape.channels, impl->my, impl->mx);
    op.impl_ = std::move(impl);
    op.finish();
    return op;
  }

  Kind kind() const noexcept { return kind_; }
  Index out_dim() const noexcept { return out_dim_; }
  Index in_dim() const noexcept { return in_dim_; }
  std::string shape_string() const { return detail::shape_str(out_dim_, in_dim_); }

  const std::vector<Index>& kept_indices() const { return impl_->keep; }
  const ImageShape& in_shape() const { return impl_->in_shape; }
  const ImageShape& out_shape() const { return impl_->out_shape; }
  Index factor_y() const { return impl_->factor_y; }
  Index factor_x() const { return impl_->factor_x; }
  int blur_size() const { return impl_->blur_size; }
  double blur_std() const { return impl_->blur_std; }

  Vector apply(const Vector& x) const {
    if (x.size() != in_dim_)
      throw ShapeError(detail::cat("operator of shape ", shape_string(), " applied to vector of shape ",
                                   detail::shape_str(x.size(), 1)));
    switch (kind_) {
      case Kind::Dense: return impl_->matrix * x;
      case Kind::InpaintMask: {
        Vector out(out_dim_);
        for (Index i = 0; i < out_dim_; ++i) out[i] = x[impl_->keep[i]];
        return out;
      }
      default: return separable_apply(x, impl_->my, impl_->mx, impl_->in_shape, impl_->out_shape);
    }
  }

  Vector apply_transpose(const Vector& u) const {
    if (u.size() != out_dim_)
      throw ShapeError(detail::cat("transpose of operator of shape ", shape_string(),
                                   " applied to vector of shape ", detail::shape_str(u.size(), 1)));
    switch (kind_) {
      case Kind::Dense: return impl_->matrix.transpose() * u;
      case Kind::InpaintMask: {
        Vector out = Vector::Zero(in_dim_);
        for (Index i = 0; i < out_dim_; ++i) out[impl_->keep[i]] = u[i];
        return out;
      }
      default:
        return separable_apply(u, impl_->my.transpose(), impl_->mx.transpose(), impl_->out_shape,
                               impl_->in_shape);
    }
  }

  const SvdFactors& svd() const noexcept { return impl_->svd; }

  double max_singular_value() const {
    const Vector& s = impl_->svd.singular_values();
    return s.size() == 0 ? 0.0 : s[0];
  }

  /// (r2 A A^T + sigma_y2 I)^{-1} residual via the SVD. With sigma_y2 = 0 the system is
  /// solved on range(A); residual mass outside it is projected out and reported to `warnings`.
  Vector solve_gram(double r2, double sigma_y2, const Vector& residual, WarningLog* warnings = nullptr) const {
    if (!(r2 >= 0.0) || !(sigma_y2 >= 0.0))
      throw DomainError(detail::cat("solve_gram needs r2 >= 0 and sigma_y2 >= 0, got ", r2, ", ", sigma_y2));
    if (r2 == 0.0 && sigma_y2 == 0.0)
      throw SingularityError("gram system r2 A A^T + sigma_y^2 I is singular (r2 = sigma_y^2 = 0)", 1.0);
    if (residual.size() != out_dim_)
      throw ShapeError(detail::cat("gram solve for operator of shape ", shape_string(),
                                   " given residual of shape ", detail::shape_str(residual.size(), 1)));
    const SvdFactors& f = impl_->svd;
    const Vector& s = f.singular_values();
    const Vector coeffs = f.apply_ut(residual);
    Vector scaled(coeffs.size());
    const double cutoff = kRankCutoff * max_singular_value();
    double dropped = 0.0;
    for (Index i = 0; i < coeffs.size(); ++i) {
      const double denom = r2 * s[i] * s[i] + sigma_y2;
      if (sigma_y2 == 0.0 && !(s[i] > cutoff && denom > 0.0)) {
        scaled[i] = 0.0;
        dropped += coeffs[i] * coeffs[i];
      } else {
        scaled[i] = coeffs[i] / denom;
      }
    }
    Vector out = f.apply_u(scaled);
    if (f.rank() < out_dim_ || sigma_y2 > 0.0) {
      const Vector outside = residual - f.apply_u(coeffs);
      if (sigma_y2 > 0.0)
        out += outside / sigma_y2;
      else
        dropped += outside.squaredNorm();
    }
    if (warnings && dropped > 1e-24 * std::max(1.0, residual.squaredNorm()))
      warnings->add(detail::cat("RankDeficiency: noiseless gram solve projected residual mass outside ",
                                "range(A) for operator of shape ", shape_string()));
    return out;
  }

  /// A^+ y with singular values below 1e-10 s_max treated as zero.
  Vector pinv_apply(const Vector& y) const {
    if (y.size() != out_dim_)
      throw ShapeError(detail::cat("pseudo-inverse of operator of shape ", shape_string(),
                                   " applied to vector of shape ", detail::shape_str(y.size(), 1)));
    const SvdFactors& f = impl_->svd;
    const Vector& s = f.singular_values();
    Vector coeffs = f.apply_ut(y);
    const double cutoff = kRankCutoff * max_singular_value();
    for (Index i = 0; i < coeffs.size(); ++i) coeffs[i] = s[i] > cutoff ? coeffs[i] / s[i] : 0.0;
    return f.apply_v(coeffs);
  }

  /// A^+ A x, the orthogonal projection onto the row space of A.
  Vector range_project(const Vector& x) const {
    if (x.size() != in_dim_)
      throw ShapeError(detail::cat("row-space projection of operator of shape ", shape_string(),
                                   " applied to vector of shape ", detail::shape_str(x.size(), 1)));
    const SvdFactors& f = impl_->svd;
    const Vector& s = f.singular_values();
    Vector coeffs = f.apply_vt(x);
    const double cutoff = kRankCutoff * max_singular_value();
    for (Index i = 0; i < coeffs.size(); ++i)
      if (!(s[i] > cutoff)) coeffs[i] = 0.0;
    return f.apply_v(coeffs);
  }

  /// Explicit out_dim x in_dim matrix, built once on first use.
  const Matrix& to_dense() const {
    std::call_once(impl_->dense_once, [this] {
      if (kind_ == Kind::Dense) {
        impl_->dense_cache = impl_->matrix;
        return;
      }
      Matrix m(out_dim_, in_dim_);
      Vector e = Vector::Zero(in_dim_);
      for (Index j = 0; j < in_dim_; ++j) {
        e[j] = 1.0;
        m.col(j) = apply(e);
        e[j] = 0.0;
      }
      impl_->dense_cache = std::move(m);
    });
    return impl_->dense_cache;
  }

  /// Nearest-neighbour upsampling of a downsampled observation back to the input grid.
  Vector nearest_upsample(const Vector& y) const {
    if (kind_ != Kind::Downsample)
      throw ConfigError("nearest-neighbour lift is only defined for downsample operators");
    if (y.size() != out_dim_) throw ShapeError("nearest-neighbour lift given wrong observation size");
    const ImageShape& in = impl_->in_shape;
    const ImageShape& out = impl_->out_shape;
    Vector x(in.size());
    for (Index c = 0; c < in.channels; ++c)
      for (Index r = 0; r < in.height; ++r)
        for (Index col = 0; col < in.width; ++col)
          x[(c * in.height + r) * in.width + col] =
              y[(c * out.height + r / impl_->factor_y) * out.width + col / impl_->factor_x];
    return x;
  }

 private:
  struct Impl {
    Matrix matrix;
    std::vector<Index> keep;
    ImageShape in_shape, out_shape;
    Index factor_y = 1, factor_x = 1;
    int blur_size = 0;
    double blur_std = 0.0;
    Matrix my, mx;
    SvdFactors svd;
    std::once_flag dense_once;
    Matrix dense_cache;
  };

  LinearOperator(Kind kind, Index out_dim, Index in_dim) : kind_(kind), out_dim_(out_dim), in_dim_(in_dim) {}

  void finish() {
    if (impl_->svd.singular_values().size() > 0 && !impl_->svd.singular_values().allFinite())
      throw NumericalError("operator SVD produced non-finite singular values");
  }

  static Vector separable_apply(const Vector& x, const Matrix& my, const Matrix& mx, const ImageShape& from,
                                const ImageShape& to) {
    Vector out(to.size());
    for (Index c = 0; c < from.channels; ++c)
      detail::channel_view(out, c, to.height, to.width) =
          my * detail::channel_view(x, c, from.height, from.width) * mx.transpose();
    return out;
  }

  Kind kind_;
  Index out_dim_;
  Index in_dim_;
  std::shared_ptr<Impl> impl_;
};

}  // namespace flowsolve
