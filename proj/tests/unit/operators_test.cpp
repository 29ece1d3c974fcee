// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace {

using namespace flowsolve;
using fstest::vec;

std::vector<std::pair<std::string, LinearOperator>> operator_zoo() {
  Rng rng(11);
  const ImageShape img{1, 8, 8};
  const ImageShape rgb{3, 4, 6};
  return {
      {"dense", LinearOperator::dense(fstest::randn(rng, 6, 10))},
      {"mask", LinearOperator::mask(10, {0, 3, 4, 9})},
      {"center_box", LinearOperator::center_box_mask(img, 4)},
      {"random_boxes", LinearOperator::random_box_mask(rgb, 3, 3, 5)},
      {"downsample", LinearOperator::downsample(img, 2)},
      {"downsample_rgb", LinearOperator::downsample(rgb, 2)},
      {"downsample_1d", LinearOperator::downsample(ImageShape{1, 1, 12}, 3)},
      {"blur", LinearOperator::gaussian_blur(img, 3, 1.0)},
      {"blur_rgb", LinearOperator::gaussian_blur(rgb, 5, 0.8)},
      {"rank_deficient", LinearOperator::dense(fstest::randn(rng, 5, 2) * fstest::randn(rng, 2, 7))},
  };
}

// A independently assembled from its factors, probed with random vectors.
double svd_reconstruction_error(const LinearOperator& op, Rng& rng) {
  const SvdFactors& f = op.svd();
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const Vector x = fstest::randn(rng, op.in_dim());
    const Vector coeffs = f.apply_vt(x).cwiseProduct(f.singular_values());
    worst = std::max(worst, fstest::max_abs(f.apply_u(coeffs) - op.apply(x)));
  }
  return worst;
}

TEST(Operators, MaskSelectsAndInjects) {
  const auto op = LinearOperator::mask(3, {0, 2});
  EXPECT_EQ(op.apply(vec({1.0, 2.0, 3.0})), vec({1.0, 3.0}));
  EXPECT_EQ(op.apply_transpose(vec({4.0, 5.0})), vec({4.0, 0.0, 5.0}));
}

TEST(Operators, DownsampleAveragesBlocks) {
  const auto op = LinearOperator::downsample(ImageShape{1, 1, 4}, 2);
  EXPECT_LE(fstest::max_abs(op.apply(vec({1.0, 3.0, 5.0, 7.0})) - vec({2.0, 6.0})), 1e-15);
  const auto img = LinearOperator::downsample(ImageShape{1, 2, 2}, 2);
  EXPECT_NEAR(img.apply(vec({1.0, 2.0, 3.0, 6.0}))(0), 3.0, 1e-15);
}

TEST(Operators, DeltaBlurIsIdentity) {
  Rng rng(1);
  const auto op = LinearOperator::gaussian_blur(ImageShape{2, 5, 7}, 1, 1.0);
  const Vector x = fstest::randn(rng, op.in_dim());
  EXPECT_LE(fstest::max_abs(op.apply(x) - x), 1e-15);
}

TEST(Operators, BlurMatchesDirectCircularConvolution) {
  Rng rng(2);
  const ImageShape s{1, 6, 7};
  const int size = 3;
  const double sd = 0.9;
  const auto op = LinearOperator::gaussian_blur(s, size, sd);
  const Vector x = fstest::randn(rng, s.size());
  double kernel[3][3], total = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) total += kernel[i][j] = std::exp(-((i - 1) * (i - 1) + (j - 1) * (j - 1)) / (2 * sd * sd));
  Vector expected = Vector::Zero(s.size());
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 7; ++c)
      for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
          const int rr = ((r + i - 1) % 6 + 6) % 6, cc = ((c + j - 1) % 7 + 7) % 7;
          expected(r * 7 + c) += kernel[i][j] / total * x(rr * 7 + cc);
        }
  EXPECT_LE(fstest::max_abs(op.apply(x) - expected), 1e-12);
}

TEST(Operators, ShapeErrorsNameBothShapes) {
  const auto op = LinearOperator::mask(3, {0, 2});
  try {
    op.apply(Vector::Zero(4));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2, 3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(4, 1)"), std::string::npos) << msg;
  }
  EXPECT_THROW(op.apply_transpose(Vector::Zero(3)), ShapeError);
  EXPECT_THROW(op.pinv_apply(Vector::Zero(3)), ShapeError);
  EXPECT_THROW(op.solve_gram(1.0, 0.0, Vector::Zero(1)), ShapeError);
}

TEST(Operators, ConstructionErrors) {
  EXPECT_THROW(LinearOperator::mask(3, {0, 3}), ConfigError);
  EXPECT_THROW(LinearOperator::mask(3, {1, 1}), ConfigError);
  EXPECT_THROW(LinearOperator::downsample(ImageShape{1, 4, 5}, 2), ConfigError);
  EXPECT_THROW(LinearOperator::gaussian_blur(ImageShape{1, 4, 4}, 0, 1.0), ConfigError);
  EXPECT_THROW(LinearOperator::center_box_mask(ImageShape{1, 4, 4}, 5), ConfigError);
}

TEST(Operators, AdjointOnRandomProbes) {
  Rng rng(3);
  for (const auto& [name, op] : operator_zoo()) {
    for (int i = 0; i < 50; ++i) {
      const Vector u = fstest::randn(rng, op.in_dim()), w = fstest::randn(rng, op.out_dim());
      const double lhs = op.apply(u).dot(w), rhs = u.dot(op.apply_transpose(w));
      EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(lhs))) << name;
    }
  }
}

TEST(Operators, SvdReconstructsOperator) {
  Rng rng(4);
  for (const auto& [name, op] : operator_zoo()) {
    EXPECT_LE(svd_reconstruction_error(op, rng), 1e-8) << name;
    const Vector& s = op.svd().singular_values();
    for (Index i = 0; i < s.size(); ++i) {
      EXPECT_GE(s(i), 0.0) << name;
      if (i > 0) EXPECT_LE(s(i), s(i - 1) + 1e-15) << name;
    }
  }
}

TEST(Operators, SvdMatchesDenseSingularValues) {
  for (const auto& [name, op] : operator_zoo()) {
    const Eigen::JacobiSVD<Matrix> dense(op.to_dense());
    const Vector& s = op.svd().singular_values();
    const Vector& ref = dense.singularValues();
    const Index n = std::min(s.size(), ref.size());
    for (Index i = 0; i < n; ++i) EXPECT_NEAR(s(i), ref(i), 1e-10) << name << " index " << i;
  }
}

TEST(Operators, ClosedFormSpectra) {
  const Vector s_id = LinearOperator::identity(5).svd().singular_values();
  EXPECT_EQ(s_id, Vector::Ones(5));
  const Vector s_mask = LinearOperator::mask(9, {1, 4, 7}).svd().singular_values();
  EXPECT_EQ(s_mask, Vector::Ones(3));
  // each block average row has f^2 entries of 1/f^2, so its norm is 1/f
  const auto down = LinearOperator::downsample(ImageShape{1, 4, 4}, 2);
  EXPECT_LE((down.svd().singular_values() - Vector::Constant(4, 0.5)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Operators, BlurSvdOfEightByEightImage) {
  Rng rng(5);
  const auto op = LinearOperator::gaussian_blur(ImageShape{1, 8, 8}, 5, 1.5);
  const Eigen::JacobiSVD<Matrix> ref(op.to_dense(), Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Matrix rebuilt = ref.matrixU() * ref.singularValues().asDiagonal() * ref.matrixV().transpose();
  EXPECT_LE((rebuilt - op.to_dense()).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LE(svd_reconstruction_error(op, rng), 1e-8);
}

TEST(SolveGram, IdentityExamples) {
  const auto id = LinearOperator::identity(3);
  const Vector v = vec({1.0, -2.0, 0.5});
  EXPECT_LE(fstest::max_abs(id.solve_gram(1.0, 0.0, v) - v), 1e-15);
  EXPECT_LE(fstest::max_abs(id.solve_gram(0.5, 0.5, v) - v), 1e-15);
  EXPECT_THROW(id.solve_gram(0.0, 0.0, v), SingularityError);
  EXPECT_THROW(id.solve_gram(-1.0, 0.0, v), DomainError);
}

TEST(SolveGram, MatchesDenseSolve) {
  Rng rng(6);
  const Matrix a = fstest::randn(rng, 6, 10);
  const auto op = LinearOperator::dense(a);
  for (double sy2 : {0.0, 0.01, 1.0}) {
    const double r2 = 0.3;
    const Vector res = fstest::randn(rng, 6);
    const Matrix gram = r2 * a * a.transpose() + sy2 * Matrix::Identity(6, 6);
    const Vector ref = gram.fullPivLu().solve(res);
    EXPECT_LE(fstest::rel_err(op.solve_gram(r2, sy2, res), ref), 1e-9) << "sigma_y^2 = " << sy2;
  }
}

TEST(SolveGram, ConsistencyOnEveryOperatorKind) {
  Rng rng(7);
  for (const auto& [name, op] : operator_zoo()) {
    const Matrix& a = op.to_dense();
    for (double sy2 : {0.0, 0.05}) {
      // range-consistent residual
      const Vector res = op.apply(fstest::randn(rng, op.in_dim()));
      const Vector z = op.solve_gram(0.7, sy2, res);
      const Vector back = 0.7 * (a * (a.transpose() * z)) + sy2 * z;
      EXPECT_LE(fstest::max_abs(back - res), 1e-8 * std::max(1.0, fstest::max_abs(res))) << name << " " << sy2;
    }
  }
}

TEST(SolveGram, NoiselessRankDeficiencyIsProjectedAndReported) {
  Rng rng(8);
  const auto op = LinearOperator::dense(fstest::randn(rng, 5, 2) * fstest::randn(rng, 2, 7));
  WarningLog log;
  const Vector res = fstest::randn(rng, 5);
  const Vector z = op.solve_gram(1.0, 0.0, res, &log);
  EXPECT_TRUE(z.allFinite());
  ASSERT_FALSE(log.entries().empty());
  EXPECT_NE(log.entries().front().find("RankDeficiency"), std::string::npos);
  // the result lives in range(A)
  const Vector in_range = op.apply(op.pinv_apply(z));
  EXPECT_LE(fstest::max_abs(in_range - z), 1e-8 * std::max(1.0, fstest::max_abs(z)));

  WarningLog quiet;
  op.solve_gram(1.0, 0.0, op.apply(fstest::randn(rng, 7)), &quiet);
  EXPECT_TRUE(quiet.entries().empty());
}

TEST(Pinv, Examples) {
  const auto mask = LinearOperator::mask(4, {1, 3});
  EXPECT_EQ(mask.pinv_apply(vec({5.0, 6.0})), vec({0.0, 5.0, 0.0, 6.0}));
  const auto twice = LinearOperator::dense(2.0 * Matrix::Identity(3, 3));
  EXPECT_LE(fstest::max_abs(twice.pinv_apply(vec({2.0, 4.0, -6.0})) - vec({1.0, 2.0, -3.0})), 1e-15);
}

TEST(Pinv, RightInverseOfFullRowRank) {
  Rng rng(9);
  const auto op = LinearOperator::dense(fstest::randn(rng, 4, 9));
  for (int i = 0; i < 10; ++i) {
    const Vector y = fstest::randn(rng, 4);
    EXPECT_LE(fstest::max_abs(op.apply(op.pinv_apply(y)) - y), 1e-9);
  }
}

TEST(Pinv, MatchesDensePseudoInverse) {
  Rng rng(10);
  for (const auto& [name, op] : operator_zoo()) {
    const Matrix pinv = op.to_dense().completeOrthogonalDecomposition().pseudoInverse();
    const Vector y = op.apply(fstest::randn(rng, op.in_dim()));
    EXPECT_LE(fstest::rel_err(op.pinv_apply(y), pinv * y), 1e-8) << name;
  }
}

TEST(Pinv, ProjectorIsIdempotentAndSymmetric) {
  Rng rng(12);
  for (const auto& [name, op] : operator_zoo()) {
    for (int i = 0; i < 5; ++i) {
      const Vector x = fstest::randn(rng, op.in_dim()), w = fstest::randn(rng, op.in_dim());
      const Vector px = op.range_project(x);
      EXPECT_LE(fstest::max_abs(op.range_project(px) - px), 1e-9) << name;
      EXPECT_NEAR(px.dot(w), x.dot(op.range_project(w)), 1e-9 * x.norm() * w.norm()) << name;
      EXPECT_LE(fstest::max_abs(op.apply(px) - op.apply(x)), 1e-9 * std::max(1.0, x.norm())) << name;
    }
  }
}

TEST(Operators, NearestUpsampleRepeatsPixels) {
  const auto op = LinearOperator::downsample(ImageShape{1, 4, 4}, 2);
  const Vector up = op.nearest_upsample(vec({1.0, 2.0, 3.0, 4.0}));
  EXPECT_EQ(up, vec({1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
  EXPECT_LE(fstest::max_abs(op.apply(up) - vec({1.0, 2.0, 3.0, 4.0})), 1e-15);
  EXPECT_THROW(LinearOperator::identity(4).nearest_upsample(vec({1.0, 2.0, 3.0, 4.0})), ConfigError);
}

TEST(Operators, RandomBoxMaskIsSeeded) {
  const ImageShape s{1, 16, 16};
  EXPECT_EQ(LinearOperator::random_box_mask(s, 4, 5, 3).kept_indices(),
            LinearOperator::random_box_mask(s, 4, 5, 3).kept_indices());
  EXPECT_LT(LinearOperator::random_box_mask(s, 4, 5, 3).out_dim(), 256);
  const auto center = LinearOperator::center_box_mask(s, 4);
  EXPECT_EQ(center.out_dim(), 256 - 16);
}

TEST(Operators, ConcurrentReadsAgree) {
  Rng rng(13);
  const auto op = LinearOperator::gaussian_blur(ImageShape{1, 8, 8}, 3, 1.0);
  const Vector x = fstest::randn(rng, 64);
  std::vector<Vector> out(8);
  parallel_for(out.size(), 4, [&](std::size_t i) { out[i] = op.pinv_apply(op.apply(x)) + op.to_dense() * x; });
  for (const Vector& o : out) EXPECT_EQ(o, out.front());
}

}  // namespace
