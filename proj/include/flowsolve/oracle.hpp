// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Exact posterior machinery for Gaussian-mixture priors under linear Gaussian measurements.
// Within one mixture component, (x_1, x_t, y) are jointly Gaussian:
//
//     x_t = alpha x_1 + sigma eps,    y = A x_1 + sigma_y eps',
//
// so conditioning on any subset of the observations is a Kalman update, and the mixture
// weights are re-scored by each component's evidence. Nothing here approximates.

#include "flowsolve/gmm.hpp"
#include "flowsolve/operators.hpp"

namespace flowsolve {

struct GaussianUpdate {
  Vector mean;
  Matrix covariance;  // empty unless requested
  double log_evidence;
};

namespace detail {

/// LLT of a symmetric PSD matrix, escalating diagonal jitter 1e-10 * scale by 10x up to 3 times.
inline Eigen::LLT<Matrix> jittered_cholesky(const Matrix& s, const char* what) {
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() == Eigen::Success) return llt;
  const double scale = std::max(1.0, s.diagonal().cwiseAbs().maxCoeff());
  double jitter = 1e-10 * scale;
  for (int attempt = 0; attempt < 4; ++attempt, jitter *= 10.0) {
    llt.compute(s + jitter * Matrix::Identity(s.rows(), s.cols()));
    if (llt.info() == Eigen::Success) return llt;
  }
  throw NumericalError(detail::cat(what, " covariance is singular even after jitter"));
}

}  // namespace detail

/// Condition N(mu, sigma) on z = H x + noise, noise ~ N(0, diag(noise_var)).
inline GaussianUpdate condition_gaussian(const Vector& mu, const Matrix& sigma, const Matrix& h,
                                         const Vector& noise_var, const Vector& z, bool want_covariance) {
  const Matrix sh = sigma * h.transpose();  // Sigma H^T
  Matrix s = h * sh;
  s.diagonal() += noise_var;
  s = 0.5 * (s + s.transpose());
  const Eigen::LLT<Matrix> llt = detail::jittered_cholesky(s, "evidence");
  const Vector innovation = z - h * mu;
  const Vector solved = llt.solve(innovation);
  const Matrix l = llt.matrixL();
  const double logdet = 2.0 * l.diagonal().array().log().sum();
  GaussianUpdate out;
  out.mean = mu + sh * solved;
  out.log_evidence = -0.5 * (static_cast<double>(z.size()) * std::log(2.0 * std::numbers::pi) + logdet +
                             innovation.dot(solved));
  if (want_covariance) {
    out.covariance = sigma - sh * llt.solve(sh.transpose());
    out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
  }
  return out;
}

/// q(x_1 | y) as an explicit mixture (covariances may be singular when sigma_y = 0).
struct PosteriorGMM {
  std::vector<double> weights;
  std::vector<Vector> means;
  std::vector<Matrix> covariances;
  double log_evidence = 0.0;  // log q(y)

  Vector mean() const {
    Vector m = Vector::Zero(means.front().size());
    for (std::size_t k = 0; k < weights.size(); ++k) m += weights[k] * means[k];
    return m;
  }

  Matrix covariance() const {
    const Vector m = mean();
    Matrix c = Matrix::Zero(m.size(), m.size());
    for (std::size_t k = 0; k < weights.size(); ++k) {
      const Vector d = means[k] - m;
      c += weights[k] * (covariances[k] + d * d.transpose());
    }
    return c;
  }
};

namespace detail {

inline void check_oracle_inputs(const GaussianMixture& gmm, const LinearOperator& op, double sigma_y,
                                const Vector& y) {
  if (op.in_dim() != gmm.dim())
    throw ShapeError(detail::cat("operator ", op.shape_string(), " does not act on prior dimension ", gmm.dim()));
  if (y.size() != op.out_dim())
    throw ShapeError(detail::cat("observation of shape ", detail::shape_str(y.size(), 1),
                                 " does not match operator ", op.shape_string()));
  if (!(sigma_y >= 0.0)) throw DomainError(detail::cat("sigma_y must be >= 0, got ", sigma_y));
}

inline Matrix stacked_observation(const Matrix& a, double alpha) {
  const Index d = a.cols();
  Matrix h(d + a.rows(), d);
  h.topRows(d) = alpha * Matrix::Identity(d, d);
  h.bottomRows(a.rows()) = a;
  return h;
}

inline Vector stacked_noise(Index d, Index n, double sigma, double sigma_y) {
  Vector r(d + n);
  r.head(d).setConstant(sigma * sigma);
  r.tail(n).setConstant(sigma_y * sigma_y);
  return r;
}

/// Per-component conditioning on (x_t, y); returns log pi_k + log evidence and the means.
inline std::pair<std::vector<double>, std::vector<Vector>> joint_condition(
    const GaussianMixture& gmm, const LinearOperator& op, double sigma_y, const Vector& y,
    const ScheduleSample& s, const Vector& x) {
  check_oracle_inputs(gmm, op, sigma_y, y);
  if (x.size() != gmm.dim()) throw ShapeError("state does not match prior dimension");
  const Matrix h = stacked_observation(op.to_dense(), s.alpha);
  const Vector r = stacked_noise(gmm.dim(), op.out_dim(), s.sigma, sigma_y);
  Vector z(x.size() + y.size());
  z << x, y;
  std::vector<double> log_w(gmm.size());
  std::vector<Vector> means(gmm.size());
  for (std::size_t k = 0; k < gmm.size(); ++k) {
    const GaussianUpdate u = condition_gaussian(gmm.mean(k), gmm.covariance(k), h, r, z, false);
    log_w[k] = gmm.log_weight(k) + u.log_evidence;
    means[k] = u.mean;
  }
  return {std::move(log_w), std::move(means)};
}

}  // namespace detail

/// q(x_1 | y) for y = A x_1 + sigma_y eps. sigma_y = 0 conditions exactly on {A x = y}.
inline PosteriorGMM exact_posterior(const GaussianMixture& gmm, const LinearOperator& op, double sigma_y,
                                    const Vector& y) {
  detail::check_oracle_inputs(gmm, op, sigma_y, y);
  const Matrix& a = op.to_dense();
  const Vector r = Vector::Constant(op.out_dim(), sigma_y * sigma_y);
  PosteriorGMM post;
  std::vector<double> log_w(gmm.size());
  for (std::size_t k = 0; k < gmm.size(); ++k) {
    GaussianUpdate u = condition_gaussian(gmm.mean(k), gmm.covariance(k), a, r, y, true);
    log_w[k] = gmm.log_weight(k) + u.log_evidence;
    post.means.push_back(std::move(u.mean));
    post.covariances.push_back(std::move(u.covariance));
  }
  post.log_evidence = log_sum_exp(log_w);
  post.weights = softmax(log_w);
  return post;
}

/// E[x_1 | x_t, y] without approximation.
inline Vector exact_conditional_denoiser(const GaussianMixture& gmm, const LinearOperator& op, double sigma_y,
                                         const Vector& y, const ProbPath& path, double t, const Vector& x) {
  const ScheduleSample s = path.at(t);
  auto [log_w, means] = detail::joint_condition(gmm, op, sigma_y, y, s, x);
  const std::vector<double> w = softmax(log_w);
  Vector out = Vector::Zero(gmm.dim());
  for (std::size_t k = 0; k < w.size(); ++k) out += w[k] * means[k];
  return out;
}

/// The exact conditional vector field under `path`.
inline Vector exact_conditional_vf(const GaussianMixture& gmm, const LinearOperator& op, double sigma_y,
                                   const Vector& y, const ProbPath& path, double t, const Vector& x) {
  return vf_from_denoised(path, t, x, exact_conditional_denoiser(gmm, op, sigma_y, y, path, t, x));
}

/// log q(y | x_t) = log q(x_t, y) - log q(x_t).
inline double log_evidence(const GaussianMixture& gmm, const LinearOperator& op, double sigma_y,
                           const ProbPath& path, double t, const Vector& x, const Vector& y) {
  const ScheduleSample s = path.at(t);
  auto [log_w, means] = detail::joint_condition(gmm, op, sigma_y, y, s, x);
  (void)means;
  return log_sum_exp(log_w) - detail::gmm_terms(gmm, x, s.alpha, s.sigma, false).log_marginal;
}

}  // namespace flowsolve
