// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Analytic Gaussian-mixture prior q(x_1) = sum_k pi_k N(mu_k, Sigma_k). Under an affine
// Gaussian path every marginal q(x_t) is again a mixture,
//
//     x_t ~ sum_k pi_k N(alpha mu_k, alpha^2 Sigma_k + sigma^2 I),
//
// so the optimal denoiser E[x_1 | x_t], its Jacobian and log q(x_t) are closed form.
// These stand in for a pretrained network.

#include "flowsolve/models.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <variant>

namespace flowsolve {

class GaussianMixture {
 public:
  /// Either c * I (isotropic) or a full symmetric PSD matrix.
  using Covariance = std::variant<double, Matrix>;

  GaussianMixture(std::vector<double> weights, std::vector<Vector> means,
                  std::vector<Covariance> covariances) {
    const std::size_t k = weights.size();
    if (k == 0) throw ConfigError("gaussian mixture needs at least one component");
    if (means.size() != k || covariances.size() != k)
      throw ConfigError(detail::cat("gaussian mixture has ", k, " weights, ", means.size(),
                                    " means and ", covariances.size(), " covariances"));
    dim_ = means.front().size();
    if (dim_ == 0) throw ConfigError("gaussian mixture means must be non-empty");
    double total = 0.0;
    for (double w : weights) {
      if (!(w > 0.0) || !std::isfinite(w))
        throw ConfigError(detail::cat("mixture weight ", w, " must be positive"));
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw ConfigError(detail::cat("mixture weights sum to ", total, ", expected 1 within 1e-12"));

    components_.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      if (means[i].size() != dim_)
        throw ShapeError(detail::cat("mixture mean ", i, " has dimension ", means[i].size(),
                                     ", expected ", dim_));
      components_.push_back(make_component(weights[i], std::move(means[i]), covariances[i], i));
    }
    weights_ = std::move(weights);
  }

  static GaussianMixture standard_normal(Index dim) {
    return GaussianMixture({1.0}, {Vector::Zero(dim)}, {Covariance{1.0}});
  }

  Index dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return components_.size(); }
  double weight(std::size_t k) const { return components_.at(k).weight; }
  double log_weight(std::size_t k) const { return components_.at(k).log_weight; }
  const Vector& mean(std::size_t k) const { return components_.at(k).mean; }
  bool is_isotropic(std::size_t k) const { return components_.at(k).isotropic; }

  Matrix covariance(std::size_t k) const {
    const Component& c = components_.at(k);
    if (c.isotropic) return c.iso_var * Matrix::Identity(dim_, dim_);
    return c.basis * c.eigenvalues.asDiagonal() * c.basis.transpose();
  }

  /// True when the mixture is exactly N(0, I).
  bool is_standard_normal() const {
    if (components_.size() != 1) return false;
    const Component& c = components_.front();
    if (!c.mean.isZero(0.0)) return false;
    if (c.isotropic) return c.iso_var == 1.0;
    return (covariance(0) - Matrix::Identity(dim_, dim_)).cwiseAbs().maxCoeff() == 0.0;
  }

  Vector sample(Rng& rng) const {
    std::discrete_distribution<std::size_t> pick(weights_.begin(), weights_.end());
    const Component& c = components_[pick(rng)];
    const Vector z = flowsolve::standard_normal(rng, dim_);
    if (c.isotropic) return c.mean + std::sqrt(c.iso_var) * z;
    return c.mean + c.basis * (c.eigenvalues.cwiseSqrt().cwiseProduct(z));
  }

  // --- per-component spectral access used by the closed-form evaluators ---

  /// Eigenvalues of Sigma_k (for isotropic components: a single entry).
  const Vector& eigenvalues(std::size_t k) const { return components_.at(k).eigenvalues; }
  /// Orthonormal eigenvectors of Sigma_k; empty for isotropic components.
  const Matrix& eigenbasis(std::size_t k) const { return components_.at(k).basis; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["weights"] = nlohmann::json::array();
    j["means"] = nlohmann::json::array();
    bool all_iso = true;
    for (const auto& c : components_) all_iso = all_iso && c.isotropic;
    nlohmann::json covs = nlohmann::json::array();
    nlohmann::json iso = nlohmann::json::array();
    for (std::size_t k = 0; k < components_.size(); ++k) {
      const Component& c = components_[k];
      j["weights"].push_back(c.weight);
      j["means"].push_back(std::vector<double>(c.mean.data(), c.mean.data() + c.mean.size()));
      if (all_iso) {
        iso.push_back(c.iso_var);
      } else {
        const Matrix m = covariance(k);
        nlohmann::json rows = nlohmann::json::array();
        for (Index r = 0; r < m.rows(); ++r) {
          std::vector<double> row(m.cols());
          for (Index col = 0; col < m.cols(); ++col) row[col] = m(r, col);
          rows.push_back(row);
        }
        covs.push_back(rows);
      }
    }
    if (all_iso)
      j["covariances"] = {{"isotropic", iso}};
    else
      j["covariances"] = covs;
    return j;
  }

  static GaussianMixture from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("gmm spec must be a JSON object");
    for (const auto& [key, _] : j.items())
      if (key != "weights" && key != "means" && key != "covariances")
        throw ConfigError(detail::cat("unknown key '", key, "' in gmm spec"));
    if (!j.contains("weights") || !j.contains("means") || !j.contains("covariances"))
      throw ConfigError("gmm spec needs 'weights', 'means' and 'covariances'");
    try {
      auto weights = j.at("weights").get<std::vector<double>>();
      std::vector<Vector> means;
      for (const auto& m : j.at("means")) {
        auto v = m.get<std::vector<double>>();
        means.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size())));
      }
      std::vector<Covariance> covs;
      const auto& cj = j.at("covariances");
      if (cj.is_object()) {
        if (cj.size() != 1 || !cj.contains("isotropic"))
          throw ConfigError("covariances object form must be {\"isotropic\": [...]}");
        for (double c : cj.at("isotropic").get<std::vector<double>>()) covs.emplace_back(c);
      } else {
        for (const auto& mat : cj) {
          auto rows = mat.get<std::vector<std::vector<double>>>();
          Matrix m(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows[0].size()));
          for (std::size_t r = 0; r < rows.size(); ++r) {
            if (static_cast<Index>(rows[r].size()) != m.cols())
              throw ConfigError("ragged covariance matrix in gmm spec");
            for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
          }
          covs.emplace_back(std::move(m));
        }
      }
      return GaussianMixture(std::move(weights), std::move(means), std::move(covs));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(detail::cat("malformed gmm spec: ", e.what()));
    }
  }

  static GaussianMixture load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError(detail::cat("cannot open gmm file ", file.string()));
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(detail::cat("cannot parse gmm file ", file.string(), ": ", e.what()));
    }
    return from_json(j);
  }

 private:
  struct Component {
    double weight;
    double log_weight;
    Vector mean;
    bool isotropic;
    double iso_var;
    Vector eigenvalues;
    Matrix basis;
  };

  static Component make_component(double weight, Vector mean, const Covariance& cov, std::size_t idx) {
    Component c{weight, std::log(weight), std::move(mean), false, 0.0, {}, {}};
    const Index d = c.mean.size();
    if (std::holds_alternative<double>(cov)) {
      const double v = std::get<double>(cov);
      if (!(v >= 0.0) || !std::isfinite(v))
        throw ConfigError(detail::cat("isotropic variance ", v, " of component ", idx, " must be >= 0"));
      c.isotropic = true;
      c.iso_var = v;
      c.eigenvalues = Vector::Constant(1, v);
      return c;
    }
    const Matrix& m = std::get<Matrix>(cov);
    if (m.rows() != d || m.cols() != d)
      throw ShapeError(detail::cat("covariance ", idx, " has shape ", detail::shape_str(m.rows(), m.cols()),
                                   ", expected ", detail::shape_str(d, d)));
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
      throw ConfigError(detail::cat("covariance ", idx, " is not symmetric"));
    Eigen::LLT<Matrix> llt(m + 1e-10 * Matrix::Identity(d, d));
    if (llt.info() != Eigen::Success)
      throw ConfigError(detail::cat("covariance ", idx, " is not positive semi-definite"));
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (m + m.transpose()));
    if (eig.info() != Eigen::Success)
      throw NumericalError(detail::cat("eigendecomposition of covariance ", idx, " failed"));
    c.eigenvalues = eig.eigenvalues().cwiseMax(0.0);
    c.basis = eig.eigenvectors();
    return c;
  }

  Index dim_ = 0;
  std::vector<Component> components_;
  std::vector<double> weights_;
};

namespace detail {

/// Per-component quantities of the mixture marginal at (x_t; alpha, sigma).
struct GmmTerms {
  std::vector<double> log_joint;      // log pi_k + log N(x; alpha mu_k, C_k)
  std::vector<double> responsibility;  // softmax of log_joint
  std::vector<Vector> post_mean;       // E[x_1 | x_t, k]
  std::vector<Vector> score;           // grad_x log N(x; alpha mu_k, C_k)
  std::vector<Vector> marg_var;        // spectrum of C_k = alpha^2 Sigma_k + sigma^2 I
  double log_marginal = 0.0;
};

inline Vector marginal_spectrum(const Vector& eigenvalues, double alpha, double sigma) {
  Vector c = (alpha * alpha) * eigenvalues.array() + sigma * sigma;
  // jitter escalation for exactly singular marginals (sigma = 0 with a degenerate Sigma_k)
  double jitter = 1e-10;
  for (int attempt = 0; attempt <= 3 && !(c.minCoeff() > 0.0); ++attempt, jitter *= 10.0)
    c.array() += jitter;
  if (!(c.minCoeff() > 0.0) || !c.allFinite())
    throw NumericalError("mixture component marginal covariance is singular");
  return c;
}

inline GmmTerms gmm_terms(const GaussianMixture& gmm, const Vector& x, double alpha, double sigma,
                          bool need_score) {
  const Index d = gmm.dim();
  if (x.size() != d)
    throw ShapeError(detail::cat("state has dimension ", x.size(), ", prior has dimension ", d));
  const std::size_t k_count = gmm.size();
  GmmTerms out;
  out.log_joint.resize(k_count);
  out.post_mean.resize(k_count);
  out.marg_var.resize(k_count);
  if (need_score) out.score.resize(k_count);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  for (std::size_t k = 0; k < k_count; ++k) {
    const Vector diff = x - alpha * gmm.mean(k);
    const Vector& lambda = gmm.eigenvalues(k);
    const Vector c = marginal_spectrum(lambda, alpha, sigma);
    out.marg_var[k] = c;
    double quad, logdet;
    if (gmm.is_isotropic(k)) {
      quad = diff.squaredNorm() / c[0];
      logdet = static_cast<double>(d) * std::log(c[0]);
      out.post_mean[k] = gmm.mean(k) + (alpha * lambda[0] / c[0]) * diff;
      if (need_score) out.score[k] = -diff / c[0];
    } else {
      const Matrix& q = gmm.eigenbasis(k);
      const Vector proj = q.transpose() * diff;
      quad = (proj.array().square() / c.array()).sum();
      logdet = c.array().log().sum();
      out.post_mean[k] =
          gmm.mean(k) + q * (alpha * (lambda.array() / c.array()) * proj.array()).matrix();
      if (need_score) out.score[k] = -(q * (proj.array() / c.array()).matrix());
    }
    out.log_joint[k] = gmm.log_weight(k) - 0.5 * (static_cast<double>(d) * log2pi + logdet + quad);
  }
  out.log_marginal = log_sum_exp(out.log_joint);
  out.responsibility = softmax(out.log_joint);
  return out;
}

}  // namespace detail

/// E[x_1 | x_t] for the mixture under (alpha, sigma).
inline Vector gmm_posterior_mean(const GaussianMixture& gmm, const Vector& x, double alpha, double sigma) {
  const detail::GmmTerms terms = detail::gmm_terms(gmm, x, alpha, sigma, false);
  Vector out = Vector::Zero(gmm.dim());
  for (std::size_t k = 0; k < gmm.size(); ++k) out += terms.responsibility[k] * terms.post_mean[k];
  return out;
}

/// cotangent^T d E[x_1|x_t] / d x_t, including the responsibility-gradient term.
inline Vector gmm_posterior_mean_vjp(const GaussianMixture& gmm, const Vector& x, double alpha,
                                     double sigma, const Vector& cotangent) {
  const detail::GmmTerms terms = detail::gmm_terms(gmm, x, alpha, sigma, true);
  const Index d = gmm.dim();
  Vector mean_score = Vector::Zero(d);
  for (std::size_t k = 0; k < gmm.size(); ++k) mean_score += terms.responsibility[k] * terms.score[k];
  Vector out = Vector::Zero(d);
  for (std::size_t k = 0; k < gmm.size(); ++k) {
    const double w = terms.responsibility[k];
    if (w == 0.0) continue;
    const Vector& lambda = gmm.eigenvalues(k);
    const Vector& c = terms.marg_var[k];
    // alpha C_k^{-1} Sigma_k is symmetric, so its transpose-product equals its product
    if (gmm.is_isotropic(k)) {
      out += w * (alpha * lambda[0] / c[0]) * cotangent;
    } else {
      const Matrix& q = gmm.eigenbasis(k);
      const Vector proj = q.transpose() * cotangent;
      out += w * (q * (alpha * (lambda.array() / c.array()) * proj.array()).matrix());
    }
    out += w * cotangent.dot(terms.post_mean[k]) * (terms.score[k] - mean_score);
  }
  return out;
}

/// log q(x_t) of the mixture marginal at time t.
inline double gmm_log_marginal(const GaussianMixture& gmm, const ProbPath& path, double t, const Vector& x) {
  const ScheduleSample s = path.at(t);
  return detail::gmm_terms(gmm, x, s.alpha, s.sigma, false).log_marginal;
}

/// grad_x log q(x_t).
inline Vector gmm_score(const GaussianMixture& gmm, const ProbPath& path, double t, const Vector& x) {
  const ScheduleSample s = path.at(t);
  const detail::GmmTerms terms = detail::gmm_terms(gmm, x, s.alpha, s.sigma, true);
  Vector out = Vector::Zero(gmm.dim());
  for (std::size_t k = 0; k < gmm.size(); ++k) out += terms.responsibility[k] * terms.score[k];
  return out;
}

/// Closed-form denoiser E[x_1 | x_t] of the mixture, native to `path`.
inline Denoiser gmm_denoiser(std::shared_ptr<const GaussianMixture> gmm, const ProbPath& path) {
  if (!gmm) throw ConfigError("gmm_denoiser needs a mixture");
  Denoiser d;
  d.native_path = path;
  d.evaluate = [gmm, path](const Vector& x, double t) {
    const ScheduleSample s = path.at(t);
    if (s.alpha == 0.0 && s.sigma == 0.0)
      throw SingularityError(detail::cat("alpha and sigma both vanish at t = ", t), t);
    return gmm_posterior_mean(*gmm, x, s.alpha, s.sigma);
  };
  d.vjp = [gmm, path](const Vector& x, double t, const Vector& c) {
    const ScheduleSample s = path.at(t);
    if (s.alpha == 0.0 && s.sigma == 0.0)
      throw SingularityError(detail::cat("alpha and sigma both vanish at t = ", t), t);
    return gmm_posterior_mean_vjp(*gmm, x, s.alpha, s.sigma, c);
  };
  return d;
}

inline Denoiser gmm_denoiser(const GaussianMixture& gmm, const ProbPath& path) {
  return gmm_denoiser(std::make_shared<const GaussianMixture>(gmm), path);
}

}  // namespace flowsolve
