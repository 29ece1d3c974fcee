// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowsolve {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Generator used everywhere randomness enters. Callers own the state.
using Rng = std::mt19937_64;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation (t ∉ [0,1], r² < 0, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Evaluation at a point where a coefficient blows up (σ_t = 0, α_t = 0, ...).
class SingularityError : public Error {
 public:
  SingularityError(const std::string& what, double t) : Error(what), t_(t) {}
  double t() const noexcept { return t_; }

 private:
  double t_;
};

/// A requested SNR (or time) that a path cannot reach. `lower`/`upper` are the
/// attainable bounds in whatever unit the thrower documents.
class RangeUnattainable : public Error {
 public:
  RangeUnattainable(const std::string& what, double lower, double upper)
      : Error(what), lower_(lower), upper_(upper) {}
  double lower() const noexcept { return lower_; }
  double upper() const noexcept { return upper_; }

 private:
  double lower_;
  double upper_;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int step) : Error(what), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  os.precision(17);
  (os << ... << std::forward<Args>(args));
  return os.str();
}

inline std::string shape_str(Index rows, Index cols) {
  return cat("(", rows, ", ", cols, ")");
}

}  // namespace detail

/// splitmix64 finalizer applied to (seed, index); used to derive per-run seeds.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Vector standard_normal(Rng& rng, Index n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector out(n);
  for (Index i = 0; i < n; ++i) out[i] = normal(rng);
  return out;
}

inline double log_sum_exp(std::span<const double> values) {
  double shift = -kInf;
  for (double v : values) shift = std::max(shift, v);
  if (!std::isfinite(shift)) return shift;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - shift);
  return shift + std::log(acc);
}

/// Normalized weights exp(v_k - logsumexp(v)).
inline std::vector<double> softmax(std::span<const double> values) {
  const double lse = log_sum_exp(values);
  std::vector<double> out(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) out[k] = std::exp(values[k] - lse);
  return out;
}

inline bool all_finite(const Vector& v) { return v.allFinite(); }

/// Thread-safe, de-duplicating sink for non-fatal numerical warnings.
class WarningLog {
 public:
  WarningLog() = default;
  WarningLog(const WarningLog& other) : entries_(other.entries()) {}
  WarningLog& operator=(const WarningLog& other) {
    if (this != &other) {
      auto copy = other.entries();
      std::lock_guard lock(mutex_);
      entries_ = std::move(copy);
    }
    return *this;
  }

  void add(const std::string& message) {
    std::lock_guard lock(mutex_);
    for (const auto& e : entries_)
      if (e == message) return;
    entries_.push_back(message);
  }

  std::vector<std::string> entries() const {
    std::lock_guard lock(mutex_);
    return entries_;
  }

  bool empty() const {
    std::lock_guard lock(mutex_);
    return entries_.empty();
  }

 private:
  mutable std::mutex mutex_;
  std::vector<std::string> entries_;
};

}  // namespace flowsolve
