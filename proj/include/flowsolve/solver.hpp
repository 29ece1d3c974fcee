// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Training-free posterior sampling for linear inverse problems: start at t0 > 0 from a
// noised lift of the observation, then integrate the guided vector field with fixed-step
// Euler up to 1 - end_epsilon and read out the denoiser there.
//
// Per step: one denoiser evaluation and one vector-Jacobian product.

#include "flowsolve/guidance.hpp"
#include "flowsolve/models.hpp"
#include "flowsolve/operators.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <variant>

namespace flowsolve {

enum class InitMode { YInit, PinvInit };

/// How y is mapped into state space for YInit. Auto picks Identity for square operators,
/// NearestNeighbor for downsampling and Pinv otherwise.
enum class Lift { Auto, Identity, NearestNeighbor, Pinv };

using Model = std::variant<Denoiser, VectorFieldModel>;

struct SolveRun {
  ProbPath path = ProbPath::cond_ot();
  Model model;
  std::shared_ptr<const LinearOperator> op;
  Vector y;
  GuidanceConfig guidance;
  double t0 = 0.2;
  int n_steps = 100;
  InitMode init_mode = InitMode::YInit;
  Lift lift = Lift::Auto;
  std::uint64_t seed = 0;
  double end_epsilon = 1e-3;
  bool record_trajectory = false;
};

struct StepRecord {
  int step;
  double t;
  double residual_norm;  // |y - A x1_hat|
  double g_norm;
  double coeff;          // sigma^2 d/dt ln(alpha/sigma) * gamma
  double rt2;
};

struct SolveResult {
  Vector x1;
  std::vector<std::pair<double, Vector>> trajectory;
  std::vector<StepRecord> diagnostics;
  std::vector<std::string> warnings;
  int denoiser_evals = 0;  // guided integration steps
  int vjp_evals = 0;
  int readout_evals = 0;   // final denoiser readout
};

struct GridPoint {
  double t;
  double t_native;  // time on the model's native path
};

inline const ProbPath& native_path(const Model& m) {
  return std::visit([](const auto& model) -> const ProbPath& { return model.native_path; }, m);
}

inline std::vector<double> time_grid(const SolveRun& run) {
  std::vector<double> grid(static_cast<std::size_t>(run.n_steps) + 1);
  const double t_end = 1.0 - run.end_epsilon;
  const double h = (t_end - run.t0) / run.n_steps;
  for (int k = 0; k <= run.n_steps; ++k) grid[k] = run.t0 + k * h;
  grid.back() = t_end;
  return grid;
}

namespace detail {

inline void validate_run_shape(const SolveRun& run) {
  if (!run.op) throw ConfigError("solve run has no measurement operator");
  if (!(run.n_steps >= 1)) throw ConfigError(detail::cat("n_steps must be >= 1, got ", run.n_steps));
  if (!(run.end_epsilon > 0.0) || !(run.end_epsilon < 1.0))
    throw ConfigError(detail::cat("end_epsilon must lie in (0, 1), got ", run.end_epsilon));
  if (!(run.t0 > 0.0) || !(run.t0 < 1.0 - run.end_epsilon))
    throw ConfigError(detail::cat("t0 must lie in (0, 1 - end_epsilon) = (0, ", 1.0 - run.end_epsilon,
                                  "), got ", run.t0));
  if (run.y.size() != run.op->out_dim())
    throw ConfigError(detail::cat("observation of shape ", detail::shape_str(run.y.size(), 1),
                                  " does not match operator ", run.op->shape_string()));
  run.guidance.validate();
  const bool has_eval =
      std::visit([](const auto& m) { return static_cast<bool>(m.evaluate); }, run.model);
  if (!has_eval) throw ConfigError("solve run model has no evaluator");
}

}  // namespace detail

/// Retimes every grid time onto the model's native path; fails before any integration
/// with the feasible range of t0 (and of the end time) when some grid point is unreachable.
inline std::vector<GridPoint> validate_grid(const SolveRun& run) {
  detail::validate_run_shape(run);
  const ProbPath& native = native_path(run.model);
  const std::vector<double> grid = time_grid(run);
  std::vector<GridPoint> out;
  out.reserve(grid.size());
  if (native == run.path) {
    for (double t : grid) out.push_back({t, t});
    return out;
  }
  const TimeWindow w = feasible_window(native, run.path);
  std::vector<double> bad;
  for (double t : grid) {
    try {
      out.push_back({t, retime_point(native, run.path, t).t_native});
    } catch (const RangeUnattainable&) {
      bad.push_back(t);
    }
  }
  if (!bad.empty()) {
    const bool low = bad.front() < 0.5 * (w.t_min + w.t_max);
    throw ConfigError(detail::cat(
        bad.size(), " grid times cannot be retimed from native path ", native.name(), " onto ",
        run.path.name(), " (first offending t = ", bad.front(), "); feasible times are [", w.t_min, ", ",
        w.t_max, "]", low ? detail::cat("; minimum feasible t0 is ", w.t_min)
                          : detail::cat("; maximum feasible end time is ", w.t_max)));
  }
  return out;
}

/// The observation mapped into state space for initialization.
inline Vector lifted_observation(const SolveRun& run) {
  const LinearOperator& op = *run.op;
  if (run.init_mode == InitMode::PinvInit) return op.pinv_apply(run.y);
  Lift lift = run.lift;
  if (lift == Lift::Auto) {
    if (op.kind() == LinearOperator::Kind::Downsample)
      lift = Lift::NearestNeighbor;
    else if (op.out_dim() == op.in_dim())
      lift = Lift::Identity;
    else
      lift = Lift::Pinv;
  }
  switch (lift) {
    case Lift::Identity:
      if (op.out_dim() != op.in_dim())
        throw ConfigError(detail::cat("identity lift needs a square operator, got ", op.shape_string()));
      return run.y;
    case Lift::NearestNeighbor:
      return op.nearest_upsample(run.y);
    case Lift::Pinv:
    case Lift::Auto:
      return op.pinv_apply(run.y);
  }
  return run.y;
}

/// x_{t0} = alpha_{t0} lift(y) + sigma_{t0} eps.
inline Vector initialize(const SolveRun& run, Rng& rng) {
  const Vector lifted = lifted_observation(run);
  const ScheduleSample s = run.path.at(run.t0);
  return s.alpha * lifted + s.sigma * standard_normal(rng, lifted.size());
}

/// The corrected vector field of a run, evaluated one grid point at a time.
class GuidedField {
 public:
  struct Eval {
    Vector v;         // corrected vector field
    Vector x1_hat;    // denoiser output after the optional null/range combination
    StepRecord record;
  };

  explicit GuidedField(const SolveRun& run) : run_(run) {
    if (const auto* d = std::get_if<Denoiser>(&run.model)) {
      const Denoiser dd = retime(*d, run.path);
      denoise_ = dd.evaluate;
      vjp_ = vjp_or_fallback(dd.vjp, dd.evaluate);
      return;
    }
    const auto& m = std::get<VectorFieldModel>(run.model);
    const Denoiser dd = vf_to_denoiser(m, run.path);
    denoise_ = dd.evaluate;
    vjp_ = vjp_or_fallback(dd.vjp, dd.evaluate);
    if (m.native_path == run.path) direct_vf_ = m.evaluate;
  }

  /// One denoiser (or vector field) evaluation and exactly one vjp.
  Eval operator()(const Vector& x, double t, WarningLog* warnings = nullptr) {
    const LinearOperator& op = *run_.op;
    const GuidanceConfig& gc = run_.guidance;
    Eval e;
    Vector v;
    if (direct_vf_ && !gc.null_range) {
      v = direct_vf_(x, t);
      e.x1_hat = denoised_from_vf(run_.path, t, x, v);
    } else {
      e.x1_hat = denoise_(x, t);
    }
    ++denoiser_evals_;
    if (gc.null_range) e.x1_hat = null_range_combine(op, run_.y, e.x1_hat);
    if (v.size() == 0) v = vf_from_denoised(run_.path, t, x, e.x1_hat);

    const double r2 = rt2(gc.rt2_rule, run_.path, t);
    const Vector g = pigdm_g(
        op, run_.y, e.x1_hat,
        [&](const Vector& c) {
          ++vjp_evals_;
          return vjp_(x, t, c);
        },
        r2, gc.sigma_y, warnings);
    const double weight = gamma(gc.gamma_rule, run_.path, t);
    const double coeff = weight == 0.0 ? 0.0 : correction_coefficient(run_.path, t) * weight;
    e.v = correct_vf(v, g, run_.path, t, gc.gamma_rule);
    e.record = {0, t, (run_.y - op.apply(e.x1_hat)).norm(), g.norm(), coeff, r2};
    return e;
  }

  /// The plain denoiser readout used at the final time.
  Vector readout(const Vector& x, double t) {
    Vector x1 = denoise_(x, t);
    ++readout_evals_;
    if (run_.guidance.null_range) x1 = null_range_combine(*run_.op, run_.y, x1);
    return x1;
  }

  int denoiser_evals() const noexcept { return denoiser_evals_; }
  int vjp_evals() const noexcept { return vjp_evals_; }
  int readout_evals() const noexcept { return readout_evals_; }

 private:
  const SolveRun& run_;
  EvalFn denoise_;
  VjpFn vjp_;
  EvalFn direct_vf_;
  int denoiser_evals_ = 0;
  int vjp_evals_ = 0;
  int readout_evals_ = 0;
};

/// Integrates the guided field from a given state at t0. `solve` wraps this with initialization.
inline SolveResult integrate(const SolveRun& run, Vector x) {
  validate_grid(run);
  const LinearOperator& op = *run.op;
  if (x.size() != op.in_dim())
    throw ShapeError(detail::cat("initial state of shape ", detail::shape_str(x.size(), 1),
                                 " does not match operator ", op.shape_string()));
  GuidedField field(run);
  const std::vector<double> grid = time_grid(run);
  WarningLog warnings;
  SolveResult result;
  result.diagnostics.reserve(static_cast<std::size_t>(run.n_steps));
  if (run.record_trajectory) result.trajectory.emplace_back(grid.front(), x);

  for (int k = 0; k < run.n_steps; ++k) {
    const double t = grid[k];
    GuidedField::Eval e = field(x, t, &warnings);
    e.record.step = k;
    x += (grid[k + 1] - t) * e.v;
    result.diagnostics.push_back(e.record);
    if (!all_finite(x))
      throw DivergenceError(detail::cat("state became non-finite at step ", k, " (t = ", t, ", |g| = ",
                                        e.record.g_norm, ", coeff = ", e.record.coeff, ")"),
                            k);
    if (run.record_trajectory) result.trajectory.emplace_back(grid[k + 1], x);
  }

  result.x1 = field.readout(x, grid.back());
  if (!all_finite(result.x1)) throw DivergenceError("denoiser readout is non-finite", run.n_steps);
  result.denoiser_evals = field.denoiser_evals();
  result.vjp_evals = field.vjp_evals();
  result.readout_evals = field.readout_evals();
  result.warnings = warnings.entries();
  return result;
}

inline SolveResult solve(const SolveRun& run) {
  validate_grid(run);
  Rng rng(run.seed);
  return integrate(run, initialize(run, rng));
}

/// Worker count from FLOWSOLVE_THREADS, else the hardware concurrency.
inline unsigned worker_count(unsigned requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("FLOWSOLVE_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs `count` tasks on a bounded pool; results are indexed by task, independent of scheduling.
template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::jthread> pool;
  for (unsigned w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

/// `repeats` independent solves; run i uses seed derive_seed(run.seed, i).
inline std::vector<SolveResult> solve_batch(const SolveRun& run, std::size_t repeats, unsigned threads = 0) {
  validate_grid(run);
  std::vector<SolveResult> out(repeats);
  parallel_for(repeats, worker_count(threads), [&](std::size_t i) {
    SolveRun r = run;
    r.seed = derive_seed(run.seed, i);
    out[i] = solve(r);
  });
  return out;
}

}  // namespace flowsolve
