// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// The commands behind the `flowsolve` executable. Each returns a process exit code:
//   0 success, 1 oracle tolerance violated, 2 configuration or input error,
//   3 numerical divergence.
//
// Output files are written under the config's output_dir (resolved against the config's
// directory). Everything written is a deterministic function of the config and the seed;
// wall-clock columns stay 0 unless timing is requested.

#include "flowsolve/config.hpp"
#include "flowsolve/metrics.hpp"
#include "flowsolve/oracle.hpp"

#include <chrono>
#include <iomanip>
#include <iostream>
#include <map>

namespace flowsolve {

enum ExitCode : int { kExitOk = 0, kExitToleranceFailed = 1, kExitConfigError = 2, kExitDiverged = 3 };

struct CommandOptions {
  std::optional<std::uint64_t> seed;  // replaces solver.seed
  unsigned threads = 0;               // 0: FLOWSOLVE_THREADS or hardware concurrency
  bool timing = false;
  std::string output_dir;             // replaces the config's output_dir when set
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

/// Bumped whenever a column is added, removed or renamed.
inline constexpr int kCsvSchemaVersion = 1;

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {"schema",   "run_id", "seed", "psnr", "ssim", "mse",
                                                "posterior_mean_error", "nfe", "wall_time"};
  return cols;
}

inline const std::vector<std::string>& ablation_columns() {
  static const std::vector<std::string> cols = {
      "schema",  "cell",     "repeat",   "seed", "t0",  "n_steps", "gamma_rule",
      "init_mode", "rt2_rule", "sigma_y", "null_range", "status", "psnr", "ssim",
      "mse", "posterior_mean_error", "oracle_gap", "nfe", "wall_time", "message"};
  return cols;
}

inline const std::vector<std::string>& summary_columns() {
  static const std::vector<std::string> cols = {
      "schema", "cell", "t0", "n_steps", "gamma_rule", "init_mode", "rt2_rule", "sigma_y", "null_range",
      "ok", "skipped", "diverged", "mean_psnr", "mean_ssim", "mean_mse", "mean_posterior_mean_error",
      "mean_oracle_gap"};
  return cols;
}

inline const std::vector<std::string>& diagnostics_columns() {
  static const std::vector<std::string> cols = {"step", "t", "residual_norm", "g_norm", "coeff"};
  return cols;
}

namespace detail {

inline std::string num(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string csv_line(const std::vector<std::string>& cells) {
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) line += ',';
    line += csv_escape(cells[i]);
  }
  return line + "\n";
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes(path, std::vector<unsigned char>(text.begin(), text.end()));
}

inline std::string run_id(int index) {
  std::ostringstream os;
  os << std::setw(3) << std::setfill('0') << index;
  return os.str();
}

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// The largest dimension for which dense oracle quantities are computed.
inline constexpr Index kOracleMaxDim = 1024;

/// Row-major image as a (channels * height) x width matrix.
inline Matrix as_image(const Vector& v, const ImageShape& s) {
  Matrix m(s.channels * s.height, s.width);
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) m(r, c) = v(r * s.width + c);
  return m;
}

inline std::filesystem::path output_dir(const RunConfig& c, const CommandOptions& opt) {
  return opt.output_dir.empty() ? c.resolve(c.output_dir) : std::filesystem::path(opt.output_dir);
}

inline RunConfig load_with_overrides(const std::filesystem::path& file, const CommandOptions& opt) {
  RunConfig c = load_config(file);
  if (opt.seed) c.solver.seed = *opt.seed;
  return c;
}

inline std::string diagnostics_csv(const SolveResult& r) {
  std::string text = csv_line(diagnostics_columns());
  for (const StepRecord& s : r.diagnostics)
    text += csv_line({std::to_string(s.step), num(s.t), num(s.residual_norm), num(s.g_norm), num(s.coeff)});
  return text;
}

}  // namespace detail

struct MetricsRow {
  std::string run_id;
  std::uint64_t seed = 0;
  double psnr = detail::kNaN;
  double ssim = detail::kNaN;
  double mse = detail::kNaN;
  double posterior_mean_error = detail::kNaN;  // RMS distance to the exact posterior mean
  int nfe = 0;
  double wall_time = 0.0;

  std::vector<std::string> cells() const {
    return {std::to_string(kCsvSchemaVersion), run_id, std::to_string(seed), detail::num(psnr), detail::num(ssim),
            detail::num(mse), detail::num(posterior_mean_error), std::to_string(nfe), detail::num(wall_time)};
  }
};

/// Exact posterior mean of the configured problem, when the dimension allows dense algebra.
inline std::optional<Vector> oracle_posterior_mean(const Problem& p) {
  if (p.prior->dim() > detail::kOracleMaxDim) return std::nullopt;
  return exact_posterior(*p.prior, *p.run.op, p.run.guidance.sigma_y, p.run.y).mean();
}

inline void fill_metrics(MetricsRow& row, const Vector& x1, const Problem& p, const std::optional<Vector>& post_mean) {
  if (p.ground_truth) {
    row.mse = mse(x1, *p.ground_truth);
    row.psnr = psnr(x1, *p.ground_truth);
    row.ssim = ssim(x1, *p.ground_truth, p.shape);
  }
  if (post_mean) row.posterior_mean_error = std::sqrt(mse(x1, *post_mean));
}

/// Invokes `body` and maps exceptions to exit codes with a one-line stderr message.
template <typename Body>
int run_command(const char* name, std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const DivergenceError& e) {
    err << name << ": diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const NumericalError& e) {
    err << name << ": numerical failure: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const SingularityError& e) {
    err << name << ": singularity: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    err << name << ": error: " << e.what() << "\n";
    return kExitConfigError;
  }
}

// ---------------------------------------------------------------------------------------
// solve

/// Writes x1_NNN.bin, diagnostics_NNN.csv, metrics.csv, y.bin (and ground_truth.bin,
/// x1_NNN.pgm for image-shaped problems).
inline int cmd_solve(const std::filesystem::path& config_file, const CommandOptions& opt = {}) {
  return run_command("solve", *opt.err, [&] {
    const RunConfig c = detail::load_with_overrides(config_file, opt);
    const Problem p = make_problem(c);
    validate_grid(p.run);
    const auto dir = detail::output_dir(c, opt);
    std::filesystem::create_directories(dir);
    const std::optional<Vector> post_mean = oracle_posterior_mean(p);

    std::vector<SolveResult> results(static_cast<std::size_t>(c.repeats));
    std::vector<double> times(results.size(), 0.0);
    parallel_for(results.size(), worker_count(opt.threads), [&](std::size_t i) {
      SolveRun r = p.run;
      r.seed = derive_seed(p.run.seed, i);
      const auto start = std::chrono::steady_clock::now();
      results[i] = solve(r);
      if (opt.timing) times[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    });

    write_tensor(dir / "y.bin", p.run.y);
    if (p.ground_truth) write_tensor(dir / "ground_truth.bin", detail::as_image(*p.ground_truth, p.shape));
    std::string metrics = detail::csv_line(metrics_columns());
    for (std::size_t i = 0; i < results.size(); ++i) {
      const std::string id = detail::run_id(static_cast<int>(i));
      const Matrix image = detail::as_image(results[i].x1, p.shape);
      write_tensor(dir / ("x1_" + id + ".bin"), image);
      if (p.shape.height > 1) write_pgm(dir / ("x1_" + id + ".pgm"), image);
      detail::write_text(dir / ("diagnostics_" + id + ".csv"), detail::diagnostics_csv(results[i]));
      MetricsRow row;
      row.run_id = id;
      row.seed = derive_seed(p.run.seed, i);
      row.nfe = results[i].denoiser_evals;
      row.wall_time = times[i];
      fill_metrics(row, results[i].x1, p, post_mean);
      metrics += detail::csv_line(row.cells());
      for (const auto& w : results[i].warnings) *opt.err << "solve: run " << id << ": warning: " << w << "\n";
    }
    if (p.ground_truth || post_mean) detail::write_text(dir / "metrics.csv", metrics);
    *opt.out << "solve: " << results.size() << " run(s) of " << c.name << " written to " << dir.string() << "\n";
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------------------
// compare-oracle

struct ProbeDeviation {
  double max_deviation = 0.0;
  double mean_deviation = 0.0;
  int worst_probe = -1;
  double worst_t = 0.0;
};

/// ||corrected vf - exact conditional vf||_inf over random (x_t, t); x_t is drawn from the
/// path marginal of the prior.
inline ProbeDeviation probe_oracle_gap(const Problem& p, const OracleSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> time(spec.t_min, spec.t_max);
  GuidedField field(p.run);
  ProbeDeviation out;
  for (int i = 0; i < spec.probes; ++i) {
    const double t = time(rng);
    const Vector x1 = p.prior->sample(rng);
    const Vector xt = sample_xt(p.run.path, x1, t, rng);
    const Vector v = field(xt, t).v;
    const Vector exact = exact_conditional_vf(*p.prior, *p.run.op, p.run.guidance.sigma_y, p.run.y, p.run.path, t, xt);
    const double dev = (v - exact).cwiseAbs().maxCoeff();
    out.mean_deviation += dev / spec.probes;
    if (dev > out.max_deviation || out.worst_probe < 0) {
      out.max_deviation = dev;
      out.worst_probe = i;
      out.worst_t = t;
    }
  }
  return out;
}

struct MomentCheck {
  double mean_error = 0.0;       // max_i |sample mean_i - exact mean_i|
  double mean_bound = 0.0;       // 3 SE + allowance (for the worst coordinate)
  double cov_error = 0.0;        // operator norm of sample cov - exact cov
  double cov_bound = 0.0;
  bool pass = false;
};

inline MomentCheck check_moments(const std::vector<Vector>& samples, const Vector& mean, const Matrix& cov,
                                 double allowance, double cov_tolerance) {
  const Index d = mean.size();
  const double n = static_cast<double>(samples.size());
  Vector m = Vector::Zero(d);
  for (const Vector& s : samples) m += s;
  m /= n;
  Matrix c = Matrix::Zero(d, d);
  for (const Vector& s : samples) c += (s - m) * (s - m).transpose();
  c /= (n - 1.0);
  MomentCheck out;
  out.pass = true;
  for (Index i = 0; i < d; ++i) {
    const double err = std::abs(m(i) - mean(i));
    const double bound = 3.0 * std::sqrt(std::max(c(i, i), 0.0) / n) + allowance;
    if (err - bound > out.mean_error - out.mean_bound || i == 0) {
      out.mean_error = err;
      out.mean_bound = bound;
    }
    out.pass = out.pass && err <= bound;
  }
  out.cov_error = Eigen::SelfAdjointEigenSolver<Matrix>(c - cov, Eigen::EigenvaluesOnly).eigenvalues().cwiseAbs().maxCoeff();
  out.cov_bound = cov_tolerance;
  out.pass = out.pass && out.cov_error <= out.cov_bound;
  return out;
}

/// Writes oracle_report.txt. For N(0, I) priors the probe maximum is checked against the
/// tolerance (and the moment test runs when configured); for mixtures the gap is reported only.
inline int cmd_compare_oracle(const std::filesystem::path& config_file, const CommandOptions& opt = {}) {
  return run_command("compare-oracle", *opt.err, [&] {
    const RunConfig c = detail::load_with_overrides(config_file, opt);
    const Problem p = make_problem(c);
    if (p.prior->dim() > detail::kOracleMaxDim)
      throw ConfigError(detail::cat("compare-oracle needs prior dimension <= ", detail::kOracleMaxDim, ", got ",
                                    p.prior->dim()));
    const bool gaussian = p.prior->is_standard_normal();
    const ProbeDeviation dev = probe_oracle_gap(p, c.oracle, derive_seed(c.solver.seed, 0x6f7261636c65ULL));

    std::ostringstream report;
    report << "compare-oracle report: " << c.name << "\n"
           << "prior: " << (gaussian ? "standard normal" : "gaussian mixture") << ", dim " << p.prior->dim()
           << ", components " << p.prior->size() << "\n"
           << "operator: " << c.op.kind << " " << p.run.op->shape_string() << ", sigma_y "
           << detail::num(c.guidance.sigma_y) << "\n"
           << "guidance: rt2 " << to_string(c.guidance.rt2_rule) << ", gamma " << to_string(c.guidance.gamma_rule)
           << ", null_range " << (c.guidance.null_range ? "true" : "false") << "\n"
           << "probes: " << c.oracle.probes << " with t in [" << detail::num(c.oracle.t_min) << ", "
           << detail::num(c.oracle.t_max) << "]\n"
           << "max_deviation: " << detail::num(dev.max_deviation) << "\n"
           << "mean_deviation: " << detail::num(dev.mean_deviation) << "\n"
           << "worst_probe: " << dev.worst_probe << " at t = " << detail::num(dev.worst_t) << "\n";

    bool pass = true;
    if (gaussian) {
      const bool probe_pass = dev.max_deviation <= c.oracle.tolerance;
      pass = probe_pass;
      report << "tolerance: " << detail::num(c.oracle.tolerance) << "\n"
             << "probe_check: " << (probe_pass ? "PASS" : "FAIL") << "\n";
      if (c.oracle.moment_repeats > 0) {
        const PosteriorGMM post = exact_posterior(*p.prior, *p.run.op, c.guidance.sigma_y, p.run.y);
        const auto results = solve_batch(p.run, static_cast<std::size_t>(c.oracle.moment_repeats), opt.threads);
        std::vector<Vector> samples;
        samples.reserve(results.size());
        for (const auto& r : results) samples.push_back(r.x1);
        const MomentCheck m = check_moments(samples, post.mean(), post.covariance(), c.oracle.moment_allowance,
                                            c.oracle.moment_cov_tolerance);
        report << "moment_runs: " << c.oracle.moment_repeats << "\n"
               << "moment_mean_error: " << detail::num(m.mean_error) << " (bound " << detail::num(m.mean_bound) << ")\n"
               << "moment_cov_error: " << detail::num(m.cov_error) << " (bound " << detail::num(m.cov_bound) << ")\n"
               << "moment_check: " << (m.pass ? "PASS" : "FAIL") << "\n";
        pass = pass && m.pass;
      }
      report << "verdict: " << (pass ? "PASS" : "FAIL") << "\n";
    } else {
      report << "verdict: INFO (the correction is approximate for mixtures; the deviation measures the gap)\n";
    }

    const auto dir = detail::output_dir(c, opt);
    detail::write_text(dir / "oracle_report.txt", report.str());
    *opt.out << report.str();
    if (!pass) {
      *opt.err << "compare-oracle: FAIL: worst probe " << dev.worst_probe << " at t = " << detail::num(dev.worst_t)
               << " deviates by " << detail::num(dev.max_deviation) << " (tolerance "
               << detail::num(c.oracle.tolerance) << ")\n";
      return kExitToleranceFailed;
    }
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------------------
// ablate

inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes = {"t0",       "n_steps", "gamma_rule", "init_mode",
                                                "rt2_rule", "sigma_y", "null_range"};
  return axes;
}

struct SweepAxis {
  std::string name;
  std::vector<std::string> values;
};

using SweepSpec = std::vector<SweepAxis>;

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(const std::string& s, const std::string& axis) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ConfigError(detail::cat("sweep axis ", axis, ": '", s, "' is not a number"));
  return v;
}

inline int parse_int(const std::string& s, const std::string& axis) {
  const double v = parse_double(s, axis);
  if (v != std::floor(v) || std::abs(v) > 1e9)
    throw ConfigError(detail::cat("sweep axis ", axis, ": '", s, "' is not an integer"));
  return static_cast<int>(v);
}

inline bool parse_bool(const std::string& s, const std::string& axis) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(detail::cat("sweep axis ", axis, ": '", s, "' is not a boolean"));
}

/// Applies one axis value; validates the value without judging feasibility.
inline void apply_axis(RunConfig& c, const std::string& axis, const std::string& value) {
  if (axis == "t0") c.solver.t0 = parse_double(value, axis);
  else if (axis == "n_steps") c.solver.n_steps = parse_int(value, axis);
  else if (axis == "gamma_rule") c.guidance.gamma_rule = parse_gamma_rule(value);
  else if (axis == "init_mode") c.solver.init_mode = parse_init_mode(value);
  else if (axis == "rt2_rule") c.guidance.rt2_rule = parse_rt2_rule(value);
  else if (axis == "sigma_y") c.guidance.sigma_y = parse_double(value, axis);
  else if (axis == "null_range") c.guidance.null_range = parse_bool(value, axis);
  else throw ConfigError(detail::cat("unknown sweep axis '", axis, "'"));
}

}  // namespace detail

/// Either a JSON object {"t0": [0.1, 0.2], "gamma_rule": ["unadaptive"]} (inline or in a
/// file) or the compact form "t0=0.1,0.2;gamma_rule=unadaptive". Axes keep their order;
/// the first axis varies slowest.
inline SweepSpec parse_sweep(const std::string& text_or_file) {
  std::string text = text_or_file;
  std::error_code ec;
  if (std::filesystem::is_regular_file(text_or_file, ec)) {
    std::ifstream in(text_or_file);
    std::ostringstream os;
    os << in.rdbuf();
    text = os.str();
  }
  SweepSpec spec;
  const std::string trimmed = detail::trim(text);
  if (!trimmed.empty() && trimmed.front() == '{') {
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(trimmed);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(detail::cat("sweep spec is not valid JSON (at byte ", e.byte, ")"));
    }
    for (const auto& [key, vals] : j.items()) {
      SweepAxis axis{key, {}};
      if (!vals.is_array()) throw ConfigError(detail::cat("sweep axis ", key, " must list its values"));
      for (const auto& v : vals) {
        if (v.is_string()) axis.values.push_back(v.get<std::string>());
        else if (v.is_boolean()) axis.values.push_back(v.get<bool>() ? "true" : "false");
        else if (v.is_number_integer()) axis.values.push_back(std::to_string(v.get<long long>()));
        else if (v.is_number()) axis.values.push_back(detail::num(v.get<double>()));
        else throw ConfigError(detail::cat("sweep axis ", key, " has a non-scalar value"));
      }
      spec.push_back(std::move(axis));
    }
  } else {
    for (const std::string& part : detail::split(trimmed, ';')) {
      if (part.empty()) continue;
      const auto eq = part.find('=');
      if (eq == std::string::npos) throw ConfigError(detail::cat("sweep term '", part, "' needs axis=values"));
      spec.push_back({detail::trim(part.substr(0, eq)), detail::split(part.substr(eq + 1), ',')});
    }
  }
  if (spec.empty()) throw ConfigError("sweep spec names no axes");
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& axes = sweep_axes();
    if (std::find(axes.begin(), axes.end(), spec[i].name) == axes.end())
      throw ConfigError(detail::cat("unknown sweep axis '", spec[i].name,
                                    "' (expected t0 | n_steps | gamma_rule | init_mode | rt2_rule | sigma_y | null_range)"));
    for (std::size_t j = 0; j < i; ++j)
      if (spec[j].name == spec[i].name) throw ConfigError(detail::cat("sweep axis '", spec[i].name, "' repeats"));
    if (spec[i].values.empty() || (spec[i].values.size() == 1 && spec[i].values[0].empty()))
      throw ConfigError(detail::cat("sweep axis '", spec[i].name, "' has no values"));
  }
  return spec;
}

/// All cells of the Cartesian product, as (axis, value) assignments.
inline std::vector<std::vector<std::pair<std::string, std::string>>> sweep_cells(const SweepSpec& spec) {
  std::vector<std::vector<std::pair<std::string, std::string>>> cells = {{}};
  for (const SweepAxis& axis : spec) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& cell : cells)
      for (const std::string& v : axis.values) {
        auto c = cell;
        c.emplace_back(axis.name, v);
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  return cells;
}

/// RMS over the grid steps of |corrected vf - exact conditional vf|_2 / sqrt(d), along the
/// trajectory the solver actually took.
inline double trajectory_oracle_gap(const Problem& p, const SolveRun& run, const SolveResult& r) {
  GuidedField field(run);
  double acc = 0.0;
  const std::size_t steps = r.trajectory.size() - 1;
  for (std::size_t k = 0; k < steps; ++k) {
    const auto& [t, x] = r.trajectory[k];
    const Vector v = field(x, t).v;
    const Vector exact = exact_conditional_vf(*p.prior, *run.op, run.guidance.sigma_y, run.y, run.path, t, x);
    acc += (v - exact).squaredNorm() / static_cast<double>(x.size());
  }
  return std::sqrt(acc / static_cast<double>(steps));
}

/// Writes ablation.csv (one row per cell and repeat) and summary.csv (one row per cell).
inline int cmd_ablate(const std::filesystem::path& config_file, const std::string& sweep,
                      const CommandOptions& opt = {}) {
  return run_command("ablate", *opt.err, [&] {
    const RunConfig base = detail::load_with_overrides(config_file, opt);
    const SweepSpec spec = parse_sweep(sweep);
    const auto cells = sweep_cells(spec);
    const std::size_t repeats = static_cast<std::size_t>(base.repeats);

    struct Cell {
      RunConfig config;
      std::optional<Problem> problem;
      std::optional<Vector> post_mean;
      std::string skip_reason;
    };
    make_problem(base);  // input errors that do not depend on the swept values abort the sweep
    std::vector<Cell> prepared(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      Cell& cell = prepared[i];
      cell.config = base;
      for (const auto& [axis, value] : cells[i]) detail::apply_axis(cell.config, axis, value);
      try {
        cell.config.guidance.validate();
        Problem p = make_problem(cell.config);
        p.run.record_trajectory = p.prior->dim() <= detail::kOracleMaxDim;
        validate_grid(p.run);
        cell.post_mean = oracle_posterior_mean(p);
        cell.problem = std::move(p);
      } catch (const ConfigError& e) {
        cell.skip_reason = e.what();
      } catch (const RangeUnattainable& e) {
        cell.skip_reason = e.what();
      }
    }
    struct Row {
      std::string status = "ok";
      std::string message;
      MetricsRow metrics;
      double oracle_gap = detail::kNaN;
    };
    std::vector<Row> rows(cells.size() * repeats);
    parallel_for(rows.size(), worker_count(opt.threads), [&](std::size_t idx) {
      const std::size_t ci = idx / repeats, rep = idx % repeats;
      const Cell& cell = prepared[ci];
      Row& row = rows[idx];
      row.metrics.seed = derive_seed(cell.config.solver.seed, rep);
      if (!cell.problem) {
        row.status = "skipped";
        row.message = cell.skip_reason;
        return;
      }
      SolveRun run = cell.problem->run;
      run.seed = row.metrics.seed;
      try {
        const auto start = std::chrono::steady_clock::now();
        const SolveResult r = solve(run);
        if (opt.timing)
          row.metrics.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        row.metrics.nfe = r.denoiser_evals;
        fill_metrics(row.metrics, r.x1, *cell.problem, cell.post_mean);
        if (!r.trajectory.empty()) row.oracle_gap = trajectory_oracle_gap(*cell.problem, run, r);
      } catch (const DivergenceError& e) {
        row.status = "diverged";
        row.message = e.what();
      }
    });

    std::string csv = detail::csv_line(ablation_columns());
    std::string summary = detail::csv_line(summary_columns());
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
      const RunConfig& cc = prepared[ci].config;
      const std::vector<std::string> axis_cells = {
          detail::num(cc.solver.t0),          std::to_string(cc.solver.n_steps),
          std::string(to_string(cc.guidance.gamma_rule)), std::string(to_string(cc.solver.init_mode)),
          std::string(to_string(cc.guidance.rt2_rule)),   detail::num(cc.guidance.sigma_y),
          cc.guidance.null_range ? "true" : "false"};
      int ok = 0, skipped = 0, diverged = 0;
      double s_psnr = 0, s_ssim = 0, s_mse = 0, s_pme = 0, s_gap = 0;
      for (std::size_t rep = 0; rep < repeats; ++rep) {
        const Row& row = rows[ci * repeats + rep];
        std::vector<std::string> line = {std::to_string(kCsvSchemaVersion), std::to_string(ci), std::to_string(rep),
                                         std::to_string(row.metrics.seed)};
        line.insert(line.end(), axis_cells.begin(), axis_cells.end());
        line.insert(line.end(), {row.status, detail::num(row.metrics.psnr), detail::num(row.metrics.ssim),
                                 detail::num(row.metrics.mse), detail::num(row.metrics.posterior_mean_error),
                                 detail::num(row.oracle_gap), std::to_string(row.metrics.nfe),
                                 detail::num(row.metrics.wall_time), row.message});
        csv += detail::csv_line(line);
        if (row.status == "ok") {
          ++ok;
          s_psnr += row.metrics.psnr;
          s_ssim += row.metrics.ssim;
          s_mse += row.metrics.mse;
          s_pme += row.metrics.posterior_mean_error;
          s_gap += row.oracle_gap;
        } else if (row.status == "skipped") {
          ++skipped;
        } else {
          ++diverged;
        }
      }
      const auto mean = [&](double s) { return ok ? detail::num(s / ok) : std::string(); };
      std::vector<std::string> line = {std::to_string(kCsvSchemaVersion), std::to_string(ci)};
      line.insert(line.end(), axis_cells.begin(), axis_cells.end());
      line.insert(line.end(), {std::to_string(ok), std::to_string(skipped), std::to_string(diverged), mean(s_psnr),
                               mean(s_ssim), mean(s_mse), mean(s_pme), mean(s_gap)});
      summary += detail::csv_line(line);
    }

    const auto dir = detail::output_dir(base, opt);
    detail::write_text(dir / "ablation.csv", csv);
    detail::write_text(dir / "summary.csv", summary);
    *opt.out << "ablate: " << cells.size() << " cell(s) x " << repeats << " repeat(s) written to "
             << (dir / "ablation.csv").string() << "\n";
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------------------
// metrics

/// Reads a tensor (.bin) or PGM (.pgm) image.
inline Matrix read_image(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw IoError(detail::cat("file '", file.string(), "' does not exist"));
  if (file.extension() == ".pgm") return read_pgm(file);
  return read_tensor(file);
}

/// Prints mse, psnr and ssim of two images; `channels` splits the rows into stacked planes.
inline int cmd_metrics(const std::filesystem::path& a_file, const std::filesystem::path& b_file, Index channels = 1,
                       Index window = 8, const CommandOptions& opt = {}) {
  return run_command("metrics", *opt.err, [&] {
    const Matrix a = read_image(a_file), b = read_image(b_file);
    if (a.rows() != b.rows() || a.cols() != b.cols())
      throw ShapeError(detail::cat("images differ in shape: ", detail::shape_str(a.rows(), a.cols()), " vs ",
                                   detail::shape_str(b.rows(), b.cols())));
    if (channels < 1 || a.rows() % channels != 0)
      throw ConfigError(detail::cat("channels ", channels, " does not divide ", a.rows(), " rows"));
    const ImageShape shape{channels, a.rows() / channels, a.cols()};
    const Vector va = as_vector(a), vb = as_vector(b);
    SsimOptions so;
    so.window = window;
    *opt.out << detail::csv_line({"mse", "psnr", "ssim"})
             << detail::csv_line({detail::num(mse(va, vb)), detail::num(psnr(va, vb)), detail::num(ssim(va, vb, shape, so))});
    return kExitOk;
  });
}

}  // namespace flowsolve
