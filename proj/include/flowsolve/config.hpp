// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// JSON run configuration. Every block is optional and falls back to the documented
// defaults; unknown keys are rejected everywhere. Serialization writes every field, so
// parse(serialize(c)) == c and serialize is a fixed point after one parse.
//
// {
//   "name": "run", "output_dir": "out", "repeats": 1,
//   "path":     {"kind": "cond_ot" | "vp" | "ve", "params": {...schedule parameters}},
//   "model":    {"prior": {"file": "gmm.json"} | {"standard_normal": d} | {"inline": {...}},
//                "native_path": {...}, "form": "denoiser" | "vector_field"},
//   "operator": {"kind": "identity" | "mask" | "center_box" | "random_boxes" | "downsample"
//                        | "blur" | "dense", "image_shape": [c, h, w], ...},
//   "guidance": {"rt2": ..., "gamma": ..., "sigma_y": s, "null_range": b},
//   "solver":   {"t0", "n_steps", "init_mode", "lift", "seed", "end_epsilon", "record_trajectory"},
//   "observation": {"y": "y.bin" | "", "ground_truth": "x.bin" | "", "seed": n},
//   "oracle":   {"probes", "t_min", "t_max", "tolerance", "moment_repeats", "moment_allowance",
//                "moment_cov_tolerance"}
// }
//
// Relative file names resolve against the directory holding the config file.

#include "flowsolve/gmm.hpp"
#include "flowsolve/io.hpp"
#include "flowsolve/solver.hpp"

#include <filesystem>
#include <initializer_list>
#include <optional>

namespace flowsolve {

struct PathSpec {
  std::string kind = "cond_ot";
  double beta_min = 0.1;
  double beta_max = 20.0;
  double eps = 0.0;
  double sigma_min = 0.01;
  double sigma_max = 50.0;
  bool operator==(const PathSpec&) const = default;
};

struct PriorSpec {
  std::string file;         // JSON mixture file, or
  Index standard_normal = 0;  // N(0, I) of this dimension, or
  nlohmann::json inline_gmm;  // an inline mixture
  bool operator==(const PriorSpec&) const = default;
};

struct ModelSpec {
  PriorSpec prior;
  PathSpec native_path;
  std::string form = "denoiser";
  bool operator==(const ModelSpec&) const = default;
};

struct OperatorSpec {
  std::string kind = "identity";
  std::vector<Index> image_shape;  // [c, h, w]; empty means [1, 1, d]
  std::vector<Index> keep;         // mask
  Index box = 0;                   // center_box
  int count = 0;                   // random_boxes
  Index max_side = 1;
  std::uint64_t seed = 0;
  Index factor = 2;                // downsample
  int size = 3;                    // blur
  double std_dev = 1.0;
  std::string file;                // dense
  bool operator==(const OperatorSpec&) const = default;
};

struct ObservationSpec {
  std::string y_file;
  std::string ground_truth_file;
  std::uint64_t seed = 0;  // draws x_true ~ prior and the measurement noise when y_file is empty
  bool operator==(const ObservationSpec&) const = default;
};

struct SolverSpec {
  double t0 = 0.2;
  int n_steps = 100;
  InitMode init_mode = InitMode::YInit;
  Lift lift = Lift::Auto;
  std::uint64_t seed = 0;
  double end_epsilon = 1e-3;
  bool record_trajectory = false;
  bool operator==(const SolverSpec&) const = default;
};

struct OracleSpec {
  int probes = 100;
  double t_min = 0.05;
  double t_max = 0.95;
  double tolerance = 1e-6;
  int moment_repeats = 0;         // end-to-end moment test for N(0, I) priors; 0 skips it
  double moment_allowance = 1e-2;  // discretization allowance added to 3 standard errors
  double moment_cov_tolerance = 2e-2;  // operator-norm bound on the sample covariance error
  bool operator==(const OracleSpec&) const = default;
};

inline bool operator==(const GuidanceConfig& a, const GuidanceConfig& b) {
  return a.rt2_rule == b.rt2_rule && a.gamma_rule == b.gamma_rule && a.sigma_y == b.sigma_y &&
         a.null_range == b.null_range;
}

struct RunConfig {
  std::string name = "run";
  std::string output_dir = "out";
  int repeats = 1;
  PathSpec path;
  ModelSpec model;
  OperatorSpec op;
  GuidanceConfig guidance;
  SolverSpec solver;
  ObservationSpec observation;
  OracleSpec oracle;
  bool operator==(const RunConfig&) const = default;

  std::filesystem::path base_dir;  // not serialized

  std::filesystem::path resolve(const std::string& file) const {
    const std::filesystem::path p(file);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  }
};

inline std::string_view to_string(InitMode m) { return m == InitMode::YInit ? "y" : "pinv"; }

inline std::string_view to_string(Lift l) {
  switch (l) {
    case Lift::Auto: return "auto";
    case Lift::Identity: return "identity";
    case Lift::NearestNeighbor: return "nearest";
    case Lift::Pinv: return "pinv";
  }
  return "?";
}

inline InitMode parse_init_mode(std::string_view s) {
  if (s == "y") return InitMode::YInit;
  if (s == "pinv") return InitMode::PinvInit;
  throw ConfigError(detail::cat("unknown init_mode '", s, "' (expected y | pinv)"));
}

inline Lift parse_lift(std::string_view s) {
  if (s == "auto") return Lift::Auto;
  if (s == "identity") return Lift::Identity;
  if (s == "nearest") return Lift::NearestNeighbor;
  if (s == "pinv") return Lift::Pinv;
  throw ConfigError(detail::cat("unknown lift '", s, "' (expected auto | identity | nearest | pinv)"));
}

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) throw ConfigError(detail::cat(where, " must be a JSON object"));
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(detail::cat("unknown key '", key, "' in ", where));
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, std::string_view where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(detail::cat("bad value for '", key, "' in ", where, ": ", j.at(key).dump()));
  }
}

inline PathSpec path_from_json(const json& j, std::string_view where) {
  check_keys(j, {"kind", "params"}, where);
  PathSpec p;
  read(j, "kind", p.kind, where);
  const json params = j.contains("params") ? j.at("params") : json::object();
  const std::string pwhere = detail::cat(where, ".params");
  if (p.kind == "cond_ot") {
    check_keys(params, {}, pwhere);
  } else if (p.kind == "vp") {
    check_keys(params, {"beta_min", "beta_max", "eps"}, pwhere);
    read(params, "beta_min", p.beta_min, pwhere);
    read(params, "beta_max", p.beta_max, pwhere);
    read(params, "eps", p.eps, pwhere);
  } else if (p.kind == "ve") {
    check_keys(params, {"sigma_min", "sigma_max"}, pwhere);
    read(params, "sigma_min", p.sigma_min, pwhere);
    read(params, "sigma_max", p.sigma_max, pwhere);
  } else {
    throw ConfigError(detail::cat("unknown path kind '", p.kind, "' in ", where, " (expected cond_ot | vp | ve)"));
  }
  return p;
}

inline json path_to_json(const PathSpec& p) {
  if (p.kind == "vp")
    return {{"kind", p.kind}, {"params", {{"beta_min", p.beta_min}, {"beta_max", p.beta_max}, {"eps", p.eps}}}};
  if (p.kind == "ve") return {{"kind", p.kind}, {"params", {{"sigma_min", p.sigma_min}, {"sigma_max", p.sigma_max}}}};
  return {{"kind", p.kind}, {"params", json::object()}};
}

inline PriorSpec prior_from_json(const json& j) {
  check_keys(j, {"file", "standard_normal", "inline"}, "model.prior");
  if (j.size() != 1) throw ConfigError("model.prior needs exactly one of 'file', 'standard_normal', 'inline'");
  PriorSpec p;
  read(j, "file", p.file, "model.prior");
  read(j, "standard_normal", p.standard_normal, "model.prior");
  if (j.contains("inline")) p.inline_gmm = j.at("inline");
  if (j.contains("standard_normal") && p.standard_normal < 1)
    throw ConfigError("model.prior.standard_normal must be >= 1");
  return p;
}

inline json prior_to_json(const PriorSpec& p) {
  if (!p.file.empty()) return {{"file", p.file}};
  if (p.standard_normal > 0) return {{"standard_normal", p.standard_normal}};
  return {{"inline", p.inline_gmm}};
}

inline OperatorSpec operator_from_json(const json& j) {
  const char* where = "operator";
  OperatorSpec o;
  read(j, "kind", o.kind, where);
  read(j, "image_shape", o.image_shape, where);
  if (!o.image_shape.empty() && o.image_shape.size() != 3)
    throw ConfigError("operator.image_shape must be [channels, height, width]");
  for (Index v : o.image_shape)
    if (v < 1) throw ConfigError("operator.image_shape entries must be >= 1");
  if (o.kind == "identity") {
    check_keys(j, {"kind", "image_shape"}, where);
  } else if (o.kind == "mask") {
    check_keys(j, {"kind", "image_shape", "keep"}, where);
    read(j, "keep", o.keep, where);
  } else if (o.kind == "center_box") {
    check_keys(j, {"kind", "image_shape", "box"}, where);
    read(j, "box", o.box, where);
  } else if (o.kind == "random_boxes") {
    check_keys(j, {"kind", "image_shape", "count", "max_side", "seed"}, where);
    read(j, "count", o.count, where);
    read(j, "max_side", o.max_side, where);
    read(j, "seed", o.seed, where);
  } else if (o.kind == "downsample") {
    check_keys(j, {"kind", "image_shape", "factor"}, where);
    read(j, "factor", o.factor, where);
  } else if (o.kind == "blur") {
    check_keys(j, {"kind", "image_shape", "size", "std"}, where);
    read(j, "size", o.size, where);
    read(j, "std", o.std_dev, where);
  } else if (o.kind == "dense") {
    check_keys(j, {"kind", "image_shape", "path"}, where);
    read(j, "path", o.file, where);
    if (o.file.empty()) throw ConfigError("operator.path is required for dense operators");
  } else {
    throw ConfigError(detail::cat("unknown operator kind '", o.kind,
                                  "' (expected identity | mask | center_box | random_boxes | downsample | blur | dense)"));
  }
  return o;
}

inline json operator_to_json(const OperatorSpec& o) {
  json j = {{"kind", o.kind}};
  if (!o.image_shape.empty()) j["image_shape"] = o.image_shape;
  if (o.kind == "mask") j["keep"] = o.keep;
  if (o.kind == "center_box") j["box"] = o.box;
  if (o.kind == "random_boxes") {
    j["count"] = o.count;
    j["max_side"] = o.max_side;
    j["seed"] = o.seed;
  }
  if (o.kind == "downsample") j["factor"] = o.factor;
  if (o.kind == "blur") {
    j["size"] = o.size;
    j["std"] = o.std_dev;
  }
  if (o.kind == "dense") j["path"] = o.file;
  return j;
}

template <typename Enum, typename Parse>
void read_enum(const json& j, const char* key, Enum& out, Parse parse, std::string_view where) {
  std::string s;
  read(j, key, s, where);
  if (j.contains(key)) out = parse(s);
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  detail::check_keys(j, {"name", "output_dir", "repeats", "path", "model", "operator", "guidance", "solver",
                         "observation", "oracle"},
                     "run config");
  RunConfig c;
  read(j, "name", c.name, "run config");
  read(j, "output_dir", c.output_dir, "run config");
  read(j, "repeats", c.repeats, "run config");
  if (c.repeats < 1) throw ConfigError(detail::cat("repeats must be >= 1, got ", c.repeats));
  if (j.contains("path")) c.path = detail::path_from_json(j.at("path"), "path");
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::check_keys(m, {"prior", "native_path", "form"}, "model");
    if (!m.contains("prior")) throw ConfigError("model.prior is required");
    c.model.prior = detail::prior_from_json(m.at("prior"));
    c.model.native_path = m.contains("native_path") ? detail::path_from_json(m.at("native_path"), "model.native_path")
                                                    : c.path;
    read(m, "form", c.model.form, "model");
    if (c.model.form != "denoiser" && c.model.form != "vector_field")
      throw ConfigError(detail::cat("unknown model.form '", c.model.form, "' (expected denoiser | vector_field)"));
  } else {
    throw ConfigError("run config needs a 'model' block");
  }
  if (j.contains("operator")) c.op = detail::operator_from_json(j.at("operator"));
  if (j.contains("guidance")) {
    const auto& g = j.at("guidance");
    detail::check_keys(g, {"rt2", "gamma", "sigma_y", "null_range"}, "guidance");
    detail::read_enum(g, "rt2", c.guidance.rt2_rule, parse_rt2_rule, "guidance");
    detail::read_enum(g, "gamma", c.guidance.gamma_rule, parse_gamma_rule, "guidance");
    read(g, "sigma_y", c.guidance.sigma_y, "guidance");
    read(g, "null_range", c.guidance.null_range, "guidance");
    c.guidance.validate();
  }
  if (j.contains("solver")) {
    const auto& s = j.at("solver");
    detail::check_keys(s, {"t0", "n_steps", "init_mode", "lift", "seed", "end_epsilon", "record_trajectory"},
                       "solver");
    read(s, "t0", c.solver.t0, "solver");
    read(s, "n_steps", c.solver.n_steps, "solver");
    detail::read_enum(s, "init_mode", c.solver.init_mode, parse_init_mode, "solver");
    detail::read_enum(s, "lift", c.solver.lift, parse_lift, "solver");
    read(s, "seed", c.solver.seed, "solver");
    read(s, "end_epsilon", c.solver.end_epsilon, "solver");
    read(s, "record_trajectory", c.solver.record_trajectory, "solver");
  }
  if (j.contains("observation")) {
    const auto& o = j.at("observation");
    detail::check_keys(o, {"y", "ground_truth", "seed"}, "observation");
    read(o, "y", c.observation.y_file, "observation");
    read(o, "ground_truth", c.observation.ground_truth_file, "observation");
    read(o, "seed", c.observation.seed, "observation");
  }
  if (j.contains("oracle")) {
    const auto& o = j.at("oracle");
    detail::check_keys(o, {"probes", "t_min", "t_max", "tolerance", "moment_repeats", "moment_allowance",
                           "moment_cov_tolerance"},
                       "oracle");
    read(o, "probes", c.oracle.probes, "oracle");
    read(o, "t_min", c.oracle.t_min, "oracle");
    read(o, "t_max", c.oracle.t_max, "oracle");
    read(o, "tolerance", c.oracle.tolerance, "oracle");
    read(o, "moment_repeats", c.oracle.moment_repeats, "oracle");
    read(o, "moment_allowance", c.oracle.moment_allowance, "oracle");
    read(o, "moment_cov_tolerance", c.oracle.moment_cov_tolerance, "oracle");
    if (c.oracle.probes < 1 || !(c.oracle.t_min > 0.0) || !(c.oracle.t_max < 1.0) ||
        !(c.oracle.t_min <= c.oracle.t_max))
      throw ConfigError("oracle block needs probes >= 1 and 0 < t_min <= t_max < 1");
  }
  return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["output_dir"] = c.output_dir;
  j["repeats"] = c.repeats;
  j["path"] = detail::path_to_json(c.path);
  j["model"] = {{"prior", detail::prior_to_json(c.model.prior)},
                {"native_path", detail::path_to_json(c.model.native_path)},
                {"form", c.model.form}};
  j["operator"] = detail::operator_to_json(c.op);
  j["guidance"] = {{"rt2", to_string(c.guidance.rt2_rule)},
                   {"gamma", to_string(c.guidance.gamma_rule)},
                   {"sigma_y", c.guidance.sigma_y},
                   {"null_range", c.guidance.null_range}};
  j["solver"] = {{"t0", c.solver.t0},
                 {"n_steps", c.solver.n_steps},
                 {"init_mode", to_string(c.solver.init_mode)},
                 {"lift", to_string(c.solver.lift)},
                 {"seed", c.solver.seed},
                 {"end_epsilon", c.solver.end_epsilon},
                 {"record_trajectory", c.solver.record_trajectory}};
  j["observation"] = {{"y", c.observation.y_file},
                      {"ground_truth", c.observation.ground_truth_file},
                      {"seed", c.observation.seed}};
  j["oracle"] = {{"probes", c.oracle.probes},
                 {"t_min", c.oracle.t_min},
                 {"t_max", c.oracle.t_max},
                 {"tolerance", c.oracle.tolerance},
                 {"moment_repeats", c.oracle.moment_repeats},
                 {"moment_allowance", c.oracle.moment_allowance},
                 {"moment_cov_tolerance", c.oracle.moment_cov_tolerance}};
  return j;
}

inline RunConfig parse_config(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(detail::cat("config is not valid JSON (at byte ", e.byte, "): ", e.what()));
  }
  return config_from_json(j);
}

inline std::string serialize_config(const RunConfig& c) { return config_to_json(c).dump(2) + "\n"; }

inline RunConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError(detail::cat("cannot open config file '", file.string(), "'"));
  std::ostringstream text;
  text << in.rdbuf();
  RunConfig c = parse_config(text.str());
  c.base_dir = file.parent_path();
  return c;
}

// Building runtime objects from a config.

inline ProbPath make_path(const PathSpec& p) {
  if (p.kind == "vp") return ProbPath::vp(p.beta_min, p.beta_max, p.eps);
  if (p.kind == "ve") return ProbPath::ve(p.sigma_min, p.sigma_max);
  if (p.kind == "cond_ot") return ProbPath::cond_ot();
  throw ConfigError(detail::cat("unknown path kind '", p.kind, "'"));
}

inline std::shared_ptr<const GaussianMixture> load_prior(const RunConfig& c) {
  const PriorSpec& p = c.model.prior;
  if (!p.file.empty()) {
    const auto file = c.resolve(p.file);
    if (!std::filesystem::exists(file)) throw ConfigError(detail::cat("gmm file '", file.string(), "' does not exist"));
    return std::make_shared<const GaussianMixture>(GaussianMixture::load(file));
  }
  if (p.standard_normal > 0) return std::make_shared<const GaussianMixture>(GaussianMixture::standard_normal(p.standard_normal));
  return std::make_shared<const GaussianMixture>(GaussianMixture::from_json(p.inline_gmm));
}

inline ImageShape image_shape(const OperatorSpec& o, Index dim) {
  if (o.image_shape.empty()) return {1, 1, dim};
  const ImageShape s{o.image_shape[0], o.image_shape[1], o.image_shape[2]};
  if (s.size() != dim)
    throw ConfigError(detail::cat("operator.image_shape [", s.channels, ", ", s.height, ", ", s.width, "] holds ",
                                  s.size(), " values but the prior has dimension ", dim));
  return s;
}

inline LinearOperator make_operator(const RunConfig& c, Index dim) {
  const OperatorSpec& o = c.op;
  const ImageShape shape = image_shape(o, dim);
  if (o.kind == "identity") return LinearOperator::identity(dim);
  if (o.kind == "mask") return LinearOperator::mask(dim, o.keep);
  if (o.kind == "center_box") return LinearOperator::center_box_mask(shape, o.box);
  if (o.kind == "random_boxes") return LinearOperator::random_box_mask(shape, o.count, o.max_side, o.seed);
  if (o.kind == "downsample") return LinearOperator::downsample(shape, o.factor);
  if (o.kind == "blur") return LinearOperator::gaussian_blur(shape, o.size, o.std_dev);
  if (o.kind == "dense") {
    const auto file = c.resolve(o.file);
    if (!std::filesystem::exists(file))
      throw ConfigError(detail::cat("dense operator file '", file.string(), "' does not exist"));
    Matrix a = read_tensor(file);
    if (a.cols() != dim)
      throw ConfigError(detail::cat("dense operator ", detail::shape_str(a.rows(), a.cols()),
                                    " does not act on prior dimension ", dim));
    return LinearOperator::dense(std::move(a));
  }
  throw ConfigError(detail::cat("unknown operator kind '", o.kind, "'"));
}

/// Everything a command needs: the prior, the operator, the observation and a ready SolveRun.
struct Problem {
  std::shared_ptr<const GaussianMixture> prior;
  ImageShape shape;
  SolveRun run;
  std::optional<Vector> ground_truth;
};

inline Vector as_vector(const Matrix& m) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  return Eigen::Map<const Vector>(rm.data(), rm.size());
}

inline Problem make_problem(const RunConfig& c) {
  Problem p;
  p.prior = load_prior(c);
  const Index d = p.prior->dim();
  p.shape = image_shape(c.op, d);
  auto op = std::make_shared<const LinearOperator>(make_operator(c, d));

  SolveRun& run = p.run;
  run.path = make_path(c.path);
  const ProbPath native = make_path(c.model.native_path);
  const Denoiser den = gmm_denoiser(p.prior, native);
  if (c.model.form == "vector_field")
    run.model = denoiser_to_vf(den, native);
  else
    run.model = den;
  run.op = op;
  run.guidance = c.guidance;
  run.t0 = c.solver.t0;
  run.n_steps = c.solver.n_steps;
  run.init_mode = c.solver.init_mode;
  run.lift = c.solver.lift;
  run.seed = c.solver.seed;
  run.end_epsilon = c.solver.end_epsilon;
  run.record_trajectory = c.solver.record_trajectory;

  if (!c.observation.ground_truth_file.empty()) {
    const auto file = c.resolve(c.observation.ground_truth_file);
    if (!std::filesystem::exists(file)) throw ConfigError(detail::cat("ground truth file '", file.string(), "' does not exist"));
    p.ground_truth = as_vector(read_tensor(file));
    if (p.ground_truth->size() != d)
      throw ConfigError(detail::cat("ground truth has ", p.ground_truth->size(), " values, prior dimension is ", d));
  }
  if (!c.observation.y_file.empty()) {
    const auto file = c.resolve(c.observation.y_file);
    if (!std::filesystem::exists(file)) throw ConfigError(detail::cat("observation file '", file.string(), "' does not exist"));
    run.y = as_vector(read_tensor(file));
  } else {
    Rng rng(derive_seed(c.observation.seed, 0));
    if (!p.ground_truth) p.ground_truth = p.prior->sample(rng);
    run.y = op->apply(*p.ground_truth) + c.guidance.sigma_y * standard_normal(rng, op->out_dim());
  }
  if (run.y.size() != op->out_dim())
    throw ConfigError(detail::cat("observation has ", run.y.size(), " values, operator ", op->shape_string(),
                                  " produces ", op->out_dim()));
  return p;
}

}  // namespace flowsolve
