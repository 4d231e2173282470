#include "crbjm/config.hpp"

#include "crbjm/error.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <ostream>
#include <sstream>

namespace crbjm {

namespace {

class Reader {
 public:
  explicit Reader(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const YAML::Node& at, const std::string& message) const {
    const YAML::Mark mark = at.Mark();
    std::string where = source_;
    if (!mark.is_null()) where += ":" + std::to_string(mark.line + 1);
    throw Error(ErrorCode::ConfigError, where + ": " + message);
  }

  void require_map(const YAML::Node& n, const std::string& what) const {
    if (!n.IsMap()) fail(n, what + " must be a mapping");
  }

  void check_keys(const YAML::Node& n, std::initializer_list<const char*> allowed, const std::string& what) const {
    require_map(n, what);
    for (const auto& kv : n) {
      const auto key = kv.first.as<std::string>();
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
        fail(kv.first, "unknown key '" + key + "' in " + what);
      }
    }
  }

  template <typename T>
  T scalar(const YAML::Node& n, const std::string& what) const {
    if (!n.IsScalar()) fail(n, what + " must be a scalar");
    try {
      return n.as<T>();
    } catch (const YAML::Exception&) {
      fail(n, "cannot read " + what + " from '" + n.Scalar() + "'");
    }
  }

  double number(const YAML::Node& n, const std::string& what) const { return scalar<double>(n, what); }
  int integer(const YAML::Node& n, const std::string& what) const { return scalar<int>(n, what); }
  bool boolean(const YAML::Node& n, const std::string& what) const { return scalar<bool>(n, what); }
  std::string text(const YAML::Node& n, const std::string& what) const { return scalar<std::string>(n, what); }

  double positive(const YAML::Node& n, const std::string& what) const {
    const double x = number(n, what);
    if (!(x > 0.0)) fail(n, what + " must be positive");
    return x;
  }
  int positive_int(const YAML::Node& n, const std::string& what) const {
    const int x = integer(n, what);
    if (x < 1) fail(n, what + " must be >= 1");
    return x;
  }

  std::vector<double> numbers(const YAML::Node& n, const std::string& what) const {
    if (!n.IsSequence()) fail(n, what + " must be a list");
    std::vector<double> out;
    for (const auto& e : n) out.push_back(number(e, what));
    return out;
  }
  std::vector<std::string> strings(const YAML::Node& n, const std::string& what) const {
    if (!n.IsSequence()) fail(n, what + " must be a list");
    std::vector<std::string> out;
    for (const auto& e : n) out.push_back(text(e, what));
    return out;
  }
  Eigen::VectorXd vector(const YAML::Node& n, const std::string& what) const {
    const auto v = numbers(n, what);
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  Eigen::MatrixXd matrix(const YAML::Node& n, const std::string& what) const {
    if (!n.IsSequence()) fail(n, what + " must be a list of rows");
    std::vector<std::vector<double>> rows;
    for (const auto& r : n) {
      rows.push_back(numbers(r, what));
      if (rows.back().size() != rows.front().size()) fail(r, what + " rows differ in length");
    }
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                      rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    return m;
  }

  /// Runs a parser that throws crbjm::Error, re-raising with the node's line.
  template <typename F>
  auto with_line(const YAML::Node& n, F&& f) const {
    try {
      return f();
    } catch (const Error& e) {
      fail(n, e.what());
    }
  }

 private:
  std::string source_;
};

void read_data(const Reader& r, const YAML::Node& n, const std::filesystem::path& base, DataConfig& d) {
  r.check_keys(n,
               {"subjects", "longitudinal", "id_column", "time_column", "event_column", "covariates", "biomarkers",
                "event_types", "tau_max", "zero_time_shift"},
               "data");
  auto path = [&](const YAML::Node& p) {
    std::filesystem::path f = r.text(p, "path");
    return f.is_relative() && !base.empty() ? base / f : f;
  };
  if (n["subjects"]) d.subjects = path(n["subjects"]);
  if (n["longitudinal"]) d.longitudinal = path(n["longitudinal"]);
  if (n["id_column"]) d.schema.id_column = r.text(n["id_column"], "id_column");
  if (n["time_column"]) d.schema.time_column = r.text(n["time_column"], "time_column");
  if (n["event_column"]) d.schema.event_column = r.text(n["event_column"], "event_column");
  if (n["covariates"]) d.schema.covariate_columns = r.strings(n["covariates"], "covariates");
  if (n["biomarkers"]) d.schema.biomarkers = r.strings(n["biomarkers"], "biomarkers");
  if (n["event_types"]) d.schema.n_event_types = r.positive_int(n["event_types"], "event_types");
  if (n["tau_max"]) d.schema.tau_max = r.positive(n["tau_max"], "tau_max");
  if (n["zero_time_shift"]) d.schema.zero_time_shift = r.positive(n["zero_time_shift"], "zero_time_shift");
}

void read_model(const Reader& r, const YAML::Node& n, RunConfig& c) {
  r.check_keys(n,
               {"variant", "method", "time_model", "knot_quantiles", "trajectory_degree", "transform",
                "random_effects", "terms", "tau_max", "quadrature", "em", "lmm"},
               "model");
  ModelConfig& m = c.model;
  if (n["variant"]) m.variant = r.with_line(n["variant"], [&] { return parse_variant(r.text(n["variant"], "variant")); });
  if (n["method"]) c.method = r.with_line(n["method"], [&] { return parse_fit_method(r.text(n["method"], "method")); });
  if (n["time_model"]) {
    const auto t = r.text(n["time_model"], "time_model");
    if (t == "weibull") {
      m.survival.time_model = TimeModel::Weibull;
    } else if (t == "cox") {
      m.survival.time_model = TimeModel::Cox;
    } else {
      r.fail(n["time_model"], "time_model must be weibull or cox, got '" + t + "'");
    }
  }
  if (n["knot_quantiles"]) {
    m.survival.knot_quantiles = r.numbers(n["knot_quantiles"], "knot_quantiles");
    for (double q : m.survival.knot_quantiles) {
      if (!(q > 0.0 && q < 1.0)) r.fail(n["knot_quantiles"], "knot quantiles must lie in (0, 1)");
    }
  }
  if (n["trajectory_degree"]) m.trajectory_degree = r.positive_int(n["trajectory_degree"], "trajectory_degree");
  if (n["transform"]) {
    m.transform = r.with_line(n["transform"], [&] { return parse_transform(r.text(n["transform"], "transform")); });
  }
  if (n["random_effects"]) {
    m.random_effects = r.with_line(n["random_effects"], [&] {
      return parse_random_effects(r.text(n["random_effects"], "random_effects"));
    });
  }
  if (const auto t = n["terms"]) {
    r.check_keys(t, {"covariates", "event_type", "event_time", "time_by_type"}, "model.terms");
    if (t["covariates"]) m.terms.covariates = r.boolean(t["covariates"], "terms.covariates");
    if (t["event_type"]) m.terms.event_type = r.boolean(t["event_type"], "terms.event_type");
    if (t["event_time"]) m.terms.event_time = r.boolean(t["event_time"], "terms.event_time");
    if (t["time_by_type"]) m.terms.time_by_type = r.boolean(t["time_by_type"], "terms.time_by_type");
  }
  if (n["tau_max"]) m.tau_max = r.positive(n["tau_max"], "tau_max");
  if (const auto q = n["quadrature"]) {
    r.check_keys(q, {"width", "t_end_ex", "prediction_width"}, "model.quadrature");
    if (q["width"]) m.quadrature.width = r.positive(q["width"], "quadrature.width");
    if (q["t_end_ex"]) m.quadrature.t_end_ex = r.positive(q["t_end_ex"], "quadrature.t_end_ex");
    if (q["prediction_width"]) {
      m.quadrature.prediction_width = r.positive(q["prediction_width"], "quadrature.prediction_width");
    }
  }
  if (const auto e = n["em"]) {
    r.check_keys(e, {"tol", "max_iter", "reestimate_variance"}, "model.em");
    if (e["tol"]) m.em.tol = r.positive(e["tol"], "em.tol");
    if (e["max_iter"]) m.em.max_iter = r.positive_int(e["max_iter"], "em.max_iter");
    if (e["reestimate_variance"]) m.em.reestimate_variance = r.boolean(e["reestimate_variance"], "em.reestimate_variance");
  }
  if (const auto l = n["lmm"]) {
    r.check_keys(l, {"tol", "max_iter"}, "model.lmm");
    if (l["tol"]) m.lmm.tol = r.positive(l["tol"], "lmm.tol");
    if (l["max_iter"]) m.lmm.max_iter = r.positive_int(l["max_iter"], "lmm.max_iter");
  }
}

void read_evaluation(const Reader& r, const YAML::Node& n, CvOptions& cv) {
  r.check_keys(n, {"folds", "landmarks", "delta"}, "evaluation");
  if (n["folds"]) {
    cv.folds = r.integer(n["folds"], "folds");
    if (cv.folds < 2) r.fail(n["folds"], "folds must be >= 2");
  }
  if (n["landmarks"]) {
    cv.landmarks = r.numbers(n["landmarks"], "landmarks");
    if (cv.landmarks.empty()) r.fail(n["landmarks"], "landmarks must not be empty");
  }
  if (n["delta"]) cv.delta = r.positive(n["delta"], "delta");
}

void read_lmm_truth(const Reader& r, const YAML::Node& n, LmmParameters& l, const std::string& what) {
  r.check_keys(n, {"coefficients", "omega", "residual_variances"}, what);
  if (n["coefficients"]) l.coefficients = r.matrix(n["coefficients"], what + ".coefficients");
  if (n["omega"]) l.omega = r.matrix(n["omega"], what + ".omega");
  if (n["residual_variances"]) l.residual_variances = r.vector(n["residual_variances"], what + ".residual_variances");
}

void read_simulation(const Reader& r, const YAML::Node& n, RunConfig& c) {
  r.check_keys(n,
               {"n", "variant", "event_types", "covariates", "biomarkers", "history_scale", "visit_spacing",
                "visit_jitter", "censoring_rate", "admin_rate", "replicates", "truth"},
               "simulation");
  GeneratorConfig& g = c.simulation;
  if (n["n"]) g.n = r.positive_int(n["n"], "n");
  if (n["variant"]) g.variant = r.with_line(n["variant"], [&] { return parse_variant(r.text(n["variant"], "variant")); });
  if (n["event_types"]) g.n_event_types = r.positive_int(n["event_types"], "event_types");
  if (n["covariates"]) g.n_covariates = r.positive_int(n["covariates"], "covariates");
  if (n["biomarkers"]) g.n_biomarkers = r.positive_int(n["biomarkers"], "biomarkers");
  if (n["history_scale"]) c.history_scale = r.number(n["history_scale"], "history_scale");
  if (n["visit_spacing"]) g.visit_spacing = r.positive(n["visit_spacing"], "visit_spacing");
  if (n["visit_jitter"]) g.visit_jitter = r.number(n["visit_jitter"], "visit_jitter");
  if (n["censoring_rate"]) g.censoring_rate = r.number(n["censoring_rate"], "censoring_rate");
  if (n["admin_rate"]) g.admin_rate = r.number(n["admin_rate"], "admin_rate");
  if (n["replicates"]) c.mc_replicates = r.positive_int(n["replicates"], "replicates");

  g.truth = default_truth(g.n_event_types, g.n_covariates, g.n_biomarkers, c.history_scale);
  if (const auto t = n["truth"]) {
    r.check_keys(t, {"weibull_shape", "weibull_coefficients", "type_coefficients", "main", "lts"}, "simulation.truth");
    if (t["weibull_shape"]) g.truth.weibull_shape = r.positive(t["weibull_shape"], "weibull_shape");
    if (t["weibull_coefficients"]) g.truth.weibull_coefficients = r.vector(t["weibull_coefficients"], "weibull_coefficients");
    if (t["type_coefficients"]) g.truth.type_coefficients = r.matrix(t["type_coefficients"], "type_coefficients");
    if (t["main"]) read_lmm_truth(r, t["main"], g.truth.main, "truth.main");
    if (t["lts"]) read_lmm_truth(r, t["lts"], g.truth.lts, "truth.lts");
  }
  // Shape problems surface here rather than at simulation time.
  r.with_line(n, [&] {
    calibrate_censoring(g);
    return 0;
  });
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& source, const std::filesystem::path& base_dir) {
  const Reader r(source);
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw Error(ErrorCode::ConfigError, source + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  RunConfig c;
  if (root.IsNull()) return c;
  r.check_keys(root, {"version", "seed", "workers", "data", "model", "evaluation", "bootstrap", "simulation"},
               "the top level");
  if (root["version"]) {
    c.version = r.integer(root["version"], "version");
    if (c.version != kConfigVersion) {
      r.fail(root["version"], "config version " + std::to_string(c.version) + " is not supported (expected " +
                                  std::to_string(kConfigVersion) + ")");
    }
  }
  if (root["seed"]) c.seed = r.scalar<std::uint64_t>(root["seed"], "seed");
  if (root["workers"]) c.workers = r.positive_int(root["workers"], "workers");
  if (root["data"]) read_data(r, root["data"], base_dir, c.data);
  if (root["model"]) read_model(r, root["model"], c);
  if (root["evaluation"]) read_evaluation(r, root["evaluation"], c.evaluation);
  if (const auto b = root["bootstrap"]) {
    r.check_keys(b, {"reps"}, "bootstrap");
    if (b["reps"]) c.bootstrap_reps = r.positive_int(b["reps"], "bootstrap.reps");
  }
  if (root["simulation"]) read_simulation(r, root["simulation"], c);
  c.simulation.seed = c.seed;
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), path.string(), path.parent_path());
}

namespace {

void emit_matrix(YAML::Emitter& e, const Eigen::MatrixXd& m) {
  e << YAML::BeginSeq;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    e << YAML::Flow << YAML::BeginSeq;
    for (Eigen::Index j = 0; j < m.cols(); ++j) e << m(i, j);
    e << YAML::EndSeq;
  }
  e << YAML::EndSeq;
}

void emit_vector(YAML::Emitter& e, const Eigen::VectorXd& v) {
  e << YAML::Flow << YAML::BeginSeq;
  for (Eigen::Index i = 0; i < v.size(); ++i) e << v(i);
  e << YAML::EndSeq;
}

void emit_lmm(YAML::Emitter& e, const LmmParameters& l) {
  e << YAML::BeginMap;
  e << YAML::Key << "coefficients" << YAML::Value;
  emit_matrix(e, l.coefficients);
  e << YAML::Key << "omega" << YAML::Value;
  emit_matrix(e, l.omega);
  e << YAML::Key << "residual_variances" << YAML::Value;
  emit_vector(e, l.residual_variances);
  e << YAML::EndMap;
}

}  // namespace

void write_generator_config(const GeneratorConfig& g, double history_scale, std::ostream& out) {
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << YAML::BeginMap;
  e << YAML::Key << "version" << YAML::Value << kConfigVersion;
  e << YAML::Key << "seed" << YAML::Value << g.seed;
  e << YAML::Key << "simulation" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "n" << YAML::Value << g.n;
  e << YAML::Key << "variant" << YAML::Value << to_string(g.variant);
  e << YAML::Key << "event_types" << YAML::Value << g.n_event_types;
  e << YAML::Key << "covariates" << YAML::Value << g.n_covariates;
  e << YAML::Key << "biomarkers" << YAML::Value << g.n_biomarkers;
  e << YAML::Key << "history_scale" << YAML::Value << history_scale;
  e << YAML::Key << "visit_spacing" << YAML::Value << g.visit_spacing;
  e << YAML::Key << "visit_jitter" << YAML::Value << g.visit_jitter;
  e << YAML::Key << "censoring_rate" << YAML::Value << g.censoring_rate;
  e << YAML::Key << "admin_rate" << YAML::Value << g.admin_rate;
  e << YAML::Key << "truth" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "weibull_shape" << YAML::Value << g.truth.weibull_shape;
  e << YAML::Key << "weibull_coefficients" << YAML::Value;
  emit_vector(e, g.truth.weibull_coefficients);
  e << YAML::Key << "type_coefficients" << YAML::Value;
  emit_matrix(e, g.truth.type_coefficients);
  e << YAML::Key << "main" << YAML::Value;
  emit_lmm(e, g.truth.main);
  if (g.variant == Variant::TP) {
    e << YAML::Key << "lts" << YAML::Value;
    emit_lmm(e, g.truth.lts);
  }
  e << YAML::EndMap << YAML::EndMap << YAML::EndMap;
  out << e.c_str() << '\n';
}

}  // namespace crbjm
