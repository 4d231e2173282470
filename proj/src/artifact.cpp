#include "crbjm/artifact.hpp"

#include "crbjm/error.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

namespace crbjm {

namespace {

using json = nlohmann::ordered_json;

constexpr const char* kFormat = "crbjm-model";

// Non-finite doubles have no JSON literal; they travel as strings.
json num(double x) {
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

double get_num(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "nan") return std::nan("");
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
  }
  throw Error(ErrorCode::ParseError, "artifact: expected a number, got " + j.dump());
}

json vec(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v(i)));
  return a;
}

json vec(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

json mat(const Eigen::MatrixXd& m) {
  json data = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index k = 0; k < m.cols(); ++k) data.push_back(num(m(i, k)));
  }
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Eigen::VectorXd get_vec(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = get_num(j[i]);
  return v;
}

std::vector<double> get_std_vec(const json& j) {
  std::vector<double> v;
  for (const auto& e : j) v.push_back(get_num(e));
  return v;
}

Eigen::MatrixXd get_mat(const json& j) {
  const auto r = j.at("rows").get<Eigen::Index>(), c = j.at("cols").get<Eigen::Index>();
  const json& data = j.at("data");
  if (r < 0 || c < 0 || data.size() != static_cast<std::size_t>(r * c)) {
    throw Error(ErrorCode::ParseError, "artifact: matrix data does not match its shape");
  }
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index k = 0; k < c; ++k) m(i, k) = get_num(data[static_cast<std::size_t>(i * c + k)]);
  }
  return m;
}

json lmm(const LmmParameters& p) {
  return json{{"coefficients", mat(p.coefficients)},
              {"omega", mat(p.omega)},
              {"residual_variances", vec(p.residual_variances)}};
}

LmmParameters get_lmm(const json& j) {
  LmmParameters p;
  p.coefficients = get_mat(j.at("coefficients"));
  p.omega = get_mat(j.at("omega"));
  p.residual_variances = get_vec(j.at("residual_variances"));
  return p;
}

json basis(const SplineBasis& b) {
  return json{{"kind", b.kind() == SplineBasis::Kind::BSpline ? "bspline" : "natural_cubic"},
              {"degree", b.degree()},
              {"knots", vec(b.knots())}};
}

SplineBasis get_basis(const json& j) {
  const auto kind = j.at("kind").get<std::string>();
  auto knots = get_std_vec(j.at("knots"));
  if (kind == "bspline") return SplineBasis::bspline(j.at("degree").get<int>(), std::move(knots));
  if (kind == "natural_cubic") return SplineBasis::natural_cubic(std::move(knots));
  throw Error(ErrorCode::ParseError, "artifact: unknown spline kind '" + kind + "'");
}

json survival(const SurvivalFit& s) {
  json tm;
  if (const auto* w = std::get_if<WeibullFit>(&s.time_model)) {
    tm = json{{"kind", "weibull"}, {"shape", num(w->shape)}, {"coefficients", vec(w->coefficients)},
              {"covariance", mat(w->covariance)}};
  } else {
    const auto& c = std::get<CoxFit>(s.time_model);
    tm = json{{"kind", "cox"},
              {"coefficients", vec(c.coefficients)},
              {"event_times", vec(c.event_times)},
              {"cumulative_hazard", vec(c.cumulative_hazard)},
              {"tail_rate", num(c.tail_rate)},
              {"covariance", mat(c.covariance)}};
  }
  json et = nullptr;
  if (s.event_type_model) {
    et = json{{"basis", basis(s.event_type_model->basis)},
              {"coefficients", mat(s.event_type_model->coefficients)},
              {"separation_detected", s.event_type_model->separation_detected}};
  }
  return json{{"n_event_types", s.n_event_types}, {"time_model", tm}, {"event_type_model", et}};
}

SurvivalFit get_survival(const json& j) {
  SurvivalFit s;
  s.n_event_types = j.at("n_event_types").get<int>();
  const json& tm = j.at("time_model");
  const auto kind = tm.at("kind").get<std::string>();
  if (kind == "weibull") {
    WeibullFit w;
    w.shape = get_num(tm.at("shape"));
    w.coefficients = get_vec(tm.at("coefficients"));
    w.covariance = get_mat(tm.at("covariance"));
    s.time_model = std::move(w);
  } else if (kind == "cox") {
    CoxFit c;
    c.coefficients = get_vec(tm.at("coefficients"));
    c.event_times = get_std_vec(tm.at("event_times"));
    c.cumulative_hazard = get_std_vec(tm.at("cumulative_hazard"));
    c.tail_rate = get_num(tm.at("tail_rate"));
    c.covariance = get_mat(tm.at("covariance"));
    s.time_model = std::move(c);
  } else {
    throw Error(ErrorCode::ParseError, "artifact: unknown time model '" + kind + "'");
  }
  const json& et = j.at("event_type_model");
  if (!et.is_null()) {
    EventTypeFit e;
    e.basis = get_basis(et.at("basis"));
    e.coefficients = get_mat(et.at("coefficients"));
    e.separation_detected = et.at("separation_detected").get<bool>();
    s.event_type_model = std::move(e);
  }
  return s;
}

json spec(const LongitudinalSpec& s) {
  return json{{"n_biomarkers", s.n_biomarkers},
              {"n_covariates", s.n_covariates},
              {"n_event_types", s.n_event_types},
              {"trajectory_degree", s.trajectory_degree},
              {"transform", to_string(s.transform)},
              {"random_effects", to_string(s.random_effects)},
              {"terms",
               {{"covariates", s.terms.covariates},
                {"event_type", s.terms.event_type},
                {"event_time", s.terms.event_time},
                {"time_by_type", s.terms.time_by_type}}}};
}

LongitudinalSpec get_spec(const json& j) {
  LongitudinalSpec s;
  s.n_biomarkers = j.at("n_biomarkers").get<int>();
  s.n_covariates = j.at("n_covariates").get<int>();
  s.n_event_types = j.at("n_event_types").get<int>();
  s.trajectory_degree = j.at("trajectory_degree").get<int>();
  s.transform = parse_transform(j.at("transform").get<std::string>());
  s.random_effects = parse_random_effects(j.at("random_effects").get<std::string>());
  const json& t = j.at("terms");
  s.terms.covariates = t.at("covariates").get<bool>();
  s.terms.event_type = t.at("event_type").get<bool>();
  s.terms.event_time = t.at("event_time").get<bool>();
  s.terms.time_by_type = t.at("time_by_type").get<bool>();
  return s;
}

void check_shapes(const CrBjmModel& m) {
  const int rows = m.spec.n_rows();
  const auto& main = m.longitudinal.main;
  bool ok = main.coefficients.rows() == rows && main.coefficients.cols() == m.spec.n_features() &&
            main.omega.rows() == m.spec.n_random() && main.omega.cols() == m.spec.n_random() &&
            main.residual_variances.size() == m.spec.n_biomarkers &&
            static_cast<int>(m.biomarker_names.size()) == m.spec.n_biomarkers &&
            static_cast<int>(m.covariate_names.size()) == m.spec.n_covariates &&
            m.survival.n_event_types == m.spec.n_event_types;
  if (m.longitudinal.lts) {
    ok = ok && m.longitudinal.lts->coefficients.rows() == rows &&
         m.longitudinal.lts->coefficients.cols() == m.spec.n_lts_features();
  }
  if (m.variant == Variant::TP && !m.longitudinal.lts) ok = false;
  if (!ok) throw Error(ErrorCode::ParseError, "artifact: parameter shapes disagree with the model structure");
}

}  // namespace

std::string serialize_model(const CrBjmModel& m) {
  json j;
  j["format"] = kFormat;
  j["version"] = kArtifactVersion;
  j["variant"] = to_string(m.variant);
  j["tau_max"] = num(m.tau_max);
  j["quadrature"] = json{{"width", num(m.quadrature.width)},
                         {"t_end_ex", num(m.quadrature.t_end_ex)},
                         {"prediction_width", num(m.quadrature.prediction_width)}};
  j["spec"] = spec(m.spec);
  j["covariate_names"] = m.covariate_names;
  j["biomarker_names"] = m.biomarker_names;
  j["survival"] = survival(m.survival);
  j["longitudinal"] = json{{"main", lmm(m.longitudinal.main)},
                           {"lts", m.longitudinal.lts ? lmm(*m.longitudinal.lts) : json(nullptr)}};
  j["provenance"] = json{{"dataset_hash", m.provenance.dataset_hash},
                         {"seed", m.provenance.seed},
                         {"method", to_string(m.provenance.method)},
                         {"iterations", m.provenance.iterations},
                         {"final_change", num(m.provenance.final_change)}};
  return j.dump(1) + "\n";
}

CrBjmModel deserialize_model(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ParseError, std::string("artifact is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("format") || j["format"] != kFormat) {
    throw Error(ErrorCode::VersionMismatch, "not a crbjm model artifact");
  }
  if (!j.contains("version") || !j["version"].is_number_integer() || j["version"].get<int>() != kArtifactVersion) {
    throw Error(ErrorCode::VersionMismatch, "artifact version " + (j.contains("version") ? j["version"].dump() : "?") +
                                                " is not supported (expected " + std::to_string(kArtifactVersion) + ")");
  }
  try {
    CrBjmModel m;
    m.variant = parse_variant(j.at("variant").get<std::string>());
    m.tau_max = get_num(j.at("tau_max"));
    const json& q = j.at("quadrature");
    m.quadrature.width = get_num(q.at("width"));
    m.quadrature.t_end_ex = get_num(q.at("t_end_ex"));
    m.quadrature.prediction_width = get_num(q.at("prediction_width"));
    m.spec = get_spec(j.at("spec"));
    m.covariate_names = j.at("covariate_names").get<std::vector<std::string>>();
    m.biomarker_names = j.at("biomarker_names").get<std::vector<std::string>>();
    m.survival = get_survival(j.at("survival"));
    const json& l = j.at("longitudinal");
    m.longitudinal.main = get_lmm(l.at("main"));
    if (!l.at("lts").is_null()) m.longitudinal.lts = get_lmm(l.at("lts"));
    const json& p = j.at("provenance");
    m.provenance.dataset_hash = p.at("dataset_hash").get<std::string>();
    m.provenance.seed = p.at("seed").get<std::uint64_t>();
    m.provenance.method = parse_fit_method(p.at("method").get<std::string>());
    m.provenance.iterations = p.at("iterations").get<int>();
    m.provenance.final_change = get_num(p.at("final_change"));
    check_shapes(m);
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("malformed artifact: ") + e.what());
  }
}

CrBjmModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::ParseError, "cannot open model artifact " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return deserialize_model(text.str());
}

}  // namespace crbjm
