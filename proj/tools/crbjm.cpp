// crbjm: command-line driver for simulation, fitting, prediction, evaluation,
// bootstrap and Monte Carlo studies.

#include "crbjm/artifact.hpp"
#include "crbjm/config.hpp"
#include "crbjm/error.hpp"
#include "crbjm/evaluation.hpp"
#include "crbjm/parallel.hpp"
#include "crbjm/prediction.hpp"
#include "crbjm/simulation.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace crbjm;

namespace {

/// Collects every output of a command and writes them only once the command
/// has succeeded: each file goes to a temporary sibling, then all are renamed.
class Outputs {
 public:
  void add(fs::path path, std::string content) { files_.emplace_back(std::move(path), std::move(content)); }

  void commit() {
    std::vector<fs::path> temps;
    try {
      for (const auto& [path, content] : files_) {
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        fs::path tmp = path;
        tmp += ".tmp";
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << content;
        out.close();
        if (!out) throw Error(ErrorCode::ParseError, "cannot write " + tmp.string());
        temps.push_back(tmp);
      }
    } catch (...) {
      for (const auto& t : temps) fs::remove(t);
      throw;
    }
    for (std::size_t i = 0; i < files_.size(); ++i) fs::rename(temps[i], files_[i].first);
  }

 private:
  std::vector<std::pair<fs::path, std::string>> files_;
};

std::string fmt(double x) { return std::isfinite(x) ? format_double(x) : (std::isnan(x) ? "NA" : format_double(x)); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(item, 0, "list element"));
  return out;
}

// Options shared by the commands that read a cohort.
struct DataArgs {
  std::string config;
  std::string subjects;
  std::string longitudinal;
  std::optional<double> tau_max;
  std::optional<std::uint64_t> seed;
  int workers = 0;
};

void add_data_options(CLI::App* cmd, DataArgs& a, bool data_required = true) {
  cmd->add_option("--config", a.config, "YAML run configuration")->check(CLI::ExistingFile);
  auto* s = cmd->add_option("--subjects", a.subjects, "subjects CSV (id, time, event, covariates)");
  auto* l = cmd->add_option("--longitudinal", a.longitudinal, "longitudinal CSV (id, biomarker, time, value)");
  if (!data_required) {
    s->description("subjects CSV of the histories");
    l->description("longitudinal CSV of the histories");
  }
  cmd->add_option("--tau-max", a.tau_max, "override tau_max");
  cmd->add_option("--seed", a.seed, "random seed");
  cmd->add_option("--workers", a.workers, "worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
}

RunConfig resolve(const DataArgs& a) {
  RunConfig c = a.config.empty() ? RunConfig{} : load_config(a.config);
  if (!a.subjects.empty()) c.data.subjects = a.subjects;
  if (!a.longitudinal.empty()) c.data.longitudinal = a.longitudinal;
  if (a.seed) c.seed = *a.seed;
  c.simulation.seed = c.seed;
  if (a.workers > 0) c.workers = a.workers;
  if (a.tau_max) c.data.schema.tau_max = *a.tau_max;
  return c;
}

Dataset read_cohort(const RunConfig& c) {
  if (c.data.subjects.empty() || c.data.longitudinal.empty()) {
    throw CLI::ValidationError("--subjects and --longitudinal (or data paths in --config) are required");
  }
  return load_dataset(c.data.subjects, c.data.longitudinal, c.data.schema);
}

fs::path sidecar(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  p += suffix;
  return p;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  DataArgs data;
  std::string out;
  std::optional<int> n;
};

int cmd_simulate(const SimulateArgs& a) {
  RunConfig c = resolve(a.data);
  if (a.n) c.simulation.n = *a.n;
  const GeneratorConfig& g = c.simulation;
  const SimulatedCohort sim = simulate_cohort(g);

  std::ostringstream subj, lon, truth;
  write_subjects_csv(sim.data, subj);
  write_longitudinal_csv(sim.data, lon);
  write_truth_csv(sim.truth, truth);
  Outputs outs;
  const fs::path dir = a.out;
  outs.add(dir / "subjects.csv", subj.str());
  outs.add(dir / "longitudinal.csv", lon.str());
  outs.add(dir / "truth.csv", truth.str());
  outs.commit();

  const auto& cal = sim.calibration;
  std::cout << "simulated " << g.n << " subjects (" << to_string(g.variant) << ", seed " << g.seed << ")\n"
            << "censoring c_max " << fmt(cal.c_max) << ", expected share " << fmt(cal.expected_censoring)
            << ", realized " << fmt(sim.censoring_fraction) << '\n';
  if (g.variant == Variant::TP) {
    std::cout << "tau_max " << fmt(cal.tau_max) << ", administrative share expected " << fmt(cal.expected_admin)
              << ", realized " << fmt(sim.admin_fraction) << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct FitArgs {
  DataArgs data;
  std::string variant;
  std::string method;
  std::string out;
  std::string log;
};

ModelConfig model_config(const RunConfig& c, const std::string& variant) {
  ModelConfig m = c.model;
  if (!variant.empty()) m.variant = parse_variant(variant);
  if (c.data.schema.tau_max) m.tau_max = c.data.schema.tau_max;
  return m;
}

FitMethod fit_method(const RunConfig& c, const std::string& method) {
  return method.empty() ? c.method : parse_fit_method(method);
}

std::string trace_csv(const std::vector<FitTraceEntry>& trace) {
  std::ostringstream os;
  os << "iteration,objective,max_change\n";
  for (const auto& t : trace) os << t.iteration << ',' << fmt(t.objective) << ',' << fmt(t.max_change) << '\n';
  return os.str();
}

int cmd_fit(const FitArgs& a) {
  const RunConfig c = resolve(a.data);
  const Dataset data = read_cohort(c);
  const ModelConfig m = model_config(c, a.variant);
  const FitMethod method = fit_method(c, a.method);
  const FitResult fit = fit_model(data, m, method, c.seed, c.workers);

  Outputs outs;
  outs.add(a.out, serialize_model(fit.model));
  outs.add(a.log.empty() ? sidecar(a.out, ".log.csv") : fs::path(a.log), trace_csv(fit.trace));
  outs.commit();
  std::cout << "fitted " << to_string(method) << " (" << to_string(m.variant) << ") on " << data.size()
            << " subjects";
  if (method == FitMethod::EM) std::cout << ", " << fit.model.provenance.iterations << " EM iterations";
  std::cout << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  DataArgs data;
  std::string model;
  std::string queries;
  std::string out;
};

struct Query {
  std::string query, id, kind, biomarker;
  std::string s, delta, t;  // as given, echoed in the output
};

std::string predict_header(int J) {
  std::string h = "query,id,kind,s,delta,t,biomarker";
  for (int j = 1; j <= J; ++j) h += ",risk_" + std::to_string(j);
  h += ",remainder,mean,mode";
  for (int q = 10; q <= 90; q += 10) h += ",q" + std::to_string(q);
  return h + ",error\n";
}

struct PredictRow {
  std::string line;
  bool failed = false;
};

PredictRow predict_row(const CrBjmModel& model, const std::map<std::string, const Subject*>& by_id, const Query& q) {
  const int J = model.spec.n_event_types;
  std::vector<std::string> risk(static_cast<std::size_t>(J)), quant(9);
  std::string remainder, mean, mode, error;
  try {
    const auto it = by_id.find(q.id);
    if (it == by_id.end()) throw Error(ErrorCode::MissingSubject, "no history for subject", q.id);
    const double s = parse_double(q.s, 0, "s");
    const History h = History::from_subject(*it->second, s);
    if (q.kind == "risk") {
      const RiskPrediction r = predict_risk(model, h, parse_double(q.delta, 0, "delta"));
      for (int j = 0; j < J; ++j) risk[static_cast<std::size_t>(j)] = fmt(r.risk(j));
      remainder = fmt(r.remainder);
    } else if (q.kind == "forecast") {
      const auto& names = model.biomarker_names;
      const auto b = std::find(names.begin(), names.end(), q.biomarker);
      if (b == names.end()) throw Error(ErrorCode::InvalidArgument, "unknown biomarker '" + q.biomarker + "'");
      const BiomarkerForecast f =
          predict_biomarker(model, h, static_cast<int>(b - names.begin()), parse_double(q.t, 0, "t"));
      mean = fmt(f.mean);
      mode = fmt(f.mode);
      for (int k = 0; k < 9 && k < f.quantiles.size(); ++k) quant[static_cast<std::size_t>(k)] = fmt(f.quantiles(k));
    } else {
      throw Error(ErrorCode::InvalidArgument, "query kind must be risk or forecast, got '" + q.kind + "'");
    }
  } catch (const Error& e) {
    error = e.what();
  }
  std::string row = csv_field(q.query) + ',' + csv_field(q.id) + ',' + csv_field(q.kind) + ',' + q.s + ',' + q.delta +
                    ',' + q.t + ',' + csv_field(q.biomarker);
  for (const auto& r : risk) row += ',' + r;
  row += ',' + remainder + ',' + mean + ',' + mode;
  for (const auto& v : quant) row += ',' + v;
  return {row + ',' + csv_field(error) + '\n', !error.empty()};
}

int cmd_predict(const PredictArgs& a) {
  RunConfig c = resolve(a.data);
  const CrBjmModel model = load_model(a.model);
  c.data.schema.biomarkers = model.biomarker_names;
  c.data.schema.covariate_columns = model.covariate_names;
  c.data.schema.n_event_types = model.spec.n_event_types;
  const Dataset histories = read_cohort(c);
  std::map<std::string, const Subject*> by_id;
  for (const auto& s : histories.subjects()) by_id[s.id] = &s;

  std::ifstream qin(a.queries);
  if (!qin) throw Error(ErrorCode::ParseError, "cannot open queries file " + a.queries);
  const CsvTable table = read_csv(qin);
  std::vector<Query> queries;
  if (!table.header.empty()) {
    const std::size_t cq = table.column("query"), cid = table.column("id"), ck = table.column("kind"),
                      cs = table.column("s");
    const auto cd = table.find_column("delta"), ct = table.find_column("t"), cb = table.find_column("biomarker");
    for (const auto& r : table.rows) {
      Query q{r[cq], r[cid], r[ck], cb ? r[*cb] : "", r[cs], cd ? r[*cd] : "", ct ? r[*ct] : ""};
      queries.push_back(std::move(q));
    }
  }
  std::vector<PredictRow> rows(queries.size());
  parallel_for(queries.size(), c.workers, [&](std::size_t i) { rows[i] = predict_row(model, by_id, queries[i]); });

  std::string out = predict_header(model.spec.n_event_types);
  int failed = 0;
  for (const auto& r : rows) {
    out += r.line;
    failed += r.failed;
  }
  Outputs outs;
  outs.add(a.out, out);
  outs.commit();
  std::cout << queries.size() << " queries, " << failed << " with errors\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  DataArgs data;
  std::string variant;
  std::string method;
  std::optional<int> folds;
  std::string landmarks;
  std::optional<double> delta;
  std::string out;
  std::string log;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const RunConfig c = resolve(a.data);
  const Dataset data = read_cohort(c);
  const ModelConfig m = model_config(c, a.variant);
  const FitMethod method = fit_method(c, a.method);
  CvOptions cv = c.evaluation;
  if (a.folds) cv.folds = *a.folds;
  if (!a.landmarks.empty()) cv.landmarks = parse_list(a.landmarks);
  if (a.delta) cv.delta = *a.delta;
  cv.seed = c.seed;
  cv.workers = c.workers;
  const CvReport rep = kfold_cv(data, m, method, cv);

  std::ostringstream os;
  os << "metric,target";
  for (const auto& l : rep.landmarks) os << ",s=" << fmt(l.s);
  os << '\n';
  auto line = [&](const std::string& metric, const std::string& target, auto value) {
    os << metric << ',' << csv_field(target);
    for (const auto& l : rep.landmarks) os << ',' << value(l);
    os << '\n';
  };
  line("n_at_risk", "", [](const CvLandmark& l) { return std::to_string(l.n_at_risk); });
  const int J = data.n_event_types();
  for (int j = 0; j < J; ++j) {
    line("auc", "type" + std::to_string(j + 1), [&](const CvLandmark& l) { return fmt(l.auc(j)); });
  }
  for (int j = 0; j < J; ++j) {
    line("brier", "type" + std::to_string(j + 1), [&](const CvLandmark& l) { return fmt(l.brier(j)); });
  }
  const auto& bio = data.biomarker_names();
  for (const char* metric : {"rmse", "p30", "p50"}) {
    for (std::size_t b = 0; b < bio.size(); ++b) {
      line(metric, bio[b], [&](const CvLandmark& l) {
        const Eigen::VectorXd& v = std::string(metric) == "rmse" ? l.rmse : (std::string(metric) == "p30" ? l.p30 : l.p50);
        return fmt(v(static_cast<Eigen::Index>(b)));
      });
    }
  }

  std::ostringstream log;
  log << "fold,iteration,objective,max_change\n";
  for (std::size_t f = 0; f < rep.fit_logs.size(); ++f) {
    for (const auto& t : rep.fit_logs[f]) {
      log << f + 1 << ',' << t.iteration << ',' << fmt(t.objective) << ',' << fmt(t.max_change) << '\n';
    }
  }
  Outputs outs;
  outs.add(a.out, os.str());
  outs.add(a.log.empty() ? sidecar(a.out, ".log.csv") : fs::path(a.log), log.str());
  outs.commit();

  std::cout << rep.folds << "-fold " << to_string(method) << " cross-validation, delta " << fmt(rep.delta) << '\n';
  for (const auto& err : rep.fold_errors) {
    if (!err.empty()) std::cerr << "warning: " << err << '\n';
  }
  for (const auto& l : rep.landmarks) {
    for (const auto& n : l.notes) std::cerr << "note (s=" << fmt(l.s) << "): " << n << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct BootstrapArgs {
  DataArgs data;
  std::string variant;
  std::string method;
  std::optional<int> reps;
  std::string out;
};

int cmd_bootstrap(const BootstrapArgs& a) {
  const RunConfig c = resolve(a.data);
  const Dataset data = read_cohort(c);
  const ModelConfig m = model_config(c, a.variant);
  const FitMethod method = fit_method(c, a.method);
  const int reps = a.reps.value_or(c.bootstrap_reps);
  if (reps < 20) std::cerr << "warning: " << reps << " bootstrap replicates give unreliable standard deviations\n";
  const BootstrapResult res = bootstrap(data, m, method, reps, c.seed, c.workers);

  std::ostringstream os;
  os << "parameter,estimate,sd\n";
  for (std::size_t i = 0; i < res.names.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    os << csv_field(res.names[i]) << ',' << fmt(res.estimate(k)) << ',' << fmt(res.sd(k)) << '\n';
  }
  Outputs outs;
  outs.add(a.out, os.str());
  outs.commit();
  std::cout << "bootstrap replicates " << res.reps << ", failures " << res.failures << '\n';
  for (const auto& msg : res.failure_messages) std::cerr << "failed replicate: " << msg << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct McArgs {
  DataArgs data;
  std::optional<int> replicates;
  std::optional<int> n;
  std::string out;
};

int cmd_mc_study(const McArgs& a) {
  RunConfig c = resolve(a.data);
  if (a.n) c.simulation.n = *a.n;
  McStudyOptions opt;
  opt.replicates = a.replicates.value_or(c.mc_replicates);
  opt.seed = c.seed;
  opt.workers = c.workers;
  opt.model = c.model;
  const McStudyResult res = run_mc_study(c.simulation, opt);

  std::ostringstream os;
  write_mc_study_csv(res, os);
  Outputs outs;
  outs.add(a.out, os.str());
  outs.commit();

  double max_bias = 0.0;
  for (const auto& r : res.rows) max_bias = std::max(max_bias, std::abs(r.bias_em));
  std::cout << "replicates " << res.replicates << ", failures " << res.failures << ", EM converged "
            << res.converged << '\n'
            << "mean censoring " << fmt(res.mean_censoring) << ", mean administrative " << fmt(res.mean_admin) << '\n'
            << "EM iterations mean " << fmt(res.mean_em_iterations) << ", max " << fmt(res.max_em_iterations) << '\n'
            << "max |percent bias| (EM) " << fmt(max_bias) << '\n';
  for (const auto& msg : res.failure_messages) std::cerr << "failed replicate: " << msg << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Competing-risk backward joint models"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "simulate a cohort and its truth sidecar");
  add_data_options(simulate, sim.data, false);
  simulate->add_option("--out", sim.out, "output directory")->required();
  simulate->add_option("--n", sim.n, "cohort size")->check(CLI::PositiveNumber);

  FitArgs fit;
  auto* fitc = app.add_subcommand("fit", "fit a model and write its artifact");
  add_data_options(fitc, fit.data);
  fitc->add_option("--variant", fit.variant, "ex or tp");
  fitc->add_option("--method", fit.method, "cca or em");
  fitc->add_option("--out", fit.out, "artifact path")->required();
  fitc->add_option("--log", fit.log, "fit log CSV (default: <out>.log.csv)");

  PredictArgs pred;
  auto* predict = app.add_subcommand("predict", "risk and biomarker predictions for a batch of queries");
  add_data_options(predict, pred.data, false);
  predict->add_option("--model", pred.model, "model artifact")->required()->check(CLI::ExistingFile);
  predict->add_option("--queries", pred.queries, "queries CSV (query, id, kind, s, delta, t, biomarker)")
      ->required()
      ->check(CLI::ExistingFile);
  predict->add_option("--out", pred.out, "results CSV")->required();

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "k-fold cross-validated prediction accuracy");
  add_data_options(evaluate, ev.data);
  evaluate->add_option("--variant", ev.variant, "ex or tp");
  evaluate->add_option("--method", ev.method, "cca or em");
  evaluate->add_option("--folds", ev.folds, "number of folds")->check(CLI::Range(2, 1000));
  evaluate->add_option("--landmarks", ev.landmarks, "comma-separated landmark times");
  evaluate->add_option("--delta", ev.delta, "prediction horizon")->check(CLI::PositiveNumber);
  evaluate->add_option("--out", ev.out, "report CSV")->required();
  evaluate->add_option("--log", ev.log, "per-fold fit log CSV (default: <out>.log.csv)");

  BootstrapArgs bs;
  auto* boot = app.add_subcommand("bootstrap", "bootstrap standard deviations of every parameter");
  add_data_options(boot, bs.data);
  boot->add_option("--variant", bs.variant, "ex or tp");
  boot->add_option("--method", bs.method, "cca or em");
  boot->add_option("--reps", bs.reps, "bootstrap replicates")->check(CLI::Range(2, 1000000));
  boot->add_option("--out", bs.out, "SD table CSV")->required();

  McArgs mc;
  auto* mcs = app.add_subcommand("mc-study", "Monte Carlo bias and relative efficiency of CCA and EM");
  add_data_options(mcs, mc.data, false);
  mcs->add_option("--replicates", mc.replicates, "Monte Carlo replicates")->check(CLI::Range(2, 1000000));
  mcs->add_option("--n", mc.n, "cohort size per replicate")->check(CLI::PositiveNumber);
  mcs->add_option("--out", mc.out, "bias/efficiency table CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*simulate) return cmd_simulate(sim);
    if (*fitc) return cmd_fit(fit);
    if (*predict) return cmd_predict(pred);
    if (*evaluate) return cmd_evaluate(ev);
    if (*boot) return cmd_bootstrap(bs);
    if (*mcs) return cmd_mc_study(mc);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what();
    if (!e.subject_id().empty()) std::cerr << " (subject " << e.subject_id() << ')';
    std::cerr << '\n';
    return is_numerical(e.code()) ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
