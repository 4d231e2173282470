// Acceptance checks. Prints one PASS/FAIL line per criterion. The exit status
// is 0 when the failing criteria are exactly the ones listed in --expect-fail.

#include "crbjm/error.hpp"
#include "crbjm/estimation.hpp"
#include "crbjm/evaluation.hpp"
#include "crbjm/parallel.hpp"
#include "crbjm/prediction.hpp"
#include "crbjm/simulation.hpp"
#include "crbjm/survival.hpp"

#include <CLI11.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using namespace crbjm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Context {
  int workers = 1;
  std::uint64_t seed = 20240601;
  std::string cli;

  // MC studies are shared by criteria 1-3.
  std::map<std::string, McStudyResult> studies;
  std::map<std::string, double> study_seconds;

  const McStudyResult& study(Variant v, int n) {
    const std::string key = to_string(v) + std::to_string(n);
    if (!studies.count(key)) {
      McStudyOptions o;
      o.replicates = 100;
      o.seed = stream_seed(seed, static_cast<std::uint64_t>(n) * 10 + (v == Variant::TP));
      o.workers = workers;
      const auto t0 = std::chrono::steady_clock::now();
      studies[key] = run_mc_study(default_generator(n, v, o.seed), o);
      study_seconds[key] = seconds_since(t0);
    }
    return studies[key];
  }
};

/// A random landmark query on a simulated subject, with the horizon kept
/// below tau_max under TP.
struct Query {
  History history;
  double delta = 0.0;
  int biomarker = 0;
};

std::vector<Query> draw_queries(const SimulatedCohort& sim, Variant v, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<Query> out;
  while (static_cast<int>(out.size()) < count) {
    const Subject& s = sim.data[static_cast<std::size_t>(uni(rng) * static_cast<double>(sim.data.size()))];
    const double s_max = std::min(s.observed_time, v == Variant::TP ? sim.calibration.tau_max - 3.5 : 8.0);
    if (s_max < 0.6) continue;
    Query q;
    const double s_at = 0.5 + uni(rng) * (s_max - 0.5);
    q.history = History::from_subject(s, s_at);
    q.delta = 1.0 + std::floor(3.0 * uni(rng));
    q.biomarker = static_cast<int>(uni(rng) * sim.data.n_biomarkers());
    out.push_back(std::move(q));
  }
  return out;
}

// Probabilities below this are compared absolutely: relative error means
// nothing for a wrong-type risk of 1e-60.
constexpr double kProbabilityFloor = 1e-3;

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }
/// Distance in MC standard errors. A rounding allowance keeps zero-variance
/// estimates (trajectories that do not depend on the event time) comparable.
double mc_z(double value, double mc, double se) {
  return std::max(0.0, std::abs(value - mc) - 1e-8 * (1.0 + std::abs(mc))) / se;
}
double rel_prob(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), kProbabilityFloor); }

// ---------------------------------------------------------------------------

Outcome consistency(Context& ctx) {
  double worst[2] = {0.0, 0.0};
  const int sizes[2] = {300, 1000};
  std::string where[2];
  for (int k = 0; k < 2; ++k) {
    for (const auto& row : ctx.study(Variant::EX, sizes[k]).rows) {
      if (std::abs(row.bias_em) > worst[k]) {
        worst[k] = std::abs(row.bias_em);
        where[k] = row.name;
      }
    }
  }
  const double secs = ctx.study_seconds["ex300"] + ctx.study_seconds["ex1000"];
  return {worst[0] < 5.0 && worst[1] < 2.0,
          fmt("max |bias EM| %.2f%% at n=300 (%s; limit 5%%), %.2f%% at n=1000 (%s; limit 2%%); %.0f s on %d workers",
              worst[0], where[0].c_str(), worst[1], where[1].c_str(), secs, ctx.workers)};
}

Outcome efficiency(Context& ctx) {
  const McStudyResult& r = ctx.study(Variant::TP, 1000);
  int below = 0, lts_total = 0, lts_ok = 0;
  double lts_worst = 0.0;
  for (const auto& row : r.rows) {
    below += row.relative_efficiency < 1.0;
    if (row.lts) {
      ++lts_total;
      lts_ok += row.relative_efficiency < 0.9;
      lts_worst = std::max(lts_worst, row.relative_efficiency);
    }
  }
  const double share = static_cast<double>(below) / static_cast<double>(r.rows.size());
  return {share >= 0.9 && lts_ok == lts_total,
          fmt("TP n=1000: SD(EM)/SD(CCA) < 1 for %d/%zu parameters (%.0f%%, need 90%%); LTS < 0.9 for %d/%d "
              "(largest %.3f)",
              below, r.rows.size(), 100.0 * share, lts_ok, lts_total, lts_worst)};
}

Outcome convergence(Context& ctx) {
  int total = 0, ok = 0, failures = 0;
  double max_iter = 0.0;
  for (auto [v, n] : {std::pair{Variant::EX, 300}, {Variant::EX, 1000}, {Variant::TP, 1000}}) {
    const McStudyResult& r = ctx.study(v, n);
    total += r.replicates;
    ok += r.converged;
    failures += r.failures;
    max_iter = std::max(max_iter, r.max_em_iterations);
  }
  return {ok == total, fmt("%d/%d EM fits converged at tol 1e-4 within 200 iterations (%d failed; max %.0f iterations)",
                           ok, total, failures, max_iter)};
}

Outcome oracle_equivalence(Context& ctx) {
  // Judged at the default prediction width; the finer widths are reported to
  // show the convergence toward the oracle.
  const std::vector<double> widths{0.25, 0.125, 0.0625};
  std::vector<double> worst_risk(widths.size(), 0.0), worst_forecast(widths.size(), 0.0);
  double worst_z = 0.0;
  int within = 0, compared = 0;
  std::vector<double> levels;
  for (int q = 1; q <= 9; ++q) levels.push_back(0.1 * q);

  for (Variant v : {Variant::EX, Variant::TP}) {
    const GeneratorConfig g = default_generator(400, v, stream_seed(ctx.seed, 40 + (v == Variant::TP)));
    const CensoringCalibration cal = calibrate_censoring(g);
    const SimulatedCohort sim = simulate_cohort(g, cal);
    const CrBjmModel model = true_model(g, cal);
    const TruthOracle oracle(g, cal, 10000);

    const std::vector<Query> fine = draw_queries(sim, v, 25, stream_seed(ctx.seed, 42 + (v == Variant::TP)));
    std::vector<OracleRisk> o_risk(fine.size());
    std::vector<OracleForecast> o_forecast(fine.size());
    parallel_for(fine.size(), ctx.workers, [&](std::size_t i) {
      const Query& q = fine[i];
      o_risk[i] = oracle.risk(q.history, q.delta);
      o_forecast[i] = oracle.forecast(q.history, q.biomarker, q.history.prediction_time + q.delta, levels);
    });
    for (std::size_t w = 0; w < widths.size(); ++w) {
      CrBjmModel mw = model;
      mw.quadrature.prediction_width = widths[w];
      std::vector<double> rr(fine.size()), rf(fine.size());
      parallel_for(fine.size(), ctx.workers, [&](std::size_t i) {
        const Query& q = fine[i];
        const RiskPrediction p = predict_risk(mw, q.history, q.delta);
        const OracleRisk& o = o_risk[i];
        double e = rel_prob(p.remainder, o.remainder);
        for (Eigen::Index j = 0; j < p.risk.size(); ++j) e = std::max(e, rel_prob(p.risk(j), o.risk(j)));
        rr[i] = e;
        const BiomarkerForecast f = predict_biomarker(mw, q.history, q.biomarker, q.history.prediction_time + q.delta);
        const OracleForecast& of = o_forecast[i];
        e = rel(f.mean, of.mean);
        for (std::size_t k = 0; k < levels.size(); ++k) {
          e = std::max(e, rel(f.quantiles(static_cast<Eigen::Index>(k)), of.quantiles[k]));
        }
        rf[i] = e;
      });
      worst_risk[w] = std::max(worst_risk[w], *std::max_element(rr.begin(), rr.end()));
      worst_forecast[w] = std::max(worst_forecast[w], *std::max_element(rf.begin(), rf.end()));
    }

    const std::vector<Query> mc = draw_queries(sim, v, 5, stream_seed(ctx.seed, 44 + (v == Variant::TP)));
    std::vector<std::vector<double>> z(mc.size());
    parallel_for(mc.size(), ctx.workers, [&](std::size_t i) {
      const Query& q = mc[i];
      const std::uint64_t s = stream_seed(ctx.seed, 1000 + i + 100 * (v == Variant::TP));
      const RiskPrediction p = predict_risk(model, q.history, q.delta);
      const McEstimate m = mc_risk(g, cal, q.history, q.delta, 1000000, s);
      Eigen::VectorXd pred(p.risk.size() + 1);
      pred << p.risk, p.remainder;
      for (Eigen::Index j = 0; j < pred.size(); ++j) {
        if (m.value(j) >= kProbabilityFloor) z[i].push_back(mc_z(pred(j), m.value(j), m.se(j)));
      }
      const double t = q.history.prediction_time + q.delta;
      const BiomarkerForecast f = predict_biomarker(model, q.history, q.biomarker, t);
      const McEstimate fm = mc_forecast_mean(g, cal, q.history, q.biomarker, t, 1000000, s + 1);
      z[i].push_back(mc_z(f.mean, fm.value(0), fm.se(0)));
    });
    for (const auto& zi : z) {
      for (double x : zi) {
        ++compared;
        within += x <= 3.0;
        worst_z = std::max(worst_z, x);
      }
    }
  }
  const bool fine_ok = worst_risk[0] < 1e-3 && worst_forecast[0] < 1e-3;
  return {fine_ok && within == compared,
          fmt("fine-grid oracle, 50 queries: max rel error risk %.2e, forecast %.2e (limit 1e-3) at width 0.25 "
              "[0.125: %.2e, %.2e; 0.0625: %.2e, %.2e]; 1e6-draw MC, 10 queries: %d/%d quantities within 3 SE "
              "(max %.2f SE); probabilities below 1e-3 compared absolutely",
              worst_risk[0], worst_forecast[0], worst_risk[1], worst_forecast[1], worst_risk[2], worst_forecast[2],
              within, compared, worst_z)};
}

struct BrierComparison {
  int n = 0;
  double dynamic = 0.0, stat = 0.0, se = 0.0;
};

BrierComparison compare_brier(Context& ctx, double history_scale, std::uint64_t seed) {
  GeneratorConfig g = default_generator(1000, Variant::EX, stream_seed(seed, 0));
  g.truth = default_truth(g.n_event_types, g.n_covariates, g.n_biomarkers, history_scale);
  const CensoringCalibration cal = calibrate_censoring(g);
  const SimulatedCohort train = simulate_cohort(g, cal);
  GeneratorConfig gv = g;
  gv.n = 4000;
  gv.seed = stream_seed(seed, 1);
  const SimulatedCohort valid = simulate_cohort(gv, cal);

  ModelConfig mc;
  const FitResult fit = fit_model(train.data, mc, FitMethod::EM, seed, ctx.workers);
  const StaticModel stat = fit_static_model(train.data);

  const double s = 2.0, delta = 3.0;
  std::vector<std::size_t> at_risk;
  for (std::size_t i = 0; i < valid.data.size(); ++i) {
    if (valid.data[i].observed_time > s) at_risk.push_back(i);
  }
  const ScoredCohort cohort = score_cohort(fit.model, valid.data, at_risk, s, delta);
  const Eigen::VectorXd w = ipcw_weights(cohort);
  const std::size_t n = cohort.subjects.size();
  Eigen::VectorXd diff(static_cast<Eigen::Index>(n));
  BrierComparison out;
  out.n = static_cast<int>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& sub = cohort.subjects[i];
    const double y = sub.observed_time <= s + delta && sub.event_type != 0 ? 1.0 : 0.0;
    const double r_dyn = sub.risk.sum();
    const double r_stat = 1.0 - predict_static(stat, History::from_subject(valid.data[at_risk[i]], s), delta);
    const auto k = static_cast<Eigen::Index>(i);
    const double a = w(k) * (y - r_dyn) * (y - r_dyn), b = w(k) * (y - r_stat) * (y - r_stat);
    out.dynamic += a / static_cast<double>(n);
    out.stat += b / static_cast<double>(n);
    diff(k) = a - b;
  }
  const double mean = diff.mean();
  out.se = std::sqrt((diff.array() - mean).square().sum() / static_cast<double>(n - 1) / static_cast<double>(n));
  return out;
}

Outcome dominance(Context& ctx) {
  const BrierComparison base = compare_brier(ctx, 1.0, stream_seed(ctx.seed, 50));
  const BrierComparison strong = compare_brier(ctx, 3.0, stream_seed(ctx.seed, 51));
  const bool ok_base = base.n >= 2000 && base.dynamic <= base.stat + 2.0 * base.se;
  const bool ok_strong = strong.n >= 2000 && strong.dynamic + 2.0 * strong.se < strong.stat;
  return {ok_base && ok_strong,
          fmt("any-event Brier at s=2, delta=3: default truth n=%d dynamic %.4f static %.4f (paired SE %.4f); "
              "history effects x3 n=%d dynamic %.4f static %.4f (paired SE %.4f)",
              base.n, base.dynamic, base.stat, base.se, strong.n, strong.dynamic, strong.stat, strong.se)};
}

/// Default truth with every coefficient jittered.
GeneratorConfig random_generator(Variant v, int n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  GeneratorConfig g = default_generator(n, v, rng());
  auto jitter = [&](Eigen::MatrixXd& m, double sd) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += sd * nd(rng);
  };
  jitter(g.truth.main.coefficients, 0.2);
  jitter(g.truth.lts.coefficients, 0.2);
  jitter(g.truth.type_coefficients, 0.2);
  g.truth.weibull_coefficients(1) += 0.1 * nd(rng);
  g.truth.weibull_shape *= std::exp(0.1 * nd(rng));
  return g;
}

Outcome normalization(Context& ctx) {
  std::mt19937_64 rng(stream_seed(ctx.seed, 60));
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  int n_weights = 0, n_density = 0, n_risk = 0, n_types = 0;
  double e_weights = 0.0, e_density = 0.0, e_risk = 0.0, e_types = 0.0;

  for (int rep = 0; n_weights < 1000 || n_density < 1000 || n_risk < 1000; ++rep) {
    const Variant v = rep % 2 ? Variant::TP : Variant::EX;
    const GeneratorConfig g = random_generator(v, 300, rng);
    const CensoringCalibration cal = calibrate_censoring(g);
    const SimulatedCohort sim = simulate_cohort(g, cal);
    const CrBjmModel model = true_model(g, cal);

    const PosteriorWeights pw =
        e_step(sim.data, model.spec, model.survival, model.longitudinal, v, model.quadrature);
    for (std::size_t c = 0; c < pw.subjects.size(); ++c) {
      e_weights = std::max(e_weights, std::abs(pw.cells[c].sum() + pw.tail[c] - 1.0));
      ++n_weights;
    }

    const std::vector<Query> qs = draw_queries(sim, v, 100, rng());
    std::vector<double> er(qs.size()), ed(qs.size());
    parallel_for(qs.size(), ctx.workers, [&](std::size_t i) {
      const Query& q = qs[i];
      const RiskPrediction r = predict_risk(model, q.history, q.delta);
      er[i] = std::abs(r.risk.sum() + r.remainder - 1.0);
      const BiomarkerForecast f = predict_biomarker(model, q.history, q.biomarker, q.history.prediction_time + q.delta);
      const double step = f.values(1) - f.values(0);
      double area = 0.0;
      for (Eigen::Index k = 1; k < f.density.size(); ++k) area += 0.5 * step * (f.density(k - 1) + f.density(k));
      ed[i] = std::abs(area - 1.0);
    });
    e_risk = std::max(e_risk, *std::max_element(er.begin(), er.end()));
    e_density = std::max(e_density, *std::max_element(ed.begin(), ed.end()));
    n_risk += static_cast<int>(qs.size());
    n_density += static_cast<int>(qs.size());
  }

  for (; n_types < 1000; ++n_types) {
    const int J = 2 + n_types % 4, p = 1 + n_types % 3;
    EventTypeFit f;
    f.basis = n_types % 2 ? SplineBasis::natural_cubic({0.0, 5.0, 10.0, 20.0})
                          : SplineBasis::bspline(1 + n_types % 3, {0.0, 8.0, 20.0});
    f.coefficients = Eigen::MatrixXd(J - 1, f.basis.dimension() + p);
    for (Eigen::Index i = 0; i < f.coefficients.size(); ++i) f.coefficients.data()[i] = 2.0 * nd(rng);
    Eigen::VectorXd v(p);
    for (int k = 0; k < p; ++k) v(k) = 2.0 * nd(rng);
    const Eigen::VectorXd pr = f.probabilities(20.0 * uni(rng), v);
    e_types = std::max(e_types, std::abs(pr.sum() - 1.0));
  }

  const bool ok = e_weights <= 1e-12 && e_density <= 1e-6 && e_risk <= 1e-4 && e_types <= 1e-12;
  return {ok, fmt("max deviation from 1: posterior weights %.1e over %d subjects (1e-12), forecast density %.1e "
                  "over %d (1e-6), risk simplex %.1e over %d (1e-4), type probabilities %.1e over %d (1e-12)",
                  e_weights, n_weights, e_density, n_density, e_risk, n_risk, e_types, n_types)};
}

Outcome ascent(Context& ctx) {
  std::mt19937_64 rng(stream_seed(ctx.seed, 70));
  int ok = 0;
  double worst = 0.0;
  for (int f = 0; f < 20; ++f) {
    const Variant v = f % 2 ? Variant::TP : Variant::EX;
    const GeneratorConfig g = random_generator(v, 200 + 40 * (f % 5), rng);
    const CensoringCalibration cal = calibrate_censoring(g);
    const SimulatedCohort sim = simulate_cohort(g, cal);
    ModelConfig mc;
    mc.variant = v;
    if (v == Variant::TP) mc.tau_max = cal.tau_max;
    mc.em.reestimate_variance = f % 4 == 3;
    const LongitudinalSpec spec = make_spec(sim.data, mc);
    const SurvivalFit surv = fit_survival(sim.data, mc.survival);
    const LongitudinalFit cca = fit_cca(sim.data, spec, v, mc.lmm);
    const EmResult em = em_fit(sim.data, spec, surv, cca, v, mc.quadrature, mc.em, ctx.workers, true);
    double drop = 0.0;
    for (std::size_t k = 1; k < em.trace.size(); ++k) {
      drop = std::max(drop, em.trace[k - 1].objective - em.trace[k].objective);
    }
    worst = std::max(worst, drop);
    ok += drop <= 1e-8;
  }
  return {ok == 20, fmt("%d/20 fits with a non-decreasing objective (largest decrease %.1e, slack 1e-8)", ok, worst)};
}

Outcome robustness(Context& ctx) {
  const GeneratorConfig g = default_generator(1000, Variant::EX, stream_seed(ctx.seed, 80));
  const CensoringCalibration cal = calibrate_censoring(g);
  const SimulatedCohort sim = simulate_cohort(g, cal);
  ModelConfig coarse;
  ModelConfig fine = coarse;
  fine.quadrature.width = 0.5 * coarse.quadrature.width;
  fine.quadrature.prediction_width = 0.5 * coarse.quadrature.prediction_width;
  const FitResult a = fit_model(sim.data, coarse, FitMethod::EM, 0, ctx.workers);
  const FitResult b = fit_model(sim.data, fine, FitMethod::EM, 0, ctx.workers);
  const double coef = (longitudinal_coefficients(a.model.longitudinal) - longitudinal_coefficients(b.model.longitudinal))
                          .cwiseAbs()
                          .maxCoeff();

  const std::vector<Query> qs = draw_queries(sim, Variant::EX, 100, stream_seed(ctx.seed, 81));
  std::vector<double> dr(qs.size()), df(qs.size());
  parallel_for(qs.size(), ctx.workers, [&](std::size_t i) {
    const Query& q = qs[i];
    const RiskPrediction ra = predict_risk(a.model, q.history, q.delta), rb = predict_risk(b.model, q.history, q.delta);
    dr[i] = std::max((ra.risk - rb.risk).cwiseAbs().maxCoeff(), std::abs(ra.remainder - rb.remainder));
    const double t = q.history.prediction_time + q.delta;
    const BiomarkerForecast fa = predict_biomarker(a.model, q.history, q.biomarker, t);
    const BiomarkerForecast fb = predict_biomarker(b.model, q.history, q.biomarker, t);
    df[i] = std::abs(fa.mean - fb.mean);
  });
  const double risk = *std::max_element(dr.begin(), dr.end());
  const double forecast = *std::max_element(df.begin(), df.end());
  return {coef < 1e-3 && risk < 1e-3 && forecast < 1e-3,
          fmt("width 0.25 -> 0.125, EX n=1000: max coefficient change %.2e, risk change %.2e, forecast mean change "
              "%.2e over 100 queries (limit 1e-3)",
              coef, risk, forecast)};
}

// CLI determinism ------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& cli, const std::string& args, const fs::path& stdout_file) {
  const std::string cmd = cli + " " + args + " > " + stdout_file.string() + " 2> /dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism(Context& ctx) {
  const fs::path dir = fs::temp_directory_path() / ("crbjm_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "run.yaml") << "seed: 17\nsimulation:\n  n: 200\n  variant: tp\n  replicates: 3\n";
  {
    std::ofstream q(dir / "queries.csv");
    q << "query,id,kind,s,delta,t,biomarker\n";
    for (int i = 0; i < 200; ++i) {
      const std::string id = "S" + std::to_string(1 + (i * 13) % 200);
      const double s = 0.5 + 0.5 * (i % 4);
      if (i % 2 == 0) {
        q << i << ',' << id << ",risk," << s << ',' << 1 + i % 3 << ",,\n";
      } else {
        q << i << ',' << id << ",forecast," << s << ",," << s + 1.5 << ",y" << 1 + i % 3 << '\n';
      }
    }
  }
  const std::string cfg = "--config " + (dir / "run.yaml").string();

  // Every command runs on 1 and on 4 workers, twice each; `files` are its outputs.
  struct Command {
    std::string name, args;
    std::vector<std::string> files;
  };
  auto data = [&](int run) {
    const fs::path d = dir / ("sim" + std::to_string(run));
    return "--subjects " + (d / "subjects.csv").string() + " --longitudinal " + (d / "longitudinal.csv").string();
  };
  std::vector<std::string> mismatched;
  int commands = 0;
  const std::vector<std::pair<int, int>> runs{{1, 1}, {2, 4}, {3, 1}, {4, 4}};
  std::map<std::string, std::vector<std::string>> outputs;
  for (auto [run, workers] : runs) {
    const std::string r = std::to_string(run), w = " --workers " + std::to_string(workers);
    const fs::path o = dir / ("run" + r);
    fs::create_directories(o);
    const std::vector<Command> cmds{
        {"simulate", "simulate " + cfg + " --out " + (dir / ("sim" + r)).string() + w,
         {"../sim" + r + "/subjects.csv", "../sim" + r + "/longitudinal.csv", "../sim" + r + "/truth.csv"}},
        {"fit", "fit " + cfg + " " + data(run) + " --variant tp --out " + (o / "model.json").string() + w,
         {"model.json", "model.json.log.csv"}},
        {"predict",
         "predict --model " + (o / "model.json").string() + " " + data(run) + " --queries " +
             (dir / "queries.csv").string() + " --out " + (o / "pred.csv").string() + w,
         {"pred.csv"}},
        {"evaluate",
         "evaluate " + cfg + " " + data(run) + " --variant tp --folds 3 --out " + (o / "eval.csv").string() + w,
         {"eval.csv", "eval.csv.log.csv"}},
        {"bootstrap",
         "bootstrap " + cfg + " " + data(run) + " --variant tp --method cca --reps 4 --out " +
             (o / "boot.csv").string() + w,
         {"boot.csv"}},
        {"mc-study", "mc-study " + cfg + " --n 150 --out " + (o / "mc.csv").string() + w, {"mc.csv"}},
    };
    for (const auto& c : cmds) {
      const fs::path out = o / (c.name + ".stdout");
      const int code = run_cli(ctx.cli, c.args, out);
      std::string bytes = "exit " + std::to_string(code) + "\n" + slurp(out);
      for (const auto& f : c.files) bytes += "\n--- " + fs::path(f).filename().string() + "\n" + slurp(o / f);
      outputs[c.name].push_back(bytes);
      if (code != 0) mismatched.push_back(c.name + " (exit " + std::to_string(code) + ")");
    }
  }
  for (const auto& [name, v] : outputs) {
    ++commands;
    if (std::any_of(v.begin(), v.end(), [&](const std::string& b) { return b != v.front(); })) {
      mismatched.push_back(name);
    }
  }
  fs::remove_all(dir);
  std::string list;
  for (const auto& m : mismatched) list += (list.empty() ? "" : ", ") + m;
  return {mismatched.empty(), fmt("%d commands x {1, 4, 1, 4} workers: %s", commands,
                                  mismatched.empty() ? "all outputs byte-identical" : ("differ: " + list).c_str())};
}

Outcome runtime(Context& ctx) {
  const GeneratorConfig g = default_generator(1000, Variant::EX, stream_seed(ctx.seed, 100));
  const SimulatedCohort sim = simulate_cohort(g);
  CvOptions o;
  o.folds = 5;
  o.seed = ctx.seed;
  o.workers = 1;
  const auto t0 = std::chrono::steady_clock::now();
  const CvReport r = kfold_cv(sim.data, ModelConfig{}, FitMethod::EM, o);
  const double secs = seconds_since(t0);
  const auto failed = std::count_if(r.fold_errors.begin(), r.fold_errors.end(), [](const std::string& e) { return !e.empty(); });
  return {secs < 1200.0 && failed == 0,
          fmt("5-fold CV, EM, n=1000, M=3, 1 worker: %.1f s (limit 1200 s), %ld fold failures", secs,
              static_cast<long>(failed))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crbjm acceptance checks"};
  Context ctx;
  ctx.workers = std::max(1u, std::thread::hardware_concurrency());
  ctx.cli = CRBJM_CLI;
  std::vector<int> only, expect_fail;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--expect-fail", expect_fail, "criteria documented as failing")->delimiter(',');
  app.add_option("--workers", ctx.workers, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--seed", ctx.seed, "master seed");
  app.add_option("--cli", ctx.cli, "path of the crbjm executable");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria{
      {"consistency", consistency},       {"efficiency", efficiency},
      {"convergence", convergence},       {"oracle equivalence", oracle_equivalence},
      {"dynamic vs static", dominance},   {"normalization", normalization},
      {"EM ascent", ascent},              {"quadrature width", robustness},
      {"CLI determinism", determinism},   {"runtime", runtime},
  };
  const std::set<int> selected(only.begin(), only.end()), expected(expect_fail.begin(), expect_fail.end());
  std::set<int> failed;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) failed.insert(id);
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << o.detail << fmt("  [%.0f s]", seconds_since(t0)) << std::endl;
  }

  int unexpected = 0;
  for (int id : failed) {
    if (!expected.count(id)) {
      std::cout << "unexpected failure: criterion " << id << "\n";
      ++unexpected;
    }
  }
  for (int id : expected) {
    if ((selected.empty() || selected.count(id)) && !failed.count(id)) {
      std::cout << "criterion " << id << " is listed in --expect-fail but passed\n";
      ++unexpected;
    }
  }
  return unexpected == 0 ? 0 : 1;
}
