#include "crbjm/evaluation.hpp"

#include "crbjm/error.hpp"
#include "crbjm/parallel.hpp"
#include "crbjm/prediction.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_map>

namespace crbjm {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<double> type_risks(const ScoredCohort& cohort, int j) {
  std::vector<double> r;
  r.reserve(cohort.subjects.size());
  for (const auto& s : cohort.subjects) r.push_back(j == 0 ? s.risk.sum() : s.risk(j - 1));
  return r;
}

void check_cohort(const ScoredCohort& cohort, int j, std::size_t n_scores, bool allow_any) {
  if (j < (allow_any ? 0 : 1) || j > cohort.n_event_types) {
    throw Error(ErrorCode::EventTypeOutOfRange, "event type " + std::to_string(j) + " out of range");
  }
  if (n_scores != cohort.subjects.size()) throw Error(ErrorCode::InvalidArgument, "one score per subject needed");
  for (const auto& s : cohort.subjects) {
    if (!(s.observed_time > cohort.s)) {
      throw Error(ErrorCode::InvalidArgument, "scored subject is not at risk at s", s.id);
    }
  }
}

}  // namespace

CensoringKm::CensoringKm(std::span<const double> times, std::span<const int> event_types) {
  std::vector<std::size_t> order(times.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
  double g = 1.0;
  std::size_t at_risk = times.size();
  for (std::size_t k = 0; k < order.size();) {
    const double t = times[order[k]];
    std::size_t censored = 0, here = 0;
    while (k + here < order.size() && times[order[k + here]] == t) {
      censored += event_types[order[k + here]] == 0;
      ++here;
    }
    if (censored > 0) {
      g *= 1.0 - static_cast<double>(censored) / static_cast<double>(at_risk);
      times_.push_back(t);
      values_.push_back(g);
    }
    at_risk -= here;
    k += here;
  }
}

double CensoringKm::at(double t) const {
  const auto it = std::upper_bound(times_.begin(), times_.end(), t);
  return it == times_.begin() ? 1.0 : values_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

double CensoringKm::left_limit(double t) const {
  const auto it = std::lower_bound(times_.begin(), times_.end(), t);
  return it == times_.begin() ? 1.0 : values_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

Eigen::VectorXd ipcw_weights(const ScoredCohort& cohort) {
  std::vector<double> times;
  std::vector<int> types;
  for (const auto& s : cohort.subjects) {
    times.push_back(s.observed_time);
    types.push_back(s.event_type);
  }
  const CensoringKm km(times, types);
  const double end = cohort.s + cohort.delta;
  const double g_end = km.at(end);
  Eigen::VectorXd w(static_cast<Eigen::Index>(cohort.subjects.size()));
  for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
    const auto& s = cohort.subjects[i];
    double wi = 0.0;
    if (s.observed_time > end) {
      wi = g_end > 0.0 ? 1.0 / g_end : 0.0;
    } else if (s.event_type != 0) {
      const double g = km.left_limit(s.observed_time);
      wi = g > 0.0 ? 1.0 / g : 0.0;
    }
    w(static_cast<Eigen::Index>(i)) = wi;
  }
  return w;
}

double td_auc_cr(const ScoredCohort& cohort, int j) {
  const std::vector<double> r = type_risks(cohort, j);
  return td_auc_cr(cohort, j, r);
}

double td_auc_cr(const ScoredCohort& cohort, int j, std::span<const double> scores) {
  check_cohort(cohort, j, scores.size(), false);
  const Eigen::VectorXd w = ipcw_weights(cohort);
  const double end = cohort.s + cohort.delta;
  std::vector<std::pair<double, double>> cases, controls;  // (score, weight)
  for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
    const auto& s = cohort.subjects[i];
    const double wi = w(static_cast<Eigen::Index>(i));
    if (wi == 0.0) continue;
    if (s.observed_time <= end && s.event_type == j) {
      cases.push_back({scores[i], wi});
    } else {
      controls.push_back({scores[i], wi});
    }
  }
  if (cases.empty()) throw Error(ErrorCode::NoCases, "no cases of type " + std::to_string(j) + " in the window");
  if (controls.empty()) throw Error(ErrorCode::NoControls, "no controls in the window");
  double num = 0.0, den = 0.0;
  for (const auto& [sc, wc] : cases) {
    for (const auto& [sk, wk] : controls) {
      const double pair = wc * wk;
      den += pair;
      if (sc > sk) {
        num += pair;
      } else if (sc == sk) {
        num += 0.5 * pair;
      }
    }
  }
  return num / den;
}

double brier_cr(const ScoredCohort& cohort, int j) {
  const std::vector<double> r = type_risks(cohort, j);
  return brier_cr(cohort, j, r);
}

double brier_cr(const ScoredCohort& cohort, int j, std::span<const double> risks) {
  check_cohort(cohort, j, risks.size(), true);
  if (cohort.subjects.empty()) throw Error(ErrorCode::NoComparableSubjects, "no subjects at risk");
  const Eigen::VectorXd w = ipcw_weights(cohort);
  const double end = cohort.s + cohort.delta;
  double total = 0.0;
  for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
    const auto& s = cohort.subjects[i];
    const bool event = s.observed_time <= end && s.event_type != 0 && (j == 0 || s.event_type == j);
    const double e = (event ? 1.0 : 0.0) - risks[i];
    total += w(static_cast<Eigen::Index>(i)) * e * e;
  }
  return total / static_cast<double>(cohort.subjects.size());
}

std::optional<Measurement> comparison_measurement(const std::vector<Measurement>& series, double s, double delta) {
  const double end = s + delta;
  std::optional<Measurement> best;
  for (const auto& m : series) {
    if (m.time > s && m.time <= end && (!best || m.time >= best->time)) best = m;
  }
  return best;
}

BiomarkerAccuracy biomarker_accuracy(const ScoredCohort& cohort, int biomarker) {
  BiomarkerAccuracy acc;
  double sse = 0.0;
  int within30 = 0, within50 = 0;
  for (const auto& s : cohort.subjects) {
    if (biomarker < 0 || biomarker >= static_cast<int>(s.measurements.size())) {
      throw Error(ErrorCode::InvalidArgument, "biomarker index out of range", s.id);
    }
    const auto obs = comparison_measurement(s.measurements[static_cast<std::size_t>(biomarker)], cohort.s,
                                            cohort.delta);
    if (!obs || obs->time >= s.observed_time) continue;
    if (biomarker >= s.biomarker_prediction.size()) continue;
    const double pred = s.biomarker_prediction(biomarker);
    if (std::isnan(pred)) continue;
    const double err = std::abs(pred - obs->value);
    sse += err * err;
    within30 += err <= 0.3 * std::abs(obs->value);
    within50 += err <= 0.5 * std::abs(obs->value);
    ++acc.n;
  }
  if (acc.n == 0) throw Error(ErrorCode::NoComparableSubjects, "no subject has a measurement in the window");
  acc.rmse = std::sqrt(sse / acc.n);
  acc.p30 = static_cast<double>(within30) / acc.n;
  acc.p50 = static_cast<double>(within50) / acc.n;
  return acc;
}

// ---------------------------------------------------------------------------

std::vector<int> stratified_folds(const Dataset& data, int k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorCode::InvalidArgument, "cross-validation needs at least 2 folds");
  if (static_cast<std::size_t>(k) > data.size()) throw Error(ErrorCode::InvalidArgument, "more folds than subjects");
  std::mt19937_64 rng(stream_seed(seed, 0));
  std::vector<int> fold(data.size(), -1);
  std::size_t position = 0;
  for (int stratum = 0; stratum <= data.n_event_types(); ++stratum) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i].event_type == stratum) members.push_back(i);
    }
    std::shuffle(members.begin(), members.end(), rng);
    for (auto i : members) fold[i] = static_cast<int>(position++ % static_cast<std::size_t>(k));
  }
  return fold;
}

ScoredCohort score_cohort(const CrBjmModel& model, const Dataset& data, std::span<const std::size_t> subjects,
                          double s, double delta) {
  ScoredCohort cohort;
  cohort.s = s;
  cohort.delta = delta;
  cohort.n_event_types = data.n_event_types();
  for (auto i : subjects) {
    const Subject& subj = data[i];
    if (!(subj.observed_time > s)) continue;
    ScoredSubject sc;
    sc.id = subj.id;
    sc.observed_time = subj.observed_time;
    sc.event_type = subj.event_type;
    sc.measurements = subj.measurements;
    const Predictor pred(model, History::from_subject(subj, s));
    sc.risk = pred.risk(delta).risk;
    sc.biomarker_prediction = Eigen::VectorXd::Constant(data.n_biomarkers(), kNaN);
    for (int m = 0; m < data.n_biomarkers(); ++m) {
      const auto obs = comparison_measurement(subj.measurements[static_cast<std::size_t>(m)], s, delta);
      if (!obs) continue;
      try {
        sc.biomarker_prediction(m) = pred.forecast(m, obs->time).mean;
      } catch (const Error&) {
        // left as NaN; the subject drops out of this biomarker's accuracy
      }
    }
    cohort.subjects.push_back(std::move(sc));
  }
  return cohort;
}

CvReport kfold_cv(const Dataset& data, const ModelConfig& config, FitMethod method, const CvOptions& options) {
  const int k = options.folds;
  CvReport report;
  report.folds = k;
  report.delta = options.delta;
  report.fold_of = stratified_folds(data, k, options.seed);
  report.fold_errors.assign(static_cast<std::size_t>(k), "");
  report.fit_logs.assign(static_cast<std::size_t>(k), {});

  // Training folds share the full cohort's tau_max so every fold model is on
  // the same footing.
  ModelConfig fold_config = config;
  fold_config.tau_max = config.tau_max.value_or(data.tau_max());

  const std::size_t n_land = options.landmarks.size();
  // cohorts[fold][landmark]
  std::vector<std::vector<std::optional<ScoredCohort>>> cohorts(static_cast<std::size_t>(k),
                                                                std::vector<std::optional<ScoredCohort>>(n_land));
  std::vector<std::vector<std::string>> land_errors(static_cast<std::size_t>(k), std::vector<std::string>(n_land));
  parallel_for(static_cast<std::size_t>(k), options.workers, [&](std::size_t f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < data.size(); ++i) {
      (report.fold_of[i] == static_cast<int>(f) ? test : train).push_back(i);
    }
    FitResult fit;
    try {
      fit = fit_model(data.subset(train), fold_config, method, options.seed, 1);
    } catch (const std::exception& e) {
      report.fold_errors[f] = e.what();
      return;
    }
    report.fit_logs[f] = fit.trace;
    for (std::size_t l = 0; l < n_land; ++l) {
      try {
        cohorts[f][l] = score_cohort(fit.model, data, test, options.landmarks[l], options.delta);
      } catch (const std::exception& e) {
        land_errors[f][l] = e.what();
      }
    }
  });

  int failed = 0;
  for (int f = 0; f < k; ++f) failed += !report.fold_errors[static_cast<std::size_t>(f)].empty();
  if (failed > 1) {
    std::string first;
    for (const auto& e : report.fold_errors) {
      if (!e.empty()) {
        first = e;
        break;
      }
    }
    throw Error(ErrorCode::FoldFitFailure, std::to_string(failed) + " of " + std::to_string(k) +
                                               " folds failed to fit; first: " + first);
  }

  const int J = data.n_event_types(), M = data.n_biomarkers();
  for (std::size_t l = 0; l < n_land; ++l) {
    CvLandmark row;
    row.s = options.landmarks[l];
    ScoredCohort pooled;
    pooled.s = row.s;
    pooled.delta = options.delta;
    pooled.n_event_types = J;
    for (int f = 0; f < k; ++f) {
      const auto& c = cohorts[static_cast<std::size_t>(f)][l];
      if (c) {
        pooled.subjects.insert(pooled.subjects.end(), c->subjects.begin(), c->subjects.end());
      } else if (report.fold_errors[static_cast<std::size_t>(f)].empty()) {
        row.notes.push_back("fold " + std::to_string(f + 1) + ": " + land_errors[static_cast<std::size_t>(f)][l]);
      }
    }
    // Pool in subject order so the report does not depend on fold layout.
    std::vector<std::size_t> order(pooled.subjects.size());
    std::iota(order.begin(), order.end(), 0);
    std::unordered_map<std::string, std::size_t> rank;
    for (std::size_t i = 0; i < data.size(); ++i) rank[data[i].id] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return rank[pooled.subjects[a].id] < rank[pooled.subjects[b].id]; });
    std::vector<ScoredSubject> sorted;
    for (auto i : order) sorted.push_back(std::move(pooled.subjects[i]));
    pooled.subjects = std::move(sorted);

    row.n_at_risk = static_cast<int>(pooled.subjects.size());
    row.auc = Eigen::VectorXd::Constant(J, kNaN);
    row.brier = Eigen::VectorXd::Constant(J, kNaN);
    row.rmse = Eigen::VectorXd::Constant(M, kNaN);
    row.p30 = Eigen::VectorXd::Constant(M, kNaN);
    row.p50 = Eigen::VectorXd::Constant(M, kNaN);
    for (int j = 1; j <= J; ++j) {
      try {
        row.auc(j - 1) = td_auc_cr(pooled, j);
      } catch (const Error& e) {
        row.notes.push_back("auc type " + std::to_string(j) + ": " + e.what());
      }
      try {
        row.brier(j - 1) = brier_cr(pooled, j);
      } catch (const Error& e) {
        row.notes.push_back("brier type " + std::to_string(j) + ": " + e.what());
      }
    }
    for (int m = 0; m < M; ++m) {
      try {
        const BiomarkerAccuracy a = biomarker_accuracy(pooled, m);
        row.rmse(m) = a.rmse;
        row.p30(m) = a.p30;
        row.p50(m) = a.p50;
      } catch (const Error& e) {
        row.notes.push_back("biomarker " + data.biomarker_names()[static_cast<std::size_t>(m)] + ": " + e.what());
      }
    }
    report.landmarks.push_back(std::move(row));
  }
  return report;
}

}  // namespace crbjm
