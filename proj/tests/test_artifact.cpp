#include <doctest.h>

#include "crbjm/artifact.hpp"
#include "crbjm/error.hpp"
#include "crbjm/prediction.hpp"
#include "crbjm/simulation.hpp"

#include <string>

using namespace crbjm;

namespace {

ErrorCode code_of(const std::string& text) {
  try {
    deserialize_model(text);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::InvalidArgument;
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  REQUIRE(at != std::string::npos);
  return s.replace(at, from.size(), to);
}

}  // namespace

TEST_CASE("load then save is byte-identical and predicts identically") {
  for (Variant variant : {Variant::EX, Variant::TP}) {
    for (TimeModel tm : {TimeModel::Weibull, TimeModel::Cox}) {
      CAPTURE(to_string(variant));
      const auto sim = simulate_cohort(default_generator(200, variant, 3));
      ModelConfig cfg;
      cfg.variant = variant;
      cfg.survival.time_model = tm;
      const auto fit = fit_model(sim.data, cfg, FitMethod::EM, 17);
      const std::string text = serialize_model(fit.model);
      const CrBjmModel back = deserialize_model(text);
      CHECK(serialize_model(back) == text);
      CHECK(back.provenance.seed == 17);
      CHECK(back.provenance.dataset_hash == sim.data.content_hash());

      const History h = History::from_subject(sim.data[0], 1.0);
      const auto a = predict_risk(fit.model, h, 2.0), b = predict_risk(back, h, 2.0);
      CHECK((a.risk - b.risk).cwiseAbs().maxCoeff() == 0.0);
      CHECK(predict_biomarker(fit.model, h, 1, 2.5).mean == predict_biomarker(back, h, 1, 2.5).mean);
    }
  }
}

TEST_CASE("refitting with the same seed gives the same artifact bytes") {
  const auto sim = simulate_cohort(default_generator(150, Variant::EX, 4));
  ModelConfig cfg;
  CHECK(serialize_model(fit_model(sim.data, cfg, FitMethod::EM, 1).model) ==
        serialize_model(fit_model(sim.data, cfg, FitMethod::EM, 1, 2).model));
}

TEST_CASE("non-finite values survive the round trip") {
  const auto sim = simulate_cohort(default_generator(120, Variant::EX, 5));
  auto model = fit_model(sim.data, ModelConfig{}, FitMethod::CCA).model;
  model.provenance.final_change = INFINITY;
  const auto text = serialize_model(model);
  CHECK(std::isinf(deserialize_model(text).provenance.final_change));
  CHECK(serialize_model(deserialize_model(text)) == text);
}

TEST_CASE("foreign or damaged artifacts are refused") {
  const auto sim = simulate_cohort(default_generator(120, Variant::EX, 6));
  const std::string text = serialize_model(fit_model(sim.data, ModelConfig{}, FitMethod::CCA).model);

  CHECK(code_of(replace(text, "\"version\": 1", "\"version\": 2")) == ErrorCode::VersionMismatch);
  CHECK(code_of(replace(text, "\"crbjm-model\"", "\"other\"")) == ErrorCode::VersionMismatch);
  CHECK(code_of("{\"a\": 1}") == ErrorCode::VersionMismatch);
  CHECK(code_of(text.substr(0, text.size() / 2)) == ErrorCode::ParseError);
  CHECK(code_of(replace(text, "\"n_biomarkers\": 3", "\"n_biomarkers\": 2")) == ErrorCode::ParseError);
  CHECK(code_of(replace(text, "\"variant\": \"ex\"", "\"variant\": \"zz\"")) != ErrorCode::VersionMismatch);
}
