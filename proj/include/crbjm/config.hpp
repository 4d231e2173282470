#pragma once

#include "crbjm/data_model.hpp"
#include "crbjm/estimation.hpp"
#include "crbjm/evaluation.hpp"
#include "crbjm/simulation.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

namespace crbjm {

inline constexpr int kConfigVersion = 1;

struct DataConfig {
  std::filesystem::path subjects;      // resolved against the config file's directory
  std::filesystem::path longitudinal;
  Schema schema;
};

/// One declarative run file. Every section is optional; absent keys keep the
/// library defaults.
struct RunConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  int workers = 1;
  DataConfig data;
  ModelConfig model;
  FitMethod method = FitMethod::EM;
  CvOptions evaluation;
  int bootstrap_reps = 200;
  GeneratorConfig simulation;
  double history_scale = 1.0;
  int mc_replicates = 100;
};

/// Parses YAML text. Errors are ConfigError with "source:line: message".
/// Unknown keys are errors.
RunConfig parse_config(const std::string& text, const std::string& source = "<config>",
                       const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

/// The generator section of a config, truth written out in full.
void write_generator_config(const GeneratorConfig& config, double history_scale, std::ostream& out);

}  // namespace crbjm
