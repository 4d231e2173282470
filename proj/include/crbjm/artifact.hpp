#pragma once

#include "crbjm/estimation.hpp"

#include <filesystem>
#include <string>

namespace crbjm {

inline constexpr int kArtifactVersion = 1;

/// Canonical JSON text of a fitted model: fixed key order with the format and
/// version first, shortest round-trip doubles, so deserialize then serialize
/// reproduces the input bytes.
std::string serialize_model(const CrBjmModel& model);

/// Throws VersionMismatch for another format or version, ParseError for
/// malformed content.
CrBjmModel deserialize_model(const std::string& text);

CrBjmModel load_model(const std::filesystem::path& path);

}  // namespace crbjm
