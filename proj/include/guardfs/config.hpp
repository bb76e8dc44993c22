#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "guardfs/defense.hpp"

namespace guardfs::config {

/// Flat `key=value` file. Unknown keys are rejected; relative paths are
/// resolved against the file's directory.
struct Config {
  std::optional<std::filesystem::path> overlay_root;
  std::optional<std::filesystem::path> underlay_root;
  std::optional<std::string> mode;
  std::optional<int> window;
  std::optional<std::string> verdict_channel;
  std::optional<bool> fail_closed;
  std::optional<std::filesystem::path> model;
  std::optional<double> threshold;
  std::optional<std::filesystem::path> event_log;
  std::optional<std::filesystem::path> audit_log;
  std::optional<std::filesystem::path> feature_csv;
  std::optional<std::filesystem::path> verdict_log;
  // Throughput model defaults, bytes per second.
  std::optional<double> delta;
  std::optional<double> epsilon;
  std::optional<double> beta;
  // Experiment defaults.
  std::optional<std::filesystem::path> corpus;
  std::optional<std::filesystem::path> work_dir;
  std::optional<double> cap_s;
};

/// Throws ConfigError (std::invalid_argument) on unknown keys or bad values.
Config load(const std::filesystem::path& path);
Config parse(const std::map<std::string, std::string>& values, const std::filesystem::path& base);

}  // namespace guardfs::config
