#include "guardfs/config.hpp"

#include "guardfs/overlay.hpp"
#include "guardfs/textio.hpp"

namespace guardfs::config {

namespace fs = std::filesystem;

Config parse(const std::map<std::string, std::string>& values, const fs::path& base) {
  Config c;
  auto path = [&](const std::string& v) {
    fs::path p(v);
    return (p.is_absolute() ? p : base / p).lexically_normal();
  };
  auto number = [](const std::string& key, const std::string& v) {
    try {
      return textio::parse_double(v);
    } catch (const std::exception&) {
      throw overlay::ConfigError("config key '" + key + "': not a number: '" + v + "'");
    }
  };
  auto boolean = [](const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw overlay::ConfigError("config key '" + key + "': not a boolean: '" + v + "'");
  };
  for (const auto& [key, value] : values) {
    if (key == "overlay_root") c.overlay_root = path(value);
    else if (key == "underlay_root") c.underlay_root = path(value);
    else if (key == "mode") {
      try {
        defense::parse_defense_mode(value);
      } catch (const std::invalid_argument& e) {
        throw overlay::ConfigError("config key 'mode': " + std::string(e.what()));
      }
      c.mode = value;
    } else if (key == "window") {
      const double w = number(key, value);
      if (w != int(w) || w <= 0) throw overlay::ConfigError("config key 'window' must be a positive integer");
      c.window = int(w);
    } else if (key == "verdict_channel") c.verdict_channel = value;
    else if (key == "fail_closed") c.fail_closed = boolean(key, value);
    else if (key == "model") c.model = path(value);
    else if (key == "threshold") c.threshold = number(key, value);
    else if (key == "event_log") c.event_log = path(value);
    else if (key == "audit_log") c.audit_log = path(value);
    else if (key == "feature_csv") c.feature_csv = path(value);
    else if (key == "verdict_log") c.verdict_log = path(value);
    else if (key == "delta") c.delta = number(key, value);
    else if (key == "epsilon") c.epsilon = number(key, value);
    else if (key == "beta") c.beta = number(key, value);
    else if (key == "corpus") c.corpus = path(value);
    else if (key == "work_dir") c.work_dir = path(value);
    else if (key == "cap_s") c.cap_s = number(key, value);
    else throw overlay::ConfigError("unknown config key '" + key + "'");
  }
  return c;
}

Config load(const fs::path& path) {
  std::map<std::string, std::string> values;
  try {
    values = textio::read_key_values(path);
  } catch (const FormatError& e) {
    throw overlay::ConfigError(e.what());
  }
  return parse(values, fs::absolute(path).parent_path());
}

}  // namespace guardfs::config
