#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "dps/metrics.hpp"
#include "dps/model.hpp"

namespace dps {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr_start = 1e-4;
  double lr_end = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 50;
  int batch_size = 4;
  std::uint64_t seed = 1;
  NetConfig net;
  int boundary_dilation_radius = 1;
  double synth_difficulty = 0.6;
  std::string emeasure_threshold = "adaptive";

  void validate() const {
    if (lr_end > lr_start) throw ConfigError("config: lr_end must not exceed lr_start");
    if (batch_size < 1) throw ConfigError("config: batch_size must be at least 1");
    if (epochs < 0) throw ConfigError("config: epochs must be non-negative");
    if (boundary_dilation_radius < 0) throw ConfigError("config: boundary_dilation_radius must be non-negative");
    if (synth_difficulty < 0 || synth_difficulty > 1)
      throw ConfigError("config: synth_difficulty must lie in [0,1]");
    emeasure_threshold_from_string(emeasure_threshold);
    try {
      net.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

inline std::int64_t parse_int(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const long long d = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

inline std::string fmt_double(double d) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", d);
  return buf;
}

}  // namespace config_detail

/// Flat `key = value` text with '#' comments. Unknown keys are rejected.
inline TrainConfig parse_config_text(const std::string& text) {
  using namespace config_detail;
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "lr_start") cfg.lr_start = parse_double(value, key);
    else if (key == "lr_end") cfg.lr_end = parse_double(value, key);
    else if (key == "adam_beta1") cfg.adam_beta1 = parse_double(value, key);
    else if (key == "adam_beta2") cfg.adam_beta2 = parse_double(value, key);
    else if (key == "adam_eps") cfg.adam_eps = parse_double(value, key);
    else if (key == "epochs") cfg.epochs = static_cast<int>(parse_int(value, key));
    else if (key == "batch_size") cfg.batch_size = static_cast<int>(parse_int(value, key));
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(value, key));
    else if (key == "input_h") cfg.net.input_h = static_cast<int>(parse_int(value, key));
    else if (key == "input_w") cfg.net.input_w = static_cast<int>(parse_int(value, key));
    else if (key == "channels") cfg.net.channels = static_cast<int>(parse_int(value, key));
    else if (key == "patches_per_side") cfg.net.patches = static_cast<int>(parse_int(value, key));
    else if (key == "ref_points_per_side") cfg.net.refpoints = static_cast<int>(parse_int(value, key));
    else if (key == "offset_bound") cfg.net.offset_bound = parse_double(value, key);
    else if (key == "heads") cfg.net.heads = static_cast<int>(parse_int(value, key));
    else if (key == "gwap_normalized") cfg.net.gwap_normalized = parse_bool(value, key);
    else if (key == "use_mffm") cfg.net.use_mffm = parse_bool(value, key);
    else if (key == "use_dps") cfg.net.use_dps = parse_bool(value, key);
    else if (key == "use_boundary_decoder") cfg.net.use_boundary = parse_bool(value, key);
    else if (key == "use_bfm") cfg.net.use_bfm = parse_bool(value, key);
    else if (key == "boundary_dilation_radius")
      cfg.boundary_dilation_radius = static_cast<int>(parse_int(value, key));
    else if (key == "synth_difficulty") cfg.synth_difficulty = parse_double(value, key);
    else if (key == "emeasure_threshold") cfg.emeasure_threshold = value;
    else if (key == "encoder_channels") {
      std::istringstream cs(value);
      std::string tok;
      int i = 0;
      while (std::getline(cs, tok, ',')) {
        if (i >= 4) throw ConfigError("config: encoder_channels expects 4 comma-separated values");
        cfg.net.stage_channels[static_cast<std::size_t>(i++)] =
            static_cast<int>(parse_int(trim(tok), key));
      }
      if (i != 4) throw ConfigError("config: encoder_channels expects 4 comma-separated values");
    } else {
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

inline std::string serialize_config(const TrainConfig& cfg) {
  using config_detail::fmt_double;
  std::ostringstream os;
  os << "lr_start = " << fmt_double(cfg.lr_start) << "\n";
  os << "lr_end = " << fmt_double(cfg.lr_end) << "\n";
  os << "adam_beta1 = " << fmt_double(cfg.adam_beta1) << "\n";
  os << "adam_beta2 = " << fmt_double(cfg.adam_beta2) << "\n";
  os << "adam_eps = " << fmt_double(cfg.adam_eps) << "\n";
  os << "epochs = " << cfg.epochs << "\n";
  os << "batch_size = " << cfg.batch_size << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "input_h = " << cfg.net.input_h << "\n";
  os << "input_w = " << cfg.net.input_w << "\n";
  os << "channels = " << cfg.net.channels << "\n";
  os << "patches_per_side = " << cfg.net.patches << "\n";
  os << "ref_points_per_side = " << cfg.net.refpoints << "\n";
  os << "offset_bound = " << fmt_double(cfg.net.offset_bound) << "\n";
  os << "heads = " << cfg.net.heads << "\n";
  os << "encoder_channels = " << cfg.net.stage_channels[0] << "," << cfg.net.stage_channels[1]
     << "," << cfg.net.stage_channels[2] << "," << cfg.net.stage_channels[3] << "\n";
  os << "gwap_normalized = " << (cfg.net.gwap_normalized ? "true" : "false") << "\n";
  os << "use_mffm = " << (cfg.net.use_mffm ? "true" : "false") << "\n";
  os << "use_dps = " << (cfg.net.use_dps ? "true" : "false") << "\n";
  os << "use_boundary_decoder = " << (cfg.net.use_boundary ? "true" : "false") << "\n";
  os << "use_bfm = " << (cfg.net.use_bfm ? "true" : "false") << "\n";
  os << "boundary_dilation_radius = " << cfg.boundary_dilation_radius << "\n";
  os << "synth_difficulty = " << fmt_double(cfg.synth_difficulty) << "\n";
  os << "emeasure_threshold = " << cfg.emeasure_threshold << "\n";
  return os.str();
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path + ": cannot open config file");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace dps
