#pragma once

#include <fstream>
#include <map>
#include <sstream>

#include "attnsteer/steering.hpp"

namespace attnsteer {

// Flat `key = value` config text. '#' starts a comment, blank lines are
// skipped, keys may not repeat, and every key must be consumed by the
// receiving struct; an unknown key is an error rather than a silent no-op.

inline std::map<std::string, std::string> parse_flat_config(const std::string& text) {
  auto trim = [](std::string s) {
    size_t b = s.find_first_not_of(" \t\r");
    size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    size_t eq = t.find('=');
    require(eq != std::string::npos,
            "config line " + std::to_string(lineno) + ": expected key = value, got \"" +
                t + "\"");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    require(!key.empty(), "config line " + std::to_string(lineno) + ": empty key");
    require(!kv.count(key),
            "config line " + std::to_string(lineno) + ": duplicate key \"" + key + "\"");
    kv[key] = value;
  }
  return kv;
}

inline std::map<std::string, std::string> parse_flat_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_flat_config(buf.str());
}

namespace detail {

inline double config_num(const std::string& key, const std::string& value) {
  size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == value.size(),
          "config key " + key + ": \"" + value + "\" is not a number");
  return v;
}

inline int config_int(const std::string& key, const std::string& value) {
  double v = config_num(key, value);
  int i = static_cast<int>(v);
  require(static_cast<double>(i) == v, "config key " + key + ": \"" + value +
                                           "\" is not an integer");
  return i;
}

inline bool config_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw std::invalid_argument("config key " + key + ": \"" + value +
                              "\" is not a boolean (true/false/1/0)");
}

}  // namespace detail

/// Overlay parsed keys onto a starting config. Consumes every recognized key
/// and then rejects leftovers by name.
inline SteeringConfig apply_steering_config(std::map<std::string, std::string> kv,
                                            SteeringConfig cfg) {
  auto take = [&](const char* key, auto&& apply) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    apply(it->first, it->second);
    kv.erase(it);
  };
  using detail::config_bool;
  using detail::config_int;
  using detail::config_num;
  take("T", [&](const std::string& k, const std::string& v) { cfg.T = config_int(k, v); });
  take("alpha",
       [&](const std::string& k, const std::string& v) { cfg.alpha = config_num(k, v); });
  take("beta",
       [&](const std::string& k, const std::string& v) { cfg.beta = config_num(k, v); });
  take("lr", [&](const std::string& k, const std::string& v) { cfg.lr = config_num(k, v); });
  take("beta1",
       [&](const std::string& k, const std::string& v) { cfg.beta1 = config_num(k, v); });
  take("beta2",
       [&](const std::string& k, const std::string& v) { cfg.beta2 = config_num(k, v); });
  take("epsilon",
       [&](const std::string& k, const std::string& v) { cfg.epsilon = config_num(k, v); });
  take("gamma",
       [&](const std::string& k, const std::string& v) { cfg.gamma = config_num(k, v); });
  take("sigma",
       [&](const std::string& k, const std::string& v) { cfg.sigma = config_num(k, v); });
  take("normalized_weights", [&](const std::string& k, const std::string& v) {
    cfg.normalized_weights = config_bool(k, v);
  });
  take("early_stop", [&](const std::string& k, const std::string& v) {
    cfg.early_stop.enabled = config_bool(k, v);
  });
  take("energy_threshold", [&](const std::string& k, const std::string& v) {
    cfg.early_stop.energy_threshold = config_num(k, v);
  });
  take("min_improvement", [&](const std::string& k, const std::string& v) {
    cfg.early_stop.min_improvement = config_num(k, v);
  });
  take("energy_mode", [&](const std::string& k, const std::string& v) {
    if (v == "hard") cfg.energy_mode = EnergyMode::Hard;
    else if (v == "soft") cfg.energy_mode = EnergyMode::Soft;
    else if (v != "auto")
      throw std::invalid_argument("config key " + k + ": expected hard, soft, or auto");
  });
  take("aggregation", [&](const std::string& k, const std::string& v) {
    if (v == "context") cfg.aggregation.mode = AggregationMode::ContextToken;
    else if (v == "answer") cfg.aggregation.mode = AggregationMode::AnswerStart;
    else
      throw std::invalid_argument("config key " + k + ": expected context or answer");
  });
  take("layer_lo", [&](const std::string& k, const std::string& v) {
    cfg.aggregation.layer_lo = config_int(k, v);
  });
  take("layer_hi", [&](const std::string& k, const std::string& v) {
    cfg.aggregation.layer_hi = config_int(k, v);
  });
  if (!kv.empty())
    throw std::invalid_argument("unknown config key \"" + kv.begin()->first + "\"");
  cfg.validate();
  return cfg;
}

}  // namespace attnsteer
