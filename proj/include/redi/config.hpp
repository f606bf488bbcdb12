#pragma once

// Flat `key = value` run configuration shared by every CLI subcommand.
// Values come from an optional config file first and command-line
// overrides second (overrides win); unknown keys are rejected; the
// fully-resolved echo reparses to the identical configuration.

#include "redi/inference.hpp"

#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace redi {

struct RunConfig {
  // Schedule / grid.
  double beta0 = 0.1;
  double beta1 = 20.0;
  int n_steps = 50;
  double t_floor = 1e-3;
  // World: "default" or a path to a mixture JSON file.
  std::string mixture = "default";
  // Pipeline.
  std::string method = "euler";
  double w_g = 1.0;
  int k_step = 40;
  int v_step = 20;
  int h = 2;
  double max_weight_l1 = 10.0;
  double trust_factor = 10.0;
  bool allow_guidance_mismatch = false;
  // Run plumbing.
  int dataset_size = 8000;
  std::uint64_t seed = 12345;
  std::string out = "out";
  int threads = 1;
  std::string kb;  // KB path for consumers; empty = <out>/kb.redikb
  // sample
  int count = 100;
  bool no_retrieval = false;
  bool adapted = false;
  int style = -1;  // -1 = style-free conditions
  // eval
  int n_eval = 300;
  // ablate
  std::string kind = "n_neighbors";
  std::string values = "1,2,3";
  int n_queries = 300;
  // bound-check
  std::string epsilons = "1e-4,1e-3,1e-2";
  int n_pairs = 100;
  int ref_steps = 100000;
  int n_probes = 256;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': expected a number, got '" +
                          value + "'");
  }
}

inline long long parse_ll(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key +
                          "': expected an integer, got '" + value + "'");
  }
}

inline int parse_int(const std::string& key, const std::string& value) {
  long long v = parse_ll(key, value);
  if (v < -2147483648LL || v > 2147483647LL)
    throw ValidationError("config key '" + key + "': integer out of range");
  return static_cast<int>(v);
}

inline std::uint64_t parse_u64(const std::string& key,
                               const std::string& value) {
  try {
    std::size_t pos = 0;
    if (!value.empty() && value[0] == '-') throw std::invalid_argument("");
    std::uint64_t v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key +
                          "': expected an unsigned integer, got '" + value +
                          "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ValidationError("config key '" + key +
                        "': expected true/false, got '" + value + "'");
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Assign one key. Unknown keys are rejected here, which covers both config
// files and command-line overrides.
inline void apply_config_kv(RunConfig& cfg, const std::string& key,
                            const std::string& value) {
  using namespace detail;
  if (key == "beta0") cfg.beta0 = parse_double(key, value);
  else if (key == "beta1") cfg.beta1 = parse_double(key, value);
  else if (key == "n_steps") cfg.n_steps = parse_int(key, value);
  else if (key == "t_floor") cfg.t_floor = parse_double(key, value);
  else if (key == "mixture") cfg.mixture = value;
  else if (key == "method") cfg.method = value;
  else if (key == "w_g") cfg.w_g = parse_double(key, value);
  else if (key == "k_step") cfg.k_step = parse_int(key, value);
  else if (key == "v_step") cfg.v_step = parse_int(key, value);
  else if (key == "h") cfg.h = parse_int(key, value);
  else if (key == "max_weight_l1") cfg.max_weight_l1 = parse_double(key, value);
  else if (key == "trust_factor") cfg.trust_factor = parse_double(key, value);
  else if (key == "allow_guidance_mismatch")
    cfg.allow_guidance_mismatch = parse_bool(key, value);
  else if (key == "dataset_size") cfg.dataset_size = parse_int(key, value);
  else if (key == "seed") cfg.seed = parse_u64(key, value);
  else if (key == "out") cfg.out = value;
  else if (key == "threads") cfg.threads = parse_int(key, value);
  else if (key == "kb") cfg.kb = value;
  else if (key == "count") cfg.count = parse_int(key, value);
  else if (key == "no_retrieval") cfg.no_retrieval = parse_bool(key, value);
  else if (key == "adapted") cfg.adapted = parse_bool(key, value);
  else if (key == "style") cfg.style = parse_int(key, value);
  else if (key == "n_eval") cfg.n_eval = parse_int(key, value);
  else if (key == "kind") cfg.kind = value;
  else if (key == "values") cfg.values = value;
  else if (key == "n_queries") cfg.n_queries = parse_int(key, value);
  else if (key == "epsilons") cfg.epsilons = value;
  else if (key == "n_pairs") cfg.n_pairs = parse_int(key, value);
  else if (key == "ref_steps") cfg.ref_steps = parse_int(key, value);
  else if (key == "n_probes") cfg.n_probes = parse_int(key, value);
  else throw ValidationError("unknown config key '" + key + "'");
}

// Parse a flat config file body: one `key = value` per line, '#' comments,
// blank lines ignored. Duplicate keys are rejected (a silent last-wins
// would hide typos in hand-edited files).
inline std::vector<std::pair<std::string, std::string>> parse_config_text(
    const std::string& text) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::size_t start = 0;
  int line_no = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    std::string line = text.substr(
        start, end == std::string::npos ? std::string::npos : end - start);
    ++line_no;
    start = end == std::string::npos ? text.size() + 1 : end + 1;

    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(line_no) +
                            ": expected 'key = value'");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw ValidationError("config line " + std::to_string(line_no) +
                            ": empty key");
    for (const auto& [k, v] : kv)
      if (k == key)
        throw ValidationError("duplicate config key '" + key + "'");
    kv.push_back({key, value});
  }
  return kv;
}

// Comma-separated numeric lists ("1e-4,1e-3" / "1,2,3").
inline std::vector<double> parse_double_list(const std::string& key,
                                             const std::string& s) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t comma = s.find(',', start);
    std::string item = detail::trim(
        s.substr(start, comma == std::string::npos ? std::string::npos
                                                   : comma - start));
    if (!item.empty()) out.push_back(detail::parse_double(key, item));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty())
    throw ValidationError("config key '" + key + "': empty list");
  return out;
}

inline std::vector<int> parse_int_list(const std::string& key,
                                       const std::string& s) {
  std::vector<int> out;
  for (double v : parse_double_list(key, s)) {
    int i = static_cast<int>(v);
    if (static_cast<double>(i) != v)
      throw ValidationError("config key '" + key + "': expected integers");
    out.push_back(i);
  }
  return out;
}

// The analysis header owns the ablation-kind registry; keep the config
// dependency one-way by validating against a name-list mirror.
inline void check_ablation_kind_name(const std::string& name) {
  for (const char* k : {"kb_size", "kv_gap", "k_position", "n_neighbors"})
    if (name == k) return;
  throw ValidationError("config key 'kind': unknown ablation kind '" + name +
                        "'");
}

// Clamp and cross-validate after all sources are merged. Field names
// appear in every message so `exit 2` diagnostics point at the key.
inline void finalize_run_config(RunConfig& cfg, bool* clamped_threads = nullptr) {
  if (clamped_threads) *clamped_threads = false;
  if (cfg.threads < 1)
    throw ValidationError("config key 'threads': must be >= 1");
  if (cfg.threads > 1) {
    cfg.threads = 1;  // single-core runtime; interface kept stable
    if (clamped_threads) *clamped_threads = true;
  }

  Schedule sched{cfg.beta0, cfg.beta1, 1.0};
  try {
    sched.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config keys 'beta0'/'beta1': ") +
                          e.what());
  }
  if (!(cfg.t_floor > 0.0) || !(cfg.t_floor < 1.0))
    throw ValidationError("config key 't_floor': must satisfy 0 < t_floor < 1");
  if (cfg.n_steps < 1)
    throw ValidationError("config key 'n_steps': must be >= 1");

  method_from_name(cfg.method);  // throws naming the bad value
  RediConfig rcfg;
  rcfg.k_step = cfg.k_step;
  rcfg.v_step = cfg.v_step;
  rcfg.h = cfg.h;
  rcfg.w_g = cfg.w_g;
  rcfg.max_weight_l1 = cfg.max_weight_l1;
  rcfg.trust_factor = cfg.trust_factor;
  rcfg.validate(cfg.n_steps);

  if (cfg.dataset_size < 1)
    throw ValidationError("config key 'dataset_size': must be >= 1");
  if (cfg.count < 1) throw ValidationError("config key 'count': must be >= 1");
  if (cfg.n_eval < 50)
    throw ValidationError("config key 'n_eval': must be >= 50");
  if (cfg.n_queries < 1)
    throw ValidationError("config key 'n_queries': must be >= 1");
  if (cfg.n_pairs < 1)
    throw ValidationError("config key 'n_pairs': must be >= 1");
  if (cfg.ref_steps < 1)
    throw ValidationError("config key 'ref_steps': must be >= 1");
  if (cfg.n_probes < 1)
    throw ValidationError("config key 'n_probes': must be >= 1");
  if (cfg.style < -1)
    throw ValidationError("config key 'style': must be -1 (none) or >= 0");
  if (cfg.adapted && cfg.style < 0)
    throw ValidationError(
        "config key 'style': adapted sampling needs a style id >= 0");
  if (cfg.out.empty())
    throw ValidationError("config key 'out': must not be empty");

  check_ablation_kind_name(cfg.kind);
  for (double eps : parse_double_list("epsilons", cfg.epsilons))
    if (eps < 0.0)
      throw ValidationError("config key 'epsilons': must be >= 0");
  parse_int_list("values", cfg.values);
}

// Echo in a fixed order; the result is itself a valid config file and
// reparses to the identical configuration (doubles use %.17g).
inline std::string resolved_config_text(const RunConfig& cfg) {
  using detail::fmt_double;
  std::string s;
  auto put = [&s](const std::string& key, const std::string& value) {
    s += key;
    s += " = ";
    s += value;
    s += '\n';
  };
  put("beta0", fmt_double(cfg.beta0));
  put("beta1", fmt_double(cfg.beta1));
  put("n_steps", std::to_string(cfg.n_steps));
  put("t_floor", fmt_double(cfg.t_floor));
  put("mixture", cfg.mixture);
  put("method", cfg.method);
  put("w_g", fmt_double(cfg.w_g));
  put("k_step", std::to_string(cfg.k_step));
  put("v_step", std::to_string(cfg.v_step));
  put("h", std::to_string(cfg.h));
  put("max_weight_l1", fmt_double(cfg.max_weight_l1));
  put("trust_factor", fmt_double(cfg.trust_factor));
  put("allow_guidance_mismatch", cfg.allow_guidance_mismatch ? "true" : "false");
  put("dataset_size", std::to_string(cfg.dataset_size));
  put("seed", std::to_string(cfg.seed));
  put("out", cfg.out);
  put("threads", std::to_string(cfg.threads));
  put("kb", cfg.kb);
  put("count", std::to_string(cfg.count));
  put("no_retrieval", cfg.no_retrieval ? "true" : "false");
  put("adapted", cfg.adapted ? "true" : "false");
  put("style", std::to_string(cfg.style));
  put("n_eval", std::to_string(cfg.n_eval));
  put("kind", cfg.kind);
  put("values", cfg.values);
  put("n_queries", std::to_string(cfg.n_queries));
  put("epsilons", cfg.epsilons);
  put("n_pairs", std::to_string(cfg.n_pairs));
  put("ref_steps", std::to_string(cfg.ref_steps));
  put("n_probes", std::to_string(cfg.n_probes));
  return s;
}

inline RediConfig to_redi_config(const RunConfig& cfg) {
  RediConfig rcfg;
  rcfg.k_step = cfg.k_step;
  rcfg.v_step = cfg.v_step;
  rcfg.h = cfg.h;
  rcfg.w_g = cfg.w_g;
  rcfg.method = method_from_name(cfg.method);
  rcfg.max_weight_l1 = cfg.max_weight_l1;
  rcfg.trust_factor = cfg.trust_factor;
  rcfg.allow_guidance_mismatch = cfg.allow_guidance_mismatch;
  return rcfg;
}

}  // namespace redi
