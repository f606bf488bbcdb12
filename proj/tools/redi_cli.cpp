// Command-line driver for the redi library.
//
// Subcommands: build-kb, sample, eval, ablate, bound-check, help.
// Every run writes the fully-resolved configuration to <out>/config.resolved
// before doing any work, so rerunning with `--config <out>/config.resolved`
// reproduces the outputs byte for byte (wall-clock fields excepted).

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include "redi/analysis.hpp"
#include "redi/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using redi::Condition;
using redi::KnowledgeBase;
using redi::Mat;
using redi::RunConfig;
using redi::Schedule;
using redi::StepGrid;
using redi::Vec;
using redi::World;

const char* kUsage = R"(usage: redi_cli <subcommand> [--config FILE] [--key value ...]

Subcommands
  build-kb     sample a dataset, cache one trajectory suffix per item, and
               write <out>/kb.redikb plus build_report.json
  sample       draw `count` conditional samples; writes <out>/samples.csv
               (columns: seed,content_id,style_id,x0..x{d-1},nfe,
               retrieval_distance,residual; retrieval columns are blank
               with --no-retrieval)
  eval         compare retrieval-accelerated samples against full solves
               and ground truth; writes <out>/eval.json and eval.csv
               (columns: frechet_redi_original,frechet_original_ground_truth,
               ratio,n_eval)
  ablate       sweep one knob (`kind` in kb_size|kv_gap|k_position|
               n_neighbors, comma-separated `values`); writes
               <out>/ablate.csv (setting,mean_l2,frechet_sq,mmd_sq,nfe)
               and ablate.json
  bound-check  perturb cached keys and compare downstream deviation against
               gamma * exp(l_hat * (t_k - t_v)); writes <out>/bound.json and
               bound.csv (source,gamma,observed,bound; source is `reference`
               for high-resolution solves, `solver` for the working grid)
  help         print this text

Options are config keys: `--key value` (dashes in the key are accepted and
normalised to underscores), or a config file of `key = value` lines via
--config.  Precedence: defaults, then the file, then flags in order.
--no-retrieval and --adapted are bare flags.  Keys and defaults are listed
in <out>/config.resolved after any run.

Exit codes: 0 ok, 1 internal error, 2 invalid configuration or arguments,
3 I/O failure, 4 numerical failure (divergence above the 1% build threshold),
5 knowledge-base/config compatibility mismatch.
)";

// ----------------------------------------------------------- small helpers

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw redi::IoError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw redi::IoError("cannot read file: " + path.string());
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw redi::IoError("cannot open file for write: " + path.string());
  out << text;
  out.flush();
  if (!out) throw redi::IoError("cannot write file: " + path.string());
}

std::string fmt(double v) { return redi::detail::fmt_double(v); }

// ------------------------------------------------------------- world setup

// Mixture JSON schema (see README): an object with
//   dim       integer >= 1
//   contents  array of contents; each content is an array of components
//             {"weight": w, "mean": [..dim..], "cov_scale": s2}
//   styles    optional array of {"rotation": radians, "shift": [..dim..],
//             "scale": s}; rotation != 0 requires dim == 2
World world_from_json(const json& doc) {
  if (!doc.is_object()) throw redi::ValidationError("mixture file: expected a JSON object");
  if (!doc.contains("dim") || !doc.contains("contents"))
    throw redi::ValidationError("mixture file: needs 'dim' and 'contents'");
  World w;
  w.dim = doc.at("dim").get<int>();
  if (w.dim < 1) throw redi::ValidationError("mixture file: dim must be >= 1");
  for (const auto& content : doc.at("contents")) {
    if (!content.is_array() || content.empty())
      throw redi::ValidationError("mixture file: each content is a non-empty array of components");
    std::vector<redi::MixtureComponent> comps;
    for (const auto& comp : content) {
      redi::MixtureComponent c;
      c.weight = comp.at("weight").get<double>();
      auto mean = comp.at("mean").get<std::vector<double>>();
      if (static_cast<int>(mean.size()) != w.dim)
        throw redi::ValidationError("mixture file: component mean has wrong dimension");
      c.mean = Eigen::Map<const Vec>(mean.data(), w.dim);
      c.cov_scale = comp.at("cov_scale").get<double>();
      comps.push_back(std::move(c));
    }
    w.contents.push_back(std::move(comps));
  }
  if (doc.contains("styles")) {
    for (const auto& st : doc.at("styles")) {
      redi::StyleTransform s;
      double angle = st.value("rotation", 0.0);
      if (angle != 0.0 && w.dim != 2)
        throw redi::ValidationError("mixture file: nonzero rotation needs dim == 2");
      s.rotation = Mat::Identity(w.dim, w.dim);
      if (angle != 0.0) {
        s.rotation << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
      }
      if (st.contains("shift")) {
        auto shift = st.at("shift").get<std::vector<double>>();
        if (static_cast<int>(shift.size()) != w.dim)
          throw redi::ValidationError("mixture file: style shift has wrong dimension");
        s.shift = Eigen::Map<const Vec>(shift.data(), w.dim);
      } else {
        s.shift = Vec::Zero(w.dim);
      }
      s.scale = st.value("scale", 1.0);
      w.styles.push_back(std::move(s));
    }
  }
  w.validate();
  return w;
}

World world_from_config(const RunConfig& cfg) {
  if (cfg.mixture == "default") return redi::default_world();
  std::string text = read_text_file(cfg.mixture);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw redi::ValidationError("mixture file '" + cfg.mixture + "': " + e.what());
  }
  try {
    return world_from_json(doc);
  } catch (const json::exception& e) {
    throw redi::ValidationError("mixture file '" + cfg.mixture + "': " + e.what());
  }
}

// --------------------------------------------------------------- run setup

struct Setup {
  RunConfig cfg;
  World world;
  Schedule sched;
  StepGrid grid;
  redi::RediConfig rcfg;
  fs::path out;
};

Setup make_setup(const RunConfig& cfg) {
  Setup s{cfg,
          world_from_config(cfg),
          Schedule{cfg.beta0, cfg.beta1, 1.0},
          redi::make_grid(Schedule{cfg.beta0, cfg.beta1, 1.0}, cfg.t_floor, cfg.n_steps),
          redi::to_redi_config(cfg),
          fs::path(cfg.out)};
  if (cfg.style >= s.world.n_styles())
    throw redi::ValidationError("config key 'style': world has only " +
                                std::to_string(s.world.n_styles()) + " styles");
  std::error_code ec;
  fs::create_directories(s.out, ec);
  if (ec) throw redi::IoError("cannot create output directory '" + cfg.out + "': " + ec.message());
  write_text_file(s.out / "config.resolved", redi::resolved_config_text(cfg));
  return s;
}

// Dataset item i: content i mod C, drawn from stream base_seed + i.  The
// ablation and evaluation protocols are style-free; build-kb passes the
// configured style through so styled knowledge bases can be built.
std::vector<std::pair<Vec, Condition>> make_dataset(const World& world, int n,
                                                    std::uint64_t base_seed,
                                                    int style = -1) {
  std::vector<std::pair<Vec, Condition>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Condition y{i % world.n_contents(),
                style >= 0 ? std::optional<int>(style) : std::nullopt};
    out.push_back({redi::sample_data(world, y, 1, base_seed + static_cast<std::uint64_t>(i))[0], y});
  }
  return out;
}

fs::path kb_path_of(const Setup& s) {
  return s.cfg.kb.empty() ? s.out / "kb.redikb" : fs::path(s.cfg.kb);
}

KnowledgeBase load_kb_checked(const Setup& s) {
  return redi::load_kb(kb_path_of(s).string(), s.world.dim);
}

// -------------------------------------------------------------- subcommands

int cmd_build_kb(const Setup& s) {
  auto t0 = std::chrono::steady_clock::now();
  auto dataset = make_dataset(s.world, s.cfg.dataset_size, s.cfg.seed + redi::kKbSeedOffset,
                              s.cfg.style);
  redi::BuildLog log;
  KnowledgeBase kb = redi::build_kb(s.world, s.sched, s.grid, dataset, s.cfg.k_step,
                                    s.rcfg.method, s.cfg.w_g,
                                    s.cfg.seed + redi::kKbSeedOffset, &log);
  double fail_rate = static_cast<double>(log.failures.size()) / static_cast<double>(dataset.size());
  if (fail_rate > 0.01) {
    std::cerr << "build-kb: " << log.failures.size() << " of " << dataset.size()
              << " trajectories diverged (over the 1% threshold); no knowledge base written\n";
    return 4;
  }
  redi::save_kb(kb, (s.out / "kb.redikb").string());
  auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                std::chrono::steady_clock::now() - t0)
                .count();
  json rep;
  rep["entries"] = kb.size();
  rep["failed_items"] = log.failures.size();
  rep["median_nn_distance"] = kb.median_nn_distance;
  rep["wall_time_ms"] = ms;
  write_text_file(s.out / "build_report.json", rep.dump(2) + "\n");
  std::cout << "build-kb: " << kb.size() << " entries (" << log.failures.size()
            << " failed) -> " << (s.out / "kb.redikb").string() << "\n";
  return 0;
}

int cmd_sample(const Setup& s) {
  KnowledgeBase kb;
  if (!s.cfg.no_retrieval) kb = load_kb_checked(s);
  std::ostringstream csv;
  csv << "seed,content_id,style_id";
  for (int j = 0; j < s.world.dim; ++j) csv << ",x" << j;
  csv << ",nfe,retrieval_distance,residual\n";
  int warnings = 0;
  for (int i = 0; i < s.cfg.count; ++i) {
    Condition y{i % s.world.n_contents(),
                s.cfg.style >= 0 ? std::optional<int>(s.cfg.style) : std::nullopt};
    std::uint64_t seed = s.cfg.seed + redi::kQuerySeedOffset + static_cast<std::uint64_t>(i);
    Vec x0;
    long long nfe = 0;
    std::string dist, resid;
    if (s.cfg.no_retrieval) {
      Vec x_t = redi::draw_start_state(s.world, s.sched, y, seed);
      auto traj = redi::solve_cond(s.world, s.sched, s.grid, x_t, s.grid.n_steps, 0, y,
                                   s.cfg.w_g, s.rcfg.method);
      x0 = traj.final();
      nfe = traj.nfe;
    } else {
      redi::RediOutcome o =
          s.cfg.adapted
              ? redi::infer_adapted(s.world, s.sched, s.grid, kb,
                                    Condition{y.content_id, std::nullopt}, y, s.rcfg, seed)
              : redi::infer(s.world, s.sched, s.grid, kb, y, s.rcfg, seed);
      x0 = o.final;
      nfe = o.nfe;
      dist = fmt(o.retrieval.distances.front());
      resid = fmt(o.retrieval.residual);
      if (o.trust_warning) ++warnings;
    }
    csv << seed << ',' << y.content_id << ','
        << (y.style_id ? std::to_string(*y.style_id) : std::string());
    for (int j = 0; j < s.world.dim; ++j) csv << ',' << fmt(x0[j]);
    csv << ',' << nfe << ',' << dist << ',' << resid << '\n';
  }
  write_text_file(s.out / "samples.csv", csv.str());
  if (warnings > 0)
    std::cerr << "sample: trust-radius warning on " << warnings << " of " << s.cfg.count
              << " rows (nearest key farther than trust_factor x median NN distance)\n";
  std::cout << "sample: " << s.cfg.count << " rows -> " << (s.out / "samples.csv").string()
            << "\n";
  return 0;
}

int cmd_eval(const Setup& s) {
  KnowledgeBase kb = load_kb_checked(s);
  redi::FidelityReport rep = redi::fidelity_ratio(s.world, s.sched, s.grid, kb, s.rcfg,
                                                  s.cfg.n_eval, s.cfg.seed);
  json j;
  j["frechet_redi_original"] = rep.redi_vs_original;
  j["frechet_original_ground_truth"] = rep.original_vs_ground_truth;
  j["ratio"] = rep.ratio;
  j["n_eval"] = s.cfg.n_eval;
  write_text_file(s.out / "eval.json", j.dump(2) + "\n");
  std::ostringstream csv;
  csv << "frechet_redi_original,frechet_original_ground_truth,ratio,n_eval\n"
      << fmt(rep.redi_vs_original) << ',' << fmt(rep.original_vs_ground_truth) << ','
      << fmt(rep.ratio) << ',' << s.cfg.n_eval << '\n';
  write_text_file(s.out / "eval.csv", csv.str());
  std::cout << "eval: frechet(redi, original) = " << fmt(rep.redi_vs_original)
            << ", ratio = " << fmt(rep.ratio) << "\n";
  return 0;
}

int cmd_ablate(const Setup& s) {
  redi::AblationKind kind = redi::ablation_kind_from_name(s.cfg.kind);
  std::vector<int> values = redi::parse_int_list("values", s.cfg.values);
  auto dataset = make_dataset(s.world, s.cfg.dataset_size, s.cfg.seed + redi::kKbSeedOffset);
  std::vector<redi::AblationRow> rows = redi::ablate(s.world, s.sched, s.grid, dataset, kind,
                                                     values, s.rcfg, s.cfg.n_queries, s.cfg.seed);
  std::ostringstream csv;
  csv << "setting,mean_l2,frechet_sq,mmd_sq,nfe\n";
  json jrows = json::array();
  for (const auto& r : rows) {
    csv << r.setting << ',' << fmt(r.mean_l2) << ',' << fmt(r.frechet) << ',' << fmt(r.mmd)
        << ',' << r.nfe << '\n';
    json jr;
    jr["setting"] = r.setting;
    jr["mean_l2"] = r.mean_l2;
    jr["frechet_sq"] = r.frechet;
    jr["mmd_sq"] = r.mmd;
    jr["nfe"] = r.nfe;
    jrows.push_back(std::move(jr));
  }
  write_text_file(s.out / "ablate.csv", csv.str());
  json j;
  j["kind"] = s.cfg.kind;
  j["n_queries"] = s.cfg.n_queries;
  j["rows"] = std::move(jrows);
  write_text_file(s.out / "ablate.json", j.dump(2) + "\n");
  std::cout << "ablate: " << rows.size() << " settings of " << s.cfg.kind << " -> "
            << (s.out / "ablate.csv").string() << "\n";
  return 0;
}

int cmd_bound_check(const Setup& s) {
  std::vector<double> eps = redi::parse_double_list("epsilons", s.cfg.epsilons);
  Condition y{0, s.cfg.style >= 0 ? std::optional<int>(s.cfg.style) : std::nullopt};
  redi::BoundReport rep =
      redi::bound_check(s.world, s.sched, s.grid, y, s.cfg.k_step, s.cfg.v_step, eps,
                        s.cfg.n_pairs, s.cfg.seed, s.cfg.ref_steps, s.cfg.n_probes);
  std::ostringstream csv;
  csv << "source,gamma,observed,bound\n";
  auto emit = [&](const char* source, const std::vector<redi::BoundPair>& pairs) {
    for (const auto& p : pairs)
      csv << source << ',' << fmt(p.gamma) << ',' << fmt(p.observed) << ',' << fmt(p.bound)
          << '\n';
  };
  emit("reference", rep.pairs);
  emit("solver", rep.solver_pairs);
  write_text_file(s.out / "bound.csv", csv.str());
  json j;
  j["l_hat"] = rep.l_hat;
  j["raw_sup"] = rep.raw_sup;
  j["delta_t"] = rep.delta_t;
  j["n_pairs"] = s.cfg.n_pairs;
  j["epsilons"] = eps;
  j["violation_count"] = rep.violation_count;
  j["solver_violation_count"] = rep.solver_violation_count;
  write_text_file(s.out / "bound.json", j.dump(2) + "\n");
  std::cout << "bound-check: " << rep.pairs.size() << " pairs, violation_count = "
            << rep.violation_count << " (l_hat = " << fmt(rep.l_hat) << ")\n";
  return 0;
}

// ------------------------------------------------------------------ driver

int run(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << kUsage;
    return 2;
  }
  std::string cmd = argv[1];
  if (cmd == "help" || cmd == "--help" || cmd == "-h") {
    std::cout << kUsage;
    return 0;
  }
  bool known = cmd == "build-kb" || cmd == "sample" || cmd == "eval" || cmd == "ablate" ||
               cmd == "bound-check";
  if (!known) throw redi::ValidationError("unknown subcommand '" + cmd + "' (try 'help')");

  std::optional<std::string> config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
  for (int i = 2; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg == "--no-retrieval") {
      overrides.push_back({"no_retrieval", "true"});
      continue;
    }
    if (arg == "--adapted") {
      overrides.push_back({"adapted", "true"});
      continue;
    }
    if (arg.rfind("--", 0) != 0)
      throw redi::ValidationError("expected --key value, got '" + arg + "'");
    std::string key = arg.substr(2);
    std::replace(key.begin(), key.end(), '-', '_');
    if (i + 1 >= argc) throw redi::ValidationError("flag '" + arg + "' needs a value");
    std::string value = argv[++i];
    if (key == "config") {
      if (config_path) throw redi::ValidationError("--config given more than once");
      config_path = value;
    } else {
      overrides.push_back({key, value});
    }
  }

  RunConfig cfg;
  if (config_path)
    for (const auto& [k, v] : redi::parse_config_text(read_text_file(*config_path)))
      redi::apply_config_kv(cfg, k, v);
  for (const auto& [k, v] : overrides) redi::apply_config_kv(cfg, k, v);
  bool clamped = false;
  redi::finalize_run_config(cfg, &clamped);
  if (clamped) std::cerr << "note: threads clamped to 1 (single-core build)\n";

  Setup setup = make_setup(cfg);
  if (cmd == "build-kb") return cmd_build_kb(setup);
  if (cmd == "sample") return cmd_sample(setup);
  if (cmd == "eval") return cmd_eval(setup);
  if (cmd == "ablate") return cmd_ablate(setup);
  return cmd_bound_check(setup);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const redi::CompatibilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const redi::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const redi::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const redi::DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const redi::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
