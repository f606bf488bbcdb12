// Integration tests for the command-line driver: they spawn the real
// binary (REDI_CLI_PATH), drive it through files in REDI_TEST_TMP, and
// check outputs, reproducibility, and the documented exit codes
// (0 ok, 2 config, 3 I/O, 4 numeric, 5 compatibility).

#include <catch2/catch_amalgamated.hpp>

#include <json.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "redi/config.hpp"
#include "redi/kb.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

// Fresh per-test scratch directory under the build tree.
fs::path scratch(const std::string& name) {
  fs::path dir = fs::path(REDI_TEST_TMP) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CliResult run_cli(const std::string& args, const fs::path& dir) {
  fs::path out_f = dir / "_stdout.txt";
  fs::path err_f = dir / "_stderr.txt";
  std::string cmd = std::string(REDI_CLI_PATH) + " " + args + " > \"" +
                    out_f.string() + "\" 2> \"" + err_f.string() + "\"";
  int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_f);
  r.err = slurp(err_f);
  return r;
}

std::vector<std::string> csv_lines(const fs::path& p) {
  std::vector<std::string> lines;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(
        start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return cells;
}

// One shared 400-entry knowledge base (default world, k=40, euler, w_g=1),
// built lazily by the first test that needs it.
const fs::path& base_kb_dir() {
  static fs::path dir = [] {
    fs::path d = scratch("cli_base");
    CliResult r = run_cli("build-kb --out " + (d / "run").string() +
                              " --dataset-size 400 --seed 97000",
                          d);
    REQUIRE(r.exit_code == 0);
    return d / "run";
  }();
  return dir;
}

std::string base_kb() { return (base_kb_dir() / "kb.redikb").string(); }

}  // namespace

TEST_CASE("cli help exits zero and names the subcommands", "[cli]") {
  fs::path dir = scratch("cli_help");
  CliResult r = run_cli("help", dir);
  CHECK(r.exit_code == 0);
  for (const char* name : {"build-kb", "sample", "eval", "ablate", "bound-check"})
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring(name));

  // No arguments at all: usage on stderr, config exit code.
  CliResult bare = run_cli("", dir);
  CHECK(bare.exit_code == 2);
  CHECK_THAT(bare.err, Catch::Matchers::ContainsSubstring("usage"));
}

TEST_CASE("cli build-kb writes a loadable knowledge base and a report", "[cli]") {
  const fs::path& run = base_kb_dir();

  redi::KnowledgeBase kb = redi::load_kb((run / "kb.redikb").string(), 2);
  CHECK(kb.size() == 400);
  CHECK(kb.meta.k_step == 40);
  CHECK(kb.meta.n_steps == 50);
  CHECK(kb.median_nn_distance > 0.0);

  json rep = json::parse(slurp(run / "build_report.json"));
  CHECK(rep.at("entries").get<int>() == 400);
  CHECK(rep.at("failed_items").get<int>() == 0);
  CHECK(rep.at("median_nn_distance").get<double>() == kb.median_nn_distance);
  CHECK(rep.at("wall_time_ms").get<long long>() >= 0);

  // The echoed config is a complete, valid configuration.
  redi::RunConfig echoed;
  for (const auto& [k, v] : redi::parse_config_text(slurp(run / "config.resolved")))
    redi::apply_config_kv(echoed, k, v);
  CHECK(echoed.dataset_size == 400);
  CHECK(echoed.seed == 97000);
  CHECK_NOTHROW(redi::finalize_run_config(echoed));
}

TEST_CASE("cli reruns are byte-identical", "[cli]") {
  fs::path dir = scratch("cli_rerun");

  SECTION("rebuilding the knowledge base reproduces the file exactly") {
    CliResult r = run_cli("build-kb --out " + (dir / "again").string() +
                              " --dataset-size 400 --seed 97000",
                          dir);
    REQUIRE(r.exit_code == 0);
    CHECK(slurp(dir / "again" / "kb.redikb") == slurp(base_kb_dir() / "kb.redikb"));

    json a = json::parse(slurp(dir / "again" / "build_report.json"));
    json b = json::parse(slurp(base_kb_dir() / "build_report.json"));
    a.erase("wall_time_ms");
    b.erase("wall_time_ms");
    CHECK(a == b);
  }

  SECTION("a run replayed from its own config.resolved matches") {
    std::string common = " --kb " + base_kb() + " --count 12 --v-step 10 --seed 51000";
    CliResult r1 = run_cli("sample --out " + (dir / "s1").string() + common, dir);
    REQUIRE(r1.exit_code == 0);

    // Point the echoed config at a new out directory and replay it.
    std::string echoed = slurp(dir / "s1" / "config.resolved");
    std::string patched;
    std::istringstream in(echoed);
    for (std::string line; std::getline(in, line);)
      patched += (line.rfind("out = ", 0) == 0)
                     ? "out = " + (dir / "s2").string() + "\n"
                     : line + "\n";
    spit(dir / "replay.cfg", patched);
    CliResult r2 = run_cli("sample --config " + (dir / "replay.cfg").string(), dir);
    REQUIRE(r2.exit_code == 0);

    CHECK(slurp(dir / "s2" / "samples.csv") == slurp(dir / "s1" / "samples.csv"));
  }
}

TEST_CASE("cli sample rows report nfe and retrieval diagnostics", "[cli]") {
  fs::path dir = scratch("cli_sample");

  SECTION("default retrieval path at the 20-evaluation setting") {
    CliResult r = run_cli("sample --out " + (dir / "a").string() + " --kb " + base_kb() +
                              " --count 12 --v-step 10 --seed 51000",
                          dir);
    REQUIRE(r.exit_code == 0);
    auto lines = csv_lines(dir / "a" / "samples.csv");
    REQUIRE(lines.size() == 13);
    CHECK(lines[0] == "seed,content_id,style_id,x0,x1,nfe,retrieval_distance,residual");
    for (std::size_t i = 1; i < lines.size(); ++i) {
      auto cells = split_csv(lines[i]);
      REQUIRE(cells.size() == 8);
      CHECK(cells[1] == std::to_string((i - 1) % 4));  // contents cycle
      CHECK(cells[2].empty());                          // style-free
      CHECK(cells[5] == "20");                          // (50-40)+10
      CHECK(std::stod(cells[3]) == std::stod(cells[3]));  // parses, not NaN text
      CHECK(std::stod(cells[6]) > 0.0);
      CHECK(std::stod(cells[7]) >= 0.0);
    }
  }

  SECTION("--no-retrieval runs the full solve and leaves retrieval blank") {
    CliResult r = run_cli("sample --out " + (dir / "b").string() +
                              " --no-retrieval --count 4 --seed 51000",
                          dir);
    REQUIRE(r.exit_code == 0);
    auto lines = csv_lines(dir / "b" / "samples.csv");
    REQUIRE(lines.size() == 5);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      auto cells = split_csv(lines[i]);
      REQUIRE(cells.size() == 8);
      CHECK(cells[5] == "50");
      CHECK(cells[6].empty());
      CHECK(cells[7].empty());
    }
  }

  SECTION("--adapted with a style id dispatches and reports the same nfe") {
    CliResult r = run_cli("sample --out " + (dir / "c").string() + " --kb " + base_kb() +
                              " --adapted --style 1 --count 4 --seed 51000",
                          dir);
    REQUIRE(r.exit_code == 0);
    auto lines = csv_lines(dir / "c" / "samples.csv");
    REQUIRE(lines.size() == 5);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      auto cells = split_csv(lines[i]);
      CHECK(cells[2] == "1");   // full condition carries the style
      CHECK(cells[5] == "30");  // (50-40)+20 at the default v_step
    }
  }
}

TEST_CASE("cli exit codes distinguish failure classes", "[cli]") {
  fs::path dir = scratch("cli_exits");
  std::string out = " --out " + (dir / "o").string();

  SECTION("2: configuration") {
    CliResult unknown = run_cli("sample" + out + " --banana 3", dir);
    CHECK(unknown.exit_code == 2);
    CHECK_THAT(unknown.err, Catch::Matchers::ContainsSubstring("banana"));

    CliResult field = run_cli("build-kb" + out + " --k-step 50", dir);
    CHECK(field.exit_code == 2);
    CHECK_THAT(field.err, Catch::Matchers::ContainsSubstring("k_step"));

    CHECK(run_cli("frobnicate", dir).exit_code == 2);
    CHECK(run_cli("sample" + out + " --adapted --kb " + base_kb(), dir).exit_code == 2);
    CHECK(run_cli("sample" + out + " --kb " + base_kb() + " --style 99", dir).exit_code == 2);
    CHECK(run_cli("sample" + out + " --count", dir).exit_code == 2);  // missing value
  }

  SECTION("3: I/O") {
    CHECK(run_cli("sample" + out + " --config " + (dir / "nope.cfg").string(), dir)
              .exit_code == 3);
    CHECK(run_cli("sample" + out + " --kb " + (dir / "nope.redikb").string(), dir)
              .exit_code == 3);

    // Corrupt magic and truncation are I/O-level corruption.
    std::string kb_bytes = slurp(base_kb());
    std::string bad_magic = kb_bytes;
    bad_magic[0] = 'X';
    spit(dir / "bad_magic.redikb", bad_magic);
    CHECK(run_cli("sample" + out + " --kb " + (dir / "bad_magic.redikb").string(), dir)
              .exit_code == 3);
    spit(dir / "trunc.redikb", kb_bytes.substr(0, 100));
    CHECK(run_cli("sample" + out + " --kb " + (dir / "trunc.redikb").string(), dir)
              .exit_code == 3);
  }

  SECTION("4: numeric failure (divergent world)") {
    spit(dir / "big.json",
         "{\"dim\": 2, \"contents\": [[{\"weight\": 1.0, \"mean\": [1e9, 0.0],"
         " \"cov_scale\": 0.09}]]}\n");
    CliResult r = run_cli("build-kb" + out + " --mixture " + (dir / "big.json").string() +
                              " --dataset-size 50",
                          dir);
    CHECK(r.exit_code == 4);
    CHECK_FALSE(fs::exists(dir / "o" / "kb.redikb"));
  }

  SECTION("5: compatibility") {
    // Unsupported version byte.
    std::string kb_bytes = slurp(base_kb());
    std::string bad_version = kb_bytes;
    bad_version[8] = '\x07';
    spit(dir / "bad_version.redikb", bad_version);
    CHECK(run_cli("sample" + out + " --kb " + (dir / "bad_version.redikb").string(), dir)
              .exit_code == 5);

    // World dimension differs from the stored KB dimension.
    spit(dir / "tri.json",
         "{\"dim\": 3, \"contents\": [[{\"weight\": 1.0, \"mean\": [1.0, 0.0, 0.0],"
         " \"cov_scale\": 0.09}]]}\n");
    CliResult dim = run_cli("sample" + out + " --mixture " + (dir / "tri.json").string() +
                                " --kb " + base_kb(),
                            dir);
    CHECK(dim.exit_code == 5);
    CHECK_THAT(dim.err, Catch::Matchers::ContainsSubstring("dim"));

    // Guidance mismatch is strict unless explicitly allowed.
    CliResult wg = run_cli("sample" + out + " --kb " + base_kb() + " --w-g 2", dir);
    CHECK(wg.exit_code == 5);
    CHECK_THAT(wg.err, Catch::Matchers::ContainsSubstring("w_g"));
    CHECK(run_cli("sample" + out + " --kb " + base_kb() +
                      " --w-g 2 --allow-guidance-mismatch true --count 4",
                  dir)
              .exit_code == 0);

    // Retrieval step mismatch.
    CHECK(run_cli("sample" + out + " --kb " + base_kb() + " --k-step 30 --v-step 10", dir)
              .exit_code == 5);
  }
}

TEST_CASE("cli eval, ablate, and bound-check write their reports", "[cli]") {
  fs::path dir = scratch("cli_reports");

  SECTION("eval") {
    CliResult r = run_cli("eval --out " + (dir / "e").string() + " --kb " + base_kb() +
                              " --n-eval 60 --seed 61000",
                          dir);
    REQUIRE(r.exit_code == 0);
    json j = json::parse(slurp(dir / "e" / "eval.json"));
    double a = j.at("frechet_redi_original").get<double>();
    double b = j.at("frechet_original_ground_truth").get<double>();
    double ratio = j.at("ratio").get<double>();
    CHECK(a >= 0.0);
    CHECK(b > 0.0);
    CHECK(ratio == Catch::Approx(a / b).epsilon(1e-12));
    CHECK(j.at("n_eval").get<int>() == 60);

    auto lines = csv_lines(dir / "e" / "eval.csv");
    REQUIRE(lines.size() == 2);
    CHECK(lines[0] == "frechet_redi_original,frechet_original_ground_truth,ratio,n_eval");
    CHECK(split_csv(lines[1]).size() == 4);
  }

  SECTION("ablate") {
    CliResult r = run_cli("ablate --out " + (dir / "a").string() +
                              " --kind n_neighbors --values 1,2,3 --dataset-size 400" +
                              " --n-queries 30 --seed 62000",
                          dir);
    REQUIRE(r.exit_code == 0);
    auto lines = csv_lines(dir / "a" / "ablate.csv");
    REQUIRE(lines.size() == 4);  // header + one row per grid value
    CHECK(lines[0] == "setting,mean_l2,frechet_sq,mmd_sq,nfe");
    CHECK(split_csv(lines[1])[0] == "H=1");
    CHECK(split_csv(lines[3])[0] == "H=3");

    json j = json::parse(slurp(dir / "a" / "ablate.json"));
    CHECK(j.at("kind").get<std::string>() == "n_neighbors");
    REQUIRE(j.at("rows").size() == 3);
    for (const auto& row : j.at("rows")) {
      CHECK(row.at("nfe").get<long long>() == 30);
      CHECK(row.at("mean_l2").get<double>() >= 0.0);
    }
  }

  SECTION("bound-check") {
    CliResult r = run_cli("bound-check --out " + (dir / "b").string() +
                              " --n-pairs 2 --epsilons 1e-3 --ref-steps 1500" +
                              " --n-probes 32 --seed 63000",
                          dir);
    REQUIRE(r.exit_code == 0);
    json j = json::parse(slurp(dir / "b" / "bound.json"));
    CHECK(j.at("violation_count").get<int>() == 0);
    CHECK(j.at("solver_violation_count").get<int>() >= 0);
    CHECK(j.at("l_hat").get<double>() > 0.0);
    CHECK(j.at("delta_t").get<double>() == Catch::Approx(0.3996).margin(1e-12));

    // Header + (reference + solver) x n_pairs x epsilons rows.
    auto lines = csv_lines(dir / "b" / "bound.csv");
    REQUIRE(lines.size() == 5);
    CHECK(lines[0] == "source,gamma,observed,bound");
    CHECK(split_csv(lines[1])[0] == "reference");
    CHECK(split_csv(lines[3])[0] == "solver");
    for (std::size_t i = 1; i < lines.size(); ++i) {
      auto cells = split_csv(lines[i]);
      REQUIRE(cells.size() == 4);
      CHECK(std::stod(cells[2]) <= std::stod(cells[3]) * (1.0 + 1e-6));
    }
  }
}

TEST_CASE("cli mixture files define the world", "[cli]") {
  fs::path dir = scratch("cli_mixture");
  spit(dir / "duo.json",
       "{\"dim\": 2,\n"
       " \"contents\": [\n"
       "   [{\"weight\": 0.5, \"mean\": [2.0, 0.0], \"cov_scale\": 0.04},\n"
       "    {\"weight\": 0.5, \"mean\": [2.5, 0.5], \"cov_scale\": 0.04}],\n"
       "   [{\"weight\": 1.0, \"mean\": [-2.0, 1.0], \"cov_scale\": 0.09}]],\n"
       " \"styles\": [{\"rotation\": 0.0, \"shift\": [0.0, 0.0], \"scale\": 1.0},\n"
       "            {\"rotation\": 1.5707963267948966, \"shift\": [1.0, -1.0],"
       " \"scale\": 0.8}]}\n");
  std::string mixture = " --mixture " + (dir / "duo.json").string();

  SECTION("build and sample under a custom two-content world") {
    CliResult b = run_cli("build-kb --out " + (dir / "w").string() + mixture +
                              " --dataset-size 200 --seed 64000",
                          dir);
    REQUIRE(b.exit_code == 0);
    CliResult s = run_cli("sample --out " + (dir / "w").string() + mixture +
                              " --count 6 --seed 64000",
                          dir);
    REQUIRE(s.exit_code == 0);
    auto lines = csv_lines(dir / "w" / "samples.csv");
    REQUIRE(lines.size() == 7);
    for (std::size_t i = 1; i < lines.size(); ++i)
      CHECK(split_csv(lines[i])[1] == std::to_string((i - 1) % 2));
  }

  SECTION("malformed mixture files are configuration errors") {
    spit(dir / "broken.json", "{\"dim\": 2,\n");
    CHECK(run_cli("build-kb --out " + (dir / "x").string() + " --mixture " +
                      (dir / "broken.json").string(),
                  dir)
              .exit_code == 2);

    spit(dir / "short_mean.json",
         "{\"dim\": 2, \"contents\": [[{\"weight\": 1.0, \"mean\": [1.0],"
         " \"cov_scale\": 0.09}]]}\n");
    CHECK(run_cli("build-kb --out " + (dir / "x").string() + " --mixture " +
                      (dir / "short_mean.json").string(),
                  dir)
              .exit_code == 2);

    spit(dir / "rot3.json",
         "{\"dim\": 3, \"contents\": [[{\"weight\": 1.0, \"mean\": [1.0, 0.0, 0.0],"
         " \"cov_scale\": 0.09}]], \"styles\": [{\"rotation\": 0.5}]}\n");
    CliResult rot = run_cli("build-kb --out " + (dir / "x").string() + " --mixture " +
                                (dir / "rot3.json").string(),
                            dir);
    CHECK(rot.exit_code == 2);
    CHECK_THAT(rot.err, Catch::Matchers::ContainsSubstring("rotation"));
  }
}

TEST_CASE("cli styled knowledge bases serve matching styled queries", "[cli]") {
  fs::path dir = scratch("cli_styled");
  CliResult b = run_cli("build-kb --out " + (dir / "w").string() +
                            " --style 2 --dataset-size 200 --seed 65000",
                        dir);
  REQUIRE(b.exit_code == 0);

  CliResult s = run_cli("sample --out " + (dir / "w").string() +
                            " --style 2 --count 6 --seed 65000",
                        dir);
  REQUIRE(s.exit_code == 0);
  auto lines = csv_lines(dir / "w" / "samples.csv");
  REQUIRE(lines.size() == 7);
  for (std::size_t i = 1; i < lines.size(); ++i)
    CHECK(split_csv(lines[i])[2] == "2");

  // A style-free query finds no matching entries in a styled KB: that is a
  // condition/metadata mismatch, not success with silent fallback.
  CliResult mismatch = run_cli("sample --out " + (dir / "m").string() + " --kb " +
                                   (dir / "w" / "kb.redikb").string() + " --count 2",
                               dir);
  CHECK(mismatch.exit_code == 5);
}
