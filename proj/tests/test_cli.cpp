#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kfs/rng.hpp"

// End-to-end checks of the kfs binary: every subcommand, the round trip from
// condense to eval/export, and the error contract (nonzero exit, single-line
// stderr).

namespace {

namespace fs = std::filesystem;

fs::path binary() {
#ifdef KFS_BIN_PATH
  return KFS_BIN_PATH;
#else
  return "kfs";
#endif
}

struct Run {
  int exit_code;
  std::string out, err;
};

Run run_cli(const fs::path& dir, const std::string& args) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = "cd '" + dir.string() + "' && '" + binary().string() + "' " + args +
                          " > '" + out.string() + "' 2> '" + err.string() + "'";
  const int rc = std::system(cmd.c_str());
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  return {WEXITSTATUS(rc), slurp(out), slurp(err)};
}

int count_lines(const std::string& s) {
  int n = 0;
  for (char c : s)
    if (c == '\n') ++n;
  return n;
}

std::string slurp_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() /
          ("kfs_cli_" + std::to_string(kfs::mix64(reinterpret_cast<std::uintptr_t>(this))));
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
};

const char* kConfig = R"({
  "schema_version": 1,
  "cache_dir": "cache",
  "dataset": {
    "format": "raw-f32",
    "paths": ["data/train.kfsr"],
    "test_paths": ["data/test.kfsr"]
  },
  "condense": {
    "images_per_class": 1,
    "codes_per_class": 4,
    "decoders": 2,
    "decoder_kind": "low",
    "steps": 12,
    "base_seed": 3,
    "feature_width": 8,
    "pretrain_steps": 30,
    "pretrain_batch": 16,
    "threads": 2,
    "out": "model.kfs1",
    "log": "log.csv"
  },
  "eval": { "epochs": 4, "decay_epochs": [2, 3], "width": 8, "runs": 1, "seed": 5 },
  "diagnose": {
    "classes": 2, "examples_per_class": 3, "codes_per_class": 2, "decoders": 2,
    "image_channels": 3, "image_size": 8, "feature_width": 8, "seed": 1
  }
})";

}  // namespace

TEST_CASE("cli round trip: demo data, condense, eval, export") {
  Workspace ws;
  {
    std::ofstream f(ws.dir / "config.json");
    f << kConfig;
  }

  Run demo = run_cli(ws.dir, "make-demo-data --out data --n-train 20 --n-test 20 --seed 3");
  REQUIRE(demo.exit_code == 0);
  CHECK(fs::exists(ws.dir / "data/train.kfsr"));
  CHECK(fs::exists(ws.dir / "data/test.kfsr"));

  Run cond = run_cli(ws.dir, "condense --config config.json");
  REQUIRE(cond.exit_code == 0);
  CHECK(fs::exists(ws.dir / "model.kfs1"));
  const std::string log = slurp_file(ws.dir / "log.csv");
  CHECK(count_lines(log) == 13);  // header + 12 steps
  CHECK(log.substr(0, 18) == "step,loss,wall_ms\n");

  // condense is reproducible byte-for-byte from its config
  fs::copy_file(ws.dir / "model.kfs1", ws.dir / "model_a.kfs1");
  Run cond2 = run_cli(ws.dir, "condense --config config.json");
  REQUIRE(cond2.exit_code == 0);
  CHECK(slurp_file(ws.dir / "model_a.kfs1") == slurp_file(ws.dir / "model.kfs1"));

  Run ev = run_cli(ws.dir, "eval --config config.json --condensed model.kfs1 --out eval.csv");
  REQUIRE(ev.exit_code == 0);
  const std::string eval_csv = slurp_file(ws.dir / "eval.csv");
  CHECK(count_lines(eval_csv) == 2);  // header + one row
  CHECK(eval_csv.substr(0, 5) == "steps");

  // budget sweep: one row per requested budget
  Run sweep = run_cli(ws.dir, "eval --config config.json --condensed model.kfs1 "
                              "--budget-steps 4,8,16 --out sweep.csv");
  REQUIRE(sweep.exit_code == 0);
  CHECK(count_lines(slurp_file(ws.dir / "sweep.csv")) == 4);

  // export: C=2 classes -> 2 PPM grids, rows = decoders, columns = codes
  Run exp = run_cli(ws.dir, "export-images --condensed model.kfs1 --layout codes-by-decoders "
                            "--out grids");
  REQUIRE(exp.exit_code == 0);
  for (int c = 0; c < 2; ++c) {
    const fs::path p = ws.dir / "grids" / ("class_" + std::to_string(c) + ".ppm");
    REQUIRE(fs::exists(p));
    std::ifstream f(p, std::ios::binary);
    std::string magic;
    int w = 0, h = 0;
    f >> magic >> w >> h;
    CHECK(magic == "P6");
    CHECK(w == 4 * 16 + 3);  // 4 code columns
    CHECK(h == 2 * 16 + 1);  // 2 decoder rows
  }
}

TEST_CASE("cli diagnostics and gradcheck") {
  Workspace ws;
  {
    std::ofstream f(ws.dir / "config.json");
    f << kConfig;
  }

  Run bias = run_cli(ws.dir, "diagnose bias --config config.json --out bias.csv");
  REQUIRE(bias.exit_code == 0);
  std::ifstream f(ws.dir / "bias.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header == "term,closed_form,exhaustive,abs_err,rel_err");
  std::string line;
  int rows = 0;
  while (std::getline(f, line)) {
    ++rows;
    const auto last_comma = line.rfind(',');
    const double rel = std::stod(line.substr(last_comma + 1));
    INFO(line);
    CHECK(rel < 1e-8);
  }
  CHECK(rows >= 3);

  Run var = run_cli(ws.dir, "diagnose variance --config config.json --out var.csv");
  REQUIRE(var.exit_code == 0);
  const std::string var_csv = slurp_file(ws.dir / "var.csv");
  CHECK(var_csv.find("trace,") != std::string::npos);
  CHECK(var_csv.find("cov_frobenius,") != std::string::npos);

  Run budget = run_cli(ws.dir, "diagnose budget --out budget.csv");
  REQUIRE(budget.exit_code == 0);
  CHECK(count_lines(slurp_file(ws.dir / "budget.csv")) == 11);  // header + 10 settings

  Run grad = run_cli(ws.dir, "gradcheck");
  CHECK(grad.exit_code == 0);
  CHECK(grad.out.find("end_to_end_matching_loss") != std::string::npos);
}

TEST_CASE("cli cache-means honors KFS_CACHE_DIR") {
  Workspace ws;
  {
    std::ofstream f(ws.dir / "config.json");
    f << kConfig;
  }
  REQUIRE(run_cli(ws.dir, "make-demo-data --out data --n-train 8 --n-test 8 --seed 3").exit_code == 0);
  const std::string env = "KFS_CACHE_DIR='" + (ws.dir / "envcache").string() + "' ";
  const std::string cmd = "cd '" + ws.dir.string() + "' && " + env + "'" + binary().string() +
                          "' cache-means --config config.json --seeds 3..6 > /dev/null 2>&1";
  REQUIRE(std::system(cmd.c_str()) == 0);
  int entries = 0;
  for (auto& e : fs::directory_iterator(ws.dir / "envcache")) {
    (void)e;
    ++entries;
  }
  CHECK(entries == 4);
}

TEST_CASE("cli errors are single-line and nonzero") {
  Workspace ws;
  Run missing = run_cli(ws.dir, "export-images --condensed nope.kfs1 --out grids");
  CHECK(missing.exit_code == 1);
  CHECK(missing.err.substr(0, 7) == "error: ");
  CHECK(count_lines(missing.err) == 1);

  Run bad_sub = run_cli(ws.dir, "diagnose nonsense");
  CHECK(bad_sub.exit_code == 1);
  CHECK(bad_sub.err.substr(0, 7) == "error: ");
}
