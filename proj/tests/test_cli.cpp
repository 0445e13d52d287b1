#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const char* cli() {
  const char* p = std::getenv("WSRTL_CLI");
  REQUIRE_MESSAGE(p != nullptr, "WSRTL_CLI must point at the wsrtl binary");
  return p;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("wsrtl_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " \"" + cli() + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const std::string& s) {
  int n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

fs::path write_config(const fs::path& dir) {
  const fs::path p = dir / "tiny.json";
  std::ofstream(p) << R"({
  "model": {"num_aus": 3, "width": 0.0625, "d": 8, "heads": 2, "ffn": 16, "image_size": 64,
            "patch_size": 16, "roi_hidden": 4, "seed": 3},
  "train": {"batch_size": 2, "iterations": 3, "seed": 5},
  "data": {"synthetic": {"num_aus": 3, "subjects": 4, "samples_per_subject": 8, "image_size": 72,
                         "roi_image_size": 16, "stamp_size": 8},
           "seed": 9, "folds": 2},
  "eval_every": 2
})";
  return p;
}

}  // namespace

TEST_CASE("identical train runs produce identical artifacts") {
  const fs::path dir = scratch("determinism");
  const fs::path cfg = write_config(dir);
  REQUIRE(run("train --config " + cfg.string() + " --out " + (dir / "a").string()) == 0);
  REQUIRE(run("train --config " + cfg.string() + " --out " + (dir / "b").string()) == 0);
  const fs::path a = dir / "a" / "train_fold0", b = dir / "b" / "train_fold0";
  for (const char* f : {"config.json", "stamp.json", "log.jsonl", "checkpoint.wckp", "report.md", "report.csv",
                        "queries.csv"}) {
    INFO(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK(count_lines(slurp(a / "log.jsonl")) == 3);
  CHECK(slurp(a / "stamp.json").find("\"config_hash\"") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "a" / "train_fold0.partial"));

  // The saved config is loadable and reproduces the run.
  REQUIRE(run("train --config " + (a / "config.json").string() + " --out " + (dir / "c").string()) == 0);
  CHECK(slurp(dir / "c" / "train_fold0" / "checkpoint.wckp") == slurp(a / "checkpoint.wckp"));
}

TEST_CASE("eval, viz and data commands") {
  const fs::path dir = scratch("commands");
  const fs::path cfg = write_config(dir);
  const std::string out = " --out " + dir.string();
  REQUIRE(run("train --config " + cfg.string() + out) == 0);
  const std::string ck = " --checkpoint " + (dir / "train_fold0" / "checkpoint.wckp").string();

  REQUIRE(run("eval --fold 1" + ck + out) == 0);
  const std::string csv = slurp(dir / "eval_fold1" / "report.csv");
  CHECK(count_lines(csv) == 1 + 3 + 1);  // header, one row per AU, average

  REQUIRE(run("viz-similarity" + ck + out) == 0);
  CHECK(count_lines(slurp(dir / "viz_similarity" / "similarity.csv")) == 3);
  CHECK(fs::file_size(dir / "viz_similarity" / "similarity.ppm") > 0);
  REQUIRE(run("viz-inpaint --au 2" + ck + out) == 0);
  CHECK(fs::exists(dir / "viz_inpaint" / "inpaint.ppm"));
  REQUIRE(run("viz-flow" + ck + out) == 0);
  CHECK(fs::exists(dir / "viz_flow" / "flow.ppm"));

  REQUIRE(run("synth-data --config " + cfg.string() + out) == 0);
  CHECK(fs::exists(dir / "synth" / "samples.jsonl"));
  REQUIRE(run("extract-flow --pairs " + (dir / "synth" / "pairs.jsonl").string() + out) == 0);
  CHECK(count_lines(slurp(dir / "flow" / "flows.csv")) == 1 + 16);
}

TEST_CASE("output root falls back to the environment") {
  const fs::path dir = scratch("env");
  const fs::path cfg = write_config(dir);
  REQUIRE(run("synth-data --config " + cfg.string(), "WSRTL_OUTPUT_DIR=" + (dir / "root").string()) == 0);
  CHECK(fs::exists(dir / "root" / "synth" / "rules.json"));
}

TEST_CASE("exit codes") {
  const fs::path dir = scratch("errors");
  const fs::path cfg = write_config(dir);
  const std::string out = " --out " + (dir / "out").string();
  CHECK(run("--help") == 0);
  CHECK(run("") == 2);
  CHECK(run("train --no-such-flag" + out) == 2);
  CHECK(run("train --config " + cfg.string() + " --set train.lr=-1" + out) == 2);
  CHECK(run("train --config " + cfg.string() + " --set model.bogus=1" + out) == 2);
  CHECK(run("train --config " + (dir / "missing.json").string() + out) == 2);
  CHECK(run("eval --config " + cfg.string() + " --checkpoint " + (dir / "missing.wckp").string() + out) == 2);
  CHECK_FALSE(fs::exists(dir / "out"));  // nothing written before validation

  std::ofstream(dir / "junk.wckp") << "not a checkpoint";
  CHECK(run("eval --config " + cfg.string() + " --checkpoint " + (dir / "junk.wckp").string() + out) == 3);
}
