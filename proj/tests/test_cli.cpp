#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kSmoke = fs::path(LOREC_SOURCE_DIR) / "configs" / "smoke.json";

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("lorec_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(LOREC_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(run("--help") == 0);
  CHECK(run("train --help") == 0);
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("--bogus train") == 2);
  CHECK(run("--mode sideways train") == 2);
  CHECK(run("--config /nonexistent.json train") == 2);
}

TEST_CASE("config errors exit with 2") {
  const fs::path dir = scratch_dir("badcfg");
  std::ofstream(dir / "unknown.json") << R"({"bogus": 1})";
  std::ofstream(dir / "broken.json") << "{ not json";
  std::ofstream(dir / "invalid.json") << R"({"schedule": {"rounds": -1}})";
  for (const char* name : {"unknown.json", "broken.json", "invalid.json"}) {
    CHECK(run("--config " + q(dir / name) + " --out " + q(dir / "o") + " train") == 2);
  }
}

TEST_CASE("synth, attack and ingest round-trip") {
  const fs::path dir = scratch_dir("data");
  CHECK(run("--config " + q(kSmoke) + " --out " + q(dir / "synth") + " synth") == 0);
  CHECK(fs::exists(dir / "synth" / "catalog.jsonl"));
  CHECK(fs::exists(dir / "synth" / "interactions.jsonl"));
  CHECK(read_json(dir / "synth" / "targets.json").at("targets").size() == 5);

  CHECK(run("--config " + q(kSmoke) + " --out " + q(dir / "attack") + " attack") == 0);
  CHECK(read_json(dir / "attack" / "targets.json").at("profiles") == 2);

  CHECK(run("--config " + q(kSmoke) + " --out " + q(dir / "ingest") + " ingest --catalog " +
            q(dir / "attack" / "catalog.jsonl") + " --interactions " +
            q(dir / "attack" / "interactions.jsonl")) == 0);
  CHECK(fs::exists(dir / "ingest" / "interactions.jsonl"));

  std::ofstream(dir / "garbage.jsonl") << "not a record\n";
  CHECK(run("--config " + q(kSmoke) + " --out " + q(dir / "bad") + " ingest --catalog " +
            q(dir / "synth" / "catalog.jsonl") + " --interactions " + q(dir / "garbage.jsonl")) == 3);
}

TEST_CASE("train, evaluate and report") {
  const fs::path dir = scratch_dir("train");
  const fs::path out = dir / "run";
  CHECK(run("--config " + q(kSmoke) + " --out " + q(out) + " --seed 3 train") == 0);
  for (const char* name : {"report.json", "weights.tsv", "weight_trajectory.tsv", "config.json",
                           "recommender.ckpt", "calibrator.ckpt"}) {
    CHECK(fs::exists(out / name));
  }
  CHECK(fs::exists(out / "snapshots" / "round_01.tsv"));
  CHECK(fs::exists(out / "snapshots" / "round_02.tsv"));
  const json report = read_json(out / "report.json");
  CHECK(report.at("provenance").at("seed") == 3);
  CHECK(report.at("mode") == "lorec");

  CHECK(run("--config " + q(kSmoke) + " --out " + q(out) + " evaluate") == 0);
  CHECK(fs::exists(out / "evaluation.json"));
  CHECK(run("--config " + q(kSmoke) + " --out " + q(dir / "missing") + " evaluate") == 3);
  CHECK(run("--config " + q(kSmoke) + " --out " + q(out) + " evaluate --targets nosuchitem") == 3);

  fs::remove_all(out / "plots");
  CHECK(run("--out " + q(out) + " report") == 0);
  CHECK(fs::exists(out / "plots"));
  CHECK(run("--out " + q(dir / "nowhere") + " report") == 3);

  const fs::path backbone = dir / "backbone";
  CHECK(run("--config " + q(kSmoke) + " --out " + q(backbone) + " --mode backbone train") == 0);
  CHECK(read_json(backbone / "report.json").at("mode") == "backbone");
}

TEST_CASE("same config and seed give byte-identical reports") {
  const fs::path dir = scratch_dir("repeat");
  CHECK(run("--config " + q(kSmoke) + " --out " + q(dir / "a") + " train") == 0);
  CHECK(run("--config " + q(kSmoke) + " --out " + q(dir / "b") + " train") == 0);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(dir / "a" / "report.json") == slurp(dir / "b" / "report.json"));
  CHECK(slurp(dir / "a" / "weights.tsv") == slurp(dir / "b" / "weights.tsv"));
}
