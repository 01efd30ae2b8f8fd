#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunOutcome {
  int exit_code;
  std::string out;
};

fs::path work_dir() {
  static int counter = 0;
  const fs::path dir =
      fs::temp_directory_path() / ("acal_cli_" + std::to_string(counter++));
  fs::create_directories(dir);
  return dir;
}

RunOutcome run_cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "acal_cli_out.txt";
  const std::string cmd =
      std::string(ACAL_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  RunOutcome r;
  r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// small corpora + tiny budgets keep each CLI invocation fast
const char* kTinyOverrides =
    "--set data.source_per_class=12 --set data.target_pool_per_class=8 "
    "--set data.val_per_class=4 --set data.test_per_class=4 "
    "--set data.target_per_class=4 --set trainer.batch_size=8 "
    "--set pretrain.steps=30 --set trainer.eval_every=2";

}  // namespace

TEST_CASE("unknown subcommands exit 1 with usage text") {
  const RunOutcome r = run_cli("frobnicate");
  CHECK(r.exit_code == 1);
  CHECK(r.out.find("Usage") != std::string::npos);
}

TEST_CASE("print-config echoes canonical output that re-parses to itself") {
  const RunOutcome a = run_cli("print-config");
  CHECK(a.exit_code == 0);
  CHECK(a.out.find("\"variant\"") != std::string::npos);
  CHECK(a.out.find("\"acal\"") != std::string::npos);

  const fs::path dir = work_dir();
  const fs::path cfg_path = dir / "echo.json";
  std::ofstream(cfg_path) << a.out;
  const RunOutcome b = run_cli("print-config --config " + cfg_path.string());
  CHECK(b.exit_code == 0);
  CHECK(a.out == b.out);
}

TEST_CASE("config errors exit 1 and name the problem") {
  const fs::path dir = work_dir();
  const fs::path bad = dir / "bad.json";
  std::ofstream(bad) << R"({"varant": {}})";
  const RunOutcome r = run_cli("print-config --config " + bad.string());
  CHECK(r.exit_code == 1);
  CHECK(r.out.find("varant") != std::string::npos);
}

TEST_CASE("gen-data writes IDX corpora and honors --export") {
  const fs::path dir = work_dir();
  const RunOutcome r = run_cli("gen-data --export --out " + dir.string() + " " +
                               std::string(kTinyOverrides));
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir / "data" / "source-train-images.idx3"));
  CHECK(fs::exists(dir / "data" / "target-test-labels.idx1"));
  CHECK(fs::exists(dir / "data" / "pgm" / "source-train_manifest.csv"));
  CHECK(fs::exists(dir / "run.json"));
  const json run = json::parse(read_file(dir / "run.json"));
  CHECK(run.at("command") == "gen-data");
  CHECK(run.at("config").at("trainer").at("seed") == 1);
  CHECK(run.at("fingerprints").contains("config"));
}

TEST_CASE("pretrain then train with an explicit checkpoint") {
  const fs::path pre_dir = work_dir();
  const RunOutcome pre = run_cli("pretrain --out " + pre_dir.string() + " " +
                                 std::string(kTinyOverrides));
  CHECK(pre.exit_code == 0);
  const fs::path ckpt = pre_dir / "m_s.ckpt";
  REQUIRE(fs::exists(ckpt));

  const fs::path train_dir = work_dir();
  const RunOutcome tr = run_cli("train --variant rcal --steps 3 --out " +
                                train_dir.string() + " --pretrained " + ckpt.string() +
                                " " + std::string(kTinyOverrides));
  CHECK(tr.exit_code == 0);
  CHECK(fs::exists(train_dir / "metrics.jsonl"));
  CHECK(fs::exists(train_dir / "m_t.ckpt"));
  CHECK(fs::exists(train_dir / "summary.json"));
  const json summary = json::parse(read_file(train_dir / "summary.json"));
  CHECK(summary.at("variant") == "rcal");

  std::istringstream metrics(read_file(train_dir / "metrics.jsonl"));
  std::size_t lines = 0;
  for (std::string line; std::getline(metrics, line);) {
    ++lines;
    CHECK(json::parse(line).contains("terms"));
  }
  CHECK(lines == 3);
}

TEST_CASE("train with zero steps records the untrained model") {
  const fs::path dir = work_dir();
  const RunOutcome r = run_cli("train --variant no_adaptation --steps 0 --out " +
                               dir.string() + " " + std::string(kTinyOverrides));
  CHECK(r.exit_code == 0);
  const json summary = json::parse(read_file(dir / "summary.json"));
  CHECK(summary.at("final_acc").get<double>() >= 0.0);
  CHECK(summary.at("final_acc").get<double>() <= 1.0);
}

TEST_CASE("train without labels where required exits 1") {
  const fs::path dir = work_dir();
  const RunOutcome r = run_cli(
      "train --variant rcal --steps 1 --out " + dir.string() + " " +
      std::string(kTinyOverrides) +
      " --set variant.supervision=semi --set variant.labeled_fraction=0.0");
  CHECK(r.exit_code == 1);
  CHECK(r.out.find("configuration error") != std::string::npos);
}

TEST_CASE("ablate writes deterministic reports in all formats") {
  const std::string common =
      std::string(" --set 'ablation.variants=[\"no_adaptation\",\"target_only\"]' ") +
      "--set ablation.seeds=[1] --set trainer.steps=2 " + kTinyOverrides;
  const fs::path d1 = work_dir();
  const RunOutcome a = run_cli("ablate --out " + d1.string() + common);
  CHECK(a.exit_code == 0);
  CHECK(fs::exists(d1 / "report.csv"));
  CHECK(fs::exists(d1 / "report.json"));
  CHECK(fs::exists(d1 / "report.svg"));

  const fs::path d2 = work_dir();
  const RunOutcome b = run_cli("ablate --out " + d2.string() + common);
  CHECK(b.exit_code == 0);
  CHECK(read_file(d1 / "report.csv") == read_file(d2 / "report.csv"));

  // re-render from the JSON report alone
  const fs::path d3 = work_dir();
  const RunOutcome rep = run_cli("report --input " + (d1 / "report.json").string() +
                                 " --out " + d3.string());
  CHECK(rep.exit_code == 0);
  CHECK(read_file(d3 / "report.csv") == read_file(d1 / "report.csv"));
  CHECK(read_file(d3 / "report.svg") == read_file(d1 / "report.svg"));
}

TEST_CASE("gradcheck over the op registry passes quickly") {
  const RunOutcome r = run_cli("gradcheck --scope ops");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("matmul") != std::string::npos);
  CHECK(r.out.find("softmax_cross_entropy") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);
}

TEST_CASE("dump-samples writes real, mapped and cycled triplets") {
  const fs::path dir = work_dir();
  const RunOutcome r = run_cli("dump-samples --out " + dir.string() + " " +
                               std::string(kTinyOverrides) +
                               " --set output.dump_count=3");
  CHECK(r.exit_code == 0);
  for (const char* name :
       {"source_real_00000.pgm", "source_mapped_00000.pgm", "source_cycled_00000.pgm",
        "target_real_00002.pgm", "target_mapped_00002.pgm", "target_cycled_00002.pgm"}) {
    CHECK(fs::exists(dir / "samples" / name));
  }
}

TEST_CASE("run.json fingerprints artifacts for reproduction") {
  const fs::path dir = work_dir();
  const RunOutcome r = run_cli("train --variant target_only --steps 1 --out " +
                               dir.string() + " " + std::string(kTinyOverrides));
  CHECK(r.exit_code == 0);
  const json run = json::parse(read_file(dir / "run.json"));
  CHECK(run.at("schema_version") == 1);
  CHECK(run.at("command") == "train");
  CHECK(run.at("fingerprints").contains("metrics"));
  CHECK(run.at("fingerprints").contains("m_t_checkpoint"));
  CHECK(run.at("artifacts").at("summary").get<std::string>().find("summary.json") !=
        std::string::npos);
}
