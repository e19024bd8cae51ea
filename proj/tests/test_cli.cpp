#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "prevcurve/digest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = PREVCURVE_CLI;
const fs::path kConfigs = fs::path(PREVCURVE_SOURCE_DIR) / "configs";

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path workdir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "prevcurve_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run run(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt";
  const auto err = dir / "stderr.txt";
  const std::string cmd = kCli + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

/// generate + precompute on the desk grid; returns the store path.
fs::path pipeline(const fs::path& dir, int seed = 1, const std::string& extra = "") {
  const auto data = dir / "data";
  const auto store = dir / "desk.store";
  auto r = run("generate --config " + (kConfigs / "desk.cfg").string() + " --seed " + std::to_string(seed) +
                   " --out " + data.string(),
               dir);
  EXPECT_EQ(r.code, 0) << r.err;
  r = run("precompute --grid " + (data / "grid.json").string() + " --ensemble " + (data / "ensemble.bin").string() +
              " --weights " + (data / "weights.bin").string() + " --seed " + std::to_string(seed) + " --threads 1 " +
              extra + " --out " + store.string(),
          dir);
  EXPECT_EQ(r.code, 0) << r.err;
  return store;
}

}  // namespace

TEST(Generate, WritesArtefactsAndManifest) {
  const auto dir = workdir("generate");
  const auto r = run("generate --config " + (kConfigs / "desk.cfg").string() + " --seed 11 --out " + (dir / "a").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto* f : {"grid.json", "truth.bin", "ensemble.bin", "margins.csv", "survey.csv", "weights.bin"}) {
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  }
  const auto m = read_json(dir / "a" / "manifest.json");
  EXPECT_EQ(m["subcommand"], "generate");
  EXPECT_EQ(m["cells"], 480);
  EXPECT_EQ(m["posterior_draws"], 3000);
  EXPECT_EQ(m["seeds"]["seed"], 11);
  EXPECT_EQ(m["outputs"]["ensemble"]["sha256"], prevcurve::sha256_file_hex((dir / "a" / "ensemble.bin").string()));
}

TEST(Generate, SameSeedSameBytes) {
  const auto dir = workdir("generate_twice");
  for (const auto* sub : {"a", "b"}) {
    ASSERT_EQ(run("generate --config " + (kConfigs / "desk.cfg").string() + " --seed 5 --out " + (dir / sub).string(), dir).code, 0);
  }
  for (const auto* f : {"truth.bin", "ensemble.bin", "margins.csv", "survey.csv", "weights.bin"}) {
    EXPECT_EQ(prevcurve::sha256_file_hex((dir / "a" / f).string()), prevcurve::sha256_file_hex((dir / "b" / f).string())) << f;
  }
}

TEST(Weights, ReestimationMatchesGenerate) {
  const auto dir = workdir("weights");
  const auto data = dir / "data";
  ASSERT_EQ(run("generate --config " + (kConfigs / "desk.cfg").string() + " --seed 3 --out " + data.string(), dir).code, 0);
  const auto r = run("weights --grid " + (data / "grid.json").string() + " --survey " + (data / "survey.csv").string() +
                         " --margins " + (data / "margins.csv").string() + " --seed 3 --out " + (dir / "w.bin").string() +
                         " --debug-csv " + (dir / "w.csv").string(),
                     dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(prevcurve::sha256_file_hex((dir / "w.bin").string()), prevcurve::sha256_file_hex((data / "weights.bin").string()));
  EXPECT_TRUE(fs::exists(dir / "w.csv"));
  EXPECT_EQ(read_json(dir / "w.bin.manifest.json")["demographic_cells"], 12);
}

TEST(Precompute, ManifestAndDeterminism) {
  const auto dir = workdir("precompute");
  const auto store = pipeline(dir, 2);
  const auto m = read_json(store.string() + ".manifest.json");
  EXPECT_EQ(m["cells"], 480);
  EXPECT_EQ(m["particles"], 300);
  EXPECT_EQ(m["stride"], 10);
  const std::string digest = m["store_digest"];
  const auto first = prevcurve::sha256_file_hex(store.string());
  const auto again = pipeline(dir, 2);
  EXPECT_EQ(read_json(again.string() + ".manifest.json")["store_digest"], digest);
  EXPECT_EQ(prevcurve::sha256_file_hex(again.string()), first);
}

TEST(Precompute, ParticleCountIsConfigurable) {
  const auto dir = workdir("precompute_p");
  const auto store = pipeline(dir, 2, "--particles 100");
  const auto m = read_json(store.string() + ".manifest.json");
  EXPECT_EQ(m["particles"], 100);
  EXPECT_EQ(m["stride"], 30);
}

TEST(Query, JsonAndTable) {
  const auto dir = workdir("query");
  const auto store = pipeline(dir);
  auto r = run("query --store " + store.string() + " --disease tumors --json", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["axis"].size(), 11u);
  EXPECT_EQ(j["series"].size(), 1u);

  r = run("query --store " + store.string() + " --disease tumors --table --bands", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("2015"), std::string::npos);
  EXPECT_NE(r.out.find("lo"), std::string::npos);
}

TEST(Query, FullConditioningGivesOnePoint) {
  const auto dir = workdir("query_full");
  const auto store = pipeline(dir);
  const auto r = run("query --store " + store.string() +
                         " --disease diabetes -f location:LHU03 -f cohort:1963 -f age:52 -f smoking:1 -f education:0"
                         " -f economic:1",
                     dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  ASSERT_EQ(j["axis"].size(), 1u);
  EXPECT_EQ(j["axis"][0], 2015);
}

TEST(Query, StratifiedBinaryHasTwoSeries) {
  const auto dir = workdir("query_strat");
  const auto store = pipeline(dir);
  const auto r = run("query --store " + store.string() + " --disease cardiovascular --view age --stratify education --bands",
                     dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  ASSERT_EQ(j["series"].size(), 2u);
  EXPECT_EQ(j["axis"].size(), 5u);
  EXPECT_TRUE(j["series"][0].contains("lo"));
}

TEST(Query, ExitCodes) {
  const auto dir = workdir("query_errors");
  const auto store = pipeline(dir);
  EXPECT_EQ(run("query --store " + store.string() + " --disease gout", dir).code, 3);
  EXPECT_EQ(run("query --store " + store.string() + " --disease tumors -f smoking:1 --stratify smoking", dir).code, 3);
  EXPECT_EQ(run("query --store " + store.string() + " --disease tumors --view decade", dir).code, 3);
  EXPECT_EQ(run("query --store " + store.string(), dir).code, 3);  // missing --disease
  EXPECT_EQ(run("frobnicate", dir).code, 3);
  EXPECT_EQ(run("query --store " + (dir / "missing.store").string() + " --disease tumors", dir).code, 3);

  auto bytes = slurp(store);
  bytes[40] ^= 0x01;
  const auto bad = dir / "bad.store";
  std::ofstream(bad, std::ios::binary) << bytes;
  const auto r = run("query --store " + bad.string() + " --disease tumors", dir);
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("STORE-CORRUPT"), std::string::npos);
}

TEST(Validate, PassesAndIsDeterministic) {
  const auto dir = workdir("validate");
  const auto store = pipeline(dir, 4);
  const auto truth = (dir / "data" / "truth.bin").string();
  auto r = run("validate --store " + store.string() + " --truth " + truth + " --report " + (dir / "r1.json").string(), dir);
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  r = run("validate --store " + store.string() + " --truth " + truth + " --report " + (dir / "r2.json").string(), dir);
  EXPECT_EQ(slurp(dir / "r1.json"), slurp(dir / "r2.json"));
  const auto j = read_json(dir / "r1.json");
  EXPECT_EQ(j["pairs"], 500);
  EXPECT_LE(double(j["max_oracle_error"]), 1e-12);
}

TEST(Validate, DegenerateStoreSkipsCoverage) {
  const auto dir = workdir("validate_degenerate");
  for (const auto* f : {"desk_adjacency.txt", "desk_geo.txt"}) fs::copy_file(kConfigs / f, dir / f);
  {
    std::ofstream cfg(dir / "flat.cfg");
    cfg << slurp(kConfigs / "desk.cfg") << "\ndispersion = 0\nweight_replicates = 1\ntruth_gamma = 0\n";
  }
  const auto data = dir / "data";
  ASSERT_EQ(run("generate --config " + (dir / "flat.cfg").string() + " --out " + data.string(), dir).code, 0);
  ASSERT_EQ(run("precompute --grid " + (data / "grid.json").string() + " --ensemble " + (data / "ensemble.bin").string() +
                    " --weights " + (data / "weights.bin").string() + " --out " + (dir / "s").string(),
                dir)
                .code,
            0);
  const auto r = run("validate --store " + (dir / "s").string() + " --truth " + (data / "truth.bin").string(), dir);
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("notice: all bands have zero width"), std::string::npos) << r.out;
}

TEST(Validate, WrongTruthIsAnInputError) {
  const auto dir = workdir("validate_mismatch");
  const auto store = pipeline(dir);
  for (const auto* f : {"desk_adjacency.txt", "desk_geo.txt"}) fs::copy_file(kConfigs / f, dir / f);
  {
    std::ofstream cfg(dir / "shifted.cfg");
    cfg << slurp(kConfigs / "desk.cfg") << "\ncohorts = 1961 1963 1966\n";
  }
  const auto other = dir / "other";
  ASSERT_EQ(run("generate --config " + (dir / "shifted.cfg").string() + " --out " + other.string(), dir).code, 0);
  EXPECT_EQ(run("validate --store " + store.string() + " --truth " + (other / "truth.bin").string(), dir).code, 3);
}
