#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "macrec/manifest.hpp"

namespace fs = std::filesystem;
using namespace macrec;

namespace {

struct Result {
  int code;
  std::string err;
};

// Runs the CLI with stderr captured to a file.
Result cli(const std::string& args) {
  static int counter = 0;
  const auto err = (fs::path(::testing::TempDir()) / ("cli_err_" + std::to_string(counter++))).string();
  const std::string cmd = std::string(MACREC_CLI) + " " + args + " 2>" + err;
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(err)};
}

std::string fresh_dir(const std::string& name) {
  const auto d = fs::path(::testing::TempDir()) / ("macrec_cli_" + name);
  fs::remove_all(d);
  return d.string();
}

const std::string kSmoke = std::string("--config ") + MACREC_SOURCE_DIR + "/configs/smoke.ini --quiet";

nlohmann::json read_json(const std::string& path) { return nlohmann::json::parse(read_file(path)); }

}  // namespace

TEST(Hashing, KnownDigests) {
  EXPECT_EQ(sha1_hex("abc"), "a9993e364706816aba3e25717850c26c9cd0d89d");
  // `printf 'hello\n' | git hash-object --stdin`
  EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(Cli, PipelineProducesAllArtifacts) {
  const auto dir = fresh_dir("pipeline");
  const auto r = cli("pipeline " + kSmoke + " --run-dir " + dir);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"ids.jsonl", "diag.json", "diag.csv", "tasks.jsonl", "model.ckpt", "metrics.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(fs::path(dir) / f)) << f;
  const auto m = read_json(dir + "/metrics.json");
  for (const char* k : {"dataset", "seed", "HR@1", "HR@5", "HR@10", "NDCG@5", "NDCG@10", "text", "vision", "ensemble"})
    EXPECT_TRUE(m.contains(k)) << k;
  const auto manifest = read_json(dir + "/manifest.json");
  const auto& train = manifest["stages"]["train"];
  EXPECT_EQ(train["inputs"]["ids.jsonl"], git_blob_hash_file(dir + "/ids.jsonl"));
  EXPECT_EQ(train["outputs"]["model.ckpt"], git_blob_hash_file(dir + "/model.ckpt"));
  EXPECT_EQ(train["config_hash"].get<std::string>().size(), 40u);
}

TEST(Cli, RerunGivesByteIdenticalMetrics) {
  const auto a = fresh_dir("rerun_a"), b = fresh_dir("rerun_b");
  ASSERT_EQ(cli("pipeline " + kSmoke + " --run-dir " + a).code, 0);
  ASSERT_EQ(cli("pipeline " + kSmoke + " --run-dir " + b + " --threads 3").code, 0);
  EXPECT_EQ(read_file(a + "/metrics.json"), read_file(b + "/metrics.json"));
  EXPECT_EQ(read_file(a + "/ids.jsonl"), read_file(b + "/ids.jsonl"));
}

TEST(Cli, DryRunRecordsDefaultHyperparameters) {
  const auto dir = fresh_dir("defaults");
  ASSERT_EQ(cli("quantize --dry-run --run-dir " + dir).code, 0);
  const auto c = read_json(dir + "/manifest.json")["stages"]["quantize"]["config"];
  EXPECT_EQ(c["quantizer"]["levels"], 4);
  EXPECT_EQ(c["quantizer"]["codebook_size"], 256);
  EXPECT_EQ(c["labels"]["clusters"], 512);
  EXPECT_DOUBLE_EQ(c["quantizer"]["tau"].get<double>(), 0.1);
  EXPECT_DOUBLE_EQ(c["quantizer"]["lambda_align"].get<double>(), 0.001);
}

TEST(Cli, FlagsOverrideConfigFile) {
  const auto dir = fresh_dir("override");
  ASSERT_EQ(cli("quantize --dry-run " + kSmoke + " --run-dir " + dir + " --quantizer.epochs 7").code, 0);
  const auto c = read_json(dir + "/manifest.json")["stages"]["quantize"]["config"];
  EXPECT_EQ(c["quantizer"]["epochs"], 7);
  EXPECT_EQ(c["quantizer"]["levels"], 2);  // from the file
}

TEST(Cli, ConfigErrorsListEveryViolation) {
  const auto r = cli("quantize --run-dir " + fresh_dir("badcfg") + " --quantizer.levels 3 --grm.batch_size 0 --model.heads 3");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("lambda_con"), std::string::npos);
  EXPECT_NE(r.err.find("GRM batch size"), std::string::npos);
  EXPECT_NE(r.err.find("multiple of heads"), std::string::npos);
}

TEST(Cli, UnknownConfigKeyIsConfigError) {
  const auto ini = (fs::path(::testing::TempDir()) / "unknown.ini").string();
  std::ofstream(ini) << "[quantizer]\nlevelz = 3\n";
  EXPECT_EQ(cli("quantize --config " + ini + " --run-dir " + fresh_dir("unknown")).code, 2);
}

TEST(Cli, MissingPriorArtifactNamesStage) {
  const auto dir = fresh_dir("missing");
  ASSERT_EQ(cli("synth " + kSmoke + " --run-dir " + dir).code, 0);
  const auto r = cli("quantize " + kSmoke + " --run-dir " + dir);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("'labels' stage"), std::string::npos) << r.err;
}

TEST(Cli, CorruptEmbeddingsAreDataError) {
  const auto dir = fresh_dir("corrupt");
  ASSERT_EQ(cli("synth " + kSmoke + " --run-dir " + dir).code, 0);
  std::ofstream(dir + "/text.emb") << "garbage";
  EXPECT_EQ(cli("labels " + kSmoke + " --run-dir " + dir).code, 3);
}

TEST(Cli, DivergenceIsNumericError) {
  const auto r = cli("pipeline " + kSmoke + " --run-dir " + fresh_dir("diverge") + " --quantizer.lr 1e30");
  EXPECT_EQ(r.code, 4) << r.err;
}
