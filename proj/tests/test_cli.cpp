#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "dpffn/io.hpp"
#include "dpffn/json_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(DPFFN_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  static fs::path dir;

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / ("dpffn_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "spec.json") << R"({"sequences_per_posture": 1, "hrrps_per_sequence": 4})";
    std::ofstream(dir / "model.json") << R"({"d_model": 16, "num_heads": 2, "global_depth": 1, "local_depth": 1,
                                           "num_classes": 3, "input_bins": 128})";
    std::ofstream(dir / "train.json") << R"({"max_epochs": 1, "batch_size": 8})";
    std::ofstream(dir / "explode.json") << R"({"max_epochs": 3, "batch_size": 1, "lr0": 1e30})";
    std::ofstream(dir / "garbage.phrp") << "definitely not a dataset";
  }
  static void TearDownTestSuite() { fs::remove_all(dir); }

  static std::string p(const char* name) { return (dir / name).string(); }

  static void ensure_trained() {
    if (fs::exists(dir / "run" / "best.ckpt")) return;
    ASSERT_EQ(cli("gen --spec " + p("spec.json") + " --out " + p("small.phrp")).code, 0);
    const auto r = cli("train --data " + p("small.phrp") + " --model-config " + p("model.json") + " --train-config " +
                       p("train.json") + " --out " + p("run"));
    ASSERT_EQ(r.code, 0) << r.out;
  }
};

fs::path Cli::dir;

}  // namespace

TEST_F(Cli, NoSubcommandIsUsageError) { EXPECT_EQ(cli("").code, 1); }

TEST_F(Cli, UnknownFlagIsUsageError) { EXPECT_EQ(cli("gen --bogus --out x").code, 1); }

TEST_F(Cli, HelpExitsZero) {
  const auto r = cli("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("sweep-snr"), std::string::npos);
}

TEST_F(Cli, GenDeskDefaultWrites48Samples) {
  const auto r = cli("gen --out " + p("desk.phrp"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("wrote 48 samples"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir / "desk.phrp.json"));
  const auto in = cli("inspect --data " + p("desk.phrp"));
  ASSERT_EQ(in.code, 0);
  EXPECT_NE(in.out.find("samples      48"), std::string::npos) << in.out;
  EXPECT_NE(in.out.find("L            128"), std::string::npos);
  EXPECT_NE(in.out.find("0: 16"), std::string::npos);
}

TEST_F(Cli, GenSeedChangesBytes) {
  ASSERT_EQ(cli("gen --spec " + p("spec.json") + " --seed 1 --out " + p("s1.phrp")).code, 0);
  ASSERT_EQ(cli("gen --spec " + p("spec.json") + " --seed 1 --out " + p("s1b.phrp")).code, 0);
  ASSERT_EQ(cli("gen --spec " + p("spec.json") + " --seed 2 --out " + p("s2.phrp")).code, 0);
  const auto a = dpffn::io::read_file(dir / "s1.phrp"), b = dpffn::io::read_file(dir / "s1b.phrp"),
             c = dpffn::io::read_file(dir / "s2.phrp");
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST_F(Cli, BadConfigIsUsageError) {
  std::ofstream(dir / "bad_spec.json") << R"({"num_classes": 0})";
  const auto r = cli("gen --spec " + p("bad_spec.json") + " --out " + p("never.phrp"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("spec.num_classes"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(dir / "never.phrp"));
}

TEST_F(Cli, CorruptDatasetIsDataError) {
  const auto r = cli("inspect --data " + p("garbage.phrp"));
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_EQ(cli("train --data " + p("garbage.phrp") + " --out " + p("never")).code, 2);
}

TEST_F(Cli, DivergentTrainingIsNumericError) {
  ASSERT_EQ(cli("gen --spec " + p("spec.json") + " --out " + p("boom.phrp")).code, 0);
  const auto r = cli("train --data " + p("boom.phrp") + " --model-config " + p("model.json") + " --train-config " +
                     p("explode.json") + " --out " + p("boom"));
  EXPECT_EQ(r.code, 3) << r.out;
}

TEST_F(Cli, GradcheckPasses) {
  const auto r = cli("gradcheck --size tiny");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("all passed"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL "), std::string::npos);
}

TEST_F(Cli, TrainWritesArtifacts) {
  ensure_trained();
  for (const char* f : {"best.ckpt", "last.ckpt", "history.jsonl", "run.json"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  const auto run = dpffn::Json::parse(dpffn::io::read_text(dir / "run" / "run.json"));
  EXPECT_EQ(run["dataset"]["git_sha1"].get<std::string>().size(), 40u);
  const auto in = cli("inspect --checkpoint " + p("run/best.ckpt"));
  EXPECT_EQ(in.code, 0) << in.out;
  EXPECT_NE(in.out.find("(match)"), std::string::npos);
}

TEST_F(Cli, EvalTagsCorruption) {
  ensure_trained();
  const auto r = cli("eval --checkpoint " + p("run/best.ckpt") + " --data " + p("small.phrp") + " --snr 0 --out " +
                     p("eval.json"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = dpffn::Json::parse(dpffn::io::read_text(dir / "eval.json"));
  EXPECT_EQ(j["snr_db"].get<double>(), 0.0);
  EXPECT_FALSE(j.contains("missing_rate"));
  EXPECT_TRUE(j.contains("confusion"));
  EXPECT_TRUE(fs::exists(dir / "eval.json.run.json"));
  EXPECT_EQ(cli("eval --checkpoint " + p("run/best.ckpt") + " --data " + p("small.phrp") + " --missing-rate 1.5").code,
            1);
}

TEST_F(Cli, SweepAndExport) {
  ensure_trained();
  const auto s = cli("sweep-missing --checkpoint " + p("run/best.ckpt") + " --data " + p("small.phrp") +
                     " --grid 0,0.5 --out " + p("miss.json"));
  ASSERT_EQ(s.code, 0) << s.out;
  EXPECT_EQ(dpffn::Json::parse(dpffn::io::read_text(dir / "miss.json")).size(), 2u);
  EXPECT_EQ(cli("sweep-snr --checkpoint " + p("run/best.ckpt") + " --data " + p("small.phrp") + " --grid 1,x").code, 1);
  const auto e = cli("export-features --checkpoint " + p("run/best.ckpt") + " --data " + p("small.phrp"));
  ASSERT_EQ(e.code, 0);
  EXPECT_EQ(e.out.rfind("label,posture,split,f0", 0), 0u);
}

TEST_F(Cli, CheckpointAgainstWrongDataset) {
  ensure_trained();
  std::ofstream(dir / "four.json") << R"({"num_classes": 4, "sequences_per_posture": 1, "hrrps_per_sequence": 4})";
  ASSERT_EQ(cli("gen --spec " + p("four.json") + " --out " + p("four.phrp")).code, 0);
  EXPECT_EQ(cli("eval --checkpoint " + p("run/best.ckpt") + " --data " + p("four.phrp")).code, 1);
}
