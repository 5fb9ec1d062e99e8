#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cdet");
  std::vector<const char*> argv;
  for (const auto& a : args) {
    argv.push_back(a.c_str());
  }
  std::ostringstream out;
  std::ostringstream err;
  const int code = cdet::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return Result{code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cdet_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const fs::path kGolden = fs::path(CDET_TEST_DATA_DIR) / "golden";

}  // namespace

TEST(Cli, HelpDocumentsEveryFlag) {
  const Result top = run_cli({"--help"});
  EXPECT_EQ(top.code, 0);
  for (const char* s : {"--config", "--set", "--seed", "--threads", "gen-data", "train", "infer",
                        "eval", "analyze", "anchors", "ablate", "bench"}) {
    EXPECT_NE(top.out.find(s), std::string::npos) << s;
  }
  const std::map<std::string, std::vector<std::string>> flags{
      {"gen-data", {"--out", "--count"}},
      {"train", {"--data", "--out", "--steps", "--log", "--filter-positives", "--dump-assignments"}},
      {"infer", {"--checkpoint", "--data", "--image", "--out"}},
      {"eval", {"--detections", "--annotations", "--out", "--eleven-point", "--pr-dir"}},
      {"analyze", {"--detections", "--annotations", "--out", "--eleven-point"}},
      {"anchors", {"--width", "--height", "--out"}},
      {"ablate", {"--train-data", "--test-data", "--train-count", "--test-count", "--seeds", "--out"}},
      {"bench", {"--checkpoint", "--image", "--reps", "--out"}}};
  for (const auto& [cmd, list] : flags) {
    const Result r = run_cli({cmd, "--help"});
    EXPECT_EQ(r.code, 0) << cmd;
    for (const auto& f : list) {
      EXPECT_NE(r.out.find(f), std::string::npos) << cmd << " " << f;
    }
  }
}

TEST(Cli, AnchorsPrintsOneLinePerAnchor) {
  const Result r = run_cli({"anchors"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t lines = 0;
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  const bool header = line.rfind("idx", 0) == 0 || line.rfind("#", 0) == 0;
  lines = header ? 0 : 1;
  while (std::getline(in, line)) {
    ++lines;
  }
  EXPECT_EQ(lines, 6375U);
  EXPECT_NE(r.err.find("6375"), std::string::npos);
}

TEST(Cli, MissingSubcommandOrBadFlagIsUsageError) {
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"anchors", "--bogus"}).code, 2);
  EXPECT_EQ(run_cli({"--config", "/nonexistent/x.json", "anchors"}).code, 2);
}

TEST(Cli, GenerateTrainZeroStepsInferEval) {
  const fs::path dir = scratch("flow");
  const std::vector<std::string> small{"--set", "network.image_width=64", "--set",
                                       "network.image_height=64", "--set", "data.image_width=64",
                                       "--set", "data.image_height=64"};
  auto with = [&](std::vector<std::string> a) {
    a.insert(a.begin(), small.begin(), small.end());
    return run_cli(a);
  };
  Result r = with({"gen-data", "--out", (dir / "data").string(), "--count", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "data" / "annotations.jsonl"));
  r = with({"train", "--data", (dir / "data").string(), "--out", (dir / "m.ckpt").string(),
            "--steps", "0", "--log", (dir / "log.jsonl").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "m.ckpt"));
  r = with({"train", "--data", (dir / "data").string(), "--out", (dir / "m2.ckpt").string(),
            "--steps", "0", "--filter-positives", "false", "--dump-assignments",
            (dir / "assign.txt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("\"filter_positives\": false"), std::string::npos);
  {
    std::ifstream in(dir / "assign.txt");
    std::string line;
    std::size_t positives = 0;
    while (std::getline(in, line)) {
      std::istringstream fields(line);
      std::string id, stage, status;
      std::size_t anchor = 0;
      fields >> id >> stage >> anchor >> status;
      EXPECT_TRUE(stage == "arm" || stage == "odm") << line;
      EXPECT_TRUE(status == "positive" || status == "filtered" || status == "mined") << line;
      positives += status == "positive";
    }
    EXPECT_GT(positives, 0U);
  }
  r = with({"infer", "--checkpoint", (dir / "m.ckpt").string(), "--data",
            (dir / "data").string(), "--out", (dir / "dets.txt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = with({"eval", "--detections", (dir / "dets.txt").string(), "--annotations",
            (dir / "data").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("mAP@0.5:"), std::string::npos);
  r = with({"analyze", "--detections", (dir / "dets.txt").string(), "--annotations",
            (dir / "data").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  fs::remove_all(dir);
}

TEST(Cli, ExitCodesByErrorCategory) {
  const fs::path dir = scratch("codes");
  EXPECT_EQ(run_cli({"--set", "train.nope=1", "anchors"}).code, 2);
  EXPECT_EQ(run_cli({"eval", "--detections", (dir / "missing.txt").string(), "--annotations",
                     (kGolden / "annotations.jsonl").string()})
                .code,
            3);
  const std::vector<std::string> small{"--set", "network.image_width=64", "--set",
                                       "network.image_height=64", "--set", "data.image_width=64",
                                       "--set", "data.image_height=64"};
  std::vector<std::string> gen = small;
  for (const char* a : {"gen-data", "--out", "", "--count", "2"}) {
    gen.emplace_back(a);
  }
  gen[gen.size() - 3] = (dir / "data").string();
  ASSERT_EQ(run_cli(gen).code, 0);
  std::vector<std::string> diverge = small;
  for (const char* a : {"--set", "train.lr_schedule=[[0,1e8]]", "--set", "train.momentum=0",
                        "train", "--data", "", "--out", "", "--steps", "50"}) {
    diverge.emplace_back(a);
  }
  diverge[diverge.size() - 5] = (dir / "data").string();
  diverge[diverge.size() - 3] = (dir / "m.ckpt").string();
  const Result r = run_cli(diverge);
  EXPECT_EQ(r.code, 4) << r.err;
  fs::remove_all(dir);
}

TEST(Cli, GoldenEvalReportIsByteIdentical) {
  const fs::path dir = scratch("golden");
  const Result r = run_cli({"eval", "--detections", (kGolden / "detections.txt").string(),
                            "--annotations", (kGolden / "annotations.jsonl").string(), "--out",
                            (dir / "report.txt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir / "report.txt"), slurp(kGolden / "report.txt"));
  fs::remove_all(dir);
}
