#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "funnel/checkpoint.hpp"
#include "funnel/cli.hpp"
#include "funnel/corpus.hpp"

namespace funnel {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
  json j() const { return json::parse(out); }
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "funnel");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Outcome r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class CliFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("funnel_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream corpus(dir_ / "corpus.txt");
    for (const auto& line : synthetic_corpus(4, 8, 15, 2, 7)) corpus << line << "\n";
    save_json({{"layout", "B2-2-2H64"},
               {"vocab_size", 24},
               {"seq_len", 16},
               {"batch_size", 2},
               {"steps", 4},
               {"warmup_steps", 1},
               {"seed", 3}},
              dir_ / "config.json");
  }
  void TearDown() override { fs::remove_all(dir_); }

  Outcome train(const std::string& out) {
    return run({"train-toy", "--config", (dir_ / "config.json").string(), "--corpus",
                (dir_ / "corpus.txt").string(), "--out", (dir_ / out).string()});
  }

  fs::path dir_;
};

TEST(Cli, NoCommandIsUsageError) {
  const Outcome r = run({});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("error: usage"), std::string::npos) << r.err;
  EXPECT_EQ(run({"--help"}).code, cli::kExitOk);
}

TEST(Cli, Analyze) {
  const Outcome r = run({"analyze", "--layout", "B6-6-6H768", "--format", "json"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_DOUBLE_EQ(r.j()["effective_layers"].get<double>(), 10.5);
  EXPECT_EQ(r.j()["seq_len"], 512);

  const Outcome bad = run({"analyze", "--layout", "B6-6XH768"});
  EXPECT_EQ(bad.code, cli::kExitUsage);
  EXPECT_EQ(bad.err.rfind("error: layout:", 0), 0u) << bad.err;
  EXPECT_NE(bad.err.find("byte 4"), std::string::npos) << bad.err;

  EXPECT_EQ(run({"analyze", "--layout", "L2H64", "--mode", "train"}).code, cli::kExitUsage);
}

TEST(Cli, Compare) {
  Outcome r = run({"compare", "--layouts", "B6-6-6H768,B6-3x2-3x2,B4-4-4", "--baseline", "L12H768",
               "--format", "json"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  auto rows = r.j()["rows"];
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1]["layout"], "B6-3x2-3x2H768");
  EXPECT_DOUBLE_EQ(rows[0]["flops_ratio_linear"].get<double>(), 0.88);
  EXPECT_DOUBLE_EQ(rows[1]["flops_ratio_linear"].get<double>(), 0.88);
  EXPECT_DOUBLE_EQ(rows[2]["flops_ratio_linear"].get<double>(), 0.58);

  r = run({"compare", "--layouts", "B6-6-6D2,B4-4-4D2", "--baseline", "L12H768", "--mode", "pretrain",
           "--format", "json"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_EQ(r.j()["rows"][0]["layout"], "B6-6-6H768D2");
  EXPECT_DOUBLE_EQ(r.j()["rows"][0]["flops_ratio_linear"].get<double>(), 1.04);
  EXPECT_DOUBLE_EQ(r.j()["rows"][1]["flops_ratio_linear"].get<double>(), 0.75);

  r = run({"compare", "--layouts", "L12H768", "--baseline", "L12H768", "--format", "json"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_DOUBLE_EQ(r.j()["rows"][0]["flops_ratio_linear"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(r.j()["rows"][0]["flops_ratio_exact"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(r.j()["rows"][0]["params_ratio"].get<double>(), 1.0);

  r = run({"compare", "--layouts", "B6-6-6H768", "--baseline", "L24H1024"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_EQ(r.err.rfind("error: contract:", 0), 0u) << r.err;
}

TEST(Cli, VerifyAttention) {
  const Outcome a = run({"verify-attn", "--trials", "20", "--seed", "5", "--format", "json"});
  ASSERT_EQ(a.code, cli::kExitOk) << a.err;
  EXPECT_TRUE(a.j()["pass"].get<bool>());
  EXPECT_LE(a.j()["max_dev_factorized"].get<double>(), 1e-8);
  EXPECT_EQ(run({"verify-attn", "--trials", "20", "--seed", "5", "--format", "json"}).out, a.out);

  const Outcome none = run({"verify-attn", "--trials", "0"});
  EXPECT_EQ(none.code, cli::kExitOk);
  EXPECT_NE(none.err.find("warning"), std::string::npos) << none.err;
}

TEST(Cli, GradCheck) {
  const Outcome dropout = run({"gradcheck", "--layout", "L2H64", "--dropout", "0.1"});
  EXPECT_EQ(dropout.code, cli::kExitUsage);

  const Outcome r = run({"gradcheck", "--layout", "L1H64", "--coords", "4", "--format", "json"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_TRUE(r.j()["pass"].get<bool>());
  EXPECT_LT(r.j()["max_rel_error"].get<double>(), 1e-4);
}

TEST_F(CliFiles, TrainToyIsReproducible) {
  const Outcome a = train("a");
  ASSERT_EQ(a.code, cli::kExitOk) << a.err;
  ASSERT_EQ(train("b").code, cli::kExitOk);
  for (const char* f : {"loss.csv", "checkpoint.ftnt", "vocab.txt", "config.json"}) {
    ASSERT_TRUE(fs::exists(dir_ / "a" / f)) << f;
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
  json sa = load_json(dir_ / "a" / "summary.json");
  json sb = load_json(dir_ / "b" / "summary.json");
  sa.erase("out");
  sb.erase("out");
  EXPECT_EQ(sa, sb);
  const std::string csv = slurp(dir_ / "a" / "loss.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(csv.rfind("step,loss,lr\n", 0), 0u);
  EXPECT_EQ(a.j()["steps"], 4);

  const Outcome shorter = run({"train-toy", "--config", (dir_ / "config.json").string(), "--corpus",
                           (dir_ / "corpus.txt").string(), "--out", (dir_ / "c").string(), "--steps", "2"});
  ASSERT_EQ(shorter.code, cli::kExitOk) << shorter.err;
  EXPECT_EQ(shorter.j()["steps"], 2);
}

TEST_F(CliFiles, TrainToyInputErrors) {
  Outcome r = run({"train-toy", "--config", (dir_ / "config.json").string(), "--corpus",
               (dir_ / "missing.txt").string(), "--out", (dir_ / "x").string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("missing.txt"), std::string::npos) << r.err;

  save_json({{"layout", "B2-2-2H64"}, {"vocab_size", 24}, {"seq_len", 12}}, dir_ / "bad.json");
  r = run({"train-toy", "--config", (dir_ / "bad.json").string(), "--corpus", (dir_ / "corpus.txt").string(),
           "--out", (dir_ / "x").string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
}

TEST_F(CliFiles, EncodeDumps) {
  ASSERT_EQ(train("m").code, cli::kExitOk);
  {
    std::ofstream in(dir_ / "input.txt");
    in << "w1 w2 w3\nw4 unseen w5 w6\n";
  }
  auto encode = [&](const std::string& dump) {
    return run({"encode", "--config", (dir_ / "m" / "config.json").string(), "--checkpoint",
                (dir_ / "m" / "checkpoint.ftnt").string(), "--input", (dir_ / "input.txt").string(), "--dump",
                dump, "--format", "json"});
  };

  Outcome r = encode("shapes");
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  ASSERT_EQ(r.j()["lines"].size(), 2u);
  EXPECT_EQ(r.j()["lines"][0]["shapes"], json::parse("[[16,64],[8,64],[4,64]]"));

  r = encode("tokens");
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_EQ(r.j()["lines"][1]["tokens"].size(), 16u);
  EXPECT_EQ(r.j()["lines"][1]["tokens"][0].size(), 64u);

  r = encode("cls");
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_EQ(r.j()["lines"][0]["cls"].size(), 64u);
  EXPECT_EQ(encode("cls").out, r.out);

  r = run({"encode", "--config", (dir_ / "m" / "config.json").string(), "--checkpoint",
           (dir_ / "nope.ftnt").string(), "--input", (dir_ / "input.txt").string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_EQ(r.err.rfind("error: checkpoint:", 0), 0u) << r.err;
}

TEST_F(CliFiles, EncodeRejectsMismatchedCheckpoint) {
  ASSERT_EQ(train("m").code, cli::kExitOk);
  json cfg = load_json(dir_ / "m" / "config.json");
  cfg["layout"] = "B2-2-2-2H64";
  save_json(cfg, dir_ / "other.json");
  {
    std::ofstream in(dir_ / "input.txt");
    in << "w1 w2\n";
  }
  const Outcome r = run({"encode", "--config", (dir_ / "other.json").string(), "--checkpoint",
                     (dir_ / "m" / "checkpoint.ftnt").string(), "--input", (dir_ / "input.txt").string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_EQ(r.err.rfind("error: checkpoint:", 0), 0u) << r.err;
  EXPECT_NE(r.err.find("encoder.block3"), std::string::npos) << r.err;
}

}  // namespace
}  // namespace funnel
