#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "keyread/cli/app.hpp"

using namespace keyread;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "keyread");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {(std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("keyread_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_file(dir / "small.json",
               R"({"generator": {"templates": 6, "docs_per_template": 3, "keys": ["number", "amount"]},
                   "model": {"channels": 2, "hidden": 12, "attention": 12, "keys": ["number", "amount"]},
                   "train": {"batch": 2, "eval_batch": 8, "phase1_steps": 2, "phase2_steps": 2, "eval_interval": 1,
                             "pretrain_steps": 2, "pretrain_eval_interval": 1}})");
  }
  void TearDown() override { fs::remove_all(dir); }

  // Dataset plus an untrained checkpoint of the small configuration.
  void make_data_and_ckpt() {
    ASSERT_EQ(run({"gen-data", "--config", (dir / "small.json").string(), "--seed", "3", "--out",
                   (dir / "data").string()})
                  .code,
              0);
    const auto rc = cli::load_run_config((dir / "small.json").string(), {});
    train::Net m(rc.model, 1);
    const auto ds = synthdoc::read_dataset(dir / "data");
    train::Trainer tr(m, ds, rc.train);
    train::save_checkpoint(dir / "ck.krm", tr.checkpoint());
  }

  fs::path dir;
};

}  // namespace

TEST(Dispatch, UsageErrorsExitTwo) {
  auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"eval", "--bogus"}).code, 2);
  EXPECT_EQ(run({"eval", "--data", "x"}).code, 2);  // --ckpt missing
  EXPECT_EQ(run({"train", "--data", "d", "--out-ckpt", "o", "--phase", "3"}).code, 2);
  EXPECT_EQ(run({"gradcheck", "--op", "conv2d", "--full-model"}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Dispatch, MissingDatasetExitsOne) {
  auto r = run({"train", "--data", "missing/", "--out-ckpt", "x.krm"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("dataset root not found"), std::string::npos) << r.err;
}

TEST(Dispatch, GradcheckSingleOp) {
  auto r = run({"gradcheck", "--op", "lstm_step", "--seed", "4"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("lstm_step"), std::string::npos);
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_EQ(r.out.find("conv2d"), std::string::npos);
}

TEST(Config, EmptyFileAndDefaults) {
  const auto d = fs::temp_directory_path() / "keyread_cfg_empty.json";
  write_file(d, "");
  EXPECT_EQ(cli::load_run_config(d.string(), {}), train::RunConfig{});
  write_file(d, "{}");
  EXPECT_EQ(cli::load_run_config(d.string(), {}), train::RunConfig{});
  EXPECT_EQ(cli::load_run_config("", {}), train::RunConfig{});
  fs::remove(d);
}

TEST(Config, UnknownKeysAreNamed) {
  const auto d = fs::temp_directory_path() / "keyread_cfg_unknown.json";
  for (const std::string text : {R"({"modle": {}})", R"({"train": {"learning_rate": 1}})",
                                 R"({"model": {"hidden": 4, "heads": 2}})"}) {
    write_file(d, text);
    try {
      cli::load_run_config(d.string(), {});
      ADD_FAILURE() << text;
    } catch (const Error& e) {
      const std::string msg = e.what();
      EXPECT_TRUE(msg.find("modle") != std::string::npos || msg.find("learning_rate") != std::string::npos ||
                  msg.find("heads") != std::string::npos)
          << msg;
    }
  }
  EXPECT_THROW(cli::load_run_config("", {"train.bogus=1"}), Error);
  fs::remove(d);
}

TEST(Config, FlagBeatsFileBeatsDefault) {
  const auto d = fs::temp_directory_path() / "keyread_cfg_prec.json";
  write_file(d, R"({"train": {"lr": 0.001, "batch": 4}, "model": {"keys": ["number", "amount"]}})");
  const auto file_only = cli::load_run_config(d.string(), {});
  EXPECT_DOUBLE_EQ(file_only.train.lr, 0.001);
  EXPECT_EQ(file_only.train.batch, 4);
  EXPECT_EQ(file_only.train.eval_batch, train::TrainConfig{}.eval_batch);
  const auto flagged =
      cli::load_run_config(d.string(), {"train.lr=0.005", "model.hidden=32", "generator.presence.number=0.5"});
  EXPECT_DOUBLE_EQ(flagged.train.lr, 0.005);
  EXPECT_EQ(flagged.train.batch, 4);
  EXPECT_EQ(flagged.model.hidden, 32);
  EXPECT_EQ(flagged.model.keys, (std::vector<std::string>{"number", "amount"}));
  const int idx = flagged.generator.field_index("number");
  EXPECT_DOUBLE_EQ(flagged.generator.fields[static_cast<std::size_t>(idx)].presence, 0.5);
  EXPECT_THROW(cli::load_run_config("", {"novalue"}), Error);
  fs::remove(d);
}

TEST(Heatmap, ConstantMapIsZero) {
  const std::vector<std::vector<float>> g = {std::vector<float>(12, 1.0f / 12)};
  const auto r = cli::export_attention_map(g, 3, 4, 24, 32);
  EXPECT_EQ(r.height, 24);
  EXPECT_EQ(r.width, 32);
  for (auto b : r.bytes) EXPECT_EQ(b, 0);
}

TEST(Heatmap, OneHotCellIsBrightBlock) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      std::vector<float> g(12, 0.0f);
      g[static_cast<std::size_t>(i * 4 + j)] = 1.0f;
      const auto r = cli::export_attention_map({g}, 3, 4, 24, 32);
      for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 32; ++x) {
          const bool inside = y >= 8 * i && y < 8 * i + 8 && x >= 8 * j && x < 8 * j + 8;
          ASSERT_EQ(r.bytes[static_cast<std::size_t>(y) * 32 + x], inside ? 255 : 0);
        }
    }
}

TEST(Heatmap, StepsAreSummed) {
  std::vector<float> a(4, 0.0f), b(4, 0.0f);
  a[0] = 1.0f;
  b[0] = 0.5f;
  b[1] = 0.5f;
  const auto r = cli::export_attention_map({a, b}, 2, 2, 16, 16);
  // sums: 1.5, 0.5, 0, 0
  EXPECT_EQ(r.bytes[0], 255);
  EXPECT_EQ(r.bytes[8], 85);
  EXPECT_EQ(r.bytes[8 * 16], 0);
  EXPECT_THROW(cli::export_attention_map({}, 2, 2, 16, 16), ContractViolation);
}

TEST_F(CliTest, GenDataIsReproducible) {
  const auto cfg = (dir / "small.json").string();
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--seed", "9", "--out", (dir / "a").string()}).code, 0);
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--seed", "9", "--out", (dir / "b").string()}).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / fs::relative(e.path(), dir / "a"))) << e.path();
  }
  EXPECT_GT(files, 30u);
}

TEST_F(CliTest, EvalReportIsLineDelimitedJson) {
  make_data_and_ckpt();
  const auto report = dir / "report.jsonl";
  auto r = run({"eval", "--data", (dir / "data").string(), "--ckpt", (dir / "ck.krm").string(), "--split", "test",
                "--report", report.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(report);
  std::vector<json> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(json::parse(l));
  ASSERT_EQ(lines.size(), 3u);
  for (const auto& j : lines) {
    EXPECT_EQ(j.size(), 3u);
    EXPECT_TRUE(j.contains("key") && j.contains("n") && j.contains("exact_match"));
  }
  EXPECT_EQ(lines[0]["key"], "amount");
  EXPECT_EQ(lines[2]["n"].get<long>(), lines[0]["n"].get<long>() + lines[1]["n"].get<long>());
}

TEST_F(CliTest, ExtractErrorsAndBatchEquivalence) {
  make_data_and_ckpt();
  const auto ck = (dir / "ck.krm").string();
  const auto img = (dir / "data" / "images" / "t0000_d000.pgm").string();
  auto bad_key = run({"extract", "--image", img, "--key", "iban", "--ckpt", ck});
  EXPECT_EQ(bad_key.code, 1);
  EXPECT_NE(bad_key.err.find("unknown key"), std::string::npos) << bad_key.err;

  synthdoc::write_image(dir / "small.pgm", synthdoc::GrayImage(32, 48));
  auto bad_size = run({"extract", "--image", (dir / "small.pgm").string(), "--key", "number", "--ckpt", ck});
  EXPECT_EQ(bad_size.code, 1);
  EXPECT_NE(bad_size.err.find("64x96"), std::string::npos) << bad_size.err;

  std::vector<std::string> paths;
  for (const auto& e : fs::directory_iterator(dir / "data" / "images")) paths.push_back(e.path().string());
  std::sort(paths.begin(), paths.end());
  paths.resize(5);
  std::string singles;
  for (const auto& p : paths) {
    auto r = run({"extract", "--image", p, "--key", "amount", "--ckpt", ck});
    ASSERT_EQ(r.code, 0) << r.err;
    singles += r.out;
  }
  std::string list;
  for (const auto& p : paths) list += p + "\n";
  write_file(dir / "batch.txt", list);
  auto batched = run({"extract", "--batch", (dir / "batch.txt").string(), "--key", "amount", "--ckpt", ck});
  ASSERT_EQ(batched.code, 0);
  EXPECT_EQ(batched.out, singles);
  EXPECT_EQ(std::count(singles.begin(), singles.end(), '\n'), 5);
}

TEST_F(CliTest, ExtractWritesHeatmapWithImageExtents) {
  make_data_and_ckpt();
  const auto img = (dir / "data" / "images" / "t0000_d000.pgm").string();
  auto r = run({"extract", "--image", img, "--key", "number", "--ckpt", (dir / "ck.krm").string(), "--heatmap",
                (dir / "heat.pgm").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto h = synthdoc::read_pgm(dir / "heat.pgm");
  EXPECT_EQ(h.height, 64);
  EXPECT_EQ(h.width, 96);
}

TEST_F(CliTest, PretrainThenTrainThenEvalIsReproducible) {
  const auto cfg = (dir / "small.json").string();
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--seed", "3", "--out", (dir / "data").string()}).code, 0);
  const auto data = (dir / "data").string();
  auto p = run({"pretrain", "--data", data, "--config", cfg, "--out-ckpt", (dir / "pre.krm").string()});
  ASSERT_EQ(p.code, 0) << p.err;
  std::string reports[2];
  for (int rep = 0; rep < 2; ++rep) {
    const auto ck = (dir / ("run" + std::to_string(rep) + ".krm")).string();
    auto t = run({"train", "--data", data, "--config", cfg, "--init-ckpt", (dir / "pre.krm").string(), "--out-ckpt",
                  ck});
    ASSERT_EQ(t.code, 0) << t.err;
    const auto rp = (dir / ("report" + std::to_string(rep) + ".jsonl")).string();
    ASSERT_EQ(run({"eval", "--data", data, "--ckpt", ck, "--report", rp}).code, 0);
    reports[rep] = slurp(rp);
  }
  EXPECT_FALSE(reports[0].empty());
  EXPECT_EQ(reports[0], reports[1]);
  EXPECT_EQ(slurp(dir / "run0.krm"), slurp(dir / "run1.krm"));

  // Continuing phase 2 from a finished checkpoint works and a mismatched
  // model section is rejected.
  auto cont = run({"train", "--data", data, "--config", cfg, "--init-ckpt", (dir / "run0.krm").string(),
                   "--out-ckpt", (dir / "more.krm").string(), "--phase", "2"});
  EXPECT_EQ(cont.code, 0) << cont.err;
  auto mismatch = run({"train", "--data", data, "--config", cfg, "--set", "model.hidden=8", "--init-ckpt",
                       (dir / "run0.krm").string(), "--out-ckpt", (dir / "x.krm").string()});
  EXPECT_EQ(mismatch.code, 1);
}
