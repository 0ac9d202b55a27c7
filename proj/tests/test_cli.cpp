#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "json.hpp"
#include "kvfuse/data.hpp"
#include "kvfuse/model.hpp"

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<size_t>(std::count(s.begin(), s.end(), '\n'));
}

// Runs the CLI with `args`; stdout+stderr go to <dir>/last_output.txt.
int run(const fs::path& dir, const std::string& args) {
  fs::create_directories(dir);
  const std::string cmd = std::string(KVFUSE_BIN) + " " + args + " > " +
                          (dir / "last_output.txt").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string output(const fs::path& dir) { return slurp(dir / "last_output.txt"); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("kvfuse_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    const nlohmann::json cfg{
        {"model", {{"n_layers", 1}, {"n_heads", 2}, {"head_dim", 8}, {"mlp_dim", 32}}},
        {"synth", {{"train_count", 24}, {"dev_count", 6}, {"test_count", 6}}},
        {"checkpoint_every", 5},
        {"log_every", 1}};
    std::ofstream(root_ / "small.json") << cfg.dump(2);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string small(const fs::path& out) const {
    return "--config " + (root_ / "small.json").string() + " --out " + out.string();
  }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, SynthDefaultsAreDeterministic) {
  const auto a = root_ / "a", b = root_ / "b";
  ASSERT_EQ(run(root_, "synth --seed 3 --out " + a.string()), 0) << output(root_);
  ASSERT_EQ(run(root_, "synth --seed 3 --out " + b.string()), 0) << output(root_);
  EXPECT_EQ(line_count(a / "train.jsonl"), 5000u);
  EXPECT_EQ(line_count(a / "dev.jsonl"), 600u);
  EXPECT_EQ(line_count(a / "test.jsonl"), 600u);
  for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_NE(slurp(a / "dev.jsonl"), slurp(a / "test.jsonl"));
  EXPECT_TRUE(fs::exists(a / "config_synth.json"));
  // Existing files are protected unless --force is given.
  EXPECT_EQ(run(root_, "synth --seed 3 --out " + a.string()), 3);
  EXPECT_EQ(run(root_, "synth --seed 4 --force --out " + a.string()), 0);
  EXPECT_NE(slurp(a / "dev.jsonl"), slurp(b / "dev.jsonl"));
}

TEST_F(Cli, SynthPassageCountFlag) {
  const auto out = root_ / "p3";
  ASSERT_EQ(run(root_, "synth " + small(out) + " --n-passages 3"), 0) << output(root_);
  for (const auto& inst : kvfuse::load_jsonl(out / "train.jsonl")) {
    EXPECT_EQ(inst.passages.size(), 3u);
  }
}

TEST_F(Cli, TrainSmokeResumeAndEvaluate) {
  const auto out = root_ / "run";
  ASSERT_EQ(run(root_, "synth " + small(out)), 0) << output(root_);
  ASSERT_EQ(run(root_, "train " + small(out) + " --steps 10"), 0) << output(root_);
  ASSERT_TRUE(fs::exists(out / "model.kvf"));
  ASSERT_TRUE(fs::exists(out / "prefill.kvf"));
  auto ck = kvfuse::read_checkpoint(slurp(out / "model.kvf"));
  EXPECT_EQ(ck.meta["step"], 10);
  EXPECT_EQ(line_count(out / "train_log.jsonl"), 10u);
  const auto first = nlohmann::json::parse(slurp(out / "train_log.jsonl").substr(0, slurp(out / "train_log.jsonl").find('\n')));
  for (const char* key : {"step", "loss", "lr", "elapsed_s"}) EXPECT_TRUE(first.contains(key)) << key;
  EXPECT_TRUE(fs::exists(out / "config_train.json"));

  // A second plain run would clobber the checkpoint.
  EXPECT_EQ(run(root_, "train " + small(out) + " --steps 10"), 3);
  ASSERT_EQ(run(root_, "train " + small(out) + " --steps 14 --resume"), 0) << output(root_);
  EXPECT_NE(output(root_).find("resuming at step 10"), std::string::npos);
  ck = kvfuse::read_checkpoint(slurp(out / "model.kvf"));
  EXPECT_EQ(ck.meta["step"], 14);
  EXPECT_EQ(line_count(out / "train_log.jsonl"), 14u);

  ASSERT_EQ(run(root_, "eval " + small(out)), 0) << output(root_);
  const std::string report = slurp(out / "eval_report.json");
  ASSERT_EQ(run(root_, "eval " + small(out)), 0);
  EXPECT_EQ(slurp(out / "eval_report.json"), report);

  ASSERT_EQ(run(root_, "sweep " + small(out) + " --positions 0,1,4 --max-new 8"), 0)
      << output(root_);
  EXPECT_EQ(line_count(out / "sweep_report.csv"), 5u);
  ASSERT_EQ(run(root_, "sweep " + small(out) + " --mode baseline --positions 0,2 --max-new 4"), 0)
      << output(root_);
  EXPECT_EQ(line_count(out / "sweep_report.csv"), 4u);
  ASSERT_EQ(run(root_, "tlm " + small(out) + " --max-new 8"), 0) << output(root_);
  EXPECT_NE(output(root_).find("TLM 1.0000"), std::string::npos) << output(root_);
  ASSERT_TRUE(fs::exists(out / "tlm_report.json"));
}

TEST_F(Cli, InvarianceOnUntrainedModel) {
  const auto out = root_ / "inv";
  ASSERT_EQ(run(root_, "invariance --untrained --limit 2 --permutations 5 --out " + out.string()),
            0)
      << output(root_);
  const auto j = nlohmann::json::parse(slurp(out / "invariance.json"));
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_LT(j["max_abs_diff"].get<double>(), 1e-4);
}

TEST_F(Cli, ExitCodes) {
  const auto out = root_ / "codes";
  EXPECT_EQ(run(root_, "--no-such-flag"), 1);
  EXPECT_EQ(run(root_, ""), 1);
  EXPECT_EQ(run(root_, "sweep --out " + out.string() + " --mode sideways"), 1);
  EXPECT_EQ(run(root_, "sweep --out " + out.string() + " --positions 0,9"), 1);
  std::ofstream(root_ / "bad.json") << "{\"train\": {\"total_steps\": 0}}";
  EXPECT_EQ(run(root_, "train --config " + (root_ / "bad.json").string() + " --out " + out.string()),
            1);
  std::ofstream(root_ / "broken.json") << "{ not json";
  EXPECT_EQ(run(root_, "synth --config " + (root_ / "broken.json").string()), 1);
  EXPECT_EQ(run(root_, "train --out " + (root_ / "empty").string() + " --steps 1"), 3);
  EXPECT_EQ(run(root_, "eval --out " + (root_ / "empty").string()), 3);
}
