#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "support.hpp"

using testing_support::read_file;
using testing_support::TempDir;
using testing_support::write_file;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run loire_cli(const std::string& args) {
  const std::string cmd = std::string(LOIRE_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), static_cast<int>(buf.size()), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

/// Last JSON object printed on stdout (commands print their summary last).
nlohmann::json summary(const std::string& out) {
  const auto pos = out.find("\n{");
  return nlohmann::json::parse(out.substr(pos == std::string::npos ? 0 : pos + 1));
}

const char* kTinyModels =
    " --set encoder.hidden=16 --set encoder.heads=2 --set encoder.ff=32 --set encoder.layers=1"
    " --set layout.raster=16 --set layout.state_channels=8 --set layout.hidden=16"
    " --set reasoner.lm.hidden=8 --set reasoner.lm.ff=16 --set reasoner.lm.layers=1";

}  // namespace

TEST(Cli, SynthIsByteIdenticalAcrossRuns) {
  TempDir dir;
  for (const char* sub : {"a", "b"}) {
    const auto r = loire_cli("synth --n 40 --questions 10 --out " + dir.file(sub) + " --log " + dir.file("log.jsonl"));
    ASSERT_EQ(r.code, 0) << r.out;
  }
  for (const char* f : {"scenes.jsonl", "labels.txt", "questions.jsonl", "vocab.txt"}) {
    const auto a = read_file(dir.file(std::string("a/") + f));
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, read_file(dir.file(std::string("b/") + f))) << f;
  }
  const auto r = loire_cli("synth --n 40 --questions 10 --seed 8 --out " + dir.file("c") + " --log " +
                           dir.file("log.jsonl"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(read_file(dir.file("a/scenes.jsonl")), read_file(dir.file("c/scenes.jsonl")));
}

TEST(Cli, PrepareDataRejectsOvercrowdedScenes) {
  TempDir dir;
  write_file(dir.file("labels.txt"), "cat\ndog\n");
  std::string crowded = R"({"id":"crowd","caption":"many cats","width":100,"height":100,"objects":[)";
  for (int i = 0; i < 25; ++i) {
    if (i) crowded += ",";
    crowded += R"({"label":"cat","x":)" + std::to_string((i % 5) * 20) + R"(,"y":)" + std::to_string((i / 5) * 20) +
               R"(,"w":20,"h":20})";
  }
  crowded += "]}\n";
  const std::string fine =
      R"({"id":"ok","caption":"a dog","width":100,"height":100,"objects":[{"label":"dog","x":50,"y":10,"w":30,"h":30},{"label":"cat","x":5,"y":10,"w":30,"h":30}]})"
      "\n";
  write_file(dir.file("in.jsonl"), crowded + fine);
  const auto r = loire_cli("prepare-data --in " + dir.file("in.jsonl") + " --labels " + dir.file("labels.txt") +
                           " --out " + dir.file("out.jsonl") + " --log " + dir.file("log.jsonl"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto s = summary(r.out);
  EXPECT_EQ(s["rejections"], 1);
  EXPECT_EQ(s["rejected_ids"], nlohmann::json::array({"crowd"}));
  EXPECT_EQ(s["scenes_kept"], 1);
  const auto kept = nlohmann::json::parse(read_file(dir.file("out.jsonl")));
  ASSERT_EQ(kept["objects"].size(), 2u);
  EXPECT_EQ(kept["objects"][0]["label"], "cat");  // canonical order: leftmost first
  EXPECT_DOUBLE_EQ(kept["objects"][0]["x"].get<double>(), 0.05);
  EXPECT_FALSE(read_file(dir.file("log.jsonl")).empty());
}

TEST(Cli, TwoStagePipelineRunsEndToEnd) {
  TempDir dir;
  const std::string log = " --log " + dir.file("log.jsonl");
  const std::string data = " --data " + dir.file("corpus");
  ASSERT_EQ(loire_cli("synth --n 48 --questions 30 --out " + dir.file("corpus") + log).code, 0);

  auto r = loire_cli("train-layout" + data + " --out " + dir.file("layout.ckpt") + " --set layout_train.epochs=1" +
                     kTinyModels + log);
  ASSERT_EQ(r.code, 0) << r.out;
  r = loire_cli("eval-layout --all --checkpoint " + dir.file("layout.ckpt") + data + kTinyModels + log);
  ASSERT_EQ(r.code, 0) << r.out;
  r = loire_cli("train-mlm" + data + " --out " + dir.file("mlm.ckpt") + " --set mlm.train.epochs=1" + kTinyModels +
                log);
  ASSERT_EQ(r.code, 0) << r.out;

  r = loire_cli("ablation --count-only --variants none,vibert,frozen-init,caption-mlm --vibert " +
                dir.file("layout.ckpt") + " --caption-mlm " + dir.file("mlm.ckpt") + data + kTinyModels + log);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto t = summary(r.out);
  EXPECT_TRUE(t["params_equal"].get<bool>());
  const auto n = [&](const char* v) { return t["variants"][v]["params"].get<long>(); };
  EXPECT_EQ(n("vibert"), n("frozen-init"));
  EXPECT_EQ(n("vibert"), n("caption-mlm"));
  EXPECT_LT(n("none"), n("vibert"));

  r = loire_cli("render --format text-grid --size 8 --checkpoint " + dir.file("layout.ckpt") +
                " --caption \"a cat left of a dog\" --out " + dir.file("gen.txt") + data + log);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto grid = read_file(dir.file("gen.txt"));
  EXPECT_EQ(grid.size(), 72u);  // 8 rows of 8 cells and a newline
}

TEST(Cli, UsageAndConfigErrorsExitWithOne) {
  TempDir dir;
  EXPECT_EQ(loire_cli("synth --no-such-flag").code, 1);
  EXPECT_EQ(loire_cli("synth --set layout_train.bogus=1 --out " + dir.file("x") + " --log " + dir.file("l")).code, 1);
  EXPECT_EQ(loire_cli("prepare-data --in " + dir.file("missing.jsonl") + " --labels " + dir.file("missing.txt") +
                      " --log " + dir.file("l"))
                .code,
            1);
}

TEST(Cli, CorruptCheckpointExitsWithTwo) {
  TempDir dir;
  ASSERT_EQ(loire_cli("synth --n 20 --questions 5 --out " + dir.file("corpus") + " --log " + dir.file("l")).code, 0);
  write_file(dir.file("bad.ckpt"), std::string(2048, 'x'));
  const auto r = loire_cli("eval-layout --checkpoint " + dir.file("bad.ckpt") + " --data " + dir.file("corpus") +
                           " --log " + dir.file("l"));
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_EQ(r.out.rfind("error: ", 0), 0u) << r.out;
}
