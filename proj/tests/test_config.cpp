#include <gtest/gtest.h>

#include <string>

#include "loire/config.hpp"
#include "support.hpp"

using namespace loire;

TEST(Profiles, PaperProfileCarriesFullScaleHyperparameters) {
  const auto c = paper_profile();
  EXPECT_DOUBLE_EQ(c.layout_train.lr, 5e-5);
  EXPECT_EQ(c.layout_train.batch_size, 32);
  EXPECT_EQ(c.layout_train.epochs, 15);
  EXPECT_EQ(c.layout_train.step_size, 3);
  EXPECT_DOUBLE_EQ(c.layout_train.gamma, 0.8);
  EXPECT_EQ(c.layout_train.optimizer, "adam");
  EXPECT_EQ(c.encoder.max_len, 128);
  EXPECT_EQ(c.encoder.hidden, 768);
  EXPECT_EQ(c.layout.raster, 64);
  EXPECT_EQ(c.reasoner.train.optimizer, "adamw");
  EXPECT_NO_THROW(validate(c));
}

TEST(Profiles, DeskProfileIsSmallAndValid) {
  const auto c = desk_profile();
  EXPECT_EQ(c.profile, "desk");
  EXPECT_LE(c.encoder.hidden, 64);
  EXPECT_EQ(c.layout_train.epochs, 20);
  EXPECT_EQ(c.data.scenes, 2000);
  EXPECT_EQ(c.reasoner.seeds.size(), 5u);
  EXPECT_NO_THROW(validate(c));
  EXPECT_THROW(profile_config("laptop"), ConfigError);
}

TEST(ConfigJson, RoundTripsEveryField) {
  auto c = desk_profile();
  c.seed = 99;
  c.reasoner.grid.lr = {0.5};
  EXPECT_EQ(run_config_from_json(to_json(c)), c);
  EXPECT_EQ(run_config_from_json(to_json(paper_profile())), paper_profile());
}

TEST(ResolveConfig, DocumentThenOverridesApplyInOrder) {
  const nlohmann::json doc = {{"layout_train", {{"epochs", 7}, {"lr", 0.01}}}, {"seed", 3}};
  const auto c = resolve_config("desk", doc, {"layout_train.epochs=9", "reasoner.style=winogrande"});
  EXPECT_EQ(c.layout_train.epochs, 9);
  EXPECT_DOUBLE_EQ(c.layout_train.lr, 0.01);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.reasoner.style, "winogrande");
  EXPECT_EQ(c.layout_train.batch_size, desk_profile().layout_train.batch_size);
}

TEST(ResolveConfig, IntegersAreAcceptedForRealValuedKeys) {
  EXPECT_DOUBLE_EQ(resolve_config("desk", nullptr, {"layout_train.lr=1"}).layout_train.lr, 1.0);
}

TEST(ResolveConfig, UnknownKeysAreRejectedWithTheirPath) {
  try {
    resolve_config("desk", {{"layout_train", {{"learning_rate", 1}}}});
    FAIL() << "expected a ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("layout_train.learning_rate"), std::string::npos);
  }
  EXPECT_THROW(resolve_config("desk", nullptr, {"encoder.depth=3"}), ConfigError);
}

TEST(ResolveConfig, TypeChangesAndBadValuesAreRejected) {
  EXPECT_THROW(resolve_config("desk", nullptr, {"layout_train.epochs=1.5"}), ConfigError);
  EXPECT_THROW(resolve_config("desk", nullptr, {"layout_train.epochs=\"ten\""}), ConfigError);
  EXPECT_THROW(resolve_config("desk", nullptr, {"layout_train.epochs=0"}), ConfigError);
  EXPECT_THROW(resolve_config("desk", nullptr, {"precision=f16"}), ConfigError);
  EXPECT_THROW(resolve_config("desk", nullptr, {"seed=-1"}), ConfigError);
  EXPECT_THROW(resolve_config("desk", nullptr, {"noequals"}), ConfigError);
}

TEST(ResolveConfig, DocumentProfileSelectsTheStartingPointUnlessItConflicts) {
  EXPECT_EQ(resolve_config("", {{"profile", "paper"}}).encoder.hidden, 768);
  EXPECT_THROW(resolve_config("desk", {{"profile", "paper"}}), ConfigError);
  EXPECT_THROW(resolve_config("desk", nullptr, {"profile=paper"}), ConfigError);
}

TEST(DottedOverride, FallsBackToABareString) {
  EXPECT_EQ(dotted_override("a.b=csqa"), (nlohmann::json{{"a", {{"b", "csqa"}}}}));
  EXPECT_EQ(dotted_override("a=[1,2]"), (nlohmann::json{{"a", {1, 2}}}));
  EXPECT_THROW(dotted_override("a..b=1"), ConfigError);
}

TEST(LoadJsonFile, ReportsMissingAndMalformedFiles) {
  testing_support::TempDir dir;
  EXPECT_THROW(load_json_file(dir.file("none.json")), ConfigError);
  testing_support::write_file(dir.file("bad.json"), "{ not json");
  EXPECT_THROW(load_json_file(dir.file("bad.json")), ConfigError);
  testing_support::write_file(dir.file("ok.json"), "{\"seed\": 4}");
  EXPECT_EQ(resolve_config("desk", load_json_file(dir.file("ok.json"))).seed, 4u);
}
