#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "loire/layout_train.hpp"
#include "loire/pipeline.hpp"
#include "oracles.hpp"

using namespace loire;

namespace {

struct Corpus {
  LabelVocab labels{std::vector<std::string>{}};
  std::vector<Scene> scenes;
  Tokenizer tok{WordVocab(std::vector<std::string>{})};
};

Corpus small_corpus(std::size_t n, std::uint64_t seed = 7) {
  Corpus c;
  GrammarConfig g;
  g.num_classes = 6;
  g.seed = seed;
  std::tie(c.labels, c.scenes) = synth_grammar_generate(g, n);
  std::vector<std::string> captions;
  for (const auto& s : c.scenes) captions.push_back(s.caption);
  c.tok = Tokenizer(WordVocab::build(captions));
  return c;
}

EncoderConfig tiny_encoder(int vocab) { return {vocab, 16, 1, 2, 32, 16, 0.0, 3}; }
LayoutConfig tiny_layout(int classes) { return {classes, 8, 3, 4, 4, 12, 2, 20}; }

std::vector<LayoutExample> examples(const Corpus& c, const LayoutConfig& lay, int max_len) {
  std::vector<LayoutExample> out;
  for (const auto& s : c.scenes) out.push_back(make_layout_example(s, c.tok, max_len, lay));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Loss.

TEST(LayoutLoss, UniformLabelsAndExactBoxesGiveLnOfClassesPlusOnePerStep) {
  const int C = 80;
  const std::vector<double> uniform(C + 1, 1.0 / (C + 1));
  std::vector<StepTarget> targets{{3, {0.1, 0.2, 0.3, 0.4}}, {7, {0.5, 0.5, 0.2, 0.2}}, {C, {}}};
  const std::vector<std::array<double, 4>> boxes{targets[0].box, targets[1].box};
  EXPECT_NEAR(layout_loss_value({uniform}, {}, {{C, {}}}, C), std::log(81.0), 1e-12);
  EXPECT_NEAR(layout_loss_value({uniform, uniform, uniform}, boxes, targets, C), 3 * std::log(81.0), 1e-12);
  EXPECT_NEAR(std::log(81.0), 4.394449, 1e-6);
}

TEST(LayoutLoss, BoxResidualAddsItsEuclideanNorm) {
  const std::vector<double> certain{1.0, 0.0};
  std::vector<StepTarget> targets{{0, {0.2, 0.2, 0.3, 0.3}}, {1, {}}};
  const std::vector<std::array<double, 4>> off{{0.3, 0.2, 0.3, 0.3}};
  EXPECT_NEAR(layout_loss_value({certain, {0.0, 1.0}}, off, targets, 1), 0.1, 1e-12);
  const std::vector<std::array<double, 4>> exact{targets[0].box};
  EXPECT_EQ(layout_loss_value({certain, {0.0, 1.0}}, exact, targets, 1), 0.0);
}

TEST(LayoutLoss, EndStepBoxIsIgnored) {
  const std::vector<double> p{0.5, 0.5};
  std::vector<StepTarget> targets{{1, {0.9, 0.9, 0.9, 0.9}}};
  EXPECT_NEAR(layout_loss_value({p}, {}, targets, 1), std::log(2.0), 1e-12);
  EXPECT_NEAR(layout_loss_value({p}, {{0, 0, 0, 0}}, targets, 1), std::log(2.0), 1e-12);
}

TEST(LayoutLoss, LengthMismatchAndMissingEndStepThrow) {
  const std::vector<double> p{0.5, 0.5};
  EXPECT_THROW(layout_loss_value({p, p}, {}, {{1, {}}}, 1), std::invalid_argument);
  EXPECT_THROW(layout_loss_value({p}, {}, {{0, {}}}, 1), std::invalid_argument);
  std::vector<StepOutput<double>> steps(2);
  steps[0].logits = steps[1].logits = Var<double>::zeros({1, 2});
  EXPECT_THROW(layout_loss(steps, {{1, {}}}, 1), std::invalid_argument);
}

TEST(LayoutLoss, GraphVersionAgreesWithPlainValues) {
  const std::vector<std::vector<double>> z{{0.3, -1.0, 2.0}, {0.0, 0.5, 0.1}, {1.0, 1.0, -3.0}};
  std::vector<StepTarget> targets{{0, {0.1, 0.2, 0.3, 0.4}}, {1, {0.6, 0.1, 0.2, 0.5}}, {2, {}}};
  const std::vector<std::array<double, 4>> boxes{{0.2, 0.2, 0.2, 0.2}, {0.5, 0.0, 0.3, 0.6}};
  std::vector<StepOutput<double>> steps(3);
  std::vector<std::vector<double>> dists;
  for (int t = 0; t < 3; ++t) {
    steps[t].logits = Var<double>::constant({1, 3}, z[t]);
    double m = *std::max_element(z[t].begin(), z[t].end()), s = 0;
    std::vector<double> p;
    for (double v : z[t]) s += std::exp(v - m);
    for (double v : z[t]) p.push_back(std::exp(v - m) / s);
    dists.push_back(p);
    if (t < 2) steps[t].box = Var<double>::constant({1, 4}, {boxes[t].begin(), boxes[t].end()});
  }
  EXPECT_NEAR(layout_loss(steps, targets, 2).item(), layout_loss_value(dists, boxes, targets, 2), 1e-12);
}

// ---------------------------------------------------------------------------
// Teacher forcing.

TEST(TeacherForcing, RastersHoldExactlyTheGroundTruthPrefix) {
  const auto c = small_corpus(30);
  const auto lay = tiny_layout(6);
  for (const auto& s : c.scenes) {
    const auto ex = make_layout_example(s, c.tok, 16, lay);
    ASSERT_EQ(ex.rasters.size(), s.boxes.size() + 1);
    ASSERT_EQ(ex.labels.back(), lay.end_class());
    std::vector<oracle::Box> prefix;
    for (std::size_t t = 0; t < ex.rasters.size(); ++t) {
      EXPECT_EQ(ex.rasters[t].data(), oracle::raster(prefix, 6, 8, 8));
      if (t < s.boxes.size()) {
        const auto& b = s.boxes[t];
        prefix.push_back({b.label, b.x, b.y, b.w, b.h});
        EXPECT_EQ(ex.labels[t], b.label);
      }
    }
  }
}

TEST(TeacherForcing, RejectsUncanonicalScenesAndForeignLabels) {
  Scene s{"s", "a cat", {{1, 0.5, 0, 0.1, 0.1}, {0, 0.1, 0, 0.1, 0.1}}};
  Tokenizer tok(WordVocab({"a", "cat"}));
  EXPECT_THROW(make_layout_example(s, tok, 8, tiny_layout(6)), std::invalid_argument);
  s.boxes = {{7, 0.1, 0, 0.1, 0.1}};
  EXPECT_THROW(make_layout_example(s, tok, 8, tiny_layout(6)), std::invalid_argument);
}

TEST(TeacherForcing, StepCountMatchesBoxesPlusEnd) {
  const auto c = small_corpus(5);
  LayoutModel<double> model(tiny_encoder(c.tok.vocab().size()), tiny_layout(6));
  for (const auto& ex : examples(c, tiny_layout(6), 16)) {
    const auto steps = teacher_forced_steps(model, ex);
    ASSERT_EQ(steps.size(), ex.boxes.size() + 1);
    for (std::size_t t = 0; t + 1 < steps.size(); ++t) EXPECT_EQ(steps[t].box.shape(), (Shape{1, 4}));
  }
}

// ---------------------------------------------------------------------------
// Gradient checks, one per model part.

class PartGradient : public ::testing::TestWithParam<const char*> {};

TEST_P(PartGradient, MatchesCentralDifferences) {
  const auto c = small_corpus(3);
  const auto lay = tiny_layout(6);
  LayoutModel<double> model(tiny_encoder(c.tok.vocab().size()), lay);
  const auto ex = make_layout_example(c.scenes[0], c.tok, 16, lay);
  ASSERT_GE(ex.boxes.size(), 2u);
  const auto res = grad_check(model, parse_model_part(GetParam()), ex, 1e-5, 220, 5);
  EXPECT_GE(res.checked, 200u);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_param;
}

INSTANTIATE_TEST_SUITE_P(Parts, PartGradient,
                         ::testing::Values("encoder", "convgru", "label_head", "box_head", "full"));

TEST(ModelParts, EveryParameterBelongsToExactlyOnePart) {
  LayoutModel<double> model(tiny_encoder(20), tiny_layout(6));
  for (const auto& name : model.params().names()) {
    int hits = 0;
    for (auto p : {ModelPart::encoder, ModelPart::convgru, ModelPart::label_head, ModelPart::box_head})
      hits += part_contains(p, name);
    EXPECT_EQ(hits, 1) << name;
  }
  EXPECT_THROW(parse_model_part("decoder"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Training.

TEST(SplitIndices, PartitionsAndHoldsOutTheCeiling) {
  const auto [train, val] = split_indices(41, 0.05, 3);
  EXPECT_EQ(val.size(), 3u);
  EXPECT_EQ(train.size(), 38u);
  std::set<std::size_t> all(train.begin(), train.end());
  all.insert(val.begin(), val.end());
  EXPECT_EQ(all.size(), 41u);
  EXPECT_EQ(split_indices(41, 0.05, 3), split_indices(41, 0.05, 3));
}

TEST(TrainLayout, ReducesTheTrainingLossAndIsDeterministic) {
  const auto c = small_corpus(40);
  const auto lay = tiny_layout(6);
  const auto data = examples(c, lay, 16);
  const std::vector<LayoutExample> train(data.begin(), data.begin() + 34), val(data.begin() + 34, data.end());
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch_size = 8;
  cfg.epochs = 4;
  cfg.step_size = 2;
  cfg.gamma = 0.5;

  auto run = [&] {
    LayoutModel<double> model(tiny_encoder(c.tok.vocab().size()), lay);
    const double before = eval_layout(model, train).loss;
    std::vector<std::string> lines;
    auto result = train_layout(model, train, val, cfg, [&](const EpochRecord& r) {
      lines.push_back(r.split + " " + std::to_string(r.epoch) + " " + std::to_string(r.metrics.loss));
    });
    return std::tuple{before, eval_layout(model, train).loss, lines, result.best_epoch};
  };
  const auto [before, after, lines, best] = run();
  EXPECT_LT(after, before);
  EXPECT_EQ(lines.size(), 8u);
  EXPECT_GE(best, 1);
  EXPECT_LE(best, 4);
  const auto [before2, after2, lines2, best2] = run();
  EXPECT_EQ(before, before2);
  EXPECT_EQ(after, after2);
  EXPECT_EQ(lines, lines2);
}

TEST(TrainLayout, RestoresTheBestValidationEpoch) {
  const auto c = small_corpus(20);
  const auto lay = tiny_layout(6);
  const auto data = examples(c, lay, 16);
  const std::vector<LayoutExample> train(data.begin(), data.begin() + 16), val(data.begin() + 16, data.end());
  TrainConfig cfg;
  cfg.lr = 5e-3;
  cfg.batch_size = 4;
  cfg.epochs = 3;
  LayoutModel<double> model(tiny_encoder(c.tok.vocab().size()), lay);
  const auto result = train_layout(model, train, val, cfg);
  double best = 1e300;
  for (const auto& r : result.history)
    if (r.split == "val") best = std::min(best, r.metrics.loss);
  EXPECT_DOUBLE_EQ(result.best_val.loss, best);
  EXPECT_NEAR(eval_layout(model, val).loss, best, 1e-9);
}

TEST(TrainLayout, RejectsBadConfigurationsAndEmptyData) {
  LayoutModel<double> model(tiny_encoder(20), tiny_layout(6));
  TrainConfig cfg;
  EXPECT_THROW(train_layout(model, {}, {}, cfg), TrainingError);
  cfg.lr = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.optimizer = "sgd";
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(EvalLayout, CountsLabelAndBoxStepsPerExample) {
  const auto c = small_corpus(6);
  const auto lay = tiny_layout(6);
  LayoutModel<double> model(tiny_encoder(c.tok.vocab().size()), lay);
  const auto data = examples(c, lay, 16);
  const auto m = eval_layout(model, data);
  long boxes = 0;
  for (const auto& ex : data) boxes += static_cast<long>(ex.boxes.size());
  EXPECT_EQ(m.box_steps, boxes);
  EXPECT_EQ(m.label_steps, boxes + static_cast<long>(data.size()));
  EXPECT_GE(m.label_accuracy, 0.0);
  EXPECT_LE(m.label_accuracy, 1.0);
}

// ---------------------------------------------------------------------------
// Caption MLM ablation.

TEST(MlmAblation, LowersTheHeldFixedLossAndKeepsTheEncoderShape) {
  const auto c = small_corpus(40);
  std::vector<std::string> captions;
  for (const auto& s : c.scenes) captions.push_back(s.caption);
  const auto ecfg = tiny_encoder(c.tok.vocab().size());
  TextEncoder<double> enc(ecfg);
  TextEncoder<double> reference(ecfg);
  MlmHead<double> head(enc);
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch_size = 8;
  cfg.epochs = 4;
  const auto res = train_mlm_ablation(enc, head, captions, c.tok, cfg, 0.15);
  EXPECT_LT(res.final_loss, res.initial_loss);
  EXPECT_EQ(res.step_losses.size(), 20u);
  ASSERT_EQ(enc.params().names(), reference.params().names());
  for (std::size_t i = 0; i < enc.params().size(); ++i)
    EXPECT_EQ(enc.params().at(i).shape(), reference.params().at(i).shape());
  EXPECT_NE(enc.params().at(0).value(), reference.params().at(0).value());
}
