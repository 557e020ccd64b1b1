#include <gtest/gtest.h>

#include <random>
#include <string>
#include <vector>

#include "loire/render.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace loire;

namespace {

const LabelVocab& names() {
  static const LabelVocab v(std::vector<std::string>{"person", "dog", "cat", "tree", "sofa", "bus"});
  return v;
}

}  // namespace

TEST(TextGrid, EmptyLayoutIsAllDots) {
  EXPECT_EQ(render_text_grid({}, names(), 3, 2), "...\n...\n");
}

TEST(TextGrid, CentredPersonFillsAFourByFourBlock) {
  const auto grid = render_text_grid({{0, 0.25, 0.25, 0.5, 0.5}}, names(), 8, 8);
  const std::string expected =
      "........\n"
      "........\n"
      "..pppp..\n"
      "..pppp..\n"
      "..pppp..\n"
      "..pppp..\n"
      "........\n"
      "........\n";
  EXPECT_EQ(grid, expected);
}

TEST(TextGrid, LaterBoxesPaintOverEarlierOnes) {
  const auto grid = render_text_grid({{1, 0, 0, 1, 1}, {2, 0.5, 0, 0.5, 1}}, names(), 4, 1);
  EXPECT_EQ(grid, "ddcc\n");
}

TEST(TextGrid, CoverageAgreesWithTheRasterOracle) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const int W = 1 + trial % 17, H = 1 + (trial * 5) % 13;
    std::vector<LabeledBox> boxes;
    std::vector<oracle::Box> obox;
    // One box per label, so the oracle's channel index identifies the painter.
    for (int label = 0; label < 6; ++label) {
      if (u(rng) < 0.3) continue;
      const double x = u(rng), y = u(rng), w = u(rng) * (1 - x), h = u(rng) * (1 - y);
      boxes.push_back({label, x, y, w, h});
      obox.push_back({label, x, y, w, h});
    }
    const auto r = oracle::raster(obox, 6, W, H);
    std::string expected;
    for (int h = 0; h < H; ++h) {
      for (int w = 0; w < W; ++w) {
        char c = '.';
        for (const auto& b : boxes)
          if (r[(static_cast<std::size_t>(b.label) * H + h) * W + w]) c = category_letter(names(), b.label);
        expected += c;
      }
      expected += '\n';
    }
    ASSERT_EQ(render_text_grid(boxes, names(), W, H), expected) << "trial " << trial;
  }
}

TEST(TextGrid, RejectsEmptyGrids) {
  EXPECT_THROW(render_text_grid({}, names(), 0, 4), std::invalid_argument);
}

TEST(Svg, IsDeterministicAndEscapesTheCaption) {
  const std::vector<LabeledBox> boxes{{3, 0.5, 0.1, 0.2, 0.3}, {0, 0.1, 0.1, 0.2, 0.6}};
  const auto a = render_svg(boxes, names(), 128, "a <big> tree & a person");
  EXPECT_EQ(a, render_svg(boxes, names(), 128, "a <big> tree & a person"));
  EXPECT_NE(a.find("a &lt;big&gt; tree &amp; a person"), std::string::npos);
  EXPECT_NE(a.find(">person</text>"), std::string::npos);
  EXPECT_NE(a.find(">tree</text>"), std::string::npos);
  EXPECT_LT(a.find(">person</text>"), a.find(">tree</text>"));  // canonical order
  EXPECT_NE(a.find("x=\"12.80\" y=\"12.80\" width=\"25.60\" height=\"76.80\""), std::string::npos);
}

TEST(RenderLayout, WritesByteIdenticalFiles) {
  testing_support::TempDir dir;
  const std::vector<LabeledBox> boxes{{5, 0.0, 0.5, 1.0, 0.5}};
  for (auto fmt : {RenderFormat::svg, RenderFormat::text_grid}) {
    render_layout(boxes, names(), dir.file("a"), fmt, 16, "a bus");
    render_layout(boxes, names(), dir.file("b"), fmt, 16, "a bus");
    EXPECT_EQ(testing_support::read_file(dir.file("a")), testing_support::read_file(dir.file("b")));
  }
  EXPECT_EQ(testing_support::read_file(dir.file("a")).substr(0, 17), "................\n");
  EXPECT_THROW(render_layout(boxes, names(), dir.file("no/such/dir/x"), RenderFormat::svg, 16), RenderError);
}

TEST(RenderFormat, ParsesKnownNames) {
  EXPECT_EQ(parse_render_format("svg"), RenderFormat::svg);
  EXPECT_EQ(parse_render_format("text-grid"), RenderFormat::text_grid);
  EXPECT_THROW(parse_render_format("png"), std::invalid_argument);
}
