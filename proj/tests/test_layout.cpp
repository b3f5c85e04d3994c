#include <gtest/gtest.h>

#include "funnel/layout.hpp"
#include "funnel/rng.hpp"

namespace funnel {
namespace {

TEST(ParseLayout, BaseFunnel) {
  const LayoutSpec s = parse_layout("B6-6-6H768");
  ASSERT_EQ(s.blocks.size(), 3u);
  for (const auto& b : s.blocks) EXPECT_EQ(b, (BlockSpec{6, 1}));
  EXPECT_EQ(s.hidden, 768u);
  EXPECT_EQ(s.heads(), 12u);
  EXPECT_EQ(s.head_dim(), 64u);
  EXPECT_EQ(s.ffn_inner(), 3072u);
  EXPECT_EQ(s.embed_dim(), 768u);
  EXPECT_EQ(s.decoder_layers, 0u);
  EXPECT_FALSE(s.plain);
}

TEST(ParseLayout, TiedBlocksAndDecoder) {
  const LayoutSpec s = parse_layout("B6-3x2-3x2H768D2");
  ASSERT_EQ(s.blocks.size(), 3u);
  EXPECT_EQ(s.blocks[0], (BlockSpec{6, 1}));
  EXPECT_EQ(s.blocks[1], (BlockSpec{3, 2}));
  EXPECT_EQ(s.blocks[2], (BlockSpec{3, 2}));
  EXPECT_EQ(s.decoder_layers, 2u);
  EXPECT_EQ(s.total_encoder_layers(), 18u);
  EXPECT_EQ(s.unique_encoder_layers(), 12u);
}

TEST(ParseLayout, PlainLayoutIsOneBlock) {
  const LayoutSpec s = parse_layout("L12H768");
  ASSERT_EQ(s.blocks.size(), 1u);
  EXPECT_EQ(s.blocks[0], (BlockSpec{12, 1}));
  EXPECT_TRUE(s.plain);
  EXPECT_EQ(s.decoder_layers, 0u);
}

TEST(ParseLayout, ConsecutiveTying) {
  const BlockSpec b{3, 2};
  const std::size_t expected[] = {0, 0, 1, 1, 2, 2};
  for (std::size_t t = 0; t < b.total_layers(); ++t) EXPECT_EQ(b.param_set_for_layer(t), expected[t]);
}

TEST(ParseLayout, HiddenNotMultipleOf64IsValidationError) {
  EXPECT_THROW(parse_layout("B6-6H770"), LayoutValidationError);
}

TEST(ParseLayout, MalformedStringsReportOffset) {
  struct Case {
    const char* text;
    std::size_t offset;
  };
  const Case cases[] = {
      {"", 0},          {"X12H768", 0},     {"B6-6XH768", 4}, {"B6--6H768", 3},
      {"B6-6H", 5},     {"B6-6H768D", 9},   {"L12H768D2", 7}, {"B0-6H768", 1},
      {"B6x0H768", 3},  {"b6-6H768", 0},    {"B6-6H768 ", 8}, {"B6-6 H768", 4},
  };
  for (const auto& c : cases) {
    try {
      parse_layout(c.text);
      ADD_FAILURE() << "accepted '" << c.text << "'";
    } catch (const LayoutParseError& e) {
      EXPECT_EQ(e.offset(), c.offset) << c.text << ": " << e.what();
    }
  }
}

TEST(FormatLayout, Examples) {
  EXPECT_EQ(format_layout(parse_layout("B6-6-6H768")), "B6-6-6H768");
  EXPECT_EQ(format_layout(parse_layout("B6-6-6H768D2")), "B6-6-6H768D2");
  EXPECT_EQ(format_layout(parse_layout("B6-3x2-3x2H768")), "B6-3x2-3x2H768");
  EXPECT_EQ(format_layout(parse_layout("L12H768")), "L12H768");
  // An explicit x1 is accepted but not echoed back.
  EXPECT_EQ(format_layout(parse_layout("B6x1-6H768")), "B6-6H768");
}

TEST(FormatLayout, RoundTripOverRandomSpecs) {
  Rng rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    LayoutSpec s;
    s.plain = rng.uniform_int(4) == 0;
    const std::size_t blocks = s.plain ? 1 : 1 + rng.uniform_int(5);
    for (std::size_t b = 0; b < blocks; ++b) {
      s.blocks.push_back({1 + rng.uniform_int(24), s.plain ? 1 : 1 + rng.uniform_int(4)});
    }
    s.hidden = 64 * (1 + rng.uniform_int(32));
    s.decoder_layers = s.plain ? 0 : rng.uniform_int(4);
    const std::string text = format_layout(s);
    EXPECT_EQ(parse_layout(text), s) << text;
  }
}

}  // namespace
}  // namespace funnel
