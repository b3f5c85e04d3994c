#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "funnel/funnel.hpp"
#include "helpers.hpp"

namespace funnel {
namespace {

using testing::random_params;
using testing::random_tensor;
using testing::tiny_config;

SequenceState make_state(Tape& tape, const Tensor& h, std::vector<std::uint8_t> valid = {}) {
  SequenceState s;
  s.hidden = tape.constant(h);
  s.pos.resize(h.dim(0));
  std::iota(s.pos.begin(), s.pos.end(), Position{0});
  s.valid = valid.empty() ? std::vector<std::uint8_t>(h.dim(0), 1) : std::move(valid);
  return s;
}

Tensor column(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n, 1}, std::move(v));
}

std::vector<double> values(const SequenceState& s) {
  const auto d = s.hidden.value().data();
  return {d.begin(), d.end()};
}

TEST(PoolPair, MeanMaxExamples) {
  Tape tape;
  EXPECT_EQ(values(pool_pair(make_state(tape, column({1, 3, 5, 7})), PoolOp::Mean)),
            (std::vector<double>{2, 6}));
  const SequenceState odd = pool_pair(make_state(tape, column({1, 3, 5})), PoolOp::Mean);
  EXPECT_EQ(values(odd), (std::vector<double>{2, 5}));
  EXPECT_EQ(odd.pos, (std::vector<Position>{0, 2}));
  EXPECT_EQ(values(pool_pair(make_state(tape, column({1, 3, 5, 7})), PoolOp::Max)),
            (std::vector<double>{3, 7}));
}

TEST(PoolPair, PaddingSemantics) {
  Tape tape;
  const SequenceState s = make_state(tape, column({4, 9, 5, 7, -2, -3}), {1, 0, 1, 1, 0, 0});
  const SequenceState mean = pool_pair(s, PoolOp::Mean);
  EXPECT_EQ(values(mean), (std::vector<double>{4, 6, 0}));
  EXPECT_EQ(mean.valid, (std::vector<std::uint8_t>{1, 1, 0}));
  EXPECT_EQ(mean.pos, (std::vector<Position>{0, 2, 4}));
  EXPECT_EQ(values(pool_pair(s, PoolOp::Max)), (std::vector<double>{4, 7, 0}));
}

TEST(TopAttn, SelectExamples) {
  const double scores[] = {0.1, 0.9, 0.5, 0.3};
  EXPECT_EQ(top_attn_select(scores), (std::vector<std::size_t>{1, 2}));
  const double equal[] = {1, 1, 1, 1, 1};
  EXPECT_EQ(top_attn_select(equal), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(TopAttn, UniformAttentionColumnSumsTie) {
  const std::size_t heads = 2, tq = 3, t = 6;
  const Tensor attn = Tensor::filled({heads, tq, t}, 1.0 / t);
  const auto scores = top_attn_scores(attn);
  for (double s : scores) EXPECT_NEAR(s, heads * static_cast<double>(tq) / t, 1e-15);
  Tape tape;
  Rng rng(1);
  const SequenceState pooled = pool_top_attn(make_state(tape, random_tensor({t, 2}, rng)), &attn);
  EXPECT_EQ(pooled.pos, (std::vector<Position>{0, 1, 2}));
}

TEST(TopAttn, KeepsOrderAndPositions) {
  Tape tape;
  Tensor attn({1, 1, 5}, {0.05, 0.4, 0.1, 0.3, 0.15});
  const SequenceState s = make_state(tape, column({10, 11, 12, 13, 14}));
  const SequenceState out = pool_top_attn(s, &attn);
  EXPECT_EQ(values(out), (std::vector<double>{11, 13, 14}));
  EXPECT_EQ(out.pos, (std::vector<Position>{1, 3, 4}));
  EXPECT_THROW(pool_top_attn(s, nullptr), ContractError);
  Tensor wrong({1, 1, 4});
  EXPECT_THROW(pool_top_attn(s, &wrong), ContractError);
}

TEST(PoolStep, SeparateClsWithTruncation) {
  Tape tape;
  const SequenceState s = make_state(tape, column({100, 1, 3, 5, 7, 9, 11, 13}));
  const SequenceState out = pool_step(s, PoolOp::Mean, true, true);
  EXPECT_EQ(values(out), (std::vector<double>{100, 2, 6, 10}));
  EXPECT_EQ(out.pos, (std::vector<Position>{0, 1, 3, 5}));
}

TEST(PoolStep, WithoutSeparateClsIsPlainStride2) {
  Tape tape;
  const SequenceState s = make_state(tape, column({100, 1, 3, 5, 7, 9, 11, 13}));
  const SequenceState out = pool_step(s, PoolOp::Mean, false, true);
  EXPECT_EQ(values(out), values(pool_pair(s, PoolOp::Mean)));
  EXPECT_EQ(values(out), (std::vector<double>{50.5, 4, 8, 12}));
}

TEST(PoolStep, LengthOneRestIsUnchanged) {
  Tape tape;
  const SequenceState s = make_state(tape, column({100, 7}));
  EXPECT_EQ(values(pool_step(s, PoolOp::Mean, true, false)), (std::vector<double>{100, 7}));
  // Truncation still halves a power-of-two length.
  EXPECT_EQ(values(pool_step(s, PoolOp::Mean, true, true)), (std::vector<double>{100}));
  const SequenceState cls_only = make_state(tape, column({100}));
  EXPECT_EQ(values(pool_step(cls_only, PoolOp::Max, true, true)), (std::vector<double>{100}));
  EXPECT_EQ(values(pool_step(cls_only, PoolOp::Mean, false, true)), (std::vector<double>{100}));
}

TEST(PoolStep, ClsIsBitIdenticalAndIsolated) {
  Rng rng(3);
  for (PoolOp op : {PoolOp::Mean, PoolOp::Max}) {
    Tape tape;
    Tensor h = random_tensor({8, 4}, rng);
    const SequenceState a = pool_step(make_state(tape, h), op, true, true);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(a.hidden.value().at(0, c), h.at(0, c));
    for (std::size_t c = 0; c < 4; ++c) h.at(0, c) += 1000.0;
    const SequenceState b = pool_step(make_state(tape, h), op, true, true);
    for (std::size_t r = 1; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c)
        EXPECT_EQ(a.hidden.value().at(r, c), b.hidden.value().at(r, c));
  }
}

struct IdentityLayer {
  ParamMap tensors;
  explicit IdentityLayer(std::size_t d) {
    for (const char* n : {"q_w", "k_w", "r_w"}) tensors[n] = Tensor({d, d});
    Tensor eye({d, d});
    for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1.0;
    tensors["v_w"] = eye;
    tensors["o_w"] = eye;
    for (const char* b : {"q_b", "v_b", "o_b", "u", "cb", "beta"}) tensors[b] = Tensor({d});
    tensors["gamma"] = Tensor::filled({d}, 1.0);
  }
  AttentionWeights bind(Tape& t) const {
    auto c = [&](const char* n) { return t.constant(tensors.at(n)); };
    return {c("q_w"), c("q_b"), c("k_w"), c("v_w"), c("v_b"), c("o_w"),
            c("o_b"), c("cb"),  c("u"),   c("r_w"), c("gamma"), c("beta")};
  }
};

TEST(BlockTransition, IdentityLikeParamsGiveLayerNormOfResidualPlusMean) {
  const std::size_t d = 4;
  Rng rng(5);
  const Tensor h = random_tensor({4, d}, rng);
  Tape tape;
  const SequenceState unpooled = make_state(tape, h);
  const SequenceState pooled = pool_step(unpooled, PoolOp::Mean, true, true);
  ASSERT_EQ(pooled.length(), 2u);
  AttentionSettings s;
  s.heads = 2;
  s.head_dim = 2;
  const auto r = block_transition_attention(pooled, unpooled, IdentityLayer(d).bind(tape), s,
                                            RelPosEncoding(d), true, nullptr);
  const Tensor out = r.output.value();
  ASSERT_EQ(out.shape(), (Shape{2, d}));
  // Hand evaluation: x = h'_i + mean_j h_j, then (x - mean(x)) / sqrt(var(x) + 1e-9).
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> x(d);
    for (std::size_t c = 0; c < d; ++c) {
      double m = 0.0;
      for (std::size_t j = 0; j < 4; ++j) m += h.at(j, c);
      x[c] = pooled.hidden.value().at(i, c) + m / 4.0;
    }
    const double mu = std::accumulate(x.begin(), x.end(), 0.0) / d;
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= d;
    for (std::size_t c = 0; c < d; ++c) {
      EXPECT_NEAR(out.at(i, c), (x[c] - mu) / std::sqrt(var + 1e-9), 1e-12);
    }
  }
}

TEST(BlockTransition, WithoutPoolQueryOnlyIsStandardLayerOnPooled) {
  Rng rng(6);
  Tape tape;
  const SequenceState unpooled = make_state(tape, random_tensor({8, 4}, rng));
  const SequenceState pooled = pool_step(unpooled, PoolOp::Max, true, true);
  ParamMap t = IdentityLayer(4).tensors;
  for (auto& [name, v] : t) v = random_tensor(v.shape(), rng);
  AttentionWeights w;
  auto c = [&](const char* n) { return tape.constant(t.at(n)); };
  w = {c("q_w"), c("q_b"), c("k_w"), c("v_w"), c("v_b"), c("o_w"),
       c("o_b"), c("cb"),  c("u"),   c("r_w"), c("gamma"), c("beta")};
  AttentionSettings s;
  s.heads = 1;
  s.head_dim = 4;
  const RelPosEncoding enc(4);
  const auto a = block_transition_attention(pooled, unpooled, w, s, enc, false, nullptr);
  const auto b = attention(pooled.hidden, pooled.hidden, pooled.pos, pooled.pos, pooled.valid, w, s,
                           enc, nullptr);
  EXPECT_TRUE(a.output.value().bit_equal(b.output.value()));
  const auto q_only = block_transition_attention(pooled, unpooled, w, s, enc, true, nullptr);
  EXPECT_EQ(q_only.output.value().shape(), (Shape{4, 4}));
  EXPECT_EQ(q_only.probs.shape(), (Shape{1, 4, 8}));
}

std::vector<std::size_t> block_lengths(const ModelConfig& c, std::size_t t, std::uint64_t seed) {
  Rng rng(seed);
  const ParamMap params = init_params(c, rng);
  Tape tape;
  BoundParams bound(tape, params, false);
  std::vector<std::size_t> ids(t);
  for (auto& id : ids) id = rng.uniform_int(c.vocab_size);
  std::vector<std::uint8_t> valid(t, 1);
  const EncoderState enc = encoder_forward(c, bound, ids, valid, nullptr);
  std::vector<std::size_t> lengths;
  for (const auto& b : enc.blocks) {
    EXPECT_EQ(b.hidden.value().dim(0), b.length());
    lengths.push_back(b.length());
  }
  return lengths;
}

ModelConfig full_width(const std::string& layout) {
  ModelConfig c;
  c.layout = parse_layout(layout);
  c.vocab_size = 20;
  c.dtype = DType::f64;
  c.dropout = c.attn_dropout = 0.0;
  return c;
}

TEST(Encoder, LengthExamples) {
  EXPECT_EQ(block_lengths(full_width("B2-2-2H64"), 16, 1), (std::vector<std::size_t>{16, 8, 4}));
  EXPECT_EQ(block_lengths(full_width("L4H64"), 16, 2), (std::vector<std::size_t>{16}));
  EXPECT_EQ(block_lengths(full_width("B2-2H64"), 8, 3), (std::vector<std::size_t>{8, 4}));
}

TEST(Encoder, TopAttnAndAblationTogglesRun) {
  ModelConfig c = tiny_config("B2-2-1H64", 8, 2, 12);
  c.pool_op = PoolOp::TopAttn;
  EXPECT_EQ(block_lengths(c, 16, 4), (std::vector<std::size_t>{16, 8, 4}));
  c.separate_cls = false;
  c.pool_query_only = false;
  EXPECT_EQ(block_lengths(c, 16, 5), (std::vector<std::size_t>{16, 8, 4}));
  c.truncate_seq = false;
  c.separate_cls = true;
  c.pool_op = PoolOp::Mean;
  EXPECT_EQ(block_lengths(c, 12, 6), (std::vector<std::size_t>{12, 7, 4}));
}

TEST(Encoder, RejectsBadInputs) {
  const ModelConfig c = tiny_config("B1-1H64", 8, 2, 10);
  Rng rng(7);
  const ParamMap params = init_params(c, rng);
  Tape tape;
  BoundParams bound(tape, params, false);
  const std::vector<std::size_t> six(6, 1);
  const std::vector<std::uint8_t> valid6(6, 1);
  EXPECT_THROW(encoder_forward(c, bound, six, valid6, nullptr), ContractError);
  const std::vector<std::size_t> oov = {1, 2, 3, 10};
  const std::vector<std::uint8_t> valid4(4, 1);
  EXPECT_THROW(encoder_forward(c, bound, oov, valid4, nullptr), DimensionError);
}

TEST(Encoder, ClsEnteringPoolingMatchesPreviousBlockOutput) {
  const ModelConfig c = tiny_config("B1-1-1H64", 8, 2, 10);
  Rng rng(8);
  const ParamMap params = random_params(c, rng);
  Tape tape;
  BoundParams bound(tape, params, false);
  const std::vector<std::size_t> ids = {2, 5, 6, 7, 8, 9, 3, 0};
  const std::vector<std::uint8_t> valid = {1, 1, 1, 1, 1, 1, 1, 0};
  const EncoderState enc = encoder_forward(c, bound, ids, valid, nullptr);
  for (std::size_t m = 0; m + 1 < enc.blocks.size(); ++m) {
    const SequenceState pooled = pool_step(enc.blocks[m], c.pool_op, true, true);
    for (std::size_t col = 0; col < 8; ++col) {
      EXPECT_EQ(pooled.hidden.value().at(0, col), enc.blocks[m].hidden.value().at(0, col));
    }
  }
}

TEST(Upsample, Examples) {
  Tape tape;
  Var h = tape.constant(column({1, 2}));
  EXPECT_TRUE(upsample(h, 1, 2).value().bit_equal(h.value()));
  const Tensor up = upsample(h, 4, 8).value();
  EXPECT_EQ(std::vector<double>(up.data().begin(), up.data().end()),
            (std::vector<double>{1, 1, 1, 1, 2, 2, 2, 2}));
  Var big = tape.constant(Tensor({128, 3}));
  EXPECT_EQ(upsample(big, 4, 512).value().shape(), (Shape{512, 3}));
  EXPECT_THROW(upsample(h, 4, 7), ContractError);
}

struct DecoderFixture {
  ModelConfig config = tiny_config("B1-1H64D2", 8, 2, 10);
  ParamMap params;
  DecoderFixture() {
    Rng rng(9);
    params = random_params(config, rng);
  }
};

TEST(Decoder, ZeroFinalBlockGivesFusedEqualH1) {
  DecoderFixture fx;
  Rng rng(10);
  Tape tape;
  BoundParams bound(tape, fx.params, false);
  const SequenceState h1 = make_state(tape, random_tensor({8, 8}, rng));
  const SequenceState hm = make_state(tape, Tensor({4, 8}));
  const DecoderOutput out = decoder_forward(fx.config, bound, h1, hm, nullptr);
  EXPECT_TRUE(out.fused.value().bit_equal(h1.hidden.value()));
  EXPECT_EQ(out.hidden.value().shape(), (Shape{8, 8}));
}

TEST(Decoder, NoDecoderLayersReturnsFused) {
  ModelConfig c = tiny_config("B1-1H64", 8, 2, 10);
  Rng rng(11);
  const ParamMap params = random_params(c, rng);
  Tape tape;
  BoundParams bound(tape, params, false);
  const SequenceState h1 = make_state(tape, random_tensor({8, 8}, rng));
  const SequenceState hm = make_state(tape, random_tensor({4, 8}, rng));
  const DecoderOutput out = decoder_forward(c, bound, h1, hm, nullptr);
  EXPECT_EQ(out.hidden.id, out.fused.id);
  EXPECT_NEAR(out.fused.value().at(5, 3),
              h1.hidden.value().at(5, 3) + hm.hidden.value().at(2, 3), 1e-15);
}

TEST(Decoder, FusionIsAdditiveAndPerPosition) {
  DecoderFixture fx;
  Rng rng(12);
  const Tensor h1 = random_tensor({8, 8}, rng);
  const Tensor hm = random_tensor({4, 8}, rng);
  auto run = [&](const Tensor& a) {
    Tape tape;
    BoundParams bound(tape, fx.params, false);
    const DecoderOutput out =
        decoder_forward(fx.config, bound, make_state(tape, a), make_state(tape, hm), nullptr);
    return std::make_pair(out.fused.value(), out.hidden.value());
  };
  const auto base = run(h1);
  for (std::size_t pos = 0; pos < 8; ++pos) {
    Tensor shifted = h1;
    for (std::size_t c = 0; c < 8; ++c) shifted.at(pos, c) += 0.25 * (c + 1.0);
    const auto moved = run(shifted);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        const double delta = moved.first.at(r, c) - base.first.at(r, c);
        EXPECT_NEAR(delta, r == pos ? 0.25 * (c + 1.0) : 0.0, 1e-12);
      }
    double diff = 0.0;
    for (std::size_t c = 0; c < 8; ++c) diff += std::abs(moved.second.at(pos, c) - base.second.at(pos, c));
    EXPECT_GT(diff, 1e-6) << "position " << pos;
  }
}

TEST(Decoder, OutputLengthEqualsInputForTiedLayouts) {
  const ModelConfig c = tiny_config("B1-1x2-1H64D1", 8, 2, 10);
  Rng rng(13);
  const ParamMap params = random_params(c, rng);
  for (std::size_t t : {4u, 8u, 16u}) {
    Tape tape;
    BoundParams bound(tape, params, false);
    std::vector<std::size_t> ids(t, 4);
    std::vector<std::uint8_t> valid(t, 1);
    const EncoderState enc = encoder_forward(c, bound, ids, valid, nullptr);
    EXPECT_EQ(token_hidden(c, bound, enc, nullptr).value().dim(0), t);
  }
}

TEST(EndToEnd, GradCheckTwoBlockEncoderDecoder) {
  const ModelConfig c = tiny_config("B1-1H64D1", 8, 2, 11);
  Rng rng(14);
  const ParamMap params = random_params(c, rng);
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  for (const auto& [n, t] : params) {
    names.push_back(n);
    tensors.push_back(t);
  }
  const std::vector<std::size_t> ids = {2, 5, 7, 4, 9, 10, 3, 0};
  const std::vector<std::uint8_t> valid = {1, 1, 1, 1, 1, 1, 1, 0};
  const auto res = grad_check(
      [&](Tape& tape, std::span<const Var> p) {
        std::map<std::string, Var> vars;
        for (std::size_t i = 0; i < names.size(); ++i) vars[names[i]] = p[i];
        const BoundParams view = BoundParams::from_vars(tape, std::move(vars));
        const EncoderState enc = encoder_forward(c, view, ids, valid, nullptr);
        Var out = token_hidden(c, view, enc, nullptr);
        Tensor w(out.shape());
        for (std::size_t k = 0; k < w.numel(); ++k) w[k] = std::sin(0.3 * k + 1.0);
        return sum(mul(out, tape.constant(std::move(w))));
      },
      tensors, testing::step_ladder());
  EXPECT_LT(res.max_rel_error, 1e-4) << names[res.worst_param] << "[" << res.worst_index
                                     << "] a=" << res.analytic << " n=" << res.numeric;
}

}  // namespace
}  // namespace funnel
