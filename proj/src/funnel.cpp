#include "funnel/funnel.hpp"

#include <algorithm>
#include <numeric>

namespace funnel {

namespace {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

SequenceState select_rows(const SequenceState& s, const std::vector<std::size_t>& rows) {
  SequenceState out;
  out.hidden = gather_rows(s.hidden, rows);
  for (std::size_t r : rows) {
    out.pos.push_back(s.pos[r]);
    out.valid.push_back(s.valid[r]);
  }
  return out;
}

SequenceState concat_states(const SequenceState& a, const SequenceState& b) {
  SequenceState out;
  const Var parts[] = {a.hidden, b.hidden};
  out.hidden = concat_rows(parts);
  out.pos = a.pos;
  out.pos.insert(out.pos.end(), b.pos.begin(), b.pos.end());
  out.valid = a.valid;
  out.valid.insert(out.valid.end(), b.valid.begin(), b.valid.end());
  return out;
}

std::vector<std::size_t> iota_indices(std::size_t from, std::size_t to) {
  std::vector<std::size_t> v(to - from);
  std::iota(v.begin(), v.end(), from);
  return v;
}

SequenceState pool_rest(const SequenceState& rest, PoolOp op, const Tensor* attn,
                        std::size_t key_offset) {
  if (op != PoolOp::TopAttn) return pool_pair(rest, op);
  if (attn == nullptr) throw ContractError("top-attn pooling needs the previous attention map");
  const auto scores = top_attn_scores(*attn);
  if (scores.size() != rest.length() + key_offset) {
    throw ContractError("top-attn pooling: attention map covers " + std::to_string(scores.size()) +
                        " keys but the sequence has " +
                        std::to_string(rest.length() + key_offset));
  }
  return select_rows(rest, top_attn_select(std::span(scores).subspan(key_offset)));
}

}  // namespace

SequenceState pool_pair(const SequenceState& s, PoolOp op) {
  if (op == PoolOp::TopAttn) throw ContractError("pool_pair handles mean and max only");
  const std::size_t n = s.length();
  if (n == 0) throw DimensionError("pool_pair: empty sequence");
  std::vector<std::vector<std::size_t>> groups;
  SequenceState out;
  for (std::size_t start = 0; start < n; start += 2) {
    std::vector<std::size_t> members;
    for (std::size_t i = start; i < std::min(start + 2, n); ++i) {
      if (s.valid[i]) members.push_back(i);
    }
    out.pos.push_back(s.pos[start]);
    out.valid.push_back(members.empty() ? 0 : 1);
    groups.push_back(std::move(members));
  }
  out.hidden = segment_reduce(s.hidden, groups,
                              op == PoolOp::Mean ? SegmentReduce::Mean : SegmentReduce::Max);
  return out;
}

std::vector<double> top_attn_scores(const Tensor& attn) {
  if (attn.rank() != 3) {
    throw DimensionError("attention map must be [heads, Tq, Tk], got " +
                         shape_to_string(attn.shape()));
  }
  const std::size_t rows = attn.dim(0) * attn.dim(1), tk = attn.dim(2);
  std::vector<double> scores(tk, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < tk; ++k) scores[k] += attn[r * tk + k];
  return scores;
}

std::vector<std::size_t> top_attn_select(std::span<const double> scores) {
  std::vector<std::size_t> order = iota_indices(0, scores.size());
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize((scores.size() + 1) / 2);
  std::sort(order.begin(), order.end());
  return order;
}

SequenceState pool_top_attn(const SequenceState& s, const Tensor* prev_attn) {
  if (s.length() == 0) throw DimensionError("pool_top_attn: empty sequence");
  return pool_rest(s, PoolOp::TopAttn, prev_attn, 0);
}

SequenceState pool_step(const SequenceState& s, PoolOp op, bool separate_cls, bool truncate,
                        const Tensor* prev_attn) {
  const std::size_t n = s.length();
  if (n == 0) throw DimensionError("pool_step: empty sequence");
  SequenceState out;
  if (separate_cls) {
    if (n == 1) return s;
    const SequenceState cls = select_rows(s, {0});
    const SequenceState rest = select_rows(s, iota_indices(1, n));
    out = concat_states(cls, pool_rest(rest, op, prev_attn, 1));
  } else {
    out = pool_rest(s, op, prev_attn, 0);
  }
  if (truncate && n >= 2 && is_power_of_two(n) && out.length() > n / 2) {
    out = select_rows(out, iota_indices(0, n / 2));
  }
  return out;
}

AttentionResult block_transition_attention(const SequenceState& pooled,
                                           const SequenceState& unpooled,
                                           const AttentionWeights& w,
                                           const AttentionSettings& settings,
                                           const RelPosEncoding& enc, bool pool_query_only,
                                           Rng* rng) {
  const SequenceState& kv = pool_query_only ? unpooled : pooled;
  return attention(pooled.hidden, kv.hidden, pooled.pos, kv.pos, kv.valid, w, settings, enc, rng);
}

EncoderState encoder_forward(const ModelConfig& config, const BoundParams& params,
                             std::span<const std::size_t> token_ids,
                             std::span<const std::uint8_t> valid, Rng* rng) {
  const std::size_t t = token_ids.size();
  if (t == 0) throw DimensionError("encoder: empty input");
  if (valid.size() != t) throw DimensionError("encoder: mask length differs from input length");
  if (config.truncate_seq && !is_power_of_two(t)) {
    throw ContractError("encoder: sequence length " + std::to_string(t) +
                        " is not a power of two (pad the input or disable truncate_seq)");
  }
  for (std::size_t id : token_ids) {
    if (id >= config.vocab_size) {
      throw DimensionError("encoder: token id " + std::to_string(id) + " outside vocabulary of " +
                           std::to_string(config.vocab_size));
    }
  }

  const ModelDims dims = config.dims();
  const AttentionSettings settings = config.attention_settings();
  const RelPosEncoding enc(dims.hidden);

  Var x = gather_rows(params[param_names::kWordEmbedding], token_ids);
  x = layer_norm(x, params["embedding.ln_gamma"], params["embedding.ln_beta"], config.ln_eps);
  if (rng && config.dropout > 0.0) x = dropout(x, config.dropout, *rng);

  SequenceState cur;
  cur.hidden = x;
  cur.pos.resize(t);
  std::iota(cur.pos.begin(), cur.pos.end(), Position{0});
  cur.valid.assign(valid.begin(), valid.end());

  EncoderState state;
  Tensor last_attn;
  for (std::size_t m = 0; m < config.layout.blocks.size(); ++m) {
    const BlockSpec& block = config.layout.blocks[m];
    const SequenceState unpooled = cur;
    if (m > 0) {
      cur = pool_step(cur, config.pool_op, config.separate_cls, config.truncate_seq, &last_attn);
    }
    for (std::size_t layer = 0; layer < block.total_layers(); ++layer) {
      const std::string prefix = param_names::encoder_layer(m, block.param_set_for_layer(layer));
      const AttentionWeights w = params.attention(prefix, "encoder.rel_proj");
      AttentionResult r =
          (m > 0 && layer == 0)
              ? block_transition_attention(cur, unpooled, w, settings, enc,
                                           config.pool_query_only, rng)
              : attention(cur.hidden, cur.hidden, cur.pos, cur.pos, cur.valid, w, settings, enc,
                          rng);
      cur.hidden = pffn(r.output, params.feed_forward(prefix), config.dropout, config.ln_eps, rng);
      last_attn = std::move(r.probs);
    }
    state.blocks.push_back(cur);
  }
  state.last_attn = std::move(last_attn);
  return state;
}

Var upsample(Var h, std::size_t rate, std::size_t target_length) {
  const std::size_t tm = h.value().dim(0);
  if (rate == 0 || tm * rate != target_length) {
    throw ContractError("upsample: " + std::to_string(tm) + " rows x rate " +
                        std::to_string(rate) + " != target length " +
                        std::to_string(target_length));
  }
  if (rate == 1) return h;
  std::vector<std::size_t> rows(target_length);
  for (std::size_t i = 0; i < target_length; ++i) rows[i] = i / rate;
  return gather_rows(h, rows);
}

DecoderOutput decoder_forward(const ModelConfig& config, const BoundParams& params,
                              const SequenceState& h1, const SequenceState& hM, Rng* rng) {
  const std::size_t blocks = config.layout.blocks.size();
  const std::size_t rate = std::size_t{1} << (blocks - 1);
  DecoderOutput out;
  out.fused = add(h1.hidden, upsample(hM.hidden, rate, h1.length()));
  out.hidden = out.fused;
  if (config.layout.decoder_layers == 0) return out;

  const AttentionSettings settings = config.attention_settings();
  const RelPosEncoding enc(config.dims().hidden);
  std::vector<Position> pos(h1.length());
  std::iota(pos.begin(), pos.end(), Position{0});
  for (std::size_t l = 0; l < config.layout.decoder_layers; ++l) {
    const std::string prefix = param_names::decoder_layer(l);
    const AttentionWeights w = params.attention(prefix, "decoder.rel_proj");
    AttentionResult r = attention(out.hidden, out.hidden, pos, pos, h1.valid, w, settings, enc, rng);
    out.hidden = pffn(r.output, params.feed_forward(prefix), config.dropout, config.ln_eps, rng);
  }
  return out;
}

Var token_hidden(const ModelConfig& config, const BoundParams& params, const EncoderState& enc,
                 Rng* rng) {
  if (enc.blocks.size() == 1 && config.layout.decoder_layers == 0) {
    return enc.final_block().hidden;
  }
  return decoder_forward(config, params, enc.h1(), enc.final_block(), rng).hidden;
}

}  // namespace funnel
