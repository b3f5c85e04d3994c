#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "funnel/model.hpp"

namespace funnel {

/// A hidden sequence with the absolute position id and key mask of each row.
struct SequenceState {
  Var hidden;                       // [T, D]
  std::vector<Position> pos;        // [T]
  std::vector<std::uint8_t> valid;  // [T], 1 = real token, 0 = padding

  std::size_t length() const { return pos.size(); }
};

/// Stride-2, window-2 pooling. An odd tail is a singleton window. The pooled
/// row takes the first member's position and is real iff any member is real;
/// Mean averages real members only, Max takes the elementwise max over real
/// members, and an all-padding window yields a zero padding row.
SequenceState pool_pair(const SequenceState& s, PoolOp op);

/// Per-key importance: sum of attn[h, q, k] over heads and queries.
std::vector<double> top_attn_scores(const Tensor& attn);

/// Indices of the ceil(n/2) highest scores in ascending index order. Equal
/// scores prefer the lower index.
std::vector<std::size_t> top_attn_select(std::span<const double> scores);

/// Keeps the top-scoring half of the rows of `s` (positions and mask follow).
/// prev_attn: [heads, Tq, T] from the attention layer that produced `s`.
SequenceState pool_top_attn(const SequenceState& s, const Tensor* prev_attn);

/// One pooling step between blocks. With separate_cls, row 0 is carried over
/// untouched and only rows 1.. are pooled. With truncate and a power-of-two
/// input length, the last pooled row is dropped so the length halves exactly.
SequenceState pool_step(const SequenceState& s, PoolOp op, bool separate_cls, bool truncate,
                        const Tensor* prev_attn = nullptr);

/// First attention of a block: pooled queries (and residual) attend over the
/// unpooled block input, or over the pooled sequence when pool_query_only is off.
AttentionResult block_transition_attention(const SequenceState& pooled,
                                           const SequenceState& unpooled,
                                           const AttentionWeights& w,
                                           const AttentionSettings& settings,
                                           const RelPosEncoding& enc, bool pool_query_only,
                                           Rng* rng);

struct EncoderState {
  std::vector<SequenceState> blocks;  // block-final outputs, blocks[0] = h1
  Tensor last_attn;                   // probs of the last attention layer

  const SequenceState& h1() const { return blocks.front(); }
  const SequenceState& final_block() const { return blocks.back(); }
};

/// Embedding + LayerNorm, then every block of the layout. `rng` == nullptr
/// runs without dropout. T must be a power of two when truncation is on.
EncoderState encoder_forward(const ModelConfig& config, const BoundParams& params,
                             std::span<const std::size_t> token_ids,
                             std::span<const std::uint8_t> valid, Rng* rng);

/// out[i] = h[i / rate]; requires rows(out) = rows(h) * rate.
Var upsample(Var h, std::size_t rate, std::size_t target_length);

struct DecoderOutput {
  Var fused;   // g = h1 + upsample(hM)
  Var hidden;  // after the decoder layers
};

/// g = h1 + upsample(hM, 2^(M-1)) followed by the layout's decoder layers,
/// self-attending at positions 0..T-1.
DecoderOutput decoder_forward(const ModelConfig& config, const BoundParams& params,
                              const SequenceState& h1, const SequenceState& hM, Rng* rng);

/// Full-length token representations: the encoder output for single-block
/// layouts, the decoder output otherwise.
Var token_hidden(const ModelConfig& config, const BoundParams& params, const EncoderState& enc,
                 Rng* rng);

}  // namespace funnel
