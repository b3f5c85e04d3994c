#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "funnel/autodiff.hpp"

namespace funnel {

/// Three interchangeable ways to compute the relative position term.
enum class AttnVariant { Naive, GatherShift, Factorized };

AttnVariant parse_attn_variant(const std::string& name);  // "naive" | "gather" | "factorized"
const char* attn_variant_name(AttnVariant variant);

using Position = std::int64_t;

/// Sinusoidal relative encodings of width D (even):
///   r_t = cat(sin_t, cos_t),  sin_t[i] = sin(t / 10000^(2(i+1)/D)),  i = 0 .. D/2-1
/// and the factorized per-position encodings
///   phi_i = cat(sin_i, cos_i)    psi_j = cat(cos_j, cos_j)
///   pi_i  = cat(-cos_i, sin_i)   omega_j = cat(sin_j, sin_j)
/// which satisfy q . r_{i-j} = (q * phi_i) . psi_j + (q * pi_i) . omega_j.
class RelPosEncoding {
 public:
  explicit RelPosEncoding(std::size_t width);

  std::size_t width() const { return width_; }
  double frequency(std::size_t i) const { return freq_[i]; }

  std::vector<double> encode(Position t) const;
  /// Rows r_{lo}, r_{lo+1}, ..., r_{hi} (ascending distance).
  Tensor table(Position lo, Position hi) const;

  Tensor phi(std::span<const Position> pos) const;
  Tensor psi(std::span<const Position> pos) const;
  Tensor pi(std::span<const Position> pos) const;
  Tensor omega(std::span<const Position> pos) const;

 private:
  enum class Pattern { Phi, Psi, Pi, Omega };
  Tensor stack(std::span<const Position> pos, Pattern pattern) const;

  std::size_t width_;
  std::vector<double> freq_;
};

/// Position term A[i, j] = (q_i + u) . (W_R r_{q_pos[i] - k_pos[j]}) for one head.
///   q_states: [Tq, dh] projected queries, w_r: [D, dh], u: [dh].
/// Reference form: materializes every r_{i-j} and projects it (O(Tq Tk D dh)).
Var position_term_naive(Var q_states, std::span<const Position> q_pos,
                        std::span<const Position> k_pos, Var w_r, Var u,
                        const RelPosEncoding& enc);

/// Index matrix for the gather form: I[i][j] = K + q_pos[i] - k_pos[j] into an
/// ascending table of 2K+1 distances starting at -K.
struct GatherIndex {
  Position max_distance = 0;  // K
  std::vector<std::size_t> index;  // row-major [Tq, Tk]
};
GatherIndex make_gather_index(std::span<const Position> q_pos, std::span<const Position> k_pos);

/// Projects the 2K+1 distance table once, scores every query against it and
/// gathers the (i, j) entries.
Var position_term_gather(Var q_states, std::span<const Position> q_pos,
                         std::span<const Position> k_pos, Var w_r, Var u,
                         const RelPosEncoding& enc);

/// Trigonometric factorization: two outer products, no gather.
Var position_term_factorized(Var q_states, std::span<const Position> q_pos,
                             std::span<const Position> k_pos, Var w_r, Var u,
                             const RelPosEncoding& enc);

Var position_term(AttnVariant variant, Var q_states, std::span<const Position> q_pos,
                  std::span<const Position> k_pos, Var w_r, Var u, const RelPosEncoding& enc);

/// Weights of one attention sub-layer bound to a tape. All [D, D] matrices map
/// row vectors (x W); head h owns columns [h*dh, (h+1)*dh).
struct AttentionWeights {
  Var q_weight, q_bias;
  Var k_weight;
  Var v_weight, v_bias;
  Var o_weight, o_bias;
  Var content_bias;   // v of the content term, [D]
  Var position_bias;  // u of the position term, [D]
  Var rel_proj;       // W_R, [D, D], shared across the stack
  Var ln_gamma, ln_beta;
};

struct FeedForwardWeights {
  Var w1, b1;  // [D, 4D], [4D]
  Var w2, b2;  // [4D, D], [D]
  Var ln_gamma, ln_beta;
};

struct AttentionSettings {
  std::size_t heads = 1;
  std::size_t head_dim = 64;
  AttnVariant variant = AttnVariant::Factorized;
  double dropout = 0.0;
  double attn_dropout = 0.0;
  double ln_eps = 1e-9;
};

struct AttentionResult {
  Var output;          // [Tq, D]
  Tensor probs;        // [heads, Tq, Tk]
};

/// Post-norm relative multi-head attention:
///   LayerNorm(q_in + W_O concat_h softmax((content_h + position_h) / sqrt(dh)) V_h)
/// Keys with key_valid[j] == 0 get -inf logits. A query whose keys are all
/// masked raises NumericError. `rng` == nullptr disables dropout.
AttentionResult attention(Var q_in, Var kv_in, std::span<const Position> q_pos,
                          std::span<const Position> k_pos, std::span<const std::uint8_t> key_valid,
                          const AttentionWeights& w, const AttentionSettings& settings,
                          const RelPosEncoding& enc, Rng* rng);

/// LayerNorm(x + W2 gelu(x W1 + b1) + b2), applied row by row.
Var pffn(Var x, const FeedForwardWeights& w, double dropout, double ln_eps, Rng* rng);

struct EquivalenceReport {
  std::size_t trials = 0;
  double max_dev_gather = 0.0;      // max |naive - gather|
  double max_dev_factorized = 0.0;  // max |naive - factorized|
};

/// Random f64 position-term cases: Tq, Tk in [1, max_t], D a power of two in
/// [4, max_d] (2 when max_d < 4), head width in [1, D], positions in
/// [-max_t, max_t]. Every third case uses stride-2 pooled query positions.
EquivalenceReport check_position_term_equivalence(std::size_t trials, std::size_t max_t,
                                                  std::size_t max_d, std::uint64_t seed);

}  // namespace funnel
