#include "funnel/relattn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace funnel {

AttnVariant parse_attn_variant(const std::string& name) {
  if (name == "naive") return AttnVariant::Naive;
  if (name == "gather") return AttnVariant::GatherShift;
  if (name == "factorized") return AttnVariant::Factorized;
  throw std::invalid_argument("unknown attn_variant '" + name +
                              "' (expected naive, gather or factorized)");
}

const char* attn_variant_name(AttnVariant variant) {
  switch (variant) {
    case AttnVariant::Naive:
      return "naive";
    case AttnVariant::GatherShift:
      return "gather";
    case AttnVariant::Factorized:
      return "factorized";
  }
  return "?";
}

RelPosEncoding::RelPosEncoding(std::size_t width) : width_(width) {
  if (width == 0 || width % 2 != 0) {
    throw DimensionError("relative encoding width must be positive and even, got " +
                         std::to_string(width));
  }
  const std::size_t half = width / 2;
  freq_.resize(half);
  for (std::size_t i = 0; i < half; ++i) {
    const double exponent = 2.0 * static_cast<double>(i + 1) / static_cast<double>(width);
    freq_[i] = 1.0 / std::pow(10000.0, exponent);
  }
}

std::vector<double> RelPosEncoding::encode(Position t) const {
  const std::size_t half = width_ / 2;
  std::vector<double> r(width_);
  for (std::size_t i = 0; i < half; ++i) {
    const double angle = static_cast<double>(t) * freq_[i];
    r[i] = std::sin(angle);
    r[half + i] = std::cos(angle);
  }
  return r;
}

Tensor RelPosEncoding::table(Position lo, Position hi) const {
  if (hi < lo) throw DimensionError("empty distance range");
  const auto rows = static_cast<std::size_t>(hi - lo + 1);
  Tensor out({rows, width_});
  for (std::size_t k = 0; k < rows; ++k) {
    const auto r = encode(lo + static_cast<Position>(k));
    std::copy(r.begin(), r.end(), out.data().begin() + static_cast<std::ptrdiff_t>(k * width_));
  }
  return out;
}

Tensor RelPosEncoding::stack(std::span<const Position> pos, Pattern pattern) const {
  const std::size_t half = width_ / 2;
  Tensor out({pos.size(), width_});
  for (std::size_t p = 0; p < pos.size(); ++p) {
    double* row = out.data().data() + p * width_;
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(pos[p]) * freq_[i];
      const double s = std::sin(angle), c = std::cos(angle);
      switch (pattern) {
        case Pattern::Phi:
          row[i] = s, row[half + i] = c;
          break;
        case Pattern::Psi:
          row[i] = c, row[half + i] = c;
          break;
        case Pattern::Pi:
          row[i] = -c, row[half + i] = s;
          break;
        case Pattern::Omega:
          row[i] = s, row[half + i] = s;
          break;
      }
    }
  }
  return out;
}

Tensor RelPosEncoding::phi(std::span<const Position> pos) const { return stack(pos, Pattern::Phi); }
Tensor RelPosEncoding::psi(std::span<const Position> pos) const { return stack(pos, Pattern::Psi); }
Tensor RelPosEncoding::pi(std::span<const Position> pos) const { return stack(pos, Pattern::Pi); }
Tensor RelPosEncoding::omega(std::span<const Position> pos) const {
  return stack(pos, Pattern::Omega);
}

namespace {

void check_position_inputs(Var q_states, std::span<const Position> q_pos,
                           std::span<const Position> k_pos, Var w_r, Var u,
                           const RelPosEncoding& enc) {
  const Tensor& q = q_states.value();
  if (q.rank() != 2 || q.dim(0) != q_pos.size()) {
    throw DimensionError("position term: q_states " + shape_to_string(q.shape()) +
                         " does not match " + std::to_string(q_pos.size()) + " query positions");
  }
  if (k_pos.empty()) throw DimensionError("position term: no key positions");
  const Tensor& wr = w_r.value();
  if (wr.rank() != 2 || wr.dim(0) != enc.width() || wr.dim(1) != q.dim(1)) {
    throw DimensionError("position term: W_R " + shape_to_string(wr.shape()) +
                         " must be [encoding width, head dim]");
  }
  if (u.value().numel() != q.dim(1)) throw DimensionError("position term: bias u size mismatch");
}

}  // namespace

Var position_term_naive(Var q_states, std::span<const Position> q_pos,
                        std::span<const Position> k_pos, Var w_r, Var u,
                        const RelPosEncoding& enc) {
  check_position_inputs(q_states, q_pos, k_pos, w_r, u, enc);
  Tape& tape = *q_states.tape;
  const std::size_t tq = q_pos.size(), tk = k_pos.size(), width = enc.width();
  Tensor stacked({tq * tk, width});
  for (std::size_t i = 0; i < tq; ++i)
    for (std::size_t j = 0; j < tk; ++j) {
      const auto r = enc.encode(q_pos[i] - k_pos[j]);
      std::copy(r.begin(), r.end(),
                stacked.data().begin() + static_cast<std::ptrdiff_t>((i * tk + j) * width));
    }
  Var projected = matmul(tape.constant(std::move(stacked)), w_r);  // [tq*tk, dh]
  return rowwise_block_dot(add_bias(q_states, u), projected, tk);
}

GatherIndex make_gather_index(std::span<const Position> q_pos, std::span<const Position> k_pos) {
  GatherIndex gi;
  for (Position a : q_pos)
    for (Position b : k_pos) gi.max_distance = std::max(gi.max_distance, a > b ? a - b : b - a);
  gi.index.resize(q_pos.size() * k_pos.size());
  for (std::size_t i = 0; i < q_pos.size(); ++i)
    for (std::size_t j = 0; j < k_pos.size(); ++j)
      gi.index[i * k_pos.size() + j] =
          static_cast<std::size_t>(gi.max_distance + q_pos[i] - k_pos[j]);
  return gi;
}

Var position_term_gather(Var q_states, std::span<const Position> q_pos,
                         std::span<const Position> k_pos, Var w_r, Var u,
                         const RelPosEncoding& enc) {
  check_position_inputs(q_states, q_pos, k_pos, w_r, u, enc);
  Tape& tape = *q_states.tape;
  const GatherIndex gi = make_gather_index(q_pos, k_pos);
  Var table = tape.constant(enc.table(-gi.max_distance, gi.max_distance));  // [2K+1, D]
  Var projected = matmul(table, w_r);                                       // [2K+1, dh]
  Var all_scores = matmul_nt(add_bias(q_states, u), projected);             // [Tq, 2K+1]
  return gather_per_row(all_scores, gi.index, k_pos.size());
}

Var position_term_factorized(Var q_states, std::span<const Position> q_pos,
                             std::span<const Position> k_pos, Var w_r, Var u,
                             const RelPosEncoding& enc) {
  check_position_inputs(q_states, q_pos, k_pos, w_r, u, enc);
  Tape& tape = *q_states.tape;
  // q_i W_R^T lives in encoding space, so q . (W_R r) = (q W_R^T) . r.
  Var q_enc = matmul_nt(add_bias(q_states, u), w_r);  // [Tq, D]
  Var phi = tape.constant(enc.phi(q_pos));
  Var pi = tape.constant(enc.pi(q_pos));
  Var psi = tape.constant(enc.psi(k_pos));
  Var omega = tape.constant(enc.omega(k_pos));
  return add(matmul_nt(mul(q_enc, phi), psi), matmul_nt(mul(q_enc, pi), omega));
}

Var position_term(AttnVariant variant, Var q_states, std::span<const Position> q_pos,
                  std::span<const Position> k_pos, Var w_r, Var u, const RelPosEncoding& enc) {
  switch (variant) {
    case AttnVariant::Naive:
      return position_term_naive(q_states, q_pos, k_pos, w_r, u, enc);
    case AttnVariant::GatherShift:
      return position_term_gather(q_states, q_pos, k_pos, w_r, u, enc);
    case AttnVariant::Factorized:
      return position_term_factorized(q_states, q_pos, k_pos, w_r, u, enc);
  }
  throw std::logic_error("unhandled attention variant");
}

namespace {

Var head_slice(Var x, std::size_t head, std::size_t dh) {
  return slice_cols(x, head * dh, dh);
}

}  // namespace

AttentionResult attention(Var q_in, Var kv_in, std::span<const Position> q_pos,
                          std::span<const Position> k_pos, std::span<const std::uint8_t> key_valid,
                          const AttentionWeights& w, const AttentionSettings& s,
                          const RelPosEncoding& enc, Rng* rng) {
  Tape& tape = *q_in.tape;
  const std::size_t tq = q_in.value().dim(0);
  const std::size_t tk = kv_in.value().dim(0);
  const std::size_t d = q_in.value().dim(1);
  if (s.heads * s.head_dim != d) {
    throw DimensionError("attention: heads x head_dim = " + std::to_string(s.heads * s.head_dim) +
                         " but hidden = " + std::to_string(d));
  }
  if (q_pos.size() != tq || k_pos.size() != tk || key_valid.size() != tk) {
    throw DimensionError("attention: position/mask lengths do not match the inputs");
  }

  Var q = add_bias(matmul(q_in, w.q_weight), w.q_bias);
  Var k = matmul(kv_in, w.k_weight);
  Var v = add_bias(matmul(kv_in, w.v_weight), w.v_bias);

  Tensor mask({tq, tk});
  for (std::size_t i = 0; i < tq; ++i)
    for (std::size_t j = 0; j < tk; ++j)
      mask[i * tk + j] = key_valid[j] ? 0.0 : -std::numeric_limits<double>::infinity();
  Var mask_var = tape.constant(std::move(mask));

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  Tensor probs({s.heads, tq, tk});
  std::vector<Var> head_out;
  head_out.reserve(s.heads);
  for (std::size_t h = 0; h < s.heads; ++h) {
    Var qh = head_slice(q, h, s.head_dim);
    Var kh = head_slice(k, h, s.head_dim);
    Var vh = head_slice(v, h, s.head_dim);
    Var content = matmul_nt(add_bias(qh, head_slice(w.content_bias, h, s.head_dim)), kh);
    Var position = position_term(s.variant, qh, q_pos, k_pos,
                                 head_slice(w.rel_proj, h, s.head_dim),
                                 head_slice(w.position_bias, h, s.head_dim), enc);
    Var logits = add(scale(add(content, position), inv_sqrt), mask_var);
    Var p = softmax_lastdim(logits);
    std::copy(p.value().data().begin(), p.value().data().end(),
              probs.data().begin() + static_cast<std::ptrdiff_t>(h * tq * tk));
    if (rng && s.attn_dropout > 0.0) p = dropout(p, s.attn_dropout, *rng);
    head_out.push_back(matmul(p, vh));
  }
  Var merged = s.heads == 1 ? head_out.front() : concat_cols(head_out);
  Var projected = add_bias(matmul(merged, w.o_weight), w.o_bias);
  if (rng && s.dropout > 0.0) projected = dropout(projected, s.dropout, *rng);
  Var out = layer_norm(add(q_in, projected), w.ln_gamma, w.ln_beta, s.ln_eps);
  return {out, std::move(probs)};
}

Var pffn(Var x, const FeedForwardWeights& w, double dropout_rate, double ln_eps, Rng* rng) {
  Var inner = gelu(add_bias(matmul(x, w.w1), w.b1));
  Var out = add_bias(matmul(inner, w.w2), w.b2);
  if (rng && dropout_rate > 0.0) out = dropout(out, dropout_rate, *rng);
  return layer_norm(add(x, out), w.ln_gamma, w.ln_beta, ln_eps);
}

EquivalenceReport check_position_term_equivalence(std::size_t trials, std::size_t max_t,
                                                  std::size_t max_d, std::uint64_t seed) {
  if (max_t == 0 || max_d < 2) throw ContractError("equivalence check: need max_t >= 1 and max_d >= 2");
  std::vector<std::size_t> widths;
  for (std::size_t w = 4; w <= max_d; w *= 2) widths.push_back(w);
  if (widths.empty()) widths.push_back(2);

  Rng rng(seed);
  auto fill = [&](Tensor t) {
    for (auto& v : t.data()) v = 2.0 * rng.uniform() - 1.0;
    return t;
  };
  const auto span = static_cast<Position>(max_t);
  EquivalenceReport report;
  report.trials = trials;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t d = widths[rng.uniform_int(widths.size())];
    const std::size_t dh = 1 + rng.uniform_int(d);
    const std::size_t tq = 1 + rng.uniform_int(max_t);
    const std::size_t tk = 1 + rng.uniform_int(max_t);
    std::vector<Position> q_pos(tq), k_pos(tk);
    if (trial % 3 == 0) {
      for (std::size_t i = 0; i < tq; ++i) q_pos[i] = 2 * static_cast<Position>(i);
      for (std::size_t j = 0; j < tk; ++j) k_pos[j] = static_cast<Position>(j);
    } else {
      for (auto& p : q_pos) p = static_cast<Position>(rng.uniform_int(2 * max_t + 1)) - span;
      for (auto& p : k_pos) p = static_cast<Position>(rng.uniform_int(2 * max_t + 1)) - span;
    }
    const RelPosEncoding enc(d);
    Tape tape;
    const Var q = tape.constant(fill(Tensor({tq, dh})));
    const Var w_r = tape.constant(fill(Tensor({d, dh})));
    const Var u = tape.constant(fill(Tensor({dh})));
    const Tensor naive = position_term_naive(q, q_pos, k_pos, w_r, u, enc).value();
    report.max_dev_gather = std::max(
        report.max_dev_gather, max_abs_diff(naive, position_term_gather(q, q_pos, k_pos, w_r, u, enc).value()));
    report.max_dev_factorized =
        std::max(report.max_dev_factorized,
                 max_abs_diff(naive, position_term_factorized(q, q_pos, k_pos, w_r, u, enc).value()));
  }
  return report;
}

}  // namespace funnel
