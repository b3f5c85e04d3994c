#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "funnel/layout.hpp"
#include "funnel/relattn.hpp"

namespace funnel {

/// Finetune counts the encoder only; pretrain adds the decoder layers.
enum class CostMode { Finetune, Pretrain };

CostMode parse_cost_mode(const std::string& name);  // "finetune" | "pretrain"
const char* cost_mode_name(CostMode mode);

/// Half-up rounding to two decimals, as used for every displayed ratio.
double round2(double x);

/// Sum over blocks of layers_m / 2^m (0-based m), plus decoder layers in
/// pretrain mode. All values are dyadic, so the double is exact.
double effective_layers(const LayoutSpec& layout, CostMode mode);

/// effective_layers(a) / effective_layers(b), unrounded. Layouts with
/// different hidden sizes are a ContractError.
double flops_ratio(const LayoutSpec& a, const LayoutSpec& b, CostMode mode);

/// Multiply-adds of one layer with Tq queries over Tk keys at width D:
///   projections  Tq D^2 (Q) + 2 Tk D^2 (K, V) + Tq D^2 (O)
///   content      2 Tq Tk D (scores and weighted sum)
///   position     factorized  2 Tq D^2 + 4 Tq Tk D
///                gather      (Tq + Tk - 1) D^2 + Tq (Tq + Tk - 1) D
///                naive       Tq Tk D^2 + Tq Tk D
///   feed-forward 8 Tq D^2
std::uint64_t layer_madds(std::uint64_t tq, std::uint64_t tk, std::uint64_t d, AttnVariant variant);

/// FLOPs (2 per multiply-add) of all transformer layers for one length-T
/// sequence. Block m runs at T / 2^m; its first layer attends from the pooled
/// queries to the previous block's T / 2^(m-1) keys. Embedding, pooling and
/// output layers are not counted. T must be a power of two with
/// T >= 2^(blocks - 1).
std::uint64_t flops_exact(const LayoutSpec& layout, std::size_t t, CostMode mode,
                          AttnVariant variant = AttnVariant::Factorized);

struct CostReport {
  std::string layout;
  CostMode mode = CostMode::Finetune;
  std::size_t vocab = 0;
  std::size_t seq_len = 0;
  std::uint64_t params_total = 0;
  std::uint64_t params_transformer = 0;  // per-layer tensors only
  std::uint64_t params_embedding = 0;    // V x D word embedding (tied output)
  double effective_layers = 0.0;
  std::uint64_t flops_exact = 0;
};

/// Counts the tensors the model would instantiate for this layout.
CostReport analyze(const LayoutSpec& layout, std::size_t vocab, std::size_t t, CostMode mode);

nlohmann::json cost_report_to_json(const CostReport& r);
std::string cost_report_to_text(const CostReport& r);

struct CompareRow {
  std::string layout;
  double flops_linear = 0.0;  // unrounded
  double flops_exact = 0.0;
  double params = 0.0;
};

struct CompareReport {
  std::string baseline;
  CostMode mode = CostMode::Finetune;
  std::size_t seq_len = 0;
  std::size_t vocab = 0;
  std::vector<CompareRow> rows;
};

/// Ratios of each layout against the baseline. Every layout must share the
/// baseline's hidden size (ContractError otherwise).
CompareReport compare(const std::vector<LayoutSpec>& layouts, const LayoutSpec& baseline,
                      std::size_t vocab, std::size_t t, CostMode mode);

/// Aligned table, ratios shown with two decimals.
std::string compare_report_to_text(const CompareReport& r);
/// Rounded and unrounded ratios per row.
nlohmann::json compare_report_to_json(const CompareReport& r);

}  // namespace funnel
