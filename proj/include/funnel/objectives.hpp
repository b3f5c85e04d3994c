#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "funnel/corpus.hpp"
#include "funnel/funnel.hpp"
#include "funnel/model.hpp"

namespace funnel {

// --- masking ----------------------------------------------------------------

/// Positions to corrupt (ascending) and the ids they originally held.
struct MaskPlan {
  std::vector<std::size_t> positions;
  std::vector<TokenId> originals;

  bool empty() const { return positions.empty(); }
};

/// Positions that may be masked: real tokens other than [CLS]/[SEP]/[PAD].
std::vector<std::size_t> maskable_positions(std::span<const TokenId> ids,
                                            std::span<const std::uint8_t> valid);

/// Exactly floor(rate * n) of the n maskable positions, uniformly without
/// replacement.
MaskPlan sample_single_mask(std::span<const TokenId> ids, std::span<const std::uint8_t> valid,
                            double rate, Rng& rng);

/// Whole-word spans. The budget is floor(rate * n) over the n tokens covered by
/// `words`. Each span starts at a uniformly chosen unmasked word and covers up
/// to `max_span_words` consecutive unmasked words, cut back to whole words that
/// fit the remaining budget; when not even the first word fits, that word is
/// taken anyway and sampling stops. Words are never split.
MaskPlan sample_span_mask(std::span<const TokenId> ids,
                          const std::vector<std::vector<std::size_t>>& words, double rate,
                          std::size_t max_span_words, Rng& rng);

/// Copy of ids with every planned position set to `mask_id`.
std::vector<TokenId> apply_mask(std::span<const TokenId> ids, const MaskPlan& plan,
                                TokenId mask_id = special::kMask);

// --- MLM ----------------------------------------------------------------------

/// Logits of the rows of `hidden` listed in `positions` against the tied
/// embedding: h_i E^T, shape [positions, V].
Var tied_logits(Var hidden, Var embedding, std::span<const std::size_t> positions);

/// Mean cross-entropy over the planned positions. Empty plan is a ContractError.
Var mlm_loss(Var hidden, Var embedding, const MaskPlan& plan);

/// End-to-end finite-difference check of the MLM loss over every parameter
/// tensor: a random sequence of length T ([CLS] ... [SEP], no padding) with 15%
/// of its tokens masked (at least one). Requires f64 and no dropout
/// (ContractError otherwise).
GradCheckResult mlm_grad_check(const ModelConfig& config, std::size_t seq_len,
                               const GradCheckOptions& options, std::uint64_t seed);

// --- ELECTRA --------------------------------------------------------------------

namespace electra_names {
inline constexpr const char* kGeneratorPrefix = "generator.";
inline constexpr const char* kHeadWeight = "discriminator.head.weight";  // [D, 1]
inline constexpr const char* kHeadBias = "discriminator.head.bias";      // [1]
}  // namespace electra_names

/// Same layout and options as `disc` with the hidden size scaled by
/// `multiplier`. Widths that are multiples of 64 keep 64-wide heads; others
/// use a single head.
ModelConfig generator_config(const ModelConfig& disc, double multiplier);

/// Generator tensors (prefixed "generator."), discriminator tensors and the
/// discriminator head in one map.
ParamMap init_electra_params(const ModelConfig& disc, const ModelConfig& gen, Rng& rng);
std::map<std::string, Shape> expected_electra_shapes(const ModelConfig& disc,
                                                     const ModelConfig& gen);

/// Draws one id per row of `logits` from softmax(row).
std::vector<TokenId> sample_from_logits(const Tensor& logits, Rng& rng);

/// 1 where the corrupted id differs from the original, else 0.
std::vector<double> replaced_labels(std::span<const TokenId> original,
                                    std::span<const TokenId> corrupted);

struct ElectraOutput {
  Var gen_loss;
  Var disc_loss;
  Var total;  // gen_loss + disc_weight * disc_loss
  std::vector<TokenId> corrupted;
  std::vector<double> labels;
};

/// Generator MLM on the masked sequence, sampled replacements (no gradient
/// through the sampling), then per-token replaced/original classification over
/// all non-padding positions.
ElectraOutput electra_step(const ModelConfig& disc, const ModelConfig& gen,
                           const BoundParams& params, std::span<const TokenId> ids,
                           std::span<const std::uint8_t> valid, const MaskPlan& plan,
                           double disc_weight, Rng& sample_rng, Rng* dropout_rng);

// --- optimisation ---------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
};

/// Decoupled weight decay Adam with bias correction. LayerNorm parameters and
/// biases (rank-1 tensors) are not decayed.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  /// One update of every tensor in `params` with the matching gradient.
  void step(ParamMap& params, const std::map<std::string, Tensor>& grads, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  AdamWConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

/// Linear warmup from 0 over `warmup` steps, then linear decay towards 0 at
/// `total`. step is 0-based.
double learning_rate_at(std::size_t step, std::size_t total, std::size_t warmup, double peak);

// --- toy training -----------------------------------------------------------------

enum class Objective { Mlm, Electra };
enum class MaskSampler { Single, Span };

struct TrainConfig {
  Objective objective = Objective::Mlm;
  MaskSampler sampler = MaskSampler::Single;
  double mask_rate = 0.15;
  std::size_t max_span_words = 5;
  std::size_t seq_len = 16;
  std::size_t batch_size = 8;
  std::size_t steps = 300;
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 30;
  AdamWConfig adam;
  double disc_weight = 50.0;
  double generator_multiplier = 0.25;
  std::uint64_t seed = 0;
};

/// Training fields of a config document; absent keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& config);

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<StepRecord> trace;
  ParamMap params;
};

/// Deterministic loop over `lines` (sequences drawn by the seeded stream).
/// A non-finite loss throws NumericError naming the step.
TrainResult train_toy(const ModelConfig& model, const TrainConfig& train,
                      const std::vector<std::string>& lines, const Vocab& vocab);

void write_trace_csv(const std::vector<StepRecord>& trace, const std::filesystem::path& path);
nlohmann::json trace_summary(const std::vector<StepRecord>& trace);

}  // namespace funnel
