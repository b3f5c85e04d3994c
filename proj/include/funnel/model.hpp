#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "json.hpp"

#include "funnel/autodiff.hpp"
#include "funnel/layout.hpp"
#include "funnel/relattn.hpp"

namespace funnel {

enum class PoolOp { Mean, Max, TopAttn };

PoolOp parse_pool_op(const std::string& name);  // "mean" | "max" | "top_attn"
const char* pool_op_name(PoolOp op);

/// Width settings of the transformer layers.
struct ModelDims {
  std::size_t hidden = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::size_t ffn_inner = 0;

  static ModelDims from_layout(const LayoutSpec& layout);
  bool operator==(const ModelDims&) const = default;
};

struct ModelConfig {
  LayoutSpec layout;
  PoolOp pool_op = PoolOp::Mean;
  bool pool_query_only = true;
  bool separate_cls = true;
  bool truncate_seq = true;
  AttnVariant attn_variant = AttnVariant::Factorized;
  std::size_t vocab_size = 30522;
  double dropout = 0.1;
  double attn_dropout = 0.1;
  DType dtype = DType::f32;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  double ln_eps = 1e-9;
  /// Replaces the layout-derived widths (used for tiny test models whose
  /// hidden size is not a multiple of 64).
  std::optional<ModelDims> dims_override;

  ModelDims dims() const;
  AttentionSettings attention_settings() const;
};

/// Reads the model fields of a config document. Unknown keys are ignored so
/// the same file can carry training settings.
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& config);

/// Named parameter tensors, ordered by name.
using ParamMap = std::map<std::string, Tensor>;

namespace param_names {
inline constexpr const char* kWordEmbedding = "embedding.word";
std::string encoder_layer(std::size_t block, std::size_t param_set);
std::string decoder_layer(std::size_t layer);
}  // namespace param_names

/// Shapes of every tensor a model built from `config` owns.
std::map<std::string, Shape> expected_param_shapes(const ModelConfig& config);

/// Fresh parameters: matrices and embeddings ~ truncated normal(0, init_std),
/// biases 0, LayerNorm gamma 1 / beta 0.
ParamMap init_params(const ModelConfig& config, Rng& rng);

std::size_t count_elements(const ParamMap& params);

/// Parameters registered on a tape, with structured access.
class BoundParams {
 public:
  /// trainable == false registers constants (inference, finite differences).
  BoundParams(Tape& tape, const ParamMap& params, bool trainable);
  /// Wraps variables that are already on the tape.
  static BoundParams from_vars(Tape& tape, std::map<std::string, Var> vars);

  Var operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  AttentionWeights attention(const std::string& layer_prefix, const std::string& rel_proj) const;
  FeedForwardWeights feed_forward(const std::string& layer_prefix) const;
  const std::map<std::string, Var>& vars() const { return vars_; }
  Tape& tape() const { return *tape_; }

 private:
  explicit BoundParams(Tape& tape) : tape_(&tape) {}

  Tape* tape_;
  std::map<std::string, Var> vars_;
};

}  // namespace funnel
