#include "funnel/model.hpp"

#include <stdexcept>

namespace funnel {

PoolOp parse_pool_op(const std::string& name) {
  if (name == "mean") return PoolOp::Mean;
  if (name == "max") return PoolOp::Max;
  if (name == "top_attn") return PoolOp::TopAttn;
  throw std::invalid_argument("unknown pool_op '" + name + "' (expected mean, max or top_attn)");
}

const char* pool_op_name(PoolOp op) {
  switch (op) {
    case PoolOp::Mean:
      return "mean";
    case PoolOp::Max:
      return "max";
    case PoolOp::TopAttn:
      return "top_attn";
  }
  return "?";
}

ModelDims ModelDims::from_layout(const LayoutSpec& layout) {
  return {layout.hidden, layout.heads(), layout.head_dim(), layout.ffn_inner()};
}

ModelDims ModelConfig::dims() const {
  return dims_override ? *dims_override : ModelDims::from_layout(layout);
}

AttentionSettings ModelConfig::attention_settings() const {
  const ModelDims d = dims();
  AttentionSettings s;
  s.heads = d.heads;
  s.head_dim = d.head_dim;
  s.variant = attn_variant;
  s.dropout = dropout;
  s.attn_dropout = attn_dropout;
  s.ln_eps = ln_eps;
  return s;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (!j.contains("layout")) throw std::invalid_argument("config: missing required field 'layout'");
  c.layout = parse_layout(j.at("layout").get<std::string>());
  if (j.contains("pool_op")) c.pool_op = parse_pool_op(j.at("pool_op").get<std::string>());
  c.pool_query_only = j.value("pool_query_only", c.pool_query_only);
  c.separate_cls = j.value("separate_cls", c.separate_cls);
  c.truncate_seq = j.value("truncate_seq", c.truncate_seq);
  if (j.contains("attn_variant")) {
    c.attn_variant = parse_attn_variant(j.at("attn_variant").get<std::string>());
  }
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.dropout = j.value("dropout", c.dropout);
  c.attn_dropout = j.value("attn_dropout", c.attn_dropout);
  if (j.contains("dtype")) c.dtype = parse_dtype(j.at("dtype").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.init_std = j.value("init_std", c.init_std);
  if (c.vocab_size == 0) throw std::invalid_argument("config: vocab_size must be positive");
  if (c.dropout < 0.0 || c.dropout >= 1.0 || c.attn_dropout < 0.0 || c.attn_dropout >= 1.0) {
    throw std::invalid_argument("config: dropout rates must lie in [0, 1)");
  }
  return c;
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {
      {"layout", format_layout(c.layout)},
      {"pool_op", pool_op_name(c.pool_op)},
      {"pool_query_only", c.pool_query_only},
      {"separate_cls", c.separate_cls},
      {"truncate_seq", c.truncate_seq},
      {"attn_variant", attn_variant_name(c.attn_variant)},
      {"vocab_size", c.vocab_size},
      {"dropout", c.dropout},
      {"attn_dropout", c.attn_dropout},
      {"dtype", dtype_name(c.dtype)},
      {"seed", c.seed},
      {"init_std", c.init_std},
  };
}

namespace param_names {

std::string encoder_layer(std::size_t block, std::size_t param_set) {
  return "encoder.block" + std::to_string(block) + ".layer" + std::to_string(param_set);
}

std::string decoder_layer(std::size_t layer) { return "decoder.layer" + std::to_string(layer); }

}  // namespace param_names

namespace {

void add_layer_shapes(std::map<std::string, Shape>& shapes, const std::string& prefix,
                      const ModelDims& d) {
  const std::size_t h = d.hidden;
  for (const char* m : {"q_weight", "k_weight", "v_weight", "o_weight"}) {
    shapes[prefix + ".attn." + m] = {h, h};
  }
  for (const char* b : {"q_bias", "v_bias", "o_bias", "content_bias", "position_bias", "ln_gamma",
                        "ln_beta"}) {
    shapes[prefix + ".attn." + b] = {h};
  }
  shapes[prefix + ".ffn.w1"] = {h, d.ffn_inner};
  shapes[prefix + ".ffn.b1"] = {d.ffn_inner};
  shapes[prefix + ".ffn.w2"] = {d.ffn_inner, h};
  shapes[prefix + ".ffn.b2"] = {h};
  shapes[prefix + ".ffn.ln_gamma"] = {h};
  shapes[prefix + ".ffn.ln_beta"] = {h};
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::map<std::string, Shape> expected_param_shapes(const ModelConfig& config) {
  const ModelDims d = config.dims();
  if (d.heads * d.head_dim != d.hidden || d.hidden % 2 != 0) {
    throw std::invalid_argument("model dims: heads x head_dim must equal an even hidden size");
  }
  std::map<std::string, Shape> shapes;
  shapes[param_names::kWordEmbedding] = {config.vocab_size, d.hidden};
  shapes["embedding.ln_gamma"] = {d.hidden};
  shapes["embedding.ln_beta"] = {d.hidden};
  shapes["encoder.rel_proj"] = {d.hidden, d.hidden};
  for (std::size_t m = 0; m < config.layout.blocks.size(); ++m) {
    for (std::size_t s = 0; s < config.layout.blocks[m].unique_layers; ++s) {
      add_layer_shapes(shapes, param_names::encoder_layer(m, s), d);
    }
  }
  if (config.layout.decoder_layers > 0) {
    shapes["decoder.rel_proj"] = {d.hidden, d.hidden};
    for (std::size_t l = 0; l < config.layout.decoder_layers; ++l) {
      add_layer_shapes(shapes, param_names::decoder_layer(l), d);
    }
  }
  return shapes;
}

ParamMap init_params(const ModelConfig& config, Rng& rng) {
  ParamMap params;
  for (const auto& [name, shape] : expected_param_shapes(config)) {
    Tensor t(shape, config.dtype);
    if (ends_with(name, "ln_gamma")) {
      for (auto& v : t.data()) v = 1.0;
    } else if (shape.size() == 2) {
      for (auto& v : t.data()) v = rng.truncated_normal(config.init_std);
    }
    t.round_to_dtype();
    params.emplace(name, std::move(t));
  }
  return params;
}

std::size_t count_elements(const ParamMap& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

BoundParams::BoundParams(Tape& tape, const ParamMap& params, bool trainable) : tape_(&tape) {
  for (const auto& [name, t] : params) {
    vars_.emplace(name, trainable ? tape.parameter(t) : tape.constant(t));
  }
}

BoundParams BoundParams::from_vars(Tape& tape, std::map<std::string, Var> vars) {
  BoundParams b(tape);
  b.vars_ = std::move(vars);
  return b;
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

AttentionWeights BoundParams::attention(const std::string& p, const std::string& rel_proj) const {
  const std::string a = p + ".attn.";
  AttentionWeights w;
  w.q_weight = (*this)[a + "q_weight"];
  w.q_bias = (*this)[a + "q_bias"];
  w.k_weight = (*this)[a + "k_weight"];
  w.v_weight = (*this)[a + "v_weight"];
  w.v_bias = (*this)[a + "v_bias"];
  w.o_weight = (*this)[a + "o_weight"];
  w.o_bias = (*this)[a + "o_bias"];
  w.content_bias = (*this)[a + "content_bias"];
  w.position_bias = (*this)[a + "position_bias"];
  w.ln_gamma = (*this)[a + "ln_gamma"];
  w.ln_beta = (*this)[a + "ln_beta"];
  w.rel_proj = (*this)[rel_proj];
  return w;
}

FeedForwardWeights BoundParams::feed_forward(const std::string& p) const {
  const std::string f = p + ".ffn.";
  return {(*this)[f + "w1"], (*this)[f + "b1"], (*this)[f + "w2"],
          (*this)[f + "b2"], (*this)[f + "ln_gamma"], (*this)[f + "ln_beta"]};
}

}  // namespace funnel
