#pragma once

#include <string>
#include <vector>

#include "funnel/autodiff.hpp"
#include "funnel/model.hpp"
#include "funnel/rng.hpp"
#include "funnel/tensor.hpp"

namespace funnel::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

/// Tiny f64 model without dropout. `hidden` overrides the layout width.
inline ModelConfig tiny_config(const std::string& layout, std::size_t hidden, std::size_t heads,
                               std::size_t vocab) {
  ModelConfig c;
  c.layout = parse_layout(layout);
  c.vocab_size = vocab;
  c.dropout = 0.0;
  c.attn_dropout = 0.0;
  c.dtype = DType::f64;
  c.dims_override = ModelDims{hidden, heads, hidden / heads, 4 * hidden};
  return c;
}

/// Parameters with every tensor randomized (LayerNorm and biases included) so
/// gradients are generic.
inline ParamMap random_params(const ModelConfig& c, Rng& rng, double scale = 0.3) {
  ParamMap p = init_params(c, rng);
  for (auto& [name, t] : p) {
    for (auto& v : t.data()) {
      const double noise = scale * (2.0 * rng.uniform() - 1.0);
      v = name.find("ln_gamma") != std::string::npos ? 1.0 + noise : noise;
    }
    t = Tensor(t.shape(), {t.data().begin(), t.data().end()}, t.dtype());  // re-rounds f32 storage
  }
  return p;
}

inline GradCheckOptions step_ladder(std::size_t max_coords = 0) { return funnel::step_ladder(max_coords); }

}  // namespace funnel::testing
