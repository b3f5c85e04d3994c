#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "funnel/rng.hpp"
#include "funnel/tensor.hpp"

namespace funnel {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode record of executed operations. Nodes are appended in
/// execution order, so inputs always precede their consumers. One tape per
/// forward/backward pass; not thread-safe.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Accumulates d(root)/d(node) for every node that requires a gradient.
  /// root must hold exactly one element. May be called once per tape.
  void backward(Var root);

  /// Gradient after backward(); zeros of the value's shape when the node was
  /// not reached.
  Tensor grad(Var v) const;

  /// Used by op implementations.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
  bool any_requires_grad(std::span<const Var> inputs) const;
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Tensor grad;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// --- differentiable operations --------------------------------------------
// Result dtype is f32 if any operand is f32, else f64.

Var matmul(Var a, Var b);
/// a[m,k] * b[n,k]^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// x[m,n] + b[n] on every row.
Var add_bias(Var x, Var b);
Var scale(Var x, double factor);
Var softmax_lastdim(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps);
Var gelu(Var x);
/// Inverted dropout; identity when rate == 0.
Var dropout(Var x, double rate, Rng& rng);

Var slice_cols(Var x, std::size_t start, std::size_t len);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var x, std::span<const std::size_t> rows);
Var concat_rows(std::span<const Var> parts);

enum class SegmentReduce { Mean, Max };
/// Output row g reduces the listed rows of x; an empty group yields zeros.
Var segment_reduce(Var x, const std::vector<std::vector<std::size_t>>& groups, SegmentReduce op);

/// out[i, j] = s[i, index[i * width + j]] with out of shape [rows(s), width].
Var gather_per_row(Var s, std::span<const std::size_t> index, std::size_t width);
/// out[i, j] = <q[i, :], p[i * k + j, :]>, q: [m, d], p: [m * k, d].
Var rowwise_block_dot(Var q, Var p, std::size_t k);

Var sum(Var x);
Var mean(Var x);
/// Mean over rows of -log softmax(logits[r, :])[targets[r]].
Var cross_entropy(Var logits, std::span<const std::size_t> targets);
/// Weighted mean binary cross-entropy on logits (one logit per element).
Var bce_with_logits(Var logits, std::span<const double> labels, std::span<const double> weights);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// GeLU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;
double gelu_scalar(double x);

// --- finite-difference oracle ----------------------------------------------

/// Builds the scalar objective on the given tape from the bound parameters.
using ScalarFn = std::function<Var(Tape&, std::span<const Var> params)>;

struct GradCheckOptions {
  double eps = 1e-5;
  /// Additional step sizes. When non-empty each coordinate is differenced at
  /// eps and at every entry here, and the smallest relative error is kept.
  /// One step cannot serve coordinates with high curvature and coordinates
  /// whose gradient is near the roundoff floor at the same time.
  std::vector<double> extra_steps;
  /// When nonzero, only this many coordinates per tensor are probed (chosen
  /// uniformly without replacement by `seed`); zero probes every coordinate.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double step = 0.0;  // step that produced `numeric`
  std::size_t coords_checked = 0;
};

/// Central differences at 1e-3 with 1e-2, 1e-4 and 1e-5 as alternative steps.
/// Suits deep stacks where embedding curvature and near-zero W_R gradients
/// need different steps.
GradCheckOptions step_ladder(std::size_t max_coords_per_tensor = 0, std::uint64_t seed = 0);

/// Central differences (f(x+eps e) - f(x-eps e)) / 2 eps against the taped
/// gradient. Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult grad_check(const ScalarFn& f, std::span<const Tensor> params,
                           const GradCheckOptions& options = {});

}  // namespace funnel
