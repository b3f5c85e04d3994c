#include "funnel/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace funnel {

const Tensor& Var::value() const {
  if (!tape) throw ContractError("use of an unbound Var");
  return tape->value(*this);
}

Var Tape::constant(Tensor value) { return record(std::move(value), {}, nullptr); }

Var Tape::parameter(Tensor value) {
  Var v = record(std::move(value), {}, nullptr);
  nodes_[v.id].requires_grad = true;
  return v;
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  value.round_to_dtype();
  Node node;
  node.value = std::move(value);
  node.inputs = std::move(inputs);
  node.requires_grad = static_cast<bool>(fn);
  node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

bool Tape::any_requires_grad(std::span<const Var> inputs) const {
  return std::any_of(inputs.begin(), inputs.end(),
                     [&](const Var& v) { return nodes_.at(v.id).requires_grad; });
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_.at(id);
  if (node.grad.empty()) node.grad = Tensor(node.value.shape(), DType::f64);
  return node.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ContractError("backward: root belongs to another tape");
  const Tensor& rv = value(root);
  if (rv.numel() != 1) {
    throw ContractError("backward: root must be a scalar, got shape " +
                        shape_to_string(rv.shape()));
  }
  if (backward_done_) throw ContractError("backward: tape already consumed");
  backward_done_ = true;
  if (!nodes_[root.id].requires_grad) return;
  grad_buffer(root.id)[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
    // Closures only write into their inputs' buffers, which precede node i.
    node.backward(*this, node.grad);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (node.grad.empty()) return Tensor(node.value.shape(), DType::f64);
  return node.grad;
}

namespace {

DType result_dtype(std::initializer_list<Var> vars) {
  for (const auto& v : vars)
    if (v.value().dtype() == DType::f32) return DType::f32;
  return DType::f64;
}

Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const auto& v : vars) {
    if (!v.tape) throw ContractError("unbound Var passed to an op");
    if (t && v.tape != t) throw ContractError("Vars from different tapes mixed in one op");
    t = v.tape;
  }
  return *t;
}

/// Gradient buffer of node `id`, or nullptr when it needs none.
Tensor* target(Tape& tape, std::size_t id) {
  Var v{&tape, id};
  return tape.requires_grad(v) ? &tape.grad_buffer(id) : nullptr;
}

Var emit(Tape& tape, Tensor value, std::initializer_list<Var> inputs, Tape::BackwardFn fn) {
  std::vector<std::size_t> ids;
  std::vector<Var> vs(inputs);
  for (const auto& v : vs) ids.push_back(v.id);
  if (!tape.any_requires_grad(vs)) fn = nullptr;
  return tape.record(std::move(value), std::move(ids), std::move(fn));
}

Var emit_many(Tape& tape, Tensor value, std::span<const Var> inputs, Tape::BackwardFn fn) {
  std::vector<std::size_t> ids;
  for (const auto& v : inputs) ids.push_back(v.id);
  if (!tape.any_requires_grad(inputs)) fn = nullptr;
  return tape.record(std::move(value), std::move(ids), std::move(fn));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

std::size_t last_extent(const Tensor& t) { return t.shape().back(); }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_to_string(av.shape()) + " x " +
                         shape_to_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n}, result_dtype({a, b}));
  kernels::matmul_acc(av.data(), bv.data(), out.data(), m, k, n);
  return emit(tape, std::move(out), {a, b}, [a = a.id, b = b.id, m, k, n](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(Var{&t, a});
    const Tensor& B = t.value(Var{&t, b});
    if (Tensor* ga = target(t, a)) kernels::matmul_nt_acc(g.data(), B.data(), ga->data(), m, n, k);
    if (Tensor* gb = target(t, b)) kernels::matmul_tn_acc(A.data(), g.data(), gb->data(), m, k, n);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
    throw DimensionError("matmul_nt shape mismatch: " + shape_to_string(av.shape()) + " x " +
                         shape_to_string(bv.shape()) + "^T");
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  Tensor out({m, n}, result_dtype({a, b}));
  kernels::matmul_nt_acc(av.data(), bv.data(), out.data(), m, k, n);
  return emit(tape, std::move(out), {a, b}, [a = a.id, b = b.id, m, k, n](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(Var{&t, a});
    const Tensor& B = t.value(Var{&t, b});
    if (Tensor* ga = target(t, a)) kernels::matmul_acc(g.data(), B.data(), ga->data(), m, n, k);
    if (Tensor* gb = target(t, b)) kernels::matmul_tn_acc(g.data(), A.data(), gb->data(), m, n, k);
  });
}

Var transpose(Var a) {
  Tape& tape = same_tape({a});
  require_matrix(a.value(), "transpose");
  Tensor out = transpose(a.value());
  return emit(tape, std::move(out), {a}, [a = a.id](Tape& t, const Tensor& g) {
    if (Tensor* ga = target(t, a)) {
      const Tensor gt = transpose(g);
      for (std::size_t i = 0; i < gt.numel(); ++i) (*ga)[i] += gt[i];
    }
  });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.shape(), result_dtype({a, b}));
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return emit(tape, std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, const Tensor& g) {
    for (std::size_t id : {a, b})
      if (Tensor* gt = target(t, id))
        for (std::size_t i = 0; i < g.numel(); ++i) (*gt)[i] += g[i];
  });
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.shape(), result_dtype({a, b}));
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return emit(tape, std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, const Tensor& g) {
    if (Tensor* ga = target(t, a))
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
    if (Tensor* gb = target(t, b))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.shape(), result_dtype({a, b}));
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return emit(tape, std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(Var{&t, a});
    const Tensor& B = t.value(Var{&t, b});
    if (Tensor* ga = target(t, a))
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * B[i];
    if (Tensor* gb = target(t, b))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * A[i];
  });
}

Var add_bias(Var x, Var b) {
  Tape& tape = same_tape({x, b});
  const Tensor& xv = x.value();
  require_matrix(xv, "add_bias");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (b.value().numel() != n) {
    throw DimensionError("add_bias: bias " + shape_to_string(b.shape()) + " vs input " +
                         shape_to_string(xv.shape()));
  }
  Tensor out(xv.shape(), result_dtype({x, b}));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + b.value()[j];
  return emit(tape, std::move(out), {x, b}, [x = x.id, b = b.id, m, n](Tape& t, const Tensor& g) {
    if (Tensor* gx = target(t, x))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
    if (Tensor* gb = target(t, b))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
  });
}

Var scale(Var x, double factor) {
  Tape& tape = same_tape({x});
  Tensor out(x.shape(), x.value().dtype());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * factor;
  return emit(tape, std::move(out), {x}, [x = x.id, factor](Tape& t, const Tensor& g) {
    if (Tensor* gx = target(t, x))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * factor;
  });
}

Var softmax_lastdim(Var x) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  const std::size_t n = last_extent(xv);
  const std::size_t rows = xv.numel() / n;
  Tensor out(xv.shape(), xv.dtype());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * n;
    double* o = out.data().data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(in[j])) throw NumericError("softmax: NaN input in row " + std::to_string(r));
      mx = std::max(mx, in[j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw NumericError("softmax: every entry of row " + std::to_string(r) +
                         " is -inf (all keys masked)");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  const std::size_t self = tape.size();
  return emit(tape, std::move(out), {x}, [x = x.id, self, n, rows](Tape& t, const Tensor& g) {
    Tensor* gx = target(t, x);
    if (!gx) return;
    const Tensor& y = t.value(Var{&t, self});
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) (*gx)[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& tape = same_tape({x, gamma, beta});
  const Tensor& xv = x.value();
  const std::size_t n = last_extent(xv);
  if (gamma.value().numel() != n || beta.value().numel() != n) {
    throw DimensionError("layer_norm: gamma/beta " + shape_to_string(gamma.shape()) + "/" +
                         shape_to_string(beta.shape()) + " do not match last extent of " +
                         shape_to_string(xv.shape()));
  }
  const std::size_t rows = xv.numel() / n;
  Tensor out(xv.shape(), result_dtype({x, gamma, beta}));
  std::vector<double> xhat(xv.numel());
  std::vector<double> rstd(rows);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mu) * rstd[r];
      out[r * n + j] = xhat[r * n + j] * gv[j] + bv[j];
    }
  }
  return emit(tape, std::move(out), {x, gamma, beta},
              [x = x.id, gm = gamma.id, bt = beta.id, xhat = std::move(xhat),
               rstd = std::move(rstd), n, rows](Tape& t, const Tensor& g) {
                const Tensor& gv = t.value(Var{&t, gm});
                if (Tensor* gg = target(t, gm))
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g[r * n + j] * xhat[r * n + j];
                if (Tensor* gb = target(t, bt))
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[r * n + j];
                Tensor* gx = target(t, x);
                if (!gx) return;
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t r = 0; r < rows; ++r) {
                  double mean_d = 0.0, mean_dx = 0.0;
                  for (std::size_t j = 0; j < n; ++j) {
                    const double d = g[r * n + j] * gv[j];
                    mean_d += d;
                    mean_dx += d * xhat[r * n + j];
                  }
                  mean_d *= inv_n;
                  mean_dx *= inv_n;
                  for (std::size_t j = 0; j < n; ++j) {
                    const double d = g[r * n + j] * gv[j];
                    (*gx)[r * n + j] += rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
                  }
                }
              });
}

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluSqrt2OverPi * (x + kGeluCubic * x * x * x)));
}

Var gelu(Var x) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  Tensor out(xv.shape(), xv.dtype());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = gelu_scalar(xv[i]);
  return emit(tape, std::move(out), {x}, [x = x.id](Tape& t, const Tensor& g) {
    Tensor* gx = target(t, x);
    if (!gx) return;
    const Tensor& xv = t.value(Var{&t, x});
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(kGeluSqrt2OverPi * (v + kGeluCubic * v * v * v));
      const double dinner = kGeluSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * v * v);
      (*gx)[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner);
    }
  });
}

Var dropout(Var x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must be in [0, 1)");
  if (rate == 0.0) return x;
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(xv.numel());
  Tensor out(xv.shape(), xv.dtype());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  return emit(tape, std::move(out), {x}, [x = x.id, mask = std::move(mask)](Tape& t, const Tensor& g) {
    if (Tensor* gx = target(t, x))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * mask[i];
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t len) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  if (xv.rank() > 2) require_matrix(xv, "slice_cols");
  // A rank-1 input is a single row and yields a rank-1 slice.
  const std::size_t m = xv.rows(), n = xv.cols();
  if (len == 0 || start + len > n) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of range for " +
                         shape_to_string(xv.shape()));
  }
  Tensor out(xv.rank() == 1 ? Shape{len} : Shape{m, len}, xv.dtype());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = xv[i * n + start + j];
  return emit(tape, std::move(out), {x}, [x = x.id, m, n, start, len](Tape& t, const Tensor& g) {
    if (Tensor* gx = target(t, x))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j) (*gx)[i * n + start + j] += g[i * len + j];
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape& tape = *parts.front().tape;
  const std::size_t m = parts.front().value().rows();
  std::size_t total = 0;
  DType dt = DType::f64;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_matrix(p.value(), "concat_cols");
    if (p.tape != &tape) throw ContractError("concat_cols: mixed tapes");
    if (p.value().dim(0) != m) throw DimensionError("concat_cols: row count mismatch");
    if (p.value().dtype() == DType::f32) dt = DType::f32;
    widths.push_back(p.value().dim(1));
    total += widths.back();
  }
  Tensor out({m, total}, dt);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = pv[i * widths[k] + j];
    off += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return emit_many(tape, std::move(out), parts,
                   [ids, widths, m, total](Tape& t, const Tensor& g) {
                     std::size_t off = 0;
                     for (std::size_t k = 0; k < ids.size(); ++k) {
                       if (Tensor* gp = target(t, ids[k]))
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < widths[k]; ++j)
                             (*gp)[i * widths[k] + j] += g[i * total + off + j];
                       off += widths[k];
                     }
                   });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  require_matrix(xv, "gather_rows");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  for (auto r : rows) {
    if (r >= m) {
      throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range for " +
                           shape_to_string(xv.shape()));
    }
  }
  Tensor out({rows.size(), n}, xv.dtype());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(xv.data().data() + rows[i] * n, n, out.data().data() + i * n);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return emit(tape, std::move(out), {x}, [x = x.id, idx = std::move(idx), n](Tape& t, const Tensor& g) {
    if (Tensor* gx = target(t, x))
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) (*gx)[idx[i] * n + j] += g[i * n + j];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Tape& tape = *parts.front().tape;
  const std::size_t n = parts.front().value().cols();
  std::size_t total = 0;
  DType dt = DType::f64;
  for (const auto& p : parts) {
    require_matrix(p.value(), "concat_rows");
    if (p.tape != &tape) throw ContractError("concat_rows: mixed tapes");
    if (p.value().dim(1) != n) throw DimensionError("concat_rows: column count mismatch");
    if (p.value().dtype() == DType::f32) dt = DType::f32;
    total += p.value().dim(0);
  }
  Tensor out({total, n}, dt);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + off);
    off += p.value().numel();
  }
  std::vector<std::size_t> ids;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    ids.push_back(p.id);
    sizes.push_back(p.value().numel());
  }
  return emit_many(tape, std::move(out), parts, [ids, sizes](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gp = target(t, ids[k]))
        for (std::size_t i = 0; i < sizes[k]; ++i) (*gp)[i] += g[off + i];
      off += sizes[k];
    }
  });
}

Var segment_reduce(Var x, const std::vector<std::vector<std::size_t>>& groups, SegmentReduce op) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  require_matrix(xv, "segment_reduce");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (groups.empty()) throw DimensionError("segment_reduce: no groups");
  Tensor out({groups.size(), n}, xv.dtype());
  // For Max, the source row of each output element (first maximum wins).
  std::vector<std::size_t> argmax(op == SegmentReduce::Max ? groups.size() * n : 0);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& grp = groups[gi];
    for (auto r : grp)
      if (r >= m) throw DimensionError("segment_reduce: row index out of range");
    if (grp.empty()) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (op == SegmentReduce::Mean) {
        double s = 0.0;
        for (auto r : grp) s += xv[r * n + j];
        out[gi * n + j] = s / static_cast<double>(grp.size());
      } else {
        std::size_t best = grp.front();
        for (auto r : grp)
          if (xv[r * n + j] > xv[best * n + j]) best = r;
        argmax[gi * n + j] = best;
        out[gi * n + j] = xv[best * n + j];
      }
    }
  }
  return emit(tape, std::move(out), {x},
              [x = x.id, groups, argmax = std::move(argmax), op, n](Tape& t, const Tensor& g) {
                Tensor* gx = target(t, x);
                if (!gx) return;
                for (std::size_t gi = 0; gi < groups.size(); ++gi) {
                  const auto& grp = groups[gi];
                  if (grp.empty()) continue;
                  for (std::size_t j = 0; j < n; ++j) {
                    if (op == SegmentReduce::Mean) {
                      const double share = g[gi * n + j] / static_cast<double>(grp.size());
                      for (auto r : grp) (*gx)[r * n + j] += share;
                    } else {
                      (*gx)[argmax[gi * n + j] * n + j] += g[gi * n + j];
                    }
                  }
                }
              });
}

Var gather_per_row(Var s, std::span<const std::size_t> index, std::size_t width) {
  Tape& tape = same_tape({s});
  const Tensor& sv = s.value();
  require_matrix(sv, "gather_per_row");
  const std::size_t m = sv.dim(0), n = sv.dim(1);
  if (width == 0 || index.size() != m * width) {
    throw DimensionError("gather_per_row: index size " + std::to_string(index.size()) +
                         " does not match " + std::to_string(m) + " x " + std::to_string(width));
  }
  Tensor out({m, width}, sv.dtype());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t c = index[i * width + j];
      if (c >= n) throw DimensionError("gather_per_row: column index outside the table");
      out[i * width + j] = sv[i * n + c];
    }
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return emit(tape, std::move(out), {s},
              [s = s.id, idx = std::move(idx), m, n, width](Tape& t, const Tensor& g) {
                if (Tensor* gs = target(t, s))
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < width; ++j)
                      (*gs)[i * n + idx[i * width + j]] += g[i * width + j];
              });
}

Var rowwise_block_dot(Var q, Var p, std::size_t k) {
  Tape& tape = same_tape({q, p});
  const Tensor& qv = q.value();
  const Tensor& pv = p.value();
  require_matrix(qv, "rowwise_block_dot");
  require_matrix(pv, "rowwise_block_dot");
  const std::size_t m = qv.dim(0), d = qv.dim(1);
  if (k == 0 || pv.dim(0) != m * k || pv.dim(1) != d) {
    throw DimensionError("rowwise_block_dot: " + shape_to_string(qv.shape()) + " vs " +
                         shape_to_string(pv.shape()) + " with k=" + std::to_string(k));
  }
  Tensor out({m, k}, result_dtype({q, p}));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += qv[i * d + c] * pv[(i * k + j) * d + c];
      out[i * k + j] = s;
    }
  return emit(tape, std::move(out), {q, p}, [q = q.id, p = p.id, m, d, k](Tape& t, const Tensor& g) {
    const Tensor& Q = t.value(Var{&t, q});
    const Tensor& P = t.value(Var{&t, p});
    Tensor* gq = target(t, q);
    Tensor* gp = target(t, p);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double gij = g[i * k + j];
        for (std::size_t c = 0; c < d; ++c) {
          if (gq) (*gq)[i * d + c] += gij * P[(i * k + j) * d + c];
          if (gp) (*gp)[(i * k + j) * d + c] += gij * Q[i * d + c];
        }
      }
  });
}

Var sum(Var x) {
  Tape& tape = same_tape({x});
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return emit(tape, Tensor::scalar(s, x.value().dtype()), {x}, [x = x.id](Tape& t, const Tensor& g) {
    if (Tensor* gx = target(t, x))
      for (std::size_t i = 0; i < gx->numel(); ++i) (*gx)[i] += g[0];
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().numel());
  return scale(sum(x), 1.0 / n);
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
  Tape& tape = same_tape({logits});
  const Tensor& lv = logits.value();
  require_matrix(lv, "cross_entropy");
  const std::size_t rows = lv.dim(0), v = lv.dim(1);
  if (targets.size() != rows) throw DimensionError("cross_entropy: one target per row required");
  std::vector<double> probs(lv.numel());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= v) throw DimensionError("cross_entropy: target id out of range");
    const double* in = lv.data().data() + r * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) {
      if (std::isnan(in[j])) throw NumericError("cross_entropy: NaN logit");
      mx = std::max(mx, in[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(in[j] - mx);
      z += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
    total += (std::log(z) + mx) - in[targets[r]];
  }
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return emit(tape, Tensor::scalar(total * inv_rows, lv.dtype()), {logits},
              [l = logits.id, probs = std::move(probs), tg = std::move(tg), v, inv_rows](
                  Tape& t, const Tensor& g) {
                Tensor* gl = target(t, l);
                if (!gl) return;
                for (std::size_t r = 0; r < tg.size(); ++r)
                  for (std::size_t j = 0; j < v; ++j) {
                    const double onehot = (j == tg[r]) ? 1.0 : 0.0;
                    (*gl)[r * v + j] += g[0] * inv_rows * (probs[r * v + j] - onehot);
                  }
              });
}

Var bce_with_logits(Var logits, std::span<const double> labels, std::span<const double> weights) {
  Tape& tape = same_tape({logits});
  const Tensor& lv = logits.value();
  const std::size_t n = lv.numel();
  if (labels.size() != n || weights.size() != n) {
    throw DimensionError("bce_with_logits: labels/weights must match logits count");
  }
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(wsum > 0.0)) throw ContractError("bce_with_logits: total weight must be positive");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = lv[i];
    if (std::isnan(z)) throw NumericError("bce_with_logits: NaN logit");
    total += weights[i] * (std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z))));
  }
  std::vector<double> y(labels.begin(), labels.end());
  std::vector<double> w(weights.begin(), weights.end());
  return emit(tape, Tensor::scalar(total / wsum, lv.dtype()), {logits},
              [l = logits.id, y = std::move(y), w = std::move(w), wsum](Tape& t, const Tensor& g) {
                Tensor* gl = target(t, l);
                if (!gl) return;
                const Tensor& lv = t.value(Var{&t, l});
                for (std::size_t i = 0; i < y.size(); ++i) {
                  const double sig = 1.0 / (1.0 + std::exp(-lv[i]));
                  (*gl)[i] += g[0] * w[i] * (sig - y[i]) / wsum;
                }
              });
}

GradCheckResult grad_check(const ScalarFn& f, std::span<const Tensor> params,
                           const GradCheckOptions& options) {
  GradCheckResult result;
  if (params.empty()) return result;

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.parameter(p));
    Var out = f(tape, vars);
    const double v = out.value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
    tape.backward(out);
    for (const auto& var : vars) analytic.push_back(tape.grad(var));
  }

  std::vector<Tensor> work(params.begin(), params.end());
  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : work) vars.push_back(tape.constant(p));
    const double v = f(tape, vars).value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
    return v;
  };

  std::vector<double> steps = {options.eps};
  steps.insert(steps.end(), options.extra_steps.begin(), options.extra_steps.end());
  for (double h : steps) {
    if (!(h > 0.0) || !std::isfinite(h)) throw ContractError("grad_check: steps must be positive");
  }

  Rng rng(options.seed);
  for (std::size_t pi = 0; pi < work.size(); ++pi) {
    const std::size_t n = work[pi].numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_tensor && options.max_coords_per_tensor < n) {
      for (std::size_t i = 0; i < options.max_coords_per_tensor; ++i) {
        std::swap(coords[i], coords[i + rng.uniform_int(n - i)]);
      }
      coords.resize(options.max_coords_per_tensor);
    }
    for (std::size_t c : coords) {
      const double orig = work[pi][c];
      const double a = analytic[pi][c];
      double best_rel = std::numeric_limits<double>::infinity(), best_numeric = 0.0, best_step = 0.0;
      for (double h : steps) {
        work[pi][c] = orig + h;
        const double fp = evaluate();
        work[pi][c] = orig - h;
        const double fm = evaluate();
        work[pi][c] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        const double rel = std::abs(a - numeric) / denom;
        if (rel < best_rel) {
          best_rel = rel;
          best_numeric = numeric;
          best_step = h;
        }
      }
      ++result.coords_checked;
      if (best_rel > result.max_rel_error) {
        result.max_rel_error = best_rel;
        result.worst_param = pi;
        result.worst_index = c;
        result.analytic = a;
        result.numeric = best_numeric;
        result.step = best_step;
      }
    }
  }
  return result;
}

GradCheckOptions step_ladder(std::size_t max_coords_per_tensor, std::uint64_t seed) {
  GradCheckOptions o;
  o.eps = 1e-3;
  o.extra_steps = {1e-2, 1e-4, 1e-5};
  o.max_coords_per_tensor = max_coords_per_tensor;
  o.seed = seed;
  return o;
}

}  // namespace funnel
