#pragma once

// Dense 64-bit tensors, a reverse-mode tape, and the Adam optimizer.
//
// Tensors are row-major. Every op treats its inputs as matrices whose column
// count is the last dimension; no broadcasting beyond row-wise bias/affine.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deeptrails/errors.hpp"

namespace deeptrails::ad {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}
  Tensor(std::vector<std::size_t> shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != count(shape_)) throw ShapeError("tensor value count does not match its shape");
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool operator==(const Tensor&) const = default;

 private:
  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline std::string shape_string(const Tensor& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape().size(); ++i) s += (i ? "x" : "") + std::to_string(t.shape()[i]);
  return s + "]";
}

inline void check_finite(const Tensor& t, const char* op) {
  for (double x : t.values()) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

// ---------------------------------------------------------------------------
// Kernels. All written as row axpys so that the compiler vectorizes them
// without reassociating floating-point sums.

namespace kernel {

// C[r x c] += A[r x k] * B[k x c]
inline void gemm_acc(const double* A, const double* B, double* C, std::size_t r, std::size_t k, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i) {
    double* ci = C + i * c;
    const double* ai = A + i * k;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const double a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
      const double* b0 = B + p * c;
      const double* b1 = b0 + c;
      const double* b2 = b1 + c;
      const double* b3 = b2 + c;
      for (std::size_t j = 0; j < c; ++j) ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; p < k; ++p) {
      const double a = ai[p];
      const double* bp = B + p * c;
      for (std::size_t j = 0; j < c; ++j) ci[j] += a * bp[j];
    }
  }
}

// C[k x c] += A[r x k]^T * D[r x c]
inline void gemm_at_acc(const double* A, const double* D, double* C, std::size_t r, std::size_t k, std::size_t c) {
  std::size_t i = 0;
  for (; i + 2 <= r; i += 2) {
    const double* a0 = A + i * k;
    const double* a1 = a0 + k;
    const double* d0 = D + i * c;
    const double* d1 = d0 + c;
    for (std::size_t p = 0; p < k; ++p) {
      const double x0 = a0[p], x1 = a1[p];
      double* cp = C + p * c;
      for (std::size_t j = 0; j < c; ++j) cp[j] += x0 * d0[j] + x1 * d1[j];
    }
  }
  for (; i < r; ++i) {
    const double* ai = A + i * k;
    const double* di = D + i * c;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = ai[p];
      double* cp = C + p * c;
      for (std::size_t j = 0; j < c; ++j) cp[j] += a * di[j];
    }
  }
}

inline std::vector<double> transpose(const double* A, std::size_t r, std::size_t c) {
  std::vector<double> t(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = A[i * c + j];
  return t;
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Tape

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad});
    return Var{nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient of the last backward() root with respect to `v`; zeros if `v`
  /// was not reached.
  Tensor grad(Var v) const {
    const auto& n = node(v);
    if (n.grad.size() == n.value.size()) return n.grad;
    return Tensor(n.value.shape(), 0.0);
  }

  /// Records an op result. `fn` is dropped when no input needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op) {
    check_finite(value, op);
    bool needs = false;
    for (Var in : inputs) needs = needs || node(in).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, needs});
    return Var{nodes_.size() - 1};
  }

  /// Gradient buffer of `v` for accumulation, or nullptr when `v` needs none.
  double* grad_buffer(Var v) {
    auto& n = node(v);
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad.data();
  }

  void backward(Var root) {
    auto& r = node(root);
    if (r.value.size() != 1) throw UsageError("backward() needs a scalar root, got " + shape_string(r.value));
    for (auto& n : nodes_) n.grad = Tensor();
    if (!r.requires_grad) return;
    r.grad = Tensor(r.value.shape(), 1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.size() != n.value.size()) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw UsageError("variable does not belong to this tape");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw UsageError("variable does not belong to this tape");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops

inline Var matmul(Tape& tape, Var a, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  const std::size_t r = A.rows(), k = A.cols(), c = B.cols();
  if (B.rows() != k) throw ShapeError("matmul: " + shape_string(A) + " x " + shape_string(B));
  Tensor out = Tensor::matrix(r, c);
  kernel::gemm_acc(A.data(), B.data(), out.data(), r, k, c);
  return tape.push(std::move(out), {a, b}, [a, b, r, k, c](Tape& t, const Tensor& g) {
    if (double* ga = t.grad_buffer(a)) {
      const auto bt = kernel::transpose(t.value(b).data(), k, c);
      kernel::gemm_acc(g.data(), bt.data(), ga, r, c, k);
    }
    if (double* gb = t.grad_buffer(b)) kernel::gemm_at_acc(t.value(a).data(), g.data(), gb, r, k, c);
  }, "matmul");
}

/// x[r x k] * W[k x c] + bias[c]
inline Var linear(Tape& tape, Var x, Var w, Var bias) {
  const Tensor& X = tape.value(x);
  const Tensor& W = tape.value(w);
  const Tensor& Bv = tape.value(bias);
  const std::size_t r = X.rows(), k = X.cols(), c = W.cols();
  if (W.rows() != k || Bv.size() != c) {
    throw ShapeError("linear: " + shape_string(X) + " x " + shape_string(W) + " + " + shape_string(Bv));
  }
  Tensor out = Tensor::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i) std::copy(Bv.data(), Bv.data() + c, out.data() + i * c);
  kernel::gemm_acc(X.data(), W.data(), out.data(), r, k, c);
  return tape.push(std::move(out), {x, w, bias}, [x, w, bias, r, k, c](Tape& t, const Tensor& g) {
    if (double* gx = t.grad_buffer(x)) {
      const auto wt = kernel::transpose(t.value(w).data(), k, c);
      kernel::gemm_acc(g.data(), wt.data(), gx, r, c, k);
    }
    if (double* gw = t.grad_buffer(w)) kernel::gemm_at_acc(t.value(x).data(), g.data(), gw, r, k, c);
    if (double* gb = t.grad_buffer(bias)) {
      for (std::size_t i = 0; i < r; ++i) {
        const double* gi = g.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) gb[j] += gi[j];
      }
    }
  }, "linear");
}

inline Var transpose(Tape& tape, Var a) {
  const Tensor& A = tape.value(a);
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out({c, r}, kernel::transpose(A.data(), r, c));
  return tape.push(std::move(out), {a}, [a, r, c](Tape& t, const Tensor& g) {
    double* ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  }, "transpose");
}

inline Var add(Tape& tape, Var a, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  if (A.shape() != B.shape()) throw ShapeError("add: " + shape_string(A) + " + " + shape_string(B));
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return tape.push(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    for (Var v : {a, b}) {
      if (double* gv = t.grad_buffer(v)) {
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
      }
    }
  }, "add");
}

/// Elementwise product.
inline Var mul(Tape& tape, Var a, Var b) {
  const Tensor& A = tape.value(a);
  const Tensor& B = tape.value(b);
  if (A.shape() != B.shape()) throw ShapeError("mul: " + shape_string(A) + " * " + shape_string(B));
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return tape.push(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (double* ga = t.grad_buffer(a)) {
      const Tensor& B = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (double* gb = t.grad_buffer(b)) {
      const Tensor& A = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  }, "mul");
}

inline Var add_rowwise(Tape& tape, Var a, Var bias) {
  const Tensor& A = tape.value(a);
  const Tensor& Bv = tape.value(bias);
  const std::size_t r = A.rows(), c = A.cols();
  if (Bv.size() != c) throw ShapeError("add_rowwise: " + shape_string(A) + " + " + shape_string(Bv));
  Tensor out = A;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += Bv[j];
  return tape.push(std::move(out), {a, bias}, [a, bias, r, c](Tape& t, const Tensor& g) {
    if (double* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (double* gb = t.grad_buffer(bias)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
    }
  }, "add_rowwise");
}

inline Var scale(Tape& tape, Var a, double s) {
  Tensor out = tape.value(a);
  for (double& x : out.values()) x *= s;
  return tape.push(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    double* ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  }, "scale");
}

inline Var sum(Tape& tape, Var a) {
  const Tensor& A = tape.value(a);
  double s = 0.0;
  for (double x : A.values()) s += x;
  return tape.push(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    double* ga = t.grad_buffer(a);
    const std::size_t n = t.value(a).size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
  }, "sum");
}

/// Exact (erf-based) GELU.
inline Var gelu(Tape& tape, Var a) {
  Tensor out = tape.value(a);
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (double& x : out.values()) x = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  return tape.push(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    double* ga = t.grad_buffer(a);
    const Tensor& X = t.value(a);
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = X[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      ga[i] += g[i] * (cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x));
    }
  }, "gelu");
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise (x - mean) / sqrt(var + eps) * gain + offset.
inline Var layer_norm(Tape& tape, Var x, Var gain, Var offset) {
  const Tensor& X = tape.value(x);
  const Tensor& G = tape.value(gain);
  const Tensor& O = tape.value(offset);
  const std::size_t r = X.rows(), d = X.cols();
  if (G.size() != d || O.size() != d) throw ShapeError("layer_norm: affine size does not match " + shape_string(X));
  Tensor out(X.shape());
  std::vector<double> xhat(X.size());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = X.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xi[j] - mean) * is;
      xhat[i * d + j] = h;
      out[i * d + j] = h * G[j] + O[j];
    }
  }
  return tape.push(std::move(out), {x, gain, offset},
                   [x, gain, offset, r, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                                const Tensor& g) {
    const Tensor& G = t.value(gain);
    if (double* gg = t.grad_buffer(gain)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
    }
    if (double* go = t.grad_buffer(offset)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) go[j] += g[i * d + j];
    }
    if (double* gx = t.grad_buffer(x)) {
      std::vector<double> dh(d);
      for (std::size_t i = 0; i < r; ++i) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dh[j] = g[i * d + j] * G[j];
          mean_dh += dh[j];
          mean_dh_h += dh[j] * xhat[i * d + j];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_h /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          gx[i * d + j] += inv_std[i] * (dh[j] - mean_dh - xhat[i * d + j] * mean_dh_h);
        }
      }
    }
  }, "layer_norm");
}

/// Rows of `table` selected by `ids` (embedding lookup).
inline Var gather_rows(Tape& tape, Var table, std::vector<int> ids) {
  const Tensor& T = tape.value(table);
  const std::size_t d = T.cols(), n = T.rows();
  Tensor out = Tensor::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n) throw DomainError("gather_rows: index out of range");
    std::copy(T.data() + static_cast<std::size_t>(ids[i]) * d, T.data() + (static_cast<std::size_t>(ids[i]) + 1) * d,
              out.data() + i * d);
  }
  return tape.push(std::move(out), {table}, [table, d, ids = std::move(ids)](Tape& t, const Tensor& g) {
    double* gt = t.grad_buffer(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* row = gt + static_cast<std::size_t>(ids[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
    }
  }, "gather_rows");
}

/// Copy of `base` with row rows[i] replaced by row i of `replacement`.
inline Var replace_rows(Tape& tape, Var base, std::vector<std::size_t> rows, Var replacement) {
  const Tensor& B = tape.value(base);
  const Tensor& R = tape.value(replacement);
  const std::size_t d = B.cols();
  if (R.cols() != d || R.rows() != rows.size()) throw ShapeError("replace_rows: replacement shape mismatch");
  Tensor out = B;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= B.rows()) throw DomainError("replace_rows: row out of range");
    std::copy(R.data() + i * d, R.data() + (i + 1) * d, out.data() + rows[i] * d);
  }
  return tape.push(std::move(out), {base, replacement},
                   [base, replacement, d, rows = std::move(rows)](Tape& t, const Tensor& g) {
    if (double* gb = t.grad_buffer(base)) {
      std::vector<char> replaced(g.rows(), 0);
      for (auto r : rows) replaced[r] = 1;
      for (std::size_t r = 0; r < g.rows(); ++r) {
        if (replaced[r]) continue;
        for (std::size_t j = 0; j < d; ++j) gb[r * d + j] += g[r * d + j];
      }
    }
    if (double* gr = t.grad_buffer(replacement)) {
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gr[i * d + j] += g[rows[i] * d + j];
    }
  }, "replace_rows");
}

/// Multi-head causal self-attention over `batch` sequences of `seq` positions.
/// Input rows are [q | k | v] (width 3d); output rows are concatenated heads (width d).
inline Var causal_attention(Tape& tape, Var qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
  const Tensor& QKV = tape.value(qkv);
  const std::size_t width = QKV.cols();
  if (width % 3 != 0 || (width / 3) % heads != 0 || QKV.rows() != batch * seq) {
    throw ShapeError("causal_attention: bad qkv shape " + shape_string(QKV));
  }
  const std::size_t d = width / 3, hd = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor out = Tensor::matrix(batch * seq, d);
  // probs[b][h][i][j], j <= i
  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = QKV.data() + b * seq * width;
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* q = base + i * width + h * hd;
        double* pi = P + i * seq;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* k = base + j * width + d + h * hd;
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += q[e] * k[e];
          pi[j] = s * sc;
          mx = std::max(mx, pi[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          z += pi[j];
        }
        const double iz = 1.0 / z;
        double* o = out.data() + (b * seq + i) * d + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          pi[j] *= iz;
          const double* v = base + j * width + 2 * d + h * hd;
          for (std::size_t e = 0; e < hd; ++e) o[e] += pi[j] * v[e];
        }
      }
    }
  }
  return tape.push(std::move(out), {qkv},
                   [qkv, batch, seq, heads, d, hd, sc, width, probs = std::move(probs)](Tape& t, const Tensor& g) {
    const Tensor& QKV = t.value(qkv);
    double* gq = t.grad_buffer(qkv);
    std::vector<double> dp(seq);
    for (std::size_t b = 0; b < batch; ++b) {
      const double* base = QKV.data() + b * seq * width;
      double* gbase = gq + b * seq * width;
      for (std::size_t h = 0; h < heads; ++h) {
        const double* P = probs.data() + (b * heads + h) * seq * seq;
        for (std::size_t i = 0; i < seq; ++i) {
          const double* go = g.data() + (b * seq + i) * d + h * hd;
          const double* pi = P + i * seq;
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            const double* v = base + j * width + 2 * d + h * hd;
            double* gv = gbase + j * width + 2 * d + h * hd;
            double s = 0.0;
            for (std::size_t e = 0; e < hd; ++e) {
              s += go[e] * v[e];
              gv[e] += pi[j] * go[e];
            }
            dp[j] = s;
            dot += pi[j] * s;
          }
          const double* q = base + i * width + h * hd;
          double* gqi = gbase + i * width + h * hd;
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = pi[j] * (dp[j] - dot) * sc;
            const double* k = base + j * width + d + h * hd;
            double* gk = gbase + j * width + d + h * hd;
            for (std::size_t e = 0; e < hd; ++e) {
              gqi[e] += ds * k[e];
              gk[e] += ds * q[e];
            }
          }
        }
      }
    }
  }, "causal_attention");
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy

inline constexpr int kIgnoreTarget = -1;

/// Numerically stable log-softmax of each row.
inline std::vector<double> log_softmax_row(std::span<const double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : logits) mx = std::max(mx, x);
  double z = 0.0;
  for (double x : logits) z += std::exp(x - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

inline std::vector<double> softmax_row(std::span<const double> logits) {
  auto out = log_softmax_row(logits);
  for (double& x : out) x = std::exp(x);
  return out;
}

struct CrossEntropy {
  double mean = 0.0;
  std::vector<double> per_position;  // ignored targets report 0
};

/// -log softmax(logits_t)[target_t] per row; mean over non-ignored rows.
inline CrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n) throw ShapeError("cross_entropy: one target per logits row required");
  CrossEntropy ce;
  ce.per_position.assign(n, 0.0);
  std::size_t counted = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == kIgnoreTarget) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) throw DomainError("cross_entropy: target out of range");
    const auto ls = log_softmax_row({logits.data() + i * v, v});
    ce.per_position[i] = -ls[static_cast<std::size_t>(targets[i])];
    ce.mean += ce.per_position[i];
    ++counted;
  }
  if (counted > 0) ce.mean /= static_cast<double>(counted);
  return ce;
}

/// Scalar mean cross-entropy as a tape node.
inline Var cross_entropy(Tape& tape, Var logits, std::vector<int> targets) {
  const Tensor& L = tape.value(logits);
  const std::size_t n = L.rows(), v = L.cols();
  auto ce = softmax_cross_entropy(L, targets);
  std::size_t counted = 0;
  for (int t : targets) counted += t != kIgnoreTarget;
  return tape.push(Tensor::scalar(ce.mean), {logits},
                   [logits, n, v, counted, targets = std::move(targets)](Tape& t, const Tensor& g) {
    if (counted == 0) return;
    const Tensor& L = t.value(logits);
    double* gl = t.grad_buffer(logits);
    const double w = g[0] / static_cast<double>(counted);
    for (std::size_t i = 0; i < n; ++i) {
      if (targets[i] == kIgnoreTarget) continue;
      const auto p = softmax_row({L.data() + i * v, v});
      double* gi = gl + i * v;
      for (std::size_t j = 0; j < v; ++j) gi[j] += w * p[j];
      gi[static_cast<std::size_t>(targets[i])] -= w;
    }
  }, "cross_entropy");
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  long step = 0;
};

inline AdamState make_adam(const AdamConfig& config, const std::vector<Tensor>& params) {
  AdamState s{config, {}, {}, 0};
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.shape(), 0.0);
    s.second_moment.emplace_back(p.shape(), 0.0);
  }
  return s;
}

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(AdamState& state, std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: parameter/gradient/state count mismatch");
  }
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = params[p];
    const Tensor& g = grads[p];
    if (g.size() != w.size() || state.first_moment[p].size() != w.size()) {
      throw ShapeError("adam_step: gradient shape does not match parameter " + std::to_string(p));
    }
    double* m = state.first_moment[p].data();
    double* v = state.second_moment[p].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

}  // namespace deeptrails::ad
