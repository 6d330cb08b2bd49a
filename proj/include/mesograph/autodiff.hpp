#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records every operation in execution order; Tape::backward sweeps the
// records in reverse and accumulates gradients into every node that requires
// them. One tape belongs to one thread. Independent tapes share nothing.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mesograph/errors.hpp"
#include "mesograph/matrix.hpp"

namespace mesograph::ad {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Matrix value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad, true});
    return {this, nodes_.size() - 1};
  }
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  /// Records an op result. `requires_grad` should be true iff any parent requires it.
  Var record(Matrix value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad ? std::move(backward) : BackwardFn{},
                          requires_grad, false});
    return {this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient of a node; an empty matrix means "never reached".
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }

  /// Accumulation target for `id`, zero-initialised on first touch.
  Matrix& grad_accumulator(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols(), 0.0);
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar output. Leaf gradients accumulate across calls.
  void backward(Var out, double seed = 1.0) {
    if (out.tape != this) throw UsageError("backward: variable belongs to another tape");
    const Matrix& v = nodes_[out.id].value;
    if (v.rows() != 1 || v.cols() != 1) {
      throw UsageError("backward: loss must be scalar, got " + v.shape());
    }
    for (auto& n : nodes_) {
      if (!n.is_leaf) n.grad = Matrix();
    }
    if (!nodes_[out.id].requires_grad) return;
    grad_accumulator(out.id)[0] += seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.is_leaf || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Matrix();
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }
inline const Matrix& Var::grad() const { return tape->grad(id); }

namespace detail {

inline void same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape != b.tape) throw UsageError(std::string(op) + ": operands live on different tapes");
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw UsageError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

template <class F, class DF>
Var unary(Var x, F f, DF df) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), x.tape->requires_grad(xi), [xi, df](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& xv = t.value(xi);
    const Matrix& yv = t.value(self);
    Matrix& gx = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

namespace detail {

// Row-major kernels. Inner loops run along contiguous rows.

template <std::size_t N>
inline void gemm_nn_fixed(const double* a, const double* b, double* c, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    double acc[N] = {};
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * N;
      for (std::size_t j = 0; j < N; ++j) acc[j] += aip * bp[j];
    }
    double* ci = c + i * N;
    for (std::size_t j = 0; j < N; ++j) ci[j] += acc[j];
  }
}

/// C += A·B
inline void gemm_nn(const Matrix& A, const Matrix& B, Matrix& C) {
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  const double* a = A.values().data();
  const double* b = B.values().data();
  double* c = C.values().data();
  // The default model widths get unrolled kernels.
  if (n == 1) return gemm_nn_fixed<1>(a, b, c, m, k);
  if (n == 10) return gemm_nn_fixed<10>(a, b, c, m, k);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

/// C += A·Bᵀ, through an explicit transpose of B so the inner loop stays contiguous.
inline void gemm_nt(const Matrix& A, const Matrix& B, Matrix& C) {
  Matrix bt(B.cols(), B.rows());
  for (std::size_t i = 0; i < B.rows(); ++i)
    for (std::size_t j = 0; j < B.cols(); ++j) bt(j, i) = B(i, j);
  gemm_nn(A, bt, C);
}

template <std::size_t N>
inline void gemm_tn_fixed(const double* a, const double* b, double* c, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    double bi[N];
    for (std::size_t j = 0; j < N; ++j) bi[j] = b[i * N + j];
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      double* cp = c + p * N;
      for (std::size_t j = 0; j < N; ++j) cp[j] += aip * bi[j];
    }
  }
}

/// C += Aᵀ·B
inline void gemm_tn(const Matrix& A, const Matrix& B, Matrix& C) {
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  const double* a = A.values().data();
  const double* b = B.values().data();
  double* c = C.values().data();
  if (n == 1) return gemm_tn_fixed<1>(a, b, c, m, k);
  if (n == 10) return gemm_tn_fixed<10>(a, b, c, m, k);
  for (std::size_t i = 0; i < m; ++i) {
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

}  // namespace detail

/// A (m×k) · B (k×n).
inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b, "matmul");
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols() != B.rows()) {
    throw UsageError("matmul: shape mismatch " + A.shape() + " vs " + B.shape());
  }
  Matrix C(A.rows(), B.cols());
  detail::gemm_nn(A, B, C);
  Tape& t = *a.tape;
  const std::size_t ai = a.id, bi = b.id;
  const bool rg = t.requires_grad(ai) || t.requires_grad(bi);
  return t.record(std::move(C), rg, [ai, bi](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    if (t.requires_grad(ai)) {
      detail::gemm_nt(G, t.value(bi), t.grad_accumulator(ai));
    }
    if (t.requires_grad(bi)) {
      detail::gemm_tn(t.value(ai), G, t.grad_accumulator(bi));
    }
  });
}

inline Var transpose(Var x) {
  const Matrix& X = x.value();
  Matrix out(X.cols(), X.rows());
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(j, i) = X(i, j);
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), x.tape->requires_grad(xi), [xi](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    Matrix& GX = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < GX.rows(); ++i)
      for (std::size_t j = 0; j < GX.cols(); ++j) GX(i, j) += G(j, i);
  });
}

/// Rows [start, start+count) of X.
inline Var slice_rows(Var x, std::size_t start, std::size_t count) {
  const Matrix& X = x.value();
  if (start + count > X.rows()) {
    throw UsageError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + X.shape());
  }
  const std::size_t n = X.cols();
  Matrix out(count, n, std::vector<double>(X.values().begin() + static_cast<std::ptrdiff_t>(start * n),
                                           X.values().begin() + static_cast<std::ptrdiff_t>((start + count) * n)));
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), x.tape->requires_grad(xi), [xi, start, n](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    Matrix& GX = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < G.size(); ++i) GX[start * n + i] += G[i];
  });
}

/// X (m×n) + b (1×n), broadcast over rows.
inline Var add_bias(Var x, Var b) {
  detail::same_tape(x, b, "add_bias");
  const Matrix& X = x.value();
  const Matrix& B = b.value();
  if (B.rows() != 1 || B.cols() != X.cols()) {
    throw UsageError("add_bias: shape mismatch " + X.shape() + " vs " + B.shape());
  }
  Matrix out = X;
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) += B(0, j);
  Tape& t = *x.tape;
  const std::size_t xi = x.id, bi = b.id;
  const bool rg = t.requires_grad(xi) || t.requires_grad(bi);
  return t.record(std::move(out), rg, [xi, bi](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    if (t.requires_grad(xi)) {
      Matrix& GX = t.grad_accumulator(xi);
      for (std::size_t i = 0; i < G.size(); ++i) GX[i] += G[i];
    }
    if (t.requires_grad(bi)) {
      Matrix& GB = t.grad_accumulator(bi);
      for (std::size_t i = 0; i < G.rows(); ++i)
        for (std::size_t j = 0; j < G.cols(); ++j) GB(0, j) += G(i, j);
    }
  });
}

namespace detail {

template <class F, class DA, class DB>
Var binary_elementwise(Var a, Var b, const char* name, F f, DA da, DB db) {
  same_tape(a, b, name);
  require_same_shape(a.value(), b.value(), name);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  Matrix out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = f(A[i], B[i]);
  Tape& t = *a.tape;
  const std::size_t ai = a.id, bi = b.id;
  const bool rg = t.requires_grad(ai) || t.requires_grad(bi);
  return t.record(std::move(out), rg, [ai, bi, da, db](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    const Matrix& A = t.value(ai);
    const Matrix& B = t.value(bi);
    if (t.requires_grad(ai)) {
      Matrix& GA = t.grad_accumulator(ai);
      for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i] * da(A[i], B[i]);
    }
    if (t.requires_grad(bi)) {
      Matrix& GB = t.grad_accumulator(bi);
      for (std::size_t i = 0; i < G.size(); ++i) GB[i] += G[i] * db(A[i], B[i]);
    }
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  return detail::binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var relu(Var x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// max(0, x); same kink convention as relu.
inline Var hinge(Var x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(Var x) {
  return detail::unary(
      x, [](double v) { return sigmoid_value(v); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var log(Var x) {
  return detail::unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var square(Var x) {
  return detail::unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var mul_scalar(Var x, double s) {
  return detail::unary(
      x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

/// a·x + b elementwise with constant a, b.
inline Var affine(Var x, double a, double b) {
  return detail::unary(
      x, [a, b](double v) { return a * v + b; }, [a](double, double) { return a; });
}

/// X (m×n) · s where s is a 1×1 variable.
inline Var scale_by(Var x, Var s) {
  detail::same_tape(x, s, "scale_by");
  const Matrix& X = x.value();
  const Matrix& S = s.value();
  if (S.size() != 1) throw UsageError("scale_by: scale must be 1x1, got " + S.shape());
  Matrix out(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] * S[0];
  Tape& t = *x.tape;
  const std::size_t xi = x.id, si = s.id;
  const bool rg = t.requires_grad(xi) || t.requires_grad(si);
  return t.record(std::move(out), rg, [xi, si](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    const Matrix& X = t.value(xi);
    const double sv = t.value(si)[0];
    if (t.requires_grad(xi)) {
      Matrix& GX = t.grad_accumulator(xi);
      for (std::size_t i = 0; i < G.size(); ++i) GX[i] += G[i] * sv;
    }
    if (t.requires_grad(si)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < G.size(); ++i) acc += G[i] * X[i];
      t.grad_accumulator(si)[0] += acc;
    }
  });
}

/// X (m×n) + s where s is a 1×1 variable.
inline Var shift_by(Var x, Var s) {
  detail::same_tape(x, s, "shift_by");
  const Matrix& X = x.value();
  const Matrix& S = s.value();
  if (S.size() != 1) throw UsageError("shift_by: shift must be 1x1, got " + S.shape());
  Matrix out(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] + S[0];
  Tape& t = *x.tape;
  const std::size_t xi = x.id, si = s.id;
  const bool rg = t.requires_grad(xi) || t.requires_grad(si);
  return t.record(std::move(out), rg, [xi, si](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    if (t.requires_grad(xi)) {
      Matrix& GX = t.grad_accumulator(xi);
      for (std::size_t i = 0; i < G.size(); ++i) GX[i] += G[i];
    }
    if (t.requires_grad(si)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < G.size(); ++i) acc += G[i];
      t.grad_accumulator(si)[0] += acc;
    }
  });
}

/// X (m×n) ⊙ r (1×n), broadcast over rows.
inline Var mul_row(Var x, Var r) {
  detail::same_tape(x, r, "mul_row");
  const Matrix& X = x.value();
  const Matrix& R = r.value();
  if (R.rows() != 1 || R.cols() != X.cols()) {
    throw UsageError("mul_row: shape mismatch " + X.shape() + " vs " + R.shape());
  }
  Matrix out(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) = X(i, j) * R(0, j);
  Tape& t = *x.tape;
  const std::size_t xi = x.id, ri = r.id;
  const bool rg = t.requires_grad(xi) || t.requires_grad(ri);
  return t.record(std::move(out), rg, [xi, ri](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    const Matrix& X = t.value(xi);
    const Matrix& R = t.value(ri);
    if (t.requires_grad(xi)) {
      Matrix& GX = t.grad_accumulator(xi);
      for (std::size_t i = 0; i < G.rows(); ++i)
        for (std::size_t j = 0; j < G.cols(); ++j) GX(i, j) += G(i, j) * R(0, j);
    }
    if (t.requires_grad(ri)) {
      Matrix& GR = t.grad_accumulator(ri);
      for (std::size_t i = 0; i < G.rows(); ++i)
        for (std::size_t j = 0; j < G.cols(); ++j) GR(0, j) += G(i, j) * X(i, j);
    }
  });
}

/// Column-wise concatenation; all parts must share the row count.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  Tape& t = *parts[0].tape;
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p, "concat_cols");
    if (p.rows() != m) {
      throw UsageError("concat_cols: shape mismatch " + parts[0].value().shape() + " vs " +
                       p.value().shape());
    }
    ids.push_back(p.id);
    widths.push_back(p.cols());
    total += p.cols();
    rg = rg || t.requires_grad(p.id);
  }
  Matrix out(m, total);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Matrix& P = p.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < P.cols(); ++j) out(i, offset + j) = P(i, j);
    offset += P.cols();
  }
  return t.record(std::move(out), rg, [ids, widths](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (t.requires_grad(ids[p])) {
        Matrix& GP = t.grad_accumulator(ids[p]);
        for (std::size_t i = 0; i < G.rows(); ++i)
          for (std::size_t j = 0; j < widths[p]; ++j) GP(i, j) += G(i, offset + j);
      }
      offset += widths[p];
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// Column means: X (m×n) -> 1×n.
inline Var mean_rows(Var x) {
  const Matrix& X = x.value();
  if (X.rows() == 0) throw UsageError("mean_rows: empty input " + X.shape());
  const double inv = 1.0 / static_cast<double>(X.rows());
  Matrix out(1, X.cols());
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(0, j) += X(i, j);
  for (std::size_t j = 0; j < X.cols(); ++j) out(0, j) *= inv;
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), x.tape->requires_grad(xi), [xi, inv](Tape& t, std::size_t self) {
    const Matrix& G = t.grad(self);
    Matrix& GX = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < GX.rows(); ++i)
      for (std::size_t j = 0; j < GX.cols(); ++j) GX(i, j) += G(0, j) * inv;
  });
}

/// Sum of all entries -> 1×1.
inline Var sum(Var x) {
  const Matrix& X = x.value();
  double s = 0.0;
  for (double v : X.values()) s += v;
  const std::size_t xi = x.id;
  return x.tape->record(Matrix::scalar(s), x.tape->requires_grad(xi), [xi](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Matrix& GX = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < GX.size(); ++i) GX[i] += g;
  });
}

/// Mean of all entries -> 1×1.
inline Var mean_all(Var x) {
  if (x.value().empty()) throw UsageError("mean_all: empty input");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

/// Row gather: out[e] = X[index[e]].
inline Var gather_rows(Var x, std::span<const std::size_t> index) {
  const Matrix& X = x.value();
  Matrix out(index.size(), X.cols());
  for (std::size_t e = 0; e < index.size(); ++e) {
    if (index[e] >= X.rows()) {
      throw UsageError("gather_rows: index " + std::to_string(index[e]) + " out of range for " + X.shape());
    }
    const auto src = X.row_span(index[e]);
    std::copy(src.begin(), src.end(), out.row_span(e).begin());
  }
  const std::size_t xi = x.id;
  std::vector<std::size_t> idx(index.begin(), index.end());
  return x.tape->record(std::move(out), x.tape->requires_grad(xi),
                        [xi, idx = std::move(idx)](Tape& t, std::size_t self) {
                          const Matrix& G = t.grad(self);
                          Matrix& GX = t.grad_accumulator(xi);
                          for (std::size_t e = 0; e < idx.size(); ++e) {
                            auto dst = GX.row_span(idx[e]);
                            auto src = G.row_span(e);
                            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                          }
                        });
}

/// Segment mean: out[s] = mean of rows e with segment[e] == s; empty segments give zero rows.
inline Var segment_mean(Var x, std::span<const std::size_t> segment, std::size_t n_segments) {
  const Matrix& X = x.value();
  if (segment.size() != X.rows()) {
    throw UsageError("segment_mean: " + std::to_string(segment.size()) + " segment ids for " + X.shape());
  }
  std::vector<double> inv_count(n_segments, 0.0);
  for (std::size_t s : segment) {
    if (s >= n_segments) throw UsageError("segment_mean: segment id out of range");
    inv_count[s] += 1.0;
  }
  for (double& c : inv_count) c = c > 0.0 ? 1.0 / c : 0.0;
  Matrix out(n_segments, X.cols());
  for (std::size_t e = 0; e < segment.size(); ++e) {
    auto dst = out.row_span(segment[e]);
    auto src = X.row_span(e);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  for (std::size_t s = 0; s < n_segments; ++s)
    for (double& v : out.row_span(s)) v *= inv_count[s];
  const std::size_t xi = x.id;
  std::vector<std::size_t> seg(segment.begin(), segment.end());
  return x.tape->record(
      std::move(out), x.tape->requires_grad(xi),
      [xi, seg = std::move(seg), inv_count = std::move(inv_count)](Tape& t, std::size_t self) {
        const Matrix& G = t.grad(self);
        Matrix& GX = t.grad_accumulator(xi);
        for (std::size_t e = 0; e < seg.size(); ++e) {
          auto dst = GX.row_span(e);
          auto src = G.row_span(seg[e]);
          const double w = inv_count[seg[e]];
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j] * w;
        }
      });
}

namespace detail {

// H > 0 fixes the row width at compile time; H == 0 reads it from h.
template <std::size_t H>
void rmm_forward(const Matrix& P, const Matrix& Q, std::span<const std::size_t> off, std::span<const std::size_t> src,
                 Matrix& out) {
  const std::size_t n = P.rows(), h = H ? H : P.cols();
  for (std::size_t v = 0; v < n; ++v) {
    const double* pv = P.row_span(v).data();
    double* ov = out.row_span(v).data();
    for (std::size_t e = off[v]; e < off[v + 1]; ++e) {
      const double* qu = Q.row_span(src[e]).data();
      for (std::size_t j = 0; j < h; ++j) ov[j] += std::max(pv[j] - qu[j], 0.0);
    }
    const double inv = 1.0 / static_cast<double>(off[v + 1] - off[v]);
    for (std::size_t j = 0; j < h; ++j) ov[j] *= inv;
  }
}

template <std::size_t H>
void rmm_backward(const Matrix& G, const Matrix& P, const Matrix& Q, std::span<const std::size_t> off,
                  std::span<const std::size_t> src, Matrix* GP, Matrix* GQ) {
  const std::size_t n = P.rows(), h = H ? H : P.cols();
  std::vector<double> g(h), acc(h);
  for (std::size_t v = 0; v < n; ++v) {
    const double inv = 1.0 / static_cast<double>(off[v + 1] - off[v]);
    const double* pv = P.row_span(v).data();
    const double* gv = G.row_span(v).data();
    for (std::size_t j = 0; j < h; ++j) {
      g[j] = gv[j] * inv;
      acc[j] = 0.0;
    }
    for (std::size_t e = off[v]; e < off[v + 1]; ++e) {
      const double* qu = Q.row_span(src[e]).data();
      double* gq = GQ ? GQ->row_span(src[e]).data() : nullptr;
      for (std::size_t j = 0; j < h; ++j) {
        const double m = pv[j] > qu[j] ? g[j] : 0.0;
        acc[j] += m;
        if (gq) gq[j] -= m;
      }
    }
    if (GP) {
      double* gp = GP->row_span(v).data();
      for (std::size_t j = 0; j < h; ++j) gp[j] += acc[j];
    }
  }
}

}  // namespace detail

/// Fused neighbour aggregation over messages grouped by target:
///   out[v] = 1/|M_v| Σ_{e ∈ M_v} relu(P[v] − Q[source_e]),
/// where M_v = [offsets[v], offsets[v+1]) indexes `source`. Every target must
/// have at least one message.
inline Var relu_message_mean(Var p, Var q, std::span<const std::size_t> offsets, std::span<const std::size_t> source) {
  detail::same_tape(p, q, "relu_message_mean");
  detail::require_same_shape(p.value(), q.value(), "relu_message_mean");
  const Matrix& P = p.value();
  const Matrix& Q = q.value();
  const std::size_t n = P.rows(), h = P.cols();
  if (offsets.size() != n + 1 || offsets.back() != source.size()) {
    throw UsageError("relu_message_mean: message offsets do not match " + P.shape());
  }
  for (std::size_t v = 0; v < n; ++v)
    if (offsets[v + 1] <= offsets[v]) throw UsageError("relu_message_mean: node " + std::to_string(v) + " has no messages");
  for (std::size_t u : source)
    if (u >= n) throw UsageError("relu_message_mean: message source out of range");
  Matrix out(n, h);
  if (h == 10) detail::rmm_forward<10>(P, Q, offsets, source, out);
  else detail::rmm_forward<0>(P, Q, offsets, source, out);
  Tape& t = *p.tape;
  const std::size_t pi = p.id, qi = q.id;
  const bool rg = t.requires_grad(pi) || t.requires_grad(qi);
  std::vector<std::size_t> off(offsets.begin(), offsets.end()), src(source.begin(), source.end());
  return t.record(std::move(out), rg,
                  [pi, qi, off = std::move(off), src = std::move(src)](Tape& t, std::size_t self) {
                    Matrix* GP = t.requires_grad(pi) ? &t.grad_accumulator(pi) : nullptr;
                    Matrix* GQ = t.requires_grad(qi) ? &t.grad_accumulator(qi) : nullptr;
                    const Matrix& G = t.grad(self);
                    const Matrix& P = t.value(pi);
                    const Matrix& Q = t.value(qi);
                    if (P.cols() == 10) detail::rmm_backward<10>(G, P, Q, off, src, GP, GQ);
                    else detail::rmm_backward<0>(G, P, Q, off, src, GP, GQ);
                  });
}

/// Pairwise ranking hinge loss over a column of bag scores Z (m×1) and integer
/// rank labels: sum over ordered pairs (i, j) with y_i != y_j of
/// max(0, 1 - (y_i - y_j)(Z_i - Z_j)). Equal-label pairs are skipped.
inline Var ranking_hinge(Var z, std::span<const int> labels) {
  const Matrix& Z = z.value();
  if (Z.cols() != 1 || Z.rows() != labels.size()) {
    throw UsageError("ranking_hinge: scores " + Z.shape() + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t m = Z.rows();
  double loss = 0.0;
  Matrix dZ(m, 1);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double dy = static_cast<double>(labels[i] - labels[j]);
      if (dy == 0.0) continue;
      const double margin = 1.0 - dy * (Z[i] - Z[j]);
      if (margin > 0.0) {
        loss += margin;
        dZ[i] -= dy;
        dZ[j] += dy;
      }
    }
  const std::size_t zi = z.id;
  return z.tape->record(Matrix::scalar(loss), z.tape->requires_grad(zi),
                        [zi, dZ = std::move(dZ)](Tape& t, std::size_t self) {
                          const double g = t.grad(self)[0];
                          Matrix& GZ = t.grad_accumulator(zi);
                          for (std::size_t i = 0; i < GZ.size(); ++i) GZ[i] += g * dZ[i];
                        });
}

}  // namespace mesograph::ad
