#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "star/tensor.hpp"

// The closed kernel set the model and losses are built from: matmul,
// embedding lookup, RMS normalization, elementwise add/mul, GELU,
// masked_softmax, cross-entropy-from-logits, cosine distance, L2
// normalization, mean-reduce, plus gradient-free data movement (reshape,
// head split/merge, gathers, concat). Dense inner loops map onto Eigen;
// every op checks its output for NaN/Inf and records a backward closure on
// the active tape.

namespace star::ops {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const EMat<T>>;

// Additive-mask entries are exactly 0 (admissible) or this sentinel
// (masked). A finite sentinel keeps arithmetic NaN-free in backprop;
// masked_softmax clamps masked probabilities to exactly 0 regardless.
template <typename T>
constexpr T mask_sentinel() {
  if constexpr (std::is_same_v<T, float>) return -1e9f;
  else return -1e18;
}

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) throw NumericsError(std::string("non-finite values in ") + op);
  }
}

template <typename T>
inline bool taped(std::initializer_list<const Tensor<T>*> ins) {
  if (!active_tape<T>()) return false;
  for (const auto* t : ins)
    if ((*t).requires_grad()) return true;
  return false;
}

template <typename T>
inline void mark_out(Tensor<T>& out) {
  out.node()->requires_grad = true;
}

// ---------------------------------------------------------------------------
// matmul: x [.., k] @ w [k, n] -> [.., n]; leading dims of x are flattened.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) {
  if (w.rank() != 2 || x.dim(-1) != w.dim(0))
    throw NumericsError("matmul: shape mismatch " + shape_str(x.shape()) + " @ " + shape_str(w.shape()));
  const int k = w.dim(0), n = w.dim(1);
  const int rows = static_cast<int>(x.size()) / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  auto out = Tensor<T>::zeros(out_shape);
  {
    CMapM<T> X(x.values().data(), rows, k);
    CMapM<T> W(w.values().data(), k, n);
    MapM<T> O(out.values().data(), rows, n);
    O.noalias() = X * W;
  }
  check_finite(out, "matmul");
  if (taped<T>({&x, &w})) {
    mark_out(out);
    auto xn = x.node(), wn = w.node(), on = out.node();
    active_tape<T>()->record(on, [xn, wn, on, rows, k, n] {
      CMapM<T> G(on->grad.data(), rows, n);
      if (xn->requires_grad) {
        if (xn->grad.size() != xn->values.size()) xn->grad.assign(xn->values.size(), T(0));
        MapM<T> GX(xn->grad.data(), rows, k);
        CMapM<T> W(wn->values.data(), k, n);
        GX.noalias() += G * W.transpose();
      }
      if (wn->requires_grad) {
        if (wn->grad.size() != wn->values.size()) wn->grad.assign(wn->values.size(), T(0));
        MapM<T> GW(wn->grad.data(), k, n);
        CMapM<T> X(xn->values.data(), rows, k);
        GW.noalias() += X.transpose() * G;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// bmm: a [S.., m, k] @ b [S.., k, n] -> [S.., m, n], slice-wise.
// bmm_nt: a [S.., m, k] @ b [S.., n, k]^T -> [S.., m, n].
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> bmm_impl(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b, const char* name) {
  if (a.rank() < 2 || a.rank() != b.rank())
    throw NumericsError(std::string(name) + ": rank mismatch");
  for (int i = 0; i < a.rank() - 2; ++i)
    if (a.dim(i) != b.dim(i)) throw NumericsError(std::string(name) + ": leading dim mismatch");
  const int m = a.dim(-2), k = a.dim(-1);
  const int bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const int n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (bk != k) throw NumericsError(std::string(name) + ": inner dim mismatch");
  const int slices = static_cast<int>(a.size()) / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  auto out = Tensor<T>::zeros(out_shape);
  const int brows = transpose_b ? n : k;
  const int bcols = transpose_b ? k : n;
  for (int s = 0; s < slices; ++s) {
    CMapM<T> A(a.values().data() + static_cast<std::size_t>(s) * m * k, m, k);
    CMapM<T> B(b.values().data() + static_cast<std::size_t>(s) * brows * bcols, brows, bcols);
    MapM<T> O(out.values().data() + static_cast<std::size_t>(s) * m * n, m, n);
    if (transpose_b) O.noalias() = A * B.transpose();
    else O.noalias() = A * B;
  }
  check_finite(out, name);
  if (taped<T>({&a, &b})) {
    mark_out(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape<T>()->record(on, [an, bn, on, slices, m, k, n, brows, bcols, transpose_b] {
      if (an->requires_grad && an->grad.size() != an->values.size()) an->grad.assign(an->values.size(), T(0));
      if (bn->requires_grad && bn->grad.size() != bn->values.size()) bn->grad.assign(bn->values.size(), T(0));
      for (int s = 0; s < slices; ++s) {
        CMapM<T> G(on->grad.data() + static_cast<std::size_t>(s) * m * n, m, n);
        CMapM<T> A(an->values.data() + static_cast<std::size_t>(s) * m * k, m, k);
        CMapM<T> B(bn->values.data() + static_cast<std::size_t>(s) * brows * bcols, brows, bcols);
        if (an->requires_grad) {
          MapM<T> GA(an->grad.data() + static_cast<std::size_t>(s) * m * k, m, k);
          if (transpose_b) GA.noalias() += G * B;
          else GA.noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
          MapM<T> GB(bn->grad.data() + static_cast<std::size_t>(s) * brows * bcols, brows, bcols);
          if (transpose_b) GB.noalias() += G.transpose() * A;
          else GB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  return bmm_impl(a, b, false, "bmm");
}

template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
  return bmm_impl(a, b, true, "bmm_nt");
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------
template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw NumericsError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  auto out = Tensor<T>::zeros(a.shape());
  const std::size_t n = out.size();
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  check_finite(out, "add");
  if (taped<T>({&a, &b})) {
    mark_out(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape<T>()->record(on, [an, bn, on, n] {
      if (an->requires_grad) {
        if (an->grad.size() != n) an->grad.assign(n, T(0));
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        if (bn->grad.size() != n) bn->grad.assign(n, T(0));
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto out = Tensor<T>::zeros(a.shape());
  const std::size_t n = out.size();
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
  check_finite(out, "mul");
  if (taped<T>({&a, &b})) {
    mark_out(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape<T>()->record(on, [an, bn, on, n] {
      if (an->requires_grad) {
        if (an->grad.size() != n) an->grad.assign(n, T(0));
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->values[i];
      }
      if (bn->requires_grad) {
        if (bn->grad.size() != n) bn->grad.assign(n, T(0));
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->values[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  auto out = Tensor<T>::zeros(a.shape());
  const std::size_t n = out.size();
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * c;
  check_finite(out, "scale");
  if (taped<T>({&a})) {
    mark_out(out);
    auto an = a.node(), on = out.node();
    active_tape<T>()->record(on, [an, on, n, c] {
      if (!an->requires_grad) return;
      if (an->grad.size() != n) an->grad.assign(n, T(0));
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * c;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  auto out = Tensor<T>::zeros(a.shape());
  const std::size_t n = out.size();
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + c;
  check_finite(out, "add_scalar");
  if (taped<T>({&a})) {
    mark_out(out);
    auto an = a.node(), on = out.node();
    active_tape<T>()->record(on, [an, on, n] {
      if (!an->requires_grad) return;
      if (an->grad.size() != n) an->grad.assign(n, T(0));
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

// x [.., D] + bias [D], broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const int d = x.dim(-1);
  if (bias.rank() != 1 || bias.dim(0) != d) throw NumericsError("add_bias: bias shape mismatch");
  auto out = Tensor<T>::zeros(x.shape());
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  auto xv = x.values(), bv = bias.values();
  auto ov = out.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] + bv[static_cast<std::size_t>(j)];
  check_finite(out, "add_bias");
  if (taped<T>({&x, &bias})) {
    mark_out(out);
    auto xn = x.node(), bn = bias.node(), on = out.node();
    active_tape<T>()->record(on, [xn, bn, on, rows, d] {
      if (xn->requires_grad) {
        if (xn->grad.size() != xn->values.size()) xn->grad.assign(xn->values.size(), T(0));
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        if (bn->grad.size() != bn->values.size()) bn->grad.assign(bn->values.size(), T(0));
        for (std::size_t r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j) bn->grad[static_cast<std::size_t>(j)] += on->grad[r * d + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// GELU, exact erf form: 0.5 x (1 + erf(x / sqrt(2))).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.shape());
  const std::size_t n = out.size();
  auto xv = x.values();
  auto ov = out.values();
  const T inv_sqrt2 = T(0.70710678118654752440084436210485L);
  for (std::size_t i = 0; i < n; ++i) ov[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  check_finite(out, "gelu");
  if (taped<T>({&x})) {
    mark_out(out);
    auto xn = x.node(), on = out.node();
    active_tape<T>()->record(on, [xn, on, n, inv_sqrt2] {
      if (!xn->requires_grad) return;
      if (xn->grad.size() != n) xn->grad.assign(n, T(0));
      const T inv_sqrt2pi = T(0.39894228040143267793994605993438L);
      for (std::size_t i = 0; i < n; ++i) {
        const T v = xn->values[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        xn->grad[i] += on->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// RMS normalization over the last dim: y = x * gain / sqrt(mean(x^2) + eps).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-5)) {
  const int d = x.dim(-1);
  if (gain.rank() != 1 || gain.dim(0) != d) throw NumericsError("rmsnorm: gain shape mismatch");
  auto out = Tensor<T>::zeros(x.shape());
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  auto xv = x.values(), gv = gain.values();
  auto ov = out.values();
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = T(0);
    for (int j = 0; j < d; ++j) {
      const T v = xv[r * d + j];
      ss += v * v;
    }
    const T ir = T(1) / std::sqrt(ss / T(d) + eps);
    inv_rms[r] = ir;
    for (int j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] * ir * gv[static_cast<std::size_t>(j)];
  }
  check_finite(out, "rmsnorm");
  if (taped<T>({&x, &gain})) {
    mark_out(out);
    auto xn = x.node(), gn = gain.node(), on = out.node();
    active_tape<T>()->record(on, [xn, gn, on, rows, d, inv_rms = std::move(inv_rms)] {
      if (xn->requires_grad && xn->grad.size() != xn->values.size()) xn->grad.assign(xn->values.size(), T(0));
      if (gn->requires_grad && gn->grad.size() != gn->values.size()) gn->grad.assign(gn->values.size(), T(0));
      for (std::size_t r = 0; r < rows; ++r) {
        const T ir = inv_rms[r];
        if (xn->requires_grad) {
          // dx = ir * g*gain - x * ir^3 / d * sum(g*gain*x)
          T dot = T(0);
          for (int j = 0; j < d; ++j)
            dot += on->grad[r * d + j] * gn->values[static_cast<std::size_t>(j)] * xn->values[r * d + j];
          const T k = ir * ir * ir / T(d) * dot;
          for (int j = 0; j < d; ++j)
            xn->grad[r * d + j] +=
                ir * on->grad[r * d + j] * gn->values[static_cast<std::size_t>(j)] - xn->values[r * d + j] * k;
        }
        if (gn->requires_grad) {
          for (int j = 0; j < d; ++j)
            gn->grad[static_cast<std::size_t>(j)] += on->grad[r * d + j] * xn->values[r * d + j] * ir;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup: table [V, D], ids -> [|ids|, D].
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw NumericsError("embedding: table must be rank 2");
  const int v = table.dim(0), d = table.dim(1);
  auto out = Tensor<T>::zeros({static_cast<int>(ids.size()), d});
  auto tv = table.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= v)
      throw NumericsError("embedding: id " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
    std::copy_n(tv.data() + static_cast<std::size_t>(id) * d, d, ov.data() + i * static_cast<std::size_t>(d));
  }
  if (taped<T>({&table})) {
    mark_out(out);
    auto tn = table.node(), on = out.node();
    active_tape<T>()->record(on, [tn, on, ids, d] {
      if (!tn->requires_grad) return;
      if (tn->grad.size() != tn->values.size()) tn->grad.assign(tn->values.size(), T(0));
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          tn->grad[static_cast<std::size_t>(ids[i]) * d + j] += on->grad[i * static_cast<std::size_t>(d) + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// masked_softmax over the last dim. The additive mask holds exactly 0 for
// admissible entries and mask_sentinel<T>() for masked ones; masked outputs
// are exactly 0 and the rest are softmax over the admissible entries
// (max-subtracted, stable for logits up to +-1e4). Mask rank must equal the
// logits rank, with size-1 dims broadcast.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const Tensor<T>& mask) {
  if (mask.requires_grad()) throw NumericsError("masked_softmax: mask must not require grad");
  if (mask.rank() != logits.rank()) throw NumericsError("masked_softmax: mask rank mismatch");
  const int rank = logits.rank();
  for (int i = 0; i < rank; ++i)
    if (mask.dim(i) != logits.dim(i) && mask.dim(i) != 1)
      throw NumericsError("masked_softmax: mask dim " + std::to_string(i) + " not broadcastable");
  if (mask.dim(rank - 1) != logits.dim(rank - 1))
    throw NumericsError("masked_softmax: last mask dim must match");

  const int cols = logits.dim(-1);
  const std::size_t rows = logits.size() / static_cast<std::size_t>(cols);

  // Row-start offsets into the (possibly broadcast) mask.
  std::vector<std::size_t> mask_row(rows);
  {
    std::vector<std::size_t> mstride(static_cast<std::size_t>(rank), 0);
    std::size_t acc = 1;
    for (int i = rank - 1; i >= 0; --i) {
      mstride[static_cast<std::size_t>(i)] = (mask.dim(i) == 1) ? 0 : acc;
      acc *= static_cast<std::size_t>(mask.dim(i));
    }
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t rem = r, off = 0;
      for (int i = rank - 2; i >= 0; --i) {
        const std::size_t extent = static_cast<std::size_t>(logits.dim(i));
        off += (rem % extent) * mstride[static_cast<std::size_t>(i)];
        rem /= extent;
      }
      mask_row[r] = off;
    }
  }

  auto out = Tensor<T>::zeros(logits.shape());
  auto lv = logits.values();
  auto mv = mask.values();
  auto ov = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* lr = lv.data() + r * static_cast<std::size_t>(cols);
    const T* mr = mv.data() + mask_row[r];
    T* orow = ov.data() + r * static_cast<std::size_t>(cols);
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < cols; ++j)
      if (mr[j] == T(0) && lr[j] > mx) mx = lr[j];
    if (!std::isfinite(mx))
      throw NumericsError("masked_softmax: empty attention row " + std::to_string(r));
    T denom = T(0);
    for (int j = 0; j < cols; ++j) {
      if (mr[j] == T(0)) {
        const T e = std::exp(lr[j] - mx);
        orow[j] = e;
        denom += e;
      } else {
        orow[j] = T(0);
      }
    }
    const T inv = T(1) / denom;
    for (int j = 0; j < cols; ++j) orow[j] *= inv;
  }
  check_finite(out, "masked_softmax");
  if (taped<T>({&logits})) {
    mark_out(out);
    auto ln = logits.node(), on = out.node();
    active_tape<T>()->record(on, [ln, on, rows, cols] {
      if (!ln->requires_grad) return;
      if (ln->grad.size() != ln->values.size()) ln->grad.assign(ln->values.size(), T(0));
      for (std::size_t r = 0; r < rows; ++r) {
        const T* p = on->values.data() + r * static_cast<std::size_t>(cols);
        const T* g = on->grad.data() + r * static_cast<std::size_t>(cols);
        T* gl = ln->grad.data() + r * static_cast<std::size_t>(cols);
        T dot = T(0);
        for (int j = 0; j < cols; ++j) dot += g[j] * p[j];
        for (int j = 0; j < cols; ++j) gl[j] += p[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mean negative log-likelihood from raw logits: logits [R, V], targets [R].
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) throw NumericsError("cross_entropy: logits must be [rows, vocab]");
  const int rows = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != rows) throw NumericsError("cross_entropy: target count mismatch");
  auto lv = logits.values();
  T total = T(0);
  for (int r = 0; r < rows; ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= v)
      throw NumericsError("cross_entropy: target " + std::to_string(t) + " out of vocab [0," + std::to_string(v) + ")");
    const T* lr = lv.data() + static_cast<std::size_t>(r) * v;
    T mx = lr[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
    T denom = T(0);
    for (int j = 0; j < v; ++j) denom += std::exp(lr[j] - mx);
    total += std::log(denom) + mx - lr[t];
  }
  auto out = Tensor<T>::scalar(total / T(rows));
  check_finite(out, "cross_entropy");
  if (taped<T>({&logits})) {
    mark_out(out);
    auto ln = logits.node(), on = out.node();
    active_tape<T>()->record(on, [ln, on, targets, rows, v] {
      if (!ln->requires_grad) return;
      if (ln->grad.size() != ln->values.size()) ln->grad.assign(ln->values.size(), T(0));
      const T g = on->grad[0] / T(rows);
      for (int r = 0; r < rows; ++r) {
        const T* lr = ln->values.data() + static_cast<std::size_t>(r) * v;
        T* gl = ln->grad.data() + static_cast<std::size_t>(r) * v;
        T mx = lr[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
        T denom = T(0);
        for (int j = 0; j < v; ++j) denom += std::exp(lr[j] - mx);
        const T inv = T(1) / denom;
        for (int j = 0; j < v; ++j) gl[j] += g * std::exp(lr[j] - mx) * inv;
        gl[targets[static_cast<std::size_t>(r)]] -= g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cosine distance 1 - a.b/(|a||b|), rowwise over [R, D] (or a single [D]).
// ---------------------------------------------------------------------------
template <typename T>
constexpr T norm_floor() {
  if constexpr (std::is_same_v<T, float>) return 1e-20f;
  else return 1e-150;
}

template <typename T>
Tensor<T> cosine_distance_rows(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "cosine_distance");
  const int d = a.dim(-1);
  const std::size_t rows = a.size() / static_cast<std::size_t>(d);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  auto out = Tensor<T>::zeros(out_shape);
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  std::vector<T> na(rows), nb(rows), dots(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* ar = av.data() + r * static_cast<std::size_t>(d);
    const T* br = bv.data() + r * static_cast<std::size_t>(d);
    T aa = T(0), bb = T(0), ab = T(0);
    for (int j = 0; j < d; ++j) {
      aa += ar[j] * ar[j];
      bb += br[j] * br[j];
      ab += ar[j] * br[j];
    }
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    if (na[r] < norm_floor<T>() || nb[r] < norm_floor<T>())
      throw NumericsError("cosine_distance: degenerate feature vector (zero norm) at row " + std::to_string(r));
    dots[r] = ab;
    ov[r] = T(1) - ab / (na[r] * nb[r]);
  }
  check_finite(out, "cosine_distance");
  if (taped<T>({&a, &b})) {
    mark_out(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape<T>()->record(on, [an, bn, on, rows, d, na = std::move(na), nb = std::move(nb), dots = std::move(dots)] {
      if (an->requires_grad && an->grad.size() != an->values.size()) an->grad.assign(an->values.size(), T(0));
      if (bn->requires_grad && bn->grad.size() != bn->values.size()) bn->grad.assign(bn->values.size(), T(0));
      for (std::size_t r = 0; r < rows; ++r) {
        const T g = on->grad[r];
        if (g == T(0)) continue;
        const T* ar = an->values.data() + r * static_cast<std::size_t>(d);
        const T* br = bn->values.data() + r * static_cast<std::size_t>(d);
        const T inv_ab = T(1) / (na[r] * nb[r]);
        const T cosv = dots[r] * inv_ab;
        if (an->requires_grad) {
          T* ga = an->grad.data() + r * static_cast<std::size_t>(d);
          const T inv_a2 = T(1) / (na[r] * na[r]);
          for (int j = 0; j < d; ++j) ga[j] += g * (cosv * ar[j] * inv_a2 - br[j] * inv_ab);
        }
        if (bn->requires_grad) {
          T* gb = bn->grad.data() + r * static_cast<std::size_t>(d);
          const T inv_b2 = T(1) / (nb[r] * nb[r]);
          for (int j = 0; j < d; ++j) gb[j] += g * (cosv * br[j] * inv_b2 - ar[j] * inv_ab);
        }
      }
    });
  }
  return out;
}

// The [D] x [D] -> scalar form from the kernel contract.
template <typename T>
Tensor<T> cosine_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 1 || b.rank() != 1) throw NumericsError("cosine_distance: expected vectors");
  return cosine_distance_rows(a, b);
}

// ---------------------------------------------------------------------------
// L2 normalization over the last dim.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  const int d = x.dim(-1);
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  std::vector<T> inv_norm(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * static_cast<std::size_t>(d);
    T ss = T(0);
    for (int j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T nrm = std::sqrt(ss);
    if (nrm < norm_floor<T>())
      throw NumericsError("l2_normalize: degenerate feature vector (zero norm) at row " + std::to_string(r));
    inv_norm[r] = T(1) / nrm;
    for (int j = 0; j < d; ++j) ov[r * static_cast<std::size_t>(d) + j] = xr[j] * inv_norm[r];
  }
  check_finite(out, "l2_normalize");
  if (taped<T>({&x})) {
    mark_out(out);
    auto xn = x.node(), on = out.node();
    active_tape<T>()->record(on, [xn, on, rows, d, inv_norm = std::move(inv_norm)] {
      if (!xn->requires_grad) return;
      if (xn->grad.size() != xn->values.size()) xn->grad.assign(xn->values.size(), T(0));
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = on->values.data() + r * static_cast<std::size_t>(d);
        const T* g = on->grad.data() + r * static_cast<std::size_t>(d);
        T* gx = xn->grad.data() + r * static_cast<std::size_t>(d);
        T dot = T(0);
        for (int j = 0; j < d; ++j) dot += g[j] * y[j];
        for (int j = 0; j < d; ++j) gx[j] += inv_norm[r] * (g[j] - y[j] * dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// mean over all elements -> scalar
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  const std::size_t n = x.size();
  T total = T(0);
  for (T v : x.values()) total += v;
  auto out = Tensor<T>::scalar(total / T(n));
  check_finite(out, "mean_all");
  if (taped<T>({&x})) {
    mark_out(out);
    auto xn = x.node(), on = out.node();
    active_tape<T>()->record(on, [xn, on, n] {
      if (!xn->requires_grad) return;
      if (xn->grad.size() != n) xn->grad.assign(n, T(0));
      const T g = on->grad[0] / T(n);
      for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rotary position embedding on [N, H, S, dk]; positions gives the absolute
// position of each of the S slots. Pairs (2i, 2i+1) rotate by
// pos * base^(-2i/dk).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> rope(const Tensor<T>& x, const std::vector<int>& positions, T base = T(10000)) {
  if (x.rank() != 4) throw NumericsError("rope: expected [N, H, S, dk]");
  const int n = x.dim(0), h = x.dim(1), s = x.dim(2), dk = x.dim(3);
  if (dk % 2 != 0) throw NumericsError("rope: head dim must be even");
  if (static_cast<int>(positions.size()) != s) throw NumericsError("rope: positions size mismatch");
  const int half = dk / 2;
  // cos/sin table per (slot, pair)
  std::vector<T> cs(static_cast<std::size_t>(s) * half), sn(static_cast<std::size_t>(s) * half);
  for (int t = 0; t < s; ++t) {
    for (int i = 0; i < half; ++i) {
      const T theta = T(positions[static_cast<std::size_t>(t)]) *
                      std::pow(base, -T(2 * i) / T(dk));
      cs[static_cast<std::size_t>(t) * half + i] = std::cos(theta);
      sn[static_cast<std::size_t>(t) * half + i] = std::sin(theta);
    }
  }
  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  const std::size_t slices = static_cast<std::size_t>(n) * h;
  for (std::size_t sl = 0; sl < slices; ++sl) {
    for (int t = 0; t < s; ++t) {
      const std::size_t off = (sl * s + static_cast<std::size_t>(t)) * dk;
      for (int i = 0; i < half; ++i) {
        const T c = cs[static_cast<std::size_t>(t) * half + i];
        const T si = sn[static_cast<std::size_t>(t) * half + i];
        const T x0 = xv[off + 2 * i], x1 = xv[off + 2 * i + 1];
        ov[off + 2 * i] = x0 * c - x1 * si;
        ov[off + 2 * i + 1] = x0 * si + x1 * c;
      }
    }
  }
  check_finite(out, "rope");
  if (taped<T>({&x})) {
    mark_out(out);
    auto xn = x.node(), on = out.node();
    active_tape<T>()->record(on, [xn, on, slices, s, dk, half, cs = std::move(cs), sn = std::move(sn)] {
      if (!xn->requires_grad) return;
      if (xn->grad.size() != xn->values.size()) xn->grad.assign(xn->values.size(), T(0));
      for (std::size_t sl = 0; sl < slices; ++sl) {
        for (int t = 0; t < s; ++t) {
          const std::size_t off = (sl * static_cast<std::size_t>(s) + static_cast<std::size_t>(t)) * dk;
          for (int i = 0; i < half; ++i) {
            const T c = cs[static_cast<std::size_t>(t) * half + i];
            const T si = sn[static_cast<std::size_t>(t) * half + i];
            const T g0 = on->grad[off + 2 * i], g1 = on->grad[off + 2 * i + 1];
            xn->grad[off + 2 * i] += g0 * c + g1 * si;
            xn->grad[off + 2 * i + 1] += -g0 * si + g1 * c;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// data movement: head split/merge, gathers, reshape, concat along time
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
  if (x.rank() != 3) throw NumericsError("split_heads: expected [N, S, D]");
  const int n = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (d % heads != 0) throw NumericsError("split_heads: D not divisible by heads");
  const int dk = d / heads;
  auto out = Tensor<T>::zeros({n, heads, s, dk});
  auto xv = x.values();
  auto ov = out.values();
  for (int b = 0; b < n; ++b)
    for (int hh = 0; hh < heads; ++hh)
      for (int t = 0; t < s; ++t)
        std::copy_n(xv.data() + ((static_cast<std::size_t>(b) * s + t) * d) + hh * dk, dk,
                    ov.data() + (((static_cast<std::size_t>(b) * heads + hh) * s) + t) * dk);
  if (taped<T>({&x})) {
    mark_out(out);
    auto xn = x.node(), on = out.node();
    active_tape<T>()->record(on, [xn, on, n, heads, s, d, dk] {
      if (!xn->requires_grad) return;
      if (xn->grad.size() != xn->values.size()) xn->grad.assign(xn->values.size(), T(0));
      for (int b = 0; b < n; ++b)
        for (int hh = 0; hh < heads; ++hh)
          for (int t = 0; t < s; ++t) {
            const T* g = on->grad.data() + (((static_cast<std::size_t>(b) * heads + hh) * s) + t) * dk;
            T* gx = xn->grad.data() + ((static_cast<std::size_t>(b) * s + t) * d) + hh * dk;
            for (int j = 0; j < dk; ++j) gx[j] += g[j];
          }
    });
  }
  return out;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  if (x.rank() != 4) throw NumericsError("merge_heads: expected [N, H, S, dk]");
  const int n = x.dim(0), heads = x.dim(1), s = x.dim(2), dk = x.dim(3);
  const int d = heads * dk;
  auto out = Tensor<T>::zeros({n, s, d});
  auto xv = x.values();
  auto ov = out.values();
  for (int b = 0; b < n; ++b)
    for (int hh = 0; hh < heads; ++hh)
      for (int t = 0; t < s; ++t)
        std::copy_n(xv.data() + (((static_cast<std::size_t>(b) * heads + hh) * s) + t) * dk, dk,
                    ov.data() + ((static_cast<std::size_t>(b) * s + t) * d) + hh * dk);
  if (taped<T>({&x})) {
    mark_out(out);
    auto xn = x.node(), on = out.node();
    active_tape<T>()->record(on, [xn, on, n, heads, s, d, dk] {
      if (!xn->requires_grad) return;
      if (xn->grad.size() != xn->values.size()) xn->grad.assign(xn->values.size(), T(0));
      for (int b = 0; b < n; ++b)
        for (int hh = 0; hh < heads; ++hh)
          for (int t = 0; t < s; ++t) {
            const T* g = on->grad.data() + ((static_cast<std::size_t>(b) * s + t) * d) + hh * dk;
            T* gx = xn->grad.data() + (((static_cast<std::size_t>(b) * heads + hh) * s) + t) * dk;
            for (int j = 0; j < dk; ++j) gx[j] += g[j];
          }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& idx) {
  if (x.rank() != 2) throw NumericsError("gather_rows: expected [R, C]");
  const int r = x.dim(0), c = x.dim(1);
  auto out = Tensor<T>::zeros({static_cast<int>(idx.size()), c});
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= r) throw NumericsError("gather_rows: index out of range");
    std::copy_n(xv.data() + static_cast<std::size_t>(idx[k]) * c, c, ov.data() + k * static_cast<std::size_t>(c));
  }
  if (taped<T>({&x})) {
    mark_out(out);
    auto xn = x.node(), on = out.node();
    active_tape<T>()->record(on, [xn, on, idx, c] {
      if (!xn->requires_grad) return;
      if (xn->grad.size() != xn->values.size()) xn->grad.assign(xn->values.size(), T(0));
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (int j = 0; j < c; ++j)
          xn->grad[static_cast<std::size_t>(idx[k]) * c + j] += on->grad[k * static_cast<std::size_t>(c) + j];
    });
  }
  return out;
}

// x [N, S, D] gathered at time indices -> [N, |idx|, D]
template <typename T>
Tensor<T> gather_time(const Tensor<T>& x, const std::vector<int>& idx) {
  if (x.rank() != 3) throw NumericsError("gather_time: expected [N, S, D]");
  const int n = x.dim(0), s = x.dim(1), d = x.dim(2);
  const int k = static_cast<int>(idx.size());
  auto out = Tensor<T>::zeros({n, k, d});
  auto xv = x.values();
  auto ov = out.values();
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < k; ++i) {
      if (idx[static_cast<std::size_t>(i)] < 0 || idx[static_cast<std::size_t>(i)] >= s)
        throw NumericsError("gather_time: index out of range");
      std::copy_n(xv.data() + (static_cast<std::size_t>(b) * s + idx[static_cast<std::size_t>(i)]) * d, d,
                  ov.data() + (static_cast<std::size_t>(b) * k + i) * d);
    }
  if (taped<T>({&x})) {
    mark_out(out);
    auto xn = x.node(), on = out.node();
    active_tape<T>()->record(on, [xn, on, idx, n, s, d, k] {
      if (!xn->requires_grad) return;
      if (xn->grad.size() != xn->values.size()) xn->grad.assign(xn->values.size(), T(0));
      for (int b = 0; b < n; ++b)
        for (int i = 0; i < k; ++i) {
          const T* g = on->grad.data() + (static_cast<std::size_t>(b) * k + i) * d;
          T* gx = xn->grad.data() + (static_cast<std::size_t>(b) * s + idx[static_cast<std::size_t>(i)]) * d;
          for (int j = 0; j < d; ++j) gx[j] += g[j];
        }
    });
  }
  return out;
}

// flat-index gather -> [|idx|]
template <typename T>
Tensor<T> gather_elems(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  auto out = Tensor<T>::zeros({static_cast<int>(idx.size())});
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= x.size()) throw NumericsError("gather_elems: index out of range");
    ov[k] = xv[idx[k]];
  }
  if (taped<T>({&x})) {
    mark_out(out);
    auto xn = x.node(), on = out.node();
    active_tape<T>()->record(on, [xn, on, idx] {
      if (!xn->requires_grad) return;
      if (xn->grad.size() != xn->values.size()) xn->grad.assign(xn->values.size(), T(0));
      for (std::size_t k = 0; k < idx.size(); ++k) xn->grad[idx[k]] += on->grad[k];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw NumericsError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto out = Tensor<T>::from(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()));
  if (taped<T>({&x})) {
    mark_out(out);
    auto xn = x.node(), on = out.node();
    active_tape<T>()->record(on, [xn, on] {
      if (!xn->requires_grad) return;
      if (xn->grad.size() != xn->values.size()) xn->grad.assign(xn->values.size(), T(0));
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

// concat along dim 1 of two [N, *, D] tensors
template <typename T>
Tensor<T> concat_time(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw NumericsError("concat_time: incompatible shapes");
  const int n = a.dim(0), sa = a.dim(1), sb = b.dim(1), d = a.dim(2);
  auto out = Tensor<T>::zeros({n, sa + sb, d});
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (int bb = 0; bb < n; ++bb) {
    std::copy_n(av.data() + static_cast<std::size_t>(bb) * sa * d, static_cast<std::size_t>(sa) * d,
                ov.data() + static_cast<std::size_t>(bb) * (sa + sb) * d);
    std::copy_n(bv.data() + static_cast<std::size_t>(bb) * sb * d, static_cast<std::size_t>(sb) * d,
                ov.data() + static_cast<std::size_t>(bb) * (sa + sb) * d + static_cast<std::size_t>(sa) * d);
  }
  if (taped<T>({&a, &b})) {
    mark_out(out);
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape<T>()->record(on, [an, bn, on, n, sa, sb, d] {
      if (an->requires_grad && an->grad.size() != an->values.size()) an->grad.assign(an->values.size(), T(0));
      if (bn->requires_grad && bn->grad.size() != bn->values.size()) bn->grad.assign(bn->values.size(), T(0));
      for (int bb = 0; bb < n; ++bb) {
        const T* g = on->grad.data() + static_cast<std::size_t>(bb) * (sa + sb) * d;
        if (an->requires_grad) {
          T* ga = an->grad.data() + static_cast<std::size_t>(bb) * sa * d;
          for (std::size_t i = 0; i < static_cast<std::size_t>(sa) * d; ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
          T* gb = bn->grad.data() + static_cast<std::size_t>(bb) * sb * d;
          for (std::size_t i = 0; i < static_cast<std::size_t>(sb) * d; ++i) gb[i] += g[static_cast<std::size_t>(sa) * d + i];
        }
      }
    });
  }
  return out;
}

}  // namespace star::ops
