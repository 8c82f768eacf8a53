#pragma once

#include <cstdint>
#include <vector>

#include "star/ops.hpp"
#include "star/rng.hpp"
#include "star/tensor.hpp"

// The four training losses and their weighted combination:
//   total = l_ar + alpha * l_mim + (beta / 2) * (l_step + l_view).
// Contrastive terms are InfoNCE over L2-normalized features with the
// negatives ranging over the batch dimension. Each term is a softmax
// cross-entropy over B candidates, assembled as one gather from a single
// [rows x rows] similarity matrix, so the whole thing is one GEMM plus
// index arithmetic.

namespace star {

struct PositionDraw {
  std::vector<int> indices;  // K distinct values in [0, T)
  int k = 0;
};

// Uniform without replacement; K >= 2 because the inter-step loss needs
// i != j pairs. One draw is shared by loss_step and loss_view in a step.
PositionDraw sample_positions(int k, int t, std::uint64_t seed);

template <typename T>
struct LossBundle {
  Tensor<T> l_ar, l_mim, l_step, l_view;
  Tensor<T> total;
  double alpha = 1.0;
  double beta = 0.5;
};

// Mean next-token negative log-likelihood: logits [B,T,V], targets B*T ids.
template <typename T>
Tensor<T> loss_ar(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.rank() != 3) throw NumericsError("loss_ar: logits must be [B,T,V]");
  const int rows = logits.dim(0) * logits.dim(1);
  return ops::cross_entropy(ops::reshape(logits, {rows, logits.dim(-1)}), targets);
}

// Mean cosine distance between masked-student and unmasked-teacher rows,
// both [B,T,D]. Teacher rows are targets, not variables.
template <typename T>
Tensor<T> loss_mim(const Tensor<T>& student_h, const Tensor<T>& teacher_h) {
  if (teacher_h.requires_grad()) throw NumericsError("loss_mim: teacher features must be gradient-free");
  if (student_h.shape() != teacher_h.shape()) throw NumericsError("loss_mim: feature shape mismatch");
  return ops::mean_all(ops::cosine_distance_rows(student_h, teacher_h));
}

namespace detail {

// Shared InfoNCE core. anchors/candidates address rows of the normalized
// feature matrices; for term q, the candidate logits are
// sim(anchor_rows[q], candidate_rows[q][v]) / tau over v = 0..B-1 and the
// correct class is target[q]. literal_form swaps -log softmax for the
// printed negated-softmax-ratio variant.
template <typename T>
Tensor<T> info_nce(const Tensor<T>& z_rows, const Tensor<T>& h_rows,
                   const std::vector<std::size_t>& pair_index,  // terms*B flat indices into S
                   const std::vector<int>& targets, int batch, T tau, bool literal_form) {
  auto zn = ops::l2_normalize(z_rows);
  auto hn = ops::l2_normalize(h_rows);
  auto sim = ops::bmm_nt(zn, hn);  // [rows, rows]
  auto logits = ops::scale(ops::reshape(ops::gather_elems(sim, pair_index),
                                        {static_cast<int>(targets.size()), batch}),
                           T(1) / tau);
  if (!literal_form) return ops::cross_entropy(logits, targets);
  // printed form of the loss: mean over terms of -softmax(target)
  auto zero_mask = Tensor<T>::zeros(logits.shape());
  auto probs = ops::masked_softmax(logits, zero_mask);
  std::vector<std::size_t> target_idx(targets.size());
  for (std::size_t q = 0; q < targets.size(); ++q)
    target_idx[q] = q * static_cast<std::size_t>(batch) + static_cast<std::size_t>(targets[q]);
  return ops::scale(ops::mean_all(ops::gather_elems(probs, target_idx)), T(-1));
}

}  // namespace detail

// Inter-step loss: anchors (b,m,i), positives (b,m,j) with j != i,
// negatives over the batch at (v,m,j). z_s [B,M,K,D], h_t [B,M,K,D].
template <typename T>
Tensor<T> loss_step(const Tensor<T>& z_s, const Tensor<T>& h_t, T tau, bool literal_form = false) {
  if (h_t.requires_grad()) throw NumericsError("loss_step: teacher features must be gradient-free");
  if (z_s.rank() != 4 || h_t.rank() != 4 || z_s.shape() != h_t.shape())
    throw NumericsError("loss_step: features must both be [B,M,K,D]");
  const int b = z_s.dim(0), m = z_s.dim(1), k = z_s.dim(2), d = z_s.dim(3);
  if (k < 2) throw ConfigError("loss_step: no positive pair (need K >= 2)");
  const int rows = b * m * k;
  auto row_of = [m, k](int bb, int mm, int ii) { return (bb * m + mm) * k + ii; };

  const std::size_t terms = static_cast<std::size_t>(b) * m * k * (k - 1);
  std::vector<std::size_t> pair_index;
  pair_index.reserve(terms * static_cast<std::size_t>(b));
  std::vector<int> targets;
  targets.reserve(terms);
  for (int bb = 0; bb < b; ++bb)
    for (int mm = 0; mm < m; ++mm)
      for (int ii = 0; ii < k; ++ii)
        for (int jj = 0; jj < k; ++jj) {
          if (jj == ii) continue;
          const std::size_t anchor = static_cast<std::size_t>(row_of(bb, mm, ii));
          for (int vv = 0; vv < b; ++vv)
            pair_index.push_back(anchor * static_cast<std::size_t>(rows) +
                                 static_cast<std::size_t>(row_of(vv, mm, jj)));
          targets.push_back(bb);
        }
  return detail::info_nce(ops::reshape(z_s, {rows, d}), ops::reshape(h_t, {rows, d}), pair_index, targets, b,
                          tau, literal_form);
}

// Inter-view loss: anchors (b,i,k) over views i, positives (b,j,k) with
// j != i, negatives over the batch at (v,j,k).
template <typename T>
Tensor<T> loss_view(const Tensor<T>& z_s, const Tensor<T>& h_t, T tau, bool literal_form = false) {
  if (h_t.requires_grad()) throw NumericsError("loss_view: teacher features must be gradient-free");
  if (z_s.rank() != 4 || h_t.rank() != 4 || z_s.shape() != h_t.shape())
    throw NumericsError("loss_view: features must both be [B,M,K,D]");
  const int b = z_s.dim(0), m = z_s.dim(1), k = z_s.dim(2), d = z_s.dim(3);
  if (m < 2) throw ConfigError("loss_view: need M >= 2 views");
  const int rows = b * m * k;
  auto row_of = [m, k](int bb, int mm, int kk) { return (bb * m + mm) * k + kk; };

  const std::size_t terms = static_cast<std::size_t>(b) * m * (m - 1) * k;
  std::vector<std::size_t> pair_index;
  pair_index.reserve(terms * static_cast<std::size_t>(b));
  std::vector<int> targets;
  targets.reserve(terms);
  for (int bb = 0; bb < b; ++bb)
    for (int ii = 0; ii < m; ++ii)
      for (int kk = 0; kk < k; ++kk)
        for (int jj = 0; jj < m; ++jj) {
          if (jj == ii) continue;
          const std::size_t anchor = static_cast<std::size_t>(row_of(bb, ii, kk));
          for (int vv = 0; vv < b; ++vv)
            pair_index.push_back(anchor * static_cast<std::size_t>(rows) +
                                 static_cast<std::size_t>(row_of(vv, jj, kk)));
          targets.push_back(bb);
        }
  return detail::info_nce(ops::reshape(z_s, {rows, d}), ops::reshape(h_t, {rows, d}), pair_index, targets, b,
                          tau, literal_form);
}

// total = l_ar + alpha * l_mim + (beta / 2) * (l_step + l_view);
// components are kept unweighted for logging.
template <typename T>
LossBundle<T> loss_total(const Tensor<T>& l_ar, const Tensor<T>& l_mim, const Tensor<T>& l_step,
                         const Tensor<T>& l_view, double alpha, double beta) {
  auto check = [](const Tensor<T>& t, const char* name) {
    if (t.size() != 1 || !std::isfinite(t.item()))
      throw NumericsError(std::string("loss_total: non-finite component ") + name);
  };
  check(l_ar, "l_ar");
  check(l_mim, "l_mim");
  check(l_step, "l_step");
  check(l_view, "l_view");
  LossBundle<T> b;
  b.l_ar = l_ar;
  b.l_mim = l_mim;
  b.l_step = l_step;
  b.l_view = l_view;
  b.alpha = alpha;
  b.beta = beta;
  b.total = ops::add(l_ar, ops::add(ops::scale(l_mim, static_cast<T>(alpha)),
                                    ops::scale(ops::add(l_step, l_view), static_cast<T>(beta / 2.0))));
  return b;
}

}  // namespace star
