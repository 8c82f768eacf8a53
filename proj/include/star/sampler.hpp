#pragma once

#include <span>

#include "star/data_toy.hpp"
#include "star/model.hpp"

// Autoregressive decoding with classifier-free guidance: per step, a
// conditional and an unconditional (null id) forward share one batch,
// logits are combined as uncond + s * (cond - uncond), divided by the
// temperature, truncated to the top-k entries and sampled categorically.
// generate() decodes incrementally with cached keys/values; generate_full()
// recomputes the whole prefix every step and exists as the equivalence
// reference.

namespace star {

struct SampleConfig {
  double cfg_scale = 2.0;
  double temperature = 1.0;
  int top_k = 0;  // 0: keep the full vocabulary
  std::uint64_t seed = 0;
  int count = 1;

  int effective_top_k(int vocab) const { return top_k == 0 ? vocab : top_k; }
  void validate(int vocab) const;
};

// Guidance combination. s = 1 and s = 0 return the inputs untouched so the
// unit- and zero-scale identities hold exactly in floating point.
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& cond, const Tensor<T>& uncond, T s) {
  if (cond.shape() != uncond.shape()) throw NumericsError("cfg_combine: shape mismatch");
  if (s == T(1)) return cond;
  if (s == T(0)) return uncond;
  return ops::add(uncond, ops::scale(ops::sub(cond, uncond), s));
}

// Temperature, top-k truncation, renormalized categorical draw, in that
// order. top_k = 1 is greedy and consumes no randomness. Ties rank by
// lower index.
int sample_categorical(std::span<const float> logits, double temperature, int top_k, Rng& rng);

TokenSequence generate(const ModelParams<float>& params, int class_label, const SampleConfig& cfg);
TokenSequence generate_full(const ModelParams<float>& params, int class_label, const SampleConfig& cfg);

}  // namespace star
