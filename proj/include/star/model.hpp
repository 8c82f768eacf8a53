#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "star/ops.hpp"
#include "star/rng.hpp"
#include "star/tensor.hpp"

// Llama-style causal decoder over discrete visual tokens with a
// condition-token prefix. Input row 0 carries the class embedding (or the
// null embedding, id = classes); rows 1..T-1 carry tokens x_1..x_{T-1}, so
// the logits at row t parameterize p(x_{t+1} | c, x_{<=t}) for 0-based t.
// Attention logits can additionally be masked by key column, which is the
// training-side image-modeling mechanism.

namespace star {

struct ModelConfig {
  int layers = 6;
  int width = 128;
  int heads = 4;
  int vocab = 64;
  int seq_len = 64;
  int classes = 10;
  int tap_depth = 3;        // layer whose hidden states feed the contrastive losses
  double mask_ratio = 0.25;
  std::string mask_scope = "all_layers";  // or "per_layer": fresh key mask per layer

  int head_dim() const { return width / heads; }
  int mlp_hidden() const { return 4 * width; }

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Exact number of scalars in ModelParams as a function of the config.
std::int64_t param_count(const ModelConfig& cfg);

// Distinct non-condition key positions to hide, round(ratio * seq_len) of
// them drawn uniformly without replacement from {1..seq_len-1}. Position 0
// (condition) is never masked, so every attention row keeps at least one
// admissible key.
struct KeyMask {
  std::vector<int> masked_keys;
  double ratio = 0.0;
};

KeyMask build_key_mask(int seq_len, double ratio, std::uint64_t seed);

// Additive attention masks, already containing causality. Entries are 0 or
// the sentinel; shape [1,1,T,T] (pure causal) or [N,1,T,T] (per-sample key
// columns), broadcastable against [N,H,T,T] attention logits.
template <typename T>
Tensor<T> causal_additive_mask(int t) {
  auto m = Tensor<T>::zeros({1, 1, t, t});
  auto mv = m.values();
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) mv[static_cast<std::size_t>(i) * t + j] = ops::mask_sentinel<T>();
  return m;
}

template <typename T>
Tensor<T> batch_additive_mask(int t, std::span<const KeyMask> per_sample) {
  const int n = static_cast<int>(per_sample.size());
  auto m = Tensor<T>::zeros({n, 1, t, t});
  auto mv = m.values();
  for (int b = 0; b < n; ++b) {
    T* slice = mv.data() + static_cast<std::size_t>(b) * t * t;
    for (int i = 0; i < t; ++i)
      for (int j = i + 1; j < t; ++j) slice[static_cast<std::size_t>(i) * t + j] = ops::mask_sentinel<T>();
    for (int j : per_sample[static_cast<std::size_t>(b)].masked_keys) {
      if (j <= 0 || j >= t) throw ConfigError("key mask position out of range");
      for (int i = 0; i < t; ++i) slice[static_cast<std::size_t>(i) * t + j] = ops::mask_sentinel<T>();
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

template <typename T>
struct LayerParams {
  Tensor<T> attn_norm;        // [D]
  Tensor<T> wq, wk, wv, wo;   // [D,D]
  Tensor<T> mlp_norm;         // [D]
  Tensor<T> w1;               // [D, 4D]
  Tensor<T> w2;               // [4D, D]
};

// 3 blocks of (linear -> RMS-norm -> GELU) plus a final linear, all at
// width D. A test mode skips the norm and nonlinearity so identity weights
// give z = h exactly.
template <typename T>
struct ProjectorParams {
  std::array<Tensor<T>, 3> w;
  std::array<Tensor<T>, 3> b;
  std::array<Tensor<T>, 3> gain;
  Tensor<T> out_w;
  Tensor<T> out_b;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> tok_embed;   // [V,D]
  Tensor<T> cls_embed;   // [C+1,D]; row C is the null (unconditional) embedding
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm;  // [D]
  Tensor<T> head;        // [D,V]
  ProjectorParams<T> projector;

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("tok_embed", tok_embed);
    fn("cls_embed", cls_embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + "/";
      fn(p + "attn_norm", layers[l].attn_norm);
      fn(p + "wq", layers[l].wq);
      fn(p + "wk", layers[l].wk);
      fn(p + "wv", layers[l].wv);
      fn(p + "wo", layers[l].wo);
      fn(p + "mlp_norm", layers[l].mlp_norm);
      fn(p + "w1", layers[l].w1);
      fn(p + "w2", layers[l].w2);
    }
    fn("final_norm", final_norm);
    fn("head", head);
    for (int i = 0; i < 3; ++i) {
      const std::string p = "proj/block" + std::to_string(i) + "/";
      fn(p + "w", projector.w[static_cast<std::size_t>(i)]);
      fn(p + "b", projector.b[static_cast<std::size_t>(i)]);
      fn(p + "gain", projector.gain[static_cast<std::size_t>(i)]);
    }
    fn("proj/out_w", projector.out_w);
    fn("proj/out_b", projector.out_b);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  void set_requires_grad(bool v) {
    visit([v](const std::string&, Tensor<T>& t) { t.node()->requires_grad = v; });
  }

  void zero_grad() {
    visit([](const std::string&, Tensor<T>& t) { t.node()->grad.clear(); });
  }

  std::int64_t count() {
    std::int64_t n = 0;
    visit([&n](const std::string&, Tensor<T>& t) { n += static_cast<std::int64_t>(t.size()); });
    return n;
  }
};

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(stream_seed(seed, "init"));
  const int d = cfg.width;
  auto normal = [&](Shape shape, double std_dev) {
    auto t = Tensor<T>::zeros(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(rng.normal() * std_dev);
    return t;
  };
  auto ones = [&](int n) {
    auto t = Tensor<T>::zeros({n});
    for (auto& v : t.values()) v = T(1);
    return t;
  };
  ModelParams<T> p;
  p.config = cfg;
  p.tok_embed = normal({cfg.vocab, d}, 0.02);
  p.cls_embed = normal({cfg.classes + 1, d}, 0.02);
  const double resid_std = 0.02 / std::sqrt(2.0 * cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    LayerParams<T> lp;
    lp.attn_norm = ones(d);
    lp.wq = normal({d, d}, 0.02);
    lp.wk = normal({d, d}, 0.02);
    lp.wv = normal({d, d}, 0.02);
    lp.wo = normal({d, d}, resid_std);
    lp.mlp_norm = ones(d);
    lp.w1 = normal({d, cfg.mlp_hidden()}, 0.02);
    lp.w2 = normal({cfg.mlp_hidden(), d}, resid_std);
    p.layers.push_back(std::move(lp));
  }
  p.final_norm = ones(d);
  p.head = normal({d, cfg.vocab}, 0.02);
  for (int i = 0; i < 3; ++i) {
    p.projector.w[static_cast<std::size_t>(i)] = normal({d, d}, 0.02);
    p.projector.b[static_cast<std::size_t>(i)] = Tensor<T>::zeros({d});
    p.projector.gain[static_cast<std::size_t>(i)] = ones(d);
  }
  p.projector.out_w = normal({d, d}, 0.02);
  p.projector.out_b = Tensor<T>::zeros({d});
  return p;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

enum class TraceLevel { logits_only, full };

template <typename T>
struct ForwardTrace {
  Tensor<T> logits;               // [N,T,V]
  std::vector<Tensor<T>> hidden;  // L entries, [N,T,D]; entry l-1 is block l's
                                  // output, except the last which is the
                                  // post-final-norm hidden states
  Tensor<T> final_h;              // [N,T,D], same tensor as hidden.back()
  std::vector<Tensor<T>> attn;    // L entries, [N,H,T,T] row-stochastic maps
};

// conditions: [N] each in [0, classes]; tokens: [N*T] each in [0, vocab).
// masks: 0 additive masks = pure causal; 1 = shared across layers;
// L = one per layer.
template <typename T>
ForwardTrace<T> forward(const ModelParams<T>& p, const std::vector<int>& conditions,
                        const std::vector<int>& tokens, const std::vector<Tensor<T>>& masks,
                        TraceLevel level) {
  const auto& cfg = p.config;
  const int n = static_cast<int>(conditions.size());
  const int t = cfg.seq_len, d = cfg.width, h = cfg.heads, dk = cfg.head_dim();
  if (static_cast<int>(tokens.size()) != n * t)
    throw NumericsError("forward: expected " + std::to_string(n * t) + " tokens, got " +
                        std::to_string(tokens.size()));
  if (!(masks.empty() || masks.size() == 1 || static_cast<int>(masks.size()) == cfg.layers))
    throw ConfigError("forward: mask count must be 0, 1, or layers");
  for (int tok : tokens)
    if (tok < 0 || tok >= cfg.vocab) throw NumericsError("vocab overflow: token " + std::to_string(tok));
  for (int c : conditions)
    if (c < 0 || c > cfg.classes) throw NumericsError("vocab overflow: condition " + std::to_string(c));

  // input rows: [class_embed(c), tok_embed(x_1), ..., tok_embed(x_{T-1})]
  std::vector<int> shifted;
  shifted.reserve(static_cast<std::size_t>(n) * (t - 1));
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < t - 1; ++i) shifted.push_back(tokens[static_cast<std::size_t>(b) * t + i]);
  auto cls = ops::reshape(ops::embedding(p.cls_embed, conditions), {n, 1, d});
  auto tok = ops::reshape(ops::embedding(p.tok_embed, shifted), {n, t - 1, d});
  auto x = ops::concat_time(cls, tok);

  Tensor<T> causal;
  if (masks.empty()) causal = causal_additive_mask<T>(t);

  std::vector<int> positions(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) positions[static_cast<std::size_t>(i)] = i;

  ForwardTrace<T> trace;
  const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(dk));
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& lp = p.layers[static_cast<std::size_t>(l)];
    auto hn = ops::rmsnorm(x, lp.attn_norm);
    auto q = ops::rope(ops::split_heads(ops::matmul(hn, lp.wq), h), positions);
    auto k = ops::rope(ops::split_heads(ops::matmul(hn, lp.wk), h), positions);
    auto v = ops::split_heads(ops::matmul(hn, lp.wv), h);
    auto scores = ops::scale(ops::bmm_nt(q, k), inv_sqrt_dk);
    const Tensor<T>& mask = masks.empty() ? causal
                            : (masks.size() == 1 ? masks[0] : masks[static_cast<std::size_t>(l)]);
    auto probs = ops::masked_softmax(scores, mask);
    auto ctx = ops::merge_heads(ops::bmm(probs, v));
    x = ops::add(x, ops::matmul(ctx, lp.wo));
    auto mn = ops::rmsnorm(x, lp.mlp_norm);
    x = ops::add(x, ops::matmul(ops::gelu(ops::matmul(mn, lp.w1)), lp.w2));
    if (level == TraceLevel::full) {
      trace.hidden.push_back(x);
      trace.attn.push_back(probs);
    }
  }
  trace.final_h = ops::rmsnorm(x, p.final_norm);
  if (level == TraceLevel::full) trace.hidden.back() = trace.final_h;
  trace.logits = ops::matmul(trace.final_h, p.head);
  return trace;
}

// Hidden states of one layer at the given sequence positions: [N,K,D].
// depth is 1-based; depth = layers returns the post-final-norm states.
template <typename T>
Tensor<T> tap(const ForwardTrace<T>& trace, int depth, const std::vector<int>& positions) {
  if (depth < 1 || depth > static_cast<int>(trace.hidden.size()))
    throw ConfigError("tap: depth " + std::to_string(depth) + " out of range");
  return ops::gather_time(trace.hidden[static_cast<std::size_t>(depth - 1)], positions);
}

// Student-side contrastive projector z = f(h), rows independent. With
// identity_mode the norm and GELU are skipped, so identity weights and zero
// biases give z = h.
template <typename T>
Tensor<T> project(const ProjectorParams<T>& proj, const Tensor<T>& h, bool identity_mode = false) {
  auto x = h;
  for (int i = 0; i < 3; ++i) {
    x = ops::add_bias(ops::matmul(x, proj.w[static_cast<std::size_t>(i)]), proj.b[static_cast<std::size_t>(i)]);
    if (!identity_mode) x = ops::gelu(ops::rmsnorm(x, proj.gain[static_cast<std::size_t>(i)]));
  }
  return ops::add_bias(ops::matmul(x, proj.out_w), proj.out_b);
}

}  // namespace star
