#include "star/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace star {

void SampleConfig::validate(int vocab) const {
  if (cfg_scale < 1.0) throw ConfigError("sample.cfg_scale must be >= 1");
  if (temperature <= 0.0) throw ConfigError("sample.temperature must be > 0");
  if (top_k < 0 || top_k > vocab)
    throw ConfigError("sample.top_k must be in [1, " + std::to_string(vocab) + "] (0 keeps all)");
  if (count < 1) throw ConfigError("sample.count must be >= 1");
}

int sample_categorical(std::span<const float> logits, double temperature, int top_k, Rng& rng) {
  const int v = static_cast<int>(logits.size());
  if (v == 0) throw NumericsError("sample_categorical: empty logits");
  if (top_k < 1 || top_k > v) throw ConfigError("sample_categorical: top_k out of range");

  std::vector<int> order(static_cast<std::size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&logits](int a, int b) {
    return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
  });
  if (top_k == 1) return order[0];

  // softmax over the kept entries in double, max-subtracted
  std::vector<double> scaled(static_cast<std::size_t>(top_k));
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < top_k; ++i) {
    scaled[static_cast<std::size_t>(i)] =
        static_cast<double>(logits[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]) /
        temperature;
    mx = std::max(mx, scaled[static_cast<std::size_t>(i)]);
  }
  double sum = 0;
  for (auto& s : scaled) {
    s = std::exp(s - mx);
    sum += s;
  }
  const double u = rng.uniform() * sum;
  double acc = 0;
  for (int i = 0; i < top_k; ++i) {
    acc += scaled[static_cast<std::size_t>(i)];
    if (u <= acc) return order[static_cast<std::size_t>(i)];
  }
  return order[static_cast<std::size_t>(top_k - 1)];
}

namespace {

constexpr float kRmsEps = 1e-5f;

// Row-wise pieces that mirror the training-graph kernels bit-for-bit in
// float so cached decoding stays on the same arithmetic.
void rmsnorm_row(const float* x, const float* gain, float* out, int d) {
  float ss = 0;
  for (int j = 0; j < d; ++j) ss += x[j] * x[j];
  const float ir = 1.0f / std::sqrt(ss / static_cast<float>(d) + kRmsEps);
  for (int j = 0; j < d; ++j) out[j] = x[j] * ir * gain[j];
}

void matvec(const float* x, const float* w, float* out, int d_in, int d_out) {
  for (int o = 0; o < d_out; ++o) {
    float acc = 0;
    for (int i = 0; i < d_in; ++i) acc += x[i] * w[static_cast<std::size_t>(i) * d_out + o];
    out[o] = acc;
  }
}

void rope_row(float* x, int heads, int dk, int pos) {
  const int half = dk / 2;
  for (int h = 0; h < heads; ++h) {
    float* head = x + static_cast<std::ptrdiff_t>(h) * dk;
    for (int i = 0; i < half; ++i) {
      const float theta = static_cast<float>(pos) *
                          std::pow(10000.0f, -static_cast<float>(2 * i) / static_cast<float>(dk));
      const float c = std::cos(theta), s = std::sin(theta);
      const float x0 = head[2 * i], x1 = head[2 * i + 1];
      head[2 * i] = x0 * c - x1 * s;
      head[2 * i + 1] = x0 * s + x1 * c;
    }
  }
}

struct KvCache {
  int layers, n, heads, dk, t_max;
  // per layer, laid out [n][heads][t_max][dk]
  std::vector<std::vector<float>> k, v;
  KvCache(int layers_, int n_, int heads_, int dk_, int t_max_)
      : layers(layers_), n(n_), heads(heads_), dk(dk_), t_max(t_max_) {
    const std::size_t sz =
        static_cast<std::size_t>(n) * heads * static_cast<std::size_t>(t_max) * dk;
    k.assign(static_cast<std::size_t>(layers), std::vector<float>(sz, 0.0f));
    v.assign(static_cast<std::size_t>(layers), std::vector<float>(sz, 0.0f));
  }
  float* at(std::vector<float>& buf, int ni, int h, int t) {
    return buf.data() +
           (((static_cast<std::size_t>(ni) * heads + h) * static_cast<std::size_t>(t_max)) + t) * dk;
  }
};

// One decoding step: x is the residual-stream row per sequence [n*D],
// already embedded; returns logits [n*V].
std::vector<float> decode_row(const ModelParams<float>& p, KvCache& cache, std::vector<float>& x,
                              int pos) {
  const auto& cfg = p.config;
  const int n = cache.n, d = cfg.width, heads = cfg.heads, dk = cfg.head_dim();
  const int hidden = cfg.mlp_hidden();
  const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(dk));

  std::vector<float> hn(static_cast<std::size_t>(d)), q(static_cast<std::size_t>(d));
  std::vector<float> ctx(static_cast<std::size_t>(d)), tmp(static_cast<std::size_t>(d));
  std::vector<float> mlp(static_cast<std::size_t>(hidden));
  std::vector<float> scores(static_cast<std::size_t>(pos) + 1);

  for (int l = 0; l < cfg.layers; ++l) {
    const auto& lp = p.layers[static_cast<std::size_t>(l)];
    for (int ni = 0; ni < n; ++ni) {
      float* xr = x.data() + static_cast<std::ptrdiff_t>(ni) * d;
      rmsnorm_row(xr, lp.attn_norm.values().data(), hn.data(), d);
      matvec(hn.data(), lp.wq.values().data(), q.data(), d, d);
      std::vector<float> kq(static_cast<std::size_t>(d)), vq(static_cast<std::size_t>(d));
      matvec(hn.data(), lp.wk.values().data(), kq.data(), d, d);
      matvec(hn.data(), lp.wv.values().data(), vq.data(), d, d);
      rope_row(q.data(), heads, dk, pos);
      rope_row(kq.data(), heads, dk, pos);
      for (int h = 0; h < heads; ++h) {
        std::copy_n(kq.data() + static_cast<std::ptrdiff_t>(h) * dk, dk,
                    cache.at(cache.k[static_cast<std::size_t>(l)], ni, h, pos));
        std::copy_n(vq.data() + static_cast<std::ptrdiff_t>(h) * dk, dk,
                    cache.at(cache.v[static_cast<std::size_t>(l)], ni, h, pos));
      }
      for (int h = 0; h < heads; ++h) {
        const float* qh = q.data() + static_cast<std::ptrdiff_t>(h) * dk;
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j <= pos; ++j) {
          const float* kj = cache.at(cache.k[static_cast<std::size_t>(l)], ni, h, j);
          float acc = 0;
          for (int e = 0; e < dk; ++e) acc += qh[e] * kj[e];
          scores[static_cast<std::size_t>(j)] = acc * inv_sqrt_dk;
          mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
        }
        float denom = 0;
        for (int j = 0; j <= pos; ++j) {
          scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
          denom += scores[static_cast<std::size_t>(j)];
        }
        float* ch = ctx.data() + static_cast<std::ptrdiff_t>(h) * dk;
        std::fill_n(ch, dk, 0.0f);
        for (int j = 0; j <= pos; ++j) {
          const float w = scores[static_cast<std::size_t>(j)] / denom;
          const float* vj = cache.at(cache.v[static_cast<std::size_t>(l)], ni, h, j);
          for (int e = 0; e < dk; ++e) ch[e] += w * vj[e];
        }
      }
      matvec(ctx.data(), lp.wo.values().data(), tmp.data(), d, d);
      for (int j = 0; j < d; ++j) xr[j] += tmp[j];

      rmsnorm_row(xr, lp.mlp_norm.values().data(), hn.data(), d);
      matvec(hn.data(), lp.w1.values().data(), mlp.data(), d, hidden);
      const float inv_sqrt2 = 0.70710678118654752440f;
      for (int j = 0; j < hidden; ++j)
        mlp[static_cast<std::size_t>(j)] =
            0.5f * mlp[static_cast<std::size_t>(j)] *
            (1.0f + std::erf(mlp[static_cast<std::size_t>(j)] * inv_sqrt2));
      matvec(mlp.data(), lp.w2.values().data(), tmp.data(), hidden, d);
      for (int j = 0; j < d; ++j) xr[j] += tmp[j];
    }
  }

  std::vector<float> logits(static_cast<std::size_t>(n) * cfg.vocab);
  std::vector<float> fin(static_cast<std::size_t>(d));
  for (int ni = 0; ni < n; ++ni) {
    rmsnorm_row(x.data() + static_cast<std::ptrdiff_t>(ni) * d, p.final_norm.values().data(),
                fin.data(), d);
    matvec(fin.data(), p.head.values().data(),
           logits.data() + static_cast<std::ptrdiff_t>(ni) * cfg.vocab, d, cfg.vocab);
  }
  return logits;
}

int combine_and_draw(const float* cond, const float* uncond, int v, const SampleConfig& sc, int top_k,
                     Rng& rng) {
  std::vector<float> combined(static_cast<std::size_t>(v));
  if (sc.cfg_scale == 1.0) {
    std::copy_n(cond, v, combined.data());
  } else {
    const float s = static_cast<float>(sc.cfg_scale);
    for (int i = 0; i < v; ++i) combined[static_cast<std::size_t>(i)] = uncond[i] + s * (cond[i] - uncond[i]);
  }
  return sample_categorical(combined, sc.temperature, top_k, rng);
}

TokenSequence finish_sequence(std::vector<int>& out, int class_label, int t) {
  TokenSequence seq;
  seq.condition = class_label;
  seq.grid_side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(t))));
  seq.tokens.reserve(out.size());
  for (int tok : out) seq.tokens.push_back(static_cast<std::uint16_t>(tok));
  return seq;
}

}  // namespace

TokenSequence generate(const ModelParams<float>& params, int class_label, const SampleConfig& sc) {
  const auto& cfg = params.config;
  sc.validate(cfg.vocab);
  if (class_label < 0 || class_label >= cfg.classes)
    throw ConfigError("generate: class label " + std::to_string(class_label) + " outside [0, " +
                      std::to_string(cfg.classes) + ")");
  const int t = cfg.seq_len, d = cfg.width, v = cfg.vocab;
  const int top_k = sc.effective_top_k(v);
  Rng rng(sc.seed);
  KvCache cache(cfg.layers, 2, cfg.heads, cfg.head_dim(), t);

  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(t));
  std::vector<float> x(2 * static_cast<std::size_t>(d));
  // row 0 conditions on the class, row 1 on the null id
  auto cls = params.cls_embed.values();
  std::copy_n(cls.data() + static_cast<std::ptrdiff_t>(class_label) * d, d, x.data());
  std::copy_n(cls.data() + static_cast<std::ptrdiff_t>(cfg.classes) * d, d, x.data() + d);

  for (int pos = 0; pos < t; ++pos) {
    auto logits = decode_row(params, cache, x, pos);
    const int tok = combine_and_draw(logits.data(), logits.data() + v, v, sc, top_k, rng);
    out.push_back(tok);
    if (pos + 1 < t) {
      auto te = params.tok_embed.values();
      std::copy_n(te.data() + static_cast<std::ptrdiff_t>(tok) * d, d, x.data());
      std::copy_n(te.data() + static_cast<std::ptrdiff_t>(tok) * d, d, x.data() + d);
    }
  }
  return finish_sequence(out, class_label, t);
}

TokenSequence generate_full(const ModelParams<float>& params, int class_label, const SampleConfig& sc) {
  const auto& cfg = params.config;
  sc.validate(cfg.vocab);
  if (class_label < 0 || class_label >= cfg.classes)
    throw ConfigError("generate: class label " + std::to_string(class_label) + " outside [0, " +
                      std::to_string(cfg.classes) + ")");
  const int t = cfg.seq_len, v = cfg.vocab;
  const int top_k = sc.effective_top_k(v);
  Rng rng(sc.seed);
  const std::vector<int> conds = {class_label, cfg.classes};

  std::vector<int> out(static_cast<std::size_t>(t), 0);
  for (int pos = 0; pos < t; ++pos) {
    // causality keeps logits at pos independent of the zero padding beyond it
    std::vector<int> tokens;
    tokens.reserve(2 * static_cast<std::size_t>(t));
    for (int r = 0; r < 2; ++r) tokens.insert(tokens.end(), out.begin(), out.end());
    auto trace = forward(params, conds, tokens, {}, TraceLevel::logits_only);
    auto lv = trace.logits.values();
    const float* cond_row = lv.data() + static_cast<std::size_t>(pos) * v;
    const float* uncond_row = lv.data() + (static_cast<std::size_t>(t) + pos) * v;
    out[static_cast<std::size_t>(pos)] = combine_and_draw(cond_row, uncond_row, v, sc, top_k, rng);
  }
  return finish_sequence(out, class_label, t);
}

}  // namespace star
