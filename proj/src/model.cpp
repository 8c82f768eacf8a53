#include "star/model.hpp"

#include <cmath>

namespace star {

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("config: layers must be >= 1");
  if (width < 2 || heads < 1 || width % heads != 0)
    throw ConfigError("config: width must be a positive multiple of heads");
  if (head_dim() % 2 != 0) throw ConfigError("config: head dim must be even for rotary embeddings");
  if (vocab < 2) throw ConfigError("config: vocab must be >= 2");
  if (seq_len < 2) throw ConfigError("config: seq_len must be >= 2");
  if (classes < 1) throw ConfigError("config: classes must be >= 1");
  if (tap_depth < 1 || tap_depth > layers) throw ConfigError("config: tap_depth must be in [1, layers]");
  if (mask_ratio < 0.0 || mask_ratio >= 1.0) throw ConfigError("config: mask_ratio must be in [0, 1)");
  if (mask_scope != "all_layers" && mask_scope != "per_layer")
    throw ConfigError("config: mask_scope must be all_layers or per_layer");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"layers", layers},     {"width", width},           {"heads", heads},
          {"vocab", vocab},       {"seq_len", seq_len},       {"classes", classes},
          {"tap_depth", tap_depth}, {"mask_ratio", mask_ratio}, {"mask_scope", mask_scope}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.seq_len = j.at("seq_len").get<int>();
  c.classes = j.at("classes").get<int>();
  c.tap_depth = j.at("tap_depth").get<int>();
  c.mask_ratio = j.at("mask_ratio").get<double>();
  c.mask_scope = j.value("mask_scope", "all_layers");
  c.validate();
  return c;
}

std::int64_t param_count(const ModelConfig& cfg) {
  const std::int64_t d = cfg.width, v = cfg.vocab, c = cfg.classes, l = cfg.layers;
  const std::int64_t per_layer = 2 * d          // two norm gains
                                 + 4 * d * d    // wq wk wv wo
                                 + 8 * d * d;   // w1 [D,4D] + w2 [4D,D]
  const std::int64_t projector = 3 * (d * d + 2 * d)  // blocks: w, b, gain
                                 + d * d + d;          // final linear
  return v * d + (c + 1) * d + l * per_layer + d + d * v + projector;
}

KeyMask build_key_mask(int seq_len, double ratio, std::uint64_t seed) {
  if (ratio < 0.0 || ratio >= 1.0) throw ConfigError("build_key_mask: ratio must be in [0, 1)");
  const int k = static_cast<int>(std::lround(ratio * seq_len));
  if (k > seq_len - 1) throw ConfigError("build_key_mask: mask count exceeds non-condition positions");
  KeyMask m;
  m.ratio = ratio;
  if (k == 0) return m;
  Rng rng(seed);
  // draw from the seq_len-1 non-condition positions {1..seq_len-1}
  auto draws = rng.sample_without_replacement(k, seq_len - 1);
  m.masked_keys.reserve(static_cast<std::size_t>(k));
  for (int idx : draws) m.masked_keys.push_back(idx + 1);
  return m;
}

}  // namespace star
