#include "star/data_toy.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "star/rng.hpp"

namespace star {

namespace {

void hsv_to_rgb(float h, float s, float v, float* rgb) {
  h = h - std::floor(h);  // wrap to [0,1)
  const float c = v * s;
  const float hp = h * 6.0f;
  const float x = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
  float r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const float m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

void rgb_to_hsv(const float* rgb, float* hsv) {
  const float r = rgb[0], g = rgb[1], b = rgb[2];
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const float d = mx - mn;
  float h = 0;
  if (d > 1e-8f) {
    if (mx == r) h = std::fmod((g - b) / d, 6.0f);
    else if (mx == g) h = (b - r) / d + 2.0f;
    else h = (r - g) / d + 4.0f;
    h /= 6.0f;
    if (h < 0) h += 1.0f;
  }
  hsv[0] = h;
  hsv[1] = mx > 1e-8f ? d / mx : 0.0f;
  hsv[2] = mx;
}

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

// Shape membership for the ten archetypes; classes beyond ten reuse the
// shape cycle with a different hue.
bool inside_shape(int archetype, float dy, float dx, float r) {
  const float dist = std::sqrt(dx * dx + dy * dy);
  switch (archetype) {
    case 0: return dist < r;
    case 1: return std::fabs(dx) < r * 0.85f && std::fabs(dy) < r * 0.85f;
    case 2: return dy > -r && dy < r && std::fabs(dx) < (dy + r) * 0.55f;  // point-up triangle
    case 3: return std::fabs(dy) < r && std::fmod(std::fabs(dy * 0.9f), r * 0.66f) < r * 0.33f &&
                   std::fabs(dx) < r;  // horizontal bars
    case 4: return std::fabs(dx) < r && std::fmod(std::fabs(dx * 0.9f), r * 0.66f) < r * 0.33f &&
                   std::fabs(dy) < r;  // vertical bars
    case 5: return (std::fabs(dx) < r * 0.35f || std::fabs(dy) < r * 0.35f) &&
                   std::fabs(dx) < r && std::fabs(dy) < r;  // plus sign
    case 6: return dist < r && dist > r * 0.55f;  // ring
    case 7: return std::fabs(dx) < r && std::fabs(dy) < r &&
                   ((static_cast<int>(std::floor(dx / (r * 0.5f))) +
                     static_cast<int>(std::floor(dy / (r * 0.5f)))) & 1) == 0;  // checker
    case 8: return std::fabs(dx) + std::fabs(dy) < r;  // diamond
    default: {
      const float lx = dx + r * 0.62f, rx = dx - r * 0.62f;
      return std::sqrt(lx * lx + dy * dy) < r * 0.48f || std::sqrt(rx * rx + dy * dy) < r * 0.48f;  // two dots
    }
  }
}

float bilinear(const ImageSample& im, float y, float x, int ch) {
  const int s = im.side;
  const float cy = std::min(std::max(y, 0.0f), static_cast<float>(s - 1));
  const float cx = std::min(std::max(x, 0.0f), static_cast<float>(s - 1));
  const int y0 = static_cast<int>(cy), x0 = static_cast<int>(cx);
  const int y1 = std::min(y0 + 1, s - 1), x1 = std::min(x0 + 1, s - 1);
  const float fy = cy - y0, fx = cx - x0;
  auto at = [&](int yy, int xx) { return im.pixels[(static_cast<std::size_t>(yy) * s + xx) * 3 + ch]; };
  return at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x1) * (1 - fy) * fx + at(y1, x0) * fy * (1 - fx) +
         at(y1, x1) * fy * fx;
}

float luma(const float* p) { return 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2]; }

// --- little-endian binary IO --------------------------------------------

void put_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void put_u16(std::ofstream& f, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  f.write(reinterpret_cast<const char*>(b), 2);
}

void put_f32(std::ofstream& f, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(f, u);
}

std::uint32_t get_u32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4)) throw ArtifactError("truncated file: " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t get_u16(std::ifstream& f, const std::string& path) {
  unsigned char b[2];
  if (!f.read(reinterpret_cast<char*>(b), 2)) throw ArtifactError("truncated file: " + path);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

float get_f32(std::ifstream& f, const std::string& path) {
  const std::uint32_t u = get_u32(f, path);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace

ImageSample synth_sample(int num_classes, int image_side, std::uint64_t seed, int sample_id, int class_label) {
  Rng rng(stream_seed(seed, "data", sample_id));
  const int s = image_side;
  ImageSample im;
  im.side = s;
  im.class_label = class_label;
  im.sample_id = sample_id;
  im.pixels.resize(static_cast<std::size_t>(s) * s * 3);

  const int archetype = class_label % 10;
  const float base_hue = static_cast<float>(class_label) / static_cast<float>(num_classes);
  const float hue = base_hue + static_cast<float>(rng.uniform(-0.04, 0.04));
  const float cy = s * 0.5f + static_cast<float>(rng.uniform(-0.14, 0.14)) * s;
  const float cx = s * 0.5f + static_cast<float>(rng.uniform(-0.14, 0.14)) * s;
  const float r = s * 0.30f * static_cast<float>(rng.uniform(0.8, 1.2));

  // background: complementary hue, dim sinusoid texture whose direction and
  // frequency are class-specific, plus per-pixel noise
  const float bg_hue = base_hue + 0.5f;
  const float kx = 0.12f + 0.05f * (class_label % 3);
  const float ky = 0.10f + 0.04f * ((class_label / 3) % 3);
  const float phase = static_cast<float>(rng.uniform(0.0, 6.28318530717958647692));
  const float noise_amp = (class_label % 2) ? 0.05f : 0.03f;

  float fg[3], bg_base[3];
  hsv_to_rgb(hue, 0.85f, 0.92f, fg);
  hsv_to_rgb(bg_hue, 0.35f, 0.45f, bg_base);

  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      float* px = &im.pixels[(static_cast<std::size_t>(y) * s + x) * 3];
      const float wave = 0.08f * std::sin(kx * x + ky * y + phase);
      const float noise = noise_amp * static_cast<float>(rng.uniform(-1.0, 1.0));
      if (inside_shape(archetype, y - cy, x - cx, r)) {
        for (int c = 0; c < 3; ++c) px[c] = clamp01(fg[c] + noise);
      } else {
        for (int c = 0; c < 3; ++c) px[c] = clamp01(bg_base[c] + wave + noise);
      }
    }
  }
  return im;
}

std::vector<ImageSample> synth_dataset(int num_classes, int per_class, int image_side, std::uint64_t seed) {
  if (num_classes < 2) throw ArtifactError("synth_dataset: need at least 2 classes");
  std::vector<ImageSample> out;
  out.reserve(static_cast<std::size_t>(num_classes) * per_class);
  for (int c = 0; c < num_classes; ++c)
    for (int i = 0; i < per_class; ++i) {
      const int id = c * per_class + i;
      out.push_back(synth_sample(num_classes, image_side, seed, id, c));
    }
  return out;
}

ImageSample augment(const ImageSample& image, std::uint64_t seed) {
  Rng rng(seed);
  const int s = image.side;
  // draw order is part of the format: scale, top, left, flip, hue
  const double area = rng.uniform(0.8, 1.0);
  const int crop = std::max(1, std::min(s, static_cast<int>(std::lround(s * std::sqrt(area)))));
  const int top = static_cast<int>(rng.randint(static_cast<std::uint64_t>(s - crop + 1)));
  const int left = static_cast<int>(rng.randint(static_cast<std::uint64_t>(s - crop + 1)));
  const bool flip = rng.bernoulli(0.5);
  const float dhue = static_cast<float>(rng.uniform(-0.05, 0.05));

  ImageSample out;
  out.side = s;
  out.class_label = image.class_label;
  out.sample_id = image.sample_id;
  out.pixels.resize(image.pixels.size());
  const float step = static_cast<float>(crop) / static_cast<float>(s);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const int xs = flip ? (s - 1 - x) : x;
      const float sy = top + (y + 0.5f) * step - 0.5f;
      const float sx = left + (xs + 0.5f) * step - 0.5f;
      float rgb[3];
      for (int c = 0; c < 3; ++c) rgb[c] = bilinear(image, sy, sx, c);
      float hsv[3];
      rgb_to_hsv(rgb, hsv);
      hsv[0] += dhue;
      float* px = &out.pixels[(static_cast<std::size_t>(y) * s + x) * 3];
      hsv_to_rgb(hsv[0], hsv[1], hsv[2], px);
      for (int c = 0; c < 3; ++c) px[c] = clamp01(px[c]);
    }
  }
  return out;
}

void patch_feature(const ImageSample& image, int py, int px, int patch_side, float* out5) {
  const int s = image.side;
  float mr = 0, mg = 0, mb = 0, gx = 0, gy = 0;
  int gx_n = 0, gy_n = 0;
  for (int y = py; y < py + patch_side; ++y) {
    for (int x = px; x < px + patch_side; ++x) {
      const float* p = &image.pixels[(static_cast<std::size_t>(y) * s + x) * 3];
      mr += p[0];
      mg += p[1];
      mb += p[2];
      if (x + 1 < px + patch_side) {
        gx += std::fabs(luma(p + 3) - luma(p));
        ++gx_n;
      }
      if (y + 1 < py + patch_side) {
        gy += std::fabs(luma(&image.pixels[(static_cast<std::size_t>(y + 1) * s + x) * 3]) - luma(p));
        ++gy_n;
      }
    }
  }
  const float n = static_cast<float>(patch_side * patch_side);
  out5[0] = mr / n;
  out5[1] = mg / n;
  out5[2] = mb / n;
  out5[3] = gx_n ? gx / gx_n : 0.0f;
  out5[4] = gy_n ? gy / gy_n : 0.0f;
}

Codebook build_codebook(const std::vector<ImageSample>& corpus, int vocab, int patch_side, std::uint64_t seed,
                        int iterations) {
  if (corpus.empty()) throw ArtifactError("build_codebook: empty corpus");
  const int s = corpus.front().side;
  if (s % patch_side != 0) throw ArtifactError("build_codebook: image side not divisible by patch side");
  const int grid = s / patch_side;

  std::vector<float> feats;
  feats.reserve(corpus.size() * static_cast<std::size_t>(grid) * grid * kPatchFeatureDim);
  for (const auto& im : corpus)
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        float f[kPatchFeatureDim];
        patch_feature(im, gy * patch_side, gx * patch_side, patch_side, f);
        feats.insert(feats.end(), f, f + kPatchFeatureDim);
      }
  const int n = static_cast<int>(feats.size() / kPatchFeatureDim);
  if (n < vocab) throw ArtifactError("build_codebook: fewer patches than codebook entries");

  Codebook cb;
  cb.vocab = vocab;
  cb.feature_dim = kPatchFeatureDim;
  cb.entries.resize(static_cast<std::size_t>(vocab) * kPatchFeatureDim);
  Rng rng(stream_seed(seed, "init"));
  auto init_idx = rng.sample_without_replacement(vocab, n);
  for (int k = 0; k < vocab; ++k)
    std::copy_n(&feats[static_cast<std::size_t>(init_idx[static_cast<std::size_t>(k)]) * kPatchFeatureDim],
                kPatchFeatureDim, &cb.entries[static_cast<std::size_t>(k) * kPatchFeatureDim]);

  std::vector<int> assign(static_cast<std::size_t>(n));
  std::vector<double> sums(static_cast<std::size_t>(vocab) * kPatchFeatureDim);
  std::vector<int> counts(static_cast<std::size_t>(vocab));
  for (int it = 0; it < iterations; ++it) {
    for (int i = 0; i < n; ++i) {
      const float* f = &feats[static_cast<std::size_t>(i) * kPatchFeatureDim];
      float best = std::numeric_limits<float>::max();
      int bk = 0;
      for (int k = 0; k < vocab; ++k) {
        const float* e = &cb.entries[static_cast<std::size_t>(k) * kPatchFeatureDim];
        float d = 0;
        for (int j = 0; j < kPatchFeatureDim; ++j) d += (f[j] - e[j]) * (f[j] - e[j]);
        if (d < best) {
          best = d;
          bk = k;
        }
      }
      assign[static_cast<std::size_t>(i)] = bk;
    }
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (int i = 0; i < n; ++i) {
      const int k = assign[static_cast<std::size_t>(i)];
      ++counts[static_cast<std::size_t>(k)];
      for (int j = 0; j < kPatchFeatureDim; ++j)
        sums[static_cast<std::size_t>(k) * kPatchFeatureDim + j] +=
            feats[static_cast<std::size_t>(i) * kPatchFeatureDim + j];
    }
    for (int k = 0; k < vocab; ++k) {
      if (counts[static_cast<std::size_t>(k)] == 0) continue;  // empty cluster keeps its center
      for (int j = 0; j < kPatchFeatureDim; ++j)
        cb.entries[static_cast<std::size_t>(k) * kPatchFeatureDim + j] = static_cast<float>(
            sums[static_cast<std::size_t>(k) * kPatchFeatureDim + j] / counts[static_cast<std::size_t>(k)]);
    }
  }
  return cb;
}

TokenSequence quantize(const ImageSample& image, const Codebook& codebook, int patch_side) {
  if (image.side % patch_side != 0) throw ArtifactError("quantize: image side not divisible by patch side");
  if (codebook.vocab < 2) throw ArtifactError("quantize: codebook must have at least 2 entries");
  const int grid = image.side / patch_side;
  TokenSequence seq;
  seq.grid_side = grid;
  seq.condition = image.class_label;
  seq.tokens.reserve(static_cast<std::size_t>(grid) * grid);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      float f[kPatchFeatureDim];
      patch_feature(image, gy * patch_side, gx * patch_side, patch_side, f);
      float best = std::numeric_limits<float>::max();
      int bk = 0;
      for (int k = 0; k < codebook.vocab; ++k) {
        const float* e = &codebook.entries[static_cast<std::size_t>(k) * kPatchFeatureDim];
        float d = 0;
        for (int j = 0; j < kPatchFeatureDim; ++j) d += (f[j] - e[j]) * (f[j] - e[j]);
        if (d < best) {
          best = d;
          bk = k;
        }
      }
      seq.tokens.push_back(static_cast<std::uint16_t>(bk));
    }
  return seq;
}

double token_invariance(const TokenSequence& a, const TokenSequence& b) {
  if (a.tokens.size() != b.tokens.size())
    throw ArtifactError("token_invariance: length mismatch " + std::to_string(a.tokens.size()) + " vs " +
                        std::to_string(b.tokens.size()));
  if (a.tokens.empty()) return 0.0;
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.tokens.size(); ++i) diff += (a.tokens[i] != b.tokens[i]) ? 1 : 0;
  return static_cast<double>(diff) / static_cast<double>(a.tokens.size());
}

ImageSample decode_to_image(const TokenSequence& seq, const Codebook& codebook, int patch_side) {
  const int grid = seq.grid_side;
  ImageSample im;
  im.side = grid * patch_side;
  im.class_label = seq.condition;
  im.pixels.assign(static_cast<std::size_t>(im.side) * im.side * 3, 0.0f);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      const int tok = seq.tokens[static_cast<std::size_t>(gy) * grid + gx];
      const float* e = &codebook.entries[static_cast<std::size_t>(tok) * codebook.feature_dim];
      for (int y = gy * patch_side; y < (gy + 1) * patch_side; ++y)
        for (int x = gx * patch_side; x < (gx + 1) * patch_side; ++x)
          for (int c = 0; c < 3; ++c)
            im.pixels[(static_cast<std::size_t>(y) * im.side + x) * 3 + c] = clamp01(e[c]);
    }
  return im;
}

void save_tokens(const std::string& path, const std::vector<TokenSequence>& seqs, int vocab, int num_classes) {
  if (seqs.empty()) throw ArtifactError("save_tokens: no sequences");
  const std::size_t t = seqs.front().tokens.size();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("save_tokens: cannot open " + path);
  f.write("STARTOK1", 8);
  put_u32(f, static_cast<std::uint32_t>(vocab));
  put_u32(f, static_cast<std::uint32_t>(t));
  put_u32(f, static_cast<std::uint32_t>(num_classes));
  put_u32(f, static_cast<std::uint32_t>(seqs.size()));
  for (const auto& s : seqs) {
    if (s.tokens.size() != t) throw ArtifactError("save_tokens: ragged sequence lengths");
    put_u16(f, static_cast<std::uint16_t>(s.condition));
    for (auto tok : s.tokens) put_u16(f, tok);
  }
  if (!f) throw ArtifactError("save_tokens: write failed for " + path);
}

TokenFile load_tokens(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("load_tokens: cannot open " + path);
  char magic[8];
  if (!f.read(magic, 8) || std::memcmp(magic, "STARTOK1", 8) != 0)
    throw ArtifactError("load_tokens: bad magic in " + path);
  TokenFile tf;
  tf.vocab = static_cast<int>(get_u32(f, path));
  tf.seq_len = static_cast<int>(get_u32(f, path));
  tf.num_classes = static_cast<int>(get_u32(f, path));
  const std::uint32_t count = get_u32(f, path);
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(tf.seq_len))));
  tf.seqs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    TokenSequence s;
    s.condition = get_u16(f, path);
    if (s.condition > tf.num_classes)
      throw ArtifactError("load_tokens: condition " + std::to_string(s.condition) + " out of range in " + path);
    s.grid_side = grid;
    s.tokens.resize(static_cast<std::size_t>(tf.seq_len));
    for (auto& tok : s.tokens) {
      tok = get_u16(f, path);
      if (tok >= tf.vocab) throw ArtifactError("load_tokens: token out of vocab in " + path);
    }
    tf.seqs.push_back(std::move(s));
  }
  return tf;
}

void save_codebook(const std::string& path, const Codebook& cb) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("save_codebook: cannot open " + path);
  f.write("STARCB01", 8);
  put_u32(f, static_cast<std::uint32_t>(cb.vocab));
  put_u32(f, static_cast<std::uint32_t>(cb.feature_dim));
  for (float v : cb.entries) put_f32(f, v);
  if (!f) throw ArtifactError("save_codebook: write failed for " + path);
}

Codebook load_codebook(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("load_codebook: cannot open " + path);
  char magic[8];
  if (!f.read(magic, 8) || std::memcmp(magic, "STARCB01", 8) != 0)
    throw ArtifactError("load_codebook: bad magic in " + path);
  Codebook cb;
  cb.vocab = static_cast<int>(get_u32(f, path));
  cb.feature_dim = static_cast<int>(get_u32(f, path));
  if (cb.vocab <= 0 || cb.feature_dim <= 0) throw ArtifactError("load_codebook: bad header in " + path);
  cb.entries.resize(static_cast<std::size_t>(cb.vocab) * cb.feature_dim);
  for (auto& v : cb.entries) v = get_f32(f, path);
  return cb;
}

// ---------------------------------------------------------------------------
// minimal PNG writer (8-bit RGB, filter 0, one zlib-deflated IDAT)
// ---------------------------------------------------------------------------

namespace {

void png_chunk(std::ofstream& f, const char type[4], const unsigned char* data, std::size_t len) {
  unsigned char hdr[4] = {static_cast<unsigned char>(len >> 24), static_cast<unsigned char>(len >> 16),
                          static_cast<unsigned char>(len >> 8), static_cast<unsigned char>(len)};
  f.write(reinterpret_cast<const char*>(hdr), 4);
  f.write(type, 4);
  if (len) f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(len));
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
  if (len) crc = crc32(crc, data, static_cast<uInt>(len));
  unsigned char tail[4] = {static_cast<unsigned char>(crc >> 24), static_cast<unsigned char>(crc >> 16),
                           static_cast<unsigned char>(crc >> 8), static_cast<unsigned char>(crc)};
  f.write(reinterpret_cast<const char*>(tail), 4);
}

}  // namespace

void write_png(const std::string& path, const std::vector<float>& rgb, int width, int height) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw ArtifactError("write_png: pixel count mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("write_png: cannot open " + path);
  static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  f.write(reinterpret_cast<const char*>(sig), 8);

  unsigned char ihdr[13] = {static_cast<unsigned char>(width >> 24),  static_cast<unsigned char>(width >> 16),
                            static_cast<unsigned char>(width >> 8),   static_cast<unsigned char>(width),
                            static_cast<unsigned char>(height >> 24), static_cast<unsigned char>(height >> 16),
                            static_cast<unsigned char>(height >> 8),  static_cast<unsigned char>(height),
                            8,  // bit depth
                            2,  // color type: truecolor
                            0,  0, 0};
  png_chunk(f, "IHDR", ihdr, 13);

  std::vector<unsigned char> raw;
  raw.reserve(static_cast<std::size_t>(height) * (1 + static_cast<std::size_t>(width) * 3));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < width * 3; ++x) {
      const float v = rgb[static_cast<std::size_t>(y) * width * 3 + x];
      raw.push_back(static_cast<unsigned char>(std::lround(clamp01(v) * 255.0f)));
    }
  }
  uLongf dest_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> deflated(dest_len);
  if (compress2(deflated.data(), &dest_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw ArtifactError("write_png: deflate failed");
  png_chunk(f, "IDAT", deflated.data(), dest_len);
  png_chunk(f, "IEND", nullptr, 0);
  if (!f) throw ArtifactError("write_png: write failed for " + path);
}

}  // namespace star
