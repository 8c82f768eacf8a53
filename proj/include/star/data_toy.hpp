#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "star/common.hpp"

// Class-conditional toy images, paired random augmentations, and a
// deterministic patch-codebook quantizer standing in for a learned
// tokenizer. The quantizer is reconstruction-oriented and has no built-in
// augmentation invariance, which is exactly the property the training-side
// losses are designed to compensate for.

namespace star {

struct ImageSample {
  int side = 0;                // H == W
  std::vector<float> pixels;   // side*side*3, RGB interleaved, values in [0,1]
  int class_label = 0;
  int sample_id = 0;
};

struct TokenSequence {
  std::vector<std::uint16_t> tokens;  // length T, each < V
  int condition = 0;                  // class id, or C for the null embedding
  int grid_side = 0;                  // grid_side^2 == T
};

struct AugmentedPair {
  std::vector<ImageSample> views;  // M >= 2, same class_label and source_id
  int source_id = 0;
};

// Nearest-neighbor codebook over 5-dim patch features
// (mean R, mean G, mean B, mean |d luma / dx|, mean |d luma / dy|).
struct Codebook {
  int vocab = 0;
  int feature_dim = 0;
  std::vector<float> entries;  // vocab * feature_dim
};

inline constexpr int kPatchFeatureDim = 5;

// One parametric scene per class (shape archetype, base hue, background
// texture) with per-sample jitter. Deterministic: sample i draws from a
// stream seeded by (seed, "data", i), so serial and parallel synthesis
// agree.
std::vector<ImageSample> synth_dataset(int num_classes, int per_class, int image_side, std::uint64_t seed);

// Render a single sample without materializing the whole dataset.
ImageSample synth_sample(int num_classes, int image_side, std::uint64_t seed, int sample_id, int class_label);

// Random-resized-crop (area scale in [0.8, 1.0]) + horizontal flip (p=0.5)
// + small hue jitter. Shape and label are preserved.
ImageSample augment(const ImageSample& image, std::uint64_t seed);

// 5-dim feature of one patch; exposed for the quantizer oracle tests.
void patch_feature(const ImageSample& image, int py, int px, int patch_side, float* out5);

// K-means over every patch feature of the corpus; fixed iteration count,
// deterministic init. Empty clusters keep their previous center.
Codebook build_codebook(const std::vector<ImageSample>& corpus, int vocab, int patch_side, std::uint64_t seed,
                        int iterations = 50);

// Raster-order nearest-entry tokens. Ties go to the lowest index.
TokenSequence quantize(const ImageSample& image, const Codebook& codebook, int patch_side);

// Fraction of positions where the two sequences differ (0 = identical,
// 1 = disjoint everywhere).
double token_invariance(const TokenSequence& a, const TokenSequence& b);

// Constant-color patch rendering from the first three feature dims; only
// for visual inspection of sampled sequences.
ImageSample decode_to_image(const TokenSequence& seq, const Codebook& codebook, int patch_side);

// ---------------------------------------------------------------------------
// files (little-endian; sizes in the headers are u32)
// ---------------------------------------------------------------------------

// "STARTOK1" | V | T | C | count | records of (condition u16, tokens T x u16)
void save_tokens(const std::string& path, const std::vector<TokenSequence>& seqs, int vocab, int num_classes);
struct TokenFile {
  int vocab = 0;
  int seq_len = 0;
  int num_classes = 0;
  std::vector<TokenSequence> seqs;
};
TokenFile load_tokens(const std::string& path);

// "STARCB01" | V | feature_dim | V*feature_dim f32
void save_codebook(const std::string& path, const Codebook& cb);
Codebook load_codebook(const std::string& path);

// 8-bit RGB PNG via zlib; for rendered samples and diagnostics plots.
void write_png(const std::string& path, const std::vector<float>& rgb, int width, int height);

}  // namespace star
