#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "star/data_toy.hpp"
#include "star/model.hpp"

// Read-only measurement passes over trained models: attention locality
// (where attention mass lands on the token grid), per-step linear probing
// (how much class information intermediate features carry at each
// generation step), and view invariance (how stable tokens and features are
// under augmentation). None of these mutate model parameters.

namespace star {

// Per layer and per generation step, the head-averaged attention mass split
// into three buckets that partition each softmax row: the condition key,
// already-visible grid cells at Chebyshev distance <= 1 from the cell being
// generated, and everything else. mean_distance is the attention-weighted
// Euclidean distance (grid units) from the generated cell to the visible
// token keys, renormalized over the non-condition mass; step 1 has no token
// keys and reports 0.
struct LocalityProfile {
  int layers = 0;
  int seq_len = 0;
  int grid_side = 0;
  // indexed [layer][step], layer 0-based, step 0-based
  std::vector<std::vector<double>> mass_on_condition;
  std::vector<std::vector<double>> mass_on_neighbors;
  std::vector<std::vector<double>> mass_elsewhere;
  std::vector<std::vector<double>> mean_distance;

  // step-averaged summaries for one layer (0-based); distance averages skip
  // step 0, which has no token keys
  double layer_mean_distance(int layer) const;
  double layer_mass_elsewhere(int layer) const;
};

// Aggregates over every (trace, sequence, head) triple. Traces must carry
// attention maps, i.e. come from TraceLevel::full forwards.
LocalityProfile attention_locality(const std::vector<ForwardTrace<float>>& traces, int grid_side);

struct ProbeReport {
  std::vector<int> steps;          // 1-indexed generation steps
  std::vector<double> accuracies;  // held-out top-1 per step, aligned with steps
  int layer = 0;                   // 1-based tap depth the features came from
  int epochs = 0;
};

// Full-batch multinomial logistic regression on fixed feature vectors:
// features standardized with train-split statistics, zero-initialized
// weights, L2-regularized gradient descent. Returns held-out top-1.
double linear_probe_accuracy(const std::vector<std::vector<float>>& train_x,
                             const std::vector<int>& train_y,
                             const std::vector<std::vector<float>>& test_x,
                             const std::vector<int>& test_y, int classes, int epochs);

// Extracts layer-`layer` hidden states at each step (1-indexed; step t uses
// the hidden row that predicts token t) with the condition forced to the
// null id so no label information leaks through the class embedding, splits
// the sequences 80/20 by a seeded shuffle, and trains one probe per step.
// Labels are the sequences' condition fields.
ProbeReport probe_per_step(const ModelParams<float>& params, const std::vector<TokenSequence>& dataset,
                           const std::vector<int>& steps, int layer, int epochs, std::uint64_t seed);

struct InvarianceRecord {
  double token_change_rate = 0.0;  // mean fraction of positions whose tokens differ
  double feature_cosine = 0.0;     // mean cosine of matched tap-layer feature rows
  int pairs = 0;
};

// Token-level core: each entry is one pair of quantized views. Features are
// layer-`layer` hidden rows 1..T-1 (row 0 carries only the condition) under
// each sequence's own condition id, compared at matched positions.
InvarianceRecord view_invariance(const ModelParams<float>& params,
                                 const std::vector<std::pair<TokenSequence, TokenSequence>>& pairs,
                                 int layer);

// Image-level wrapper: quantizes the first two views of every pair.
InvarianceRecord view_invariance(const ModelParams<float>& params, const Codebook& codebook,
                                 int patch_side, const std::vector<AugmentedPair>& pairs, int layer);

// Writes locality.csv / probe.csv / invariance.csv plus one locality
// heatmap SVG per (profile, layer) and one accuracy line chart per probe
// report. Output is byte-stable for identical inputs; doubles are printed
// with enough digits to re-parse exactly.
void render_report(const std::vector<std::pair<std::string, LocalityProfile>>& profiles,
                   const std::vector<std::pair<std::string, ProbeReport>>& probes,
                   const std::vector<std::pair<std::string, InvarianceRecord>>& records,
                   const std::filesystem::path& out_dir);

}  // namespace star
