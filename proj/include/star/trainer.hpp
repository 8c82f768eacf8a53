#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "star/data_toy.hpp"
#include "star/losses.hpp"
#include "star/model.hpp"
#include "star/teacher.hpp"

// Training orchestration: per-step augmentation and quantization of M views,
// masked student forwards, unmasked teacher forwards, the four-part loss,
// AdamW with decoupled weight decay, gradient clipping, EMA update, and
// JSON-Lines metrics. All randomness is drawn from named streams keyed by
// (seed, stream, step, ...), so a resumed run replays the exact batch,
// masks, dropout and positions of an uninterrupted one.

namespace star {

struct TrainConfig {
  ModelConfig model;

  // synthetic dataset and tokenizer
  int per_class = 64;
  int image_side = 32;
  int patch_side = 4;
  std::uint64_t data_seed = 7;
  bool augment = true;

  // optimization
  int batch = 16;
  int views = 2;
  double base_lr = 1e-4;  // per 256-image batch; scaled linearly by batch
  int warmup_steps = 500;
  double beta1 = 0.9;
  // The source description prints 0.05 for the second-moment coefficient,
  // which is outside any conventional range; default is 0.95 and the knob
  // stays exposed here rather than silently corrected.
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.05;
  double grad_clip = 1.0;
  double ema_decay = 0.9999;
  double cfg_dropout_p = 0.1;
  bool ar_on_unmasked = false;
  std::uint64_t seed = 1;
  int steps = 1000;
  int ckpt_every = 0;  // 0: checkpoint only at the end

  // loss weights
  double alpha = 1.0;
  double beta = 0.5;
  double tau = 0.2;
  int k_positions = 4;
  bool contrastive_no_log = false;  // negated softmax ratio without the log
  bool use_step = true;             // per-term switches for the loss ablation grid
  bool use_view = true;

  int grid_side() const { return image_side / patch_side; }
  void validate() const;
  // 1-based optimizer step; linear warmup to the batch-scaled peak, then
  // constant
  double lr_at(int step) const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  std::vector<std::pair<std::string, std::string>> to_flat() const;
  static TrainConfig from_flat(const std::map<std::string, std::string>& kv);
};

struct MetricsRecord {
  int step = 0;
  int epoch = 0;
  double l_ar = 0, l_mim = 0, l_step = 0, l_view = 0, total = 0;
  double lr = 0;
  double grad_norm = 0;  // pre-clip global norm
  double tokens_per_sec = 0;
  double wall_time_s = 0;
  nlohmann::json to_json() const;
};

struct AdamState {
  std::vector<std::vector<float>> m, v;  // aligned with ModelParams::named()
  std::int64_t t = 0;
  static AdamState init(ModelParams<float>& params);
};

// Replaces the condition with the null id with probability p.
int cfg_dropout(int condition, int null_id, double p, std::uint64_t seed);

// Norm gains, biases (rank-1 tensors) and embedding tables are exempt from
// weight decay.
bool decay_exempt(const std::string& name, const Tensor<float>& t);

double global_grad_norm(ModelParams<float>& params);
// Scales gradients so their global norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(ModelParams<float>& params, double max_norm);
void adamw_step(ModelParams<float>& params, AdamState& opt, double lr, const TrainConfig& cfg);

struct TrainState {
  TrainConfig cfg;
  ModelParams<float> student;
  TeacherState<float> teacher;
  AdamState opt;
  Codebook codebook;
  std::vector<ImageSample> dataset;
  int steps_done = 0;
};

TrainState init_state(const TrainConfig& cfg);
TrainState init_state(const TrainConfig& cfg, std::vector<ImageSample> dataset, Codebook codebook);

std::vector<AugmentedPair> sample_batch(const TrainState& st, int step);
MetricsRecord train_step(TrainState& st, const std::vector<AugmentedPair>& batch, int step);

void save_train_checkpoint(const TrainState& st, const std::string& path);
// Fills parameters, teacher, optimizer moments and step counters from a
// checkpoint whose model config must match st.cfg.model exactly.
void restore_train_checkpoint(TrainState& st, const std::string& path);

struct RunResult {
  int steps_done = 0;
  double final_total = 0;
  std::string run_dir;
};

// Full run loop: writes config.resolved, manifest.json, metrics.jsonl and
// checkpoints/ under run_dir. With resume, continues from the newest
// checkpoint and truncates metrics rows past it.
RunResult run_training(const TrainConfig& cfg, const std::string& run_dir, bool resume);

// Highest-numbered step_NNNNNN.ckpt in dir, or empty string.
std::string find_latest_checkpoint(const std::string& dir);

// ---------------------------------------------------------------------------
// loss pipeline, shared between the float training step and the 64-bit
// finite-difference check
// ---------------------------------------------------------------------------

template <typename T>
struct StepInputs {
  std::vector<int> conditions;                     // [B]
  std::vector<std::vector<int>> view_tokens;       // [M][B*T]
  std::vector<std::vector<Tensor<T>>> view_masks;  // [M], each 0, 1 or L masks
  std::vector<int> positions;                      // K tap positions; may be empty when beta == 0
};

template <typename T>
LossBundle<T> compute_loss_bundle(ModelParams<T>& student, const TeacherState<T>& teacher,
                                  const StepInputs<T>& in, double alpha, double beta, T tau,
                                  bool contrastive_no_log, bool ar_on_unmasked, bool use_step = true,
                                  bool use_view = true) {
  const int m = static_cast<int>(in.view_tokens.size());
  const int b = static_cast<int>(in.conditions.size());
  const bool contrastive = beta > 0 && (use_step || use_view);
  const bool need_teacher = alpha > 0 || contrastive;
  const bool need_masked_trace = alpha > 0 || contrastive || !ar_on_unmasked;
  const TraceLevel student_level = contrastive ? TraceLevel::full : TraceLevel::logits_only;

  Tensor<T> l_ar_acc, l_mim_acc;
  std::vector<Tensor<T>> z_views, h_views;
  for (int mi = 0; mi < m; ++mi) {
    const auto& toks = in.view_tokens[static_cast<std::size_t>(mi)];
    ForwardTrace<T> trace;
    if (need_masked_trace)
      trace = forward(student, in.conditions, toks, in.view_masks[static_cast<std::size_t>(mi)], student_level);
    Tensor<T> ar_logits = trace.logits;
    if (ar_on_unmasked)
      ar_logits = forward(student, in.conditions, toks, {}, TraceLevel::logits_only).logits;
    auto l_ar_m = loss_ar(ar_logits, toks);
    l_ar_acc = (mi == 0) ? l_ar_m : ops::add(l_ar_acc, l_ar_m);

    if (need_teacher) {
      auto t_trace = teacher_forward(teacher, in.conditions, toks,
                                     contrastive ? TraceLevel::full : TraceLevel::logits_only);
      if (alpha > 0) {
        auto l_mim_m = loss_mim(trace.final_h, t_trace.final_h);
        l_mim_acc = (mi == 0) ? l_mim_m : ops::add(l_mim_acc, l_mim_m);
      }
      if (contrastive) {
        const int k = static_cast<int>(in.positions.size());
        auto z = project(student.projector, tap(trace, student.config.tap_depth, in.positions));
        auto h = tap(t_trace, student.config.tap_depth, in.positions);
        const int d = z.dim(-1);
        z_views.push_back(ops::reshape(z, {b, 1, k * d}));
        h_views.push_back(ops::reshape(h, {b, 1, k * d}));
      }
    }
  }

  const T inv_m = T(1) / static_cast<T>(m);
  auto l_ar = (m == 1) ? l_ar_acc : ops::scale(l_ar_acc, inv_m);
  auto zero = Tensor<T>::scalar(T(0));
  auto l_mim = (alpha > 0) ? ((m == 1) ? l_mim_acc : ops::scale(l_mim_acc, inv_m)) : zero;
  Tensor<T> l_step_v = zero, l_view_v = zero;
  if (contrastive) {
    const int k = static_cast<int>(in.positions.size());
    auto fold = [](std::vector<Tensor<T>>& parts) {
      auto acc = parts[0];
      for (std::size_t i = 1; i < parts.size(); ++i) acc = ops::concat_time(acc, parts[i]);
      return acc;
    };
    const int d = z_views[0].dim(-1) / k;
    auto z4 = ops::reshape(fold(z_views), {b, m, k, d});
    auto h4 = ops::reshape(fold(h_views), {b, m, k, d});
    if (use_step) l_step_v = loss_step(z4, h4, tau, contrastive_no_log);
    if (use_view) l_view_v = loss_view(z4, h4, tau, contrastive_no_log);
  }

  if (alpha == 0 && !contrastive) {
    // pure next-token training: the total IS the AR loss, no extra ops
    LossBundle<T> bundle;
    bundle.l_ar = l_ar;
    bundle.l_mim = zero;
    bundle.l_step = zero;
    bundle.l_view = zero;
    bundle.alpha = alpha;
    bundle.beta = beta;
    bundle.total = l_ar;
    return bundle;
  }
  return loss_total(l_ar, l_mim, l_step_v, l_view_v, alpha, beta);
}

// Builds the per-view additive attention masks for one step.
template <typename T>
std::vector<Tensor<T>> build_step_masks(const ModelConfig& model, std::uint64_t seed, int step, int view,
                                        int batch) {
  if (model.mask_ratio <= 0) return {};
  std::vector<Tensor<T>> out;
  if (model.mask_scope == "per_layer") {
    for (int l = 0; l < model.layers; ++l) {
      std::vector<KeyMask> per_sample;
      for (int bi = 0; bi < batch; ++bi)
        per_sample.push_back(build_key_mask(model.seq_len, model.mask_ratio,
                                            stream_seed(seed, "mask", step, view, l, bi)));
      out.push_back(batch_additive_mask<T>(model.seq_len, per_sample));
    }
  } else {
    std::vector<KeyMask> per_sample;
    for (int bi = 0; bi < batch; ++bi)
      per_sample.push_back(
          build_key_mask(model.seq_len, model.mask_ratio, stream_seed(seed, "mask", step, view, bi)));
    out.push_back(batch_additive_mask<T>(model.seq_len, per_sample));
  }
  return out;
}

}  // namespace star
