#pragma once

#include "star/model.hpp"

// Non-trainable EMA teacher. The teacher's parameters are plain tensors
// with requires_grad off and every teacher forward runs under NoGradScope,
// so its outputs are structurally gradient-free: no stop-gradient op
// exists because no tape entry is ever recorded.

namespace star {

template <typename T>
struct TeacherState {
  ModelParams<T> params;
  double decay = 0.9999;
  std::int64_t steps_applied = 0;
};

template <typename T>
ModelParams<T> clone_params(const ModelParams<T>& src) {
  ModelParams<T> dst;
  dst.config = src.config;
  auto copy = [](const Tensor<T>& t) {
    return Tensor<T>::from(t.shape(), std::vector<T>(t.values().begin(), t.values().end()));
  };
  dst.tok_embed = copy(src.tok_embed);
  dst.cls_embed = copy(src.cls_embed);
  for (const auto& l : src.layers) {
    LayerParams<T> lp;
    lp.attn_norm = copy(l.attn_norm);
    lp.wq = copy(l.wq);
    lp.wk = copy(l.wk);
    lp.wv = copy(l.wv);
    lp.wo = copy(l.wo);
    lp.mlp_norm = copy(l.mlp_norm);
    lp.w1 = copy(l.w1);
    lp.w2 = copy(l.w2);
    dst.layers.push_back(std::move(lp));
  }
  dst.final_norm = copy(src.final_norm);
  dst.head = copy(src.head);
  for (int i = 0; i < 3; ++i) {
    dst.projector.w[static_cast<std::size_t>(i)] = copy(src.projector.w[static_cast<std::size_t>(i)]);
    dst.projector.b[static_cast<std::size_t>(i)] = copy(src.projector.b[static_cast<std::size_t>(i)]);
    dst.projector.gain[static_cast<std::size_t>(i)] = copy(src.projector.gain[static_cast<std::size_t>(i)]);
  }
  dst.projector.out_w = copy(src.projector.out_w);
  dst.projector.out_b = copy(src.projector.out_b);
  return dst;
}

// theta' := copy of theta at step 0.
template <typename T>
TeacherState<T> init_teacher(const ModelParams<T>& student, double decay) {
  if (decay < 0.0 || decay > 1.0) throw ConfigError("init_teacher: decay must be in [0, 1]");
  TeacherState<T> ts;
  ts.params = clone_params(student);
  ts.params.set_requires_grad(false);
  ts.decay = decay;
  return ts;
}

// theta' <- decay * theta' + (1 - decay) * theta, elementwise.
template <typename T>
void ema_update(TeacherState<T>& teacher, ModelParams<T>& student) {
  auto tn = teacher.params.named();
  auto sn = student.named();
  if (tn.size() != sn.size()) throw ArtifactError("ema_update: parameter list mismatch");
  const T d = static_cast<T>(teacher.decay);
  const T one_minus = T(1) - d;
  for (std::size_t i = 0; i < tn.size(); ++i) {
    if (tn[i].first != sn[i].first || tn[i].second.shape() != sn[i].second.shape())
      throw ArtifactError("ema_update: shape mismatch at " + tn[i].first);
    auto tv = tn[i].second.values();
    auto sv = sn[i].second.values();
    for (std::size_t j = 0; j < tv.size(); ++j) tv[j] = d * tv[j] + one_minus * sv[j];
  }
  ++teacher.steps_applied;
}

// Unmasked forward with recording suppressed.
template <typename T>
ForwardTrace<T> teacher_forward(const TeacherState<T>& teacher, const std::vector<int>& conditions,
                                const std::vector<int>& tokens, TraceLevel level) {
  NoGradScope<T> off;
  return forward(teacher.params, conditions, tokens, {}, level);
}

}  // namespace star
