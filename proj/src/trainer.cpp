#include "star/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "star/checkpoint.hpp"

namespace fs = std::filesystem;

namespace star {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config value for " + key + " is not a number: " + s);
  }
}

int parse_int(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<int>(v);
  } catch (const std::exception&) {
    throw ConfigError("config value for " + key + " is not an integer: " + s);
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("config value for " + key + " is not an unsigned integer: " + s);
  }
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config value for " + key + " is not a boolean: " + s);
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (views < 1) throw ConfigError("train.views must be >= 1");
  if (beta > 0 && use_view && views < 2)
    throw ConfigError("train.views must be >= 2 when loss.beta > 0 and loss.use_view is on");
  if (beta > 0 && use_step && k_positions < 2)
    throw ConfigError("loss.k_positions must be >= 2 when loss.beta > 0 and loss.use_step is on");
  if (beta > 0 && (use_step || use_view) && k_positions < 1)
    throw ConfigError("loss.k_positions must be >= 1 when a contrastive loss is on");
  if (k_positions > model.seq_len) throw ConfigError("loss.k_positions exceeds model.seq_len");
  if (base_lr <= 0) throw ConfigError("train.base_lr must be > 0");
  if (warmup_steps < 1) throw ConfigError("train.warmup_steps must be >= 1");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
    throw ConfigError("train.beta1/train.beta2 must be in [0, 1)");
  if (adam_eps <= 0) throw ConfigError("train.adam_eps must be > 0");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  if (grad_clip <= 0) throw ConfigError("train.grad_clip must be > 0");
  if (ema_decay < 0 || ema_decay > 1) throw ConfigError("train.ema_decay must be in [0, 1]");
  if (cfg_dropout_p < 0 || cfg_dropout_p > 1) throw ConfigError("train.cfg_dropout_p must be in [0, 1]");
  if (tau <= 0) throw ConfigError("loss.tau must be > 0");
  if (alpha < 0 || beta < 0) throw ConfigError("loss.alpha and loss.beta must be >= 0");
  if (steps < 0) throw ConfigError("train.steps must be >= 0");
  if (ckpt_every < 0) throw ConfigError("train.ckpt_every must be >= 0");
  if (per_class < 1) throw ConfigError("data.per_class must be >= 1");
  if (image_side < 1 || patch_side < 1 || image_side % patch_side != 0)
    throw ConfigError("data.patch_side must divide data.image_side");
  const int g = grid_side();
  if (g * g != model.seq_len)
    throw ConfigError("token grid " + std::to_string(g) + "x" + std::to_string(g) +
                      " does not match model.seq_len " + std::to_string(model.seq_len));
}

double TrainConfig::lr_at(int step) const {
  const double peak = base_lr * static_cast<double>(batch) / 256.0;
  if (step <= warmup_steps) return peak * (static_cast<double>(step) / warmup_steps);
  return peak;
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_flat() const {
  std::vector<std::pair<std::string, std::string>> kv;
  kv.emplace_back("data.augment", augment ? "true" : "false");
  kv.emplace_back("data.image_side", std::to_string(image_side));
  kv.emplace_back("data.patch_side", std::to_string(patch_side));
  kv.emplace_back("data.per_class", std::to_string(per_class));
  kv.emplace_back("data.seed", std::to_string(data_seed));
  kv.emplace_back("loss.alpha", fmt_double(alpha));
  kv.emplace_back("loss.beta", fmt_double(beta));
  kv.emplace_back("loss.contrastive_no_log", contrastive_no_log ? "true" : "false");
  kv.emplace_back("loss.k_positions", std::to_string(k_positions));
  kv.emplace_back("loss.tau", fmt_double(tau));
  kv.emplace_back("loss.use_step", use_step ? "true" : "false");
  kv.emplace_back("loss.use_view", use_view ? "true" : "false");
  kv.emplace_back("model.classes", std::to_string(model.classes));
  kv.emplace_back("model.heads", std::to_string(model.heads));
  kv.emplace_back("model.layers", std::to_string(model.layers));
  kv.emplace_back("model.mask_ratio", fmt_double(model.mask_ratio));
  kv.emplace_back("model.mask_scope", model.mask_scope);
  kv.emplace_back("model.seq_len", std::to_string(model.seq_len));
  kv.emplace_back("model.tap_depth", std::to_string(model.tap_depth));
  kv.emplace_back("model.vocab", std::to_string(model.vocab));
  kv.emplace_back("model.width", std::to_string(model.width));
  kv.emplace_back("train.adam_eps", fmt_double(adam_eps));
  kv.emplace_back("train.ar_on_unmasked", ar_on_unmasked ? "true" : "false");
  kv.emplace_back("train.base_lr", fmt_double(base_lr));
  kv.emplace_back("train.batch", std::to_string(batch));
  kv.emplace_back("train.beta1", fmt_double(beta1));
  kv.emplace_back("train.beta2", fmt_double(beta2));
  kv.emplace_back("train.cfg_dropout_p", fmt_double(cfg_dropout_p));
  kv.emplace_back("train.ckpt_every", std::to_string(ckpt_every));
  kv.emplace_back("train.ema_decay", fmt_double(ema_decay));
  kv.emplace_back("train.grad_clip", fmt_double(grad_clip));
  kv.emplace_back("train.seed", std::to_string(seed));
  kv.emplace_back("train.steps", std::to_string(steps));
  kv.emplace_back("train.views", std::to_string(views));
  kv.emplace_back("train.warmup_steps", std::to_string(warmup_steps));
  kv.emplace_back("train.weight_decay", fmt_double(weight_decay));
  return kv;
}

TrainConfig TrainConfig::from_flat(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "data.augment") c.augment = parse_bool(k, v);
    else if (k == "data.image_side") c.image_side = parse_int(k, v);
    else if (k == "data.patch_side") c.patch_side = parse_int(k, v);
    else if (k == "data.per_class") c.per_class = parse_int(k, v);
    else if (k == "data.seed") c.data_seed = parse_u64(k, v);
    else if (k == "loss.alpha") c.alpha = parse_double(k, v);
    else if (k == "loss.beta") c.beta = parse_double(k, v);
    else if (k == "loss.contrastive_no_log") c.contrastive_no_log = parse_bool(k, v);
    else if (k == "loss.k_positions") c.k_positions = parse_int(k, v);
    else if (k == "loss.tau") c.tau = parse_double(k, v);
    else if (k == "loss.use_step") c.use_step = parse_bool(k, v);
    else if (k == "loss.use_view") c.use_view = parse_bool(k, v);
    else if (k == "model.classes") c.model.classes = parse_int(k, v);
    else if (k == "model.heads") c.model.heads = parse_int(k, v);
    else if (k == "model.layers") c.model.layers = parse_int(k, v);
    else if (k == "model.mask_ratio") c.model.mask_ratio = parse_double(k, v);
    else if (k == "model.mask_scope") c.model.mask_scope = v;
    else if (k == "model.seq_len") c.model.seq_len = parse_int(k, v);
    else if (k == "model.tap_depth") c.model.tap_depth = parse_int(k, v);
    else if (k == "model.vocab") c.model.vocab = parse_int(k, v);
    else if (k == "model.width") c.model.width = parse_int(k, v);
    else if (k == "train.adam_eps") c.adam_eps = parse_double(k, v);
    else if (k == "train.ar_on_unmasked") c.ar_on_unmasked = parse_bool(k, v);
    else if (k == "train.base_lr") c.base_lr = parse_double(k, v);
    else if (k == "train.batch") c.batch = parse_int(k, v);
    else if (k == "train.beta1") c.beta1 = parse_double(k, v);
    else if (k == "train.beta2") c.beta2 = parse_double(k, v);
    else if (k == "train.cfg_dropout_p") c.cfg_dropout_p = parse_double(k, v);
    else if (k == "train.ckpt_every") c.ckpt_every = parse_int(k, v);
    else if (k == "train.ema_decay") c.ema_decay = parse_double(k, v);
    else if (k == "train.grad_clip") c.grad_clip = parse_double(k, v);
    else if (k == "train.seed") c.seed = parse_u64(k, v);
    else if (k == "train.steps") c.steps = parse_int(k, v);
    else if (k == "train.views") c.views = parse_int(k, v);
    else if (k == "train.warmup_steps") c.warmup_steps = parse_int(k, v);
    else if (k == "train.weight_decay") c.weight_decay = parse_double(k, v);
    else throw ConfigError("unknown config key: " + k);
  }
  return c;
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  for (const auto& [k, v] : to_flat()) j[k] = v;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  std::map<std::string, std::string> kv;
  for (auto it = j.begin(); it != j.end(); ++it)
    kv[it.key()] = it.value().is_string() ? it.value().get<std::string>() : it.value().dump();
  return from_flat(kv);
}

nlohmann::json MetricsRecord::to_json() const {
  nlohmann::json j;
  j["v"] = 1;
  j["step"] = step;
  j["epoch"] = epoch;
  j["l_ar"] = l_ar;
  j["l_mim"] = l_mim;
  j["l_step"] = l_step;
  j["l_view"] = l_view;
  j["total"] = total;
  j["lr"] = lr;
  j["grad_norm"] = grad_norm;
  j["tokens_per_sec"] = tokens_per_sec;
  j["wall_time_s"] = wall_time_s;
  return j;
}

AdamState AdamState::init(ModelParams<float>& params) {
  AdamState s;
  for (auto& [name, t] : params.named()) {
    s.m.emplace_back(t.size(), 0.0f);
    s.v.emplace_back(t.size(), 0.0f);
  }
  return s;
}

int cfg_dropout(int condition, int null_id, double p, std::uint64_t seed) {
  if (condition < 0 || condition > null_id)
    throw ConfigError("cfg_dropout: condition " + std::to_string(condition) + " outside [0, " +
                      std::to_string(null_id) + "]");
  if (p <= 0) return condition;
  if (p >= 1) return null_id;
  Rng rng(seed);
  return rng.bernoulli(p) ? null_id : condition;
}

bool decay_exempt(const std::string& name, const Tensor<float>& t) {
  return t.rank() == 1 || name == "tok_embed" || name == "cls_embed";
}

double global_grad_norm(ModelParams<float>& params) {
  double sq = 0;
  params.visit([&sq](const std::string&, Tensor<float>& t) {
    for (float g : t.node()->grad) sq += static_cast<double>(g) * g;
  });
  return std::sqrt(sq);
}

double clip_gradients(ModelParams<float>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0) {
    const float scale = static_cast<float>(max_norm / norm);
    params.visit([scale](const std::string&, Tensor<float>& t) {
      for (float& g : t.node()->grad) g *= scale;
    });
  }
  return norm;
}

void adamw_step(ModelParams<float>& params, AdamState& opt, double lr, const TrainConfig& cfg) {
  auto named = params.named();
  if (named.size() != opt.m.size()) throw ArtifactError("adamw_step: optimizer state misaligned");
  ++opt.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.t));
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& tensor = named[i].second;
    const auto& grad = tensor.node()->grad;
    if (grad.empty()) continue;  // parameter unused this step
    auto vals = tensor.values();
    auto& mo = opt.m[i];
    auto& vo = opt.v[i];
    const bool decay = cfg.weight_decay > 0 && !decay_exempt(named[i].first, tensor);
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double g = grad[j];
      mo[j] = static_cast<float>(cfg.beta1 * mo[j] + (1.0 - cfg.beta1) * g);
      vo[j] = static_cast<float>(cfg.beta2 * vo[j] + (1.0 - cfg.beta2) * g * g);
      const double mhat = mo[j] / bc1;
      const double vhat = vo[j] / bc2;
      double update = lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      if (decay) update += lr * cfg.weight_decay * vals[j];
      vals[j] -= static_cast<float>(update);
    }
  }
}

TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  auto dataset = synth_dataset(cfg.model.classes, cfg.per_class, cfg.image_side, cfg.data_seed);
  auto codebook = build_codebook(dataset, cfg.model.vocab, cfg.patch_side, cfg.data_seed);
  return init_state(cfg, std::move(dataset), std::move(codebook));
}

TrainState init_state(const TrainConfig& cfg, std::vector<ImageSample> dataset, Codebook codebook) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("init_state: empty dataset");
  if (codebook.vocab != cfg.model.vocab)
    throw ConfigError("init_state: codebook vocab " + std::to_string(codebook.vocab) +
                      " does not match model.vocab " + std::to_string(cfg.model.vocab));
  TrainState st;
  st.cfg = cfg;
  st.dataset = std::move(dataset);
  st.codebook = std::move(codebook);
  st.student = init_params<float>(cfg.model, cfg.seed);
  st.teacher = init_teacher(st.student, cfg.ema_decay);
  st.opt = AdamState::init(st.student);
  return st;
}

std::vector<AugmentedPair> sample_batch(const TrainState& st, int step) {
  const auto& cfg = st.cfg;
  Rng rng(stream_seed(cfg.seed, "data", step));
  std::vector<AugmentedPair> batch;
  batch.reserve(static_cast<std::size_t>(cfg.batch));
  for (int bi = 0; bi < cfg.batch; ++bi) {
    const auto& base = st.dataset[rng.randint(st.dataset.size())];
    AugmentedPair pair;
    pair.source_id = base.sample_id;
    for (int v = 0; v < cfg.views; ++v)
      pair.views.push_back(cfg.augment ? augment(base, stream_seed(cfg.seed, "aug", step, bi, v)) : base);
    batch.push_back(std::move(pair));
  }
  return batch;
}

MetricsRecord train_step(TrainState& st, const std::vector<AugmentedPair>& batch, int step) {
  const auto t_start = std::chrono::steady_clock::now();
  const auto& cfg = st.cfg;
  const int b = static_cast<int>(batch.size());
  if (b == 0) throw ConfigError("train_step: empty batch");
  const int m = cfg.views;
  const int t = cfg.model.seq_len;

  StepInputs<float> in;
  in.conditions.resize(static_cast<std::size_t>(b));
  for (int bi = 0; bi < b; ++bi)
    in.conditions[static_cast<std::size_t>(bi)] =
        cfg_dropout(batch[static_cast<std::size_t>(bi)].views[0].class_label, cfg.model.classes,
                    cfg.cfg_dropout_p, stream_seed(cfg.seed, "cfg", step, bi));
  in.view_tokens.resize(static_cast<std::size_t>(m));
  in.view_masks.resize(static_cast<std::size_t>(m));
  for (int mi = 0; mi < m; ++mi) {
    auto& toks = in.view_tokens[static_cast<std::size_t>(mi)];
    toks.reserve(static_cast<std::size_t>(b) * t);
    for (int bi = 0; bi < b; ++bi) {
      const auto& pair = batch[static_cast<std::size_t>(bi)];
      if (static_cast<int>(pair.views.size()) <= mi)
        throw ConfigError("train_step: sample has fewer views than train.views");
      auto seq = quantize(pair.views[static_cast<std::size_t>(mi)], st.codebook, cfg.patch_side);
      if (static_cast<int>(seq.tokens.size()) != t)
        throw ConfigError("train_step: token count " + std::to_string(seq.tokens.size()) +
                          " does not match model.seq_len");
      for (auto tok : seq.tokens) toks.push_back(static_cast<int>(tok));
    }
    in.view_masks[static_cast<std::size_t>(mi)] =
        build_step_masks<float>(cfg.model, cfg.seed, step, mi, b);
  }
  if (cfg.beta > 0 && (cfg.use_step || cfg.use_view))
    in.positions = sample_positions(cfg.k_positions, t, stream_seed(cfg.seed, "positions", step)).indices;

  st.student.set_requires_grad(true);
  st.student.zero_grad();
  MetricsRecord rec;
  Tape<float> tape;
  {
    TapeScope<float> scope(tape);
    auto bundle = compute_loss_bundle(st.student, st.teacher, in, cfg.alpha, cfg.beta,
                                      static_cast<float>(cfg.tau), cfg.contrastive_no_log,
                                      cfg.ar_on_unmasked, cfg.use_step, cfg.use_view);
    rec.l_ar = bundle.l_ar.item();
    rec.l_mim = bundle.l_mim.item();
    rec.l_step = bundle.l_step.item();
    rec.l_view = bundle.l_view.item();
    rec.total = bundle.total.item();
    tape.backward(bundle.total);
  }
  const double grad_norm = clip_gradients(st.student, cfg.grad_clip);
  if (!std::isfinite(grad_norm)) throw NumericsError("train_step: non-finite gradient norm");
  const double lr = cfg.lr_at(step);
  adamw_step(st.student, st.opt, lr, cfg);
  ema_update(st.teacher, st.student);
  st.steps_done = step;

  rec.step = step;
  rec.epoch = st.dataset.empty()
                  ? 0
                  : static_cast<int>(static_cast<long long>(step) * b /
                                     static_cast<long long>(st.dataset.size()));
  rec.lr = lr;
  rec.grad_norm = grad_norm;
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  rec.wall_time_s = wall;
  rec.tokens_per_sec = wall > 0 ? static_cast<double>(b) * m * t / wall : 0.0;
  return rec;
}

namespace {

void append_named(std::vector<std::pair<std::string, Tensor<float>>>& out, const std::string& prefix,
                  ModelParams<float>& params) {
  for (auto& [name, t] : params.named()) out.emplace_back(prefix + name, t);
}

}  // namespace

void save_train_checkpoint(const TrainState& st, const std::string& path) {
  auto& self = const_cast<TrainState&>(st);
  nlohmann::json meta;
  meta["v"] = 1;
  meta["kind"] = "train";
  meta["step"] = st.steps_done;
  meta["adam_t"] = st.opt.t;
  meta["ema_steps"] = st.teacher.steps_applied;
  meta["config"] = st.cfg.to_json();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  append_named(tensors, "student/", self.student);
  append_named(tensors, "teacher/", self.teacher.params);
  auto named = self.student.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    tensors.emplace_back("opt/m/" + named[i].first,
                         Tensor<float>::from(named[i].second.shape(), st.opt.m[i]));
    tensors.emplace_back("opt/v/" + named[i].first,
                         Tensor<float>::from(named[i].second.shape(), st.opt.v[i]));
  }
  save_checkpoint(path, meta, tensors);
}

void restore_train_checkpoint(TrainState& st, const std::string& path) {
  auto ck = load_checkpoint(path);
  if (!ck.meta.contains("config")) throw ArtifactError("checkpoint has no config block: " + path);
  auto loaded = TrainConfig::from_json(ck.meta.at("config"));
  auto want = st.cfg.to_flat();
  auto have = loaded.to_flat();
  for (std::size_t i = 0; i < want.size(); ++i) {
    const auto& key = want[i].first;
    if (key.rfind("model.", 0) != 0) continue;
    if (want[i].second != have[i].second)
      throw ArtifactError("checkpoint model config mismatch at " + key + ": checkpoint has " +
                          have[i].second + ", run has " + want[i].second);
  }

  auto copy_into = [&ck](const std::string& name, Tensor<float>& dst) {
    const auto& src = ck.require(name);
    if (src.shape() != dst.shape())
      throw ArtifactError("checkpoint tensor " + name + " has shape " + shape_str(src.shape()) +
                          ", expected " + shape_str(dst.shape()));
    std::copy(src.values().begin(), src.values().end(), dst.values().begin());
  };
  for (auto& [name, t] : st.student.named()) copy_into("student/" + name, t);
  for (auto& [name, t] : st.teacher.params.named()) copy_into("teacher/" + name, t);
  auto named = st.student.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& msrc = ck.require("opt/m/" + named[i].first);
    const auto& vsrc = ck.require("opt/v/" + named[i].first);
    st.opt.m[i].assign(msrc.values().begin(), msrc.values().end());
    st.opt.v[i].assign(vsrc.values().begin(), vsrc.values().end());
  }
  st.steps_done = ck.meta.at("step").get<int>();
  st.opt.t = ck.meta.at("adam_t").get<std::int64_t>();
  st.teacher.steps_applied = ck.meta.at("ema_steps").get<std::int64_t>();
  st.teacher.decay = st.cfg.ema_decay;
  st.teacher.params.set_requires_grad(false);
}

std::string find_latest_checkpoint(const std::string& dir) {
  static const std::regex pat(R"(step_(\d+)\.ckpt)");
  std::string best;
  long best_step = -1;
  if (!fs::exists(dir)) return best;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pat)) {
      const long s = std::stol(m[1].str());
      if (s > best_step) {
        best_step = s;
        best = entry.path().string();
      }
    }
  }
  return best;
}

namespace {

std::string ckpt_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%06d.ckpt", step);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path);
  out << text;
}

}  // namespace

RunResult run_training(const TrainConfig& cfg, const std::string& run_dir, bool resume) {
  cfg.validate();
  const std::string ckpt_dir = run_dir + "/checkpoints";
  fs::create_directories(ckpt_dir);
  TrainState st = init_state(cfg);

  const std::string metrics_path = run_dir + "/metrics.jsonl";
  int start = 0;
  if (resume) {
    const std::string latest = find_latest_checkpoint(ckpt_dir);
    if (latest.empty()) throw ArtifactError("resume requested but no checkpoint found in " + ckpt_dir);
    restore_train_checkpoint(st, latest);
    start = st.steps_done;
    // drop metrics rows past the checkpoint so replayed steps are not duplicated
    if (fs::exists(metrics_path)) {
      std::ifstream inm(metrics_path);
      std::ostringstream keep;
      std::string line;
      while (std::getline(inm, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        if (j.at("step").get<int>() <= start) keep << line << "\n";
      }
      write_text(metrics_path, keep.str());
    }
  } else {
    std::ostringstream resolved;
    for (const auto& [k, v] : cfg.to_flat()) resolved << k << "=" << v << "\n";
    write_text(run_dir + "/config.resolved", resolved.str());
    nlohmann::json manifest;
    manifest["v"] = 1;
    manifest["config"] = cfg.to_json();
    manifest["dataset_images"] = st.dataset.size();
    manifest["codebook_sha256"] =
        sha256_hex(st.codebook.entries.data(), st.codebook.entries.size() * sizeof(float));
    manifest["param_count"] = st.student.count();
    write_text(run_dir + "/manifest.json", manifest.dump(2) + "\n");
    write_text(metrics_path, "");
  }

  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::app);
  if (!metrics) throw ArtifactError("cannot write " + metrics_path);

  RunResult result;
  result.run_dir = run_dir;
  result.steps_done = start;
  for (int s = start + 1; s <= cfg.steps; ++s) {
    auto batch = sample_batch(st, s);
    auto rec = train_step(st, batch, s);
    metrics << rec.to_json().dump() << "\n";
    metrics.flush();
    result.steps_done = s;
    result.final_total = rec.total;
    if (cfg.ckpt_every > 0 && s % cfg.ckpt_every == 0)
      save_train_checkpoint(st, ckpt_dir + "/" + ckpt_name(s));
  }
  if (st.steps_done > 0) {
    const std::string final_path = ckpt_dir + "/" + ckpt_name(st.steps_done);
    if (!fs::exists(final_path)) save_train_checkpoint(st, final_path);
  }
  nlohmann::json done;
  done["v"] = 1;
  done["steps"] = result.steps_done;
  done["final_total"] = result.final_total;
  write_text(run_dir + "/completed.json", done.dump(2) + "\n");
  return result;
}

}  // namespace star
