#include "star/cli.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "star/checkpoint.hpp"
#include "star/data_toy.hpp"
#include "star/diagnostics.hpp"
#include "star/gradcheck.hpp"
#include "star/model.hpp"
#include "star/sampler.hpp"
#include "star/teacher.hpp"
#include "star/trainer.hpp"

namespace fs = std::filesystem;

namespace star {
namespace {

#ifndef STAR_CODE_VERSION
#define STAR_CODE_VERSION "unknown"
#endif

std::string code_version() { return STAR_CODE_VERSION; }

std::string iso_utc_now() {
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

std::string sanitize_label(const std::string& name) {
  std::string out;
  for (char c : name)
    out.push_back((std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_');
  return out;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << text;
  if (!out) throw ArtifactError("short write to " + path.string());
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("corrupt JSON in " + path.string() + ": " + e.what());
  }
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// key=value lines, '#' starts a comment, blank lines ignored
std::map<std::string, std::string> read_flat_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot read config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = val;
  }
  return kv;
}

std::pair<std::string, std::string> split_set_arg(const std::string& arg) {
  auto eq = arg.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + arg + "'");
  return {trim(arg.substr(0, eq)), trim(arg.substr(eq + 1))};
}

// Flags that map one-to-one onto flat config keys. Stored as strings so
// presence is the only signal; TrainConfig::from_flat does the parsing and
// rejects unknown keys and malformed values.
struct config_flags {
  struct slot {
    const char* flag;
    const char* key;
    const char* help;
    std::string value;
  };
  std::vector<slot> slots;
  std::string config_path;
  std::vector<std::string> sets;
  CLI::App* cmd = nullptr;

  void attach(CLI::App* sub) {
    cmd = sub;
    slots = {
        {"--steps", "train.steps", "optimizer steps", ""},
        {"--batch", "train.batch", "images per step", ""},
        {"--views", "train.views", "augmented views per image", ""},
        {"--seed", "train.seed", "training seed", ""},
        {"--base-lr", "train.base_lr", "peak learning rate per 256-image batch", ""},
        {"--warmup", "train.warmup_steps", "linear warmup steps", ""},
        {"--ckpt-every", "train.ckpt_every", "checkpoint period in steps (0: end only)", ""},
        {"--alpha", "loss.alpha", "masked image modeling weight", ""},
        {"--beta", "loss.beta", "contrastive weight (split over step and view terms)", ""},
        {"--tau", "loss.tau", "contrastive temperature", ""},
        {"--k-positions", "loss.k_positions", "tapped positions per sequence", ""},
        {"--mask-ratio", "model.mask_ratio", "fraction of token keys hidden from the student", ""},
        {"--tap-depth", "model.tap_depth", "1-based layer feeding the contrastive losses", ""},
        {"--layers", "model.layers", "decoder depth", ""},
        {"--width", "model.width", "embedding width", ""},
        {"--heads", "model.heads", "attention heads", ""},
        {"--vocab", "model.vocab", "token vocabulary size", ""},
        {"--seq-len", "model.seq_len", "tokens per image (a square grid)", ""},
        {"--classes", "model.classes", "condition classes", ""},
        {"--per-class", "data.per_class", "training images per class", ""},
        {"--image-side", "data.image_side", "synthetic image side in pixels", ""},
        {"--patch-side", "data.patch_side", "tokenizer patch side in pixels", ""},
        {"--data-seed", "data.seed", "dataset synthesis seed", ""},
        {"--augment", "data.augment", "true/false: augment training views", ""},
    };
    sub->add_option("--config", config_path, "flat key=value config file, overridden by flags");
    sub->add_option("--set", sets, "extra key=value override, repeatable")->type_name("KEY=VALUE");
    for (auto& s : slots) sub->add_option(s.flag, s.value, s.help);
  }

  // defaults < --config file < --set < named flags
  std::map<std::string, std::string> merged() const {
    std::map<std::string, std::string> kv;
    if (!config_path.empty())
      for (auto& [k, v] : read_flat_config(config_path)) kv[k] = v;
    for (const auto& s : sets) {
      auto [k, v] = split_set_arg(s);
      kv[k] = v;
    }
    for (const auto& s : slots)
      if (cmd->count(s.flag) > 0) kv[s.key] = s.value;
    return kv;
  }

  TrainConfig resolve() const { return TrainConfig::from_flat(merged()); }
};

int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(what + ": expected an integer, got '" + s + "'");
  }
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(what + ": expected a number, got '" + s + "'");
  }
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint loading shared by sample / probe / attn / invariance
// ---------------------------------------------------------------------------

struct loaded_model {
  TrainConfig cfg;
  ModelParams<float> params;
  std::string ckpt_path;
};

std::string pick_checkpoint(const std::string& run_dir, const std::string& ckpt_flag) {
  if (!ckpt_flag.empty()) return ckpt_flag;
  if (run_dir.empty()) throw ConfigError("need --run or --ckpt to locate a checkpoint");
  std::string latest = find_latest_checkpoint(run_dir + "/checkpoints");
  if (latest.empty()) throw ArtifactError("no checkpoint found under " + run_dir + "/checkpoints");
  return latest;
}

loaded_model load_run_model(const std::string& run_dir, const std::string& ckpt_flag) {
  loaded_model out;
  out.ckpt_path = pick_checkpoint(run_dir, ckpt_flag);
  Checkpoint ck = load_checkpoint(out.ckpt_path);
  if (!ck.meta.contains("config"))
    throw ArtifactError("checkpoint " + out.ckpt_path + " carries no training config");
  try {
    out.cfg = TrainConfig::from_json(ck.meta.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("checkpoint " + out.ckpt_path + " has a malformed config: " + e.what());
  }
  out.cfg.validate();
  out.params = init_params<float>(out.cfg.model, 0);
  for (auto& [name, t] : out.params.named()) {
    const Tensor<float>& src = ck.require("student/" + name);
    if (src.shape() != t.shape())
      throw ArtifactError("checkpoint tensor student/" + name + " does not match the declared config");
    auto sv = src.values();
    auto dv = t.values();
    std::copy(sv.begin(), sv.end(), dv.begin());
  }
  out.params.set_requires_grad(false);
  return out;
}

// Training re-derives its dataset and codebook from the config, so eval
// passes rebuild the identical tokenizer from the same seeds.
Codebook rebuild_codebook(const TrainConfig& cfg) {
  auto corpus = synth_dataset(cfg.model.classes, cfg.per_class, cfg.image_side, cfg.data_seed);
  return build_codebook(corpus, cfg.model.vocab, cfg.patch_side, cfg.data_seed);
}

nlohmann::json last_metrics_row(const std::string& run_dir) {
  std::ifstream in(run_dir + "/metrics.jsonl", std::ios::binary);
  if (!in) throw ArtifactError("cannot read " + run_dir + "/metrics.jsonl");
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  if (last.empty()) throw ArtifactError(run_dir + "/metrics.jsonl has no rows");
  try {
    return nlohmann::json::parse(last);
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("corrupt metrics row in " + run_dir + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// make-data
// ---------------------------------------------------------------------------

struct make_data_opts {
  std::string out;
  int classes = 10;
  int per_class = 64;
  int vocab = 64;
  int image_side = 32;
  int patch_side = 4;
  std::uint64_t seed = 7;
  int iterations = 50;
};

int run_make_data(const make_data_opts& o) {
  if (o.classes < 1) throw ConfigError("make-data: classes must be >= 1");
  if (o.per_class < 1) throw ConfigError("make-data: per-class must be >= 1");
  if (o.vocab < 2) throw ConfigError("make-data: vocab must be >= 2");
  if (o.patch_side < 1 || o.image_side < o.patch_side || o.image_side % o.patch_side != 0)
    throw ConfigError("make-data: image side must be a positive multiple of the patch side");
  if (o.iterations < 1) throw ConfigError("make-data: iterations must be >= 1");

  fs::create_directories(o.out);
  auto corpus = synth_dataset(o.classes, o.per_class, o.image_side, o.seed);
  auto codebook = build_codebook(corpus, o.vocab, o.patch_side, o.seed, o.iterations);

  std::vector<TokenSequence> seqs;
  seqs.reserve(corpus.size());
  std::vector<int> per_class_counts(static_cast<std::size_t>(o.classes), 0);
  for (const auto& img : corpus) {
    auto seq = quantize(img, codebook, o.patch_side);
    seq.condition = img.class_label;
    per_class_counts[static_cast<std::size_t>(img.class_label)] += 1;
    seqs.push_back(std::move(seq));
  }
  const int seq_len = static_cast<int>(seqs.front().tokens.size());

  save_tokens(o.out + "/tokens.startok", seqs, o.vocab, o.classes);
  save_codebook(o.out + "/codebook.starcb", codebook);

  nlohmann::json meta;
  meta["v"] = 1;
  meta["classes"] = o.classes;
  meta["per_class"] = o.per_class;
  meta["vocab"] = o.vocab;
  meta["image_side"] = o.image_side;
  meta["patch_side"] = o.patch_side;
  meta["seed"] = o.seed;
  meta["iterations"] = o.iterations;
  meta["seq_len"] = seq_len;
  meta["count"] = seqs.size();
  meta["per_class_counts"] = per_class_counts;
  write_text_file(o.out + "/data.json", meta.dump(2) + "\n");

  std::cout << "dataset: classes=" << o.classes << " vocab=" << o.vocab << " seq_len=" << seq_len
            << " sequences=" << seqs.size() << "\n";
  std::cout << "per-class counts:";
  for (int c : per_class_counts) std::cout << " " << c;
  std::cout << "\nwrote " << o.out << "/tokens.startok, codebook.starcb, data.json\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct train_opts {
  config_flags cfgf;
  std::string out;
  std::string data_dir;
  bool star_mode = false;
  bool baseline_mode = false;
  bool resume = false;
};

void check_prebuilt_dataset(const TrainConfig& cfg, const std::string& data_dir) {
  auto meta = read_json_file(data_dir + "/data.json");
  auto expect_eq = [&](const char* key, long long want) {
    const long long got = meta.at(key).get<long long>();
    if (got != want)
      throw ArtifactError("dataset " + data_dir + ": " + key + "=" + std::to_string(got) +
                          " does not match the resolved config value " + std::to_string(want));
  };
  expect_eq("classes", cfg.model.classes);
  expect_eq("vocab", cfg.model.vocab);
  expect_eq("seq_len", cfg.model.seq_len);
  expect_eq("per_class", cfg.per_class);
  expect_eq("image_side", cfg.image_side);
  expect_eq("patch_side", cfg.patch_side);
  expect_eq("seed", static_cast<long long>(cfg.data_seed));
  // the trainer rebuilds its codebook with the default iteration count
  expect_eq("iterations", 50);
  Codebook got = load_codebook(data_dir + "/codebook.starcb");
  Codebook want = rebuild_codebook(cfg);
  if (got.vocab != want.vocab || got.feature_dim != want.feature_dim || got.entries != want.entries)
    throw ArtifactError("dataset " + data_dir +
                        ": codebook bytes differ from the one the trainer derives for this config");
}

int run_train(const train_opts& o) {
  if (o.out.empty()) throw ConfigError("train: --out is required");
  std::string mode = "custom";
  auto kv = o.cfgf.merged();
  if (o.baseline_mode) {
    mode = "baseline";
    kv["loss.alpha"] = "0";
    kv["loss.beta"] = "0";
    kv["model.mask_ratio"] = "0";
  } else if (o.star_mode) {
    mode = "star";
    kv["loss.alpha"] = "1";
    kv["loss.beta"] = "0.5";
    kv["loss.tau"] = "0.2";
    kv["loss.k_positions"] = "4";
    kv["loss.use_step"] = "true";
    kv["loss.use_view"] = "true";
    kv["model.mask_ratio"] = "0.25";
  }
  TrainConfig cfg = TrainConfig::from_flat(kv);
  cfg.validate();
  if (!o.data_dir.empty()) check_prebuilt_dataset(cfg, o.data_dir);

  fs::create_directories(o.out);
  const fs::path cli_path = fs::path(o.out) / "cli.json";
  if (!o.resume) {
    if (fs::exists(fs::path(o.out) / "manifest.json"))
      throw ArtifactError("train: " + o.out + " already holds a run; pass --resume or a fresh --out");
    nlohmann::json manifest;
    manifest["v"] = 1;
    manifest["command"] = "train";
    manifest["mode"] = mode;
    manifest["code_version"] = code_version();
    manifest["seed"] = cfg.seed;
    manifest["data_seed"] = cfg.data_seed;
    manifest["started"] = iso_utc_now();
    manifest["artifacts"] = {{"config", "config.resolved"},
                             {"manifest", "manifest.json"},
                             {"metrics", "metrics.jsonl"},
                             {"checkpoints", "checkpoints/"}};
    write_text_file(cli_path, manifest.dump(2) + "\n");
  }

  RunResult res = run_training(cfg, o.out, o.resume);

  // the pre-run manifest stays immutable, so the end timestamp gets its own
  // file next to the trainer's completed.json
  nlohmann::json done;
  done["v"] = 1;
  done["ended"] = iso_utc_now();
  write_text_file(fs::path(o.out) / "done.json", done.dump(2) + "\n");

  auto row = last_metrics_row(o.out);
  std::cout << "run complete: dir=" << o.out << " steps=" << res.steps_done
            << " l_ar=" << fmt_short(row.at("l_ar").get<double>())
            << " l_mim=" << fmt_short(row.at("l_mim").get<double>())
            << " l_step=" << fmt_short(row.at("l_step").get<double>())
            << " l_view=" << fmt_short(row.at("l_view").get<double>())
            << " total=" << fmt_short(row.at("total").get<double>()) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

struct sample_opts {
  std::string run_dir, ckpt, out;
  int class_id = 0;
  int count = 16;
  double cfg_scale = 2.0;
  double temperature = 1.0;
  int top_k = 0;
  std::uint64_t seed = 0;
  bool png = false;
};

std::string resolve_out_dir(const std::string& out, const std::string& run_dir, const char* cmd,
                            const char* leaf) {
  if (!out.empty()) return out;
  if (run_dir.empty())
    throw ConfigError(std::string(cmd) + ": --out is required when only --ckpt is given");
  return run_dir + "/" + leaf;
}

int run_sample(const sample_opts& o) {
  const std::string out = resolve_out_dir(o.out, o.run_dir, "sample", "samples");
  if (o.count < 1) throw ConfigError("sample: count must be >= 1");
  auto lm = load_run_model(o.run_dir, o.ckpt);
  fs::create_directories(out);

  SampleConfig sc;
  sc.cfg_scale = o.cfg_scale;
  sc.temperature = o.temperature;
  sc.top_k = o.top_k;
  sc.count = o.count;
  sc.validate(lm.cfg.model.vocab);

  std::vector<TokenSequence> seqs;
  seqs.reserve(static_cast<std::size_t>(o.count));
  for (int i = 0; i < o.count; ++i) {
    SampleConfig one = sc;
    one.seed = o.seed + static_cast<std::uint64_t>(i);
    seqs.push_back(generate(lm.params, o.class_id, one));
  }
  save_tokens(out + "/samples.startok", seqs, lm.cfg.model.vocab, lm.cfg.model.classes);

  nlohmann::json meta;
  meta["v"] = 1;
  meta["checkpoint"] = lm.ckpt_path;
  meta["code_version"] = code_version();
  meta["class"] = o.class_id;
  meta["count"] = o.count;
  meta["cfg_scale"] = o.cfg_scale;
  meta["temperature"] = o.temperature;
  meta["top_k"] = o.top_k;
  meta["seed"] = o.seed;
  write_text_file(out + "/samples.json", meta.dump(2) + "\n");

  if (o.png) {
    Codebook cb = rebuild_codebook(lm.cfg);
    for (int i = 0; i < o.count; ++i) {
      auto img = decode_to_image(seqs[static_cast<std::size_t>(i)], cb, lm.cfg.patch_side);
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%03d.png", i);
      write_png(out + "/" + name, img.pixels, img.side, img.side);
    }
  }
  std::cout << "wrote " << o.count << " sequences for class " << o.class_id << " to " << out
            << "/samples.startok\n";
  return 0;
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

struct probe_opts {
  std::string run_dir, ckpt, out;
  std::string steps_csv;
  int layer = 0;  // 0: checkpoint tap depth
  int epochs = 90;
  int per_class = 0;  // 0: checkpoint per_class
  std::uint64_t seed = 0;
};

std::vector<int> default_probe_steps(int seq_len) {
  std::vector<int> steps;
  for (int i = 1; i <= 8; ++i) {
    int s = std::max(1, (i * seq_len) / 8);
    if (steps.empty() || steps.back() != s) steps.push_back(s);
  }
  return steps;
}

int run_probe(const probe_opts& o) {
  const std::string out = resolve_out_dir(o.out, o.run_dir, "probe", "probe");
  auto lm = load_run_model(o.run_dir, o.ckpt);
  const TrainConfig& cfg = lm.cfg;

  std::vector<int> steps;
  if (o.steps_csv.empty())
    steps = default_probe_steps(cfg.model.seq_len);
  else
    for (const auto& s : split_csv(o.steps_csv)) steps.push_back(parse_int(s, "probe --steps"));
  const int layer = o.layer > 0 ? o.layer : cfg.model.tap_depth;
  const int per_class = o.per_class > 0 ? o.per_class : cfg.per_class;

  // probe images come from a fresh stream so the report measures held-out
  // generalization, not training-set recall; the tokenizer must still be the
  // training one
  Codebook cb = rebuild_codebook(cfg);
  auto images = synth_dataset(cfg.model.classes, per_class, cfg.image_side, cfg.data_seed + 9001);
  std::vector<TokenSequence> dataset;
  dataset.reserve(images.size());
  for (const auto& img : images) {
    auto seq = quantize(img, cb, cfg.patch_side);
    seq.condition = img.class_label;
    dataset.push_back(std::move(seq));
  }

  ProbeReport report = probe_per_step(lm.params, dataset, steps, layer, o.epochs, o.seed);
  render_report({}, {{"probe", report}}, {}, out);

  std::cout << "probe: layer=" << layer << " epochs=" << o.epochs << " sequences=" << dataset.size()
            << " chance=" << fmt_short(1.0 / cfg.model.classes) << "\n";
  for (std::size_t i = 0; i < report.steps.size(); ++i)
    std::cout << "  step " << report.steps[i] << ": accuracy " << fmt_short(report.accuracies[i]) << "\n";
  std::cout << "wrote " << out << "/probe.csv\n";
  return 0;
}

// ---------------------------------------------------------------------------
// attn
// ---------------------------------------------------------------------------

struct attn_opts {
  std::string run_dir, ckpt, out;
  int traces = 256;
  int batch = 32;
  std::uint64_t seed = 0;
};

LocalityProfile collect_locality(const loaded_model& lm, int traces, int batch, std::uint64_t data_seed) {
  const TrainConfig& cfg = lm.cfg;
  Codebook cb = rebuild_codebook(cfg);
  const int per_class = (traces + cfg.model.classes - 1) / cfg.model.classes;
  auto images = synth_dataset(cfg.model.classes, per_class, cfg.image_side, data_seed);
  if (static_cast<int>(images.size()) > traces) images.resize(static_cast<std::size_t>(traces));

  std::vector<ForwardTrace<float>> out;
  for (std::size_t at = 0; at < images.size(); at += static_cast<std::size_t>(batch)) {
    const std::size_t hi = std::min(images.size(), at + static_cast<std::size_t>(batch));
    std::vector<int> conditions;
    std::vector<int> tokens;
    conditions.reserve(hi - at);
    tokens.reserve((hi - at) * static_cast<std::size_t>(cfg.model.seq_len));
    for (std::size_t i = at; i < hi; ++i) {
      conditions.push_back(images[i].class_label);
      auto seq = quantize(images[i], cb, cfg.patch_side);
      for (auto tok : seq.tokens) tokens.push_back(static_cast<int>(tok));
    }
    out.push_back(forward(lm.params, conditions, tokens, {}, TraceLevel::full));
  }
  return attention_locality(out, cfg.grid_side());
}

int run_attn(const attn_opts& o) {
  const std::string out = resolve_out_dir(o.out, o.run_dir, "attn", "attn");
  if (o.traces < 1) throw ConfigError("attn: traces must be >= 1");
  if (o.batch < 1) throw ConfigError("attn: batch must be >= 1");
  auto lm = load_run_model(o.run_dir, o.ckpt);

  LocalityProfile profile = collect_locality(lm, o.traces, o.batch, lm.cfg.data_seed + 8101 + o.seed);
  render_report({{"attn", profile}}, {}, {}, out);

  for (int l = 0; l < profile.layers; ++l) {
    double cond = 0;
    for (double v : profile.mass_on_condition[static_cast<std::size_t>(l)]) cond += v;
    cond /= profile.seq_len;
    std::cout << "layer " << (l + 1) << ": mean_distance=" << fmt_short(profile.layer_mean_distance(l))
              << " mass_elsewhere=" << fmt_short(profile.layer_mass_elsewhere(l))
              << " mass_on_condition=" << fmt_short(cond) << "\n";
  }
  std::cout << "wrote " << out << "/locality.csv\n";
  return 0;
}

// ---------------------------------------------------------------------------
// invariance
// ---------------------------------------------------------------------------

struct invariance_opts {
  std::string run_dir, ckpt, out;
  int pairs = 500;
  int layer = 0;
  std::uint64_t seed = 0;
};

InvarianceRecord collect_invariance(const loaded_model& lm, int pairs, int layer, std::uint64_t seed) {
  const TrainConfig& cfg = lm.cfg;
  Codebook cb = rebuild_codebook(cfg);
  auto images = synth_dataset(cfg.model.classes, cfg.per_class, cfg.image_side, cfg.data_seed);
  std::vector<AugmentedPair> aug;
  aug.reserve(static_cast<std::size_t>(pairs));
  for (int i = 0; i < pairs; ++i) {
    const auto& img = images[static_cast<std::size_t>(i) % images.size()];
    AugmentedPair p;
    p.source_id = img.sample_id;
    p.views.push_back(augment(img, stream_seed(seed, "invaug", i, 0)));
    p.views.push_back(augment(img, stream_seed(seed, "invaug", i, 1)));
    aug.push_back(std::move(p));
  }
  return view_invariance(lm.params, cb, cfg.patch_side, aug, layer);
}

int run_invariance(const invariance_opts& o) {
  const std::string out = resolve_out_dir(o.out, o.run_dir, "invariance", "invariance");
  if (o.pairs < 1) throw ConfigError("invariance: pairs must be >= 1");
  auto lm = load_run_model(o.run_dir, o.ckpt);
  const int layer = o.layer > 0 ? o.layer : lm.cfg.model.tap_depth;

  InvarianceRecord rec = collect_invariance(lm, o.pairs, layer, o.seed);
  render_report({}, {}, {{"invariance", rec}}, out);

  std::cout << "pairs=" << rec.pairs << " token_change_rate=" << fmt_short(rec.token_change_rate)
            << " feature_cosine=" << fmt_short(rec.feature_cosine) << " (layer " << layer << ")\n";
  std::cout << "wrote " << out << "/invariance.csv\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct gradcheck_opts {
  double eps = 1e-4;
  double tol_component = 1e-4;
  double tol_total = 1e-3;
  // central differences at eps cannot resolve gradients below roughly
  // eps^2 * |f'''| / 6, so coordinates that close to zero are judged on
  // absolute disagreement instead
  double atol = 1e-7;
  int coords = 6;
  std::uint64_t seed = 11;
};

int run_gradcheck(const gradcheck_opts& o) {
  if (o.eps <= 0) throw ConfigError("gradcheck: eps must be positive");
  if (o.coords == 0) throw ConfigError("gradcheck: coords must be nonzero (-1: every coordinate)");

  ModelConfig mc;
  mc.layers = 2;
  mc.width = 16;
  mc.heads = 2;
  mc.vocab = 12;
  mc.seq_len = 8;
  mc.classes = 3;
  mc.tap_depth = 1;
  mc.mask_ratio = 0.25;
  mc.validate();

  const int b = 2, m = 2;
  auto student = init_params<double>(mc, 3);
  // move every parameter off its structured init (zero biases, unit gains):
  // those are near-singular points of the normalization layers where the
  // third derivative blows up the central-difference truncation error
  {
    Rng g(stream_seed(o.seed, "generic"));
    for (auto& [name, t] : student.named())
      for (auto& v : t.values()) v += 0.2 * g.normal();
  }
  student.set_requires_grad(true);
  TeacherState<double> teacher;
  teacher.params = init_params<double>(mc, 4);
  teacher.params.set_requires_grad(false);
  teacher.decay = 0.9999;

  StepInputs<double> in;
  in.conditions = {0, 1};
  Rng rng(77);
  in.view_tokens.resize(m);
  for (int mi = 0; mi < m; ++mi)
    for (int i = 0; i < b * mc.seq_len; ++i)
      in.view_tokens[static_cast<std::size_t>(mi)].push_back(
          static_cast<int>(rng.randint(static_cast<std::uint64_t>(mc.vocab))));
  for (int mi = 0; mi < m; ++mi)
    in.view_masks.push_back(build_step_masks<double>(mc, o.seed, 1, mi, b));
  in.positions = sample_positions(2, mc.seq_len, stream_seed(o.seed, "positions", 1)).indices;

  auto bundle_of = [&]() {
    return compute_loss_bundle<double>(student, teacher, in, 1.0, 0.5, 0.2, false, false);
  };
  struct component {
    const char* name;
    std::function<Tensor<double>()> fn;
    double tol;
  };
  std::vector<component> comps = {
      {"l_ar", [&] { return bundle_of().l_ar; }, o.tol_component},
      {"l_mim", [&] { return bundle_of().l_mim; }, o.tol_component},
      {"l_step", [&] { return bundle_of().l_step; }, o.tol_component},
      {"l_view", [&] { return bundle_of().l_view; }, o.tol_component},
      {"total", [&] { return bundle_of().total; }, o.tol_total},
  };

  char line[160];
  std::cout << "gradcheck: layers=" << mc.layers << " width=" << mc.width << " seq_len=" << mc.seq_len
            << " batch=" << b << " views=" << m << " eps=" << fmt_short(o.eps) << "\n";
  std::snprintf(line, sizeof(line), "%-8s %12s %12s %8s %6s", "loss", "max_rel_err", "max_abs_err",
                "coords", "pass");
  std::cout << line << "\n";
  bool all_pass = true;
  std::string first_fail;
  for (auto& c : comps) {
    GradReport rep = gradient_check<double>(c.fn, student.named(), o.eps, c.tol, o.coords, 17, o.atol);
    std::size_t coords = 0;
    double max_abs = 0;
    for (const auto& i : rep.inputs) {
      coords += i.coords_checked;
      max_abs = std::max(max_abs, i.max_abs_err);
    }
    std::snprintf(line, sizeof(line), "%-8s %12.3e %12.3e %8zu %6s", c.name, rep.max_rel_err, max_abs,
                  coords, rep.pass ? "yes" : "NO");
    std::cout << line << "\n";
    if (!rep.pass) {
      all_pass = false;
      if (first_fail.empty()) first_fail = c.name;
      for (const auto& i : rep.inputs) {
        if (i.pass) continue;
        std::snprintf(line, sizeof(line), "    %-24s rel=%.3e analytic=%.6e numeric=%.6e at %zu",
                      i.name.c_str(), i.max_rel_err, i.worst_analytic, i.worst_numeric, i.worst_index);
        std::cout << line << "\n";
      }
    }
  }
  if (!all_pass) throw NumericsError("gradient check failed on " + first_fail);
  std::cout << "all gradient checks passed\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct sweep_opts {
  config_flags cfgf;
  std::string axis;
  std::string out;
  std::string values_csv;
  int jobs = 1;
  int traces = 64;
  int pairs = 64;
  std::uint64_t eval_seed = 0;
};

struct sweep_point {
  std::string label;
  TrainConfig cfg;
};

TrainConfig apply_loss_preset(TrainConfig cfg, const std::string& name) {
  if (name == "none") {
    cfg.alpha = 0;
    cfg.beta = 0;
    cfg.model.mask_ratio = 0;
  } else if (name == "mim") {
    cfg.beta = 0;
  } else if (name == "mim_step") {
    cfg.use_view = false;
  } else if (name == "mim_view") {
    cfg.use_step = false;
  } else if (name == "star") {
    // base config unchanged
  } else {
    throw ConfigError("sweep: unknown loss preset '" + name +
                      "' (expected none, mim, mim_step, mim_view or star)");
  }
  return cfg;
}

std::vector<sweep_point> build_sweep_points(const std::string& axis, const TrainConfig& base,
                                            const std::string& values_csv) {
  std::vector<std::string> raw = split_csv(values_csv);
  std::vector<sweep_point> points;
  if (axis == "mask_ratio") {
    std::vector<double> vals;
    if (raw.empty())
      vals = {0.15, 0.25, 0.35, 0.45};
    else
      for (const auto& s : raw) vals.push_back(parse_double(s, "sweep --values"));
    for (double v : vals) {
      sweep_point p{fmt_short(v), base};
      p.cfg.model.mask_ratio = v;
      points.push_back(std::move(p));
    }
  } else if (axis == "tap_depth") {
    std::vector<int> vals;
    if (raw.empty()) {
      for (double f : {0.25, 0.5, 0.75, 1.0}) {
        int d = std::max(1, static_cast<int>(std::lround(f * base.model.layers)));
        if (vals.empty() || vals.back() != d) vals.push_back(d);
      }
    } else {
      for (const auto& s : raw) vals.push_back(parse_int(s, "sweep --values"));
    }
    for (int v : vals) {
      sweep_point p{std::to_string(v), base};
      p.cfg.model.tap_depth = v;
      points.push_back(std::move(p));
    }
  } else if (axis == "k_steps") {
    std::vector<int> vals;
    if (raw.empty())
      vals = {2, 4, 8, 16};
    else
      for (const auto& s : raw) vals.push_back(parse_int(s, "sweep --values"));
    for (int v : vals) {
      sweep_point p{std::to_string(v), base};
      p.cfg.k_positions = v;
      points.push_back(std::move(p));
    }
  } else if (axis == "losses") {
    std::vector<std::string> vals = raw;
    if (vals.empty()) vals = {"none", "mim", "mim_step", "mim_view", "star"};
    for (const auto& v : vals) points.push_back(sweep_point{v, apply_loss_preset(base, v)});
  } else {
    throw ConfigError("sweep: unknown axis '" + axis +
                      "' (expected mask_ratio, tap_depth, k_steps or losses)");
  }
  for (auto& p : points) p.cfg.validate();
  return points;
}

int run_sweep(const sweep_opts& o) {
  if (o.out.empty()) throw ConfigError("sweep: --out is required");
  if (o.jobs < 1) throw ConfigError("sweep: jobs must be >= 1");
  TrainConfig base = o.cfgf.resolve();
  auto points = build_sweep_points(o.axis, base, o.values_csv);

  std::vector<std::string> run_dirs;
  for (const auto& p : points) {
    std::string dir = o.out + "/run_" + o.axis + "_" + sanitize_label(p.label);
    if (fs::exists(fs::path(dir) / "manifest.json"))
      throw ArtifactError("sweep: refusing to overwrite existing run " + dir);
    run_dirs.push_back(std::move(dir));
  }

  fs::create_directories(o.out);
  nlohmann::json manifest;
  manifest["v"] = 1;
  manifest["axis"] = o.axis;
  manifest["jobs"] = o.jobs;
  manifest["code_version"] = code_version();
  manifest["base"] = base.to_json();
  manifest["started"] = iso_utc_now();
  {
    std::vector<std::string> labels;
    for (const auto& p : points) labels.push_back(p.label);
    manifest["values"] = labels;
    manifest["runs"] = run_dirs;
  }
  write_text_file(o.out + "/sweep.json", manifest.dump(2) + "\n");

  // bounded parallelism; per-run determinism is unaffected because every run
  // seeds its own streams
  for (std::size_t at = 0; at < points.size(); at += static_cast<std::size_t>(o.jobs)) {
    const std::size_t hi = std::min(points.size(), at + static_cast<std::size_t>(o.jobs));
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(hi - at);
    for (std::size_t i = at; i < hi; ++i) {
      threads.emplace_back([&, i] {
        try {
          run_training(points[i].cfg, run_dirs[i], false);
        } catch (...) {
          errors[i - at] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (std::size_t i = at; i < hi; ++i)
      std::cout << "run " << (i + 1) << "/" << points.size() << " (" << points[i].label << ") -> "
                << run_dirs[i] << "\n";
  }

  std::ostringstream csv;
  csv << "axis,value,run_dir,steps,l_ar,l_mim,l_step,l_view,total,mean_attn_distance,mass_elsewhere,"
         "feature_cosine,token_change_rate\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto row = last_metrics_row(run_dirs[i]);
    auto lm = load_run_model(run_dirs[i], "");
    LocalityProfile prof = collect_locality(lm, o.traces, 32, lm.cfg.data_seed + 8101 + o.eval_seed);
    double dist = 0, elsewhere = 0;
    for (int l = 0; l < prof.layers; ++l) {
      dist += prof.layer_mean_distance(l);
      elsewhere += prof.layer_mass_elsewhere(l);
    }
    dist /= prof.layers;
    elsewhere /= prof.layers;
    InvarianceRecord rec = collect_invariance(lm, o.pairs, lm.cfg.model.tap_depth, o.eval_seed);
    csv << o.axis << "," << points[i].label << "," << run_dirs[i] << ","
        << row.at("step").get<int>() << "," << fmt_double(row.at("l_ar").get<double>()) << ","
        << fmt_double(row.at("l_mim").get<double>()) << ","
        << fmt_double(row.at("l_step").get<double>()) << ","
        << fmt_double(row.at("l_view").get<double>()) << ","
        << fmt_double(row.at("total").get<double>()) << "," << fmt_double(dist) << ","
        << fmt_double(elsewhere) << "," << fmt_double(rec.feature_cosine) << ","
        << fmt_double(rec.token_change_rate) << "\n";
  }
  write_text_file(o.out + "/sweep.csv", csv.str());
  std::cout << "wrote " << o.out << "/sweep.csv (" << points.size() << " rows)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// introspection: --help-json and the docs subcommand
// ---------------------------------------------------------------------------

nlohmann::json option_json(const CLI::Option* opt) {
  nlohmann::json j;
  j["name"] = opt->get_name();
  j["description"] = opt->get_description();
  j["required"] = opt->get_required();
  j["is_flag"] = opt->get_expected_min() == 0;
  const std::string def = opt->get_default_str();
  if (!def.empty()) j["default"] = def;
  return j;
}

nlohmann::json help_json(const CLI::App& app) {
  nlohmann::json root;
  root["name"] = app.get_name();
  root["description"] = app.get_description();
  root["code_version"] = code_version();
  root["options"] = nlohmann::json::array();
  for (const CLI::Option* opt : app.get_options()) root["options"].push_back(option_json(opt));
  root["commands"] = nlohmann::json::array();
  for (const CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
    nlohmann::json cj;
    cj["name"] = sub->get_name();
    cj["description"] = sub->get_description();
    cj["options"] = nlohmann::json::array();
    for (const CLI::Option* opt : sub->get_options()) cj["options"].push_back(option_json(opt));
    root["commands"].push_back(cj);
  }
  return root;
}

std::string docs_markdown(const CLI::App& app) {
  std::ostringstream md;
  md << "# " << app.get_name() << " command reference\n\n" << app.get_description() << "\n";
  for (const CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
    md << "\n## " << app.get_name() << " " << sub->get_name() << "\n\n"
       << sub->get_description() << "\n\n";
    md << "| option | default | description |\n|---|---|---|\n";
    for (const CLI::Option* opt : sub->get_options()) {
      if (opt->get_name() == "--help") continue;
      std::string def = opt->get_default_str();
      if (def.empty()) def = opt->get_required() ? "(required)" : "";
      md << "| `" << opt->get_name() << "` | " << def << " | " << opt->get_description() << " |\n";
    }
  }
  return md.str();
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"self-guided autoregressive image-token training and diagnostics"};
  app.name("star");

  std::optional<int> rc;

  make_data_opts md;
  auto* c_md = app.add_subcommand("make-data", "synthesize a toy dataset, fit the tokenizer, write token files");
  c_md->add_option("--out", md.out, "output directory")->required();
  c_md->add_option("--classes", md.classes, "number of classes")->capture_default_str();
  c_md->add_option("--per-class", md.per_class, "images per class")->capture_default_str();
  c_md->add_option("--vocab", md.vocab, "codebook size")->capture_default_str();
  c_md->add_option("--image-side", md.image_side, "image side in pixels")->capture_default_str();
  c_md->add_option("--patch-side", md.patch_side, "patch side in pixels")->capture_default_str();
  c_md->add_option("--seed", md.seed, "synthesis and tokenizer seed")->capture_default_str();
  c_md->add_option("--iterations", md.iterations, "codebook fitting iterations")->capture_default_str();
  c_md->callback([&] { rc = run_make_data(md); });

  train_opts tr;
  auto* c_tr = app.add_subcommand("train", "train a model and write a run directory");
  c_tr->add_option("--out", tr.out, "run directory")->required();
  c_tr->add_option("--data", tr.data_dir, "prebuilt dataset directory to validate against");
  auto* f_star = c_tr->add_flag("--star", tr.star_mode,
                                "force the full recipe: alpha 1, beta 0.5, tau 0.2, 4 positions, mask 0.25");
  auto* f_base = c_tr->add_flag("--baseline", tr.baseline_mode,
                                "force next-token prediction only: alpha 0, beta 0, mask 0");
  f_star->excludes(f_base);
  f_base->excludes(f_star);
  c_tr->add_flag("--resume", tr.resume, "continue from the newest checkpoint in --out");
  tr.cfgf.attach(c_tr);
  c_tr->callback([&] { rc = run_train(tr); });

  sample_opts sp;
  auto* c_sp = app.add_subcommand("sample", "decode token sequences from a checkpoint");
  c_sp->add_option("--run", sp.run_dir, "run directory (newest checkpoint)");
  c_sp->add_option("--ckpt", sp.ckpt, "explicit checkpoint file");
  c_sp->add_option("--out", sp.out, "output directory (default: RUN/samples)");
  c_sp->add_option("--class", sp.class_id, "condition class id")->capture_default_str();
  c_sp->add_option("--count", sp.count, "sequences to draw")->capture_default_str();
  c_sp->add_option("--cfg-scale", sp.cfg_scale, "guidance scale")->capture_default_str();
  c_sp->add_option("--temperature", sp.temperature, "softmax temperature")->capture_default_str();
  c_sp->add_option("--top-k", sp.top_k, "top-k truncation (0: full vocabulary)")->capture_default_str();
  c_sp->add_option("--seed", sp.seed, "base seed; sample i uses seed + i")->capture_default_str();
  c_sp->add_flag("--png", sp.png, "also write decoded PNG previews");
  c_sp->callback([&] { rc = run_sample(sp); });

  probe_opts pr;
  auto* c_pr = app.add_subcommand("probe", "linear-probe class accuracy per generation step");
  c_pr->add_option("--run", pr.run_dir, "run directory (newest checkpoint)");
  c_pr->add_option("--ckpt", pr.ckpt, "explicit checkpoint file");
  c_pr->add_option("--out", pr.out, "output directory (default: RUN/probe)");
  c_pr->add_option("--steps", pr.steps_csv, "comma-separated 1-based steps (default: 8 evenly spaced)");
  c_pr->add_option("--layer", pr.layer, "1-based layer to read (default: checkpoint tap depth)");
  c_pr->add_option("--epochs", pr.epochs, "probe training epochs")->capture_default_str();
  c_pr->add_option("--per-class", pr.per_class, "probe images per class (default: training per-class)");
  c_pr->add_option("--seed", pr.seed, "split seed")->capture_default_str();
  c_pr->callback([&] { rc = run_probe(pr); });

  attn_opts at;
  auto* c_at = app.add_subcommand("attn", "attention locality profile over evaluation forwards");
  c_at->add_option("--run", at.run_dir, "run directory (newest checkpoint)");
  c_at->add_option("--ckpt", at.ckpt, "explicit checkpoint file");
  c_at->add_option("--out", at.out, "output directory (default: RUN/attn)");
  c_at->add_option("--traces", at.traces, "evaluation sequences to trace")->capture_default_str();
  c_at->add_option("--batch", at.batch, "sequences per forward")->capture_default_str();
  c_at->add_option("--seed", at.seed, "evaluation data seed offset")->capture_default_str();
  c_at->callback([&] { rc = run_attn(at); });

  invariance_opts iv;
  auto* c_iv = app.add_subcommand("invariance", "token and feature stability under augmentation");
  c_iv->add_option("--run", iv.run_dir, "run directory (newest checkpoint)");
  c_iv->add_option("--ckpt", iv.ckpt, "explicit checkpoint file");
  c_iv->add_option("--out", iv.out, "output directory (default: RUN/invariance)");
  c_iv->add_option("--pairs", iv.pairs, "augmented view pairs")->capture_default_str();
  c_iv->add_option("--layer", iv.layer, "1-based layer to read (default: checkpoint tap depth)");
  c_iv->add_option("--seed", iv.seed, "augmentation seed")->capture_default_str();
  c_iv->callback([&] { rc = run_invariance(iv); });

  gradcheck_opts gc;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference check of every loss on a 64-bit micro model");
  c_gc->add_option("--eps", gc.eps, "central-difference step")->capture_default_str();
  c_gc->add_option("--tol-component", gc.tol_component, "relative error bound per loss term")->capture_default_str();
  c_gc->add_option("--tol-total", gc.tol_total, "relative error bound for the combined loss")->capture_default_str();
  c_gc->add_option("--atol", gc.atol, "absolute disagreement treated as matching")->capture_default_str();
  c_gc->add_option("--coords", gc.coords, "coordinates probed per tensor (-1: all)")->capture_default_str();
  c_gc->add_option("--seed", gc.seed, "mask and position seed")->capture_default_str();
  c_gc->callback([&] { rc = run_gradcheck(gc); });

  sweep_opts sw;
  auto* c_sw = app.add_subcommand("sweep", "train one run per value along an ablation axis");
  c_sw->add_option("--axis", sw.axis, "mask_ratio | tap_depth | k_steps | losses")->required();
  c_sw->add_option("--out", sw.out, "sweep directory")->required();
  c_sw->add_option("--values", sw.values_csv, "comma-separated values (default: the standard grid)");
  c_sw->add_option("--jobs", sw.jobs, "runs trained concurrently")->capture_default_str();
  c_sw->add_option("--traces", sw.traces, "evaluation sequences for the summary columns")->capture_default_str();
  c_sw->add_option("--pairs", sw.pairs, "augmented pairs for the summary columns")->capture_default_str();
  c_sw->add_option("--eval-seed", sw.eval_seed, "evaluation seed offset")->capture_default_str();
  sw.cfgf.attach(c_sw);
  c_sw->callback([&] { rc = run_sweep(sw); });

  std::string docs_out;
  auto* c_dc = app.add_subcommand("docs", "print the command reference as markdown");
  c_dc->add_option("--out", docs_out, "write to a file instead of stdout");
  c_dc->callback([&] {
    const std::string md_text = docs_markdown(app);
    if (docs_out.empty())
      std::cout << md_text;
    else
      write_text_file(docs_out, md_text);
    rc = 0;
  });

  app.add_flag_callback(
      "--help-json",
      [&] {
        std::cout << help_json(app).dump(2) << "\n";
        throw CLI::Success{};
      },
      "print the command tree as JSON and exit");

  std::vector<std::string> argv_store;
  argv_store.reserve(args.size() + 1);
  argv_store.push_back("star");
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  argv.reserve(argv_store.size());
  for (const auto& s : argv_store) argv.push_back(s.c_str());

  try {
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e);
      return code == 0 ? 0 : 2;
    }
    if (!rc.has_value()) {
      std::cerr << app.help();
      return 2;
    }
    return *rc;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericsError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace star
