#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "star/checkpoint.hpp"
#include "star/diagnostics.hpp"
#include "star/rng.hpp"
#include "test_util.hpp"

using namespace star;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 2;
  c.width = 16;
  c.heads = 2;
  c.vocab = 12;
  c.seq_len = 9;  // 3x3 grid
  c.classes = 3;
  c.tap_depth = 1;
  return c;
}

// trace with hand-set attention rows; hidden/logits left empty
ForwardTrace<float> synthetic_trace(int n, int h, int t, const std::vector<float>& rows, int layers) {
  ForwardTrace<float> tr;
  std::vector<float> full;
  full.reserve(static_cast<std::size_t>(n) * h * rows.size());
  for (int i = 0; i < n * h; ++i) full.insert(full.end(), rows.begin(), rows.end());
  for (int l = 0; l < layers; ++l) tr.attn.push_back(Tensor<float>::from({n, h, t, t}, full));
  return tr;
}

std::string params_sha(ModelParams<float>& p) {
  std::string bytes;
  p.visit([&](const std::string&, Tensor<float>& t) {
    bytes.append(reinterpret_cast<const char*>(t.values().data()), t.size() * sizeof(float));
  });
  return sha256_hex(bytes.data(), bytes.size());
}

std::vector<TokenSequence> labeled_sequences(const ModelConfig& cfg, int per_class, std::uint64_t seed) {
  // class-dependent token statistics so good features are linearly separable
  std::vector<TokenSequence> out;
  Rng rng(seed);
  for (int c = 0; c < cfg.classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      TokenSequence seq;
      seq.condition = c;
      seq.grid_side = 3;
      for (int k = 0; k < cfg.seq_len; ++k) {
        const int base = (c * 4) % cfg.vocab;
        const int tok = rng.bernoulli(0.8) ? base + static_cast<int>(rng.randint(4))
                                           : static_cast<int>(rng.randint(static_cast<std::uint64_t>(cfg.vocab)));
        seq.tokens.push_back(static_cast<std::uint16_t>(tok));
      }
      out.push_back(seq);
    }
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("star_diag_" + std::to_string(Rng(std::random_device{}()).next_u64()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// elements-only well-formedness scan: every open tag is closed in order
bool well_formed_xml(const std::string& body) {
  std::vector<std::string> stack;
  std::size_t at = 0;
  while ((at = body.find('<', at)) != std::string::npos) {
    const std::size_t end = body.find('>', at);
    if (end == std::string::npos) return false;
    std::string tag = body.substr(at + 1, end - at - 1);
    at = end + 1;
    if (tag.empty()) return false;
    if (tag[0] == '?' || tag[0] == '!') continue;
    const bool closing = tag[0] == '/';
    const bool self_closing = tag.back() == '/';
    if (closing) tag = tag.substr(1);
    if (self_closing) tag.pop_back();
    const std::string name = tag.substr(0, tag.find_first_of(" \t\n"));
    if (closing) {
      if (stack.empty() || stack.back() != name) return false;
      stack.pop_back();
    } else if (!self_closing) {
      stack.push_back(name);
    }
  }
  return stack.empty();
}

}  // namespace

TEST_CASE("locality: all attention on the condition key") {
  const int t = 4;
  std::vector<float> rows(t * t, 0.0f);
  for (int i = 0; i < t; ++i) rows[static_cast<std::size_t>(i) * t] = 1.0f;
  auto tr = synthetic_trace(2, 3, t, rows, 2);
  auto prof = attention_locality({tr}, 2);
  REQUIRE(prof.layers == 2);
  REQUIRE(prof.seq_len == 4);
  for (int l = 0; l < 2; ++l)
    for (int i = 0; i < t; ++i) {
      CHECK(prof.mass_on_condition[l][i] == 1.0);
      CHECK(prof.mass_on_neighbors[l][i] == 0.0);
      CHECK(prof.mass_elsewhere[l][i] == 0.0);
      CHECK(prof.mean_distance[l][i] == 0.0);
    }
}

TEST_CASE("locality: uniform attention matches bucket-size fractions exactly") {
  // 4x4 grid; rows with power-of-two visible counts carry exact weights
  const int t = 16, g = 4;
  std::vector<float> rows(t * t, 0.0f);
  for (int i = 0; i < t; ++i) rows[static_cast<std::size_t>(i) * t] = 1.0f;  // default: all on condition
  auto set_uniform = [&](int i) {
    for (int j = 0; j <= i; ++j) rows[static_cast<std::size_t>(i) * t + j] = 1.0f / static_cast<float>(i + 1);
    for (int j = i + 1; j < t; ++j) rows[static_cast<std::size_t>(i) * t + j] = 0.0f;
  };
  set_uniform(1);
  set_uniform(3);
  set_uniform(7);
  auto prof = attention_locality({synthetic_trace(1, 1, t, rows, 1)}, g);

  // step index 1: cell 1=(0,1); visible cell 0=(0,0) is a neighbor
  CHECK(prof.mass_on_condition[0][1] == 0.5);
  CHECK(prof.mass_on_neighbors[0][1] == 0.5);
  CHECK(prof.mass_elsewhere[0][1] == 0.0);
  CHECK(prof.mean_distance[0][1] == 1.0);

  // step index 3: cell 3=(0,3); visible 0,1,2; only cell 2 within Chebyshev 1
  CHECK(prof.mass_on_condition[0][3] == 0.25);
  CHECK(prof.mass_on_neighbors[0][3] == 0.25);
  CHECK(prof.mass_elsewhere[0][3] == 0.5);

  // step index 7: cell 7=(1,3); visible 0..6; neighbors are cells 2,3,6
  CHECK(prof.mass_on_condition[0][7] == 0.125);
  CHECK(prof.mass_on_neighbors[0][7] == 0.375);
  CHECK(prof.mass_elsewhere[0][7] == 0.5);
  const double expect =
      (std::sqrt(10.0) + std::sqrt(5.0) + std::sqrt(2.0) + 1.0 + 3.0 + 2.0 + 1.0) / 7.0;
  CHECK(prof.mean_distance[0][7] == doctest::Approx(expect).epsilon(1e-12));

  // masses partition each row
  for (int i = 0; i < t; ++i)
    CHECK(prof.mass_on_condition[0][i] + prof.mass_on_neighbors[0][i] + prof.mass_elsewhere[0][i] ==
          doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("locality on real traces: partition property and loop oracle") {
  auto cfg = tiny_config();
  auto params = init_params<float>(cfg, 11);
  Rng rng(3);
  std::vector<ForwardTrace<float>> traces;
  NoGradScope<float> ng;
  for (int b = 0; b < 2; ++b) {
    std::vector<int> conds, toks;
    for (int i = 0; i < 3; ++i) {
      conds.push_back(static_cast<int>(rng.randint(static_cast<std::uint64_t>(cfg.classes))));
      for (int k = 0; k < cfg.seq_len; ++k)
        toks.push_back(static_cast<int>(rng.randint(static_cast<std::uint64_t>(cfg.vocab))));
    }
    traces.push_back(forward(params, conds, toks, {}, TraceLevel::full));
  }
  auto prof = attention_locality(traces, 3);

  for (int l = 0; l < cfg.layers; ++l)
    for (int i = 0; i < cfg.seq_len; ++i)
      CHECK(prof.mass_on_condition[l][i] + prof.mass_on_neighbors[l][i] + prof.mass_elsewhere[l][i] ==
            doctest::Approx(1.0).epsilon(1e-6));

  // brute-force re-aggregation of one (layer, step)
  const int L = 1, S = 5, g = 3, t = cfg.seq_len;
  double cond = 0, neigh = 0, rest = 0, dsum = 0;
  int rows = 0;
  for (const auto& tr : traces) {
    const auto& a = tr.attn[L];
    const int n = a.shape()[0], h = a.shape()[1];
    for (int b = 0; b < n; ++b)
      for (int hd = 0; hd < h; ++hd) {
        const float* row = a.values().data() + (((static_cast<std::size_t>(b) * h + hd) * t) + S) * t;
        cond += row[0];
        double dn = 0, dd = 0;
        for (int j = 1; j < t; ++j) {
          const int cell = j - 1;
          const int cheb = std::max(std::abs(S / g - cell / g), std::abs(S % g - cell % g));
          if (j <= S && cheb <= 1)
            neigh += row[j];
          else
            rest += row[j];
          if (j <= S) {
            const double dr = S / g - cell / g, dc = S % g - cell % g;
            dn += row[j] * std::sqrt(dr * dr + dc * dc);
            dd += row[j];
          }
        }
        dsum += dn / dd;
        ++rows;
      }
  }
  CHECK(prof.mass_on_condition[L][S] == doctest::Approx(cond / rows).epsilon(1e-6));
  CHECK(prof.mass_on_neighbors[L][S] == doctest::Approx(neigh / rows).epsilon(1e-6));
  CHECK(prof.mass_elsewhere[L][S] == doctest::Approx(rest / rows).epsilon(1e-6));
  CHECK(prof.mean_distance[L][S] == doctest::Approx(dsum / rows).epsilon(1e-6));

  CHECK(prof.layer_mean_distance(L) > 0.0);
  CHECK(prof.layer_mass_elsewhere(L) > 0.0);
}

TEST_CASE("locality input validation") {
  auto cfg = tiny_config();
  auto params = init_params<float>(cfg, 11);
  NoGradScope<float> ng;
  std::vector<int> toks(static_cast<std::size_t>(cfg.seq_len), 0);
  auto shallow = forward(params, {0}, toks, {}, TraceLevel::logits_only);
  CHECK_THROWS_AS(attention_locality({shallow}, 3), ConfigError);
  CHECK_THROWS_AS(attention_locality({}, 3), ConfigError);
  auto full = forward(params, {0}, toks, {}, TraceLevel::full);
  CHECK_THROWS_AS(attention_locality({full}, 2), ConfigError);
}

TEST_CASE("linear probe: separable one-hot features reach accuracy 1") {
  const int classes = 5;
  std::vector<std::vector<float>> train_x, test_x;
  std::vector<int> train_y, test_y;
  Rng rng(9);
  auto one_hot = [&](int c) {
    std::vector<float> v(classes, 0.0f);
    v[static_cast<std::size_t>(c)] = 1.0f;
    return v;
  };
  for (int i = 0; i < 200; ++i) {
    const int c = static_cast<int>(rng.randint(classes));
    train_x.push_back(one_hot(c));
    train_y.push_back(c);
  }
  for (int i = 0; i < 50; ++i) {
    const int c = static_cast<int>(rng.randint(classes));
    test_x.push_back(one_hot(c));
    test_y.push_back(c);
  }
  CHECK(linear_probe_accuracy(train_x, train_y, test_x, test_y, classes, 90) == 1.0);
}

TEST_CASE("linear probe: uninformative features score at chance") {
  const int classes = 5, ntest = 500;
  std::vector<std::vector<float>> train_x, test_x;
  std::vector<int> train_y, test_y;
  Rng rng(21);
  for (int i = 0; i < 1000; ++i) {
    train_x.push_back({static_cast<float>(rng.normal()), static_cast<float>(rng.normal()),
                       static_cast<float>(rng.normal()), static_cast<float>(rng.normal())});
    train_y.push_back(static_cast<int>(rng.randint(classes)));
  }
  for (int i = 0; i < ntest; ++i) {
    test_x.push_back({static_cast<float>(rng.normal()), static_cast<float>(rng.normal()),
                      static_cast<float>(rng.normal()), static_cast<float>(rng.normal())});
    test_y.push_back(static_cast<int>(rng.randint(classes)));
  }
  const double acc = linear_probe_accuracy(train_x, train_y, test_x, test_y, classes, 90);
  const double p = 1.0 / classes;
  const double sigma = std::sqrt(p * (1 - p) / ntest);
  CHECK(std::abs(acc - p) <= 3 * sigma + 0.02);
}

TEST_CASE("linear probe input validation") {
  std::vector<std::vector<float>> x = {{1.0f, 0.0f}};
  std::vector<int> y = {0};
  CHECK_THROWS_AS(linear_probe_accuracy({}, {}, x, y, 2, 10), ConfigError);
  CHECK_THROWS_AS(linear_probe_accuracy(x, y, {}, {}, 2, 10), ConfigError);
  CHECK_THROWS_AS(linear_probe_accuracy(x, {0, 1}, x, y, 2, 10), ConfigError);
  CHECK_THROWS_AS(linear_probe_accuracy(x, {5}, x, y, 2, 10), ConfigError);
  CHECK_THROWS_AS(linear_probe_accuracy(x, y, x, y, 1, 10), ConfigError);
  std::vector<std::vector<float>> ragged = {{1.0f, 0.0f}, {1.0f}};
  CHECK_THROWS_AS(linear_probe_accuracy(ragged, {0, 1}, x, y, 2, 10), ConfigError);
}

TEST_CASE("probe_per_step: contract, determinism, and leakage guard") {
  auto cfg = tiny_config();
  auto params = init_params<float>(cfg, 33);
  auto data = labeled_sequences(cfg, 50, 5);
  const std::vector<int> steps = {3, 6, 9};

  const auto sha_before = params_sha(params);
  auto rep = probe_per_step(params, data, steps, cfg.tap_depth, 30, 12);
  CHECK(params_sha(params) == sha_before);  // read-only pass

  REQUIRE(rep.steps == steps);
  CHECK(rep.layer == cfg.tap_depth);
  CHECK(rep.epochs == 30);
  REQUIRE(rep.accuracies.size() == steps.size());
  for (double a : rep.accuracies) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
  auto rep2 = probe_per_step(params, data, steps, cfg.tap_depth, 30, 12);
  CHECK(rep.accuracies == rep2.accuracies);

  std::printf("[measure] random-init true-label probe accuracies: %.3f %.3f %.3f\n",
              rep.accuracies[0], rep.accuracies[1], rep.accuracies[2]);

  // permuting the labels breaks any feature-label relationship: accuracy
  // must drop to chance, proving labels cannot leak through the pipeline
  auto permuted = data;
  Rng rng(40);
  auto order = rng.sample_without_replacement(static_cast<int>(data.size()), static_cast<int>(data.size()));
  for (std::size_t i = 0; i < permuted.size(); ++i)
    permuted[i].condition = data[static_cast<std::size_t>(order[i])].condition;
  auto chance = probe_per_step(params, permuted, steps, cfg.tap_depth, 30, 12);
  const double p = 1.0 / cfg.classes;
  const int ntest = static_cast<int>(data.size()) - (static_cast<int>(data.size()) * 4) / 5;
  const double sigma = std::sqrt(p * (1 - p) / ntest);
  for (double a : chance.accuracies) {
    std::printf("[measure] permuted-label probe accuracy: %.3f (chance %.3f, 3sigma %.3f)\n", a, p,
                3 * sigma);
    CHECK(std::abs(a - p) <= 3 * sigma + 1e-9);
  }
}

TEST_CASE("probe_per_step input validation") {
  auto cfg = tiny_config();
  auto params = init_params<float>(cfg, 33);
  auto data = labeled_sequences(cfg, 4, 5);
  CHECK_THROWS_AS(probe_per_step(params, {}, {1}, 1, 10, 0), ConfigError);
  CHECK_THROWS_AS(probe_per_step(params, data, {}, 1, 10, 0), ConfigError);
  CHECK_THROWS_AS(probe_per_step(params, data, {0}, 1, 10, 0), ConfigError);
  CHECK_THROWS_AS(probe_per_step(params, data, {cfg.seq_len + 1}, 1, 10, 0), ConfigError);
  CHECK_THROWS_AS(probe_per_step(params, data, {1}, 0, 10, 0), ConfigError);
  CHECK_THROWS_AS(probe_per_step(params, data, {1}, cfg.layers + 1, 10, 0), ConfigError);
  CHECK_THROWS_AS(probe_per_step(params, data, {1}, 1, 0, 0), ConfigError);
  auto bad = data;
  bad[0].condition = cfg.classes;
  CHECK_THROWS_AS(probe_per_step(params, bad, {1}, 1, 10, 0), ConfigError);
  std::vector<TokenSequence> two(data.begin(), data.begin() + 1);
  CHECK_THROWS_AS(probe_per_step(params, two, {1}, 1, 10, 0), ConfigError);
}

TEST_CASE("view invariance: identical views and independent tokens") {
  auto cfg = tiny_config();
  auto params = init_params<float>(cfg, 55);
  auto data = labeled_sequences(cfg, 4, 6);

  std::vector<std::pair<TokenSequence, TokenSequence>> same;
  for (const auto& seq : data) same.emplace_back(seq, seq);
  auto rec = view_invariance(params, same, cfg.tap_depth);
  CHECK(rec.pairs == static_cast<int>(same.size()));
  CHECK(rec.token_change_rate == 0.0);
  CHECK(rec.feature_cosine == doctest::Approx(1.0).epsilon(1e-6));

  // independent uniform tokens: expected change rate 1 - 1/V
  Rng rng(8);
  std::vector<std::pair<TokenSequence, TokenSequence>> indep;
  for (int i = 0; i < 500; ++i) {
    TokenSequence a, b;
    a.condition = b.condition = static_cast<int>(rng.randint(static_cast<std::uint64_t>(cfg.classes)));
    a.grid_side = b.grid_side = 3;
    for (int k = 0; k < cfg.seq_len; ++k) {
      a.tokens.push_back(static_cast<std::uint16_t>(rng.randint(static_cast<std::uint64_t>(cfg.vocab))));
      b.tokens.push_back(static_cast<std::uint16_t>(rng.randint(static_cast<std::uint64_t>(cfg.vocab))));
    }
    indep.emplace_back(std::move(a), std::move(b));
  }
  auto rec2 = view_invariance(params, indep, cfg.tap_depth);
  const double expect = 1.0 - 1.0 / cfg.vocab;
  CHECK(std::abs(rec2.token_change_rate - expect) < 0.02);
  CHECK(rec2.feature_cosine >= -1.0);
  CHECK(rec2.feature_cosine <= 1.0);

  auto empty = view_invariance(params, std::vector<std::pair<TokenSequence, TokenSequence>>{}, 1);
  CHECK(empty.pairs == 0);
  CHECK(empty.token_change_rate == 0.0);
  CHECK_THROWS_AS(view_invariance(params, same, 0), ConfigError);
  CHECK_THROWS_AS(view_invariance(params, same, cfg.layers + 1), ConfigError);
}

TEST_CASE("view invariance on augmented image pairs") {
  auto cfg = tiny_config();
  auto params = init_params<float>(cfg, 55);
  auto images = synth_dataset(cfg.classes, 6, 24, 77);
  auto codebook = build_codebook(images, cfg.vocab, 8, 77);
  std::vector<AugmentedPair> pairs;
  for (std::size_t i = 0; i < images.size(); ++i) {
    AugmentedPair pr;
    pr.source_id = images[i].sample_id;
    pr.views.push_back(augment(images[i], 1000 + 2 * static_cast<std::uint64_t>(i)));
    pr.views.push_back(augment(images[i], 1001 + 2 * static_cast<std::uint64_t>(i)));
    pairs.push_back(std::move(pr));
  }
  auto rec = view_invariance(params, codebook, 8, pairs, cfg.tap_depth);
  CHECK(rec.pairs == static_cast<int>(pairs.size()));
  std::printf("[measure] toy tokenizer change rate on augmented pairs: %.3f\n", rec.token_change_rate);
  CHECK(rec.token_change_rate > 0.0);  // tokens are not augmentation invariant
  CHECK(rec.token_change_rate <= 1.0);
  CHECK(rec.feature_cosine <= 1.0);

  AugmentedPair lone;
  lone.views.push_back(images[0]);
  CHECK_THROWS_AS(view_invariance(params, codebook, 8, {lone}, 1), ConfigError);
}

TEST_CASE("render_report: files, round trip, stability") {
  auto cfg = tiny_config();
  auto params = init_params<float>(cfg, 11);
  NoGradScope<float> ng;
  Rng rng(3);
  std::vector<int> conds, toks;
  for (int i = 0; i < 4; ++i) {
    conds.push_back(static_cast<int>(rng.randint(static_cast<std::uint64_t>(cfg.classes))));
    for (int k = 0; k < cfg.seq_len; ++k)
      toks.push_back(static_cast<int>(rng.randint(static_cast<std::uint64_t>(cfg.vocab))));
  }
  auto prof = attention_locality({forward(params, conds, toks, {}, TraceLevel::full)}, 3);
  ProbeReport rep;
  rep.steps = {3, 6, 9};
  rep.accuracies = {0.25, 1.0 / 3.0, 0.5};
  rep.layer = 1;
  rep.epochs = 90;
  InvarianceRecord rec;
  rec.token_change_rate = 0.625;
  rec.feature_cosine = std::sqrt(0.5);
  rec.pairs = 16;

  TempDir tmp;
  const auto out = tmp.path / "report";
  render_report({{"star", prof}}, {{"star", rep}}, {{"star", rec}}, out);

  for (const char* f : {"locality.csv", "probe.csv", "invariance.csv", "locality_star_layer1.svg",
                        "locality_star_layer2.svg", "probe_star.svg"})
    CHECK(fs::exists(out / f));
  CHECK(well_formed_xml(slurp(out / "locality_star_layer1.svg")));
  CHECK(well_formed_xml(slurp(out / "probe_star.svg")));

  // CSV round trip is exact
  {
    std::ifstream f(out / "locality.csv");
    std::string line;
    std::getline(f, line);
    CHECK(line == "name,layer,step,mass_on_condition,mass_on_neighbors,mass_elsewhere,mean_distance");
    int rows = 0;
    while (std::getline(f, line)) {
      std::istringstream ss(line);
      std::string name, field;
      std::getline(ss, name, ',');
      CHECK(name == "star");
      std::getline(ss, field, ',');
      const int layer = std::stoi(field) - 1;
      std::getline(ss, field, ',');
      const int step = std::stoi(field) - 1;
      std::getline(ss, field, ',');
      CHECK(std::strtod(field.c_str(), nullptr) == prof.mass_on_condition[layer][step]);
      std::getline(ss, field, ',');
      CHECK(std::strtod(field.c_str(), nullptr) == prof.mass_on_neighbors[layer][step]);
      std::getline(ss, field, ',');
      CHECK(std::strtod(field.c_str(), nullptr) == prof.mass_elsewhere[layer][step]);
      std::getline(ss, field, ',');
      CHECK(std::strtod(field.c_str(), nullptr) == prof.mean_distance[layer][step]);
      ++rows;
    }
    CHECK(rows == prof.layers * prof.seq_len);
  }
  {
    std::ifstream f(out / "invariance.csv");
    std::string line;
    std::getline(f, line);
    std::getline(f, line);
    std::istringstream ss(line);
    std::string name, field;
    std::getline(ss, name, ',');
    std::getline(ss, field, ',');
    CHECK(std::stoi(field) == rec.pairs);
    std::getline(ss, field, ',');
    CHECK(std::strtod(field.c_str(), nullptr) == rec.token_change_rate);
    std::getline(ss, field, ',');
    CHECK(std::strtod(field.c_str(), nullptr) == rec.feature_cosine);
  }

  // byte-stable across repeated renders
  const auto out2 = tmp.path / "report2";
  render_report({{"star", prof}}, {{"star", rep}}, {{"star", rec}}, out2);
  for (const char* f : {"locality.csv", "probe.csv", "invariance.csv", "locality_star_layer1.svg",
                        "probe_star.svg"})
    CHECK(slurp(out / f) == slurp(out2 / f));

  // empty inputs produce headers only
  const auto out3 = tmp.path / "report3";
  render_report({}, {}, {}, out3);
  CHECK(slurp(out3 / "locality.csv") ==
        "name,layer,step,mass_on_condition,mass_on_neighbors,mass_elsewhere,mean_distance\n");
  CHECK(slurp(out3 / "probe.csv") == "name,step,layer,epochs,accuracy\n");
  CHECK(slurp(out3 / "invariance.csv") == "name,pairs,token_change_rate,feature_cosine\n");

  // unwritable target
  const auto blocker = tmp.path / "blocker";
  std::ofstream(blocker) << "x";
  CHECK_THROWS_AS(render_report({}, {}, {}, blocker / "sub"), ArtifactError);
}
