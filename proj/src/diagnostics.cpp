#include "star/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "star/rng.hpp"

namespace star {

namespace {

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::string sanitize_name(const std::string& name) {
  std::string out = name;
  for (auto& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  return out;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (c == '&')
      out += "&amp;";
    else if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else
      out += c;
  }
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << body;
  f.flush();
  if (!f.good()) throw ArtifactError("render_report: cannot write " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------
// attention locality
// ---------------------------------------------------------------------------

double LocalityProfile::layer_mean_distance(int layer) const {
  const auto& row = mean_distance.at(static_cast<std::size_t>(layer));
  double s = 0.0;
  int n = 0;
  for (int i = 1; i < seq_len; ++i) {
    s += row[static_cast<std::size_t>(i)];
    ++n;
  }
  return n > 0 ? s / n : 0.0;
}

double LocalityProfile::layer_mass_elsewhere(int layer) const {
  const auto& row = mass_elsewhere.at(static_cast<std::size_t>(layer));
  double s = 0.0;
  for (double v : row) s += v;
  return row.empty() ? 0.0 : s / static_cast<double>(row.size());
}

LocalityProfile attention_locality(const std::vector<ForwardTrace<float>>& traces, int grid_side) {
  if (traces.empty()) throw ConfigError("attention_locality: no traces");
  if (traces.front().attn.empty())
    throw ConfigError("attention_locality: traces must come from TraceLevel::full forwards");
  const int layers = static_cast<int>(traces.front().attn.size());
  const int t = traces.front().attn.front().shape()[2];
  if (grid_side * grid_side != t)
    throw ConfigError("attention_locality: grid_side^2 = " + std::to_string(grid_side * grid_side) +
                      " does not match seq_len " + std::to_string(t));

  LocalityProfile prof;
  prof.layers = layers;
  prof.seq_len = t;
  prof.grid_side = grid_side;
  auto table = [&] { return std::vector<std::vector<double>>(static_cast<std::size_t>(layers), std::vector<double>(static_cast<std::size_t>(t), 0.0)); };
  prof.mass_on_condition = table();
  prof.mass_on_neighbors = table();
  prof.mass_elsewhere = table();
  prof.mean_distance = table();
  auto dist_count = table();

  std::uint64_t rows_seen = 0;
  for (const auto& tr : traces) {
    if (static_cast<int>(tr.attn.size()) != layers)
      throw ConfigError("attention_locality: traces disagree on layer count");
    const auto& s0 = tr.attn.front().shape();
    const int n = s0[0], h = s0[1];
    if (s0[2] != t || s0[3] != t) throw ConfigError("attention_locality: traces disagree on seq_len");
    rows_seen += static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(h);
    for (int l = 0; l < layers; ++l) {
      const float* w = tr.attn[static_cast<std::size_t>(l)].values().data();
      for (int b = 0; b < n; ++b) {
        for (int hd = 0; hd < h; ++hd) {
          const float* base = w + ((static_cast<std::size_t>(b) * h + hd) * t) * t;
          for (int i = 0; i < t; ++i) {
            const float* row = base + static_cast<std::size_t>(i) * t;
            const int qr = i / grid_side, qc = i % grid_side;
            double cond = row[0], neigh = 0.0, rest = 0.0;
            double dnum = 0.0, dden = 0.0;
            for (int j = 1; j < t; ++j) {
              const int cell = j - 1;
              const int kr = cell / grid_side, kc = cell % grid_side;
              const int cheb = std::max(std::abs(qr - kr), std::abs(qc - kc));
              const double wj = row[j];
              if (j <= i && cheb <= 1)
                neigh += wj;
              else
                rest += wj;
              if (j <= i) {
                const double dr = qr - kr, dc = qc - kc;
                dnum += wj * std::sqrt(dr * dr + dc * dc);
                dden += wj;
              }
            }
            auto li = static_cast<std::size_t>(l);
            auto si = static_cast<std::size_t>(i);
            prof.mass_on_condition[li][si] += cond;
            prof.mass_on_neighbors[li][si] += neigh;
            prof.mass_elsewhere[li][si] += rest;
            if (dden > 0.0) {
              prof.mean_distance[li][si] += dnum / dden;
              dist_count[li][si] += 1.0;
            }
          }
        }
      }
    }
  }

  const double denom = static_cast<double>(rows_seen);
  for (int l = 0; l < layers; ++l) {
    for (int i = 0; i < t; ++i) {
      auto li = static_cast<std::size_t>(l);
      auto si = static_cast<std::size_t>(i);
      prof.mass_on_condition[li][si] /= denom;
      prof.mass_on_neighbors[li][si] /= denom;
      prof.mass_elsewhere[li][si] /= denom;
      prof.mean_distance[li][si] =
          dist_count[li][si] > 0.0 ? prof.mean_distance[li][si] / dist_count[li][si] : 0.0;
    }
  }
  return prof;
}

// ---------------------------------------------------------------------------
// linear probing
// ---------------------------------------------------------------------------

double linear_probe_accuracy(const std::vector<std::vector<float>>& train_x,
                             const std::vector<int>& train_y,
                             const std::vector<std::vector<float>>& test_x,
                             const std::vector<int>& test_y, int classes, int epochs) {
  if (train_x.empty() || test_x.empty()) throw ConfigError("linear_probe_accuracy: empty split");
  if (train_x.size() != train_y.size() || test_x.size() != test_y.size())
    throw ConfigError("linear_probe_accuracy: feature/label count mismatch");
  if (classes < 2) throw ConfigError("linear_probe_accuracy: need at least 2 classes");
  const int d = static_cast<int>(train_x.front().size());
  const int n = static_cast<int>(train_x.size());
  if (d < 1) throw ConfigError("linear_probe_accuracy: empty feature vectors");
  for (const auto& xs : {&train_x, &test_x})
    for (const auto& x : *xs)
      if (static_cast<int>(x.size()) != d) throw ConfigError("linear_probe_accuracy: ragged features");
  for (int y : train_y)
    if (y < 0 || y >= classes) throw ConfigError("linear_probe_accuracy: label out of range");
  for (int y : test_y)
    if (y < 0 || y >= classes) throw ConfigError("linear_probe_accuracy: label out of range");

  // standardize with train statistics so the fixed learning rate is well
  // conditioned regardless of the tapped layer's scale
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0), inv_std(static_cast<std::size_t>(d), 0.0);
  for (const auto& x : train_x)
    for (int k = 0; k < d; ++k) mean[static_cast<std::size_t>(k)] += x[static_cast<std::size_t>(k)];
  for (auto& m : mean) m /= n;
  for (const auto& x : train_x)
    for (int k = 0; k < d; ++k) {
      const double c = x[static_cast<std::size_t>(k)] - mean[static_cast<std::size_t>(k)];
      inv_std[static_cast<std::size_t>(k)] += c * c;
    }
  for (auto& v : inv_std) v = 1.0 / std::max(std::sqrt(v / n), 1e-6);

  auto standardized = [&](const std::vector<std::vector<float>>& xs) {
    std::vector<double> out(xs.size() * static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < xs.size(); ++i)
      for (int k = 0; k < d; ++k)
        out[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)] =
            (xs[i][static_cast<std::size_t>(k)] - mean[static_cast<std::size_t>(k)]) * inv_std[static_cast<std::size_t>(k)];
    return out;
  };
  const auto xtr = standardized(train_x);
  const auto xte = standardized(test_x);

  const double lr = 0.5, l2 = 1e-4;
  std::vector<double> w(static_cast<std::size_t>(d) * classes, 0.0), bias(static_cast<std::size_t>(classes), 0.0);
  std::vector<double> grad_w(w.size()), grad_b(bias.size()), probs(static_cast<std::size_t>(classes));
  for (int e = 0; e < epochs; ++e) {
    std::fill(grad_w.begin(), grad_w.end(), 0.0);
    std::fill(grad_b.begin(), grad_b.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const double* x = xtr.data() + static_cast<std::size_t>(i) * d;
      double mx = -1e300;
      for (int c = 0; c < classes; ++c) {
        double s = bias[static_cast<std::size_t>(c)];
        for (int k = 0; k < d; ++k) s += x[k] * w[static_cast<std::size_t>(k) * classes + c];
        probs[static_cast<std::size_t>(c)] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (auto& p : probs) {
        p = std::exp(p - mx);
        z += p;
      }
      for (int c = 0; c < classes; ++c) {
        const double g = probs[static_cast<std::size_t>(c)] / z - (c == train_y[static_cast<std::size_t>(i)] ? 1.0 : 0.0);
        grad_b[static_cast<std::size_t>(c)] += g;
        for (int k = 0; k < d; ++k) grad_w[static_cast<std::size_t>(k) * classes + c] += g * x[k];
      }
    }
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * (grad_w[k] / n + l2 * w[k]);
    for (std::size_t c = 0; c < bias.size(); ++c) bias[c] -= lr * grad_b[c] / n;
  }

  int hits = 0;
  for (std::size_t i = 0; i < test_x.size(); ++i) {
    const double* x = xte.data() + i * static_cast<std::size_t>(d);
    int best = 0;
    double best_s = -1e300;
    for (int c = 0; c < classes; ++c) {
      double s = bias[static_cast<std::size_t>(c)];
      for (int k = 0; k < d; ++k) s += x[k] * w[static_cast<std::size_t>(k) * classes + c];
      if (s > best_s) {
        best_s = s;
        best = c;
      }
    }
    hits += best == test_y[i];
  }
  return static_cast<double>(hits) / static_cast<double>(test_x.size());
}

ProbeReport probe_per_step(const ModelParams<float>& params, const std::vector<TokenSequence>& dataset,
                           const std::vector<int>& steps, int layer, int epochs, std::uint64_t seed) {
  const auto& cfg = params.config;
  if (dataset.empty()) throw ConfigError("probe_per_step: empty dataset");
  if (steps.empty()) throw ConfigError("probe_per_step: no steps selected");
  for (int s : steps)
    if (s < 1 || s > cfg.seq_len)
      throw ConfigError("probe_per_step: step " + std::to_string(s) + " outside [1, " +
                        std::to_string(cfg.seq_len) + "]");
  if (layer < 1 || layer > cfg.layers) throw ConfigError("probe_per_step: layer out of range");
  if (epochs < 1) throw ConfigError("probe_per_step: epochs must be positive");
  for (const auto& seq : dataset)
    if (seq.condition < 0 || seq.condition >= cfg.classes)
      throw ConfigError("probe_per_step: label " + std::to_string(seq.condition) + " outside [0, " +
                        std::to_string(cfg.classes) + ")");

  // features[s][i]: layer hidden row steps[s]-1 of sequence i, extracted with
  // the null condition id
  const int nsteps = static_cast<int>(steps.size());
  const int nseq = static_cast<int>(dataset.size());
  std::vector<std::vector<std::vector<float>>> features(
      static_cast<std::size_t>(nsteps), std::vector<std::vector<float>>(static_cast<std::size_t>(nseq)));
  const int chunk = 32;
  NoGradScope<float> no_grad;
  for (int at = 0; at < nseq; at += chunk) {
    const int m = std::min(chunk, nseq - at);
    std::vector<int> conditions(static_cast<std::size_t>(m), cfg.classes);
    std::vector<int> tokens;
    tokens.reserve(static_cast<std::size_t>(m) * cfg.seq_len);
    for (int i = 0; i < m; ++i) {
      const auto& seq = dataset[static_cast<std::size_t>(at + i)];
      if (static_cast<int>(seq.tokens.size()) != cfg.seq_len)
        throw ConfigError("probe_per_step: sequence length mismatch");
      for (auto tok : seq.tokens) tokens.push_back(static_cast<int>(tok));
    }
    auto trace = forward(params, conditions, tokens, {}, TraceLevel::full);
    const auto& hid = trace.hidden[static_cast<std::size_t>(layer - 1)];
    const float* hv = hid.values().data();
    for (int s = 0; s < nsteps; ++s) {
      const int row = steps[static_cast<std::size_t>(s)] - 1;
      for (int i = 0; i < m; ++i) {
        const float* src = hv + (static_cast<std::size_t>(i) * cfg.seq_len + row) * cfg.width;
        features[static_cast<std::size_t>(s)][static_cast<std::size_t>(at + i)].assign(src, src + cfg.width);
      }
    }
  }

  // 80/20 split by seeded shuffle, shared across steps
  Rng rng(stream_seed(seed, "probe_split"));
  auto order = rng.sample_without_replacement(nseq, nseq);
  const int ntrain = (nseq * 4) / 5;
  if (ntrain < 1 || nseq - ntrain < 1) throw ConfigError("probe_per_step: dataset too small to split");

  ProbeReport report;
  report.steps = steps;
  report.layer = layer;
  report.epochs = epochs;
  report.accuracies.assign(static_cast<std::size_t>(nsteps), 0.0);

  auto run_step = [&](int s) {
    std::vector<std::vector<float>> train_x, test_x;
    std::vector<int> train_y, test_y;
    for (int i = 0; i < nseq; ++i) {
      const int idx = order[static_cast<std::size_t>(i)];
      auto& fx = features[static_cast<std::size_t>(s)][static_cast<std::size_t>(idx)];
      const int label = dataset[static_cast<std::size_t>(idx)].condition;
      if (i < ntrain) {
        train_x.push_back(fx);
        train_y.push_back(label);
      } else {
        test_x.push_back(fx);
        test_y.push_back(label);
      }
    }
    report.accuracies[static_cast<std::size_t>(s)] =
        linear_probe_accuracy(train_x, train_y, test_x, test_y, cfg.classes, epochs);
  };

  // probes are independent per step; run them concurrently and merge by index
  for (int at = 0; at < nsteps; at += 8) {
    std::vector<std::thread> pool;
    for (int s = at; s < std::min(at + 8, nsteps); ++s) pool.emplace_back(run_step, s);
    for (auto& th : pool) th.join();
  }
  return report;
}

// ---------------------------------------------------------------------------
// view invariance
// ---------------------------------------------------------------------------

InvarianceRecord view_invariance(const ModelParams<float>& params,
                                 const std::vector<std::pair<TokenSequence, TokenSequence>>& pairs,
                                 int layer) {
  const auto& cfg = params.config;
  if (layer < 1 || layer > cfg.layers) throw ConfigError("view_invariance: layer out of range");
  InvarianceRecord rec;
  rec.pairs = static_cast<int>(pairs.size());
  if (pairs.empty()) return rec;

  double rate_sum = 0.0, cos_sum = 0.0;
  std::uint64_t cos_rows = 0;
  NoGradScope<float> no_grad;
  const int chunk = 16;
  for (int at = 0; at < rec.pairs; at += chunk) {
    const int m = std::min(chunk, rec.pairs - at);
    std::vector<int> conditions;
    std::vector<int> tokens;
    for (int i = 0; i < m; ++i) {
      const auto& [a, b] = pairs[static_cast<std::size_t>(at + i)];
      rate_sum += token_invariance(a, b);
      for (const auto* seq : {&a, &b}) {
        if (static_cast<int>(seq->tokens.size()) != cfg.seq_len)
          throw ConfigError("view_invariance: sequence length mismatch");
        conditions.push_back(seq->condition);
        for (auto tok : seq->tokens) tokens.push_back(static_cast<int>(tok));
      }
    }
    auto trace = forward(params, conditions, tokens, {}, TraceLevel::full);
    const auto& hid = trace.hidden[static_cast<std::size_t>(layer - 1)];
    const float* hv = hid.values().data();
    const int t = cfg.seq_len, d = cfg.width;
    for (int i = 0; i < m; ++i) {
      const float* ha = hv + (static_cast<std::size_t>(2 * i) * t) * d;
      const float* hb = hv + (static_cast<std::size_t>(2 * i + 1) * t) * d;
      // row 0 sees only the condition and is identical across views; compare
      // the token rows
      for (int r = 1; r < t; ++r) {
        const float* xa = ha + static_cast<std::size_t>(r) * d;
        const float* xb = hb + static_cast<std::size_t>(r) * d;
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int k = 0; k < d; ++k) {
          dot += static_cast<double>(xa[k]) * xb[k];
          na += static_cast<double>(xa[k]) * xa[k];
          nb += static_cast<double>(xb[k]) * xb[k];
        }
        const double den = std::sqrt(na) * std::sqrt(nb);
        cos_sum += den > 0.0 ? dot / den : 0.0;
        ++cos_rows;
      }
    }
  }
  rec.token_change_rate = rate_sum / rec.pairs;
  rec.feature_cosine = cos_rows > 0 ? cos_sum / static_cast<double>(cos_rows) : 0.0;
  return rec;
}

InvarianceRecord view_invariance(const ModelParams<float>& params, const Codebook& codebook,
                                 int patch_side, const std::vector<AugmentedPair>& pairs, int layer) {
  std::vector<std::pair<TokenSequence, TokenSequence>> quantized;
  quantized.reserve(pairs.size());
  for (const auto& pr : pairs) {
    if (pr.views.size() < 2) throw ConfigError("view_invariance: pairs need at least 2 views");
    quantized.emplace_back(quantize(pr.views[0], codebook, patch_side),
                           quantize(pr.views[1], codebook, patch_side));
  }
  return view_invariance(params, quantized, layer);
}

// ---------------------------------------------------------------------------
// report rendering
// ---------------------------------------------------------------------------

namespace {

std::string locality_csv(const std::vector<std::pair<std::string, LocalityProfile>>& profiles) {
  std::ostringstream os;
  os << "name,layer,step,mass_on_condition,mass_on_neighbors,mass_elsewhere,mean_distance\n";
  for (const auto& [name, p] : profiles)
    for (int l = 0; l < p.layers; ++l)
      for (int i = 0; i < p.seq_len; ++i) {
        auto li = static_cast<std::size_t>(l);
        auto si = static_cast<std::size_t>(i);
        os << name << ',' << l + 1 << ',' << i + 1 << ',' << fmt_double(p.mass_on_condition[li][si])
           << ',' << fmt_double(p.mass_on_neighbors[li][si]) << ','
           << fmt_double(p.mass_elsewhere[li][si]) << ',' << fmt_double(p.mean_distance[li][si])
           << '\n';
      }
  return os.str();
}

std::string probe_csv(const std::vector<std::pair<std::string, ProbeReport>>& probes) {
  std::ostringstream os;
  os << "name,step,layer,epochs,accuracy\n";
  for (const auto& [name, r] : probes)
    for (std::size_t s = 0; s < r.steps.size(); ++s)
      os << name << ',' << r.steps[s] << ',' << r.layer << ',' << r.epochs << ','
         << fmt_double(r.accuracies[s]) << '\n';
  return os.str();
}

std::string invariance_csv(const std::vector<std::pair<std::string, InvarianceRecord>>& records) {
  std::ostringstream os;
  os << "name,pairs,token_change_rate,feature_cosine\n";
  for (const auto& [name, r] : records)
    os << name << ',' << r.pairs << ',' << fmt_double(r.token_change_rate) << ','
       << fmt_double(r.feature_cosine) << '\n';
  return os.str();
}

std::string heatmap_svg(const std::string& title, const LocalityProfile& p, int layer) {
  const int cell = 8, left = 110, top = 40, rows = 3;
  const int width = left + p.seq_len * cell + 20;
  const int height = top + rows * 24 + 30;
  const char* labels[rows] = {"condition", "neighbors", "elsewhere"};
  const std::vector<std::vector<double>>* fields[rows] = {&p.mass_on_condition, &p.mass_on_neighbors,
                                                          &p.mass_elsewhere};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  os << "<text x=\"8\" y=\"20\" font-family=\"monospace\" font-size=\"13\">" << xml_escape(title)
     << "</text>\n";
  for (int r = 0; r < rows; ++r) {
    const int y = top + r * 24;
    os << "<text x=\"8\" y=\"" << y + 15 << "\" font-family=\"monospace\" font-size=\"11\">"
       << labels[r] << "</text>\n";
    const auto& row = (*fields[r])[static_cast<std::size_t>(layer)];
    for (int i = 0; i < p.seq_len; ++i) {
      const double m = std::clamp(row[static_cast<std::size_t>(i)], 0.0, 1.0);
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - m)));
      os << "<rect x=\"" << left + i * cell << "\" y=\"" << y << "\" width=\"" << cell
         << "\" height=\"20\" fill=\"rgb(" << shade << ',' << shade << ",255)\"/>\n";
    }
  }
  os << "<text x=\"" << left << "\" y=\"" << height - 8
     << "\" font-family=\"monospace\" font-size=\"11\">step 1 .. " << p.seq_len << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

std::string probe_svg(const std::string& title, const ProbeReport& r) {
  const int width = 480, height = 320, left = 50, bottom = 280, top = 40, right = 440;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  os << "<text x=\"8\" y=\"20\" font-family=\"monospace\" font-size=\"13\">" << xml_escape(title)
     << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << right << "\" y2=\"" << bottom
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << bottom
     << "\" stroke=\"black\"/>\n";
  if (!r.steps.empty()) {
    const int smax = *std::max_element(r.steps.begin(), r.steps.end());
    std::ostringstream pts;
    for (std::size_t i = 0; i < r.steps.size(); ++i) {
      const double fx = left + (right - left) * (static_cast<double>(r.steps[i]) / smax);
      const double fy = bottom - (bottom - top) * r.accuracies[i];
      pts << (i ? " " : "") << fmt_double(fx) << ',' << fmt_double(fy);
      os << "<circle cx=\"" << fmt_double(fx) << "\" cy=\"" << fmt_double(fy)
         << "\" r=\"3\" fill=\"black\"/>\n";
    }
    os << "<polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n";
  }
  os << "<text x=\"" << left << "\" y=\"" << height - 8
     << "\" font-family=\"monospace\" font-size=\"11\">accuracy vs generation step</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace

void render_report(const std::vector<std::pair<std::string, LocalityProfile>>& profiles,
                   const std::vector<std::pair<std::string, ProbeReport>>& probes,
                   const std::vector<std::pair<std::string, InvarianceRecord>>& records,
                   const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw ArtifactError("render_report: cannot create " + out_dir.string());

  write_file(out_dir / "locality.csv", locality_csv(profiles));
  write_file(out_dir / "probe.csv", probe_csv(probes));
  write_file(out_dir / "invariance.csv", invariance_csv(records));
  for (const auto& [name, p] : profiles)
    for (int l = 0; l < p.layers; ++l) {
      const auto file = "locality_" + sanitize_name(name) + "_layer" + std::to_string(l + 1) + ".svg";
      write_file(out_dir / file, heatmap_svg(name + " layer " + std::to_string(l + 1), p, l));
    }
  for (const auto& [name, r] : probes)
    write_file(out_dir / ("probe_" + sanitize_name(name) + ".svg"), probe_svg(name, r));
}

}  // namespace star
