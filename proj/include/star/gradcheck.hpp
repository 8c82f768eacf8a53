#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "star/rng.hpp"
#include "star/tensor.hpp"

// Central-difference gradient verification. The loss closure is re-evaluated
// with single coordinates displaced by +-eps; relative error is
// |g_a - g_n| / max(|g_a|, |g_n|, 1e-8), the floor avoiding false failures
// at true-zero gradients. Intended to run with T = double; float-mode
// training code paths stay identical because everything is templated on the
// scalar type.

namespace star {

struct GradInputReport {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
  bool pass = true;
};

struct GradReport {
  std::vector<GradInputReport> inputs;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

inline double grad_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// params: named leaf tensors with requires_grad set. When coords_per_tensor
// > 0, a deterministic subsample of coordinates is probed per tensor
// instead of all of them. A coordinate counts as matching when its relative
// error is within tolerance or its absolute disagreement is within atol;
// atol = 0 disables the absolute escape so near-zero gradients swamped by
// cancellation noise in the difference quotient still fail.
template <typename T>
GradReport gradient_check(const std::function<Tensor<T>()>& loss_fn,
                          const std::vector<std::pair<std::string, Tensor<T>>>& params,
                          T eps, double tolerance, int coords_per_tensor = -1,
                          std::uint64_t coord_seed = 17, double atol = 0.0) {
  // analytic pass; stale grad buffers from earlier backward calls must not
  // leak into this one
  std::vector<std::vector<T>> analytic;
  {
    for (const auto& [name, p] : params) p.node()->grad.clear();
    Tape<T> tape;
    TapeScope<T> scope(tape);
    auto loss = loss_fn();
    if (loss.size() != 1) throw NumericsError("gradient_check: loss must be scalar");
    tape.backward(loss);
    for (const auto& [name, p] : params) {
      if (p.node()->grad.size() == p.size())
        analytic.emplace_back(p.node()->grad.begin(), p.node()->grad.end());
      else
        analytic.emplace_back(p.size(), T(0));
    }
  }

  GradReport report;
  report.tolerance = tolerance;
  report.pass = true;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& name = params[pi].first;
    Tensor<T> p = params[pi].second;  // non-const handle onto the shared node
    auto vals = p.values();
    std::vector<std::size_t> coords;
    if (coords_per_tensor > 0 && static_cast<std::size_t>(coords_per_tensor) < vals.size()) {
      Rng rng(stream_seed(coord_seed, name, pi));
      auto picked = rng.sample_without_replacement(coords_per_tensor, static_cast<int>(vals.size()));
      coords.assign(picked.begin(), picked.end());
    } else {
      coords.resize(vals.size());
      for (std::size_t i = 0; i < vals.size(); ++i) coords[i] = i;
    }
    GradInputReport ir;
    ir.name = name;
    for (std::size_t ci : coords) {
      const T saved = vals[ci];
      double lp, lm;
      {
        NoGradScope<T> off;
        vals[ci] = saved + eps;
        lp = static_cast<double>(loss_fn().item());
        vals[ci] = saved - eps;
        lm = static_cast<double>(loss_fn().item());
        vals[ci] = saved;
      }
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw NumericsError("gradient_check: non-finite objective at perturbation of " + name +
                            "[" + std::to_string(ci) + "]");
      const double numeric = (lp - lm) / (2.0 * static_cast<double>(eps));
      const double ga = static_cast<double>(analytic[pi][ci]);
      const double rel = grad_rel_err(ga, numeric);
      if (rel > tolerance && std::abs(ga - numeric) > atol) ir.pass = false;
      ir.max_abs_err = std::max(ir.max_abs_err, std::abs(ga - numeric));
      ++ir.coords_checked;
      if (rel > ir.max_rel_err) {
        ir.max_rel_err = rel;
        ir.worst_index = ci;
        ir.worst_analytic = ga;
        ir.worst_numeric = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, ir.max_rel_err);
    if (!ir.pass) report.pass = false;
    report.inputs.push_back(std::move(ir));
  }
  return report;
}

}  // namespace star
