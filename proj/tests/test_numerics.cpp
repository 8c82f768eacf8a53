#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "star/gradcheck.hpp"
#include "star/ops.hpp"
#include "star/rng.hpp"
#include "star/tensor.hpp"
#include "test_util.hpp"

using namespace star;
using star::testutil::random_tensor;

namespace {

const double SENT = ops::mask_sentinel<double>();

Tensor<double> vec(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor<double>::from({n}, std::move(v));
}

}  // namespace

TEST_CASE("rng is deterministic and stays in range") {
  Rng a(42), b(42), c(43);
  bool same = true, differ = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    same = same && (x == b.next_u64());
    differ = differ || (x != c.next_u64());
  }
  CHECK(same);
  CHECK(differ);

  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(r.randint(13) < 13);
  }

  auto s = r.sample_without_replacement(5, 12);
  CHECK(s.size() == 5);
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(s[i] >= 0);
    CHECK(s[i] < 12);
    for (std::size_t j = i + 1; j < s.size(); ++j) CHECK(s[i] != s[j]);
  }

  // k = n is a full permutation
  auto full = r.sample_without_replacement(6, 6);
  std::vector<bool> seen(6, false);
  for (int v : full) seen[static_cast<std::size_t>(v)] = true;
  for (bool b2 : seen) CHECK(b2);

  CHECK(stream_seed(1, "data", 0) != stream_seed(1, "mask", 0));
  CHECK(stream_seed(1, "data", 0) != stream_seed(1, "data", 1));
  CHECK(stream_seed(1, "data", 0, 0) != stream_seed(1, "data", 0, 1));
  CHECK(stream_seed(1, "data", 5) == stream_seed(1, "data", 5));
}

TEST_CASE("rng normal has sane moments") {
  Rng r(123);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<float>::from({2, 3}, {1.f, 2.f}), NumericsError);
  auto t = Tensor<float>::zeros({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.dim(-1) == 3);
  CHECK_THROWS_AS(t.item(), NumericsError);
  Tape<float> tape;
  CHECK_THROWS_AS(tape.backward(t), NumericsError);
}

TEST_CASE("masked_softmax uniform case") {
  auto out = ops::masked_softmax(vec({1, 1, 1, 1}), vec({0, 0, 0, 0}));
  for (double v : out.values()) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("masked_softmax forces masked entry to zero and renormalizes") {
  auto out = ops::masked_softmax(vec({5, 2, 9}), vec({0, SENT, 0}));
  const double e5 = std::exp(5.0), e9 = std::exp(9.0);
  CHECK(out.values()[0] == doctest::Approx(e5 / (e5 + e9)).epsilon(1e-9));
  CHECK(out.values()[1] == 0.0);  // exact
  CHECK(out.values()[2] == doctest::Approx(e9 / (e5 + e9)).epsilon(1e-9));
}

TEST_CASE("masked_softmax matches exponentiate-and-normalize oracle") {
  const std::vector<double> logits = {0.3, -1.2, 2.0, 0.0};
  const std::vector<double> mask = {0, 0, SENT, 0};
  auto out = ops::masked_softmax(vec(logits), vec(mask));
  // brute force over unmasked entries
  double denom = 0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (mask[i] == 0) denom += std::exp(logits[i]);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double expect = (mask[i] == 0) ? std::exp(logits[i]) / denom : 0.0;
    CHECK(std::abs(out.values()[i] - expect) < 1e-6);
  }
}

TEST_CASE("masked_softmax properties: row sums, shift invariance, stability") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(stream_seed(900, "softmax_prop", seed));
    const int rows = 1 + static_cast<int>(rng.randint(5));
    const int cols = 2 + static_cast<int>(rng.randint(7));
    auto logits = random_tensor<double>({rows, cols}, rng, 3.0);
    auto mask = Tensor<double>::zeros({rows, cols});
    for (int r = 0; r < rows; ++r) {
      const int keep = 1 + static_cast<int>(rng.randint(static_cast<std::uint64_t>(cols)));
      auto kept = rng.sample_without_replacement(keep, cols);
      std::vector<bool> is_kept(static_cast<std::size_t>(cols), false);
      for (int k : kept) is_kept[static_cast<std::size_t>(k)] = true;
      for (int c = 0; c < cols; ++c)
        if (!is_kept[static_cast<std::size_t>(c)]) mask.values()[static_cast<std::size_t>(r * cols + c)] = SENT;
    }
    auto out = ops::masked_softmax(logits, mask);
    for (int r = 0; r < rows; ++r) {
      double sum = 0;
      for (int c = 0; c < cols; ++c) sum += out.values()[static_cast<std::size_t>(r * cols + c)];
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }

    // adding a constant to the unmasked logits of a row leaves probs alone
    auto shifted = Tensor<double>::from(logits.shape(),
                                        std::vector<double>(logits.values().begin(), logits.values().end()));
    const double c0 = rng.uniform(-5, 5);
    for (std::size_t i = 0; i < shifted.size(); ++i)
      if (mask.values()[i] == 0) shifted.values()[i] += c0;
    auto out2 = ops::masked_softmax(shifted, mask);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(out.values()[i] - out2.values()[i]) < 1e-6);
  }

  // no overflow for logits up to +-1e4
  auto big = ops::masked_softmax(vec({1e4, -1e4, 9.9e3}), vec({0, 0, 0}));
  double sum = 0;
  for (double v : big.values()) sum += v;
  CHECK(std::abs(sum - 1.0) < 1e-6);
}

TEST_CASE("masked_softmax rejects fully masked rows") {
  CHECK_THROWS_WITH_AS(ops::masked_softmax(vec({1, 2}), vec({SENT, SENT})),
                       doctest::Contains("empty attention row"), NumericsError);
  // row index is named
  auto logits = Tensor<double>::zeros({3, 2});
  auto mask = Tensor<double>::zeros({3, 2});
  mask.values()[4] = SENT;
  mask.values()[5] = SENT;
  CHECK_THROWS_WITH_AS(ops::masked_softmax(logits, mask), doctest::Contains("row 2"), NumericsError);
}

TEST_CASE("masked_softmax broadcasts a shared mask across heads") {
  Rng rng(5150);
  const int n = 2, h = 3, s = 4;
  auto logits = random_tensor<double>({n, h, s, s}, rng);
  auto mask = Tensor<double>::zeros({n, 1, s, s});
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < s; ++i)
      for (int j = i + 1; j < s; ++j)
        mask.values()[static_cast<std::size_t>(((b * 1 + 0) * s + i) * s + j)] = SENT;
  auto out = ops::masked_softmax(logits, mask);
  // per-slice reference with an explicitly tiled mask
  for (int b = 0; b < n; ++b)
    for (int hh = 0; hh < h; ++hh) {
      auto sl = Tensor<double>::zeros({s, s});
      auto sm = Tensor<double>::zeros({s, s});
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j) {
          sl.values()[static_cast<std::size_t>(i * s + j)] =
              logits.values()[static_cast<std::size_t>((((b * h) + hh) * s + i) * s + j)];
          sm.values()[static_cast<std::size_t>(i * s + j)] =
              mask.values()[static_cast<std::size_t>((b * s + i) * s + j)];
        }
      auto ref = ops::masked_softmax(sl, sm);
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j)
          CHECK(out.values()[static_cast<std::size_t>((((b * h) + hh) * s + i) * s + j)] ==
                doctest::Approx(ref.values()[static_cast<std::size_t>(i * s + j)]).epsilon(1e-12));
    }
}

TEST_CASE("cosine_distance fixed points") {
  CHECK(ops::cosine_distance(vec({1, 2, 3}), vec({1, 2, 3})).item() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(ops::cosine_distance(vec({1, 0}), vec({0, 1})).item() == doctest::Approx(1.0));
  CHECK(ops::cosine_distance(vec({1, 1}), vec({-1, -1})).item() == doctest::Approx(2.0));

  // scale invariance: d(a, lambda a) = 0 for lambda > 0
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(stream_seed(901, "cos_prop", seed));
    auto a = random_tensor<double>({6}, rng);
    const double lambda = rng.uniform(0.01, 10.0);
    std::vector<double> sv(a.values().begin(), a.values().end());
    for (auto& v : sv) v *= lambda;
    const double d = ops::cosine_distance(a, vec(sv)).item();
    CHECK(std::abs(d) < 1e-9);
    CHECK(d >= -1e-12);
    CHECK(d <= 2.0 + 1e-12);
  }

  CHECK_THROWS_WITH_AS(ops::cosine_distance(vec({0, 0}), vec({1, 1})),
                       doctest::Contains("degenerate feature vector"), NumericsError);
  CHECK_THROWS_WITH_AS(ops::l2_normalize(vec({0, 0, 0})), doctest::Contains("degenerate feature vector"),
                       NumericsError);
}

TEST_CASE("non-finite op outputs raise immediately") {
  auto x = vec({1e308, 1e308});
  CHECK_THROWS_WITH_AS(ops::scale(x, 1e10), doctest::Contains("non-finite"), NumericsError);
  CHECK_THROWS_WITH_AS(ops::mul(x, x), doctest::Contains("non-finite"), NumericsError);
}

TEST_CASE("gradient_check on sum of squares is near-exact") {
  auto x = Tensor<double>::from({2}, {3.0, -1.0}, true);
  auto fn = [&]() {
    // sum of squares = mean(x*x) * n
    return ops::scale(ops::mean_all(ops::mul(x, x)), 2.0);
  };
  auto report = gradient_check<double>(fn, {{"x", x}}, 1e-5, 1e-9);
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-9);

  // analytic gradient itself is [6, -2]
  x.node()->grad.clear();
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto loss = fn();
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(-2.0).epsilon(1e-12));
}

TEST_CASE("gradient_check on masked_softmax + cross-entropy row") {
  auto logits = Tensor<double>::from({1, 4}, {0.2, -0.5, 1.0, 0.3}, true);
  auto mask = Tensor<double>::from({1, 4}, {0, SENT, 0, 0});
  // cross-entropy on the additively masked logits: the sentinel suppresses
  // the masked class just like masked_softmax would
  auto fn = [&]() { return ops::cross_entropy(ops::add(logits, mask), {2}); };
  auto report = gradient_check<double>(fn, {{"logits", logits}}, 1e-4, 1e-4);
  CHECK(report.pass);

  // and through masked_softmax itself: NLL of an unmasked class
  auto fn2 = [&]() {
    auto p = ops::masked_softmax(logits, mask);
    auto picked = ops::gather_elems(p, {2});
    // -log p via: distance of [p] from 1 is monotone; use mean of -log
    // implemented with the kernels at hand: scale(mean(log p), -1) is not a
    // kernel, so check the softmax Jacobian through a linear readout instead
    return ops::mean_all(ops::mul(picked, Tensor<double>::from({1}, {3.0})));
  };
  auto report2 = gradient_check<double>(fn2, {{"logits", logits}}, 1e-4, 1e-4);
  CHECK(report2.pass);
}

// Every kernel the losses touch, on randomized small shapes, 20+ seeds.
TEST_CASE("per-kernel gradient checks across random seeds") {
  const double tol = 1e-4;
  const double eps = 1e-5;
  int worst_seen = 0;
  for (std::uint64_t seed = 0; seed < 22; ++seed) {
    Rng rng(stream_seed(902, "kernel_grad", seed));
    const int m = 2 + static_cast<int>(rng.randint(3));
    const int k = 2 + static_cast<int>(rng.randint(3));
    const int n = 2 + static_cast<int>(rng.randint(3));

    auto check = [&](const char* name, const std::function<Tensor<double>()>& fn,
                     std::vector<std::pair<std::string, Tensor<double>>> params) {
      auto rep = gradient_check<double>(fn, params, eps, tol, -1, seed);
      INFO(std::string(name) << " seed=" << seed << " worst=" << rep.max_rel_err);
      CHECK(rep.pass);
      if (!rep.pass) ++worst_seen;
    };

    // scalarize arbitrary-shaped outputs against fixed random weights
    auto scalarize = [&](Tensor<double> out, Rng& r2) {
      auto w = random_tensor<double>(out.shape(), r2);
      return ops::mean_all(ops::mul(out, w));
    };

    {
      auto x = random_tensor<double>({m, k}, rng, 1.0, true);
      auto w = random_tensor<double>({k, n}, rng, 1.0, true);
      check("matmul", [&] { Rng r2(seed); return scalarize(ops::matmul(x, w), r2); }, {{"x", x}, {"w", w}});
    }
    {
      auto a = random_tensor<double>({2, m, k}, rng, 1.0, true);
      auto b = random_tensor<double>({2, k, n}, rng, 1.0, true);
      check("bmm", [&] { Rng r2(seed); return scalarize(ops::bmm(a, b), r2); }, {{"a", a}, {"b", b}});
    }
    {
      auto a = random_tensor<double>({2, m, k}, rng, 1.0, true);
      auto b = random_tensor<double>({2, n, k}, rng, 1.0, true);
      check("bmm_nt", [&] { Rng r2(seed); return scalarize(ops::bmm_nt(a, b), r2); }, {{"a", a}, {"b", b}});
    }
    {
      auto a = random_tensor<double>({m, n}, rng, 1.0, true);
      auto b = random_tensor<double>({m, n}, rng, 1.0, true);
      check("add", [&] { Rng r2(seed); return scalarize(ops::add(a, b), r2); }, {{"a", a}, {"b", b}});
      check("mul", [&] { Rng r2(seed); return scalarize(ops::mul(a, b), r2); }, {{"a", a}, {"b", b}});
      check("sub", [&] { Rng r2(seed); return scalarize(ops::sub(a, b), r2); }, {{"a", a}, {"b", b}});
      check("scale", [&] { Rng r2(seed); return scalarize(ops::scale(a, 1.7), r2); }, {{"a", a}});
      check("add_scalar", [&] { Rng r2(seed); return scalarize(ops::add_scalar(a, -0.3), r2); }, {{"a", a}});
      check("gelu", [&] { Rng r2(seed); return scalarize(ops::gelu(a), r2); }, {{"a", a}});
      check("mean_all", [&] { return ops::mean_all(a); }, {{"a", a}});
      check("reshape", [&] { Rng r2(seed); return scalarize(ops::reshape(a, {n, m}), r2); }, {{"a", a}});
    }
    {
      auto x = random_tensor<double>({m, 2, n}, rng, 1.0, true);
      auto bias = random_tensor<double>({n}, rng, 1.0, true);
      check("add_bias", [&] { Rng r2(seed); return scalarize(ops::add_bias(x, bias), r2); },
            {{"x", x}, {"bias", bias}});
    }
    {
      auto x = random_tensor<double>({m, 8}, rng, 1.0, true);
      auto gain = random_tensor<double>({8}, rng, 0.5, true);
      for (auto& g : gain.values()) g += 1.0;
      check("rmsnorm", [&] { Rng r2(seed); return scalarize(ops::rmsnorm(x, gain), r2); },
            {{"x", x}, {"gain", gain}});
    }
    {
      auto table = random_tensor<double>({5, n}, rng, 1.0, true);
      std::vector<int> ids;
      for (int i = 0; i < 7; ++i) ids.push_back(static_cast<int>(rng.randint(5)));
      check("embedding", [&] { Rng r2(seed); return scalarize(ops::embedding(table, ids), r2); },
            {{"table", table}});
    }
    {
      auto logits = random_tensor<double>({m, 5}, rng, 2.0, true);
      auto mask = Tensor<double>::zeros({m, 5});
      for (int r = 0; r < m; ++r) {
        const int keep = 1 + static_cast<int>(rng.randint(5));
        auto kept = rng.sample_without_replacement(keep, 5);
        std::vector<bool> is_kept(5, false);
        for (int kk : kept) is_kept[static_cast<std::size_t>(kk)] = true;
        for (int c = 0; c < 5; ++c)
          if (!is_kept[static_cast<std::size_t>(c)])
            mask.values()[static_cast<std::size_t>(r * 5 + c)] = SENT;
      }
      check("masked_softmax", [&] { Rng r2(seed); return scalarize(ops::masked_softmax(logits, mask), r2); },
            {{"logits", logits}});
    }
    {
      auto logits = random_tensor<double>({m, 6}, rng, 2.0, true);
      std::vector<int> targets;
      for (int r = 0; r < m; ++r) targets.push_back(static_cast<int>(rng.randint(6)));
      check("cross_entropy", [&] { return ops::cross_entropy(logits, targets); }, {{"logits", logits}});
    }
    {
      auto a = random_tensor<double>({m, 6}, rng, 1.0, true);
      auto b = random_tensor<double>({m, 6}, rng, 1.0, true);
      check("cosine_distance_rows", [&] { Rng r2(seed); return scalarize(ops::cosine_distance_rows(a, b), r2); },
            {{"a", a}, {"b", b}});
      check("l2_normalize", [&] { Rng r2(seed); return scalarize(ops::l2_normalize(a), r2); }, {{"a", a}});
    }
    {
      auto x = random_tensor<double>({2, 2, 3, 6}, rng, 1.0, true);
      std::vector<int> pos = {0, 1, 2};
      check("rope", [&] { Rng r2(seed); return scalarize(ops::rope(x, pos), r2); }, {{"x", x}});
    }
    {
      auto x = random_tensor<double>({2, 3, 8}, rng, 1.0, true);
      check("split_heads", [&] { Rng r2(seed); return scalarize(ops::split_heads(x, 2), r2); }, {{"x", x}});
    }
    {
      auto x = random_tensor<double>({2, 2, 3, 4}, rng, 1.0, true);
      check("merge_heads", [&] { Rng r2(seed); return scalarize(ops::merge_heads(x), r2); }, {{"x", x}});
    }
    {
      auto x = random_tensor<double>({6, n}, rng, 1.0, true);
      std::vector<int> idx = {5, 0, 3, 3};
      check("gather_rows", [&] { Rng r2(seed); return scalarize(ops::gather_rows(x, idx), r2); }, {{"x", x}});
    }
    {
      auto x = random_tensor<double>({2, 5, n}, rng, 1.0, true);
      std::vector<int> idx = {4, 1};
      check("gather_time", [&] { Rng r2(seed); return scalarize(ops::gather_time(x, idx), r2); }, {{"x", x}});
    }
    {
      auto x = random_tensor<double>({m, n}, rng, 1.0, true);
      std::vector<std::size_t> idx = {0, static_cast<std::size_t>(m * n - 1), 1};
      check("gather_elems", [&] { Rng r2(seed); return scalarize(ops::gather_elems(x, idx), r2); }, {{"x", x}});
    }
    {
      auto a = random_tensor<double>({2, 2, n}, rng, 1.0, true);
      auto b = random_tensor<double>({2, 3, n}, rng, 1.0, true);
      check("concat_time", [&] { Rng r2(seed); return scalarize(ops::concat_time(a, b), r2); },
            {{"a", a}, {"b", b}});
    }
  }
  CHECK(worst_seen == 0);
}

TEST_CASE("grad accumulates across reuse of the same tensor") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = ops::mean_all(ops::add(ops::mul(x, x), x));  // mean(x^2 + x)
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx((2 * 1.0 + 1) / 2.0));
  CHECK(x.grad()[1] == doctest::Approx((2 * 2.0 + 1) / 2.0));
}

TEST_CASE("no tape means no gradients recorded") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  auto y = ops::mul(x, x);
  CHECK_FALSE(y.requires_grad());

  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    NoGradScope<double> off;
    auto z = ops::mul(x, x);
    CHECK_FALSE(z.requires_grad());
  }
  CHECK(tape.num_ops() == 0);
}
