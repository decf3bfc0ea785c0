#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "zfcl/autodiff.hpp"
#include "zfcl/rng.hpp"
#include "zfcl/tensor.hpp"

using namespace zfcl;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Independent triple-loop matrix product.
Tensor<double> matmul_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  int M = a.shape[0], K = a.shape[1], N = b.shape[1];
  Tensor<double> c = Tensor<double>::zeros({M, N});
  for (int i = 0; i < M; ++i)
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < N; ++j) c.at2(i, j) += a.at2(i, k) * b.at2(k, j);
  return c;
}

// Direct 6-loop convolution over output and kernel coordinates.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad,
                           int groups) {
  int B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
  int Cout = w.shape[0], Cpg = w.shape[1], kh = w.shape[2], kw = w.shape[3];
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  int cout_pg = Cout / groups;
  (void)Cin;
  Tensor<double> y = Tensor<double>::zeros({B, Cout, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Cout; ++co)
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow)
          for (int c = 0; c < Cpg; ++c)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) {
                int ih = oh * stride - pad + u;
                int iw = ow * stride - pad + v;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                int ci = (co / cout_pg) * Cpg + c;
                y.at4(b, co, oh, ow) += x.at4(b, ci, ih, iw) * w.at4(co, c, u, v);
              }
  return y;
}

}  // namespace

TEST_CASE("elementwise mul basics") {
  Tape<double> tp;
  auto a = tp.leaf(Tensor<double>({1}, {2.0}), false);
  auto b = tp.leaf(Tensor<double>({1}, {3.0}), false);
  auto c = mul(tp, a, b);
  CHECK(tp.val(c)[0] == 6.0);

  // mul by ones is a bit-exact identity
  Rng rng(11);
  Tensor<double> w = random_tensor({3, 4}, rng);
  Tape<double> tp2;
  auto wv = tp2.leaf(w, false);
  auto ones = tp2.leaf(Tensor<double>::ones({3, 4}), false);
  auto out = mul(tp2, wv, ones);
  for (int64_t i = 0; i < w.numel(); ++i) CHECK(tp2.val(out)[i] == w[i]);
}

TEST_CASE("elementwise shape mismatch names both shapes") {
  Tape<double> tp;
  auto a = tp.leaf(Tensor<double>::zeros({2, 3}), false);
  auto b = tp.leaf(Tensor<double>::zeros({3, 2}), false);
  try {
    mul(tp, a, b);
    FAIL("expected shape mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ShapeMismatch);
    CHECK(std::string(e.what()).find("(2,3)") != std::string::npos);
    CHECK(std::string(e.what()).find("(3,2)") != std::string::npos);
  }
}

TEST_CASE("gradient of sum(a*b) w.r.t. a equals b") {
  Rng rng(3);
  Tensor<double> a = random_tensor({4, 5}, rng);
  Tensor<double> b = random_tensor({4, 5}, rng);
  auto f = [&](Tape<double>& tp, Var<double> x) {
    auto bv = tp.constant(b);
    return sum_all(tp, mul(tp, x, bv));
  };
  CHECK(grad_check<double>(f, a, 1e-6) < 1e-6);
  // analytic gradient is exactly b
  Tape<double> tp;
  auto av = tp.leaf(a, true);
  auto loss = sum_all(tp, mul(tp, av, tp.constant(b)));
  tp.backward(loss);
  const Tensor<double>& g = tp.grad(av);
  for (int64_t i = 0; i < b.numel(); ++i) CHECK(g[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("scalar broadcast in elementwise ops") {
  Tape<double> tp;
  auto a = tp.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}), true);
  auto s = tp.leaf(Tensor<double>::scalar(2.0), true);
  auto out = mul(tp, a, s);
  CHECK(tp.val(out).data == std::vector<double>{2, 4, 6, 8});
  auto loss = sum_all(tp, out);
  tp.backward(loss);
  CHECK(tp.grad(s)[0] == 10.0);  // sum of a
}

TEST_CASE("matmul identity and scalar cases") {
  Tape<double> tp;
  auto eye = tp.leaf(Tensor<double>({2, 2}, {1, 0, 0, 1}), false);
  auto m = tp.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}), false);
  auto out = matmul(tp, eye, m);
  CHECK(tp.val(out).data == std::vector<double>{1, 2, 3, 4});

  auto r = tp.leaf(Tensor<double>({1, 2}, {1, 2}), false);
  auto c = tp.leaf(Tensor<double>({2, 1}, {3, 4}), false);
  auto s = matmul(tp, r, c);
  CHECK(tp.val(s)[0] == 11.0);
}

TEST_CASE("matmul random vs triple-loop oracle, exact in float64") {
  Rng rng(17);
  Tensor<double> a = random_tensor({3, 4}, rng);
  Tensor<double> b = random_tensor({4, 2}, rng);
  Tape<double> tp;
  auto out = matmul(tp, tp.leaf(a, false), tp.leaf(b, false));
  Tensor<double> want = matmul_oracle(a, b);
  for (int64_t i = 0; i < want.numel(); ++i) {
    // same accumulation order -> exact equality
    CHECK(tp.val(out)[i] == want[i]);
  }
}

TEST_CASE("matmul dimension mismatch") {
  Tape<double> tp;
  auto a = tp.leaf(Tensor<double>::zeros({2, 3}), false);
  auto b = tp.leaf(Tensor<double>::zeros({2, 3}), false);
  CHECK_THROWS_AS(matmul(tp, a, b), Error);
}

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(23);
  Tensor<double> a = random_tensor({3, 4}, rng);
  Tensor<double> b = random_tensor({4, 2}, rng);
  Tensor<double> r = random_tensor({3, 2}, rng);
  auto fa = [&](Tape<double>& tp, Var<double> x) {
    return sum_all(tp, mul(tp, matmul(tp, x, tp.constant(b)), tp.constant(r)));
  };
  auto fb = [&](Tape<double>& tp, Var<double> x) {
    return sum_all(tp, mul(tp, matmul(tp, tp.constant(a), x), tp.constant(r)));
  };
  CHECK(grad_check<double>(fa, a, 1e-6) < 1e-8);
  CHECK(grad_check<double>(fb, b, 1e-6) < 1e-8);
}

TEST_CASE("conv2d scalar and summation cases") {
  Tape<double> tp;
  auto x = tp.leaf(Tensor<double>({1, 1, 1, 1}, {5.0}), false);
  auto w = tp.leaf(Tensor<double>({1, 1, 1, 1}, {2.0}), false);
  auto y = conv2d(tp, x, w, 1, 0);
  CHECK(tp.val(y)[0] == 10.0);

  auto x2 = tp.leaf(Tensor<double>::ones({1, 1, 2, 2}), false);
  auto w2 = tp.leaf(Tensor<double>::ones({1, 1, 2, 2}), false);
  auto y2 = conv2d(tp, x2, w2, 1, 0);
  CHECK(tp.val(y2).shape == std::vector<int>{1, 1, 1, 1});
  CHECK(tp.val(y2)[0] == 4.0);
}

TEST_CASE("conv2d random case vs direct-loop oracle") {
  Rng rng(29);
  Tensor<double> x = random_tensor({2, 3, 5, 5}, rng);
  Tensor<double> w = random_tensor({4, 3, 3, 3}, rng);
  Tape<double> tp;
  auto y = conv2d(tp, tp.leaf(x, false), tp.leaf(w, false), 1, 1);
  Tensor<double> want = conv_oracle(x, w, 1, 1, 1);
  REQUIRE(tp.val(y).shape == want.shape);
  for (int64_t i = 0; i < want.numel(); ++i)
    CHECK(std::abs(tp.val(y)[i] - want[i]) < 1e-12);
}

TEST_CASE("grouped conv2d vs oracle") {
  Rng rng(31);
  Tensor<double> x = random_tensor({2, 4, 4, 4}, rng);
  Tensor<double> w = random_tensor({8, 2, 3, 3}, rng);  // groups=2
  Tape<double> tp;
  auto y = conv2d(tp, tp.leaf(x, false), tp.leaf(w, false), 2, 1, 2);
  Tensor<double> want = conv_oracle(x, w, 2, 1, 2);
  REQUIRE(tp.val(y).shape == want.shape);
  for (int64_t i = 0; i < want.numel(); ++i)
    CHECK(std::abs(tp.val(y)[i] - want[i]) < 1e-12);
}

TEST_CASE("conv2d invalid geometry") {
  Tape<double> tp;
  auto x = tp.leaf(Tensor<double>::zeros({1, 1, 2, 2}), false);
  auto w = tp.leaf(Tensor<double>::zeros({1, 1, 5, 5}), false);
  try {
    conv2d(tp, x, w, 1, 0);
    FAIL("expected invalid geometry");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::InvalidGeometry);
  }
}

TEST_CASE("conv2d gradients vs finite differences") {
  Rng rng(37);
  Tensor<double> x = random_tensor({2, 2, 4, 4}, rng);
  Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
  Tensor<double> r = random_tensor({2, 3, 4, 4}, rng);
  auto fx = [&](Tape<double>& tp, Var<double> v) {
    return sum_all(tp, mul(tp, conv2d(tp, v, tp.constant(w), 1, 1), tp.constant(r)));
  };
  auto fw = [&](Tape<double>& tp, Var<double> v) {
    return sum_all(tp, mul(tp, conv2d(tp, tp.constant(x), v, 1, 1), tp.constant(r)));
  };
  CHECK(grad_check<double>(fx, x, 1e-6) < 1e-4);
  CHECK(grad_check<double>(fw, w, 1e-6) < 1e-4);
}

TEST_CASE("backward basics: sum and quadratic") {
  Tensor<double> x({2, 2}, {1, 2, 3, 4});
  Tape<double> tp;
  auto xv = tp.leaf(x, true);
  tp.backward(sum_all(tp, xv));
  for (int64_t i = 0; i < 4; ++i) CHECK(tp.grad(xv)[i] == 1.0);

  Tape<double> tp2;
  auto xv2 = tp2.leaf(x, true);
  tp2.backward(sum_all(tp2, mul(tp2, xv2, xv2)));
  for (int64_t i = 0; i < 4; ++i) CHECK(tp2.grad(xv2)[i] == 2.0 * x[i]);
}

TEST_CASE("backward rejects non-scalar loss and foreign vars") {
  Tape<double> tp;
  auto x = tp.leaf(Tensor<double>::zeros({2}), true);
  CHECK_THROWS_AS(tp.backward(x), Error);

  Tape<double> other;
  auto y = other.leaf(Tensor<double>::scalar(1.0), true);
  try {
    tp.backward(y);
    FAIL("expected not-on-tape");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NotOnTape);
  }
}

TEST_CASE("trainable leaf with no path gets zero gradient") {
  Tape<double> tp;
  auto used = tp.leaf(Tensor<double>::scalar(2.0), true);
  auto unused = tp.leaf(Tensor<double>::zeros({3}), true);
  tp.backward(sum_all(tp, used));
  CHECK(tp.grad(unused).data == std::vector<double>{0, 0, 0});
}

TEST_CASE("grad_check: linear function has zero error") {
  // dyadic values + power-of-two eps make both sides exactly ones
  Tensor<double> x({3}, {1.0, -2.0, 0.5});
  auto f = [](Tape<double>& tp, Var<double> v) { return sum_all(tp, v); };
  CHECK(grad_check<double>(f, x, 0x1.0p-20) == 0.0);

  Rng rng(5);
  Tensor<double> y = random_tensor({4}, rng);
  CHECK(grad_check<double>(f, y, 1e-6) < 1e-9);
}

TEST_CASE("grad_check: quadratic at x=[1,2]") {
  Tensor<double> x({2}, {1.0, 2.0});
  auto f = [](Tape<double>& tp, Var<double> v) { return sum_all(tp, mul(tp, v, v)); };
  Tape<double> tp;
  auto xv = tp.leaf(x, true);
  tp.backward(f(tp, xv));
  CHECK(tp.grad(xv)[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(tp.grad(xv)[1] == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(grad_check<double>(f, x, 1e-6) < 1e-9);
}

TEST_CASE("grad_check rejects non-scalar f") {
  Tensor<double> x({2}, {1.0, 2.0});
  auto f = [](Tape<double>&, Var<double> v) { return v; };
  CHECK_THROWS_AS(grad_check<double>(f, x, 1e-6), Error);
}

TEST_CASE("relu, bias_add, pool, reshape, linear gradients") {
  Rng rng(41);
  Tensor<double> x = random_tensor({2, 3, 4, 4}, rng);
  Tensor<double> b = random_tensor({3}, rng);
  auto f1 = [&](Tape<double>& tp, Var<double> v) {
    return sum_all(tp, relu(tp, bias_add(tp, v, tp.constant(b))));
  };
  CHECK(grad_check<double>(f1, x, 1e-6) < 1e-4);

  auto f2 = [&](Tape<double>& tp, Var<double> v) {
    auto p = global_avg_pool(tp, v);
    return sum_all(tp, mul(tp, p, p));
  };
  CHECK(grad_check<double>(f2, x, 1e-6) < 1e-6);

  Tensor<double> w = random_tensor({5, 3}, rng);
  Tensor<double> feats = random_tensor({4, 3}, rng);
  auto f3 = [&](Tape<double>& tp, Var<double> v) {
    auto y = linear(tp, tp.constant(feats), v);
    return sum_all(tp, mul(tp, y, y));
  };
  CHECK(grad_check<double>(f3, w, 1e-6) < 1e-6);

  auto f4 = [&](Tape<double>& tp, Var<double> v) {
    auto r = reshape(tp, v, {8, 12});
    return sum_all(tp, mul(tp, r, r));
  };
  CHECK(grad_check<double>(f4, x, 1e-6) < 1e-6);
}

TEST_CASE("cross_entropy uniform, saturated, gradient") {
  Tape<double> tp;
  auto logits = tp.leaf(Tensor<double>::zeros({2, 4}), false);
  auto loss = cross_entropy(tp, logits, {0, 3});
  CHECK(tp.val(loss)[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor<double> hot = Tensor<double>::zeros({1, 3});
  hot.at2(0, 1) = 1e4;
  Tape<double> tp2;
  auto loss2 = cross_entropy(tp2, tp2.leaf(hot, false), {1});
  CHECK(tp2.val(loss2)[0] < 1e-8);

  Rng rng(43);
  Tensor<double> z = random_tensor({3, 5}, rng);
  std::vector<int> labels = {1, 4, 0};
  auto f = [&](Tape<double>& tp3, Var<double> v) { return cross_entropy(tp3, v, labels); };
  CHECK(grad_check<double>(f, z, 1e-6) < 1e-5);
}

TEST_CASE("cross_entropy label out of range") {
  Tape<double> tp;
  auto logits = tp.leaf(Tensor<double>::zeros({1, 3}), false);
  try {
    cross_entropy(tp, logits, {3});
    FAIL("expected label error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::LabelOutOfRange);
  }
}

TEST_CASE("determinism: same seed, same op sequence, identical bits") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor<double> x = random_tensor({2, 3, 6, 6}, rng);
    Tensor<double> w = random_tensor({4, 3, 3, 3}, rng);
    Tape<double> tp;
    auto xv = tp.leaf(x, false);
    auto wv = tp.leaf(w, true);
    auto y = conv2d(tp, xv, wv, 1, 1);
    auto loss = sum_all(tp, mul(tp, y, y));
    tp.backward(loss);
    std::vector<double> out = tp.val(y).data;
    const auto& g = tp.grad(wv).data;
    out.insert(out.end(), g.begin(), g.end());
    return out;
  };
  auto a = run(99);
  auto b = run(99);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("float16 storage round trips") {
  // every f16 bit pattern survives f16 -> f32 -> f16 (NaN payloads aside)
  int mismatches = 0;
  for (uint32_t bits = 0; bits < 0x10000; ++bits) {
    uint16_t h = (uint16_t)bits;
    float f = f16_to_f32(h);
    if (std::isnan(f)) continue;
    uint16_t back = f32_to_f16(f);
    if (back != h) mismatches++;
  }
  CHECK(mismatches == 0);
  CHECK(f16_to_f32(f32_to_f16(1.0f)) == 1.0f);
  CHECK(f16_to_f32(f32_to_f16(0.0f)) == 0.0f);
  CHECK(f16_to_f32(f32_to_f16(-2.5f)) == -2.5f);
  // rounding is to nearest even
  CHECK(f16_to_f32(f32_to_f16(2049.0f / 2048.0f)) == 1.0f);
}
