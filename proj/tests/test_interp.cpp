#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "zfcl/interp.hpp"
#include "zfcl/rng.hpp"

using namespace zfcl;

namespace {

// Independent oracle: piecewise cubic-convolution kernel evaluated directly
// at the signed distance, with index clamping. Never shares code with the
// AxisMap construction.
double cubic_kernel(double s) {
  const double a = -0.75;
  double x = std::abs(s);
  if (x <= 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
  if (x < 2.0) return a * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0);
  return 0.0;
}

std::vector<double> bicubic_oracle(const std::vector<double>& src, int D) {
  int S = (int)src.size();
  std::vector<double> out((size_t)D, 0.0);
  double scale = (double)S / D;
  for (int d = 0; d < D; ++d) {
    double x = (d + 0.5) * scale - 0.5;
    int base = (int)std::floor(x);
    double acc = 0.0;
    for (int j = -1; j <= 2; ++j) {
      int idx = std::min(S - 1, std::max(0, base + j));
      acc += cubic_kernel(x - (base + j)) * src[(size_t)idx];
    }
    out[(size_t)d] = acc;
  }
  return out;
}

const InterpMethod kMethods[] = {InterpMethod::Nearest, InterpMethod::NearestExact,
                                 InterpMethod::Bicubic};

}  // namespace

TEST_CASE("nearest 2x replication") {
  std::vector<double> got = upsample1d<double>({1.0, 2.0}, 4, InterpMethod::Nearest);
  CHECK(got == std::vector<double>{1.0, 1.0, 2.0, 2.0});
}

TEST_CASE("nearest vs nearest-exact conventions differ (3 -> 4)") {
  // floor(d*3/4) vs floor((d+0.5)*3/4)
  std::vector<double> src = {10.0, 20.0, 30.0};
  CHECK(upsample1d<double>(src, 4, InterpMethod::Nearest) ==
        std::vector<double>{10.0, 10.0, 20.0, 30.0});
  CHECK(upsample1d<double>(src, 4, InterpMethod::NearestExact) ==
        std::vector<double>{10.0, 20.0, 20.0, 30.0});
}

TEST_CASE("constant sources stay constant for every method") {
  for (InterpMethod m : kMethods) {
    for (int S : {1, 2, 3, 5}) {
      std::vector<double> src((size_t)S, 7.25);
      for (int D : {S, S + 1, 2 * S, 3 * S + 1}) {
        std::vector<double> out = upsample1d<double>(src, D, m);
        for (double v : out) CHECK(v == doctest::Approx(7.25).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("all-ones source is exactly ones (bit-exact partition of unity)") {
  for (InterpMethod m : kMethods)
    for (int S : {1, 2, 3, 4, 7})
      for (int D : {S, S + 2, 2 * S, 4 * S}) {
        std::vector<float> out = upsample1d<float>(std::vector<float>((size_t)S, 1.0f), D, m);
        for (float v : out) CHECK(v == 1.0f);
        std::vector<double> outd = upsample1d<double>(std::vector<double>((size_t)S, 1.0), D, m);
        for (double v : outd) CHECK(v == 1.0);
      }
}

TEST_CASE("bicubic matches direct kernel-evaluation oracle") {
  // the spec's worked case: src=[0,1], D=4, x in {-0.25, 0.25, 0.75, 1.25}
  std::vector<double> src = {0.0, 1.0};
  std::vector<double> got = upsample1d<double>(src, 4, InterpMethod::Bicubic);
  std::vector<double> want = bicubic_oracle(src, 4);
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);

  Rng rng(7);
  for (int rep = 0; rep < 50; ++rep) {
    int S = 1 + (int)rng.below(6);
    int D = S + (int)rng.below(12);
    std::vector<double> v((size_t)S);
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    std::vector<double> a = upsample1d<double>(v, D, InterpMethod::Bicubic);
    std::vector<double> b = bicubic_oracle(v, D);
    for (size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
  }
}

TEST_CASE("S == D is a bit-exact identity for every method") {
  Rng rng(13);
  for (InterpMethod m : kMethods) {
    std::vector<double> src(9);
    for (auto& v : src) v = rng.uniform(-5.0, 5.0);
    std::vector<double> out = upsample1d<double>(src, 9, m);
    for (size_t i = 0; i < src.size(); ++i) CHECK(out[i] == src[i]);
  }
}

TEST_CASE("downsampling is rejected") {
  CHECK_THROWS_AS(upsample1d<double>({1.0, 2.0, 3.0}, 2, InterpMethod::Nearest), Error);
}

TEST_CASE("nearest outputs are a subset of input values") {
  Rng rng(19);
  for (int rep = 0; rep < 20; ++rep) {
    int S = 1 + (int)rng.below(5);
    int D = S + (int)rng.below(9);
    std::vector<double> src((size_t)S);
    for (auto& v : src) v = rng.uniform(-1.0, 1.0);
    for (InterpMethod m : {InterpMethod::Nearest, InterpMethod::NearestExact}) {
      for (double v : upsample1d<double>(src, D, m)) {
        bool found = false;
        for (double s : src) found = found || (s == v);
        CHECK(found);
      }
    }
  }
}

TEST_CASE("linearity over random cases") {
  Rng rng(23);
  for (int rep = 0; rep < 60; ++rep) {
    int S = 1 + (int)rng.below(6);
    int D = S + (int)rng.below(10);
    InterpMethod m = kMethods[rng.below(3)];
    std::vector<double> x((size_t)S), y((size_t)S);
    for (auto& v : x) v = rng.uniform(-3.0, 3.0);
    for (auto& v : y) v = rng.uniform(-3.0, 3.0);
    double alpha = rng.uniform(-2.0, 2.0), beta = rng.uniform(-2.0, 2.0);
    std::vector<double> mix((size_t)S);
    for (int i = 0; i < S; ++i) mix[(size_t)i] = alpha * x[(size_t)i] + beta * y[(size_t)i];
    std::vector<double> up_mix = upsample1d<double>(mix, D, m);
    std::vector<double> ux = upsample1d<double>(x, D, m);
    std::vector<double> uy = upsample1d<double>(y, D, m);
    for (int d = 0; d < D; ++d) {
      double want = alpha * ux[(size_t)d] + beta * uy[(size_t)d];
      CHECK(std::abs(up_mix[(size_t)d] - want) < 1e-10 * std::max(1.0, std::abs(want)));
    }
  }
}

TEST_CASE("adjoint counting case and identity") {
  std::vector<double> adj = upsample1d_adjoint<double>({1.0, 1.0, 1.0, 1.0}, 2,
                                                       InterpMethod::Nearest);
  CHECK(adj == std::vector<double>{2.0, 2.0});

  std::vector<double> same = upsample1d_adjoint<double>({3.0, 4.0, 5.0}, 3,
                                                        InterpMethod::Bicubic);
  CHECK(same == std::vector<double>{3.0, 4.0, 5.0});
}

TEST_CASE("adjoint identity <up(x), y> == <x, upT(y)> over random cases") {
  Rng rng(29);
  for (int rep = 0; rep < 100; ++rep) {
    int S = 1 + (int)rng.below(7);
    int D = S + (int)rng.below(11);
    InterpMethod m = kMethods[rng.below(3)];
    std::vector<double> x((size_t)S), y((size_t)D);
    for (auto& v : x) v = rng.uniform(-2.0, 2.0);
    for (auto& v : y) v = rng.uniform(-2.0, 2.0);
    std::vector<double> ux = upsample1d<double>(x, D, m);
    std::vector<double> aty = upsample1d_adjoint<double>(y, S, m);
    double lhs = 0.0, rhs = 0.0;
    for (int d = 0; d < D; ++d) lhs += ux[(size_t)d] * y[(size_t)d];
    for (int s = 0; s < S; ++s) rhs += x[(size_t)s] * aty[(size_t)s];
    CHECK(std::abs(lhs - rhs) < 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("grid shape: ceil and clamp, including depthwise in-axis") {
  ModulationSpec spec{4, 4, InterpMethod::Bicubic};
  CHECK(grid_shape_for({64, 32, 3, 3}, spec) == std::vector<int>{16, 8, 3, 3});
  CHECK(grid_shape_for({16, 1, 3, 3}, spec) == std::vector<int>{4, 1, 3, 3});  // depthwise
  ModulationSpec s28{2, 8, InterpMethod::Nearest};
  CHECK(grid_shape_for({64, 32, 3, 3}, s28) == std::vector<int>{8, 16, 3, 3});
  ModulationSpec s11{1, 1, InterpMethod::Bicubic};
  CHECK(grid_shape_for({6, 5, 1, 1}, s11) == std::vector<int>{6, 5, 1, 1});
}

TEST_CASE("upsample_mod at (1,1) is bit-identical to the grid") {
  Rng rng(31);
  ModGrid<float> g;
  g.values = Tensor<float>::zeros({6, 5, 3, 3});
  for (auto& v : g.values.data) v = (float)rng.uniform(-1.0, 1.0);
  g.target_out = 6;
  g.target_in = 5;
  g.method = InterpMethod::Bicubic;
  Tensor<float> out = upsample_mod(g);
  REQUIRE(out.shape == g.values.shape);
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == g.values[i]);
}

TEST_CASE("upsample_mod of all-ones grid is exactly ones") {
  for (InterpMethod m : kMethods) {
    ModGrid<float> g;
    g.values = Tensor<float>::ones({2, 3, 3, 3});
    g.target_out = 7;
    g.target_in = 6;
    g.method = m;
    Tensor<float> out = upsample_mod(g);
    CHECK(out.shape == std::vector<int>{7, 6, 3, 3});
    for (float v : out.data) CHECK(v == 1.0f);
  }
}

TEST_CASE("upsample_mod 2x2 nearest plane replication") {
  ModGrid<double> g;
  g.values = Tensor<double>({2, 2, 1, 1}, {1, 2, 3, 4});
  g.target_out = 4;
  g.target_in = 4;
  g.method = InterpMethod::Nearest;
  Tensor<double> out = upsample_mod(g);
  // out[o][i] with axis-0 = out-channel blocks [[1,2],[3,4]] -> rows 1,1,3,3...
  std::vector<double> want = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(out.data == want);
}

TEST_CASE("upsample_mod adjoint inner-product identity on 4-d grids") {
  Rng rng(37);
  for (int rep = 0; rep < 40; ++rep) {
    int g_out = 1 + (int)rng.below(4), g_in = 1 + (int)rng.below(4);
    int t_out = g_out + (int)rng.below(5), t_in = g_in + (int)rng.below(5);
    int k = 1 + 2 * (int)rng.below(2);
    InterpMethod m = kMethods[rng.below(3)];
    ModGrid<double> g;
    g.values = Tensor<double>::zeros({g_out, g_in, k, k});
    for (auto& v : g.values.data) v = rng.uniform(-1.0, 1.0);
    g.target_out = t_out;
    g.target_in = t_in;
    g.method = m;
    Tensor<double> up = upsample_mod(g);
    Tensor<double> y = Tensor<double>::zeros(up.shape);
    for (auto& v : y.data) v = rng.uniform(-1.0, 1.0);
    Tensor<double> adj = upsample_mod_adjoint(y, g.values.shape, t_out, t_in, m);
    double lhs = 0.0, rhs = 0.0;
    for (int64_t i = 0; i < up.numel(); ++i) lhs += up[i] * y[i];
    for (int64_t i = 0; i < adj.numel(); ++i) rhs += g.values[i] * adj[i];
    CHECK(std::abs(lhs - rhs) < 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("upsample_grid_op gradient vs finite differences (linear map)") {
  Rng rng(41);
  Tensor<double> grid = Tensor<double>::zeros({2, 2, 1, 1});
  for (auto& v : grid.data) v = rng.uniform(0.5, 1.5);
  Tensor<double> r = Tensor<double>::zeros({4, 3, 1, 1});
  for (auto& v : r.data) v = rng.uniform(-1.0, 1.0);
  auto f = [&](Tape<double>& tp, Var<double> v) {
    auto up = upsample_grid_op(tp, v, 4, 3, InterpMethod::Bicubic);
    return sum_all(tp, mul(tp, up, tp.constant(r)));
  };
  CHECK(grad_check<double>(f, grid, 1e-6) < 1e-9);

  // the backward pass is the exact transpose, not merely close
  Tape<double> tp;
  auto gv = tp.leaf(grid, true);
  tp.backward(f(tp, gv));
  Tensor<double> adj = upsample_mod_adjoint(r, grid.shape, 4, 3, InterpMethod::Bicubic);
  for (int64_t i = 0; i < adj.numel(); ++i) CHECK(tp.grad(gv)[i] == adj[i]);
}

TEST_CASE("grid dims must not exceed targets") {
  ModGrid<double> g;
  g.values = Tensor<double>::zeros({4, 2, 1, 1});
  g.target_out = 3;  // smaller than grid axis
  g.target_in = 2;
  g.method = InterpMethod::Nearest;
  CHECK_THROWS_AS(upsample_mod(g), Error);
}
