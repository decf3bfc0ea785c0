#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "zfcl/autodiff.hpp"
#include "zfcl/tensor.hpp"

namespace zfcl {

enum class InterpMethod { Nearest, NearestExact, Bicubic };

inline const char* interp_name(InterpMethod m) {
  switch (m) {
    case InterpMethod::Nearest: return "nearest";
    case InterpMethod::NearestExact: return "nearest-exact";
    case InterpMethod::Bicubic: return "bicubic";
  }
  return "?";
}

inline InterpMethod interp_from_name(const std::string& s) {
  if (s == "nearest") return InterpMethod::Nearest;
  if (s == "nearest-exact" || s == "nearest_exact") return InterpMethod::NearestExact;
  if (s == "bicubic" || s == "bi-cubic") return InterpMethod::Bicubic;
  fail(Errc::BadConfig, "unknown interpolation method '" + s + "'");
}

// Bicubic convolution kernel coefficient; fixed.
inline constexpr double kBicubicA = -0.75;

// One output position of a 1-d upsampling operator: up to four weighted source
// taps. Weights are computed in the compute type T; the last bicubic weight is
// one minus the others, so the four weights sum to exactly T(1) and an
// all-ones source reproduces exactly 1 after gathering in tap order.
template <class T>
struct AxisTaps {
  int n = 0;
  std::array<int, 4> idx{};
  std::array<T, 4> w{};
};

template <class T>
struct AxisMap {
  int src_len = 0;
  int dst_len = 0;
  bool identity = false;
  std::vector<AxisTaps<T>> taps;  // one per output position; empty if identity
};

template <class T>
AxisMap<T> make_axis_map(int src_len, int dst_len, InterpMethod method) {
  if (src_len < 1) fail(Errc::InvalidGeometry, "upsample source length must be >= 1");
  if (dst_len < src_len)
    fail(Errc::InvalidArgument, "downsampling unsupported: " + std::to_string(src_len) + " -> " +
                                    std::to_string(dst_len));
  AxisMap<T> map;
  map.src_len = src_len;
  map.dst_len = dst_len;
  if (src_len == dst_len) {
    map.identity = true;
    return map;
  }
  double scale = (double)src_len / (double)dst_len;
  map.taps.resize((size_t)dst_len);
  auto clampi = [src_len](int i) { return i < 0 ? 0 : (i >= src_len ? src_len - 1 : i); };
  for (int d = 0; d < dst_len; ++d) {
    AxisTaps<T>& tp = map.taps[(size_t)d];
    if (method == InterpMethod::Nearest) {
      tp.n = 1;
      tp.idx[0] = clampi((int)std::floor((double)d * scale));
      tp.w[0] = T(1);
    } else if (method == InterpMethod::NearestExact) {
      tp.n = 1;
      tp.idx[0] = clampi((int)std::floor(((double)d + 0.5) * scale));
      tp.w[0] = T(1);
    } else {
      double x = ((double)d + 0.5) * scale - 0.5;
      double base = std::floor(x);
      T t = (T)(x - base);
      int b = (int)base;
      const T A = (T)kBicubicA;
      T t1 = t + T(1);
      T w0 = ((A * t1 - T(5) * A) * t1 + T(8) * A) * t1 - T(4) * A;
      T w1 = ((A + T(2)) * t - (A + T(3))) * t * t + T(1);
      T u = T(1) - t;
      T w2 = ((A + T(2)) * u - (A + T(3))) * u * u + T(1);
      // Associate exactly like the gather loop ((w0+w1)+w2)+w3 so that a
      // constant-1 source reproduces exactly 1: wsum is in [0.5, 2], hence
      // 1 - wsum is exact (Sterbenz) and wsum + (1 - wsum) == 1.
      T wsum = (w0 + w1) + w2;
      T w3 = T(1) - wsum;
      tp.n = 4;
      tp.idx = {clampi(b - 1), clampi(b), clampi(b + 1), clampi(b + 2)};
      tp.w = {w0, w1, w2, w3};
    }
  }
  return map;
}

// dst[o, d, i] = sum_j w_j * src[o, idx_j, i] over a flattened
// (outer, axis, inner) view. Tap order is fixed for bit determinism.
template <class T>
void apply_axis_map(const AxisMap<T>& map, const T* src, T* dst, int64_t outer, int64_t inner) {
  if (map.identity) {
    int64_t n = outer * map.src_len * inner;
    for (int64_t i = 0; i < n; ++i) dst[i] = src[i];
    return;
  }
  for (int64_t o = 0; o < outer; ++o) {
    const T* sp = src + o * map.src_len * inner;
    T* dp = dst + o * map.dst_len * inner;
    for (int d = 0; d < map.dst_len; ++d) {
      const AxisTaps<T>& tp = map.taps[(size_t)d];
      T* row = dp + (int64_t)d * inner;
      for (int64_t i = 0; i < inner; ++i) {
        T acc = tp.w[0] * sp[(int64_t)tp.idx[0] * inner + i];
        for (int j = 1; j < tp.n; ++j) acc += tp.w[j] * sp[(int64_t)tp.idx[j] * inner + i];
        row[i] = acc;
      }
    }
  }
}

// Exact transpose of apply_axis_map: scatter-add with the same taps.
template <class T>
void apply_axis_map_adjoint(const AxisMap<T>& map, const T* cot, T* out, int64_t outer,
                            int64_t inner) {
  int64_t n_out = outer * map.src_len * inner;
  for (int64_t i = 0; i < n_out; ++i) out[i] = T(0);
  if (map.identity) {
    for (int64_t i = 0; i < n_out; ++i) out[i] = cot[i];
    return;
  }
  for (int64_t o = 0; o < outer; ++o) {
    const T* cp = cot + o * map.dst_len * inner;
    T* op = out + o * map.src_len * inner;
    for (int d = 0; d < map.dst_len; ++d) {
      const AxisTaps<T>& tp = map.taps[(size_t)d];
      const T* row = cp + (int64_t)d * inner;
      for (int j = 0; j < tp.n; ++j) {
        T w = tp.w[j];
        T* dst_row = op + (int64_t)tp.idx[j] * inner;
        for (int64_t i = 0; i < inner; ++i) dst_row[i] += w * row[i];
      }
    }
  }
}

// ---- 1-d convenience entry points (also the shapes the tests exercise) ----

template <class T>
std::vector<T> upsample1d(const std::vector<T>& src, int dst_len, InterpMethod method) {
  AxisMap<T> map = make_axis_map<T>((int)src.size(), dst_len, method);
  std::vector<T> dst((size_t)dst_len);
  if (map.identity) return src;
  apply_axis_map(map, src.data(), dst.data(), 1, 1);
  return dst;
}

template <class T>
std::vector<T> upsample1d_adjoint(const std::vector<T>& cotangent, int src_len,
                                  InterpMethod method) {
  AxisMap<T> map = make_axis_map<T>(src_len, (int)cotangent.size(), method);
  std::vector<T> out((size_t)src_len);
  apply_axis_map_adjoint(map, cotangent.data(), out.data(), 1, 1);
  return out;
}

// ---------------------------------------------------------------------------
// Modulation grids. A grid stores one value per (out-channel block, in-channel
// block, kernel position); the channel axes are expanded to the full weight
// shape by separable interpolation, kernel positions are never interpolated.

struct ModulationSpec {
  int m1 = 4;  // in-channel resolution divisor
  int m2 = 4;  // out-channel resolution divisor
  InterpMethod method = InterpMethod::Bicubic;
};

inline int grid_axis_len(int target, int m) {
  if (target < 1 || m < 1) fail(Errc::InvalidGeometry, "grid axis needs positive target and m");
  int g = (target + m - 1) / m;  // ceil, clamped to [1, target] by construction
  return g;
}

template <class T>
struct ModGrid {
  Tensor<T> values;  // [g_out, g_in, k1, k2]
  int target_out = 0;
  int target_in = 0;  // per-group input channels
  InterpMethod method = InterpMethod::Bicubic;
};

// Grid shape for a weight of shape [Cout, Cin_per_group, k1, k2].
inline std::vector<int> grid_shape_for(const std::vector<int>& weight_shape,
                                       const ModulationSpec& spec) {
  if (weight_shape.size() != 4) fail(Errc::ShapeMismatch, "weight must be rank 4");
  return {grid_axis_len(weight_shape[0], spec.m2), grid_axis_len(weight_shape[1], spec.m1),
          weight_shape[2], weight_shape[3]};
}

template <class T>
ModGrid<T> make_ones_grid(const std::vector<int>& weight_shape, const ModulationSpec& spec) {
  ModGrid<T> g;
  g.values = Tensor<T>::ones(grid_shape_for(weight_shape, spec));
  g.target_out = weight_shape[0];
  g.target_in = weight_shape[1];
  g.method = spec.method;
  return g;
}

template <class T>
void check_grid(const ModGrid<T>& grid) {
  if (grid.values.rank() != 4) fail(Errc::ShapeMismatch, "modulation grid must be rank 4");
  int g_out = grid.values.shape[0], g_in = grid.values.shape[1];
  if (g_out < 1 || g_out > grid.target_out || g_in < 1 || g_in > grid.target_in)
    fail(Errc::InvalidGeometry,
         "grid dims " + shape_str(grid.values.shape) + " exceed targets (" +
             std::to_string(grid.target_out) + "," + std::to_string(grid.target_in) + ")");
}

// Expands the grid to the full weight shape. Out-channel axis first, then the
// in-channel axis; the order is fixed so results are bit-reproducible.
template <class T>
Tensor<T> upsample_mod(const ModGrid<T>& grid) {
  check_grid(grid);
  int g_out = grid.values.shape[0], g_in = grid.values.shape[1];
  int k1 = grid.values.shape[2], k2 = grid.values.shape[3];
  int64_t kk = (int64_t)k1 * k2;
  AxisMap<T> map_out = make_axis_map<T>(g_out, grid.target_out, grid.method);
  AxisMap<T> map_in = make_axis_map<T>(g_in, grid.target_in, grid.method);
  Tensor<T> mid = Tensor<T>::zeros({grid.target_out, g_in, k1, k2});
  apply_axis_map(map_out, grid.values.data.data(), mid.data.data(), 1, g_in * kk);
  Tensor<T> out = Tensor<T>::zeros({grid.target_out, grid.target_in, k1, k2});
  apply_axis_map(map_in, mid.data.data(), out.data.data(), grid.target_out, kk);
  return out;
}

// Transpose of upsample_mod: in-channel axis adjoint first, then out-channel.
template <class T>
Tensor<T> upsample_mod_adjoint(const Tensor<T>& cotangent, const std::vector<int>& grid_shape,
                               int target_out, int target_in, InterpMethod method) {
  if (cotangent.rank() != 4 || (int)grid_shape.size() != 4)
    fail(Errc::ShapeMismatch, "upsample_mod_adjoint expects rank-4 shapes");
  if (cotangent.shape[0] != target_out || cotangent.shape[1] != target_in ||
      cotangent.shape[2] != grid_shape[2] || cotangent.shape[3] != grid_shape[3])
    fail(Errc::ShapeMismatch, "cotangent " + shape_str(cotangent.shape) +
                                  " does not match upsample output for grid " +
                                  shape_str(grid_shape));
  int g_out = grid_shape[0], g_in = grid_shape[1];
  int64_t kk = (int64_t)grid_shape[2] * grid_shape[3];
  AxisMap<T> map_out = make_axis_map<T>(g_out, target_out, method);
  AxisMap<T> map_in = make_axis_map<T>(g_in, target_in, method);
  Tensor<T> mid = Tensor<T>::zeros({target_out, g_in, grid_shape[2], grid_shape[3]});
  apply_axis_map_adjoint(map_in, cotangent.data.data(), mid.data.data(), target_out, kk);
  Tensor<T> out = Tensor<T>::zeros(grid_shape);
  apply_axis_map_adjoint(map_out, mid.data.data(), out.data.data(), 1, g_in * kk);
  return out;
}

// Differentiable upsampling of grid values to the full weight shape.
template <class T>
Var<T> upsample_grid_op(Tape<T>& tp, Var<T> grid_values, int target_out, int target_in,
                        InterpMethod method) {
  const Tensor<T>& gv = tp.val(grid_values);
  ModGrid<T> g{gv, target_out, target_in, method};
  Tensor<T> out = upsample_mod(g);
  std::vector<int> grid_shape = gv.shape;
  return tp.make_node(std::move(out), {grid_values},
                      [grid_values, grid_shape, target_out, target_in, method](Tape<T>& t,
                                                                               size_t self) {
                        if (!t.needs_grad(grid_values.id)) return;
                        const Tensor<T>& cot = t.grad_buf(self);
                        Tensor<T> adj = upsample_mod_adjoint(cot, grid_shape, target_out,
                                                             target_in, method);
                        Tensor<T>& dg = t.grad_buf(grid_values.id);
                        int64_t n = adj.numel();
                        for (int64_t i = 0; i < n; ++i) dg[i] += adj[i];
                      });
}

}  // namespace zfcl
