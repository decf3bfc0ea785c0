#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "zfcl/error.hpp"

namespace zfcl {

static_assert(std::endian::native == std::endian::little,
              "serialized formats are little-endian; big-endian hosts unsupported");

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

// Dense row-major n-d array. Compute type is the template parameter; float16
// exists only as a storage encoding (see f16 helpers below).
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    check_shape(shape);
    if ((int64_t)data.size() != numel_of(shape))
      fail(Errc::ShapeMismatch, "data size " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }
  static void check_shape(const std::vector<int>& s) {
    for (int d : s)
      if (d <= 0) fail(Errc::InvalidGeometry, "non-positive dim in shape " + shape_str(s));
  }

  static Tensor zeros(std::vector<int> s) {
    check_shape(s);
    int64_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<T>((size_t)n, T(0)));
  }
  static Tensor full(std::vector<int> s, T v) {
    check_shape(s);
    int64_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<T>((size_t)n, v));
  }
  static Tensor ones(std::vector<int> s) { return full(std::move(s), T(1)); }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  int64_t numel() const { return (int64_t)data.size(); }
  int rank() const { return (int)shape.size(); }
  int dim(int i) const { return shape[(size_t)i]; }

  T& operator[](int64_t i) { return data[(size_t)i]; }
  const T& operator[](int64_t i) const { return data[(size_t)i]; }

  // 4-d accessor (row-major); used by conv/bn loops.
  T& at4(int a, int b, int c, int d) {
    return data[(size_t)(((int64_t)a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }
  const T& at4(int a, int b, int c, int d) const {
    return data[(size_t)(((int64_t)a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }
  T& at2(int a, int b) { return data[(size_t)((int64_t)a * shape[1] + b)]; }
  const T& at2(int a, int b) const { return data[(size_t)((int64_t)a * shape[1] + b)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> d(data.size());
    for (size_t i = 0; i < data.size(); ++i) d[i] = (U)data[i];
    return Tensor<U>(shape, std::move(d));
  }
};

inline void require_same_shape(const std::vector<int>& a, const std::vector<int>& b,
                               const char* what) {
  if (a != b)
    fail(Errc::ShapeMismatch,
         std::string(what) + ": " + shape_str(a) + " vs " + shape_str(b));
}

// ---- float16 storage conversion (IEEE binary16, round to nearest even) ----

inline uint16_t f32_to_f16(float f) {
  uint32_t x;
  std::memcpy(&x, &f, 4);
  uint32_t sign = (x >> 16) & 0x8000u;
  uint32_t exp = (x >> 23) & 0xFFu;
  uint32_t mant = x & 0x7FFFFFu;
  if (exp == 0xFF) {  // inf/nan
    return (uint16_t)(sign | 0x7C00u | (mant ? 0x200u : 0));
  }
  int e = (int)exp - 127 + 15;
  if (e >= 0x1F) return (uint16_t)(sign | 0x7C00u);  // overflow -> inf
  if (e <= 0) {
    // subnormal or zero
    if (e < -10) return (uint16_t)sign;
    mant |= 0x800000u;
    int shift = 14 - e;
    uint32_t half = mant >> shift;
    uint32_t rem = mant & ((1u << shift) - 1);
    uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half & 1))) half++;
    return (uint16_t)(sign | half);
  }
  uint32_t half = (uint32_t)(e << 10) | (mant >> 13);
  uint32_t rem = mant & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1))) half++;  // may carry into exp; that is correct
  return (uint16_t)(sign | half);
}

inline float f16_to_f32(uint16_t h) {
  uint32_t sign = (uint32_t)(h & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1Fu;
  uint32_t mant = h & 0x3FFu;
  uint32_t x;
  if (exp == 0) {
    if (mant == 0) {
      x = sign;
    } else {
      // subnormal: normalize
      int e = -1;
      do {
        mant <<= 1;
        e++;
      } while (!(mant & 0x400u));
      mant &= 0x3FFu;
      x = sign | (uint32_t)(127 - 15 - e) << 23 | (mant << 13);
    }
  } else if (exp == 0x1F) {
    x = sign | 0x7F800000u | (mant << 13);
  } else {
    x = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  float f;
  std::memcpy(&f, &x, 4);
  return f;
}

// ---- content hashing (FNV-1a 64) ----

inline uint64_t fnv1a64(const void* ptr, size_t n, uint64_t h = 14695981039346656037ull) {
  const uint8_t* p = (const uint8_t*)ptr;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

template <class T>
uint64_t tensor_hash(const Tensor<T>& t, uint64_t h = 14695981039346656037ull) {
  for (int d : t.shape) {
    int64_t v = d;
    h = fnv1a64(&v, sizeof(v), h);
  }
  if (!t.data.empty()) h = fnv1a64(t.data.data(), t.data.size() * sizeof(T), h);
  return h;
}

}  // namespace zfcl
