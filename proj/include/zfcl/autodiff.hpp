#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "zfcl/tensor.hpp"

namespace zfcl {

template <class T>
class Tape;

// Handle to a node on a tape. Cheap to copy; only valid for the tape that
// created it.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  size_t id = 0;
  bool valid() const { return tape != nullptr; }
};

// Reverse-mode tape. Nodes are recorded in execution order; backward replays
// them in reverse, which is a reverse topological order because an op can only
// consume nodes created before it. All accumulation loops run in fixed index
// order, so gradients are bit-reproducible for a given op sequence.
template <class T>
class Tape {
 public:
  Var<T> leaf(Tensor<T> value, bool trainable) {
    nodes_.push_back(NodeRec{std::move(value), Tensor<T>{}, nullptr, trainable, trainable});
    return Var<T>{this, nodes_.size() - 1};
  }
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  using BackFn = std::function<void(Tape<T>&, size_t)>;

  Var<T> make_node(Tensor<T> value, const std::vector<Var<T>>& parents, BackFn back) {
    bool needs = false;
    for (const auto& p : parents) {
      check_var(p);
      needs = needs || nodes_[p.id].needs_grad;
    }
    nodes_.push_back(NodeRec{std::move(value), Tensor<T>{}, needs ? std::move(back) : nullptr,
                             false, needs});
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& val(const Var<T>& v) const {
    check_var(v);
    return nodes_[v.id].value;
  }
  const Tensor<T>& val(size_t id) const { return nodes_[id].value; }

  bool needs_grad(const Var<T>& v) const {
    check_var(v);
    return nodes_[v.id].needs_grad;
  }
  bool needs_grad(size_t id) const { return nodes_[id].needs_grad; }

  // Gradient accumulator, allocated to zeros on first touch.
  Tensor<T>& grad_buf(size_t id) {
    NodeRec& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }
  bool has_grad(size_t id) const { return !nodes_[id].grad.data.empty(); }

  const Tensor<T>& grad(const Var<T>& v) {
    check_var(v);
    if (!ran_backward_) fail(Errc::InvalidArgument, "grad queried before backward");
    return grad_buf(v.id);
  }

  void backward(const Var<T>& loss) {
    check_var(loss);
    const NodeRec& ln = nodes_[loss.id];
    if (ln.value.numel() != 1)
      fail(Errc::NonScalarLoss,
           "backward requires a scalar loss, got shape " + shape_str(ln.value.shape));
    grad_buf(loss.id)[0] = T(1);
    for (size_t i = loss.id + 1; i-- > 0;) {
      NodeRec& n = nodes_[i];
      if (!n.needs_grad || !n.backprop || n.grad.data.empty()) continue;
      n.backprop(*this, i);
    }
    // Trainable leaves with no path to the loss get explicit zero gradients.
    for (size_t i = 0; i <= loss.id; ++i)
      if (nodes_[i].trainable) (void)grad_buf(i);
    ran_backward_ = true;
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct NodeRec {
    Tensor<T> value;
    Tensor<T> grad;
    BackFn backprop;
    bool trainable = false;
    bool needs_grad = false;
  };

  void check_var(const Var<T>& v) const {
    if (v.tape != this || v.id >= nodes_.size())
      fail(Errc::NotOnTape, "variable was not recorded on this tape");
  }

  std::vector<NodeRec> nodes_;
  bool ran_backward_ = false;
};

// ---------------------------------------------------------------------------
// Elementwise ops. Shapes must match exactly; the only broadcast is a
// single-element tensor against any shape.

enum class EwOp { Add, Mul };

namespace detail {

template <class T>
inline bool is_scalar_shape(const Tensor<T>& t) { return t.numel() == 1; }

}  // namespace detail

template <class T>
Var<T> add(Tape<T>& tp, Var<T> a, Var<T> b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  bool sa = detail::is_scalar_shape(av), sb = detail::is_scalar_shape(bv);
  if (!sa && !sb) require_same_shape(av.shape, bv.shape, "add");
  const Tensor<T>& big = sb ? av : bv;
  Tensor<T> out = Tensor<T>::zeros(big.shape);
  int64_t n = big.numel();
  if (sa && !sb) {
    T s = av[0];
    for (int64_t i = 0; i < n; ++i) out[i] = s + bv[i];
  } else if (sb && !sa) {
    T s = bv[0];
    for (int64_t i = 0; i < n; ++i) out[i] = av[i] + s;
  } else {
    for (int64_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
  }
  return tp.make_node(std::move(out), {a, b}, [a, b, sa, sb, n](Tape<T>& t, size_t self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.needs_grad(a.id)) {
      Tensor<T>& da = t.grad_buf(a.id);
      if (sa && !sb) {
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) acc += g[i];
        da[0] += acc;
      } else {
        for (int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
    }
    if (t.needs_grad(b.id)) {
      Tensor<T>& db = t.grad_buf(b.id);
      if (sb && !sa) {
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) acc += g[i];
        db[0] += acc;
      } else {
        for (int64_t i = 0; i < n; ++i) db[i] += g[i];
      }
    }
  });
}

template <class T>
Var<T> mul(Tape<T>& tp, Var<T> a, Var<T> b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  bool sa = detail::is_scalar_shape(av), sb = detail::is_scalar_shape(bv);
  if (!sa && !sb) require_same_shape(av.shape, bv.shape, "mul");
  const Tensor<T>& big = sb ? av : bv;
  Tensor<T> out = Tensor<T>::zeros(big.shape);
  int64_t n = big.numel();
  if (sa && !sb) {
    T s = av[0];
    for (int64_t i = 0; i < n; ++i) out[i] = s * bv[i];
  } else if (sb && !sa) {
    T s = bv[0];
    for (int64_t i = 0; i < n; ++i) out[i] = av[i] * s;
  } else {
    for (int64_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
  }
  return tp.make_node(std::move(out), {a, b}, [a, b, sa, sb, n](Tape<T>& t, size_t self) {
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& av2 = t.val(a.id);
    const Tensor<T>& bv2 = t.val(b.id);
    if (t.needs_grad(a.id)) {
      Tensor<T>& da = t.grad_buf(a.id);
      if (sa && !sb) {
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) acc += g[i] * bv2[i];
        da[0] += acc;
      } else if (sb && !sa) {
        T s = bv2[0];
        for (int64_t i = 0; i < n; ++i) da[i] += g[i] * s;
      } else {
        for (int64_t i = 0; i < n; ++i) da[i] += g[i] * bv2[i];
      }
    }
    if (t.needs_grad(b.id)) {
      Tensor<T>& db = t.grad_buf(b.id);
      if (sb && !sa) {
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) acc += g[i] * av2[i];
        db[0] += acc;
      } else if (sa && !sb) {
        T s = av2[0];
        for (int64_t i = 0; i < n; ++i) db[i] += g[i] * s;
      } else {
        for (int64_t i = 0; i < n; ++i) db[i] += g[i] * av2[i];
      }
    }
  });
}

template <class T>
Var<T> elementwise(Tape<T>& tp, EwOp op, Var<T> a, Var<T> b) {
  return op == EwOp::Add ? add(tp, a, b) : mul(tp, a, b);
}

template <class T>
Var<T> scale(Tape<T>& tp, Var<T> x, T c) {
  return mul(tp, x, tp.constant(Tensor<T>::scalar(c)));
}

// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(Tape<T>& tp, Var<T> a, Var<T> b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
    fail(Errc::ShapeMismatch,
         "matmul: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  int M = av.shape[0], K = av.shape[1], N = bv.shape[1];
  Tensor<T> out = Tensor<T>::zeros({M, N});
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      T acc = T(0);
      for (int k = 0; k < K; ++k) acc += av.at2(i, k) * bv.at2(k, j);
      out.at2(i, j) = acc;
    }
  return tp.make_node(std::move(out), {a, b}, [a, b, M, K, N](Tape<T>& t, size_t self) {
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& av2 = t.val(a.id);
    const Tensor<T>& bv2 = t.val(b.id);
    if (t.needs_grad(a.id)) {
      Tensor<T>& da = t.grad_buf(a.id);
      for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) {
          T acc = T(0);
          for (int j = 0; j < N; ++j) acc += g.at2(i, j) * bv2.at2(k, j);
          da.at2(i, k) += acc;
        }
    }
    if (t.needs_grad(b.id)) {
      Tensor<T>& db = t.grad_buf(b.id);
      for (int k = 0; k < K; ++k)
        for (int j = 0; j < N; ++j) {
          T acc = T(0);
          for (int i = 0; i < M; ++i) acc += av2.at2(i, k) * g.at2(i, j);
          db.at2(k, j) += acc;
        }
    }
  });
}

// y = x * w^T with w stored [out, in] (conv-style layout, so modulation grids
// see the same (out, in) axis order as convolution weights).
template <class T>
Var<T> linear(Tape<T>& tp, Var<T> x, Var<T> w) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& wv = tp.val(w);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.shape[1] != wv.shape[1])
    fail(Errc::ShapeMismatch,
         "linear: " + shape_str(xv.shape) + " with weight " + shape_str(wv.shape));
  int B = xv.shape[0], K = xv.shape[1], O = wv.shape[0];
  Tensor<T> out = Tensor<T>::zeros({B, O});
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o) {
      T acc = T(0);
      for (int k = 0; k < K; ++k) acc += xv.at2(b, k) * wv.at2(o, k);
      out.at2(b, o) = acc;
    }
  return tp.make_node(std::move(out), {x, w}, [x, w, B, K, O](Tape<T>& t, size_t self) {
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& xv2 = t.val(x.id);
    const Tensor<T>& wv2 = t.val(w.id);
    if (t.needs_grad(x.id)) {
      Tensor<T>& dx = t.grad_buf(x.id);
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
          T acc = T(0);
          for (int o = 0; o < O; ++o) acc += g.at2(b, o) * wv2.at2(o, k);
          dx.at2(b, k) += acc;
        }
    }
    if (t.needs_grad(w.id)) {
      Tensor<T>& dw = t.grad_buf(w.id);
      for (int o = 0; o < O; ++o)
        for (int k = 0; k < K; ++k) {
          T acc = T(0);
          for (int b = 0; b < B; ++b) acc += g.at2(b, o) * xv2.at2(b, k);
          dw.at2(o, k) += acc;
        }
    }
  });
}

// Cross-correlation convention (no kernel flip). x: [B,Cin,H,W],
// w: [Cout,Cin/groups,kh,kw] -> [B,Cout,H',W'].
template <class T>
Var<T> conv2d(Tape<T>& tp, Var<T> x, Var<T> w, int stride, int pad, int groups = 1) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& wv = tp.val(w);
  if (xv.rank() != 4 || wv.rank() != 4)
    fail(Errc::ShapeMismatch, "conv2d expects 4-d input and weight, got " +
                                  shape_str(xv.shape) + " and " + shape_str(wv.shape));
  int B = xv.shape[0], Cin = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  int Cout = wv.shape[0], Cpg = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3];
  if (groups < 1 || Cin % groups != 0 || Cout % groups != 0 || Cin / groups != Cpg)
    fail(Errc::ShapeMismatch, "conv2d groups=" + std::to_string(groups) + " with input " +
                                  shape_str(xv.shape) + " weight " + shape_str(wv.shape));
  if (stride < 1 || pad < 0) fail(Errc::InvalidGeometry, "conv2d stride/pad invalid");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad - kh < 0 || W + 2 * pad - kw < 0 || Ho <= 0 || Wo <= 0)
    fail(Errc::InvalidGeometry, "conv2d output size is non-positive for input " +
                                    shape_str(xv.shape) + " kernel " + shape_str(wv.shape));
  int cout_pg = Cout / groups;
  Tensor<T> out = Tensor<T>::zeros({B, Cout, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Cout; ++co) {
      int grp = co / cout_pg;
      int ci0 = grp * Cpg;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          T acc = T(0);
          for (int c = 0; c < Cpg; ++c)
            for (int u = 0; u < kh; ++u) {
              int ih = oh * stride - pad + u;
              if (ih < 0 || ih >= H) continue;
              for (int v = 0; v < kw; ++v) {
                int iw = ow * stride - pad + v;
                if (iw < 0 || iw >= W) continue;
                acc += xv.at4(b, ci0 + c, ih, iw) * wv.at4(co, c, u, v);
              }
            }
          out.at4(b, co, oh, ow) = acc;
        }
    }
  return tp.make_node(
      std::move(out), {x, w},
      [x, w, B, Cin, H, W, Cout, Cpg, kh, kw, stride, pad, cout_pg, Ho, Wo](Tape<T>& t,
                                                                            size_t self) {
        const Tensor<T>& g = t.grad_buf(self);
        const Tensor<T>& xv2 = t.val(x.id);
        const Tensor<T>& wv2 = t.val(w.id);
        bool nx = t.needs_grad(x.id), nw = t.needs_grad(w.id);
        Tensor<T>* dx = nx ? &t.grad_buf(x.id) : nullptr;
        Tensor<T>* dw = nw ? &t.grad_buf(w.id) : nullptr;
        (void)Cin;
        for (int b = 0; b < B; ++b)
          for (int co = 0; co < Cout; ++co) {
            int grp = co / cout_pg;
            int ci0 = grp * Cpg;
            for (int oh = 0; oh < Ho; ++oh)
              for (int ow = 0; ow < Wo; ++ow) {
                T go = g.at4(b, co, oh, ow);
                if (go == T(0)) continue;
                for (int c = 0; c < Cpg; ++c)
                  for (int u = 0; u < kh; ++u) {
                    int ih = oh * stride - pad + u;
                    if (ih < 0 || ih >= H) continue;
                    for (int v = 0; v < kw; ++v) {
                      int iw = ow * stride - pad + v;
                      if (iw < 0 || iw >= W) continue;
                      if (nx) dx->at4(b, ci0 + c, ih, iw) += go * wv2.at4(co, c, u, v);
                      if (nw) dw->at4(co, c, u, v) += go * xv2.at4(b, ci0 + c, ih, iw);
                    }
                  }
              }
          }
      });
}

// Adds a per-channel bias along axis 1 of a rank-2 or rank-4 tensor.
template <class T>
Var<T> bias_add(Tape<T>& tp, Var<T> x, Var<T> bias) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& bv = tp.val(bias);
  if (bv.rank() != 1 || (xv.rank() != 2 && xv.rank() != 4) || xv.shape[1] != bv.shape[0])
    fail(Errc::ShapeMismatch,
         "bias_add: " + shape_str(xv.shape) + " with bias " + shape_str(bv.shape));
  int C = bv.shape[0];
  int64_t outer = xv.shape[0];
  int64_t inner = xv.numel() / (outer * C);
  Tensor<T> out = xv;
  for (int64_t o = 0; o < outer; ++o)
    for (int c = 0; c < C; ++c) {
      T b = bv[c];
      T* row = &out.data[(size_t)((o * C + c) * inner)];
      for (int64_t i = 0; i < inner; ++i) row[i] += b;
    }
  return tp.make_node(std::move(out), {x, bias},
                      [x, bias, C, outer, inner](Tape<T>& t, size_t self) {
                        const Tensor<T>& g = t.grad_buf(self);
                        if (t.needs_grad(x.id)) {
                          Tensor<T>& dx = t.grad_buf(x.id);
                          int64_t n = g.numel();
                          for (int64_t i = 0; i < n; ++i) dx[i] += g[i];
                        }
                        if (t.needs_grad(bias.id)) {
                          Tensor<T>& db = t.grad_buf(bias.id);
                          for (int c = 0; c < C; ++c) {
                            T acc = T(0);
                            for (int64_t o = 0; o < outer; ++o) {
                              const T* row = &g.data[(size_t)((o * C + c) * inner)];
                              for (int64_t i = 0; i < inner; ++i) acc += row[i];
                            }
                            db[c] += acc;
                          }
                        }
                      });
}

template <class T>
Var<T> relu(Tape<T>& tp, Var<T> x) {
  const Tensor<T>& xv = tp.val(x);
  Tensor<T> out = xv;
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i)
    if (out[i] < T(0)) out[i] = T(0);
  return tp.make_node(std::move(out), {x}, [x, n](Tape<T>& t, size_t self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (!t.needs_grad(x.id)) return;
    const Tensor<T>& xv2 = t.val(x.id);
    Tensor<T>& dx = t.grad_buf(x.id);
    for (int64_t i = 0; i < n; ++i)
      if (xv2[i] > T(0)) dx[i] += g[i];
  });
}

template <class T>
Var<T> reshape(Tape<T>& tp, Var<T> x, std::vector<int> new_shape) {
  const Tensor<T>& xv = tp.val(x);
  Tensor<T>::check_shape(new_shape);
  if (Tensor<T>::numel_of(new_shape) != xv.numel())
    fail(Errc::ShapeMismatch,
         "reshape " + shape_str(xv.shape) + " -> " + shape_str(new_shape));
  Tensor<T> out(new_shape, xv.data);
  return tp.make_node(std::move(out), {x}, [x](Tape<T>& t, size_t self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (!t.needs_grad(x.id)) return;
    Tensor<T>& dx = t.grad_buf(x.id);
    int64_t n = g.numel();
    for (int64_t i = 0; i < n; ++i) dx[i] += g[i];
  });
}

template <class T>
Var<T> global_avg_pool(Tape<T>& tp, Var<T> x) {
  const Tensor<T>& xv = tp.val(x);
  if (xv.rank() != 4) fail(Errc::ShapeMismatch, "global_avg_pool expects rank 4");
  int B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  T inv = T(1) / (T)(H * W);
  Tensor<T> out = Tensor<T>::zeros({B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      T acc = T(0);
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) acc += xv.at4(b, c, h, w);
      out.at2(b, c) = acc * inv;
    }
  return tp.make_node(std::move(out), {x}, [x, B, C, H, W, inv](Tape<T>& t, size_t self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (!t.needs_grad(x.id)) return;
    Tensor<T>& dx = t.grad_buf(x.id);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        T gv = g.at2(b, c) * inv;
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) dx.at4(b, c, h, w) += gv;
      }
  });
}

template <class T>
Var<T> sum_all(Tape<T>& tp, Var<T> x) {
  const Tensor<T>& xv = tp.val(x);
  T acc = T(0);
  int64_t n = xv.numel();
  for (int64_t i = 0; i < n; ++i) acc += xv[i];
  return tp.make_node(Tensor<T>::scalar(acc), {x}, [x, n](Tape<T>& t, size_t self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (!t.needs_grad(x.id)) return;
    Tensor<T>& dx = t.grad_buf(x.id);
    T gv = g[0];
    for (int64_t i = 0; i < n; ++i) dx[i] += gv;
  });
}

// Mean over batch of -log softmax(logits)[label], stabilized by max
// subtraction. logits: [B,C].
template <class T>
Var<T> cross_entropy(Tape<T>& tp, Var<T> logits, const std::vector<int>& labels) {
  const Tensor<T>& lv = tp.val(logits);
  if (lv.rank() != 2) fail(Errc::ShapeMismatch, "cross_entropy expects [B,C] logits");
  int B = lv.shape[0], C = lv.shape[1];
  if ((int)labels.size() != B)
    fail(Errc::ShapeMismatch, "cross_entropy: " + std::to_string(labels.size()) +
                                  " labels for batch " + std::to_string(B));
  for (int b = 0; b < B; ++b)
    if (labels[b] < 0 || labels[b] >= C)
      fail(Errc::LabelOutOfRange, "label " + std::to_string(labels[b]) + " for " +
                                      std::to_string(C) + " classes at row " + std::to_string(b));
  auto probs = std::make_shared<Tensor<T>>(Tensor<T>::zeros({B, C}));
  T loss = T(0);
  for (int b = 0; b < B; ++b) {
    T m = lv.at2(b, 0);
    for (int c = 1; c < C; ++c) m = std::max(m, lv.at2(b, c));
    T z = T(0);
    for (int c = 0; c < C; ++c) z += std::exp(lv.at2(b, c) - m);
    T logz = std::log(z) + m;
    for (int c = 0; c < C; ++c) probs->at2(b, c) = std::exp(lv.at2(b, c) - logz);
    loss += logz - lv.at2(b, labels[b]);
  }
  loss /= (T)B;
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return tp.make_node(Tensor<T>::scalar(loss), {logits},
                      [logits, probs, labels_copy, B, C](Tape<T>& t, size_t self) {
                        if (!t.needs_grad(logits.id)) return;
                        T g = t.grad_buf(self)[0];
                        Tensor<T>& dl = t.grad_buf(logits.id);
                        T invb = g / (T)B;
                        for (int b = 0; b < B; ++b)
                          for (int c = 0; c < C; ++c) {
                            T p = probs->at2(b, c);
                            if (c == (*labels_copy)[b]) p -= T(1);
                            dl.at2(b, c) += p * invb;
                          }
                      });
}

// Distillation cross-entropy between temperature-softened teacher and student
// outputs: mean over batch of -sum_c softmax(teacher/T)_c * log softmax(student/T)_c.
// The teacher is a plain tensor (frozen snapshot), never differentiated.
template <class T>
Var<T> distill_ce(Tape<T>& tp, Var<T> student, const Tensor<T>& teacher_logits, T temperature) {
  const Tensor<T>& sv = tp.val(student);
  if (sv.rank() != 2) fail(Errc::ShapeMismatch, "distill_ce expects [B,C] logits");
  require_same_shape(sv.shape, teacher_logits.shape, "distill_ce");
  if (!(temperature > T(0))) fail(Errc::InvalidArgument, "temperature must be > 0");
  int B = sv.shape[0], C = sv.shape[1];
  auto softmax_t = [C](const Tensor<T>& z, int b, T invT, Tensor<T>& out) {
    T m = z.at2(b, 0) * invT;
    for (int c = 1; c < C; ++c) m = std::max(m, z.at2(b, c) * invT);
    T s = T(0);
    for (int c = 0; c < C; ++c) s += std::exp(z.at2(b, c) * invT - m);
    T logz = std::log(s) + m;
    for (int c = 0; c < C; ++c) out.at2(b, c) = std::exp(z.at2(b, c) * invT - logz);
  };
  T invT = T(1) / temperature;
  auto pt = std::make_shared<Tensor<T>>(Tensor<T>::zeros({B, C}));
  auto ps = std::make_shared<Tensor<T>>(Tensor<T>::zeros({B, C}));
  T loss = T(0);
  for (int b = 0; b < B; ++b) {
    softmax_t(teacher_logits, b, invT, *pt);
    T m = sv.at2(b, 0) * invT;
    for (int c = 1; c < C; ++c) m = std::max(m, sv.at2(b, c) * invT);
    T s = T(0);
    for (int c = 0; c < C; ++c) s += std::exp(sv.at2(b, c) * invT - m);
    T logz = std::log(s) + m;
    for (int c = 0; c < C; ++c) {
      ps->at2(b, c) = std::exp(sv.at2(b, c) * invT - logz);
      loss += pt->at2(b, c) * (logz - sv.at2(b, c) * invT);
    }
  }
  loss /= (T)B;
  return tp.make_node(Tensor<T>::scalar(loss), {student},
                      [student, pt, ps, B, C, invT](Tape<T>& t, size_t self) {
                        if (!t.needs_grad(student.id)) return;
                        T g = t.grad_buf(self)[0];
                        Tensor<T>& ds = t.grad_buf(student.id);
                        T k = g * invT / (T)B;
                        for (int b = 0; b < B; ++b)
                          for (int c = 0; c < C; ++c)
                            ds.at2(b, c) += k * (ps->at2(b, c) - pt->at2(b, c));
                      });
}

// Binary mask with a straight-through backward: forward is indicator(s > tau),
// backward treats the indicator as identity.
template <class T>
Var<T> binarize_ste(Tape<T>& tp, Var<T> scores, T tau) {
  const Tensor<T>& sv = tp.val(scores);
  Tensor<T> out = Tensor<T>::zeros(sv.shape);
  int64_t n = sv.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = sv[i] > tau ? T(1) : T(0);
  return tp.make_node(std::move(out), {scores}, [scores, n](Tape<T>& t, size_t self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (!t.needs_grad(scores.id)) return;
    Tensor<T>& ds = t.grad_buf(scores.id);
    for (int64_t i = 0; i < n; ++i) ds[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Batch normalization over the channel axis (axis 1) of a rank-2 or rank-4
// input. Train mode normalizes by the two-pass batch statistics and exposes
// them to the caller for the running-average update; eval mode is a pure
// per-channel affine map using the provided running statistics.

template <class T>
struct BnTrainResult {
  Var<T> y;
  Tensor<T> batch_mean;  // [C]
  Tensor<T> batch_var;   // [C], biased (divide by N)
};

namespace detail {

template <class T>
inline void bn_check_input(const Tensor<T>& xv, int C, const char* who) {
  if ((xv.rank() != 2 && xv.rank() != 4) || xv.shape[1] != C)
    fail(Errc::ShapeMismatch,
         std::string(who) + ": input " + shape_str(xv.shape) + " for width " + std::to_string(C));
}

}  // namespace detail

template <class T>
BnTrainResult<T> batch_norm_train(Tape<T>& tp, Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& gv = tp.val(gamma);
  int C = gv.shape[0];
  detail::bn_check_input(xv, C, "batch_norm_train");
  require_same_shape(gv.shape, tp.val(beta).shape, "batch_norm_train gamma/beta");
  int B = xv.shape[0];
  if (B < 2) fail(Errc::BatchTooSmall, "train-mode batch norm requires batch >= 2");
  int spatial = xv.rank() == 4 ? xv.shape[2] * xv.shape[3] : 1;
  int64_t N = (int64_t)B * spatial;

  auto mean = std::make_shared<Tensor<T>>(Tensor<T>::zeros({C}));
  auto invstd = std::make_shared<Tensor<T>>(Tensor<T>::zeros({C}));
  Tensor<T> var = Tensor<T>::zeros({C});
  for (int c = 0; c < C; ++c) {
    T acc = T(0);
    for (int b = 0; b < B; ++b) {
      const T* p = &xv.data[(size_t)(((int64_t)b * C + c) * spatial)];
      for (int s = 0; s < spatial; ++s) acc += p[s];
    }
    T mu = acc / (T)N;
    T vacc = T(0);
    for (int b = 0; b < B; ++b) {
      const T* p = &xv.data[(size_t)(((int64_t)b * C + c) * spatial)];
      for (int s = 0; s < spatial; ++s) {
        T d = p[s] - mu;
        vacc += d * d;
      }
    }
    (*mean)[c] = mu;
    var[c] = vacc / (T)N;
    (*invstd)[c] = T(1) / std::sqrt(var[c] + eps);
  }

  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  const Tensor<T>& bv = tp.val(beta);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* p = &xv.data[(size_t)(((int64_t)b * C + c) * spatial)];
      T* q = &out.data[(size_t)(((int64_t)b * C + c) * spatial)];
      T mu = (*mean)[c], is = (*invstd)[c], ga = gv[c], be = bv[c];
      for (int s = 0; s < spatial; ++s) q[s] = ga * ((p[s] - mu) * is) + be;
    }

  Var<T> y = tp.make_node(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, mean, invstd, B, C, spatial, N](Tape<T>& t, size_t self) {
        const Tensor<T>& g = t.grad_buf(self);
        const Tensor<T>& xv2 = t.val(x.id);
        const Tensor<T>& gv2 = t.val(gamma.id);
        bool nx = t.needs_grad(x.id);
        bool ng = t.needs_grad(gamma.id);
        bool nb = t.needs_grad(beta.id);
        Tensor<T>* dx = nx ? &t.grad_buf(x.id) : nullptr;
        Tensor<T>* dg = ng ? &t.grad_buf(gamma.id) : nullptr;
        Tensor<T>* db = nb ? &t.grad_buf(beta.id) : nullptr;
        for (int c = 0; c < C; ++c) {
          T mu = (*mean)[c], is = (*invstd)[c], ga = gv2[c];
          T s1 = T(0), s2 = T(0), sb = T(0);
          for (int b = 0; b < B; ++b) {
            const T* gp = &g.data[(size_t)(((int64_t)b * C + c) * spatial)];
            const T* xp = &xv2.data[(size_t)(((int64_t)b * C + c) * spatial)];
            for (int s = 0; s < spatial; ++s) {
              T xhat = (xp[s] - mu) * is;
              T dxhat = gp[s] * ga;
              s1 += dxhat;
              s2 += dxhat * xhat;
              sb += gp[s];
            }
          }
          if (ng) {
            T acc = T(0);
            for (int b = 0; b < B; ++b) {
              const T* gp = &g.data[(size_t)(((int64_t)b * C + c) * spatial)];
              const T* xp = &xv2.data[(size_t)(((int64_t)b * C + c) * spatial)];
              for (int s = 0; s < spatial; ++s) acc += gp[s] * ((xp[s] - mu) * is);
            }
            (*dg)[c] += acc;
          }
          if (nb) (*db)[c] += sb;
          if (nx) {
            T invn = T(1) / (T)N;
            for (int b = 0; b < B; ++b) {
              const T* gp = &g.data[(size_t)(((int64_t)b * C + c) * spatial)];
              const T* xp = &xv2.data[(size_t)(((int64_t)b * C + c) * spatial)];
              T* dp = &dx->data[(size_t)(((int64_t)b * C + c) * spatial)];
              for (int s = 0; s < spatial; ++s) {
                T xhat = (xp[s] - mu) * is;
                dp[s] += is * (gp[s] * ga - s1 * invn - xhat * s2 * invn);
              }
            }
          }
        }
      });
  return BnTrainResult<T>{y, *mean, var};
}

template <class T>
Var<T> batch_norm_eval(Tape<T>& tp, Var<T> x, Var<T> gamma, Var<T> beta,
                       const Tensor<T>& running_mean, const Tensor<T>& running_var, T eps) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& gv = tp.val(gamma);
  int C = gv.shape[0];
  detail::bn_check_input(xv, C, "batch_norm_eval");
  require_same_shape(running_mean.shape, gv.shape, "batch_norm_eval running_mean");
  require_same_shape(running_var.shape, gv.shape, "batch_norm_eval running_var");
  int B = xv.shape[0];
  int spatial = xv.rank() == 4 ? xv.shape[2] * xv.shape[3] : 1;
  auto invstd = std::make_shared<Tensor<T>>(Tensor<T>::zeros({C}));
  auto mean = std::make_shared<Tensor<T>>(running_mean);
  for (int c = 0; c < C; ++c) (*invstd)[c] = T(1) / std::sqrt(running_var[c] + eps);
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  const Tensor<T>& bv = tp.val(beta);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* p = &xv.data[(size_t)(((int64_t)b * C + c) * spatial)];
      T* q = &out.data[(size_t)(((int64_t)b * C + c) * spatial)];
      T mu = (*mean)[c], is = (*invstd)[c], ga = gv[c], be = bv[c];
      for (int s = 0; s < spatial; ++s) q[s] = ga * ((p[s] - mu) * is) + be;
    }
  return tp.make_node(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, mean, invstd, B, C, spatial](Tape<T>& t, size_t self) {
                        const Tensor<T>& g = t.grad_buf(self);
                        const Tensor<T>& xv2 = t.val(x.id);
                        const Tensor<T>& gv2 = t.val(gamma.id);
                        bool nx = t.needs_grad(x.id);
                        bool ng = t.needs_grad(gamma.id);
                        bool nb = t.needs_grad(beta.id);
                        for (int c = 0; c < C; ++c) {
                          T mu = (*mean)[c], is = (*invstd)[c], ga = gv2[c];
                          T accg = T(0), accb = T(0);
                          for (int b = 0; b < B; ++b) {
                            const T* gp = &g.data[(size_t)(((int64_t)b * C + c) * spatial)];
                            const T* xp = &xv2.data[(size_t)(((int64_t)b * C + c) * spatial)];
                            for (int s = 0; s < spatial; ++s) {
                              accg += gp[s] * ((xp[s] - mu) * is);
                              accb += gp[s];
                            }
                          }
                          if (ng) t.grad_buf(gamma.id)[c] += accg;
                          if (nb) t.grad_buf(beta.id)[c] += accb;
                          if (nx) {
                            Tensor<T>& dx = t.grad_buf(x.id);
                            T k = ga * is;
                            for (int b = 0; b < B; ++b) {
                              const T* gp = &g.data[(size_t)(((int64_t)b * C + c) * spatial)];
                              T* dp = &dx.data[(size_t)(((int64_t)b * C + c) * spatial)];
                              for (int s = 0; s < spatial; ++s) dp[s] += gp[s] * k;
                            }
                          }
                        }
                      });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker. f must build a scalar from x on the
// given tape; errors are |analytic - central difference| / max(1, |analytic|),
// maximized over the coordinates of x.

template <class T>
double grad_check(const std::function<Var<T>(Tape<T>&, Var<T>)>& f, const Tensor<T>& x,
                  double eps = 1e-6) {
  if (!(eps > 0)) fail(Errc::InvalidArgument, "grad_check eps must be > 0");
  Tape<T> tape;
  Var<T> xv = tape.leaf(x, true);
  Var<T> loss = f(tape, xv);
  if (tape.val(loss).numel() != 1) fail(Errc::NonScalarLoss, "grad_check: f is not scalar-valued");
  tape.backward(loss);
  Tensor<T> analytic = tape.grad(xv);

  auto eval = [&](const Tensor<T>& xt) -> double {
    Tape<T> t2;
    Var<T> leaf = t2.leaf(xt, false);
    Var<T> out = f(t2, leaf);
    return (double)t2.val(out)[0];
  };

  double worst = 0.0;
  Tensor<T> xp = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    T orig = xp[i];
    xp[i] = orig + (T)eps;
    double fp = eval(xp);
    xp[i] = orig - (T)eps;
    double fm = eval(xp);
    xp[i] = orig;
    double numeric = (fp - fm) / (2.0 * eps);
    double a = (double)analytic[i];
    double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace zfcl
