#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <vector>

#include "g2b/autograd.hpp"

namespace g2b {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

namespace detail {

// im2col for one sample: x [Cin,H,W] -> col [Cin*kh*kw, OH*OW].
template <class T>
void im2col(const T* x, int cin, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, T* col) {
  for (int c = 0; c < cin; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * (oh * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ki - pad;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kj - pad;
            row[oy * ow + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    ? x[(c * h + iy) * w + ix]
                                    : T(0);
          }
        }
      }
    }
  }
}

// Accumulating inverse of im2col.
template <class T>
void col2im_add(const T* col, int cin, int h, int w, int kh, int kw,
                int stride, int pad, int oh, int ow, T* dx) {
  for (int c = 0; c < cin; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * (oh * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kj - pad;
            if (ix < 0 || ix >= w) continue;
            dx[(c * h + iy) * w + ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

inline int conv_out_side(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// 2-D convolution. x [N,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout] (pass an
// empty-valued Var to skip the bias). One im2col GEMM per sample; the column
// buffer is rebuilt in the backward pass instead of cached.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride,
              int pad) {
  const Shape& xs = x->value.shape;
  const Shape& ws = w->value.shape;
  if (xs.size() != 4 || ws.size() != 4)
    throw ShapeError(cat("conv2d: expected 4-d input/weight, got ",
                         shape_str(xs), " and ", shape_str(ws)));
  const int n = xs[0], cin = xs[1], h = xs[2], w_in = xs[3];
  const int cout = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != cin)
    throw ShapeError(cat("conv2d: input has ", cin, " channels but weight expects ",
                         ws[1]));
  const bool has_bias = !b->value.empty();
  if (has_bias && (b->value.rank() != 1 || b->value.dim(0) != cout))
    throw ShapeError("conv2d: bias shape mismatch");
  const int oh = detail::conv_out_side(h, kh, stride, pad);
  const int ow = detail::conv_out_side(w_in, kw, stride, pad);
  if (oh < 1 || ow < 1)
    throw ShapeError(cat("conv2d: output side would be empty for input ",
                         shape_str(xs)));
  const int k = cin * kh * kw;
  const int spatial = oh * ow;

  Tensor<T> out({n, cout, oh, ow});
  std::vector<T> col(static_cast<size_t>(k) * spatial);
  ECMap<T> wm(w->value.data(), cout, k);
  for (int i = 0; i < n; ++i) {
    detail::im2col(x->value.data() + static_cast<int64_t>(i) * cin * h * w_in,
                   cin, h, w_in, kh, kw, stride, pad, oh, ow, col.data());
    ECMap<T> cm(col.data(), k, spatial);
    EMap<T> ym(out.data() + static_cast<int64_t>(i) * cout * spatial, cout,
               spatial);
    ym.noalias() = wm * cm;
    if (has_bias) {
      for (int co = 0; co < cout; ++co) {
        T bv = b->value.v[co];
        T* row = out.data() + (static_cast<int64_t>(i) * cout + co) * spatial;
        for (int p = 0; p < spatial; ++p) row[p] += bv;
      }
    }
  }

  auto bp = [stride, pad, n, cin, h, w_in, cout, kh, kw, oh, ow, k, spatial,
             has_bias](Node<T>& self) {
    auto& xp = *self.parents[0];
    auto& wp = *self.parents[1];
    auto& bpr = *self.parents[2];
    std::vector<T> col(static_cast<size_t>(k) * spatial);
    ECMap<T> wm(wp.value.data(), cout, k);
    Tensor<T>* dx = xp.needs_grad ? &xp.ensure_grad() : nullptr;
    Tensor<T>* dw = wp.needs_grad ? &wp.ensure_grad() : nullptr;
    Tensor<T>* db = (has_bias && bpr.needs_grad) ? &bpr.ensure_grad() : nullptr;
    std::vector<T> dcol(static_cast<size_t>(k) * spatial);
    for (int i = 0; i < n; ++i) {
      ECMap<T> gy(self.grad.data() + static_cast<int64_t>(i) * cout * spatial,
                  cout, spatial);
      if (dw || dx)
        detail::im2col(xp.value.data() + static_cast<int64_t>(i) * cin * h * w_in,
                       cin, h, w_in, kh, kw, stride, pad, oh, ow, col.data());
      if (dw) {
        ECMap<T> cm(col.data(), k, spatial);
        EMap<T> dwm(dw->data(), cout, k);
        dwm.noalias() += gy * cm.transpose();
      }
      if (db) {
        for (int co = 0; co < cout; ++co) {
          T s = 0;
          const T* row =
              self.grad.data() + (static_cast<int64_t>(i) * cout + co) * spatial;
          for (int p = 0; p < spatial; ++p) s += row[p];
          db->v[co] += s;
        }
      }
      if (dx) {
        EMap<T> dcm(dcol.data(), k, spatial);
        dcm.noalias() = wm.transpose() * gy;
        detail::col2im_add(dcol.data(), cin, h, w_in, kh, kw, stride, pad, oh,
                           ow, dx->data() + static_cast<int64_t>(i) * cin * h * w_in);
      }
    }
  };
  return make_op<T>(std::move(out), {x, w, b}, std::move(bp));
}

// Max pooling with window == stride. Ties resolve to the first (row-major)
// maximum so the backward pass is deterministic.
template <class T>
Var<T> maxpool2d(const Var<T>& x, int window) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 4)
    throw ShapeError(cat("maxpool2d: expected 4-d input, got ", shape_str(xs)));
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  if (window < 1 || h % window != 0 || w % window != 0)
    throw ShapeError(cat("maxpool2d: window ", window,
                         " does not tile input ", shape_str(xs)));
  const int oh = h / window, ow = w / window;
  Tensor<T> out({n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<int32_t>>(out.size());
  int64_t oi = 0;
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = x->value.data() + (static_cast<int64_t>(i) * c + ch) * h * w;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++oi) {
          T best = plane[(oy * window) * w + ox * window];
          int32_t besti = (oy * window) * w + ox * window;
          for (int dy = 0; dy < window; ++dy) {
            for (int dx = 0; dx < window; ++dx) {
              int32_t idx = (oy * window + dy) * w + ox * window + dx;
              if (plane[idx] > best) {
                best = plane[idx];
                besti = idx;
              }
            }
          }
          out.v[oi] = best;
          (*argmax)[oi] = besti;
        }
      }
    }
  }
  auto bp = [argmax, n, c, h, w, oh, ow](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.needs_grad) return;
    auto& g = p.ensure_grad();
    int64_t oi = 0;
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        T* plane = g.data() + (static_cast<int64_t>(i) * c + ch) * h * w;
        for (int px = 0; px < oh * ow; ++px, ++oi)
          plane[(*argmax)[oi]] += self.grad.v[oi];
      }
  };
  return make_op<T>(std::move(out), {x}, std::move(bp));
}

// [N,C,H,W] -> [N,C], mean over the spatial plane.
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 4)
    throw ShapeError(cat("global_avg_pool: expected 4-d input, got ",
                         shape_str(xs)));
  const int n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  Tensor<T> out({n, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = x->value.data() + (static_cast<int64_t>(i) * c + ch) * hw;
      T s = 0;
      for (int p = 0; p < hw; ++p) s += plane[p];
      out.v[static_cast<int64_t>(i) * c + ch] = s / static_cast<T>(hw);
    }
  auto bp = [n, c, hw](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.needs_grad) return;
    auto& g = p.ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        T gv = self.grad.v[static_cast<int64_t>(i) * c + ch] / static_cast<T>(hw);
        T* plane = g.data() + (static_cast<int64_t>(i) * c + ch) * hw;
        for (int px = 0; px < hw; ++px) plane[px] += gv;
      }
  };
  return make_op<T>(std::move(out), {x}, std::move(bp));
}

// [N,D,P] -> [N,D], mean over tokens.
template <class T>
Var<T> mean_tokens(const Var<T>& x) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 3)
    throw ShapeError(cat("mean_tokens: expected 3-d input, got ", shape_str(xs)));
  const int n = xs[0], d = xs[1], p = xs[2];
  Tensor<T> out({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const T* row = x->value.data() + (static_cast<int64_t>(i) * d + j) * p;
      T s = 0;
      for (int t = 0; t < p; ++t) s += row[t];
      out.v[static_cast<int64_t>(i) * d + j] = s / static_cast<T>(p);
    }
  auto bp = [n, d, p](Node<T>& self) {
    auto& par = *self.parents[0];
    if (!par.needs_grad) return;
    auto& g = par.ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        T gv = self.grad.v[static_cast<int64_t>(i) * d + j] / static_cast<T>(p);
        T* row = g.data() + (static_cast<int64_t>(i) * d + j) * p;
        for (int t = 0; t < p; ++t) row[t] += gv;
      }
  };
  return make_op<T>(std::move(out), {x}, std::move(bp));
}

// Fully connected: x [N,F], w [C,F], b [C] -> [N,C].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& xs = x->value.shape;
  const Shape& ws = w->value.shape;
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
    throw ShapeError(cat("linear: incompatible shapes ", shape_str(xs), " and ",
                         shape_str(ws)));
  const int n = xs[0], f = xs[1], c = ws[0];
  const bool has_bias = !b->value.empty();
  Tensor<T> out({n, c});
  ECMap<T> xm(x->value.data(), n, f);
  ECMap<T> wm(w->value.data(), c, f);
  EMap<T> ym(out.data(), n, c);
  ym.noalias() = xm * wm.transpose();
  if (has_bias)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) out.v[static_cast<int64_t>(i) * c + j] += b->value.v[j];
  auto bp = [n, f, c, has_bias](Node<T>& self) {
    auto& xp = *self.parents[0];
    auto& wp = *self.parents[1];
    auto& bp_ = *self.parents[2];
    ECMap<T> gy(self.grad.data(), n, c);
    if (wp.needs_grad) {
      EMap<T> dw(wp.ensure_grad().data(), c, f);
      ECMap<T> xm(xp.value.data(), n, f);
      dw.noalias() += gy.transpose() * xm;
    }
    if (has_bias && bp_.needs_grad) {
      auto& db = bp_.ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) db.v[j] += self.grad.v[static_cast<int64_t>(i) * c + j];
    }
    if (xp.needs_grad) {
      EMap<T> dx(xp.ensure_grad().data(), n, f);
      ECMap<T> wm(wp.value.data(), c, f);
      dx.noalias() += gy * wm;
    }
  };
  return make_op<T>(std::move(out), {x, w, b}, std::move(bp));
}

// Layer normalization over the embedding axis of [N,D,P] token tensors
// (each token column is normalized independently). gamma/beta are [D].
template <class T>
Var<T> layernorm_tokens(const Var<T>& x, const Var<T>& gamma,
                        const Var<T>& beta, T eps = T(1e-5)) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 3)
    throw ShapeError(cat("layernorm_tokens: expected 3-d input, got ",
                         shape_str(xs)));
  const int n = xs[0], d = xs[1], p = xs[2];
  if (gamma->value.size() != d || beta->value.size() != d)
    throw ShapeError("layernorm_tokens: gamma/beta must be [D]");
  Tensor<T> out(xs);
  auto stats = std::make_shared<Tensor<T>>(Shape{n, p, 2});  // mean, invstd
  for (int i = 0; i < n; ++i) {
    const T* xb = x->value.data() + static_cast<int64_t>(i) * d * p;
    T* ob = out.data() + static_cast<int64_t>(i) * d * p;
    for (int t = 0; t < p; ++t) {
      T mean = 0;
      for (int j = 0; j < d; ++j) mean += xb[j * p + t];
      mean /= static_cast<T>(d);
      T var = 0;
      for (int j = 0; j < d; ++j) {
        T dv = xb[j * p + t] - mean;
        var += dv * dv;
      }
      var /= static_cast<T>(d);
      T invstd = T(1) / std::sqrt(var + eps);
      stats->v[(static_cast<int64_t>(i) * p + t) * 2] = mean;
      stats->v[(static_cast<int64_t>(i) * p + t) * 2 + 1] = invstd;
      for (int j = 0; j < d; ++j) {
        T xhat = (xb[j * p + t] - mean) * invstd;
        ob[j * p + t] = gamma->value.v[j] * xhat + beta->value.v[j];
      }
    }
  }
  auto bp = [stats, n, d, p](Node<T>& self) {
    auto& xp = *self.parents[0];
    auto& gp = *self.parents[1];
    auto& bp_ = *self.parents[2];
    Tensor<T>* dx = xp.needs_grad ? &xp.ensure_grad() : nullptr;
    Tensor<T>* dgamma = gp.needs_grad ? &gp.ensure_grad() : nullptr;
    Tensor<T>* dbeta = bp_.needs_grad ? &bp_.ensure_grad() : nullptr;
    for (int i = 0; i < n; ++i) {
      const T* xb = xp.value.data() + static_cast<int64_t>(i) * d * p;
      const T* gy = self.grad.data() + static_cast<int64_t>(i) * d * p;
      for (int t = 0; t < p; ++t) {
        T mean = stats->v[(static_cast<int64_t>(i) * p + t) * 2];
        T invstd = stats->v[(static_cast<int64_t>(i) * p + t) * 2 + 1];
        T sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int j = 0; j < d; ++j) {
          T xhat = (xb[j * p + t] - mean) * invstd;
          T dy = gy[j * p + t];
          if (dgamma) dgamma->v[j] += dy * xhat;
          if (dbeta) dbeta->v[j] += dy;
          T dxhat = dy * gp.value.v[j];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        if (dx) {
          T* dxb = dx->data() + static_cast<int64_t>(i) * d * p;
          for (int j = 0; j < d; ++j) {
            T xhat = (xb[j * p + t] - mean) * invstd;
            T dxhat = gy[j * p + t] * gp.value.v[j];
            dxb[j * p + t] += invstd / static_cast<T>(d) *
                              (static_cast<T>(d) * dxhat - sum_dxhat -
                               xhat * sum_dxhat_xhat);
          }
        }
      }
    }
  };
  return make_op<T>(std::move(out), {x, gamma, beta}, std::move(bp));
}

// Broadcast-add a [D,P] tensor across the batch of [N,D,P].
template <class T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& b) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 3 || b->value.rank() != 2 || b->value.dim(0) != xs[1] ||
      b->value.dim(1) != xs[2])
    throw ShapeError(cat("add_broadcast: got ", shape_str(xs), " and ",
                         shape_str(b->value.shape)));
  const int n = xs[0];
  const int64_t dp = static_cast<int64_t>(xs[1]) * xs[2];
  Tensor<T> out(xs);
  for (int i = 0; i < n; ++i)
    for (int64_t j = 0; j < dp; ++j)
      out.v[i * dp + j] = x->value.v[i * dp + j] + b->value.v[j];
  auto bp = [n, dp](Node<T>& self) {
    auto& xp = *self.parents[0];
    auto& bp_ = *self.parents[1];
    if (xp.needs_grad) {
      auto& g = xp.ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i) g.v[i] += self.grad.v[i];
    }
    if (bp_.needs_grad) {
      auto& g = bp_.ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int64_t j = 0; j < dp; ++j) g.v[j] += self.grad.v[i * dp + j];
    }
  };
  return make_op<T>(std::move(out), {x, b}, std::move(bp));
}

// [N,D,s,s] -> [N,D,s*s]. Row-major flattening, so the feature vector at
// grid position (r,c) becomes token r*s + c. Pure relabeling of the buffer.
template <class T>
Var<T> grid_to_tokens(const Var<T>& x) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 4 || xs[2] != xs[3])
    throw ShapeError(cat("grid_to_tokens: expected square [N,D,s,s], got ",
                         shape_str(xs)));
  Tensor<T> out = x->value;
  out.shape = {xs[0], xs[1], xs[2] * xs[3]};
  auto bp = [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.needs_grad) return;
    auto& g = p.ensure_grad();
    for (int64_t i = 0; i < g.size(); ++i) g.v[i] += self.grad.v[i];
  };
  return make_op<T>(std::move(out), {x}, std::move(bp));
}

// Inverse of grid_to_tokens; exact round trip.
template <class T>
Var<T> tokens_to_grid(const Var<T>& x) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 3)
    throw ShapeError(cat("tokens_to_grid: expected [N,D,P], got ", shape_str(xs)));
  int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(xs[2]))));
  if (side * side != xs[2])
    throw ShapeError(cat("tokens_to_grid: P=", xs[2], " is not a perfect square"));
  Tensor<T> out = x->value;
  out.shape = {xs[0], xs[1], side, side};
  auto bp = [](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.needs_grad) return;
    auto& g = p.ensure_grad();
    for (int64_t i = 0; i < g.size(); ++i) g.v[i] += self.grad.v[i];
  };
  return make_op<T>(std::move(out), {x}, std::move(bp));
}

// Multi-head self-attention over [N,D,P] (tokens are columns). Weights are
// [D,D]; biases [D]. Single fused node: the index bookkeeping stays local and
// the finite-difference tests pin the gradient.
template <class T>
Var<T> mhsa(const Var<T>& x, const Var<T>& wq, const Var<T>& bq,
            const Var<T>& wk, const Var<T>& bk, const Var<T>& wv,
            const Var<T>& bv, const Var<T>& wo, const Var<T>& bo, int heads) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 3)
    throw ShapeError(cat("mhsa: expected [N,D,P], got ", shape_str(xs)));
  const int n = xs[0], d = xs[1], p = xs[2];
  if (d % heads != 0)
    throw ConfigError(cat("mhsa: embedding dim ", d, " not divisible by ",
                          heads, " heads"));
  const int dh = d / heads;
  const T scale_f = T(1) / std::sqrt(static_cast<T>(dh));

  auto proj = [&](const Tensor<T>& w, const Tensor<T>& b, const T* xb, T* out_) {
    ECMap<T> wm(w.data(), d, d);
    ECMap<T> xm(xb, d, p);
    EMap<T> om(out_, d, p);
    om.noalias() = wm * xm;
    for (int j = 0; j < d; ++j)
      for (int t = 0; t < p; ++t) out_[static_cast<int64_t>(j) * p + t] += b.v[j];
  };

  // Cache Q,K,V and the attention rows for backward.
  auto q = std::make_shared<Tensor<T>>(Shape{n, d, p});
  auto kk = std::make_shared<Tensor<T>>(Shape{n, d, p});
  auto vv = std::make_shared<Tensor<T>>(Shape{n, d, p});
  auto attn = std::make_shared<Tensor<T>>(Shape{n, heads, p, p});
  Tensor<T> concat({n, d, p});

  std::vector<T> scores(static_cast<size_t>(p) * p);
  for (int i = 0; i < n; ++i) {
    const T* xb = x->value.data() + static_cast<int64_t>(i) * d * p;
    T* qb = q->data() + static_cast<int64_t>(i) * d * p;
    T* kb = kk->data() + static_cast<int64_t>(i) * d * p;
    T* vb = vv->data() + static_cast<int64_t>(i) * d * p;
    proj(wq->value, bq->value, xb, qb);
    proj(wk->value, bk->value, xb, kb);
    proj(wv->value, bv->value, xb, vb);
    for (int hd = 0; hd < heads; ++hd) {
      ECMap<T> qh(qb + static_cast<int64_t>(hd) * dh * p, dh, p);
      ECMap<T> kh(kb + static_cast<int64_t>(hd) * dh * p, dh, p);
      ECMap<T> vh(vb + static_cast<int64_t>(hd) * dh * p, dh, p);
      EMap<T> sm(scores.data(), p, p);
      sm.noalias() = qh.transpose() * kh;
      T* am = attn->data() + ((static_cast<int64_t>(i) * heads + hd) * p) * p;
      for (int r = 0; r < p; ++r) {
        T mx = scores[static_cast<int64_t>(r) * p];
        for (int cidx = 1; cidx < p; ++cidx)
          mx = std::max(mx, scores[static_cast<int64_t>(r) * p + cidx]);
        T sum = 0;
        for (int cidx = 0; cidx < p; ++cidx) {
          T e = std::exp((scores[static_cast<int64_t>(r) * p + cidx] - mx) * scale_f);
          am[static_cast<int64_t>(r) * p + cidx] = e;
          sum += e;
        }
        for (int cidx = 0; cidx < p; ++cidx)
          am[static_cast<int64_t>(r) * p + cidx] /= sum;
      }
      ECMap<T> amm(am, p, p);
      EMap<T> oh(concat.data() + static_cast<int64_t>(i) * d * p +
                     static_cast<int64_t>(hd) * dh * p,
                 dh, p);
      oh.noalias() = vh * amm.transpose();
    }
  }
  Tensor<T> out({n, d, p});
  for (int i = 0; i < n; ++i)
    proj(wo->value, bo->value, concat.data() + static_cast<int64_t>(i) * d * p,
         out.data() + static_cast<int64_t>(i) * d * p);
  auto concat_cache = std::make_shared<Tensor<T>>(std::move(concat));

  auto bp = [q, kk, vv, attn, concat_cache, n, d, p, heads, dh,
             scale_f](Node<T>& self) {
    auto& xp = *self.parents[0];
    auto& wqp = *self.parents[1];
    auto& bqp = *self.parents[2];
    auto& wkp = *self.parents[3];
    auto& bkp = *self.parents[4];
    auto& wvp = *self.parents[5];
    auto& bvp = *self.parents[6];
    auto& wop = *self.parents[7];
    auto& bop = *self.parents[8];

    Tensor<T> dconcat({n, d, p});
    Tensor<T> dq({n, d, p}), dk({n, d, p}), dv({n, d, p});
    std::vector<T> ds(static_cast<size_t>(p) * p), da(static_cast<size_t>(p) * p);

    // Output projection backward; accumulates into wo/bo and fills dconcat.
    for (int i = 0; i < n; ++i) {
      ECMap<T> gy(self.grad.data() + static_cast<int64_t>(i) * d * p, d, p);
      ECMap<T> cm(concat_cache->data() + static_cast<int64_t>(i) * d * p, d, p);
      if (wop.needs_grad) {
        EMap<T> dwo(wop.ensure_grad().data(), d, d);
        dwo.noalias() += gy * cm.transpose();
      }
      if (bop.needs_grad) {
        auto& dbo = bop.ensure_grad();
        for (int j = 0; j < d; ++j) {
          T s = 0;
          for (int t = 0; t < p; ++t)
            s += self.grad.v[(static_cast<int64_t>(i) * d + j) * p + t];
          dbo.v[j] += s;
        }
      }
      EMap<T> dcm(dconcat.data() + static_cast<int64_t>(i) * d * p, d, p);
      ECMap<T> wom(wop.value.data(), d, d);
      dcm.noalias() = wom.transpose() * gy;
    }

    // Attention backward per head.
    for (int i = 0; i < n; ++i) {
      for (int hd = 0; hd < heads; ++hd) {
        const int64_t off = static_cast<int64_t>(i) * d * p + static_cast<int64_t>(hd) * dh * p;
        ECMap<T> doh(dconcat.data() + off, dh, p);
        ECMap<T> qh(q->data() + off, dh, p);
        ECMap<T> kh(kk->data() + off, dh, p);
        ECMap<T> vh(vv->data() + off, dh, p);
        ECMap<T> am(attn->data() + ((static_cast<int64_t>(i) * heads + hd) * p) * p, p, p);
        EMap<T> dvh(dv.data() + off, dh, p);
        dvh.noalias() = doh * am;
        EMap<T> dam(da.data(), p, p);
        dam.noalias() = doh.transpose() * vh;  // dA[r,c]
        // softmax backward (rows of A)
        for (int r = 0; r < p; ++r) {
          T dot = 0;
          for (int cidx = 0; cidx < p; ++cidx)
            dot += da[static_cast<int64_t>(r) * p + cidx] * am(r, cidx);
          for (int cidx = 0; cidx < p; ++cidx)
            ds[static_cast<int64_t>(r) * p + cidx] =
                (da[static_cast<int64_t>(r) * p + cidx] - dot) * am(r, cidx) * scale_f;
        }
        ECMap<T> dsm(ds.data(), p, p);
        EMap<T> dqh(dq.data() + off, dh, p);
        EMap<T> dkh(dk.data() + off, dh, p);
        dqh.noalias() = kh * dsm.transpose();
        dkh.noalias() = qh * dsm;
      }
    }

    // Input projections backward.
    auto proj_back = [&](Node<T>& wn, Node<T>& bn, const Tensor<T>& dout,
                         bool into_dx) {
      for (int i = 0; i < n; ++i) {
        ECMap<T> go(dout.data() + static_cast<int64_t>(i) * d * p, d, p);
        ECMap<T> xm(xp.value.data() + static_cast<int64_t>(i) * d * p, d, p);
        if (wn.needs_grad) {
          EMap<T> dwm(wn.ensure_grad().data(), d, d);
          dwm.noalias() += go * xm.transpose();
        }
        if (bn.needs_grad) {
          auto& dbn = bn.ensure_grad();
          for (int j = 0; j < d; ++j) {
            T s = 0;
            for (int t = 0; t < p; ++t)
              s += dout.v[(static_cast<int64_t>(i) * d + j) * p + t];
            dbn.v[j] += s;
          }
        }
        if (into_dx && xp.needs_grad) {
          EMap<T> dxm(xp.ensure_grad().data() + static_cast<int64_t>(i) * d * p, d, p);
          ECMap<T> wm(wn.value.data(), d, d);
          dxm.noalias() += wm.transpose() * go;
        }
      }
    };
    proj_back(wqp, bqp, dq, true);
    proj_back(wkp, bkp, dk, true);
    proj_back(wvp, bvp, dv, true);
  };
  return make_op<T>(std::move(out), {x, wq, bq, wk, bk, wv, bv, wo, bo},
                    std::move(bp));
}

// Column slice of a [N,C] matrix; used to take old-class logits.
template <class T>
Var<T> slice_cols(const Var<T>& x, int c0, int c1) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 2 || c0 < 0 || c1 > xs[1] || c0 >= c1)
    throw ShapeError(cat("slice_cols: bad range [", c0, ",", c1, ") for ",
                         shape_str(xs)));
  const int n = xs[0], c = xs[1], w = c1 - c0;
  Tensor<T> out({n, w});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j)
      out.v[static_cast<int64_t>(i) * w + j] = x->value.v[static_cast<int64_t>(i) * c + c0 + j];
  auto bp = [n, c, w, c0](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.needs_grad) return;
    auto& g = p.ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j)
        g.v[static_cast<int64_t>(i) * c + c0 + j] += self.grad.v[static_cast<int64_t>(i) * w + j];
  };
  return make_op<T>(std::move(out), {x}, std::move(bp));
}

// Mean cross-entropy over the batch. labels are class indices into [0,C).
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::vector<int> labels) {
  const Shape& ls = logits->value.shape;
  if (ls.size() != 2 || static_cast<size_t>(ls[0]) != labels.size())
    throw ShapeError(cat("cross_entropy: logits ", shape_str(ls), " vs ",
                         labels.size(), " labels"));
  const int n = ls[0], c = ls[1];
  auto probs = std::make_shared<Tensor<T>>(Shape{n, c});
  T loss = 0;
  for (int i = 0; i < n; ++i) {
    const T* row = logits->value.data() + static_cast<int64_t>(i) * c;
    T mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (int j = 0; j < c; ++j) {
      T e = std::exp(row[j] - mx);
      probs->v[static_cast<int64_t>(i) * c + j] = e;
      sum += e;
    }
    for (int j = 0; j < c; ++j) probs->v[static_cast<int64_t>(i) * c + j] /= sum;
    if (labels[i] < 0 || labels[i] >= c)
      throw ShapeError(cat("cross_entropy: label ", labels[i],
                           " outside [0,", c, ")"));
    loss -= std::log(probs->v[static_cast<int64_t>(i) * c + labels[i]] + T(1e-12));
  }
  Tensor<T> out({1});
  out.v[0] = loss / static_cast<T>(n);
  auto bp = [probs, labels = std::move(labels), n, c](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.needs_grad) return;
    auto& g = p.ensure_grad();
    const T go = self.grad.v[0] / static_cast<T>(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        T t = (j == labels[i]) ? T(1) : T(0);
        g.v[static_cast<int64_t>(i) * c + j] += go * (probs->v[static_cast<int64_t>(i) * c + j] - t);
      }
  };
  return make_op<T>(std::move(out), {logits}, std::move(bp));
}

// Temperature-softened distillation on the first n_old logits of the student
// against a frozen teacher. Returns T^2 * mean_n KL(teacher || student);
// gradient flows into the student only.
template <class T>
Var<T> distill_loss(const Var<T>& student_logits, const Tensor<T>& teacher_logits,
                    int n_old, T temperature) {
  const Shape& ss = student_logits->value.shape;
  if (ss.size() != 2 || teacher_logits.rank() != 2 ||
      teacher_logits.dim(0) != ss[0] || teacher_logits.dim(1) < n_old ||
      ss[1] < n_old || n_old < 1)
    throw ShapeError(cat("distill_loss: student ", shape_str(ss), ", teacher ",
                         shape_str(teacher_logits.shape), ", n_old ", n_old));
  const int n = ss[0], c = ss[1], ct = teacher_logits.dim(1);
  auto softmax_t = [&](const T* row, int stride_c, std::vector<T>& out_p) {
    T mx = row[0] / temperature;
    for (int j = 1; j < n_old; ++j) mx = std::max(mx, row[j] / temperature);
    T sum = 0;
    for (int j = 0; j < n_old; ++j) {
      out_p[j] = std::exp(row[j] / temperature - mx);
      sum += out_p[j];
    }
    for (int j = 0; j < n_old; ++j) out_p[j] /= sum;
    (void)stride_c;
  };
  auto ps = std::make_shared<Tensor<T>>(Shape{n, n_old});
  auto pt = std::make_shared<Tensor<T>>(Shape{n, n_old});
  std::vector<T> tmp(n_old);
  T loss = 0;
  for (int i = 0; i < n; ++i) {
    softmax_t(student_logits->value.data() + static_cast<int64_t>(i) * c, c, tmp);
    for (int j = 0; j < n_old; ++j) ps->v[static_cast<int64_t>(i) * n_old + j] = tmp[j];
    softmax_t(teacher_logits.data() + static_cast<int64_t>(i) * ct, ct, tmp);
    for (int j = 0; j < n_old; ++j) pt->v[static_cast<int64_t>(i) * n_old + j] = tmp[j];
    for (int j = 0; j < n_old; ++j) {
      T t = pt->v[static_cast<int64_t>(i) * n_old + j];
      T s = ps->v[static_cast<int64_t>(i) * n_old + j];
      loss += t * (std::log(t + T(1e-12)) - std::log(s + T(1e-12)));
    }
  }
  Tensor<T> out({1});
  out.v[0] = loss * temperature * temperature / static_cast<T>(n);
  auto bp = [ps, pt, n, c, n_old, temperature](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.needs_grad) return;
    auto& g = p.ensure_grad();
    const T go = self.grad.v[0] * temperature / static_cast<T>(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n_old; ++j)
        g.v[static_cast<int64_t>(i) * c + j] +=
            go * (ps->v[static_cast<int64_t>(i) * n_old + j] - pt->v[static_cast<int64_t>(i) * n_old + j]);
  };
  return make_op<T>(std::move(out), {student_logits}, std::move(bp));
}

}  // namespace g2b
