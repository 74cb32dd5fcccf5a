#pragma once

#include <random>
#include <string>
#include <vector>

#include "g2b/ops.hpp"

namespace g2b {

// Layers are plain value types: copying one deep-copies its parameters and
// buffers, which is how teacher snapshots and checkpoints work. Parameter
// registration is done by walking the layer tree with collect().

template <class T>
struct ParamRefs {
  std::vector<Param<T>*> params;
  std::vector<std::pair<std::string, Tensor<T>*>> buffers;  // e.g. BN stats

  void add(Param<T>& p) { params.push_back(&p); }
  void add_buffer(std::string name, Tensor<T>& t) {
    buffers.emplace_back(std::move(name), &t);
  }
  int64_t param_count() const {
    int64_t n = 0;
    for (auto* p : params) n += p->size();
    return n;
  }
  void zero_grad() {
    for (auto* p : params) p->zero_grad();
  }
};

template <class T>
T he_std(int fan_in) {
  return std::sqrt(T(2) / static_cast<T>(fan_in));
}

template <class T>
void init_normal(Tensor<T>& t, std::mt19937& rng, T stddev) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& x : t.v) x = static_cast<T>(dist(rng));
}

template <class T>
struct Conv2d {
  Param<T> w, b;
  int stride = 1, pad = 0;
  bool has_bias = true;

  Conv2d() = default;
  Conv2d(std::string name, int cin, int cout, int k, int stride_, int pad_,
         bool bias, std::mt19937& rng)
      : w(name + ".w", Tensor<T>({cout, cin, k, k})),
        b(name + ".b", bias ? Tensor<T>({cout}) : Tensor<T>()),
        stride(stride_),
        pad(pad_),
        has_bias(bias) {
    init_normal(w.value, rng, he_std<T>(cin * k * k));
  }

  Var<T> forward(const Var<T>& x) {
    return conv2d(x, leaf(w), leaf(b), stride, pad);
  }
  void collect(ParamRefs<T>& r) {
    r.add(w);
    if (has_bias) r.add(b);
  }
};

template <class T>
struct BatchNorm2d {
  Param<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels)
      : gamma(name + ".gamma", Tensor<T>::ones({channels})),
        beta(name + ".beta", Tensor<T>({channels})),
        running_mean({channels}),
        running_var(Tensor<T>::ones({channels})) {}

  // Batch statistics in training mode (with running-stat update as a side
  // effect); running statistics in eval mode. Biased variance throughout.
  Var<T> forward(const Var<T>& x, bool train) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 4 || xs[1] != gamma.value.dim(0))
      throw ShapeError(cat("batchnorm2d: input ", shape_str(xs),
                           " vs channels ", gamma.value.dim(0)));
    const int n = xs[0], c = xs[1], hw = xs[2] * xs[3];
    const int64_t m = static_cast<int64_t>(n) * hw;

    auto mean = std::make_shared<Tensor<T>>(Shape{c});
    auto invstd = std::make_shared<Tensor<T>>(Shape{c});
    if (train) {
      for (int ch = 0; ch < c; ++ch) {
        double sum = 0, sumsq = 0;
        for (int i = 0; i < n; ++i) {
          const T* plane = x->value.data() + (static_cast<int64_t>(i) * c + ch) * hw;
          for (int p = 0; p < hw; ++p) {
            sum += plane[p];
            sumsq += static_cast<double>(plane[p]) * plane[p];
          }
        }
        double mu = sum / static_cast<double>(m);
        double var = sumsq / static_cast<double>(m) - mu * mu;
        if (var < 0) var = 0;
        mean->v[ch] = static_cast<T>(mu);
        invstd->v[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        running_mean.v[ch] =
            (T(1) - momentum) * running_mean.v[ch] + momentum * static_cast<T>(mu);
        running_var.v[ch] =
            (T(1) - momentum) * running_var.v[ch] + momentum * static_cast<T>(var);
      }
    } else {
      for (int ch = 0; ch < c; ++ch) {
        mean->v[ch] = running_mean.v[ch];
        invstd->v[ch] = T(1) / std::sqrt(running_var.v[ch] + eps);
      }
    }

    Tensor<T> out(xs);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* plane = x->value.data() + (static_cast<int64_t>(i) * c + ch) * hw;
        T* oplane = out.data() + (static_cast<int64_t>(i) * c + ch) * hw;
        const T mu = mean->v[ch], is = invstd->v[ch];
        const T g = gamma.value.v[ch], be = beta.value.v[ch];
        for (int p = 0; p < hw; ++p) oplane[p] = g * (plane[p] - mu) * is + be;
      }

    auto bp = [mean, invstd, n, c, hw, m, train](Node<T>& self) {
      auto& xp = *self.parents[0];
      auto& gp = *self.parents[1];
      auto& bpn = *self.parents[2];
      Tensor<T>* dgamma = gp.needs_grad ? &gp.ensure_grad() : nullptr;
      Tensor<T>* dbeta = bpn.needs_grad ? &bpn.ensure_grad() : nullptr;
      Tensor<T>* dx = xp.needs_grad ? &xp.ensure_grad() : nullptr;
      for (int ch = 0; ch < c; ++ch) {
        const T mu = mean->v[ch], is = invstd->v[ch];
        double sum_dy = 0, sum_dy_xhat = 0;
        for (int i = 0; i < n; ++i) {
          const T* xpl = xp.value.data() + (static_cast<int64_t>(i) * c + ch) * hw;
          const T* gpl = self.grad.data() + (static_cast<int64_t>(i) * c + ch) * hw;
          for (int p = 0; p < hw; ++p) {
            sum_dy += gpl[p];
            sum_dy_xhat += static_cast<double>(gpl[p]) * (xpl[p] - mu) * is;
          }
        }
        if (dgamma) dgamma->v[ch] += static_cast<T>(sum_dy_xhat);
        if (dbeta) dbeta->v[ch] += static_cast<T>(sum_dy);
        if (dx) {
          const T g = gp.value.v[ch];
          if (train) {
            const T k1 = static_cast<T>(sum_dy / static_cast<double>(m));
            const T k2 = static_cast<T>(sum_dy_xhat / static_cast<double>(m));
            for (int i = 0; i < n; ++i) {
              const T* xpl = xp.value.data() + (static_cast<int64_t>(i) * c + ch) * hw;
              const T* gpl = self.grad.data() + (static_cast<int64_t>(i) * c + ch) * hw;
              T* dpl = dx->data() + (static_cast<int64_t>(i) * c + ch) * hw;
              for (int p = 0; p < hw; ++p) {
                T xhat = (xpl[p] - mu) * is;
                dpl[p] += g * is * (gpl[p] - k1 - xhat * k2);
              }
            }
          } else {
            for (int i = 0; i < n; ++i) {
              const T* gpl = self.grad.data() + (static_cast<int64_t>(i) * c + ch) * hw;
              T* dpl = dx->data() + (static_cast<int64_t>(i) * c + ch) * hw;
              for (int p = 0; p < hw; ++p) dpl[p] += g * is * gpl[p];
            }
          }
        }
      }
    };
    return make_op<T>(std::move(out), {x, leaf(gamma), leaf(beta)},
                      std::move(bp));
  }

  void collect(ParamRefs<T>& r) {
    r.add(gamma);
    r.add(beta);
    r.add_buffer(gamma.name + ".running_mean", running_mean);
    r.add_buffer(gamma.name + ".running_var", running_var);
  }
};

template <class T>
struct Linear {
  Param<T> w, b;

  Linear() = default;
  Linear(std::string name, int in, int out, std::mt19937& rng)
      : w(name + ".w", Tensor<T>({out, in})), b(name + ".b", Tensor<T>({out})) {
    init_normal(w.value, rng, std::sqrt(T(1) / static_cast<T>(in)));
  }

  Var<T> forward(const Var<T>& x) { return linear(x, leaf(w), leaf(b)); }
  int in_features() const { return w.value.dim(1); }
  int out_features() const { return w.value.dim(0); }
  void collect(ParamRefs<T>& r) {
    r.add(w);
    r.add(b);
  }
};

template <class T>
struct LayerNorm {
  Param<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(std::string name, int dim)
      : gamma(name + ".gamma", Tensor<T>::ones({dim})),
        beta(name + ".beta", Tensor<T>({dim})) {}

  Var<T> forward(const Var<T>& x) {
    return layernorm_tokens(x, leaf(gamma), leaf(beta));
  }
  void collect(ParamRefs<T>& r) {
    r.add(gamma);
    r.add(beta);
  }
};

template <class T>
struct MultiheadSelfAttention {
  Param<T> wq, bq, wk, bk, wv, bv, wo, bo;
  int heads = 1;

  MultiheadSelfAttention() = default;
  MultiheadSelfAttention(std::string name, int dim, int heads_, std::mt19937& rng)
      : wq(name + ".wq", Tensor<T>({dim, dim})),
        bq(name + ".bq", Tensor<T>({dim})),
        wk(name + ".wk", Tensor<T>({dim, dim})),
        bk(name + ".bk", Tensor<T>({dim})),
        wv(name + ".wv", Tensor<T>({dim, dim})),
        bv(name + ".bv", Tensor<T>({dim})),
        wo(name + ".wo", Tensor<T>({dim, dim})),
        bo(name + ".bo", Tensor<T>({dim})),
        heads(heads_) {
    T s = std::sqrt(T(1) / static_cast<T>(dim));
    init_normal(wq.value, rng, s);
    init_normal(wk.value, rng, s);
    init_normal(wv.value, rng, s);
    init_normal(wo.value, rng, s);
  }

  Var<T> forward(const Var<T>& x) {
    return mhsa(x, leaf(wq), leaf(bq), leaf(wk), leaf(bk), leaf(wv), leaf(bv),
                leaf(wo), leaf(bo), heads);
  }
  void collect(ParamRefs<T>& r) {
    for (auto* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}) r.add(*p);
  }
};

// Token-wise MLP for [N,D,P]: per-sample GEMMs on the [D,P] matrices.
template <class T>
Var<T> tokenwise_linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& xs = x->value.shape;
  const Shape& ws = w->value.shape;
  if (xs.size() != 3 || ws.size() != 2 || ws[1] != xs[1])
    throw ShapeError(cat("tokenwise_linear: ", shape_str(xs), " vs ",
                         shape_str(ws)));
  const int n = xs[0], din = xs[1], p = xs[2], dout = ws[0];
  Tensor<T> out({n, dout, p});
  ECMap<T> wm(w->value.data(), dout, din);
  for (int i = 0; i < n; ++i) {
    ECMap<T> xm(x->value.data() + static_cast<int64_t>(i) * din * p, din, p);
    EMap<T> om(out.data() + static_cast<int64_t>(i) * dout * p, dout, p);
    om.noalias() = wm * xm;
    for (int j = 0; j < dout; ++j)
      for (int t = 0; t < p; ++t)
        out.v[(static_cast<int64_t>(i) * dout + j) * p + t] += b->value.v[j];
  }
  auto bp = [n, din, p, dout](Node<T>& self) {
    auto& xp = *self.parents[0];
    auto& wp = *self.parents[1];
    auto& bpn = *self.parents[2];
    for (int i = 0; i < n; ++i) {
      ECMap<T> gy(self.grad.data() + static_cast<int64_t>(i) * dout * p, dout, p);
      ECMap<T> xm(xp.value.data() + static_cast<int64_t>(i) * din * p, din, p);
      if (wp.needs_grad) {
        EMap<T> dw(wp.ensure_grad().data(), dout, din);
        dw.noalias() += gy * xm.transpose();
      }
      if (bpn.needs_grad) {
        auto& db = bpn.ensure_grad();
        for (int j = 0; j < dout; ++j) {
          T s = 0;
          for (int t = 0; t < p; ++t)
            s += self.grad.v[(static_cast<int64_t>(i) * dout + j) * p + t];
          db.v[j] += s;
        }
      }
      if (xp.needs_grad) {
        ECMap<T> wm(wp.value.data(), dout, din);
        EMap<T> dx(xp.ensure_grad().data() + static_cast<int64_t>(i) * din * p, din, p);
        dx.noalias() += wm.transpose() * gy;
      }
    }
  };
  return make_op<T>(std::move(out), {x, w, b}, std::move(bp));
}

template <class T>
struct TokenLinear {
  Param<T> w, b;

  TokenLinear() = default;
  TokenLinear(std::string name, int in, int out, std::mt19937& rng)
      : w(name + ".w", Tensor<T>({out, in})), b(name + ".b", Tensor<T>({out})) {
    init_normal(w.value, rng, std::sqrt(T(1) / static_cast<T>(in)));
  }
  Var<T> forward(const Var<T>& x) {
    return tokenwise_linear(x, leaf(w), leaf(b));
  }
  void collect(ParamRefs<T>& r) {
    r.add(w);
    r.add(b);
  }
};

// Plain SGD with momentum and a per-round cosine schedule. A fresh optimizer
// is constructed at the start of every round.
template <class T>
struct SgdMomentum {
  T base_lr;
  T momentum;
  int total_steps;
  bool cosine;
  int step_count = 0;
  std::vector<Tensor<T>> velocity;

  SgdMomentum(T lr, T mom, int total, bool cosine_schedule)
      : base_lr(lr), momentum(mom), total_steps(total), cosine(cosine_schedule) {}

  T current_lr() const {
    if (!cosine || total_steps <= 1) return base_lr;
    double t = static_cast<double>(step_count) / static_cast<double>(total_steps);
    return static_cast<T>(0.5 * static_cast<double>(base_lr) *
                          (1.0 + std::cos(t * 3.14159265358979323846)));
  }

  void step(const ParamRefs<T>& refs) {
    if (velocity.size() != refs.params.size()) {
      velocity.clear();
      for (auto* p : refs.params) velocity.emplace_back(p->value.shape);
    }
    const T lr = current_lr();
    for (size_t k = 0; k < refs.params.size(); ++k) {
      auto& p = *refs.params[k];
      auto& v = velocity[k];
      if (v.shape != p.value.shape) v = Tensor<T>(p.value.shape);
      for (int64_t i = 0; i < p.value.size(); ++i) {
        v.v[i] = momentum * v.v[i] + p.grad.v[i];
        p.value.v[i] -= lr * v.v[i];
      }
    }
    ++step_count;
  }
};

}  // namespace g2b
