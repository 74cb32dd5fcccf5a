#pragma once

#include <optional>
#include <variant>

#include "g2b/nn.hpp"

namespace g2b {

enum class BackboneKind { Cnn, Vit };
enum class BlockKind { FeatureMap, TokenMatrix };

// Static per-block output shape, derivable from the spec before any forward.
struct BlockShape {
  BlockKind kind = BlockKind::FeatureMap;
  int channels = 0;  // C for feature maps, D for token matrices
  int height = 0, width = 0;
  int tokens = 0;  // P; always a perfect square

  Shape batched(int n) const {
    if (kind == BlockKind::FeatureMap) return {n, channels, height, width};
    return {n, channels, tokens};
  }
  std::string str() const {
    if (kind == BlockKind::FeatureMap)
      return cat("[", channels, ",", height, ",", width, "]");
    return cat("[", channels, ",", tokens, "]");
  }
};

struct CnnSpec {
  std::vector<int> widths{16, 32, 64, 128};
  std::vector<int> strides{1, 2, 2, 2};
};

struct VitSpec {
  int depth = 5;
  int dim = 96;
  int patch = 4;
  int heads = 4;
  int mlp_ratio = 2;
};

struct BackboneSpec {
  BackboneKind kind = BackboneKind::Cnn;
  int image_side = 32;
  int image_channels = 3;
  int initial_classes = 1;
  CnnSpec cnn;
  VitSpec vit;

  static BackboneSpec small_cnn(int classes) {
    BackboneSpec s;
    s.kind = BackboneKind::Cnn;
    s.initial_classes = classes;
    return s;
  }
  static BackboneSpec small_vit(int classes) {
    BackboneSpec s;
    s.kind = BackboneKind::Vit;
    s.initial_classes = classes;
    return s;
  }

  int n_blocks() const {
    return kind == BackboneKind::Cnn ? static_cast<int>(cnn.widths.size())
                                     : vit.depth;
  }

  std::vector<BlockShape> block_shapes() const {
    std::vector<BlockShape> out;
    if (kind == BackboneKind::Cnn) {
      if (cnn.widths.size() != cnn.strides.size() || cnn.widths.empty())
        throw ConfigError("cnn spec: widths/strides mismatch");
      int side = image_side;
      for (size_t i = 0; i < cnn.widths.size(); ++i) {
        if (side % cnn.strides[i] != 0)
          throw ConfigError(cat("cnn spec: stride ", cnn.strides[i],
                                " does not divide side ", side, " at block ", i));
        side /= cnn.strides[i];
        out.push_back({BlockKind::FeatureMap, cnn.widths[i], side, side, 0});
      }
    } else {
      if (image_side % vit.patch != 0)
        throw ConfigError(cat("vit spec: patch ", vit.patch,
                              " does not divide image side ", image_side));
      int grid = image_side / vit.patch;
      BlockShape b{BlockKind::TokenMatrix, vit.dim, 0, 0, grid * grid};
      for (int i = 0; i < vit.depth; ++i) out.push_back(b);
    }
    return out;
  }
};

// One forward pass's observable outputs.
template <class T>
struct Forward {
  Var<T> logits;
  Var<T> features;             // pooled pre-head embedding [N,F]
  std::vector<Var<T>> blocks;  // per-block (possibly modulated) outputs
};

// Optional per-block masks; a null entry leaves that block unmodulated.
template <class T>
using MaskList = std::vector<Var<T>>;

namespace detail {

template <class T>
Var<T> apply_mask(Var<T> out, const MaskList<T>* masks, int block_idx,
                  const BlockShape& expect) {
  if (!masks) return out;
  if (static_cast<int>(masks->size()) <= block_idx) return out;
  const Var<T>& m = (*masks)[block_idx];
  if (!m) return out;
  if (m->value.shape != out->value.shape)
    throw ShapeError(cat("block ", block_idx, ": mask shape ",
                         shape_str(m->value.shape),
                         " does not match block output ",
                         shape_str(out->value.shape), " (expected ",
                         expect.str(), " per sample)"));
  return mul(out, m);
}

}  // namespace detail

template <class T>
struct ResidualStage {
  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  bool has_down = false;
  Conv2d<T> down;
  BatchNorm2d<T> bnd;

  ResidualStage() = default;
  ResidualStage(const std::string& name, int cin, int cout, int stride,
                std::mt19937& rng)
      : conv1(name + ".conv1", cin, cout, 3, stride, 1, false, rng),
        conv2(name + ".conv2", cout, cout, 3, 1, 1, false, rng),
        bn1(name + ".bn1", cout),
        bn2(name + ".bn2", cout),
        has_down(stride != 1 || cin != cout) {
    if (has_down) {
      down = Conv2d<T>(name + ".down", cin, cout, 1, stride, 0, false, rng);
      bnd = BatchNorm2d<T>(name + ".bnd", cout);
    }
  }

  Var<T> forward(const Var<T>& x, bool train) {
    auto h = relu(bn1.forward(conv1.forward(x), train));
    h = bn2.forward(conv2.forward(h), train);
    auto skip = has_down ? bnd.forward(down.forward(x), train) : x;
    return relu(add(h, skip));
  }

  void collect(ParamRefs<T>& r) {
    conv1.collect(r);
    bn1.collect(r);
    conv2.collect(r);
    bn2.collect(r);
    if (has_down) {
      down.collect(r);
      bnd.collect(r);
    }
  }
};

template <class T>
struct CnnBackbone {
  Conv2d<T> stem;
  BatchNorm2d<T> bn_stem;
  std::vector<ResidualStage<T>> stages;

  CnnBackbone() = default;
  CnnBackbone(const BackboneSpec& spec, std::mt19937& rng)
      : stem("stem", spec.image_channels, spec.cnn.widths[0], 3, 1, 1, false, rng),
        bn_stem("stem.bn", spec.cnn.widths[0]) {
    int cin = spec.cnn.widths[0];
    for (size_t i = 0; i < spec.cnn.widths.size(); ++i) {
      stages.emplace_back(cat("stage", i), cin, spec.cnn.widths[i],
                          spec.cnn.strides[i], rng);
      cin = spec.cnn.widths[i];
    }
  }

  // Returns per-block outputs and pooled features.
  std::pair<std::vector<Var<T>>, Var<T>> forward(
      const Var<T>& images, const MaskList<T>* masks, bool train,
      const std::vector<BlockShape>& shapes) {
    auto x = relu(bn_stem.forward(stem.forward(images), train));
    std::vector<Var<T>> blocks;
    for (size_t i = 0; i < stages.size(); ++i) {
      x = stages[i].forward(x, train);
      x = detail::apply_mask(x, masks, static_cast<int>(i), shapes[i]);
      blocks.push_back(x);
    }
    return {std::move(blocks), global_avg_pool(x)};
  }

  void collect(ParamRefs<T>& r) {
    stem.collect(r);
    bn_stem.collect(r);
    for (auto& s : stages) s.collect(r);
  }
};

template <class T>
struct VitBlock {
  LayerNorm<T> ln1, ln2;
  MultiheadSelfAttention<T> attn;
  TokenLinear<T> fc1, fc2;

  VitBlock() = default;
  VitBlock(const std::string& name, int dim, int heads, int mlp_ratio,
           std::mt19937& rng)
      : ln1(name + ".ln1", dim),
        ln2(name + ".ln2", dim),
        attn(name + ".attn", dim, heads, rng),
        fc1(name + ".fc1", dim, dim * mlp_ratio, rng),
        fc2(name + ".fc2", dim * mlp_ratio, dim, rng) {}

  Var<T> forward(const Var<T>& x, bool /*train*/) {
    auto h = add(x, attn.forward(ln1.forward(x)));
    return add(h, fc2.forward(gelu(fc1.forward(ln2.forward(h)))));
  }
  void collect(ParamRefs<T>& r) {
    ln1.collect(r);
    attn.collect(r);
    ln2.collect(r);
    fc1.collect(r);
    fc2.collect(r);
  }
};

template <class T>
struct VitBackbone {
  Conv2d<T> patch;
  Param<T> pos;
  std::vector<VitBlock<T>> blocks;
  LayerNorm<T> ln_final;

  VitBackbone() = default;
  VitBackbone(const BackboneSpec& spec, std::mt19937& rng)
      : patch("patch", spec.image_channels, spec.vit.dim, spec.vit.patch,
              spec.vit.patch, 0, true, rng),
        ln_final("ln_final", spec.vit.dim) {
    int grid = spec.image_side / spec.vit.patch;
    pos = Param<T>("pos", Tensor<T>({spec.vit.dim, grid * grid}));
    init_normal(pos.value, rng, T(0.02));
    for (int i = 0; i < spec.vit.depth; ++i)
      blocks.emplace_back(cat("block", i), spec.vit.dim, spec.vit.heads,
                          spec.vit.mlp_ratio, rng);
  }

  std::pair<std::vector<Var<T>>, Var<T>> forward(
      const Var<T>& images, const MaskList<T>* masks, bool train,
      const std::vector<BlockShape>& shapes) {
    auto x = grid_to_tokens(patch.forward(images));
    x = add_broadcast(x, leaf(pos));
    std::vector<Var<T>> outs;
    for (size_t i = 0; i < blocks.size(); ++i) {
      x = blocks[i].forward(x, train);
      x = detail::apply_mask(x, masks, static_cast<int>(i), shapes[i]);
      outs.push_back(x);
    }
    return {std::move(outs), mean_tokens(ln_final.forward(x))};
  }

  void collect(ParamRefs<T>& r) {
    patch.collect(r);
    r.add(pos);
    for (auto& b : blocks) b.collect(r);
    ln_final.collect(r);
  }
};

// Main-branch network: block sequence plus an expandable classifier head.
template <class T>
struct Backbone {
  BackboneSpec spec;
  std::vector<BlockShape> shapes;
  std::variant<CnnBackbone<T>, VitBackbone<T>> net;
  Linear<T> head;

  Backbone() = default;
  Backbone(const BackboneSpec& s, std::mt19937& rng) : spec(s), shapes(s.block_shapes()) {
    if (s.kind == BackboneKind::Cnn) {
      net.template emplace<CnnBackbone<T>>(s, rng);
      head = Linear<T>("head", s.cnn.widths.back(), s.initial_classes, rng);
    } else {
      net.template emplace<VitBackbone<T>>(s, rng);
      head = Linear<T>("head", s.vit.dim, s.initial_classes, rng);
    }
  }

  int n_blocks() const { return spec.n_blocks(); }
  int n_classes() const { return head.out_features(); }

  Forward<T> forward(const Tensor<T>& images, const MaskList<T>* masks,
                     bool train) {
    return forward(constant(images), masks, train);
  }

  Forward<T> forward(const Var<T>& images, const MaskList<T>* masks,
                     bool train) {
    if (masks && !masks->empty() &&
        static_cast<int>(masks->size()) != n_blocks())
      throw ShapeError(cat("expected ", n_blocks(), " mask slots, got ",
                           masks->size()));
    auto [blocks, features] = std::visit(
        [&](auto& b) { return b.forward(images, masks, train, shapes); }, net);
    Forward<T> out;
    out.logits = head.forward(features);
    out.features = features;
    out.blocks = std::move(blocks);
    return out;
  }

  void collect(ParamRefs<T>& r) {
    std::visit([&](auto& b) { b.collect(r); }, net);
    head.collect(r);
  }
};

// Appends classifier rows for new classes. Existing rows and biases are left
// bit-identical; new rows use the same init scheme as the original head.
template <class T>
void expand_head(Backbone<T>& model, int n_new_classes, std::mt19937& rng) {
  if (n_new_classes < 1)
    throw ConfigError(cat("expand_head: need at least 1 new class, got ",
                          n_new_classes));
  const int in = model.head.in_features();
  const int old = model.head.out_features();
  Tensor<T> w({old + n_new_classes, in});
  Tensor<T> b({old + n_new_classes});
  std::copy(model.head.w.value.v.begin(), model.head.w.value.v.end(),
            w.v.begin());
  std::copy(model.head.b.value.v.begin(), model.head.b.value.v.end(),
            b.v.begin());
  std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / in));
  for (int64_t i = static_cast<int64_t>(old) * in; i < w.size(); ++i)
    w.v[i] = static_cast<T>(dist(rng));
  model.head.w.value = std::move(w);
  model.head.b.value = std::move(b);
  model.head.w.zero_grad();
  model.head.b.zero_grad();
}

template <class T>
double param_count_millions(ParamRefs<T>& refs) {
  return static_cast<double>(refs.param_count()) / 1e6;
}

}  // namespace g2b
