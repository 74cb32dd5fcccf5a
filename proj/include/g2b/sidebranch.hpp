#pragma once

#include "g2b/backbones.hpp"

namespace g2b {

// The side branch is an independent convolutional network running from the
// raw input image. Each side block is two 3x3 conv -> BN -> ReLU stages; the
// first conv optionally downsamples with stride 2. Block outputs are
// rectified, so masks are nonnegative by construction.
template <class T>
struct SideBlock {
  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;

  SideBlock() = default;
  SideBlock(const std::string& name, int cin, int cmid, int cout, int stride,
            std::mt19937& rng)
      : conv1(name + ".conv1", cin, cmid, 3, stride, 1, false, rng),
        conv2(name + ".conv2", cmid, cout, 3, 1, 1, false, rng),
        bn1(name + ".bn1", cmid),
        bn2(name + ".bn2", cout) {}

  Var<T> forward(const Var<T>& x, bool train) {
    if (x->value.dim(1) != conv1.w.value.dim(1))
      throw ShapeError(cat("side block ", conv1.w.name, ": input has ",
                           x->value.dim(1), " channels, expected ",
                           conv1.w.value.dim(1)));
    auto h = relu(bn1.forward(conv1.forward(x), train));
    return relu(bn2.forward(conv2.forward(h), train));
  }

  int out_channels() const { return conv2.w.value.dim(0); }
  int stride() const { return conv1.stride; }

  void collect(ParamRefs<T>& r) {
    conv1.collect(r);
    bn1.collect(r);
    conv2.collect(r);
    bn2.collect(r);
  }
};

enum class AdapterKind { Identity, MaxPool, ConvReshape };

struct AdapterSpec {
  AdapterKind kind = AdapterKind::Identity;
  int window = 1;   // MaxPool: pooling window == stride
  int kernel = 1;   // ConvReshape: kernel == stride == S/sqrt(P)
  int channels = 0;  // ConvReshape: D
};

// Derives the adapter needed to map a side output of shape
// [channels, side_s, side_s] onto the target block shape. All integrality
// constraints are checked here, at build time.
inline AdapterSpec derive_adapter(int side_channels, int side_s,
                                  const BlockShape& target, int block_idx) {
  if (target.kind == BlockKind::FeatureMap) {
    if (side_channels != target.channels)
      throw ConfigError(cat("block ", block_idx, ": side output has ",
                            side_channels, " channels but main block has ",
                            target.channels));
    if (side_s == target.height) return {AdapterKind::Identity, 1, 1, 0};
    if (side_s % target.height != 0)
      throw ConfigError(cat("block ", block_idx, ": side spatial size ", side_s,
                            " is not an integer multiple of main size ",
                            target.height));
    return {AdapterKind::MaxPool, side_s / target.height, 1, 0};
  }
  // Token matrix: conv with kernel = stride = S/sqrt(P), then reshape.
  int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(target.tokens))));
  if (grid * grid != target.tokens)
    throw ConfigError(cat("block ", block_idx, ": token count ", target.tokens,
                          " is not a perfect square"));
  if (side_s % grid != 0)
    throw ConfigError(cat("block ", block_idx, ": side size ", side_s,
                          " / sqrt(P)=", grid, " is not an integer"));
  return {AdapterKind::ConvReshape, 1, side_s / grid, target.channels};
}

// Shape-matching transform between a side block output and its target main
// block output. ConvReshape holds trainable kernels; the conv has no bias and
// is rectified so the mask stays nonnegative for every backbone kind.
template <class T>
struct Adapter {
  AdapterSpec spec;
  Conv2d<T> conv;

  Adapter() = default;
  Adapter(const std::string& name, AdapterSpec s, int in_channels,
          std::mt19937& rng)
      : spec(s) {
    if (spec.kind == AdapterKind::ConvReshape)
      conv = Conv2d<T>(name + ".conv", in_channels, spec.channels, spec.kernel,
                       spec.kernel, 0, /*bias=*/false, rng);
  }

  Var<T> forward(const Var<T>& side_out) {
    switch (spec.kind) {
      case AdapterKind::Identity:
        return side_out;
      case AdapterKind::MaxPool:
        return maxpool2d(side_out, spec.window);
      case AdapterKind::ConvReshape:
        return grid_to_tokens(relu(conv.forward(side_out)));
    }
    throw ConfigError("adapter: unknown kind");
  }

  void collect(ParamRefs<T>& r) {
    if (spec.kind == AdapterKind::ConvReshape) conv.collect(r);
  }
};

// Stateless form of the adapter application for identity/maxpool; used by
// tests and anywhere a one-off mapping is needed.
template <class T>
Var<T> adapt(const Var<T>& side_out, const AdapterSpec& spec) {
  switch (spec.kind) {
    case AdapterKind::Identity:
      return side_out;
    case AdapterKind::MaxPool:
      return maxpool2d(side_out, spec.window);
    default:
      throw ConfigError("adapt: ConvReshape requires a constructed Adapter");
  }
}

// Eq.-style modulation: elementwise product of a block output and its mask.
template <class T>
Var<T> modulate(const Var<T>& main_out, const Var<T>& mask) {
  if (main_out->value.shape != mask->value.shape)
    throw ShapeError(cat("modulate: mask ", shape_str(mask->value.shape),
                         " vs block output ", shape_str(main_out->value.shape)));
  return mul(main_out, mask);
}

// Fraction of entries exactly equal to zero.
template <class T>
double mask_sparsity(const Tensor<T>& mask) {
  if (mask.empty()) throw ShapeError("mask_sparsity: empty mask");
  int64_t zeros = 0;
  for (T x : mask.v)
    if (x == T(0)) ++zeros;
  return static_cast<double>(zeros) / static_cast<double>(mask.size());
}

struct G2bOptions {
  // First-conv strides of the side chain; empty = derived defaults (CNN
  // follows the main strides; ViT downsamples to the token grid early).
  std::vector<int> side_strides;
  // Intermediate width of each side block's first conv; empty = main widths.
  std::vector<int> side_widths;
};

enum class MaskMode { Learned, ForceOnes };

// A backbone plus its (possibly empty) side branch. The side chain runs from
// the raw image up to the last enabled block; side blocks past that point do
// not exist. Disabled positions inside the chain still forward features to
// later side blocks but apply no mask.
template <class T>
struct G2bModel {
  Backbone<T> backbone;
  std::vector<char> enabled;  // per main block
  std::vector<SideBlock<T>> side;
  std::vector<Adapter<T>> adapters;  // parallel to `side`; used when enabled
  MaskMode mask_mode = MaskMode::Learned;

  int n_blocks() const { return backbone.n_blocks(); }
  int n_classes() const { return backbone.n_classes(); }
  bool has_side() const { return !side.empty(); }

  struct Output {
    Var<T> logits;
    Var<T> features;
    std::vector<Var<T>> blocks;
    std::vector<Var<T>> masks;  // one per enabled block, in block order
  };

  Output forward(const Tensor<T>& images, bool train) {
    return forward(constant(images), train);
  }

  Output forward(const Var<T>& images, bool train) {
    Output out;
    MaskList<T> masks;
    if (has_side()) {
      masks.resize(n_blocks());
      if (mask_mode == MaskMode::ForceOnes) {
        const int n = images->value.dim(0);
        for (size_t i = 0; i < side.size(); ++i)
          if (enabled[i])
            masks[i] = constant(Tensor<T>::ones(backbone.shapes[i].batched(n)));
      } else {
        Var<T> s = images;
        for (size_t i = 0; i < side.size(); ++i) {
          s = side[i].forward(s, train);
          if (enabled[i]) masks[i] = adapters[i].forward(s);
        }
      }
      for (size_t i = 0; i < masks.size(); ++i)
        if (masks[i]) out.masks.push_back(masks[i]);
    }
    auto fwd = backbone.forward(images, has_side() ? &masks : nullptr, train);
    out.logits = std::move(fwd.logits);
    out.features = std::move(fwd.features);
    out.blocks = std::move(fwd.blocks);
    return out;
  }

  ParamRefs<T> params() {
    ParamRefs<T> r;
    backbone.collect(r);
    for (auto& b : side) b.collect(r);
    for (auto& a : adapters) a.collect(r);
    return r;
  }

  double param_count() {
    auto r = params();
    return param_count_millions(r);
  }

  std::vector<int> enabled_block_indices() const {
    std::vector<int> out;
    for (size_t i = 0; i < enabled.size(); ++i)
      if (enabled[i]) out.push_back(static_cast<int>(i));
    return out;
  }
};

// Wraps a backbone with a side branch. The side chain is built from the raw
// input image through side blocks 1..last-enabled; every enabled position
// gets an adapter derived (and validated) here. All parameters stay jointly
// trainable.
template <class T>
G2bModel<T> wrap_g2b(Backbone<T> backbone, const std::vector<bool>& enabled_blocks,
                     std::mt19937& rng, const G2bOptions& opts = {}) {
  const int nb = backbone.n_blocks();
  if (static_cast<int>(enabled_blocks.size()) != nb)
    throw ConfigError(cat("wrap_g2b: enabled_blocks has ",
                          enabled_blocks.size(), " entries for ", nb,
                          " blocks"));
  G2bModel<T> model;
  model.backbone = std::move(backbone);
  model.enabled.assign(enabled_blocks.begin(), enabled_blocks.end());

  int last_enabled = -1;
  for (int i = 0; i < nb; ++i)
    if (enabled_blocks[i]) last_enabled = i;
  if (last_enabled < 0) return model;  // vanilla

  const auto& spec = model.backbone.spec;
  const auto& shapes = model.backbone.shapes;

  std::vector<int> strides = opts.side_strides;
  if (strides.empty()) {
    if (spec.kind == BackboneKind::Cnn) {
      strides = spec.cnn.strides;
    } else {
      // Reach the token grid side quickly, then stay there.
      strides.assign(nb, 1);
      int grid = spec.image_side / spec.vit.patch;
      int s = spec.image_side;
      for (int i = 0; i < nb && s > grid; ++i) {
        strides[i] = 2;
        s /= 2;
      }
    }
  }
  if (static_cast<int>(strides.size()) < last_enabled + 1)
    throw ConfigError("wrap_g2b: side_strides shorter than the side chain");

  std::vector<int> widths = opts.side_widths;
  if (widths.empty())
    for (const auto& sh : shapes) widths.push_back(sh.channels);
  if (static_cast<int>(widths.size()) < last_enabled + 1)
    throw ConfigError("wrap_g2b: side_widths shorter than the side chain");

  int side_s = spec.image_side;
  int cin = spec.image_channels;
  for (int i = 0; i <= last_enabled; ++i) {
    if (strides[i] != 1 && strides[i] != 2)
      throw ConfigError(cat("wrap_g2b: side stride must be 1 or 2 at block ", i));
    if (side_s % strides[i] != 0)
      throw ConfigError(cat("wrap_g2b: stride ", strides[i],
                            " does not divide side size ", side_s,
                            " at block ", i));
    side_s /= strides[i];
    const int cout = shapes[i].channels;
    model.side.emplace_back(cat("side", i), cin, widths[i], cout, strides[i], rng);
    cin = cout;
    AdapterSpec aspec;
    if (enabled_blocks[i]) aspec = derive_adapter(cout, side_s, shapes[i], i);
    model.adapters.emplace_back(cat("adapter", i), aspec, cout, rng);
  }
  return model;
}

}  // namespace g2b
