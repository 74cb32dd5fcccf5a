#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "g2b/tensor.hpp"

namespace g2b {

// Class-labeled image dataset with deterministic train/test splits and
// stable per-sample indices (a sample's index is its position in the split).
struct Dataset {
  std::string name;
  int n_classes = 0;
  int side = 32;
  int channels = 3;
  std::vector<float> train_images;  // [N, C, S, S] flattened
  std::vector<int> train_labels;
  std::vector<float> test_images;
  std::vector<int> test_labels;

  int64_t image_numel() const { return static_cast<int64_t>(channels) * side * side; }
  int train_count() const { return static_cast<int>(train_labels.size()); }
  int test_count() const { return static_cast<int>(test_labels.size()); }

  const float* train_image(int i) const {
    return train_images.data() + static_cast<int64_t>(i) * image_numel();
  }
  const float* test_image(int i) const {
    return test_images.data() + static_cast<int64_t>(i) * image_numel();
  }

  std::vector<int> train_indices_of_class(int c) const {
    std::vector<int> out;
    for (int i = 0; i < train_count(); ++i)
      if (train_labels[i] == c) out.push_back(i);
    return out;
  }
  std::vector<int> test_indices_of_class(int c) const {
    std::vector<int> out;
    for (int i = 0; i < test_count(); ++i)
      if (test_labels[i] == c) out.push_back(i);
    return out;
  }
};

namespace detail {

// Paints one procedurally generated sample. The class identity lives in the
// shape alone: the foreground color is drawn per sample, so nothing can be
// classified from hue shortcuts. Position, scale, stripe period/phase,
// brightness and pixel noise are all jittered per sample.
inline void paint_synthetic(float* img, int side, int cls, std::mt19937& rng) {
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);
  auto jitter = [&](float lo, float hi) { return lo + (hi - lo) * uni(rng); };

  const float S = static_cast<float>(side);
  const float cx = S / 2 + jitter(-S / 5.5f, S / 5.5f);
  const float cy = S / 2 + jitter(-S / 5.5f, S / 5.5f);
  const float scale = jitter(0.65f, 1.4f);
  const float phase = jitter(0.0f, 8.0f);
  const float period = jitter(5.5f, 8.5f);
  const float thick = jitter(0.8f, 1.25f);
  const float bg = jitter(0.05f, 0.30f);

  // Per-sample color, independent of the class.
  float rgb[3];
  do {
    for (auto& c : rgb) c = jitter(0.25f, 1.0f);
  } while (rgb[0] + rgb[1] + rgb[2] < 1.4f);  // keep foreground visible

  auto inside = [&](int x, int y) -> bool {
    const float dx = (x - cx) / scale, dy = (y - cy) / scale;
    const float r2 = dx * dx + dy * dy;
    switch (cls) {
      case 0:
        return r2 < (S / 4.2f) * (S / 4.2f);
      case 1: {
        const float r = std::sqrt(r2);
        return r > S / (3.1f + 1.7f * thick) && r < S / 3.1f;
      }
      case 2:
        return std::fabs(dx) < S * thick / 11 || std::fabs(dy) < S * thick / 11;
      case 3:
        return std::fmod(y + phase, period) < period * 0.45f;
      case 4:
        return std::fmod(x + phase, period) < period * 0.45f;
      case 5:
        return (static_cast<int>((x + phase) / (period * 0.8f)) +
                static_cast<int>((y + phase) / (period * 0.8f))) %
                   2 ==
               0;
      case 6:
        return dy > -S / 8 && std::fabs(dx) < (dy + S / 8) * 0.9f;
      case 7:
        return std::fmod(x + y + phase, period * 1.3f) < period * 0.55f;
      case 8: {
        const float g = period + 1.0f;
        const float gx = std::fmod(x + phase, g) - g / 2;
        const float gy = std::fmod(y + phase, g) - g / 2;
        return gx * gx + gy * gy < 5.5f;
      }
      case 9: {
        const float m = std::max(std::fabs(dx), std::fabs(dy));
        return m > S / (3.3f + 1.5f * thick) && m < S / 3.3f;
      }
      default:
        return false;
    }
  };

  // Background clutter: a few small colored bars at random positions,
  // occluded by the class shape.
  const int plane = side * side;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < plane; ++i) img[c * plane + i] = bg;
  const int n_clutter = 2 + static_cast<int>(jitter(0.0f, 3.0f));
  for (int k = 0; k < n_clutter; ++k) {
    const int bw = 2 + static_cast<int>(jitter(0.0f, 5.0f));
    const int bh = 2 + static_cast<int>(jitter(0.0f, 5.0f));
    const int bx = static_cast<int>(jitter(0.0f, static_cast<float>(side - bw)));
    const int by = static_cast<int>(jitter(0.0f, static_cast<float>(side - bh)));
    float crgb[3] = {jitter(0.1f, 0.9f), jitter(0.1f, 0.9f), jitter(0.1f, 0.9f)};
    for (int y = by; y < by + bh; ++y)
      for (int x = bx; x < bx + bw; ++x)
        for (int c = 0; c < 3; ++c) img[c * plane + y * side + x] = crgb[c];
  }

  std::normal_distribution<float> noise(0.0f, 0.08f);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const bool fg = inside(x, y);
      for (int c = 0; c < 3; ++c) {
        float v = fg ? rgb[c] : img[c * plane + y * side + x];
        v += noise(rng);
        img[c * plane + y * side + x] = std::min(1.0f, std::max(0.0f, v));
      }
    }
}

}  // namespace detail

// Built-in procedurally generated dataset: `classes` balanced classes of
// side x side RGB images. Byte-deterministic in (seed, class, index, split)
// regardless of generation order.
inline Dataset make_synthetic(int classes, int train_per_class,
                              int test_per_class, uint64_t seed,
                              int side = 32) {
  if (classes < 1 || classes > 10)
    throw ConfigError(cat("synthetic dataset supports 1..10 classes, got ",
                          classes));
  if (train_per_class < 1 || test_per_class < 1)
    throw ConfigError("synthetic dataset: per-class counts must be positive");
  Dataset ds;
  ds.name = "synthetic";
  ds.n_classes = classes;
  ds.side = side;
  const int64_t numel = ds.image_numel();
  ds.train_images.resize(static_cast<int64_t>(classes) * train_per_class * numel);
  ds.test_images.resize(static_cast<int64_t>(classes) * test_per_class * numel);

  // Interleave classes so split prefixes stay balanced.
  for (int i = 0; i < train_per_class; ++i)
    for (int c = 0; c < classes; ++c) ds.train_labels.push_back(c);
  for (int i = 0; i < test_per_class; ++i)
    for (int c = 0; c < classes; ++c) ds.test_labels.push_back(c);

  std::vector<int> seen_train(classes, 0), seen_test(classes, 0);
  for (int i = 0; i < ds.train_count(); ++i) {
    const int c = ds.train_labels[i];
    std::mt19937 rng(static_cast<uint32_t>(mix_seed(seed, 0x7261u, static_cast<uint64_t>(c) * 1000003 + seen_train[c])));
    detail::paint_synthetic(ds.train_images.data() + i * numel, side, c, rng);
    ++seen_train[c];
  }
  for (int i = 0; i < ds.test_count(); ++i) {
    const int c = ds.test_labels[i];
    std::mt19937 rng(static_cast<uint32_t>(mix_seed(seed, 0x7465u, static_cast<uint64_t>(c) * 1000003 + seen_test[c])));
    detail::paint_synthetic(ds.test_images.data() + i * numel, side, c, rng);
    ++seen_test[c];
  }
  return ds;
}

// On-disk layout:
//   <root>/meta.json   {"classes": K, "side": S}
//   <root>/train.bin   records of [1 byte label][3*S*S bytes u8 pixels]
//   <root>/test.bin    same record format
inline const char* bin32_layout_help() {
  return "expected layout: <root>/meta.json {\"classes\":K,\"side\":S}, "
         "<root>/train.bin and <root>/test.bin with records of "
         "[1 byte label][3*side*side bytes row-major u8 RGB planes]";
}

inline Dataset load_bin32(const std::string& root) {
  namespace fs = std::filesystem;
  const fs::path meta_path = fs::path(root) / "meta.json";
  if (!fs::exists(meta_path))
    throw IoError(cat("dataset: missing ", meta_path.string(), "; ",
                      bin32_layout_help()));
  nlohmann::json meta;
  try {
    std::ifstream in(meta_path);
    in >> meta;
  } catch (const std::exception& e) {
    throw IoError(cat("dataset: cannot parse ", meta_path.string(), ": ",
                      e.what(), "; ", bin32_layout_help()));
  }
  Dataset ds;
  ds.name = "bin32";
  ds.n_classes = meta.value("classes", 0);
  ds.side = meta.value("side", 32);
  if (ds.n_classes < 1 || ds.side < 1)
    throw IoError(cat("dataset: bad meta.json values; ", bin32_layout_help()));

  auto read_split = [&](const char* file, std::vector<float>& images,
                        std::vector<int>& labels) {
    const fs::path path = fs::path(root) / file;
    std::ifstream in(path, std::ios::binary);
    if (!in)
      throw IoError(cat("dataset: missing ", path.string(), "; ",
                        bin32_layout_help()));
    const int64_t numel = ds.image_numel();
    std::vector<unsigned char> rec(1 + numel);
    while (in.read(reinterpret_cast<char*>(rec.data()), rec.size())) {
      if (rec[0] >= ds.n_classes)
        throw IoError(cat("dataset: label ", static_cast<int>(rec[0]),
                          " out of range in ", path.string()));
      labels.push_back(rec[0]);
      for (int64_t i = 0; i < numel; ++i)
        images.push_back(static_cast<float>(rec[1 + i]) / 255.0f);
    }
    if (in.gcount() != 0)
      throw IoError(cat("dataset: truncated record in ", path.string(), "; ",
                        bin32_layout_help()));
    if (labels.empty())
      throw IoError(cat("dataset: no records in ", path.string(), "; ",
                        bin32_layout_help()));
  };
  read_split("train.bin", ds.train_images, ds.train_labels);
  read_split("test.bin", ds.test_images, ds.test_labels);
  return ds;
}

struct DatasetOptions {
  int classes = 10;
  int train_per_class = 500;
  int test_per_class = 100;
  uint64_t seed = 7;
};

inline Dataset load_dataset(const std::string& name, const std::string& root,
                            const DatasetOptions& opts = {}) {
  if (name == "synthetic")
    return make_synthetic(opts.classes, opts.train_per_class,
                          opts.test_per_class, opts.seed);
  if (name == "bin32") return load_bin32(root);
  throw ConfigError(cat("unknown dataset '", name,
                        "' (available: synthetic, bin32)"));
}

}  // namespace g2b
