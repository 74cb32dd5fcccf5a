#pragma once

#include <functional>
#include <iostream>
#include <map>
#include <thread>

#include "g2b/dataset.hpp"
#include "g2b/metrics.hpp"
#include "g2b/sidebranch.hpp"

namespace g2b {

// ---- task streams ----

struct Round {
  std::vector<int> class_ids;      // original dataset labels
  std::vector<int> train_indices;  // into the dataset train split
  std::vector<int> test_indices;
};

struct TaskStream {
  std::vector<Round> rounds;
  std::vector<int> class_order;     // permutation of class ids
  std::vector<int> internal_label;  // class id -> position in class_order
  int classes_per_round = 0;
  uint64_t order_seed = 0;

  int n_rounds() const { return static_cast<int>(rounds.size()); }
  int label_of(int class_id) const { return internal_label[class_id]; }
  int classes_through(int round) const {
    return (round + 1) * classes_per_round;
  }
};

// Shuffles the class set by order_seed, partitions it sequentially into
// rounds of classes_per_round, and indexes each round's train/test samples.
inline TaskStream build_task_stream(const Dataset& ds, int classes_per_round,
                                    uint64_t order_seed) {
  if (classes_per_round < 1)
    throw ConfigError("build_task_stream: classes_per_round must be >= 1");
  if (ds.n_classes % classes_per_round != 0)
    throw ConfigError(cat("build_task_stream: ", classes_per_round,
                          " classes per round does not divide ", ds.n_classes,
                          " classes"));
  TaskStream s;
  s.classes_per_round = classes_per_round;
  s.order_seed = order_seed;
  s.class_order.resize(ds.n_classes);
  for (int c = 0; c < ds.n_classes; ++c) s.class_order[c] = c;
  std::mt19937 rng(static_cast<uint32_t>(mix_seed(order_seed, 0x07DEu)));
  std::shuffle(s.class_order.begin(), s.class_order.end(), rng);
  s.internal_label.resize(ds.n_classes);
  for (int pos = 0; pos < ds.n_classes; ++pos)
    s.internal_label[s.class_order[pos]] = pos;

  const int n_rounds = ds.n_classes / classes_per_round;
  for (int r = 0; r < n_rounds; ++r) {
    Round round;
    for (int i = 0; i < classes_per_round; ++i)
      round.class_ids.push_back(s.class_order[r * classes_per_round + i]);
    for (int c : round.class_ids) {
      auto tr = ds.train_indices_of_class(c);
      auto te = ds.test_indices_of_class(c);
      if (tr.empty() || te.empty())
        throw ConfigError(cat("build_task_stream: class ", c,
                              " has an empty split"));
      round.train_indices.insert(round.train_indices.end(), tr.begin(), tr.end());
      round.test_indices.insert(round.test_indices.end(), te.begin(), te.end());
    }
    s.rounds.push_back(std::move(round));
  }
  return s;
}

// ---- exemplar memory ----

struct StoredSample {
  std::vector<float> image;
  int class_id = -1;      // original dataset label
  int source_index = -1;  // index in the dataset train split
};

// Fixed-budget rehearsal store. Per-class lists are kept in herding priority
// order, so truncating to a smaller quota keeps the best exemplars.
struct ExemplarMemory {
  int64_t budget = 0;
  std::map<int, std::vector<StoredSample>> store;

  ExemplarMemory() = default;
  explicit ExemplarMemory(int64_t b) : budget(b) {}

  int64_t size() const {
    int64_t n = 0;
    for (const auto& [c, v] : store) n += static_cast<int64_t>(v.size());
    return n;
  }
  int classes() const { return static_cast<int>(store.size()); }
};

// Greedy herding: repeatedly pick the sample whose inclusion brings the
// running feature mean closest to the class mean. Ties break to the lowest
// sample position. Returns the full priority order.
inline std::vector<int> herding_order(
    const std::vector<std::vector<double>>& features) {
  const int n = static_cast<int>(features.size());
  if (n == 0) return {};
  const size_t dim = features[0].size();
  std::vector<double> mean(dim, 0.0);
  for (const auto& f : features)
    for (size_t d = 0; d < dim; ++d) mean[d] += f[d];
  for (auto& m : mean) m /= n;

  std::vector<double> sum(dim, 0.0);
  std::vector<char> used(n, 0);
  std::vector<int> order;
  order.reserve(n);
  for (int t = 1; t <= n; ++t) {
    int best = -1;
    double best_obj = 0;
    for (int i = 0; i < n; ++i) {
      if (used[i]) continue;
      double obj = 0;
      for (size_t d = 0; d < dim; ++d) {
        double v = mean[d] - (sum[d] + features[i][d]) / t;
        obj += v * v;
      }
      if (best < 0 || obj < best_obj) {  // strict < keeps lowest index on ties
        best = i;
        best_obj = obj;
      }
    }
    used[best] = 1;
    for (size_t d = 0; d < dim; ++d) sum[d] += features[best][d];
    order.push_back(best);
  }
  return order;
}

struct HerdingCandidates {
  int class_id = -1;
  std::vector<int> sample_indices;  // dataset train indices, ascending
  std::vector<std::vector<double>> features;
};

// Recomputes quotas as floor(budget / classes_seen), truncates existing
// classes to the new quota and admits each new class's top-quota exemplars
// in herding order. A class with fewer candidates than the quota keeps all
// of them.
inline void update_memory(
    ExemplarMemory& mem, const std::vector<HerdingCandidates>& new_classes,
    const std::function<StoredSample(int class_id, int sample_index)>& fetch) {
  for (const auto& nc : new_classes)
    if (mem.store.count(nc.class_id))
      throw ConfigError(cat("update_memory: class ", nc.class_id,
                            " is already stored"));
  const int64_t classes_seen =
      mem.classes() + static_cast<int64_t>(new_classes.size());
  if (classes_seen == 0) return;
  const int64_t quota = mem.budget / classes_seen;

  for (auto& [c, v] : mem.store)
    if (static_cast<int64_t>(v.size()) > quota)
      v.resize(static_cast<size_t>(quota));

  for (const auto& nc : new_classes) {
    if (nc.sample_indices.size() != nc.features.size())
      throw ConfigError("update_memory: features/indices size mismatch");
    auto order = herding_order(nc.features);
    auto& slot = mem.store[nc.class_id];
    const int64_t take =
        std::min<int64_t>(quota, static_cast<int64_t>(order.size()));
    for (int64_t t = 0; t < take; ++t)
      slot.push_back(fetch(nc.class_id, nc.sample_indices[order[t]]));
  }
}

// ---- strategies ----

enum class StrategyKind { Finetune, Rehearsal, WeightAligning };

inline const char* strategy_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::Finetune:
      return "finetune";
    case StrategyKind::Rehearsal:
      return "rehearsal";
    case StrategyKind::WeightAligning:
      return "weight_aligning";
  }
  return "?";
}

struct StrategySpec {
  StrategyKind kind = StrategyKind::Finetune;
  double lr = 0.05;
  double momentum = 0.9;
  int epochs = 6;
  int batch_size = 32;
  bool cosine = true;
  double kd_temperature = 2.0;
  bool g2b_enabled = false;
  std::vector<bool> enabled_side_blocks;

  void validate() const {
    if (epochs < 1) throw ConfigError("strategy: epochs must be >= 1");
    if (lr <= 0) throw ConfigError("strategy: learning rate must be > 0");
    if (batch_size < 1) throw ConfigError("strategy: batch size must be >= 1");
  }
};

// Rescales new-class classifier rows so their mean L2 norm matches the old
// rows'. Old rows and all biases stay untouched.
template <class T>
void weight_align(Linear<T>& head, const std::vector<int>& old_rows,
                  const std::vector<int>& new_rows) {
  if (old_rows.empty() || new_rows.empty())
    throw ConfigError("weight_align: both class sets must be non-empty");
  const int in = head.in_features();
  auto mean_norm = [&](const std::vector<int>& rows) {
    double s = 0;
    for (int r : rows) {
      double n2 = 0;
      for (int j = 0; j < in; ++j) {
        double w = head.w.value.v[static_cast<int64_t>(r) * in + j];
        n2 += w * w;
      }
      s += std::sqrt(n2);
    }
    return s / static_cast<double>(rows.size());
  };
  const double old_norm = mean_norm(old_rows);
  const double new_norm = mean_norm(new_rows);
  if (new_norm == 0.0) {
    std::cerr << "[g2b] weight_align: new rows have zero mean norm, skipping\n";
    return;
  }
  const T s = static_cast<T>(old_norm / new_norm);
  for (int r : new_rows)
    for (int j = 0; j < in; ++j)
      head.w.value.v[static_cast<int64_t>(r) * in + j] *= s;
}

// ---- round training ----

struct TrainItem {
  const float* image = nullptr;  // borrowed pixels, image_numel floats
  int label = -1;                // internal label
};

struct RoundRunInfo {
  uint64_t data_order_hash = 0;   // order of samples actually trained on
  std::vector<float> batch_losses;
  int steps = 0;
};

namespace detail {

inline Tensor<float> gather_batch(const std::vector<TrainItem>& items,
                                  const std::vector<int>& order, int begin,
                                  int end, int channels, int side,
                                  std::vector<int>* labels) {
  const int n = end - begin;
  const int64_t numel = static_cast<int64_t>(channels) * side * side;
  Tensor<float> batch({n, channels, side, side});
  for (int i = 0; i < n; ++i) {
    const TrainItem& it = items[order[begin + i]];
    std::copy(it.image, it.image + numel, batch.data() + i * numel);
    if (labels) labels->push_back(it.label);
  }
  return batch;
}

}  // namespace detail

// Trains one round. Finetune sees only the round's samples; Rehearsal and
// WeightAligning add the memory and distill old-class logits against a
// frozen snapshot of the model taken at round start. The G2B wrapper changes
// nothing here: losses and optimizer settings are those of the vanilla
// strategy.
inline RoundRunInfo run_round(G2bModel<float>& model,
                              const StrategySpec& strategy,
                              const std::vector<TrainItem>& round_data,
                              const ExemplarMemory& memory,
                              const std::function<int(int)>& label_of,
                              int n_old, int round_idx, uint64_t stream_seed,
                              int channels, int side) {
  strategy.validate();
  if (round_data.empty())
    throw std::invalid_argument("run_round: empty round data");

  std::vector<TrainItem> items = round_data;
  const bool rehearses = strategy.kind != StrategyKind::Finetune;
  if (rehearses)
    for (const auto& [cls, samples] : memory.store)
      for (const auto& s : samples)
        items.push_back({s.image.data(), label_of(cls)});

  const int n_total_classes = model.n_classes();
  const bool distill = rehearses && n_old > 0;
  const double kd_weight =
      distill ? static_cast<double>(n_old) / n_total_classes : 0.0;

  // Frozen pre-round snapshot; head expansion preserved the old-class rows
  // bit-exactly, so its first n_old logits are the pre-round model's.
  std::unique_ptr<G2bModel<float>> teacher;
  if (distill) teacher = std::make_unique<G2bModel<float>>(model);

  auto refs = model.params();
  const int n = static_cast<int>(items.size());
  const int batches_per_epoch = (n + strategy.batch_size - 1) / strategy.batch_size;
  SgdMomentum<float> opt(static_cast<float>(strategy.lr),
                         static_cast<float>(strategy.momentum),
                         strategy.epochs * batches_per_epoch, strategy.cosine);

  // All shuffling derives from (stream seed, round); strategies and the G2B
  // flag see identical data order.
  std::mt19937 shuffle_rng(
      static_cast<uint32_t>(mix_seed(stream_seed, 0xDA7Au, round_idx)));
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  RoundRunInfo info;
  uint64_t hash = 1469598103934665603ull;
  for (int epoch = 0; epoch < strategy.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (int i : order) hash = fnv1a64(&i, sizeof(i), hash);
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int begin = b * strategy.batch_size;
      const int end = std::min(n, begin + strategy.batch_size);
      std::vector<int> labels;
      auto batch = detail::gather_batch(items, order, begin, end, channels,
                                        side, &labels);
      Tensor<float> teacher_logits;
      if (distill) {
        NoGrad ng;
        teacher_logits = teacher->forward(batch, false).logits->value;
      }
      refs.zero_grad();
      auto out = model.forward(batch, true);
      auto loss = cross_entropy(out.logits, labels);
      if (distill)
        loss = add(loss, scale(distill_loss(
                              out.logits, teacher_logits, n_old,
                              static_cast<float>(strategy.kd_temperature)),
                          static_cast<float>(kd_weight)));
      backward(loss);
      opt.step(refs);
      info.batch_losses.push_back(loss->value.v[0]);
      ++info.steps;
    }
  }
  info.data_order_hash = hash;

  if (strategy.kind == StrategyKind::WeightAligning && n_old > 0) {
    std::vector<int> old_rows(n_old), new_rows(n_total_classes - n_old);
    for (int i = 0; i < n_old; ++i) old_rows[i] = i;
    for (int i = n_old; i < n_total_classes; ++i) new_rows[i - n_old] = i;
    weight_align(model.backbone.head, old_rows, new_rows);
  }
  return info;
}

// ---- evaluation ----

struct PredictionRecord {
  int test_index = -1;
  int true_round = -1;
  int true_label = -1;  // internal
  int predicted = -1;   // internal
};

struct EvalRow {
  std::vector<Fraction> per_task;  // j = 0..k
  Fraction overall;
  std::vector<PredictionRecord> predictions;
  // Per enabled side block: per-sample mask sparsities over the test pass.
  std::vector<std::vector<double>> block_sparsity;
};

// Pure accounting step: per-round and overall fractions from a prediction
// log. Rounds j > upto_round must not appear.
inline std::pair<std::vector<Fraction>, Fraction> reduce_predictions(
    const std::vector<PredictionRecord>& predictions, int upto_round) {
  std::vector<Fraction> per_task(upto_round + 1);
  Fraction overall;
  for (const auto& p : predictions) {
    if (p.true_round < 0 || p.true_round > upto_round)
      throw ConfigError(cat("reduce_predictions: record for round ",
                            p.true_round, " outside 0..", upto_round));
    auto& f = per_task[p.true_round];
    ++f.total;
    ++overall.total;
    if (p.predicted == p.true_label) {
      ++f.correct;
      ++overall.correct;
    }
  }
  return {std::move(per_task), overall};
}

// Top-1 accuracy after round k over every round j <= k, predictions taken
// over all classes learned so far. Test batches are sharded over a fixed
// number of worker threads (read-only forward passes); the reduction is
// integer counting in shard order, so the result is deterministic.
inline EvalRow evaluate(G2bModel<float>& model, const TaskStream& stream,
                        const Dataset& ds, int upto_round, int batch_size = 64,
                        bool collect_sparsity = false, int workers = 2) {
  if (upto_round < 0 || upto_round >= stream.n_rounds())
    throw ConfigError(cat("evaluate: round ", upto_round, " outside stream"));

  struct Item {
    int test_index;
    int round;
  };
  std::vector<Item> items;
  for (int j = 0; j <= upto_round; ++j)
    for (int idx : stream.rounds[j].test_indices) items.push_back({idx, j});

  const int n_enabled = static_cast<int>(model.enabled_block_indices().size());
  struct ShardResult {
    std::vector<PredictionRecord> predictions;
    std::vector<std::vector<double>> sparsity;
  };
  const int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(items.size())));
  std::vector<ShardResult> results(n_workers);

  auto run_shard = [&](int w) {
    NoGrad ng;
    ShardResult& res = results[w];
    res.sparsity.resize(n_enabled);
    const size_t lo = items.size() * w / n_workers;
    const size_t hi = items.size() * (w + 1) / n_workers;
    const int64_t numel = ds.image_numel();
    for (size_t begin = lo; begin < hi; begin += batch_size) {
      const size_t end = std::min(hi, begin + batch_size);
      const int bn = static_cast<int>(end - begin);
      Tensor<float> batch({bn, ds.channels, ds.side, ds.side});
      for (int i = 0; i < bn; ++i)
        std::copy(ds.test_image(items[begin + i].test_index),
                  ds.test_image(items[begin + i].test_index) + numel,
                  batch.data() + i * numel);
      auto out = model.forward(batch, false);
      const int classes = model.n_classes();
      for (int i = 0; i < bn; ++i) {
        const float* row = out.logits->value.data() + static_cast<int64_t>(i) * classes;
        int arg = 0;
        for (int c = 1; c < classes; ++c)
          if (row[c] > row[arg]) arg = c;
        const Item& it = items[begin + i];
        res.predictions.push_back(
            {it.test_index, it.round,
             stream.label_of(ds.test_labels[it.test_index]), arg});
      }
      if (collect_sparsity) {
        for (int m = 0; m < static_cast<int>(out.masks.size()); ++m) {
          const auto& mask = out.masks[m]->value;
          const int64_t per = mask.size() / bn;
          for (int i = 0; i < bn; ++i) {
            int64_t zeros = 0;
            for (int64_t e = 0; e < per; ++e)
              if (mask.v[i * per + e] == 0.0f) ++zeros;
            res.sparsity[m].push_back(static_cast<double>(zeros) /
                                      static_cast<double>(per));
          }
        }
      }
    }
  };

  if (n_workers == 1) {
    run_shard(0);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < n_workers; ++w) threads.emplace_back(run_shard, w);
    for (auto& t : threads) t.join();
  }

  EvalRow row;
  row.block_sparsity.resize(n_enabled);
  for (const auto& shard : results) {
    row.predictions.insert(row.predictions.end(), shard.predictions.begin(),
                           shard.predictions.end());
    for (int m = 0; m < n_enabled; ++m)
      row.block_sparsity[m].insert(row.block_sparsity[m].end(),
                                   shard.sparsity[m].begin(),
                                   shard.sparsity[m].end());
  }
  std::tie(row.per_task, row.overall) =
      reduce_predictions(row.predictions, upto_round);
  return row;
}

// Model-backed memory update: herding features are the model's pooled
// (modulated, for G2B) pre-head embedding in eval mode.
inline void update_memory(ExemplarMemory& mem, const Dataset& ds,
                          const Round& round, G2bModel<float>& model,
                          int batch_size = 64) {
  std::vector<HerdingCandidates> new_classes;
  for (int cls : round.class_ids) {
    HerdingCandidates hc;
    hc.class_id = cls;
    for (int idx : round.train_indices)
      if (ds.train_labels[idx] == cls) hc.sample_indices.push_back(idx);

    NoGrad ng;
    const int64_t numel = ds.image_numel();
    const int n = static_cast<int>(hc.sample_indices.size());
    for (int begin = 0; begin < n; begin += batch_size) {
      const int end = std::min(n, begin + batch_size);
      Tensor<float> batch({end - begin, ds.channels, ds.side, ds.side});
      for (int i = 0; i < end - begin; ++i)
        std::copy(ds.train_image(hc.sample_indices[begin + i]),
                  ds.train_image(hc.sample_indices[begin + i]) + numel,
                  batch.data() + i * numel);
      auto features = model.forward(batch, false).features->value;
      const int fdim = features.dim(1);
      for (int i = 0; i < end - begin; ++i)
        hc.features.emplace_back(features.data() + static_cast<int64_t>(i) * fdim,
                                 features.data() + static_cast<int64_t>(i + 1) * fdim);
    }
    new_classes.push_back(std::move(hc));
  }
  const int64_t numel = ds.image_numel();
  update_memory(mem, new_classes, [&](int class_id, int sample_index) {
    StoredSample s;
    s.class_id = class_id;
    s.source_index = sample_index;
    s.image.assign(ds.train_image(sample_index),
                   ds.train_image(sample_index) + numel);
    return s;
  });
}

}  // namespace g2b
