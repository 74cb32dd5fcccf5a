// Acceptance suite: every release criterion as one pass/fail line.
// Heavy desk-scale experiments are shared across criteria and run in
// parallel where possible. Exit code is the number of failed criteria.
//
// Run directory defaults to <cwd>/acceptance_runs; override with
// G2B_ACCEPT_DIR. Set G2B_ACCEPT_REUSE=1 to resume/reuse finished runs
// (development convenience; default is a fresh run).

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <set>
#include <thread>

#include "g2b/report.hpp"

using namespace g2b;

namespace {

struct Criterion {
  int id;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

std::vector<Criterion> g_results;

template <class Fn>
void criterion(int id, const std::string& name, Fn&& fn) {
  Criterion c{id, name, false, "", 0.0};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    std::string detail;
    c.pass = fn(detail);
    c.detail = detail;
  } catch (const std::exception& e) {
    c.pass = false;
    c.detail = cat("exception: ", e.what());
  }
  c.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << (c.pass ? "[PASS]" : "[FAIL]") << " criterion " << c.id << ": "
            << c.name << " (" << detail::fmt("%.1f", c.seconds) << "s)";
  if (!c.detail.empty()) std::cout << " -- " << c.detail;
  std::cout << "\n" << std::flush;
  g_results.push_back(std::move(c));
}

// ---- shared desk-scale experiment grid ----

std::string g_run_dir;
bool g_reuse = false;

ExperimentConfig desk_cnn(const std::string& strategy, bool g2b, uint64_t seed) {
  ExperimentConfig cfg;
  cfg.classes = 10;
  cfg.classes_per_round = 2;
  cfg.train_per_class = 100;
  cfg.test_per_class = 50;
  cfg.dataset_seed = 7;
  cfg.backbone = "cnn";
  cfg.strategy = strategy;
  cfg.g2b = g2b;
  cfg.memory_budget = 100;
  cfg.epochs = 5;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  cfg.stream_seed = seed;
  cfg.init_seed = seed;
  cfg.output_dir = cat(g_run_dir, "/cnn_", strategy, g2b ? "_g2b" : "", "_s", seed);
  return cfg;
}

ExperimentConfig desk_vit(const std::string& strategy, bool g2b, uint64_t seed) {
  ExperimentConfig cfg = desk_cnn(strategy, g2b, seed);
  cfg.backbone = "vit";
  cfg.classes = 6;  // 3 rounds keeps the transformer runs inside the budget
  cfg.lr = 0.01;
  cfg.epochs = 6;
  cfg.output_dir = cat(g_run_dir, "/vit_", strategy, g2b ? "_g2b" : "", "_s", seed);
  return cfg;
}

std::map<std::string, RunRecord> g_runs;
std::mutex g_runs_mutex;

const RunRecord& run_of(const ExperimentConfig& cfg) {
  std::lock_guard<std::mutex> lock(g_runs_mutex);
  return g_runs.at(cfg.output_dir);
}

void execute_grid(const std::vector<ExperimentConfig>& grid) {
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= grid.size()) return;
      RunOptions opts;
      opts.quiet = true;
      opts.fresh = !g_reuse;
      RunRecord rec;
      try {
        rec = run_experiment(grid[i], opts);
      } catch (const ResumeMismatch&) {
        opts.fresh = true;
        rec = run_experiment(grid[i], opts);
      }
      std::lock_guard<std::mutex> lock(g_runs_mutex);
      std::cout << "  [run] " << grid[i].output_dir << " avg="
                << detail::pct2(rec.avg()) << " last=" << detail::pct2(rec.last())
                << (rec.rounds.size() >= 2
                        ? cat(" f=", detail::f4(rec.forgetting()))
                        : std::string())
                << "\n"
                << std::flush;
      g_runs.emplace(grid[i].output_dir, std::move(rec));
    }
  };
  std::thread a(worker), b(worker);
  a.join();
  b.join();
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Tensor<float> random_images(int n, int side, uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  Tensor<float> t({n, 3, side, side});
  for (auto& x : t.v) x = d(rng);
  return t;
}

// ---- criterion 1 ----

bool check_modulation(std::string& detail) {
  // (a) analytic vs central finite differences on a <=200-parameter toy
  // two-branch model, step 1e-4, 1e-3 relative tolerance, every parameter.
  std::mt19937 rng(31);
  Conv2d<double> m1("m1", 3, 2, 3, 1, 1, true, rng);
  Conv2d<double> m2("m2", 2, 2, 3, 2, 1, true, rng);
  Conv2d<double> s1("s1", 3, 2, 3, 1, 1, true, rng);
  Conv2d<double> s2("s2", 2, 2, 3, 2, 1, true, rng);
  Linear<double> head("head", 2, 2, rng);
  ParamRefs<double> refs;
  m1.collect(refs);
  m2.collect(refs);
  s1.collect(refs);
  s2.collect(refs);
  head.collect(refs);
  if (refs.param_count() > 200) {
    detail = cat("toy model has ", refs.param_count(), " params");
    return false;
  }

  Tensor<double> images({2, 3, 4, 4});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& x : images.v) x = u(rng);
  std::vector<int> labels{0, 1};
  auto loss_fn = [&]() {
    auto img = constant(images);
    auto side_a = relu(s1.forward(img));
    auto side_b = relu(s2.forward(side_a));
    auto x = relu(m1.forward(img));
    x = modulate(x, side_a);
    x = relu(m2.forward(x));
    x = modulate(x, side_b);
    return cross_entropy(head.forward(global_avg_pool(x)), labels);
  };

  refs.zero_grad();
  backward(loss_fn());
  const double step = 1e-4;
  double max_rel = 0;
  int64_t checked = 0;
  for (auto* p : refs.params) {
    for (int64_t i = 0; i < p->value.size(); ++i) {
      const double a = p->grad.v[i];
      const double orig = p->value.v[i];
      p->value.v[i] = orig + step;
      const double lp = loss_fn()->value.v[0];
      p->value.v[i] = orig - step;
      const double lm = loss_fn()->value.v[0];
      p->value.v[i] = orig;
      const double numeric = (lp - lm) / (2 * step);
      max_rel = std::max(max_rel, std::fabs(a - numeric) /
                                      std::max({std::fabs(a), std::fabs(numeric),
                                                1e-6}));
      ++checked;
    }
  }
  if (max_rel >= 1e-3) {
    detail = cat("gradient check failed: max rel err ", max_rel);
    return false;
  }

  // (b) all-ones masks equal the vanilla forward within 1e-6, both backbones.
  for (auto kind : {BackboneKind::Cnn, BackboneKind::Vit}) {
    BackboneSpec spec = kind == BackboneKind::Cnn ? BackboneSpec::small_cnn(5)
                                                  : BackboneSpec::small_vit(5);
    std::mt19937 mrng(17);
    Backbone<float> model(spec, mrng);
    NoGrad ng;
    for (int trial = 0; trial < 3; ++trial) {
      auto imgs = random_images(2, 32, 40 + trial);
      auto plain = model.forward(imgs, nullptr, false);
      MaskList<float> masks(model.n_blocks());
      for (int i = 0; i < model.n_blocks(); ++i)
        masks[i] = constant(Tensor<float>::ones(model.shapes[i].batched(2)));
      auto masked = model.forward(constant(imgs), &masks, false);
      for (int64_t i = 0; i < plain.logits->value.size(); ++i)
        if (std::fabs(plain.logits->value.v[i] - masked.logits->value.v[i]) >=
            1e-6f) {
          detail = "all-ones mask diverged from vanilla";
          return false;
        }
    }
  }

  // (c) zero mask positions give exact zeros.
  {
    std::mt19937 mrng(19);
    Backbone<float> model(BackboneSpec::small_cnn(4), mrng);
    auto imgs = random_images(2, 32, 50);
    Tensor<float> m = Tensor<float>::ones(model.shapes[0].batched(2));
    std::mt19937 zrng(6);
    std::uniform_int_distribution<int64_t> pick(0, m.size() - 1);
    std::vector<int64_t> zeros;
    for (int i = 0; i < 500; ++i) zeros.push_back(pick(zrng));
    for (auto i : zeros) m.v[i] = 0.0f;
    MaskList<float> masks(4);
    masks[0] = constant(m);
    NoGrad ng;
    auto fwd = model.forward(constant(imgs), &masks, false);
    for (auto i : zeros)
      if (fwd.blocks[0]->value.v[i] != 0.0f) {
        detail = "zero mask position produced a nonzero output";
        return false;
      }
  }
  detail = cat("max rel err ", detail::fmt("%.2e", max_rel), " over ", checked,
               " params");
  return true;
}

// ---- criterion 2 ----

bool check_adapters(std::string& detail) {
  std::mt19937 rng(7);
  int built = 0, rejected = 0;
  const int d = 8;
  for (int s = 1; s <= 32; ++s) {
    for (int grid = 1; grid <= s; ++grid) {
      BlockShape target{BlockKind::TokenMatrix, d, 0, 0, grid * grid};
      if (s % grid == 0) {
        auto spec = derive_adapter(d, s, target, 0);
        if (spec.kernel != s / grid) {
          detail = cat("kernel ", spec.kernel, " for S=", s, " grid=", grid);
          return false;
        }
        Adapter<float> adapter("a", spec, d, rng);
        Tensor<float> side({1, d, s, s});
        std::uniform_real_distribution<float> u(-1.0f, 1.0f);
        for (auto& x : side.v) x = u(rng);
        auto mask = adapter.forward(constant(side));
        if (mask->value.shape != Shape{1, d, grid * grid}) {
          detail = cat("bad mask shape for S=", s, " grid=", grid);
          return false;
        }
        // exact reshape round trip
        auto back = tokens_to_grid(mask);
        auto again = grid_to_tokens(back);
        if (again->value.v != mask->value.v) {
          detail = "reshape round trip not exact";
          return false;
        }
        ++built;
      } else {
        try {
          derive_adapter(d, s, target, 0);
          detail = cat("S=", s, " grid=", grid, " accepted but not integral");
          return false;
        } catch (const ConfigError&) {
          ++rejected;
        }
      }
    }
  }
  // feature-map side: integer pooling ratios accepted, others rejected
  for (int s = 1; s <= 32; ++s)
    for (int main_s = 1; main_s <= s; ++main_s) {
      BlockShape target{BlockKind::FeatureMap, d, main_s, main_s, 0};
      if (s % main_s == 0) {
        auto spec = derive_adapter(d, s, target, 1);
        const auto want =
            s == main_s ? AdapterKind::Identity : AdapterKind::MaxPool;
        if (spec.kind != want) {
          detail = cat("wrong adapter kind for S=", s, " main=", main_s);
          return false;
        }
        ++built;
      } else {
        try {
          derive_adapter(d, s, target, 1);
          detail = cat("pool ratio ", s, "/", main_s, " accepted");
          return false;
        } catch (const ConfigError&) {
          ++rejected;
        }
      }
    }
  detail = cat(built, " valid configs built, ", rejected, " invalid rejected");
  return true;
}

// ---- criterion 3 ----

bool check_protocol_invariants(std::string& detail) {
  std::mt19937 rng(99);
  auto dummy_fetch = [](int class_id, int sample_index) {
    StoredSample s;
    s.class_id = class_id;
    s.source_index = sample_index;
    return s;
  };
  int checked_streams = 0;
  for (int trial = 0; trial < 100; ++trial) {
    // randomized stream: classes divisible by cpr
    std::uniform_int_distribution<int> cpr_d(1, 5);
    const int cpr = cpr_d(rng);
    std::uniform_int_distribution<int> rounds_d(1, 6);
    const int n_rounds = rounds_d(rng);
    const int classes = cpr * n_rounds;
    Dataset ds;
    ds.n_classes = classes;
    ds.side = 2;
    std::uniform_int_distribution<int> per_d(1, 4);
    const int per = per_d(rng);
    for (int i = 0; i < per; ++i)
      for (int c = 0; c < classes; ++c) {
        ds.train_labels.push_back(c);
        ds.test_labels.push_back(c);
      }
    ds.train_images.assign(ds.train_labels.size() * ds.image_numel(), 0.0f);
    ds.test_images.assign(ds.test_labels.size() * ds.image_numel(), 0.0f);

    auto stream = build_task_stream(ds, cpr, rng());
    std::set<int> seen;
    for (const auto& round : stream.rounds)
      for (int c : round.class_ids)
        if (!seen.insert(c).second) {
          detail = "round class sets are not disjoint";
          return false;
        }
    if (static_cast<int>(seen.size()) != classes) {
      detail = "rounds do not exhaust the class set";
      return false;
    }
    ++checked_streams;

    // randomized memory schedule over the stream
    std::uniform_int_distribution<int> budget_d(1, 300), count_d(3, 40);
    ExemplarMemory mem(budget_d(rng));
    for (const auto& round : stream.rounds) {
      std::vector<HerdingCandidates> ncs;
      for (int c : round.class_ids) {
        HerdingCandidates hc;
        hc.class_id = c;
        const int count = count_d(rng);
        std::uniform_real_distribution<double> f(-1.0, 1.0);
        for (int i = 0; i < count; ++i) {
          hc.sample_indices.push_back(i);
          hc.features.push_back({f(rng), f(rng)});
        }
        ncs.push_back(std::move(hc));
      }
      update_memory(mem, ncs, dummy_fetch);
      if (mem.size() > mem.budget) {
        detail = cat("budget ", mem.budget, " exceeded: ", mem.size());
        return false;
      }
      const int64_t quota = mem.budget / mem.classes();
      for (const auto& [c, v] : mem.store) {
        if (static_cast<int64_t>(v.size()) > quota) {
          detail = cat("class ", c, " holds ", v.size(), " > quota ", quota);
          return false;
        }
        // every class with >= quota candidates must hold exactly quota
        if (static_cast<int64_t>(v.size()) < std::min<int64_t>(quota, 3)) {
          detail = cat("class ", c, " under-filled: ", v.size(), "/", quota);
          return false;
        }
      }
    }
  }
  detail = cat(checked_streams, " random streams and memory schedules");
  return true;
}

// ---- criterion 4 ----

bool check_metric_oracles(std::string& detail) {
  // tiny run whose persisted predictions we recompute by brute force
  ExperimentConfig cfg;
  cfg.classes = 6;
  cfg.classes_per_round = 2;
  cfg.train_per_class = 8;
  cfg.test_per_class = 5;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.memory_budget = 12;
  cfg.strategy = "rehearsal";
  cfg.output_dir = cat(g_run_dir, "/oracle_run");
  auto rec = run_experiment(cfg, {.fresh = true, .quiet = true});

  // brute-force pass over the prediction logs
  AccuracyMatrix recomputed;
  for (int r = 0; r < 3; ++r) {
    std::ifstream in(cat(cfg.output_dir, "/predictions_round_", r, ".csv"));
    if (!in) {
      detail = "missing prediction log";
      return false;
    }
    std::string line;
    std::getline(in, line);  // header
    std::vector<Fraction> per_task(r + 1);
    Fraction overall;
    while (std::getline(in, line)) {
      int vals[4], vi = 0;
      size_t pos = 0;
      for (int f = 0; f < 4; ++f) {
        size_t comma = line.find(',', pos);
        vals[vi++] = std::stoi(line.substr(pos, comma - pos));
        pos = comma == std::string::npos ? line.size() : comma + 1;
      }
      ++per_task[vals[1]].total;
      ++overall.total;
      if (vals[3] == vals[2]) {
        ++per_task[vals[1]].correct;
        ++overall.correct;
      }
    }
    recomputed.append_row(per_task, overall);
  }
  const auto m = rec.matrix();
  for (int k = 0; k < 3; ++k) {
    if (!(recomputed.overall[k] == m.overall[k])) {
      detail = cat("overall[", k, "] mismatch");
      return false;
    }
    for (int j = 0; j <= k; ++j)
      if (!(recomputed.at(k, j) == m.at(k, j))) {
        detail = cat("a[", k, "][", j, "] mismatch");
        return false;
      }
  }
  if (avg_accuracy(recomputed) != rec.avg() ||
      last_accuracy(recomputed) != rec.last() ||
      forgetting_measure(recomputed, 3) != rec.forgetting()) {
    detail = "avg/last/forgetting differ from the brute-force recompute";
    return false;
  }

  // hand example: a[1][1]=0.9, a[2][1]=0.7 -> F_2 = 0.2
  AccuracyMatrix hand;
  hand.append_row({{9, 10}}, {9, 10});
  hand.append_row({{7, 10}, {8, 10}}, {15, 20});
  if (std::fabs(forgetting_measure(hand, 2) - 0.2) > 1e-12) {
    detail = "hand F_2 example failed";
    return false;
  }
  detail = "exact match on recomputed matrix and hand example";
  return true;
}

// ---- criteria 5-7 (shared desk-scale runs) ----

const std::vector<uint64_t> kSeeds{1, 2, 3};

bool check_forgetting_phenomenon(std::string& detail) {
  std::vector<double> drops;
  for (auto seed : kSeeds) {
    const auto& rec = run_of(desk_cnn("finetune", false, seed));
    const auto m = rec.matrix();
    const double drop = m.at(0, 0).value() - m.at(4, 0).value();
    drops.push_back(drop * 100);
    if (drop < 0.20) {
      detail = cat("seed ", seed, ": round-0 drop only ",
                   detail::fmt("%.1f", drop * 100), " points");
      return false;
    }
  }
  detail = cat("round-0 accuracy drops: ", detail::fmt("%.1f", drops[0]), ", ",
               detail::fmt("%.1f", drops[1]), ", ", detail::fmt("%.1f", drops[2]),
               " points");
  return true;
}

bool check_strategy_ordering(std::string& detail) {
  std::vector<double> deltas;
  for (auto seed : kSeeds) {
    const double ft = run_of(desk_cnn("finetune", false, seed)).avg();
    const double rh = run_of(desk_cnn("rehearsal", false, seed)).avg();
    deltas.push_back((rh - ft) * 100);
  }
  const double med = median3(deltas);
  detail = cat("rehearsal - finetune avg, median ", detail::fmt("%.1f", med),
               " points");
  return med >= 5.0;
}

bool check_g2b_direction(std::string& detail) {
  auto medians = [&](auto make_cfg, bool g2b) {
    std::vector<double> avgs, fs;
    for (auto seed : kSeeds) {
      const auto& rec = run_of(make_cfg("rehearsal", g2b, seed));
      avgs.push_back(rec.avg() * 100);
      fs.push_back(rec.forgetting());
    }
    return std::pair{median3(avgs), median3(fs)};
  };
  auto [cnn_avg_v, cnn_f_v] = medians(desk_cnn, false);
  auto [cnn_avg_g, cnn_f_g] = medians(desk_cnn, true);
  auto [vit_avg_v, vit_f_v] = medians(desk_vit, false);
  auto [vit_avg_g, vit_f_g] = medians(desk_vit, true);

  detail = cat("cnn avg ", detail::fmt("%.2f", cnn_avg_g), " vs ",
               detail::fmt("%.2f", cnn_avg_v), ", F ", detail::f4(cnn_f_g),
               " vs ", detail::f4(cnn_f_v), "; vit avg ",
               detail::fmt("%.2f", vit_avg_g), " vs ",
               detail::fmt("%.2f", vit_avg_v), ", F ", detail::f4(vit_f_g),
               " vs ", detail::f4(vit_f_v));
  if (cnn_avg_g < cnn_avg_v - 1.0) return false;
  if (cnn_f_g > cnn_f_v) return false;
  if (vit_avg_g < vit_avg_v - 1.0) return false;
  if (vit_f_g > vit_f_v) return false;
  return true;
}

// ---- criterion 8 ----

bool check_ablation(std::string& detail) {
  std::vector<RunRecord> records;
  std::vector<double> params;
  for (int j = 0; j <= 4; ++j) {
    ExperimentConfig cfg;
    cfg.classes = 4;
    cfg.classes_per_round = 2;
    cfg.train_per_class = 8;
    cfg.test_per_class = 4;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.memory_budget = 8;
    cfg.strategy = "rehearsal";
    cfg.g2b = j > 0;
    if (cfg.g2b) {
      cfg.side_blocks.assign(4, false);
      for (int i = 0; i < j; ++i) cfg.side_blocks[i] = true;
    }
    cfg.output_dir = cat(g_run_dir, "/ablate_", j);
    records.push_back(run_experiment(cfg, {.fresh = true, .quiet = true}));
    params.push_back(records.back().params_millions);
  }
  for (size_t i = 1; i < params.size(); ++i)
    if (params[i] <= params[i - 1]) {
      detail = cat("params not strictly increasing at step ", i);
      return false;
    }
  const auto table = ablation_table(records);
  atomic_write_text(cat(g_run_dir, "/ablation.csv"), table);
  if (table.rfind("side_blocks,params_m,avg,last,f_k\n", 0) != 0 ||
      std::count(table.begin(), table.end(), '\n') != 6) {
    detail = "ablation table malformed";
    return false;
  }
  detail = cat("params ", detail::fmt("%.4f", params.front()), "M -> ",
               detail::fmt("%.4f", params.back()), "M over 5 runs");
  return true;
}

// ---- criterion 9 ----

bool check_determinism_resume(std::string& detail) {
  ExperimentConfig cfg;
  cfg.classes = 10;
  cfg.classes_per_round = 2;
  cfg.train_per_class = 10;
  cfg.test_per_class = 5;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.memory_budget = 20;
  cfg.strategy = "rehearsal";

  cfg.output_dir = cat(g_run_dir, "/det_a");
  auto a = run_experiment(cfg, {.fresh = true, .quiet = true});
  cfg.output_dir = cat(g_run_dir, "/det_b");
  auto b = run_experiment(cfg, {.fresh = true, .quiet = true});
  for (int k = 0; k < 5; ++k) {
    if (!(a.rounds[k].overall == b.rounds[k].overall) ||
        a.rounds[k].per_task != b.rounds[k].per_task) {
      detail = cat("rerun diverged at round ", k);
      return false;
    }
  }

  cfg.output_dir = cat(g_run_dir, "/det_resume");
  auto partial = run_experiment(cfg, {.fresh = true, .stop_after_round = 2, .quiet = true});
  if (partial.complete || partial.rounds.size() != 3) {
    detail = "interruption hook misbehaved";
    return false;
  }
  auto resumed = run_experiment(cfg, {.quiet = true});
  for (int k = 0; k < 5; ++k) {
    if (!(resumed.rounds[k].overall == a.rounds[k].overall) ||
        resumed.rounds[k].per_task != a.rounds[k].per_task) {
      detail = cat("resumed run diverged at round ", k);
      return false;
    }
  }
  if (resumed.avg() != a.avg() || resumed.forgetting() != a.forgetting()) {
    detail = "resumed metrics differ";
    return false;
  }
  detail = "identical matrices across rerun and kill-resume";
  return true;
}

}  // namespace

int main() {
  const char* dir = std::getenv("G2B_ACCEPT_DIR");
  g_run_dir = dir ? dir : "acceptance_runs";
  const char* reuse = std::getenv("G2B_ACCEPT_REUSE");
  g_reuse = reuse && std::string(reuse) == "1";
  std::filesystem::create_directories(g_run_dir);

  criterion(1, "modulation correctness (gradients, ones-mask, zero-mask)",
            check_modulation);
  criterion(2, "adapter arithmetic and reshape round trip", check_adapters);
  criterion(3, "protocol invariants over randomized streams",
            check_protocol_invariants);
  criterion(4, "metric oracles against persisted predictions",
            check_metric_oracles);

  std::cout << "running desk-scale experiment grid...\n" << std::flush;
  std::vector<ExperimentConfig> grid;
  for (auto seed : kSeeds) {
    grid.push_back(desk_cnn("finetune", false, seed));
    grid.push_back(desk_cnn("rehearsal", false, seed));
    grid.push_back(desk_cnn("rehearsal", true, seed));
    grid.push_back(desk_vit("rehearsal", false, seed));
    grid.push_back(desk_vit("rehearsal", true, seed));
  }
  const auto t0 = std::chrono::steady_clock::now();
  execute_grid(grid);
  std::cout << "grid done in "
            << detail::fmt(
                   "%.1f",
                   std::chrono::duration<double>(
                       std::chrono::steady_clock::now() - t0)
                       .count())
            << "s\n"
            << std::flush;

  criterion(5, "finetune forgets round-0 classes by >= 20 points (3 seeds)",
            check_forgetting_phenomenon);
  criterion(6, "rehearsal beats finetune by >= 5 avg points (median)",
            check_strategy_ordering);
  criterion(7, "g2b direction: avg within 1 point, forgetting not higher",
            check_g2b_direction);
  criterion(8, "side-block ablation: strictly increasing params, report emitted",
            check_ablation);
  criterion(9, "determinism and kill-resume reproduce exact metrics",
            check_determinism_resume);

  int failed = 0;
  for (const auto& c : g_results)
    if (!c.pass) ++failed;
  std::cout << (failed == 0 ? "ALL CRITERIA PASSED" : cat(failed, " CRITERIA FAILED"))
            << "\n";
  return failed;
}
