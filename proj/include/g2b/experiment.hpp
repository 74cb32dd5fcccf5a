#pragma once

#include <chrono>
#include <iomanip>

#include "g2b/config.hpp"
#include "g2b/serialize.hpp"

namespace g2b {

struct RoundRecord {
  double wall_seconds = 0;
  uint64_t data_order_hash = 0;
  int64_t memory_used = 0;
  Fraction overall;
  std::vector<Fraction> per_task;
  std::vector<double> sparsity_mean;  // per enabled side block
  std::vector<double> sparsity_std;
};

struct RunRecord {
  static constexpr int kFormatVersion = 1;

  ExperimentConfig config;
  uint64_t config_hash = 0;
  double params_millions = 0;
  std::vector<RoundRecord> rounds;
  bool complete = false;

  AccuracyMatrix matrix() const {
    AccuracyMatrix m;
    for (const auto& r : rounds) m.append_row(r.per_task, r.overall);
    return m;
  }

  double avg() const { return avg_accuracy(matrix()); }
  double last() const { return last_accuracy(matrix()); }
  // Forgetting over the whole stream (F_K); requires >= 2 rounds.
  double forgetting() const {
    return forgetting_measure(matrix(), static_cast<int>(rounds.size()));
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format_version"] = kFormatVersion;
    j["config"] = config.to_json();
    j["config_hash"] = cat(std::hex, config_hash);
    j["params_millions"] = params_millions;
    j["complete"] = complete;
    auto frac_json = [](const Fraction& f) {
      return nlohmann::json{f.correct, f.total};
    };
    j["rounds"] = nlohmann::json::array();
    for (const auto& r : rounds) {
      nlohmann::json jr;
      jr["wall_seconds"] = r.wall_seconds;
      jr["data_order_hash"] = cat(std::hex, r.data_order_hash);
      jr["memory_used"] = r.memory_used;
      jr["overall"] = frac_json(r.overall);
      jr["per_task"] = nlohmann::json::array();
      for (const auto& f : r.per_task) jr["per_task"].push_back(frac_json(f));
      jr["sparsity_mean"] = r.sparsity_mean;
      jr["sparsity_std"] = r.sparsity_std;
      j["rounds"].push_back(std::move(jr));
    }
    if (!rounds.empty()) {
      nlohmann::json metrics;
      metrics["avg"] = avg();
      metrics["last"] = last();
      if (rounds.size() >= 2)
        metrics["forgetting"] = forgetting();
      else
        metrics["forgetting"] = nullptr;
      j["metrics"] = std::move(metrics);
    }
    return j;
  }

  static RunRecord from_json(const nlohmann::json& j) {
    RunRecord r;
    try {
      r.config = ExperimentConfig::from_json(j.at("config"));
      r.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
      r.params_millions = j.at("params_millions").get<double>();
      r.complete = j.at("complete").get<bool>();
      for (const auto& jr : j.at("rounds")) {
        RoundRecord rr;
        rr.wall_seconds = jr.at("wall_seconds").get<double>();
        rr.data_order_hash =
            std::stoull(jr.at("data_order_hash").get<std::string>(), nullptr, 16);
        rr.memory_used = jr.at("memory_used").get<int64_t>();
        rr.overall = {jr.at("overall")[0].get<int64_t>(),
                      jr.at("overall")[1].get<int64_t>()};
        for (const auto& f : jr.at("per_task"))
          rr.per_task.push_back({f[0].get<int64_t>(), f[1].get<int64_t>()});
        rr.sparsity_mean = jr.at("sparsity_mean").get<std::vector<double>>();
        rr.sparsity_std = jr.at("sparsity_std").get<std::vector<double>>();
        r.rounds.push_back(std::move(rr));
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError(cat("run record parse error: ", e.what()));
    }
    return r;
  }
};

inline RunRecord load_run_record(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(cat("cannot open run record: ", path));
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError(cat("cannot parse ", path, ": ", e.what()));
  }
  return RunRecord::from_json(j);
}

struct RunOptions {
  bool fresh = false;         // ignore an existing checkpoint
  int stop_after_round = -1;  // testing hook: stop after this round completes
  bool quiet = false;
  int eval_workers = 2;
};

namespace detail {

inline std::string checkpoint_path(const ExperimentConfig& cfg) {
  return (std::filesystem::path(cfg.output_dir) / "checkpoint.bin").string();
}
inline std::string record_path(const ExperimentConfig& cfg) {
  return (std::filesystem::path(cfg.output_dir) / "run_record.json").string();
}

inline void persist_predictions(const ExperimentConfig& cfg, int round,
                                const std::vector<PredictionRecord>& preds) {
  std::ostringstream os;
  os << "test_index,true_round,true_label,predicted\n";
  for (const auto& p : preds)
    os << p.test_index << ',' << p.true_round << ',' << p.true_label << ','
       << p.predicted << '\n';
  const auto path = std::filesystem::path(cfg.output_dir) /
                    cat("predictions_round_", round, ".csv");
  atomic_write_text(path.string(), os.str());
}

inline nlohmann::json record_progress_json(const RunRecord& rec) {
  return rec.to_json();
}

}  // namespace detail

// Runs the class-incremental protocol end to end: per round, expand the
// head, train, refresh the exemplar memory, evaluate all classes seen so
// far, and persist (checkpoint + record + prediction log) atomically. An
// interrupted run resumes from the last completed round; a checkpoint from a
// different config is a ResumeMismatch.
inline RunRecord run_experiment(const ExperimentConfig& cfg,
                                const RunOptions& opts = {}) {
  cfg.validate();
  std::filesystem::create_directories(cfg.output_dir);
  atomic_write_text(
      (std::filesystem::path(cfg.output_dir) / "config.json").string(),
      cfg.to_json().dump(2) + "\n");

  Dataset ds = cfg.load();
  if (ds.n_classes != cfg.classes)
    throw ConfigError(cat("dataset has ", ds.n_classes, " classes, config says ",
                          cfg.classes));
  TaskStream stream = build_task_stream(ds, cfg.classes_per_round, cfg.stream_seed);
  const int n_rounds = stream.n_rounds();

  G2bModel<float> model = build_model(cfg);
  ExemplarMemory memory(cfg.memory_budget);
  RunRecord rec;
  rec.config = cfg;
  rec.config_hash = cfg.hash();

  int start_round = 0;
  const std::string ck_path = detail::checkpoint_path(cfg);
  if (opts.fresh) {
    std::error_code ec;
    std::filesystem::remove(ck_path, ec);
  } else if (std::filesystem::exists(ck_path)) {
    Checkpoint ck = load_checkpoint(ck_path);
    if (ck.config_hash != cfg.hash())
      throw ResumeMismatch(cat("checkpoint in ", cfg.output_dir,
                               " belongs to a different config"));
    restore_model(model, ck);
    memory = restore_memory(ck);
    rec = RunRecord::from_json(nlohmann::json::parse(ck.record_json));
    start_round = ck.rounds_completed;
    if (!opts.quiet)
      std::cout << "[g2b] resuming after round " << start_round << "\n";
  }

  const StrategySpec strategy = cfg.strategy_spec();
  for (int r = start_round; r < n_rounds; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    if (r > 0 && model.n_classes() == r * cfg.classes_per_round) {
      std::mt19937 rng(static_cast<uint32_t>(
          mix_seed(cfg.init_seed, seeds::kHeadExpand, r)));
      expand_head(model.backbone, cfg.classes_per_round, rng);
    }
    if (model.n_classes() != (r + 1) * cfg.classes_per_round)
      throw ResumeMismatch(cat("head width ", model.n_classes(),
                               " inconsistent with round ", r));

    std::vector<TrainItem> items;
    for (int idx : stream.rounds[r].train_indices)
      items.push_back({ds.train_image(idx),
                       stream.label_of(ds.train_labels[idx])});

    const int n_old = r * cfg.classes_per_round;
    auto info = run_round(model, strategy, items, memory,
                          [&](int c) { return stream.label_of(c); }, n_old, r,
                          cfg.stream_seed, ds.channels, ds.side);

    if (cfg.memory_budget > 0)
      update_memory(memory, ds, stream.rounds[r], model);

    auto row = evaluate(model, stream, ds, r, /*batch_size=*/64,
                        /*collect_sparsity=*/model.has_side(),
                        opts.eval_workers);
    detail::persist_predictions(cfg, r, row.predictions);

    RoundRecord rr;
    rr.data_order_hash = info.data_order_hash;
    rr.memory_used = memory.size();
    rr.overall = row.overall;
    rr.per_task = row.per_task;
    auto summary = sparsity_report(row.block_sparsity);
    rr.sparsity_mean = summary.mean;
    rr.sparsity_std = summary.stddev;
    rr.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    rec.rounds.push_back(std::move(rr));

    Checkpoint ck;
    ck.config_hash = cfg.hash();
    ck.rounds_completed = r + 1;
    capture_model(model, ck);
    capture_memory(memory, ck);
    ck.record_json = detail::record_progress_json(rec).dump();
    save_checkpoint(ck_path, ck);
    atomic_write_text(detail::record_path(cfg), rec.to_json().dump(2) + "\n");

    if (!opts.quiet)
      std::cout << "[g2b] round " << (r + 1) << "/" << n_rounds
                << " overall=" << std::fixed << std::setprecision(4)
                << rec.rounds.back().overall.value()
                << " mem=" << rec.rounds.back().memory_used << " ("
                << std::setprecision(1) << rec.rounds.back().wall_seconds
                << "s)\n";

    if (opts.stop_after_round == r) return rec;  // simulated interruption
  }

  rec.params_millions = model.param_count();
  rec.complete = true;
  atomic_write_text(detail::record_path(cfg), rec.to_json().dump(2) + "\n");
  return rec;
}

}  // namespace g2b
