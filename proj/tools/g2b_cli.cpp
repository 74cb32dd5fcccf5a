// Command-line harness: run one experiment, sweep a grid, aggregate reports,
// or run the side-block ablation. Exit codes: 0 success, 1 config error,
// 2 runtime failure, 3 resume mismatch.

#include <CLI11.hpp>

#include <atomic>
#include <mutex>
#include <thread>

#include "g2b/report.hpp"

namespace {

using namespace g2b;

struct ConfigFlags {
  ExperimentConfig values;
  std::vector<std::function<void(ExperimentConfig&)>> apply_if_set;

  // Registers one override option; applies to the merged config only when
  // the user actually passed the flag.
  template <class T>
  void add(CLI::App* app, const std::string& flag, T ExperimentConfig::* field,
           const std::string& help) {
    CLI::Option* opt;
    if constexpr (std::is_same_v<T, bool>)
      opt = app->add_flag(flag + ",!--no-" + flag.substr(2), values.*field, help);
    else
      opt = app->add_option(flag, values.*field, help);
    apply_if_set.push_back([opt, field, this](ExperimentConfig& cfg) {
      if (opt->count() > 0) cfg.*field = values.*field;
    });
  }

  void add_all(CLI::App* app) {
    add(app, "--dataset", &ExperimentConfig::dataset,
        "dataset name (synthetic, bin32)");
    add(app, "--dataset-root", &ExperimentConfig::dataset_root,
        "root directory for on-disk datasets");
    add(app, "--classes", &ExperimentConfig::classes, "number of classes");
    add(app, "--train-per-class", &ExperimentConfig::train_per_class,
        "training samples per class (synthetic)");
    add(app, "--test-per-class", &ExperimentConfig::test_per_class,
        "test samples per class (synthetic)");
    add(app, "--dataset-seed", &ExperimentConfig::dataset_seed,
        "synthetic generator seed");
    add(app, "--backbone", &ExperimentConfig::backbone, "cnn or vit");
    add(app, "--strategy", &ExperimentConfig::strategy,
        "finetune, rehearsal or weight_aligning");
    add(app, "--classes-per-round", &ExperimentConfig::classes_per_round,
        "new classes per round");
    add(app, "--memory-budget", &ExperimentConfig::memory_budget,
        "total exemplar memory size");
    add(app, "--stream-seed", &ExperimentConfig::stream_seed,
        "class order / shuffling seed");
    add(app, "--init-seed", &ExperimentConfig::init_seed,
        "parameter init seed");
    add(app, "--lr", &ExperimentConfig::lr, "base learning rate");
    add(app, "--momentum", &ExperimentConfig::momentum, "SGD momentum");
    add(app, "--epochs", &ExperimentConfig::epochs, "epochs per round");
    add(app, "--batch-size", &ExperimentConfig::batch_size, "batch size");
    add(app, "--cosine", &ExperimentConfig::cosine,
        "cosine learning-rate decay within each round");
    add(app, "--kd-temperature", &ExperimentConfig::kd_temperature,
        "distillation temperature");
    add(app, "--g2b", &ExperimentConfig::g2b, "wrap the backbone with the side branch");
    add(app, "--out", &ExperimentConfig::output_dir, "output directory");
    // side blocks get custom parsing: "1,0,1,1" or "all"
    auto* opt = app->add_option("--side-blocks", side_blocks_raw,
                                "comma-separated 0/1 per block, or 'all'");
    apply_if_set.push_back([opt, this](ExperimentConfig& cfg) {
      if (opt->count() == 0) return;
      cfg.side_blocks.clear();
      if (side_blocks_raw == "all") return;
      for (char c : side_blocks_raw) {
        if (c == '1')
          cfg.side_blocks.push_back(true);
        else if (c == '0')
          cfg.side_blocks.push_back(false);
        else if (c != ',')
          throw ConfigError(cat("--side-blocks: bad character '", c, "'"));
      }
    });
  }

  std::string side_blocks_raw;

  ExperimentConfig merge(const std::string& config_path) const {
    ExperimentConfig cfg;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError(cat("cannot open config file ", config_path));
      nlohmann::json j;
      try {
        in >> j;
      } catch (const std::exception& e) {
        throw ConfigError(cat("cannot parse ", config_path, ": ", e.what()));
      }
      cfg = ExperimentConfig::from_json(j);
    }
    for (const auto& apply : apply_if_set) apply(cfg);
    cfg.validate();
    return cfg;
  }
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

int run_many(std::vector<ExperimentConfig> configs, int jobs, bool fresh) {
  std::atomic<size_t> next{0};
  std::mutex io_mutex;
  std::atomic<bool> failed{false};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= configs.size() || failed) return;
      try {
        RunOptions opts;
        opts.fresh = fresh;
        opts.quiet = jobs > 1;
        auto rec = run_experiment(configs[i], opts);
        std::lock_guard<std::mutex> lock(io_mutex);
        std::cout << "[g2b] done " << configs[i].output_dir << " avg="
                  << detail::pct2(rec.avg()) << " last="
                  << detail::pct2(rec.last()) << "\n";
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(io_mutex);
        std::cerr << "[g2b] failed " << configs[i].output_dir << ": "
                  << e.what() << "\n";
        failed = true;
        return;
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(configs.size())));
  std::vector<std::thread> pool;
  for (int t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return failed ? 2 : 0;
}

std::vector<RunRecord> scan_records(const std::vector<std::string>& dirs,
                                    bool include_partial) {
  std::vector<RunRecord> records;
  std::vector<std::string> paths;
  for (const auto& dir : dirs) {
    if (!std::filesystem::exists(dir))
      throw ConfigError(cat("no such directory: ", dir));
    for (const auto& entry :
         std::filesystem::recursive_directory_iterator(dir))
      if (entry.is_regular_file() &&
          entry.path().filename() == "run_record.json")
        paths.push_back(entry.path().string());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    auto rec = load_run_record(p);
    if (rec.complete || include_partial) records.push_back(std::move(rec));
  }
  if (records.empty())
    throw ConfigError("no run records found (is the run complete?)");
  return records;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-branch continual-learning benchmark harness"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "run one experiment");
  std::string run_config;
  bool run_fresh = false;
  int stop_after = -1;
  run->add_option("-c,--config", run_config, "JSON config file");
  run->add_flag("--fresh", run_fresh, "ignore an existing checkpoint");
  run->add_option("--stop-after-round", stop_after,
                  "stop after this round completes (testing)");
  ConfigFlags run_flags;
  run_flags.add_all(run);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "grid over strategy x g2b x seeds");
  std::string sweep_config, sweep_strategies = "finetune,rehearsal,weight_aligning";
  std::string sweep_g2b = "both", sweep_seeds = "1,2,3";
  int sweep_jobs = 1;
  bool sweep_fresh = false;
  sweep->add_option("-c,--config", sweep_config, "JSON base config file");
  sweep->add_option("--strategies", sweep_strategies, "comma-separated strategies");
  sweep->add_option("--g2b-mode", sweep_g2b, "both, on or off");
  sweep->add_option("--seeds", sweep_seeds, "comma-separated seeds (stream=init)");
  sweep->add_option("--jobs", sweep_jobs, "parallel runs");
  sweep->add_flag("--fresh", sweep_fresh, "ignore existing checkpoints");
  ConfigFlags sweep_flags;
  sweep_flags.add_all(sweep);

  // report
  auto* report = app.add_subcommand("report", "aggregate run records");
  std::vector<std::string> report_dirs;
  std::string report_out;
  bool include_partial = false;
  report->add_option("--runs", report_dirs, "directories to scan")->required();
  report->add_option("--out", report_out, "report output directory");
  report->add_flag("--include-partial", include_partial,
                   "include interrupted runs");

  // ablate-blocks
  auto* ablate = app.add_subcommand(
      "ablate-blocks", "side-block ablation sweep (prefixes 0..n)");
  std::string ablate_config;
  int ablate_jobs = 1;
  bool ablate_fresh = false;
  ablate->add_option("-c,--config", ablate_config, "JSON base config file");
  ablate->add_option("--jobs", ablate_jobs, "parallel runs");
  ablate->add_flag("--fresh", ablate_fresh, "ignore existing checkpoints");
  ConfigFlags ablate_flags;
  ablate_flags.add_all(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (run->parsed()) {
      auto cfg = run_flags.merge(run_config);
      RunOptions opts;
      opts.fresh = run_fresh;
      opts.stop_after_round = stop_after;
      auto rec = run_experiment(cfg, opts);
      if (rec.complete)
        std::cout << "avg=" << g2b::detail::pct2(rec.avg())
                  << " last=" << g2b::detail::pct2(rec.last())
                  << (rec.rounds.size() >= 2
                          ? cat(" f=", g2b::detail::f4(rec.forgetting()))
                          : std::string())
                  << " params_m=" << rec.params_millions << "\n";
      return 0;
    }

    if (sweep->parsed()) {
      auto base = sweep_flags.merge(sweep_config);
      std::vector<ExperimentConfig> grid;
      std::vector<bool> g2b_values;
      if (sweep_g2b == "both")
        g2b_values = {false, true};
      else if (sweep_g2b == "on")
        g2b_values = {true};
      else if (sweep_g2b == "off")
        g2b_values = {false};
      else
        throw ConfigError(cat("--g2b-mode must be both/on/off, got ", sweep_g2b));
      for (const auto& strat : split_csv(sweep_strategies))
        for (bool g : g2b_values)
          for (const auto& seed : split_csv(sweep_seeds)) {
            ExperimentConfig c = base;
            c.strategy = strat;
            c.g2b = g;
            c.stream_seed = std::stoull(seed);
            c.init_seed = std::stoull(seed);
            c.output_dir =
                (std::filesystem::path(base.output_dir) /
                 cat(strat, g ? "_g2b" : "", "_s", seed))
                    .string();
            c.validate();
            grid.push_back(std::move(c));
          }
      std::cout << "[g2b] sweep: " << grid.size() << " runs\n";
      return run_many(std::move(grid), sweep_jobs, sweep_fresh);
    }

    if (report->parsed()) {
      auto records = scan_records(report_dirs, include_partial);
      if (report_out.empty())
        report_out =
            (std::filesystem::path(report_dirs.front()) / "report").string();
      auto files = emit_report(records, report_out);
      for (const auto& f : files.written) std::cout << f << "\n";
      return 0;
    }

    if (ablate->parsed()) {
      auto base = ablate_flags.merge(ablate_config);
      const int n_blocks = base.backbone_kind() == BackboneKind::Cnn ? 4 : 5;
      std::vector<ExperimentConfig> grid;
      for (int j = 0; j <= n_blocks; ++j) {
        ExperimentConfig c = base;
        c.g2b = j > 0;
        c.side_blocks.assign(n_blocks, false);
        for (int i = 0; i < j; ++i) c.side_blocks[i] = true;
        if (!c.g2b) c.side_blocks.clear();
        c.output_dir = (std::filesystem::path(base.output_dir) /
                        cat("ablate_", j, "_blocks"))
                           .string();
        c.validate();
        grid.push_back(std::move(c));
      }
      std::cout << "[g2b] ablation: " << grid.size() << " runs\n";
      if (int rc = run_many(grid, ablate_jobs, ablate_fresh); rc != 0) return rc;
      std::vector<RunRecord> records;
      for (const auto& c : grid)
        records.push_back(load_run_record(
            (std::filesystem::path(c.output_dir) / "run_record.json").string()));
      const auto table_path =
          (std::filesystem::path(base.output_dir) / "ablation.csv").string();
      atomic_write_text(table_path, ablation_table(records));
      std::cout << table_path << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ResumeMismatch& e) {
    std::cerr << "resume mismatch: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
