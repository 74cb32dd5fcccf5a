#pragma once

#include <json.hpp>

#include "g2b/cil.hpp"

namespace g2b {

// Fully resolved experiment description. Serializes losslessly to JSON; the
// canonical dump (nlohmann orders keys) also feeds the config hash that ties
// checkpoints and run records to the config that produced them.
struct ExperimentConfig {
  // dataset
  std::string dataset = "synthetic";
  std::string dataset_root;
  int classes = 10;
  int train_per_class = 100;
  int test_per_class = 30;
  uint64_t dataset_seed = 7;
  // model
  std::string backbone = "cnn";  // cnn | vit
  bool g2b = false;
  std::vector<bool> side_blocks;  // empty = all blocks when g2b is on
  // protocol
  std::string strategy = "finetune";  // finetune | rehearsal | weight_aligning
  int classes_per_round = 2;
  int64_t memory_budget = 200;
  uint64_t stream_seed = 1;
  uint64_t init_seed = 1;
  // optimizer
  double lr = 0.05;
  double momentum = 0.9;
  int epochs = 6;
  int batch_size = 32;
  bool cosine = true;
  double kd_temperature = 2.0;
  // io
  std::string output_dir = "runs/out";

  bool operator==(const ExperimentConfig&) const = default;

  StrategyKind strategy_kind() const {
    if (strategy == "finetune") return StrategyKind::Finetune;
    if (strategy == "rehearsal") return StrategyKind::Rehearsal;
    if (strategy == "weight_aligning") return StrategyKind::WeightAligning;
    throw ConfigError(cat("unknown strategy '", strategy,
                          "' (finetune, rehearsal, weight_aligning)"));
  }

  BackboneKind backbone_kind() const {
    if (backbone == "cnn") return BackboneKind::Cnn;
    if (backbone == "vit") return BackboneKind::Vit;
    throw ConfigError(cat("unknown backbone '", backbone, "' (cnn, vit)"));
  }

  int n_rounds() const {
    if (classes_per_round < 1 || classes % classes_per_round != 0)
      throw ConfigError(cat("classes_per_round=", classes_per_round,
                            " does not divide ", classes, " classes"));
    return classes / classes_per_round;
  }

  void validate() const {
    (void)strategy_kind();
    (void)backbone_kind();
    (void)n_rounds();
    if (dataset != "synthetic" && dataset != "bin32")
      throw ConfigError(cat("unknown dataset '", dataset, "'"));
    if (memory_budget < 0) throw ConfigError("memory_budget must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (lr <= 0) throw ConfigError("lr must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (train_per_class < 1 || test_per_class < 1)
      throw ConfigError("per-class sample counts must be >= 1");
    if (!side_blocks.empty()) {
      const size_t nb = backbone_kind() == BackboneKind::Cnn ? 4 : 5;
      if (side_blocks.size() != nb)
        throw ConfigError(cat("side_blocks must have ", nb, " entries for ",
                              backbone, ", got ", side_blocks.size()));
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["dataset"] = {{"name", dataset},
                    {"root", dataset_root},
                    {"classes", classes},
                    {"train_per_class", train_per_class},
                    {"test_per_class", test_per_class},
                    {"seed", dataset_seed}};
    j["model"] = {{"backbone", backbone},
                  {"g2b", g2b},
                  {"side_blocks", side_blocks}};
    j["protocol"] = {{"strategy", strategy},
                     {"classes_per_round", classes_per_round},
                     {"memory_budget", memory_budget},
                     {"stream_seed", stream_seed},
                     {"init_seed", init_seed}};
    j["optim"] = {{"lr", lr},          {"momentum", momentum},
                  {"epochs", epochs},  {"batch_size", batch_size},
                  {"cosine", cosine},  {"kd_temperature", kd_temperature}};
    j["output_dir"] = output_dir;
    return j;
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
      const auto& d = j.at("dataset");
      c.dataset = d.at("name").get<std::string>();
      c.dataset_root = d.at("root").get<std::string>();
      c.classes = d.at("classes").get<int>();
      c.train_per_class = d.at("train_per_class").get<int>();
      c.test_per_class = d.at("test_per_class").get<int>();
      c.dataset_seed = d.at("seed").get<uint64_t>();
      const auto& m = j.at("model");
      c.backbone = m.at("backbone").get<std::string>();
      c.g2b = m.at("g2b").get<bool>();
      c.side_blocks = m.at("side_blocks").get<std::vector<bool>>();
      const auto& p = j.at("protocol");
      c.strategy = p.at("strategy").get<std::string>();
      c.classes_per_round = p.at("classes_per_round").get<int>();
      c.memory_budget = p.at("memory_budget").get<int64_t>();
      c.stream_seed = p.at("stream_seed").get<uint64_t>();
      c.init_seed = p.at("init_seed").get<uint64_t>();
      const auto& o = j.at("optim");
      c.lr = o.at("lr").get<double>();
      c.momentum = o.at("momentum").get<double>();
      c.epochs = o.at("epochs").get<int>();
      c.batch_size = o.at("batch_size").get<int>();
      c.cosine = o.at("cosine").get<bool>();
      c.kd_temperature = o.at("kd_temperature").get<double>();
      c.output_dir = j.at("output_dir").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(cat("config parse error: ", e.what()));
    }
    return c;
  }

  std::string canonical() const { return to_json().dump(); }
  uint64_t hash() const { return fnv1a64(canonical()); }

  Dataset load() const {
    DatasetOptions opts;
    opts.classes = classes;
    opts.train_per_class = train_per_class;
    opts.test_per_class = test_per_class;
    opts.seed = dataset_seed;
    return load_dataset(dataset, dataset_root, opts);
  }

  StrategySpec strategy_spec() const {
    StrategySpec s;
    s.kind = strategy_kind();
    s.lr = lr;
    s.momentum = momentum;
    s.epochs = epochs;
    s.batch_size = batch_size;
    s.cosine = cosine;
    s.kd_temperature = kd_temperature;
    s.g2b_enabled = g2b;
    s.enabled_side_blocks = std::vector<bool>(side_blocks.begin(), side_blocks.end());
    return s;
  }
};

// Seed derivation salts: one RNG stream per concern, so e.g. the main branch
// init is identical with and without the side branch.
namespace seeds {
constexpr uint64_t kMainInit = 0xB0B0;
constexpr uint64_t kSideInit = 0x51DE;
constexpr uint64_t kHeadExpand = 0xEAD5;
}  // namespace seeds

// Builds the model for a config: vanilla backbone, optionally wrapped with a
// side branch. The classifier head starts at round 0's width and grows.
inline G2bModel<float> build_model(const ExperimentConfig& cfg) {
  cfg.validate();
  BackboneSpec spec = cfg.backbone_kind() == BackboneKind::Cnn
                          ? BackboneSpec::small_cnn(cfg.classes_per_round)
                          : BackboneSpec::small_vit(cfg.classes_per_round);
  std::mt19937 rng(static_cast<uint32_t>(mix_seed(cfg.init_seed, seeds::kMainInit)));
  Backbone<float> bb(spec, rng);
  std::vector<bool> enabled(spec.n_blocks(), false);
  if (cfg.g2b) {
    if (cfg.side_blocks.empty())
      enabled.assign(spec.n_blocks(), true);
    else
      enabled = std::vector<bool>(cfg.side_blocks.begin(), cfg.side_blocks.end());
  }
  std::mt19937 srng(static_cast<uint32_t>(mix_seed(cfg.init_seed, seeds::kSideInit)));
  return wrap_g2b(std::move(bb), enabled, srng);
}

}  // namespace g2b
