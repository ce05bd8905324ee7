#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtrak/digest.hpp"
#include "dtrak/io.hpp"
#include "dtrak/kernel.hpp"
#include "dtrak/training.hpp"

namespace dtrak {

struct DataConfig {
  /// "gaussian-mixture" or "tiny-images".
  std::string kind = "gaussian-mixture";
  int n_train = 64;
  int n_validation = 16;
  /// Ignored for tiny-images, whose dimension is side * side.
  int dim = 8;
  int image_side = 4;
  double separation = 2.0;
  double noise_std = 0.5;
};

struct ScheduleConfig {
  int T = 1000;
  double beta1 = 1e-4;
  double betaT = 0.02;
};

struct GenerationConfig {
  int count = 16;
  int ddim_steps = 50;
};

struct FeatureConfig {
  Eigen::Index k = 256;
  int timesteps = 10;
  TimestepStrategy strategy = TimestepStrategy::kUniform;
  int noises_per_timestep = 1;
  io::DType dtype = io::DType::kF32;
};

struct BenchmarkConfig {
  int subsets = 32;
  double fraction = 0.5;
  int seeds = 3;
  int output_timesteps = 100;
  int output_noises = 3;
  /// The benchmark's model output is output_sign * L_Simple.
  double output_sign = -1.0;
};

struct RetrainBankConfig {
  int subsets = 64;
  double fraction = 0.5;
  double datamodel_ridge = 1e-3;
};

struct CounterfactualConfig {
  int K = 16;
  int gen_seeds = 16;
  int embed_dim = 64;
};

/// Everything needed to reproduce an experiment end to end.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out = "runs/default";
  DataConfig data;
  ScheduleConfig schedule;
  DenoiserArch arch;
  TrainConfig train;
  std::vector<int> checkpoint_epochs;
  GenerationConfig generation;
  FeatureConfig features;
  std::vector<double> lambdas = lambda_grid();
  KernelSolver solver = KernelSolver::kCholesky;
  BenchmarkConfig benchmark;
  RetrainBankConfig retrain_bank;
  int bootstrap_resamples = 200;
  int journey_resamples = 1;
  std::vector<std::string> methods = {"trak", "d-trak"};
  CounterfactualConfig counterfactual;

  // Sub-seeds, all derived from `seed`.
  std::uint64_t data_seed() const { return derive_key(seed, Purpose::kData, {1}); }
  std::uint64_t train_seed() const { return derive_key(seed, Purpose::kModelSeed, {1}); }
  std::uint64_t subset_seed() const { return derive_key(seed, Purpose::kSubset, {1}); }
  std::uint64_t retrain_subset_seed() const { return derive_key(seed, Purpose::kSubset, {2}); }
  std::uint64_t projector_seed() const { return derive_key(seed, Purpose::kProjection, {1}); }
  std::uint64_t feature_noise_seed() const { return derive_key(seed, Purpose::kLossNoise, {1}); }
  std::uint64_t benchmark_noise_seed() const { return derive_key(seed, Purpose::kLossNoise, {2}); }
  std::uint64_t bootstrap_seed() const { return derive_key(seed, Purpose::kBootstrap, {1}); }
  std::uint64_t removal_seed() const { return derive_key(seed, Purpose::kRemoval, {1}); }
  std::uint64_t embedder_seed() const { return derive_key(seed, Purpose::kEmbedder, {1}); }
  std::uint64_t generation_seed(int i) const {
    return derive_key(seed, Purpose::kSampling, {static_cast<std::uint64_t>(i)});
  }

  int data_dim() const {
    return data.kind == "tiny-images" ? data.image_side * data.image_side : data.dim;
  }

  VarianceSchedule make_schedule() const {
    return build_linear_schedule(schedule.T, schedule.beta1, schedule.betaT);
  }

  DenoiserArch make_arch() const {
    DenoiserArch a = arch;
    a.input_dim = data_dim();
    a.timesteps = schedule.T;
    return a;
  }

  TrainConfig make_train_config() const {
    TrainConfig c = train;
    c.seed = train_seed();
    return c;
  }

  TimestepPlan feature_plan() const { return {features.timesteps, features.strategy}; }

  LossSpec output_spec() const {
    return LossSpec::simple({benchmark.output_timesteps, TimestepStrategy::kUniform},
                            benchmark.output_noises);
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  return {
      {"seed", c.seed},
      {"out", c.out},
      {"data",
       {{"kind", c.data.kind},
        {"n_train", c.data.n_train},
        {"n_validation", c.data.n_validation},
        {"dim", c.data.dim},
        {"image_side", c.data.image_side},
        {"separation", c.data.separation},
        {"noise_std", c.data.noise_std}}},
      {"schedule", {{"T", c.schedule.T}, {"beta1", c.schedule.beta1}, {"betaT", c.schedule.betaT}}},
      {"arch",
       {{"time_embed_dim", c.arch.time_embed_dim},
        {"hidden_dims", c.arch.hidden_dims},
        {"activation", activation_name(c.arch.activation)}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"lr_init", c.train.lr_init},
        {"warmup_fraction", c.train.warmup_fraction},
        {"weight_decay", c.train.weight_decay},
        {"adam_beta1", c.train.adam_beta1},
        {"adam_beta2", c.train.adam_beta2},
        {"adam_eps", c.train.adam_eps},
        {"checkpoint_epochs", c.checkpoint_epochs}}},
      {"generation", {{"count", c.generation.count}, {"ddim_steps", c.generation.ddim_steps}}},
      {"features",
       {{"k", c.features.k},
        {"timesteps", c.features.timesteps},
        {"strategy", strategy_name(c.features.strategy)},
        {"noises_per_timestep", c.features.noises_per_timestep},
        {"dtype", c.features.dtype == io::DType::kF32 ? "f32" : "f64"}}},
      {"kernel", {{"lambdas", c.lambdas}, {"solver", solver_name(c.solver)}}},
      {"benchmark",
       {{"subsets", c.benchmark.subsets},
        {"fraction", c.benchmark.fraction},
        {"seeds", c.benchmark.seeds},
        {"output_timesteps", c.benchmark.output_timesteps},
        {"output_noises", c.benchmark.output_noises},
        {"output_sign", c.benchmark.output_sign}}},
      {"retrain_bank",
       {{"subsets", c.retrain_bank.subsets},
        {"fraction", c.retrain_bank.fraction},
        {"datamodel_ridge", c.retrain_bank.datamodel_ridge}}},
      {"bootstrap_resamples", c.bootstrap_resamples},
      {"journey_resamples", c.journey_resamples},
      {"methods", c.methods},
      {"counterfactual",
       {{"K", c.counterfactual.K},
        {"gen_seeds", c.counterfactual.gen_seeds},
        {"embed_dim", c.counterfactual.embed_dim}}},
  };
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  auto known = [](const nlohmann::json& obj, std::initializer_list<const char*> keys, const char* where) {
    for (const auto& [k, _] : obj.items()) {
      bool ok = false;
      for (const char* key : keys) ok = ok || k == key;
      if (!ok) throw ParameterError(std::string("unknown config key '") + k + "' in " + where);
    }
  };
  known(j, {"seed", "out", "data", "schedule", "arch", "train", "generation", "features", "kernel",
            "benchmark", "retrain_bank", "bootstrap_resamples", "journey_resamples", "methods",
            "counterfactual"},
        "top level");
  c.seed = j.value("seed", c.seed);
  c.out = j.value("out", c.out);
  if (j.contains("data")) {
    const auto& d = j["data"];
    known(d, {"kind", "n_train", "n_validation", "dim", "image_side", "separation", "noise_std"}, "data");
    c.data.kind = d.value("kind", c.data.kind);
    if (c.data.kind != "gaussian-mixture" && c.data.kind != "tiny-images") {
      throw ParameterError("data.kind must be gaussian-mixture or tiny-images");
    }
    c.data.n_train = d.value("n_train", c.data.n_train);
    c.data.n_validation = d.value("n_validation", c.data.n_validation);
    c.data.dim = d.value("dim", c.data.dim);
    c.data.image_side = d.value("image_side", c.data.image_side);
    c.data.separation = d.value("separation", c.data.separation);
    c.data.noise_std = d.value("noise_std", c.data.noise_std);
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    known(s, {"T", "beta1", "betaT"}, "schedule");
    c.schedule.T = s.value("T", c.schedule.T);
    c.schedule.beta1 = s.value("beta1", c.schedule.beta1);
    c.schedule.betaT = s.value("betaT", c.schedule.betaT);
  }
  if (j.contains("arch")) {
    const auto& a = j["arch"];
    known(a, {"time_embed_dim", "hidden_dims", "activation"}, "arch");
    c.arch.time_embed_dim = a.value("time_embed_dim", c.arch.time_embed_dim);
    if (a.contains("hidden_dims")) c.arch.hidden_dims = a["hidden_dims"].get<std::vector<int>>();
    if (a.contains("activation")) c.arch.activation = parse_activation(a["activation"].get<std::string>());
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    known(t, {"epochs", "batch_size", "lr_init", "warmup_fraction", "weight_decay", "adam_beta1",
              "adam_beta2", "adam_eps", "checkpoint_epochs"},
          "train");
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.lr_init = t.value("lr_init", c.train.lr_init);
    c.train.warmup_fraction = t.value("warmup_fraction", c.train.warmup_fraction);
    c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
    c.train.adam_beta1 = t.value("adam_beta1", c.train.adam_beta1);
    c.train.adam_beta2 = t.value("adam_beta2", c.train.adam_beta2);
    c.train.adam_eps = t.value("adam_eps", c.train.adam_eps);
    if (t.contains("checkpoint_epochs")) c.checkpoint_epochs = t["checkpoint_epochs"].get<std::vector<int>>();
  }
  if (j.contains("generation")) {
    const auto& g = j["generation"];
    known(g, {"count", "ddim_steps"}, "generation");
    c.generation.count = g.value("count", c.generation.count);
    c.generation.ddim_steps = g.value("ddim_steps", c.generation.ddim_steps);
  }
  if (j.contains("features")) {
    const auto& f = j["features"];
    known(f, {"k", "timesteps", "strategy", "noises_per_timestep", "dtype"}, "features");
    c.features.k = f.value("k", c.features.k);
    c.features.timesteps = f.value("timesteps", c.features.timesteps);
    if (f.contains("strategy")) c.features.strategy = parse_strategy(f["strategy"].get<std::string>());
    c.features.noises_per_timestep = f.value("noises_per_timestep", c.features.noises_per_timestep);
    if (f.contains("dtype")) c.features.dtype = io::parse_dtype(f["dtype"].get<std::string>());
  }
  if (j.contains("kernel")) {
    const auto& k = j["kernel"];
    known(k, {"lambdas", "solver"}, "kernel");
    if (k.contains("lambdas")) {
      if (k["lambdas"].is_string() && k["lambdas"] == "grid") c.lambdas = lambda_grid();
      else c.lambdas = k["lambdas"].get<std::vector<double>>();
    }
    if (k.contains("solver")) c.solver = parse_solver(k["solver"].get<std::string>());
  }
  if (j.contains("benchmark")) {
    const auto& b = j["benchmark"];
    known(b, {"subsets", "fraction", "seeds", "output_timesteps", "output_noises", "output_sign"}, "benchmark");
    c.benchmark.subsets = b.value("subsets", c.benchmark.subsets);
    c.benchmark.fraction = b.value("fraction", c.benchmark.fraction);
    c.benchmark.seeds = b.value("seeds", c.benchmark.seeds);
    c.benchmark.output_timesteps = b.value("output_timesteps", c.benchmark.output_timesteps);
    c.benchmark.output_noises = b.value("output_noises", c.benchmark.output_noises);
    c.benchmark.output_sign = b.value("output_sign", c.benchmark.output_sign);
    if (c.benchmark.output_sign != 1.0 && c.benchmark.output_sign != -1.0) {
      throw ParameterError("benchmark.output_sign must be 1 or -1");
    }
  }
  if (j.contains("retrain_bank")) {
    const auto& r = j["retrain_bank"];
    known(r, {"subsets", "fraction", "datamodel_ridge"}, "retrain_bank");
    c.retrain_bank.subsets = r.value("subsets", c.retrain_bank.subsets);
    c.retrain_bank.fraction = r.value("fraction", c.retrain_bank.fraction);
    c.retrain_bank.datamodel_ridge = r.value("datamodel_ridge", c.retrain_bank.datamodel_ridge);
  }
  c.bootstrap_resamples = j.value("bootstrap_resamples", c.bootstrap_resamples);
  c.journey_resamples = j.value("journey_resamples", c.journey_resamples);
  if (j.contains("methods")) c.methods = j["methods"].get<std::vector<std::string>>();
  if (j.contains("counterfactual")) {
    const auto& cf = j["counterfactual"];
    known(cf, {"K", "gen_seeds", "embed_dim"}, "counterfactual");
    c.counterfactual.K = cf.value("K", c.counterfactual.K);
    c.counterfactual.gen_seeds = cf.value("gen_seeds", c.counterfactual.gen_seeds);
    c.counterfactual.embed_dim = cf.value("embed_dim", c.counterfactual.embed_dim);
  }
  return c;
}

/// Digest of the canonical JSON form; stamped into every artifact.
inline std::string config_digest(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("out");
  return Digest().text(j.dump()).hex();
}

/// Reads the config file (if any) and applies seed overrides: --seed beats
/// DTRAK_SEED, which beats the file.
inline ExperimentConfig load_config(const std::optional<std::filesystem::path>& path,
                                    std::optional<std::uint64_t> cli_seed,
                                    const std::optional<std::string>& cli_out) {
  ExperimentConfig c;
  if (path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_file(*path));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("bad config " + path->string() + ": " + e.what());
    }
    try {
      c = config_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("bad config " + path->string() + ": " + e.what());
    } catch (const ParameterError& e) {
      throw ValidationError("bad config " + path->string() + ": " + e.what());
    }
  }
  if (const char* env = std::getenv("DTRAK_SEED"); env && *env) {
    try {
      c.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw ParameterError("DTRAK_SEED is not an unsigned integer");
    }
  }
  if (cli_seed) c.seed = *cli_seed;
  if (cli_out) c.out = *cli_out;
  return c;
}

}  // namespace dtrak
