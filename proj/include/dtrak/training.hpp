#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dtrak/denoiser.hpp"
#include "dtrak/digest.hpp"
#include "dtrak/parallel.hpp"
#include "dtrak/rng.hpp"
#include "dtrak/schedule.hpp"

namespace dtrak {

/// A data vector with a stable identity. Noise draws are keyed by `key`, so
/// results do not depend on where a sample sits in a list.
struct Sample {
  std::uint64_t key = 0;
  Vec x;
};

using SampleSet = std::vector<Sample>;

/// Membership indicator over positions of a training set.
using Mask = std::vector<std::uint8_t>;

struct TrainConfig {
  int epochs = 200;
  int batch_size = 64;
  double lr_init = 1e-4;
  double warmup_fraction = 0.1;
  double weight_decay = 1e-6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ParameterError("epochs must be >= 1");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
      throw ParameterError("warmup_fraction must lie in [0, 1)");
    }
    if (weight_decay < 0.0) throw ParameterError("weight_decay must be >= 0");
  }
};

struct Checkpoint {
  ModelParams params;
  int epoch = 0;
  std::string train_config_hash;
  std::string dataset_hash;
  std::optional<Mask> subset_mask;
};

inline std::string model_digest(const ModelParams& p) {
  Digest d;
  d.u64(static_cast<std::uint64_t>(p.arch.input_dim))
      .u64(static_cast<std::uint64_t>(p.arch.time_embed_dim))
      .u64(static_cast<std::uint64_t>(p.arch.timesteps))
      .text(activation_name(p.arch.activation));
  for (int h : p.arch.hidden_dims) d.u64(static_cast<std::uint64_t>(h));
  d.f64s({p.theta.data(), static_cast<std::size_t>(p.theta.size())});
  return d.hex();
}

/// Order-independent: samples are digested in key order.
inline std::string dataset_digest(const SampleSet& data) {
  std::vector<const Sample*> sorted;
  for (const auto& s : data) sorted.push_back(&s);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->key < b->key; });
  Digest d;
  d.u64(sorted.size());
  for (const auto* s : sorted) {
    d.u64(s->key).f64s({s->x.data(), static_cast<std::size_t>(s->x.size())});
  }
  return d.hex();
}

inline std::string train_config_digest(const TrainConfig& c, const DenoiserArch& arch,
                                       const VarianceSchedule& sched) {
  Digest d;
  d.u64(static_cast<std::uint64_t>(c.epochs))
      .u64(static_cast<std::uint64_t>(c.batch_size))
      .f64(c.lr_init)
      .f64(c.warmup_fraction)
      .f64(c.weight_decay)
      .f64(c.adam_beta1)
      .f64(c.adam_beta2)
      .f64(c.adam_eps)
      .u64(c.seed)
      .u64(static_cast<std::uint64_t>(sched.T()))
      .f64(sched.beta_start())
      .f64(sched.beta_end())
      .u64(static_cast<std::uint64_t>(arch.input_dim))
      .u64(static_cast<std::uint64_t>(arch.time_embed_dim))
      .text(activation_name(arch.activation));
  for (int h : arch.hidden_dims) d.u64(static_cast<std::uint64_t>(h));
  return d.hex();
}

/// Linear warmup from 0 over the first warmup_fraction of the steps, then
/// cosine decay to 0 at total_steps. `step` is zero-based.
inline double learning_rate(const TrainConfig& cfg, long step, long total_steps) {
  const long warmup = std::lround(cfg.warmup_fraction * static_cast<double>(total_steps));
  if (step < warmup) return cfg.lr_init * static_cast<double>(step) / static_cast<double>(warmup);
  const long decay = total_steps - warmup;
  if (decay <= 0) return cfg.lr_init;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(decay);
  return cfg.lr_init * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline long total_train_steps(const TrainConfig& cfg, std::size_t n) {
  const long per_epoch = (static_cast<long>(n) + cfg.batch_size - 1) / cfg.batch_size;
  return per_epoch * cfg.epochs;
}

/// Minimizes L_Simple with AdamW. Each sample gets one (t, eps) draw per
/// epoch keyed by (seed, epoch, sample key); batches come from a seeded
/// permutation of the key-sorted samples and are accumulated in ascending order.
inline std::vector<Checkpoint> train(const SampleSet& dataset, const DenoiserArch& arch,
                                     const VarianceSchedule& sched, const TrainConfig& cfg,
                                     std::vector<int> checkpoint_epochs = {},
                                     std::optional<Mask> subset_mask = std::nullopt) {
  if (dataset.empty()) throw ParameterError("cannot train on an empty dataset");
  cfg.validate();
  arch.validate();
  if (arch.timesteps != sched.T()) throw ParameterError("arch timesteps differ from schedule T");
  for (int e : checkpoint_epochs) {
    if (e < 1 || e > cfg.epochs) {
      throw ParameterError("checkpoint epoch " + std::to_string(e) + " outside [1, " +
                           std::to_string(cfg.epochs) + "]");
    }
  }
  std::set<int> emit(checkpoint_epochs.begin(), checkpoint_epochs.end());
  emit.insert(cfg.epochs);

  std::vector<const Sample*> samples;
  for (const auto& s : dataset) {
    if (s.x.size() != arch.input_dim) throw ShapeError("training sample dimension differs from arch");
    samples.push_back(&s);
  }
  std::sort(samples.begin(), samples.end(), [](auto* a, auto* b) { return a->key < b->key; });

  const std::string cfg_hash = train_config_digest(cfg, arch, sched);
  const std::string data_hash = dataset_digest(dataset);

  ModelParams params = init_params(arch, cfg.seed);
  const Eigen::Index d = params.dim();
  Vec m = Vec::Zero(d), v = Vec::Zero(d), grad(d);
  const std::size_t n = samples.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const long total = total_train_steps(cfg, n);
  long step = 0;
  std::vector<Checkpoint> out;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto perm_rng = SeededStream::keyed(cfg.seed, Purpose::kPermutation,
                                        {static_cast<std::uint64_t>(epoch)});
    const auto perm = seeded_permutation(n, perm_rng);
    for (std::size_t start = 0; start < n; start += bs) {
      std::vector<std::size_t> batch(perm.begin() + static_cast<long>(start),
                                     perm.begin() + static_cast<long>(std::min(n, start + bs)));
      std::sort(batch.begin(), batch.end());
      grad.setZero();
      for (std::size_t idx : batch) {
        const Sample& s = *samples[idx];
        auto rng = SeededStream::keyed(cfg.seed, Purpose::kTrainNoise,
                                       {static_cast<std::uint64_t>(epoch), s.key});
        const int t = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(sched.T())));
        Vec eps(s.x.size());
        for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = rng.next_gaussian();
        const Vec xt = forward_diffuse(s.x, t, eps, sched);
        const auto cache = detail::run_forward(params, xt, t);
        detail::backprop_from(params, cache, 2.0 * (cache.output - eps), 1.0, grad);
      }
      grad /= static_cast<double>(batch.size());

      ++step;
      const double lr = learning_rate(cfg, step - 1, total);
      const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
      m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad;
      v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad.cwiseProduct(grad);
      for (Eigen::Index i = 0; i < d; ++i) {
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        params.theta[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                                 cfg.weight_decay * params.theta[i]);
      }
    }
    if (emit.contains(epoch)) out.push_back({params, epoch, cfg_hash, data_hash, subset_mask});
  }
  return out;
}

/// Final checkpoint of train().
inline Checkpoint train_final(const SampleSet& dataset, const DenoiserArch& arch,
                              const VarianceSchedule& sched, const TrainConfig& cfg,
                              std::optional<Mask> subset_mask = std::nullopt) {
  return train(dataset, arch, sched, cfg, {}, std::move(subset_mask)).back();
}

struct SubsetSpec {
  double fraction = 0.5;
  int count = 32;
  int seeds_per_subset = 3;
  std::uint64_t rng_seed = 0;

  std::size_t subset_size(std::size_t n) const {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  }
};

inline std::size_t popcount(const Mask& mask) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

inline SampleSet apply_mask(const SampleSet& data, const Mask& mask) {
  if (mask.size() != data.size()) throw ShapeError("mask length differs from dataset size");
  SampleSet out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (mask[i]) out.push_back(data[i]);
  }
  return out;
}

/// `count` masks over n positions, each with floor(fraction * n) members.
inline std::vector<Mask> draw_subset_masks(std::size_t n, const SubsetSpec& spec) {
  if (!(spec.fraction > 0.0 && spec.fraction <= 1.0)) {
    throw ParameterError("subset fraction must lie in (0, 1]");
  }
  if (spec.count < 1) throw ParameterError("subset count must be >= 1");
  const std::size_t size = spec.subset_size(n);
  if (size < 1) throw ParameterError("fraction * N must be >= 1");
  std::vector<Mask> masks;
  for (int m = 0; m < spec.count; ++m) {
    auto rng = SeededStream::keyed(spec.rng_seed, Purpose::kSubset, {static_cast<std::uint64_t>(m)});
    Mask mask(n, 0);
    for (std::size_t i : sample_without_replacement(n, size, rng)) mask[i] = 1;
    masks.push_back(std::move(mask));
  }
  return masks;
}

/// Training seed of the s-th model on subset m; never equal to the base seed's own stream.
inline std::uint64_t subset_model_seed(std::uint64_t base_seed, int subset, int seed_index) {
  return derive_key(base_seed, Purpose::kModelSeed,
                    {static_cast<std::uint64_t>(subset), static_cast<std::uint64_t>(seed_index)});
}

struct SubsetModelBank {
  std::vector<Mask> masks;
  /// models[m][s]: final checkpoint of seed s on subset m.
  std::vector<std::vector<Checkpoint>> models;
};

inline SubsetModelBank train_subsets(const SampleSet& dataset, const DenoiserArch& arch,
                                     const VarianceSchedule& sched, const TrainConfig& cfg,
                                     const SubsetSpec& spec) {
  if (spec.seeds_per_subset < 1) throw ParameterError("seeds_per_subset must be >= 1");
  SubsetModelBank bank;
  bank.masks = draw_subset_masks(dataset.size(), spec);
  const auto count = static_cast<std::size_t>(spec.count);
  const auto seeds = static_cast<std::size_t>(spec.seeds_per_subset);
  bank.models.assign(count, std::vector<Checkpoint>(seeds));
  parallel_for(count * seeds, [&](std::size_t job) {
    const std::size_t m = job / seeds, s = job % seeds;
    TrainConfig c = cfg;
    c.seed = subset_model_seed(cfg.seed, static_cast<int>(m), static_cast<int>(s));
    bank.models[m][s] = train_final(apply_mask(dataset, bank.masks[m]), arch, sched, c, bank.masks[m]);
  });
  return bank;
}

}  // namespace dtrak
