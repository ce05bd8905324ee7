#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dtrak/attribution.hpp"
#include "dtrak/loss.hpp"
#include "dtrak/parallel.hpp"
#include "dtrak/sampler.hpp"
#include "dtrak/training.hpp"

namespace dtrak {

/// F(x; theta): the loss functional evaluated with the benchmark's noise keying.
inline double model_output_F(const ModelParams& model, const Sample& x, const LossSpec& output_spec,
                             const VarianceSchedule& sched, std::uint64_t noise_seed) {
  return eval_loss(model, x.x, output_spec, sched, {noise_seed, x.key});
}

/// Subset masks plus model outputs F[m][s][q] of every subset model on every query.
struct LDSBenchmark {
  std::vector<Mask> masks;
  int seeds = 1;
  std::vector<std::uint64_t> query_keys;
  LossSpec output_spec;
  std::uint64_t noise_seed = 0;
  /// F = output_sign * loss. -1 makes F grow when a sample helps the query,
  /// so positive attribution scores correlate positively with it.
  double output_sign = -1.0;
  /// Row-major [m][s][q].
  std::vector<double> F;

  std::size_t subsets() const { return masks.size(); }
  std::size_t queries() const { return query_keys.size(); }
  std::size_t train_size() const { return masks.empty() ? 0 : masks.front().size(); }

  double& at(std::size_t m, std::size_t s, std::size_t q) {
    return F[(m * static_cast<std::size_t>(seeds) + s) * queries() + q];
  }
  double at(std::size_t m, std::size_t s, std::size_t q) const {
    return F[(m * static_cast<std::size_t>(seeds) + s) * queries() + q];
  }

  /// F averaged over seeds for query q, one entry per subset.
  std::vector<double> seed_mean(std::size_t q) const {
    std::vector<double> out(subsets());
    for (std::size_t m = 0; m < subsets(); ++m) {
      double acc = 0.0;
      for (std::size_t s = 0; s < static_cast<std::size_t>(seeds); ++s) acc += at(m, s, q);
      out[m] = acc / static_cast<double>(seeds);
    }
    return out;
  }

  void validate() const {
    if (masks.empty()) throw ValidationError("benchmark has no subsets");
    if (seeds < 1) throw ValidationError("benchmark needs seeds >= 1");
    if (output_sign != 1.0 && output_sign != -1.0) throw ValidationError("benchmark output_sign must be +1 or -1");
    for (const auto& m : masks) {
      if (m.size() != train_size()) throw ValidationError("benchmark masks differ in length");
    }
    if (F.size() != subsets() * static_cast<std::size_t>(seeds) * queries()) {
      throw ValidationError("benchmark F tensor has wrong size");
    }
    for (double f : F) {
      if (!std::isfinite(f)) throw ValidationError("benchmark F tensor has non-finite entries");
    }
  }
};

/// Evaluates every subset model of the bank on every query.
inline LDSBenchmark build_benchmark(const SubsetModelBank& bank, const SampleSet& queries,
                                    const LossSpec& output_spec, const VarianceSchedule& sched,
                                    std::uint64_t noise_seed, double output_sign = -1.0) {
  LDSBenchmark b;
  b.output_sign = output_sign;
  b.masks = bank.masks;
  b.seeds = bank.models.empty() ? 1 : static_cast<int>(bank.models.front().size());
  for (const auto& q : queries) b.query_keys.push_back(q.key);
  b.output_spec = output_spec;
  b.noise_seed = noise_seed;
  b.F.assign(b.subsets() * static_cast<std::size_t>(b.seeds) * b.queries(), 0.0);
  const auto seeds = static_cast<std::size_t>(b.seeds);
  parallel_for(b.subsets() * seeds, [&](std::size_t job) {
    const std::size_t m = job / seeds, s = job % seeds;
    for (std::size_t q = 0; q < queries.size(); ++q) {
      b.at(m, s, q) =
          output_sign * model_output_F(bank.models[m][s].params, queries[q], output_spec, sched, noise_seed);
    }
  });
  return b;
}

/// Attribution-based output prediction: sum of scores over mask members.
inline double g_tau(const Vec& scores_row, const Mask& mask) {
  if (static_cast<std::size_t>(scores_row.size()) != mask.size()) {
    throw ShapeError("g_tau: score row and mask differ in length");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) acc += scores_row[static_cast<Eigen::Index>(i)];
  }
  return acc;
}

/// Ranks starting at 1; tied values share the mean of their ranks.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation; nullopt when either side is constant.
inline std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("spearman: inputs differ in length");
  if (a.size() < 2) throw ParameterError("spearman needs at least two points");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct LdsResult {
  std::vector<std::optional<double>> per_query;
  /// Mean over queries with a defined correlation; NaN when there are none.
  double mean = 0.0;
  std::size_t valid = 0;
  /// Queries dropped because F or g_tau was constant across subsets.
  std::size_t excluded = 0;
};

namespace detail {

inline LdsResult lds_over(const LDSBenchmark& bench, const Mat& scores,
                          const std::vector<std::size_t>& subset_idx) {
  LdsResult r;
  double acc = 0.0;
  for (std::size_t q = 0; q < bench.queries(); ++q) {
    const auto f_all = bench.seed_mean(q);
    const Vec row = scores.row(static_cast<Eigen::Index>(q)).transpose();
    std::vector<double> f, g;
    for (std::size_t m : subset_idx) {
      f.push_back(f_all[m]);
      g.push_back(g_tau(row, bench.masks[m]));
    }
    auto rho = spearman(f, g);
    r.per_query.push_back(rho);
    if (rho) {
      acc += *rho;
      ++r.valid;
    } else {
      ++r.excluded;
    }
  }
  r.mean = r.valid ? acc / static_cast<double>(r.valid) : std::nan("");
  return r;
}

inline void check_scores(const LDSBenchmark& bench, const Mat& scores) {
  if (static_cast<std::size_t>(scores.rows()) != bench.queries() ||
      static_cast<std::size_t>(scores.cols()) != bench.train_size()) {
    throw ShapeError("score matrix is " + std::to_string(scores.rows()) + "x" +
                     std::to_string(scores.cols()) + ", benchmark needs " +
                     std::to_string(bench.queries()) + "x" + std::to_string(bench.train_size()));
  }
}

}  // namespace detail

/// Per-query Spearman correlation between seed-averaged F and g_tau over subsets.
inline LdsResult lds(const LDSBenchmark& bench, const Mat& scores) {
  detail::check_scores(bench, scores);
  std::vector<std::size_t> all(bench.subsets());
  std::iota(all.begin(), all.end(), 0);
  return detail::lds_over(bench, scores, all);
}

struct BootstrapResult {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> resample_means;

  double ci_low() const { return mean - 1.96 * std; }
  double ci_high() const { return mean + 1.96 * std; }
};

/// Subset indices of bootstrap resample r.
inline std::vector<std::size_t> bootstrap_indices(std::size_t subsets, std::uint64_t seed,
                                                  std::size_t r) {
  auto rng = SeededStream::keyed(seed, Purpose::kBootstrap, {static_cast<std::uint64_t>(r)});
  std::vector<std::size_t> idx(subsets);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.next_below(subsets));
  return idx;
}

/// Resamples subsets with replacement and reports the mean and sample
/// standard deviation of the mean LDS (std is 0 for a single resample).
/// Resamples whose mean is undefined are skipped.
inline BootstrapResult bootstrap_lds(const LDSBenchmark& bench, const Mat& scores, int resamples,
                                     std::uint64_t seed) {
  if (resamples < 1) throw ParameterError("resamples must be >= 1");
  detail::check_scores(bench, scores);
  BootstrapResult b;
  for (int r = 0; r < resamples; ++r) {
    const auto res = detail::lds_over(bench, scores,
                                      bootstrap_indices(bench.subsets(), seed, static_cast<std::size_t>(r)));
    if (res.valid) b.resample_means.push_back(res.mean);
  }
  if (b.resample_means.empty()) {
    b.mean = b.std = std::nan("");
    return b;
  }
  const double n = static_cast<double>(b.resample_means.size());
  b.mean = std::accumulate(b.resample_means.begin(), b.resample_means.end(), 0.0) / n;
  if (b.resample_means.size() > 1) {
    double ss = 0.0;
    for (double v : b.resample_means) ss += (v - b.mean) * (v - b.mean);
    b.std = std::sqrt(ss / (n - 1.0));
  }
  return b;
}

// ------------------------------------------------------------- counterfactual

/// Maps a sample to an embedding for similarity comparisons.
using Embedder = std::function<Vec(const Vec&)>;

/// Seeded Gaussian projection of raw vectors, scaled by 1/sqrt(out_dim).
class RandomProjectionEmbedder {
 public:
  RandomProjectionEmbedder(std::uint64_t seed, Eigen::Index in_dim, Eigen::Index out_dim = 64)
      : matrix_(out_dim, in_dim) {
    auto rng = SeededStream::keyed(seed, Purpose::kEmbedder);
    for (Eigen::Index i = 0; i < out_dim; ++i) {
      for (Eigen::Index j = 0; j < in_dim; ++j) matrix_(i, j) = rng.next_gaussian();
    }
    matrix_ /= std::sqrt(static_cast<double>(out_dim));
  }

  Vec operator()(const Vec& x) const {
    if (x.size() != matrix_.cols()) throw ShapeError("embedder input dimension mismatch");
    return matrix_ * x;
  }

 private:
  Mat matrix_;
};

/// Cosine similarity computed so that cosine(a, a) is exactly 1; 0 for zero vectors.
inline double cosine_similarity(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: dimension mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// Indices of the k largest scores; ties go to the lower index.
inline std::vector<std::size_t> top_k_indices(const Vec& scores, std::size_t k) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[static_cast<Eigen::Index>(a)] > scores[static_cast<Eigen::Index>(b)];
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct CounterfactualArm {
  std::string label;
  std::vector<std::size_t> removed;
  std::vector<double> l2;
  std::vector<double> cosine;
  double median_l2 = 0.0;
  double median_cosine = 0.0;
};

struct CounterfactualReport {
  std::size_t K = 0;
  std::vector<std::uint64_t> gen_seeds;
  CounterfactualArm targeted;
  CounterfactualArm random;
};

struct CounterfactualSetup {
  DenoiserArch arch;
  VarianceSchedule sched;
  TrainConfig retrain;
  int ddim_steps = 50;
  std::uint64_t removal_seed = 0;
  std::string method_label = "targeted";
};

/// Removes the K highest-scoring training samples (and, as a control, K
/// uniformly random ones), retrains with the same config, and compares
/// generations of the original and retrained models under paired seeds.
inline CounterfactualReport counterfactual_run(const SampleSet& dataset, const Vec& scores_row,
                                               std::size_t K, const CounterfactualSetup& setup,
                                               const std::vector<std::uint64_t>& gen_seeds,
                                               const Embedder& embedder,
                                               const ModelParams* original = nullptr) {
  if (K >= dataset.size()) throw ParameterError("K must be smaller than the training set");
  if (static_cast<std::size_t>(scores_row.size()) != dataset.size()) {
    throw ShapeError("score row length differs from training set size");
  }
  std::optional<ModelParams> trained;
  if (!original) {
    trained = train_final(dataset, setup.arch, setup.sched, setup.retrain).params;
    original = &*trained;
  }

  CounterfactualReport rep;
  rep.K = K;
  rep.gen_seeds = gen_seeds;
  rep.targeted.label = setup.method_label;
  rep.targeted.removed = top_k_indices(scores_row, K);
  rep.random.label = "random";
  auto rng = SeededStream::keyed(setup.removal_seed, Purpose::kRemoval);
  rep.random.removed = sample_without_replacement(dataset.size(), K, rng);

  const auto dim = static_cast<Eigen::Index>(setup.arch.input_dim);
  std::vector<Vec> base;
  for (auto seed : gen_seeds) base.push_back(ddim_sample(*original, setup.sched, setup.ddim_steps, seed, dim));

  for (CounterfactualArm* arm : {&rep.targeted, &rep.random}) {
    Mask keep(dataset.size(), 1);
    for (std::size_t i : arm->removed) keep[i] = 0;
    const auto model = train_final(apply_mask(dataset, keep), setup.arch, setup.sched, setup.retrain, keep).params;
    for (std::size_t g = 0; g < gen_seeds.size(); ++g) {
      const Vec x = ddim_sample(model, setup.sched, setup.ddim_steps, gen_seeds[g], dim);
      arm->l2.push_back((x - base[g]).norm());
      arm->cosine.push_back(cosine_similarity(embedder(x), embedder(base[g])));
    }
    arm->median_l2 = median(arm->l2);
    arm->median_cosine = median(arm->cosine);
  }
  return rep;
}

// ----------------------------------------------------------- leave-one-out oracle

struct LooResult {
  /// F(query; theta_full), one per query.
  Vec F_full;
  /// F_minus(n, q) = F(query q; theta without sample n).
  Mat F_minus;
  /// diffs(n, q) = F_minus(n, q) - F_full(q).
  Mat diffs;
};

/// Trains one model per left-out sample plus a full model, all with cfg.seed.
inline LooResult loo_oracle(const SampleSet& dataset, const DenoiserArch& arch,
                            const VarianceSchedule& sched, const TrainConfig& cfg,
                            const LossSpec& output_spec, const SampleSet& queries,
                            std::uint64_t noise_seed) {
  const std::size_t n = dataset.size();
  if (n < 2) throw ParameterError("leave-one-out needs at least two training samples");
  std::vector<ModelParams> models(n + 1);
  parallel_for(n + 1, [&](std::size_t job) {
    Mask keep(n, 1);
    if (job < n) keep[job] = 0;
    models[job] = train_final(apply_mask(dataset, keep), arch, sched, cfg, keep).params;
  });
  LooResult r;
  const auto Q = static_cast<Eigen::Index>(queries.size());
  r.F_full.resize(Q);
  r.F_minus.resize(static_cast<Eigen::Index>(n), Q);
  for (Eigen::Index q = 0; q < Q; ++q) {
    const auto& query = queries[static_cast<std::size_t>(q)];
    r.F_full[q] = model_output_F(models[n], query, output_spec, sched, noise_seed);
    for (std::size_t i = 0; i < n; ++i) {
      r.F_minus(static_cast<Eigen::Index>(i), q) = model_output_F(models[i], query, output_spec, sched, noise_seed);
    }
  }
  r.diffs = r.F_minus.rowwise() - r.F_full.transpose();
  return r;
}

/// The N + 1 masks {full, without 0, ..., without N-1} matching loo_oracle's models.
inline std::vector<Mask> loo_mask_family(std::size_t n) {
  std::vector<Mask> masks;
  masks.emplace_back(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    Mask m(n, 1);
    m[i] = 0;
    masks.push_back(std::move(m));
  }
  return masks;
}

}  // namespace dtrak
