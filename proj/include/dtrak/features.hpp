#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "dtrak/denoiser.hpp"
#include "dtrak/parallel.hpp"
#include "dtrak/rng.hpp"
#include "dtrak/training.hpp"

namespace dtrak {

/// Maps rows of an (n x d) gradient matrix to (n x k) features.
template <typename P>
concept GradientProjector = requires(const P& p, const Mat& g) {
  { p.project(g) } -> std::convertible_to<Mat>;
  { p.input_dim() } -> std::convertible_to<Eigen::Index>;
  { p.output_dim() } -> std::convertible_to<Eigen::Index>;
};

/// Dense Gaussian sketch P in R^{d x k} with unscaled N(0, 1) entries.
/// Entries are regenerated from (seed, i, j) on demand and never stored whole.
class Projector {
 public:
  static constexpr Eigen::Index kColumnBlock = 1024;
  static constexpr Eigen::Index kRowBlock = 256;

  Projector(std::uint64_t seed, Eigen::Index d, Eigen::Index k) : seed_(seed), d_(d), k_(k) {
    if (d < 1 || k < 1) throw ParameterError("projector dimensions must be positive");
  }

  std::uint64_t seed() const { return seed_; }
  Eigen::Index input_dim() const { return d_; }
  Eigen::Index output_dim() const { return k_; }

  /// P[i][j]: cosine half of Box-Muller on the first two outputs of the (i, j) stream.
  double entry(Eigen::Index i, Eigen::Index j) const {
    auto rng = SeededStream::keyed(seed_, Purpose::kProjection,
                                   {static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j)});
    const double u1 = static_cast<double>((rng.next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = rng.next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Rows [row0, row0 + rows) and columns [col0, col0 + cols) of P.
  Mat block(Eigen::Index row0, Eigen::Index rows, Eigen::Index col0, Eigen::Index cols) const {
    Mat b(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) b(i, j) = entry(row0 + i, col0 + j);
    }
    return b;
  }

  /// G P for G in R^{n x d}, computed column block by column block.
  Mat project(const Mat& grads) const { return project(grads, kColumnBlock); }

  Mat project(const Mat& grads, Eigen::Index column_block) const {
    if (grads.cols() != d_) {
      throw ShapeError("projector expects d = " + std::to_string(d_) + ", got " +
                       std::to_string(grads.cols()));
    }
    Mat out = Mat::Zero(grads.rows(), k_);
    for (Eigen::Index c0 = 0; c0 < k_; c0 += column_block) {
      const Eigen::Index cols = std::min(column_block, k_ - c0);
      for (Eigen::Index r0 = 0; r0 < d_; r0 += kRowBlock) {
        const Eigen::Index rows = std::min(kRowBlock, d_ - r0);
        const Mat pb = block(r0, rows, c0, cols);
        // Row-at-a-time so each output row is independent of its position in `grads`.
        for (Eigen::Index n = 0; n < grads.rows(); ++n) {
          out.row(n).segment(c0, cols).noalias() += grads.row(n).segment(r0, rows) * pb;
        }
      }
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  Eigen::Index d_;
  Eigen::Index k_;
};

/// Provenance of a feature matrix.
struct FeatureMeta {
  std::string model_digest;
  std::string loss;
  TimestepPlan plan;
  int noises_per_timestep = 1;
  std::uint64_t noise_seed = 0;
  std::uint64_t projector_seed = 0;
  Eigen::Index k = 0;
  std::string sample_set;
  std::vector<std::uint64_t> sample_keys;
};

/// Phi: row n is the projected, draw-averaged gradient of sample n.
struct GradientFeatureMatrix {
  Mat phi;
  FeatureMeta meta;

  Eigen::Index rows() const { return phi.rows(); }
  Eigen::Index k() const { return phi.cols(); }
};

/// Raw (unprojected) gradients for a list of samples, one row each.
inline Mat gradient_rows(const ModelParams& model, const SampleSet& samples, const LossSpec& spec,
                         const VarianceSchedule& sched, std::uint64_t noise_seed) {
  Mat grads(static_cast<Eigen::Index>(samples.size()), model.dim());
  parallel_for(samples.size(), [&](std::size_t n) {
    grads.row(static_cast<Eigen::Index>(n)) =
        per_sample_grad(model, samples[n].x, spec, sched, {noise_seed, samples[n].key}).transpose();
  });
  return grads;
}

/// phi(x) = P^T (mean over the plan's draws of grad_theta loss).
template <GradientProjector P>
Vec compute_feature(const ModelParams& model, const Vec& x, std::uint64_t sample_key,
                    const LossSpec& spec, const VarianceSchedule& sched, const P& projector,
                    std::uint64_t noise_seed) {
  if (projector.input_dim() != model.dim()) {
    throw ShapeError("projector input dim " + std::to_string(projector.input_dim()) +
                     " differs from parameter count " + std::to_string(model.dim()));
  }
  const Vec g = per_sample_grad(model, x, spec, sched, {noise_seed, sample_key});
  return projector.project(Mat(g.transpose())).row(0).transpose();
}

template <GradientProjector P>
GradientFeatureMatrix build_feature_matrix(const ModelParams& model, const SampleSet& samples,
                                           const LossSpec& spec, const VarianceSchedule& sched,
                                           const P& projector, std::uint64_t noise_seed,
                                           std::string sample_set = "") {
  if (samples.empty()) throw ParameterError("feature matrix needs at least one sample");
  if (projector.input_dim() != model.dim()) {
    throw ShapeError("projector input dim " + std::to_string(projector.input_dim()) +
                     " differs from parameter count " + std::to_string(model.dim()));
  }
  GradientFeatureMatrix fm;
  fm.phi = projector.project(gradient_rows(model, samples, spec, sched, noise_seed));
  fm.meta.model_digest = model_digest(model);
  fm.meta.loss = loss_name(spec);
  fm.meta.plan = spec.plan;
  fm.meta.noises_per_timestep = spec.noises_per_timestep;
  fm.meta.noise_seed = noise_seed;
  if constexpr (requires { projector.seed(); }) fm.meta.projector_seed = projector.seed();
  fm.meta.k = projector.output_dim();
  fm.meta.sample_set = std::move(sample_set);
  for (const auto& s : samples) fm.meta.sample_keys.push_back(s.key);
  return fm;
}

}  // namespace dtrak
