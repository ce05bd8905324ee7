#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dtrak/loss.hpp"

namespace dtrak {

/// A noisy state visited by the sampler, recorded before its denoising step.
struct TrajectoryStep {
  Vec x_t;
  int t = 0;
};

/// Deterministic DDIM: x_T ~ N(0, I) from the seeded stream, then
///   x0_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
///   x_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev) eps
/// over `steps` evenly spaced timesteps, with abar_prev = 1 after the last one.
template <NoisePredictor Model>
Vec ddim_sample(const Model& model, const VarianceSchedule& sched, int steps, std::uint64_t seed,
                Eigen::Index dim, std::vector<TrajectoryStep>* trajectory = nullptr) {
  if (steps < 1 || steps > sched.T()) {
    throw ParameterError("ddim steps must lie in [1, T]");
  }
  const std::vector<int> ts = select_timesteps(sched.T(), {steps, TimestepStrategy::kUniform});
  auto rng = SeededStream::keyed(seed, Purpose::kSampling);
  Vec x(dim);
  for (Eigen::Index i = 0; i < dim; ++i) x[i] = rng.next_gaussian();

  if (trajectory) trajectory->clear();
  for (auto it = ts.rbegin(); it != ts.rend(); ++it) {
    const int t = *it;
    if (trajectory) trajectory->push_back({x, t});
    const Vec eps = model.predict(x, t);
    const double ab = sched.alpha_bar(t);
    const double ab_prev = std::next(it) == ts.rend() ? 1.0 : sched.alpha_bar(*std::next(it));
    const Vec x0 = (x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    x = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
  }
  return x;
}

}  // namespace dtrak
