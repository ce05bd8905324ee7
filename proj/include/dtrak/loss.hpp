#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dtrak/errors.hpp"
#include "dtrak/rng.hpp"
#include "dtrak/schedule.hpp"

namespace dtrak {

/// Anything that predicts noise from a noisy state and a timestep.
template <typename M>
concept NoisePredictor = requires(const M& m, const Vec& x, int t) {
  { m.predict(x, t) } -> std::convertible_to<Vec>;
};

enum class LossKind { kSimple, kElbo, kSquare, kAvg, kPNorm, kInterpolated };

enum class TimestepStrategy { kUniform, kCumulative };

struct TimestepPlan {
  int count = 10;
  TimestepStrategy strategy = TimestepStrategy::kUniform;
};

/// Which scalar functional of the denoiser output to evaluate or differentiate.
struct LossSpec {
  LossKind kind = LossKind::kSimple;
  /// Norm order for kPNorm: 1, 2, or +infinity.
  double p = 2.0;
  /// Interpolation weight for kInterpolated, in [0, 1].
  double eta = 0.5;
  TimestepPlan plan;
  int noises_per_timestep = 1;

  static LossSpec simple(TimestepPlan plan = {}, int noises = 1) {
    return {LossKind::kSimple, 2.0, 0.5, plan, noises};
  }
  static LossSpec elbo(TimestepPlan plan = {}, int noises = 1) {
    return {LossKind::kElbo, 2.0, 0.5, plan, noises};
  }
  static LossSpec square(TimestepPlan plan = {}, int noises = 1) {
    return {LossKind::kSquare, 2.0, 0.5, plan, noises};
  }
  static LossSpec avg(TimestepPlan plan = {}, int noises = 1) {
    return {LossKind::kAvg, 2.0, 0.5, plan, noises};
  }
  static LossSpec pnorm(double p, TimestepPlan plan = {}, int noises = 1) {
    return {LossKind::kPNorm, p, 0.5, plan, noises};
  }
  static LossSpec interpolated(double eta, TimestepPlan plan = {}, int noises = 1) {
    return {LossKind::kInterpolated, 2.0, eta, plan, noises};
  }
};

inline void validate(const LossSpec& spec) {
  if (spec.noises_per_timestep < 1) throw ParameterError("noises_per_timestep must be >= 1");
  if (spec.plan.count < 1) throw ParameterError("timestep plan count must be >= 1");
  if (spec.kind == LossKind::kPNorm && spec.p != 1.0 && spec.p != 2.0 && !std::isinf(spec.p)) {
    throw ParameterError("p-norm order must be 1, 2 or inf");
  }
  if (spec.kind == LossKind::kInterpolated && !(spec.eta >= 0.0 && spec.eta <= 1.0)) {
    throw ParameterError("interpolation eta must lie in [0, 1]");
  }
}

/// Stable short name of the loss functional ("simple", "p1", "interp:0.25", ...).
inline std::string loss_name(const LossSpec& spec) {
  switch (spec.kind) {
    case LossKind::kSimple: return "simple";
    case LossKind::kElbo: return "elbo";
    case LossKind::kSquare: return "square";
    case LossKind::kAvg: return "avg";
    case LossKind::kPNorm:
      if (std::isinf(spec.p)) return "pinf";
      return spec.p == 1.0 ? "p1" : "p2";
    case LossKind::kInterpolated: {
      std::ostringstream os;
      os.precision(17);
      os << "interp:" << spec.eta;
      return os.str();
    }
  }
  return "unknown";
}

/// Inverse of loss_name for the functional part; plan and noises keep defaults.
inline LossSpec parse_loss_kind(const std::string& name) {
  LossSpec s;
  if (name == "simple") s.kind = LossKind::kSimple;
  else if (name == "elbo") s.kind = LossKind::kElbo;
  else if (name == "square") s.kind = LossKind::kSquare;
  else if (name == "avg") s.kind = LossKind::kAvg;
  else if (name == "p1") { s.kind = LossKind::kPNorm; s.p = 1.0; }
  else if (name == "p2") { s.kind = LossKind::kPNorm; s.p = 2.0; }
  else if (name == "pinf") { s.kind = LossKind::kPNorm; s.p = std::numeric_limits<double>::infinity(); }
  else if (name.rfind("interp:", 0) == 0) {
    s.kind = LossKind::kInterpolated;
    try {
      s.eta = std::stod(name.substr(7));
    } catch (const std::exception&) {
      throw ParameterError("bad interpolation weight in loss name '" + name + "'");
    }
  } else {
    throw ParameterError("unknown loss '" + name + "'");
  }
  validate(s);
  return s;
}

inline std::string strategy_name(TimestepStrategy s) {
  return s == TimestepStrategy::kUniform ? "uniform" : "cumulative";
}

inline TimestepStrategy parse_strategy(const std::string& name) {
  if (name == "uniform") return TimestepStrategy::kUniform;
  if (name == "cumulative") return TimestepStrategy::kCumulative;
  throw ParameterError("unknown timestep strategy '" + name + "'");
}

/// Uniform: {1, 1 + s, 1 + 2s, ...} with s = floor(T / count). Cumulative: {1..count}.
inline std::vector<int> select_timesteps(int T, const TimestepPlan& plan) {
  if (plan.count < 1) throw ParameterError("timestep count must be >= 1");
  if (plan.count > T) {
    throw ParameterError("timestep count " + std::to_string(plan.count) + " exceeds T = " +
                         std::to_string(T));
  }
  std::vector<int> ts(static_cast<std::size_t>(plan.count));
  const int stride = plan.strategy == TimestepStrategy::kUniform ? T / plan.count : 1;
  for (int i = 0; i < plan.count; ++i) ts[static_cast<std::size_t>(i)] = 1 + i * stride;
  return ts;
}

/// Reproducible Gaussian noise for one sample, keyed by (timestep, draw index).
struct NoiseKey {
  std::uint64_t seed = 0;
  std::uint64_t sample_key = 0;

  Vec draw(int t, int draw_index, Eigen::Index dim) const {
    auto rng = SeededStream::keyed(seed, Purpose::kLossNoise,
                                   {sample_key, static_cast<std::uint64_t>(t),
                                    static_cast<std::uint64_t>(draw_index)});
    Vec eps(dim);
    for (Eigen::Index i = 0; i < dim; ++i) eps[i] = rng.next_gaussian();
    return eps;
  }
};

/// Value of one Monte-Carlo term of the functional.
inline double loss_term(const LossSpec& spec, const Vec& eps_pred, const Vec& eps, int t,
                        const VarianceSchedule& sched) {
  switch (spec.kind) {
    case LossKind::kSimple: return (eps - eps_pred).squaredNorm();
    case LossKind::kElbo: return sched.elbo_weight(t) * (eps - eps_pred).squaredNorm();
    case LossKind::kSquare: return eps_pred.squaredNorm();
    case LossKind::kAvg: return eps_pred.mean();
    case LossKind::kPNorm:
      if (std::isinf(spec.p)) return eps_pred.lpNorm<Eigen::Infinity>();
      return spec.p == 1.0 ? eps_pred.lpNorm<1>() : eps_pred.norm();
    case LossKind::kInterpolated: {
      const double sq = eps_pred.squaredNorm();
      return spec.eta * sq + (1.0 - spec.eta) * ((eps - eps_pred).squaredNorm() - sq);
    }
  }
  return 0.0;
}

/// 2 (eta eps_pred - (1 - eta) eps): the cotangent of the interpolated functional.
inline Vec interpolated_grad_target(double eta, const Vec& eps_pred, const Vec& eps) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ParameterError("eta must lie in [0, 1]");
  if (eps_pred.size() != eps.size()) throw ShapeError("interpolated_grad_target: dimension mismatch");
  return 2.0 * (eta * eps_pred - (1.0 - eta) * eps);
}

/// d(loss_term)/d(eps_pred). Non-smooth norms use the usual subgradient
/// (zero at the origin, first maximal index for the infinity norm).
inline Vec loss_cotangent(const LossSpec& spec, const Vec& eps_pred, const Vec& eps, int t,
                          const VarianceSchedule& sched) {
  const Eigen::Index n = eps_pred.size();
  switch (spec.kind) {
    case LossKind::kSimple: return 2.0 * (eps_pred - eps);
    case LossKind::kElbo: return (2.0 * sched.elbo_weight(t)) * (eps_pred - eps);
    case LossKind::kSquare: return 2.0 * eps_pred;
    case LossKind::kAvg: return Vec::Constant(n, 1.0 / static_cast<double>(n));
    case LossKind::kPNorm: {
      Vec g = Vec::Zero(n);
      if (std::isinf(spec.p)) {
        Eigen::Index arg = 0;
        const double m = eps_pred.cwiseAbs().maxCoeff(&arg);
        if (m > 0.0) g[arg] = eps_pred[arg] > 0.0 ? 1.0 : -1.0;
      } else if (spec.p == 1.0) {
        for (Eigen::Index i = 0; i < n; ++i) {
          g[i] = eps_pred[i] > 0.0 ? 1.0 : (eps_pred[i] < 0.0 ? -1.0 : 0.0);
        }
      } else {
        const double norm = eps_pred.norm();
        if (norm > 0.0) g = eps_pred / norm;
      }
      return g;
    }
    case LossKind::kInterpolated: return interpolated_grad_target(spec.eta, eps_pred, eps);
  }
  return Vec::Zero(n);
}

/// Calls fn(t, draw_index, eps) for every Monte-Carlo draw of the plan, in
/// ascending timestep then ascending draw order. Returns the draw count.
template <typename Fn>
int for_each_draw(const LossSpec& spec, const VarianceSchedule& sched, const NoiseKey& noise,
                  Eigen::Index dim, Fn&& fn) {
  validate(spec);
  int count = 0;
  for (int t : select_timesteps(sched.T(), spec.plan)) {
    for (int j = 0; j < spec.noises_per_timestep; ++j) {
      fn(t, j, noise.draw(t, j, dim));
      ++count;
    }
  }
  return count;
}

/// Monte-Carlo estimate of the functional averaged over the plan's timesteps and noises.
template <NoisePredictor Model>
double eval_loss(const Model& model, const Vec& x, const LossSpec& spec,
                 const VarianceSchedule& sched, const NoiseKey& noise) {
  double total = 0.0;
  const int count = for_each_draw(spec, sched, noise, x.size(), [&](int t, int, const Vec& eps) {
    const Vec xt = forward_diffuse(x, t, eps, sched);
    total += loss_term(spec, model.predict(xt, t), eps, t, sched);
  });
  return total / static_cast<double>(count);
}

}  // namespace dtrak
