#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dtrak/errors.hpp"

namespace dtrak {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Forward-process tables, indexed by timestep t in [1, T]. Index 0 holds
/// the t = 0 boundary (alpha_bar = 1).
class VarianceSchedule {
 public:
  VarianceSchedule() = default;

  int T() const { return static_cast<int>(beta_.size()) - 1; }

  double beta(int t) const { return beta_.at(check(t)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const {
    if (t == 0) return 1.0;
    return alpha_bar_.at(check(t));
  }
  /// Posterior variance ((1 - abar[t-1]) / (1 - abar[t])) * beta[t]; zero at t = 1.
  double sigma_sq(int t) const { return sigma_sq_.at(check(t)); }

  /// Variational-bound weight beta^2 / (2 sigma^2 alpha (1 - abar)).
  /// The posterior variance vanishes at t = 1, so that step uses sigma^2 = beta[1].
  double elbo_weight(int t) const {
    const double b = beta(t);
    const double s2 = t == 1 ? b : sigma_sq(t);
    return b * b / (2.0 * s2 * alpha(t) * (1.0 - alpha_bar(t)));
  }

  double beta_start() const { return beta_.size() > 1 ? beta_[1] : 0.0; }
  double beta_end() const { return beta_.empty() ? 0.0 : beta_.back(); }

  friend VarianceSchedule build_linear_schedule(int T, double beta1, double betaT);

 private:
  std::size_t check(int t) const {
    if (t < 1 || t > T()) {
      throw ParameterError("timestep " + std::to_string(t) + " outside [1, " +
                           std::to_string(T()) + "]");
    }
    return static_cast<std::size_t>(t);
  }

  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
  std::vector<double> sigma_sq_;
};

/// Linear beta schedule from beta1 to betaT inclusive.
inline VarianceSchedule build_linear_schedule(int T, double beta1, double betaT) {
  if (T < 1) throw ParameterError("schedule needs T >= 1");
  if (!(beta1 > 0.0) || !(beta1 <= betaT) || !(betaT < 1.0)) {
    throw ParameterError("schedule needs 0 < beta1 <= betaT < 1");
  }
  VarianceSchedule s;
  const auto n = static_cast<std::size_t>(T) + 1;
  s.beta_.assign(n, 0.0);
  s.alpha_bar_.assign(n, 1.0);
  s.sigma_sq_.assign(n, 0.0);
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    s.beta_[t] = t == T ? betaT : beta1 + (betaT - beta1) * frac;
    s.alpha_bar_[t] = s.alpha_bar_[t - 1] * (1.0 - s.beta_[t]);
    s.sigma_sq_[t] = (1.0 - s.alpha_bar_[t - 1]) / (1.0 - s.alpha_bar_[t]) * s.beta_[t];
  }
  return s;
}

/// sqrt(abar_t) x + sqrt(1 - abar_t) eps.
inline Vec forward_diffuse(const Vec& x, int t, const Vec& eps, const VarianceSchedule& sched) {
  if (x.size() != eps.size()) {
    throw ShapeError("forward_diffuse: x has dim " + std::to_string(x.size()) + ", eps has dim " +
                     std::to_string(eps.size()));
  }
  const double ab = sched.alpha_bar(t);
  return std::sqrt(ab) * x + std::sqrt(1.0 - ab) * eps;
}

/// Same as forward_diffuse with an explicit alpha_bar, for degenerate cases
/// (alpha_bar of exactly 0 or 1) that no valid schedule produces.
inline Vec forward_diffuse_with(const Vec& x, double alpha_bar, const Vec& eps) {
  if (x.size() != eps.size()) throw ShapeError("forward_diffuse: dimension mismatch");
  return std::sqrt(alpha_bar) * x + std::sqrt(1.0 - alpha_bar) * eps;
}

}  // namespace dtrak
