#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include "dtrak/features.hpp"
#include "dtrak/kernel.hpp"
#include "dtrak/sampler.hpp"
#include "dtrak/training.hpp"

namespace dtrak {

/// Stable CLI identifiers of the attribution methods.
inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names = {
      "raw-pixel", "embed-sim", "grad-dot",     "grad-cos",     "tracincp",
      "gas",       "trak",      "d-trak",       "relative-if",  "renorm-if",
      "journey-trak", "empirical-if", "datamodel"};
  return names;
}

struct ScoreMeta {
  std::string method;
  std::string loss;
  Eigen::Index k = 0;
  double lambda = 0.0;
  std::vector<std::string> model_digests;
  std::vector<std::uint64_t> query_keys;
  std::vector<std::uint64_t> train_keys;
};

/// scores(q, n) = tau(x_q, D)_n.
struct AttributionScoreMatrix {
  Mat scores;
  ScoreMeta meta;
};

// ---------------------------------------------------------------- kernel methods

/// Q x N matrix phi_q^T (Phi^T Phi + lambda I)^{-1} Phi^T for each query row.
inline Mat trak_scores(const Mat& query_phi, const Mat& phi, const KernelPreconditioner& pre) {
  if (query_phi.cols() != phi.cols()) throw ShapeError("query features and Phi differ in k");
  const Mat u = pre.apply(Mat(query_phi.transpose()));  // k x Q
  return (phi * u).transpose();
}

inline Mat trak_scores(const Mat& query_phi, const Mat& phi, KernelConfig cfg) {
  return trak_scores(query_phi, phi, KernelPreconditioner(phi, cfg));
}

inline Vec trak_score(const Vec& query_phi, const Mat& phi, KernelConfig cfg) {
  return trak_scores(Mat(query_phi.transpose()), phi, cfg).row(0).transpose();
}

/// Per-member (query features, Phi) pair of an ensemble.
struct EnsembleMember {
  Mat query_phi;
  Mat phi;
};

/// Mean of the members' TRAK score matrices.
inline Mat ensemble_scores(const std::vector<EnsembleMember>& members, KernelConfig cfg) {
  if (members.empty()) throw ParameterError("ensemble needs at least one member");
  Mat total;
  for (const auto& m : members) {
    if (m.phi.rows() != members.front().phi.rows()) throw ShapeError("ensemble members differ in N");
    Mat s = trak_scores(m.query_phi, m.phi, cfg);
    if (total.size() == 0) total = std::move(s);
    else total += s;
  }
  return total / static_cast<double>(members.size());
}

inline Vec ensemble_score(const std::vector<std::pair<Vec, Mat>>& members, KernelConfig cfg) {
  std::vector<EnsembleMember> ms;
  for (const auto& [q, phi] : members) ms.push_back({Mat(q.transpose()), phi});
  return ensemble_scores(ms, cfg).row(0).transpose();
}

namespace detail {

inline Vec safe_divide(const Vec& num, const Vec& den) {
  Vec out(num.size());
  for (Eigen::Index i = 0; i < num.size(); ++i) out[i] = den[i] > 0.0 ? num[i] / den[i] : 0.0;
  return out;
}

}  // namespace detail

/// TRAK scores divided per column by ||(Phi^T Phi + lambda I)^{-1} phi_n||; 0 where that is 0.
inline Mat relative_if_scores(const Mat& query_phi, const Mat& phi, const KernelPreconditioner& pre) {
  const Mat raw = trak_scores(query_phi, phi, pre);
  const Vec den = pre.apply(Mat(phi.transpose())).colwise().norm().transpose();
  Mat out(raw.rows(), raw.cols());
  for (Eigen::Index q = 0; q < raw.rows(); ++q) {
    out.row(q) = detail::safe_divide(raw.row(q).transpose(), den).transpose();
  }
  return out;
}

inline Vec relative_if_score(const Vec& query_phi, const Mat& phi, KernelConfig cfg) {
  return relative_if_scores(Mat(query_phi.transpose()), phi, KernelPreconditioner(phi, cfg))
      .row(0)
      .transpose();
}

/// TRAK scores divided per column by ||phi_n||; 0 where that is 0.
inline Mat renorm_if_scores(const Mat& query_phi, const Mat& phi, const KernelPreconditioner& pre) {
  const Mat raw = trak_scores(query_phi, phi, pre);
  const Vec den = phi.rowwise().norm();
  Mat out(raw.rows(), raw.cols());
  for (Eigen::Index q = 0; q < raw.rows(); ++q) {
    out.row(q) = detail::safe_divide(raw.row(q).transpose(), den).transpose();
  }
  return out;
}

inline Vec renorm_if_score(const Vec& query_phi, const Mat& phi, KernelConfig cfg) {
  return renorm_if_scores(Mat(query_phi.transpose()), phi, KernelPreconditioner(phi, cfg))
      .row(0)
      .transpose();
}

// ------------------------------------------------------------- similarity methods

enum class SimilarityMode { kDot, kCosine };

/// Dot product or cosine between the query and each row of train_reprs.
/// The cosine of a zero vector is 0.
inline Vec similarity_score(const Vec& query, const Mat& train_reprs, SimilarityMode mode) {
  if (query.size() != train_reprs.cols()) throw ShapeError("similarity: representation dims differ");
  Vec s = train_reprs * query;
  if (mode == SimilarityMode::kCosine) {
    const double qn = query.norm();
    for (Eigen::Index n = 0; n < s.size(); ++n) {
      const double den = qn * train_reprs.row(n).norm();
      s[n] = den > 0.0 ? s[n] / den : 0.0;
    }
  }
  return s;
}

inline Mat similarity_scores(const Mat& queries, const Mat& train_reprs, SimilarityMode mode) {
  Mat out(queries.rows(), train_reprs.rows());
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    out.row(q) = similarity_score(queries.row(q).transpose(), train_reprs, mode).transpose();
  }
  return out;
}

/// Gradient similarity on projected features of one checkpoint.
template <GradientProjector P>
Vec gradient_similarity_score(const ModelParams& model, const Sample& query, const SampleSet& dataset,
                              const LossSpec& spec, const VarianceSchedule& sched,
                              const P& projector, SimilarityMode mode, std::uint64_t noise_seed) {
  const Vec q = compute_feature(model, query.x, query.key, spec, sched, projector, noise_seed);
  const auto fm = build_feature_matrix(model, dataset, spec, sched, projector, noise_seed);
  return similarity_score(q, fm.phi, mode);
}

/// Per-checkpoint (query features, train features), each from its own projector.
struct CheckpointFeatures {
  Mat query_phi;
  Mat train_phi;
};

/// (1/C) sum_c similarity(query_c, train_c).
inline Mat checkpoint_similarity_scores(const std::vector<CheckpointFeatures>& per_checkpoint,
                                        SimilarityMode mode) {
  if (per_checkpoint.empty()) throw ParameterError("need at least one checkpoint");
  Mat total;
  for (const auto& c : per_checkpoint) {
    Mat s = similarity_scores(c.query_phi, c.train_phi, mode);
    if (total.size() == 0) total = std::move(s);
    else {
      if (s.rows() != total.rows() || s.cols() != total.cols()) throw ShapeError("checkpoint features differ in shape");
      total += s;
    }
  }
  return total / static_cast<double>(per_checkpoint.size());
}

/// TracInCP: mean over checkpoints of projected-gradient dot products.
inline Mat tracincp_scores(const std::vector<CheckpointFeatures>& per_checkpoint) {
  return checkpoint_similarity_scores(per_checkpoint, SimilarityMode::kDot);
}

/// GAS: TracInCP with cosine similarity.
inline Mat gas_scores(const std::vector<CheckpointFeatures>& per_checkpoint) {
  return checkpoint_similarity_scores(per_checkpoint, SimilarityMode::kCosine);
}

/// Model-level TracInCP / GAS: features from each checkpoint with its own projector.
inline Vec tracincp_score(const std::vector<ModelParams>& checkpoints, const Sample& query,
                          const SampleSet& dataset, const LossSpec& spec,
                          const VarianceSchedule& sched, const std::vector<Projector>& projectors,
                          std::uint64_t noise_seed, SimilarityMode mode = SimilarityMode::kDot) {
  if (checkpoints.empty()) throw ParameterError("tracincp needs at least one checkpoint");
  if (projectors.size() != checkpoints.size()) throw ParameterError("one projector per checkpoint");
  std::vector<CheckpointFeatures> feats;
  for (std::size_t c = 0; c < checkpoints.size(); ++c) {
    feats.push_back({build_feature_matrix(checkpoints[c], {query}, spec, sched, projectors[c], noise_seed).phi,
                     build_feature_matrix(checkpoints[c], dataset, spec, sched, projectors[c], noise_seed).phi});
  }
  return checkpoint_similarity_scores(feats, mode).row(0).transpose();
}

inline Vec gas_score(const std::vector<ModelParams>& checkpoints, const Sample& query,
                     const SampleSet& dataset, const LossSpec& spec, const VarianceSchedule& sched,
                     const std::vector<Projector>& projectors, std::uint64_t noise_seed) {
  return tracincp_score(checkpoints, query, dataset, spec, sched, projectors, noise_seed,
                        SimilarityMode::kCosine);
}

// ----------------------------------------------------------------- journey TRAK

/// Projected single-timestep Simple gradients at each trajectory state,
/// averaged over `resamples` noise draws keyed by (query key, t, r). One row per step.
template <GradientProjector P>
Mat journey_features(const ModelParams& model, const std::vector<TrajectoryStep>& trajectory,
                     const P& projector, std::uint64_t noise_seed, std::uint64_t query_key,
                     int resamples = 1) {
  if (trajectory.empty()) throw ParameterError("journey TRAK needs a non-empty trajectory");
  if (resamples < 1) throw ParameterError("resamples must be >= 1");
  Mat grads(static_cast<Eigen::Index>(trajectory.size()), model.dim());
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    const auto& step = trajectory[i];
    Vec g = Vec::Zero(model.dim());
    for (int r = 0; r < resamples; ++r) {
      auto rng = SeededStream::keyed(noise_seed, Purpose::kJourneyNoise,
                                     {query_key, static_cast<std::uint64_t>(step.t),
                                      static_cast<std::uint64_t>(r)});
      Vec eps(step.x_t.size());
      for (Eigen::Index j = 0; j < eps.size(); ++j) eps[j] = rng.next_gaussian();
      g += simple_grad_at_state(model, step.x_t, step.t, eps);
    }
    grads.row(static_cast<Eigen::Index>(i)) = (g / static_cast<double>(resamples)).transpose();
  }
  return projector.project(grads);
}

/// Mean over trajectory steps of the TRAK score of each step's feature.
inline Vec journey_trak_from_features(const Mat& step_features, const Mat& phi,
                                      const KernelPreconditioner& pre) {
  if (step_features.rows() == 0) throw ParameterError("journey TRAK needs a non-empty trajectory");
  const Mat per_step = trak_scores(step_features, phi, pre);
  return per_step.colwise().mean().transpose();
}

template <GradientProjector P>
Vec journey_trak_score(const ModelParams& model, const std::vector<TrajectoryStep>& trajectory,
                       const Mat& phi, KernelConfig cfg, const P& projector,
                       std::uint64_t noise_seed, std::uint64_t query_key, int resamples = 1) {
  const Mat f = journey_features(model, trajectory, projector, noise_seed, query_key, resamples);
  return journey_trak_from_features(f, phi, KernelPreconditioner(phi, cfg));
}

// ------------------------------------------------------------ retraining methods

/// Mean F over subsets containing n minus mean F over subsets excluding n,
/// with F first averaged over seeds. F_values[m][s].
inline double empirical_influence(const std::vector<Mask>& masks,
                                  const std::vector<std::vector<double>>& F_values, std::size_t n) {
  if (masks.size() != F_values.size()) throw ShapeError("masks and F differ in subset count");
  double in_sum = 0.0, out_sum = 0.0;
  std::size_t in_count = 0, out_count = 0;
  for (std::size_t m = 0; m < masks.size(); ++m) {
    if (n >= masks[m].size()) throw ShapeError("training index outside mask");
    if (F_values[m].empty()) throw ShapeError("subset without F values");
    double f = 0.0;
    for (double v : F_values[m]) f += v;
    f /= static_cast<double>(F_values[m].size());
    if (masks[m][n]) {
      in_sum += f;
      ++in_count;
    } else {
      out_sum += f;
      ++out_count;
    }
  }
  if (in_count == 0 || out_count == 0) {
    throw CoverageError("training index " + std::to_string(n) +
                        (in_count == 0 ? " is in no subset" : " is in every subset"));
  }
  return in_sum / static_cast<double>(in_count) - out_sum / static_cast<double>(out_count);
}

/// Solves min_w ||masks w - F||^2 + ridge ||w||^2 by the regularized normal equations.
inline Vec datamodel_fit(const std::vector<Mask>& masks, const std::vector<double>& F_values,
                         double ridge) {
  if (masks.empty()) throw ParameterError("datamodel needs at least one subset");
  if (masks.size() != F_values.size()) throw ShapeError("masks and F differ in subset count");
  if (!(ridge >= 0.0)) throw ParameterError("ridge must be >= 0");
  const auto n = static_cast<Eigen::Index>(masks.front().size());
  Mat X(static_cast<Eigen::Index>(masks.size()), n);
  for (std::size_t m = 0; m < masks.size(); ++m) {
    if (static_cast<Eigen::Index>(masks[m].size()) != n) throw ShapeError("masks differ in length");
    for (Eigen::Index i = 0; i < n; ++i) X(static_cast<Eigen::Index>(m), i) = masks[m][static_cast<std::size_t>(i)];
  }
  const Vec f = Eigen::Map<const Vec>(F_values.data(), static_cast<Eigen::Index>(F_values.size()));
  Mat a = X.transpose() * X;
  a.diagonal().array() += ridge;
  return detail::checked_llt(a, "datamodel_fit").solve(X.transpose() * f);
}

/// tau(x^n, D)_n; requires query row n to be training sample n.
inline double self_influence(const AttributionScoreMatrix& scores, Eigen::Index n) {
  if (n < 0 || n >= scores.scores.rows() || n >= scores.scores.cols()) {
    throw ShapeError("self_influence: index outside the score matrix");
  }
  return scores.scores(n, n);
}

}  // namespace dtrak
