#include <gtest/gtest.h>

#include "dtrak/attribution.hpp"
#include "dtrak/sampler.hpp"
#include "test_util.hpp"

using namespace dtrak;
using dtrak::testing::random_matrix;
using dtrak::testing::random_samples;
using dtrak::testing::tiny_arch;

namespace {

Mat mat(std::initializer_list<std::initializer_list<double>> rows) {
  Mat m(Eigen::Index(rows.size()), Eigen::Index(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

Vec vec(std::initializer_list<double> v) {
  Vec out(Eigen::Index(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST(Kernel, LambdaGrid) {
  const auto g = lambda_grid();
  ASSERT_EQ(g.size(), 27u);
  EXPECT_DOUBLE_EQ(g.front(), 0.01);
  EXPECT_DOUBLE_EQ(g[1], 0.02);
  EXPECT_DOUBLE_EQ(g[2], 0.05);
  EXPECT_DOUBLE_EQ(g.back(), 5e6);
  EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
}

TEST(Kernel, IdentityHandCases) {
  const Mat v = random_matrix(2, 3, 1);
  EXPECT_TRUE(KernelPreconditioner(Mat::Identity(2, 2), {0.0}).apply(v).isApprox(v, 1e-12));
  EXPECT_TRUE(KernelPreconditioner(Mat::Identity(2, 2), {1.0}).apply(v).isApprox(0.5 * v, 1e-12));
}

TEST(Kernel, DiagonalHandCase) {
  const Mat phi = mat({{1, 0}, {0, 2}});
  for (auto solver : {KernelSolver::kCholesky, KernelSolver::kLeastSquares}) {
    const KernelPreconditioner pre(phi, {1.0, solver});
    EXPECT_TRUE(pre.apply(vec({1, 1})).isApprox(vec({0.5, 0.2}), 1e-12));
  }
}

TEST(Kernel, SingularBothSolvers) {
  const Mat phi = mat({{1, 0}, {1, 0}});
  try {
    KernelPreconditioner(phi, {0.0, KernelSolver::kCholesky});
    FAIL();
  } catch (const SingularityError& e) {
    EXPECT_NE(std::string(e.what()).find("cholesky"), std::string::npos);
  }
  EXPECT_THROW(KernelPreconditioner(phi, {0.0, KernelSolver::kLeastSquares}), SingularityError);
  EXPECT_THROW(KernelPreconditioner(Mat::Zero(3, 2), {0.0, KernelSolver::kCholesky}), SingularityError);
  EXPECT_NO_THROW(KernelPreconditioner(phi, {0.1, KernelSolver::kCholesky}));
  EXPECT_THROW(KernelPreconditioner(phi, {-1.0, KernelSolver::kCholesky}), ParameterError);
}

TEST(Kernel, SolversAgree) {
  const Mat phi = random_matrix(20, 6, 3);
  const Mat v = random_matrix(6, 3, 4);
  for (double lambda : {0.0, 0.1, 100.0}) {
    const Mat a = KernelPreconditioner(phi, {lambda, KernelSolver::kCholesky}).apply(v);
    const Mat b = KernelPreconditioner(phi, {lambda, KernelSolver::kLeastSquares}).apply(v);
    EXPECT_TRUE(a.isApprox(b, 1e-9)) << lambda;
    Mat k = phi.transpose() * phi;
    k.diagonal().array() += lambda;
    EXPECT_TRUE((k * a).isApprox(v, 1e-9));
  }
  EXPECT_THROW(KernelPreconditioner(phi, {0.1}).apply(Vec(Vec::Zero(5))), ShapeError);
  EXPECT_EQ(parse_solver(solver_name(KernelSolver::kLeastSquares)), KernelSolver::kLeastSquares);
}

TEST(Trak, HandCases) {
  EXPECT_TRUE(trak_score(vec({1, 0}), Mat::Identity(2, 2), {0.0}).isApprox(vec({1, 0}), 1e-12));
  EXPECT_TRUE(trak_score(vec({1, 0}), Mat::Identity(2, 2), {1.0}).isApprox(vec({0.5, 0}), 1e-12));
  EXPECT_EQ(trak_score(vec({0, 0}), Mat::Identity(2, 2), {1.0}), Vec::Zero(2));
  EXPECT_TRUE(trak_score(vec({3, -1}), Mat::Identity(2, 2), {0.0}).isApprox(vec({3, -1})));
  const Mat phi = mat({{1, 0}, {0, 2}});
  EXPECT_TRUE(trak_score(vec({1, 1}), phi, {1.0}).isApprox(vec({0.5, 0.4}), 1e-12));
  // Duplicate rows share credit.
  const Mat dup = mat({{1.0}, {1.0}});
  EXPECT_TRUE(trak_score(vec({1}), dup, {0.0}).isApprox(vec({0.5, 0.5}), 1e-12));
  EXPECT_THROW(trak_score(vec({1, 2, 3}), phi, {1.0}), ShapeError);
}

TEST(Trak, ScaleInvariantWithoutRidge) {
  const Mat phi = random_matrix(15, 4, 1);
  const Vec q = random_matrix(4, 1, 2).col(0);
  const Vec a = trak_score(q, phi, {0.0});
  EXPECT_TRUE(trak_score(3.0 * q, 3.0 * phi, {0.0}).isApprox(a, 1e-10));
  EXPECT_TRUE(trak_score(3.0 * q, 3.0 * phi, {0.0, KernelSolver::kLeastSquares}).isApprox(a, 1e-10));
  // lambda scales with the square of the features.
  EXPECT_TRUE(trak_score(2.0 * q, 2.0 * phi, {4.0}).isApprox(trak_score(q, phi, {1.0}), 1e-10));
}

TEST(Trak, BatchMatchesSingleQuery) {
  const Mat phi = random_matrix(12, 5, 1);
  const Mat qs = random_matrix(3, 5, 2);
  const Mat all = trak_scores(qs, phi, KernelConfig{0.5});
  for (Eigen::Index q = 0; q < 3; ++q) {
    EXPECT_TRUE(Vec(all.row(q).transpose()).isApprox(trak_score(qs.row(q).transpose(), phi, {0.5}), 1e-12));
  }
}

TEST(Ensemble, MeanOfMembers) {
  const Mat p1 = random_matrix(6, 3, 1), p2 = random_matrix(6, 3, 2);
  const Vec q1 = random_matrix(3, 1, 3).col(0), q2 = random_matrix(3, 1, 4).col(0);
  const Vec e = ensemble_score({{q1, p1}, {q2, p2}}, {0.1});
  EXPECT_TRUE(e.isApprox(0.5 * (trak_score(q1, p1, {0.1}) + trak_score(q2, p2, {0.1})), 1e-12));
  EXPECT_TRUE(ensemble_score({{q1, p1}}, {0.1}).isApprox(trak_score(q1, p1, {0.1})));
  EXPECT_THROW(ensemble_scores({}, {0.1}), ParameterError);
  const Mat id = Mat::Identity(2, 2);
  EXPECT_TRUE(ensemble_score({{vec({1, 0}), id}, {vec({0, 1}), id}}, {0.0}).isApprox(vec({0.5, 0.5})));
}

TEST(InfluenceVariants, HandCases) {
  const Mat phi = mat({{1, 0}, {0, 2}});
  EXPECT_TRUE(relative_if_score(vec({1, 1}), phi, {0.0}).isApprox(vec({1.0, 1.0}), 1e-12));
  EXPECT_TRUE(renorm_if_score(vec({1, 1}), phi, {0.0}).isApprox(vec({1.0, 0.25}), 1e-12));
  const Mat with_zero = mat({{1, 0}, {0, 2}, {0, 0}});
  const Vec r = renorm_if_score(vec({1, 1}), with_zero, {0.0});
  EXPECT_DOUBLE_EQ(r[2], 0.0);
  EXPECT_DOUBLE_EQ(relative_if_score(vec({1, 1}), with_zero, {0.0})[2], 0.0);
}

TEST(Similarity, DotAndCosine) {
  const Mat reprs = mat({{1, 0}, {1, 1}, {0, 0}});
  const Vec q = vec({2, 0});
  EXPECT_TRUE(similarity_score(q, reprs, SimilarityMode::kDot).isApprox(vec({2, 2, 0})));
  const Vec c = similarity_score(q, reprs, SimilarityMode::kCosine);
  EXPECT_DOUBLE_EQ(c[0], 1.0);
  EXPECT_NEAR(c[1], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(c[2], 0.0);
  EXPECT_THROW(similarity_score(vec({1}), reprs, SimilarityMode::kDot), ShapeError);
  EXPECT_DOUBLE_EQ(similarity_score(vec({1, 2}), mat({{3, 4}}), SimilarityMode::kDot)[0], 11.0);
  EXPECT_DOUBLE_EQ(similarity_score(vec({1, 2}), mat({{-2, 1}}), SimilarityMode::kCosine)[0], 0.0);
}

TEST(Checkpoints, TracInCPAndGasHandCase) {
  const std::vector<CheckpointFeatures> cks = {
      {mat({{1, 0}}), mat({{1, 0}, {0, 1}})},
      {mat({{0, 2}}), mat({{1, 1}, {0, 1}})},
  };
  const Mat t = tracincp_scores(cks);
  EXPECT_DOUBLE_EQ(t(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(t(0, 1), 1.0);
  const Mat g = gas_scores(cks);
  EXPECT_NEAR(g(0, 0), (1.0 + 1.0 / std::sqrt(2.0)) / 2.0, 1e-15);
  EXPECT_NEAR(g(0, 1), 0.5, 1e-15);
  EXPECT_THROW(tracincp_scores({}), ParameterError);
  const Mat t2 = tracincp_scores({{mat({{1, 0}}), mat({{1, 1}})}, {mat({{0, 1}}), mat({{1, 1}})}});
  EXPECT_DOUBLE_EQ(t2(0, 0), 1.0);
}

TEST(Checkpoints, ModelLevelMatchesFeatureLevel) {
  const auto sched = build_linear_schedule(100, 1e-4, 0.02);
  const std::vector<ModelParams> models = {init_params(tiny_arch(), 1), init_params(tiny_arch(), 2)};
  const auto data = random_samples(4, 2, 3);
  const Sample query{100, Vec::Ones(2)};
  const std::vector<Projector> proj = {Projector(10, models[0].dim(), 6), Projector(11, models[0].dim(), 6)};
  const auto spec = LossSpec::simple({3});
  std::vector<CheckpointFeatures> feats;
  for (int c = 0; c < 2; ++c) {
    feats.push_back({build_feature_matrix(models[c], {query}, spec, sched, proj[c], 5).phi,
                     build_feature_matrix(models[c], data, spec, sched, proj[c], 5).phi});
  }
  EXPECT_TRUE(tracincp_score(models, query, data, spec, sched, proj, 5)
                  .isApprox(Vec(tracincp_scores(feats).row(0).transpose()), 1e-12));
  EXPECT_TRUE(gas_score(models, query, data, spec, sched, proj, 5)
                  .isApprox(Vec(gas_scores(feats).row(0).transpose()), 1e-12));
  EXPECT_TRUE(gradient_similarity_score(models[0], query, data, spec, sched, proj[0], SimilarityMode::kDot, 5)
                  .isApprox(similarity_score(feats[0].query_phi.row(0).transpose(), feats[0].train_phi,
                                             SimilarityMode::kDot), 1e-12));
  EXPECT_THROW(tracincp_score(models, query, data, spec, sched, {proj[0]}, 5), ParameterError);
}

TEST(Journey, SingleStepIsTrakOfThatState) {
  const auto sched = build_linear_schedule(100, 1e-4, 0.02);
  const auto model = init_params(tiny_arch(), 4);
  const Projector proj(3, model.dim(), 8);
  const Mat phi = random_matrix(10, 8, 6);
  const std::vector<TrajectoryStep> one = {{Vec::Constant(2, 0.3), 40}};
  const Mat f = journey_features(model, one, proj, 9, 7);
  ASSERT_EQ(f.rows(), 1);
  EXPECT_TRUE(journey_trak_score(model, one, phi, {1.0}, proj, 9, 7)
                  .isApprox(trak_score(f.row(0).transpose(), phi, {1.0}), 1e-12));
}

TEST(Journey, MeanOverSteps) {
  const auto sched = build_linear_schedule(100, 1e-4, 0.02);
  const auto model = init_params(tiny_arch(), 4);
  const Projector proj(3, model.dim(), 8);
  const Mat phi = random_matrix(10, 8, 6);
  const TrajectoryStep a{Vec::Constant(2, 0.3), 40}, b{Vec::Constant(2, -0.5), 10};
  const Vec sa = journey_trak_score(model, {a}, phi, {1.0}, proj, 9, 7);
  const Vec sb = journey_trak_score(model, {b}, phi, {1.0}, proj, 9, 7);
  EXPECT_TRUE(journey_trak_score(model, {a, b}, phi, {1.0}, proj, 9, 7).isApprox(0.5 * (sa + sb), 1e-12));
  EXPECT_TRUE(journey_trak_score(model, {a, a}, phi, {1.0}, proj, 9, 7).isApprox(sa, 1e-12));
  EXPECT_THROW(journey_trak_score(model, {}, phi, {1.0}, proj, 9, 7), ParameterError);
  EXPECT_THROW(journey_features(model, {a}, proj, 9, 7, 0), ParameterError);
}

TEST(EmpiricalInfluence, HandCase) {
  // Sample 0 is in the first two subsets (F 2, 4) and out of the last two (F 1, 3).
  const std::vector<Mask> masks = {{1, 0}, {1, 1}, {0, 1}, {0, 0}};
  const std::vector<std::vector<double>> F = {{2.0}, {4.0}, {1.0}, {3.0}};
  EXPECT_DOUBLE_EQ(empirical_influence(masks, F, 0), 1.0);
  // Seeds are averaged first.
  EXPECT_DOUBLE_EQ(empirical_influence(masks, {{1.0, 3.0}, {4.0}, {1.0}, {3.0}}, 0), 1.0);
  EXPECT_DOUBLE_EQ(empirical_influence(masks, {{5.0}, {5.0}, {5.0}, {5.0}}, 1), 0.0);
  EXPECT_THROW(empirical_influence({{1, 1}, {1, 0}}, {{1.0}, {2.0}}, 0), CoverageError);
  EXPECT_THROW(empirical_influence({{0, 1}, {0, 0}}, {{1.0}, {2.0}}, 0), CoverageError);
  EXPECT_THROW(empirical_influence(masks, {{1.0}}, 0), ShapeError);
}

TEST(Datamodel, RecoversLinearModel) {
  const std::size_t n = 6;
  SubsetSpec spec;
  spec.count = 40;
  spec.rng_seed = 2;
  const auto masks = draw_subset_masks(n, spec);
  const Vec w = vec({1.0, -2.0, 0.5, 0.0, 3.0, -1.0});
  std::vector<double> F;
  for (const auto& m : masks) {
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i) f += m[i] * w[Eigen::Index(i)];
    F.push_back(f);
  }
  EXPECT_TRUE(datamodel_fit(masks, F, 1e-10).isApprox(w, 1e-8));
  EXPECT_LT(datamodel_fit(masks, F, 1e12).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_THROW(datamodel_fit({{1, 1, 1}}, {2.0}, 0.0), SingularityError);
  EXPECT_THROW(datamodel_fit(masks, {1.0}, 0.1), ShapeError);
  EXPECT_THROW(datamodel_fit(masks, F, -1.0), ParameterError);
}

TEST(Scores, SelfInfluenceAndMethodIds) {
  AttributionScoreMatrix s;
  s.scores = mat({{1, 2}, {3, 4}});
  EXPECT_DOUBLE_EQ(self_influence(s, 1), 4.0);
  EXPECT_THROW(self_influence(s, 2), ShapeError);
  const auto& names = method_names();
  EXPECT_EQ(names.size(), 13u);
  EXPECT_NE(std::find(names.begin(), names.end(), "d-trak"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "journey-trak"), names.end());
}
