#include <gtest/gtest.h>

#include "dtrak/features.hpp"
#include "test_util.hpp"

using namespace dtrak;
using dtrak::testing::random_matrix;
using dtrak::testing::random_samples;
using dtrak::testing::tiny_arch;

namespace {

struct IdentityProjector {
  Eigen::Index d;
  Mat project(const Mat& g) const { return g; }
  Eigen::Index input_dim() const { return d; }
  Eigen::Index output_dim() const { return d; }
};

}  // namespace

TEST(Projector, EntriesAreKeyed) {
  const Projector p(3, 10, 5), q(3, 10, 5), r(4, 10, 5);
  EXPECT_EQ(p.entry(2, 4), q.entry(2, 4));
  EXPECT_NE(p.entry(2, 4), r.entry(2, 4));
  EXPECT_NE(p.entry(2, 4), p.entry(4, 2));
  // Entries do not depend on the declared shape.
  EXPECT_EQ(Projector(3, 100, 50).entry(2, 4), p.entry(2, 4));
}

TEST(Projector, BlockingDoesNotChangeResult) {
  const Projector p(7, 600, 40);
  const Mat g = random_matrix(3, 600, 1);
  const Mat full = g * p.block(0, 600, 0, 40);
  EXPECT_TRUE(p.project(g).isApprox(full, 1e-12));
  EXPECT_TRUE(p.project(g, 7).isApprox(full, 1e-12));
  EXPECT_TRUE(p.project(g, 1).isApprox(full, 1e-12));
}

TEST(Projector, RowsIndependentOfPosition) {
  const Projector p(7, 300, 16);
  const Mat g = random_matrix(5, 300, 2);
  const Mat all = p.project(g);
  for (Eigen::Index n = 0; n < 5; ++n) {
    EXPECT_EQ(Vec(p.project(Mat(g.row(n))).row(0).transpose()), Vec(all.row(n).transpose()));
  }
  EXPECT_THROW(p.project(random_matrix(1, 299, 3)), ShapeError);
  EXPECT_THROW(Projector(1, 0, 3), ParameterError);
}

TEST(Projector, ApproximatelyPreservesInnerProducts) {
  const Eigen::Index d = 200, k = 2000;
  const Projector p(11, d, k);
  const Mat g = random_matrix(2, d, 5);
  const Mat f = p.project(g) / std::sqrt(double(k));
  const double exact_norm = g.row(0).squaredNorm();
  EXPECT_NEAR(f.row(0).squaredNorm() / exact_norm, 1.0, 0.1);
  const double exact_dot = g.row(0).dot(g.row(1));
  EXPECT_NEAR(f.row(0).dot(f.row(1)), exact_dot, 0.1 * std::sqrt(exact_norm * g.row(1).squaredNorm()));
}

TEST(Features, ZeroModelGivesZeroFeatureForSquare) {
  const auto sched = build_linear_schedule(100, 1e-4, 0.02);
  const auto arch = tiny_arch();
  const ModelParams zero(arch, Vec::Zero(arch.param_count()));
  const Projector p(1, zero.dim(), 8);
  const Vec f = compute_feature(zero, Vec::Ones(2), 0, LossSpec::square({4}), sched, p, 1);
  EXPECT_EQ(f, Vec::Zero(8));
}

TEST(Features, IdentityProjectorGivesRawGradient) {
  const auto sched = build_linear_schedule(100, 1e-4, 0.02);
  const auto model = init_params(tiny_arch(), 3);
  const auto data = random_samples(4, 2, 8);
  const auto spec = LossSpec::simple({5}, 2);
  const auto fm = build_feature_matrix(model, data, spec, sched, IdentityProjector{model.dim()}, 17, "train");
  for (std::size_t n = 0; n < data.size(); ++n) {
    const Vec g = per_sample_grad(model, data[n].x, spec, sched, {17, data[n].key});
    EXPECT_EQ(Vec(fm.phi.row(Eigen::Index(n)).transpose()), g);
  }
  EXPECT_EQ(fm.meta.sample_keys, (std::vector<std::uint64_t>{0, 1, 2, 3}));
  EXPECT_EQ(fm.meta.loss, "simple");
  EXPECT_EQ(fm.meta.sample_set, "train");
  EXPECT_EQ(fm.meta.projector_seed, 0u);
}

TEST(Features, MatrixMatchesSingleFeatureAndPermutes) {
  const auto sched = build_linear_schedule(100, 1e-4, 0.02);
  const auto model = init_params(tiny_arch(), 3);
  auto data = random_samples(5, 2, 8);
  const auto spec = LossSpec::square({3});
  const Projector p(5, model.dim(), 12);
  const auto fm = build_feature_matrix(model, data, spec, sched, p, 2);
  EXPECT_EQ(fm.rows(), 5);
  EXPECT_EQ(fm.k(), 12);
  EXPECT_EQ(fm.meta.projector_seed, 5u);
  for (std::size_t n = 0; n < data.size(); ++n) {
    EXPECT_EQ(Vec(fm.phi.row(Eigen::Index(n)).transpose()),
              compute_feature(model, data[n].x, data[n].key, spec, sched, p, 2));
  }
  std::swap(data[0], data[3]);
  const auto swapped = build_feature_matrix(model, data, spec, sched, p, 2);
  EXPECT_EQ(swapped.phi.row(0), fm.phi.row(3));
  EXPECT_EQ(swapped.phi.row(3), fm.phi.row(0));
  const auto one = build_feature_matrix(model, SampleSet{data[1]}, spec, sched, p, 2);
  EXPECT_EQ(one.phi.row(0), swapped.phi.row(1));
}

TEST(Features, LinearInLossAndInterpolation) {
  const auto sched = build_linear_schedule(100, 1e-4, 0.02);
  const auto model = init_params(tiny_arch(), 3);
  const Projector p(5, model.dim(), 10);
  const Vec x = (Vec(2) << 0.5, 1.0).finished();
  const TimestepPlan plan{4};
  const Vec fs = compute_feature(model, x, 3, LossSpec::simple(plan), sched, p, 1);
  const Vec fq = compute_feature(model, x, 3, LossSpec::square(plan), sched, p, 1);
  const Vec fi = compute_feature(model, x, 3, LossSpec::interpolated(0.25, plan), sched, p, 1);
  // interp(eta) cotangent = eta * square + (1 - eta) * (simple - square).
  EXPECT_TRUE(fi.isApprox(0.25 * fq + 0.75 * (fs - fq), 1e-10));
  EXPECT_TRUE(compute_feature(model, x, 3, LossSpec::interpolated(1.0, plan), sched, p, 1).isApprox(fq, 1e-12));
}

TEST(Features, MismatchedProjector) {
  const auto sched = build_linear_schedule(100, 1e-4, 0.02);
  const auto model = init_params(tiny_arch(), 3);
  const Projector p(5, model.dim() + 1, 10);
  EXPECT_THROW(compute_feature(model, Vec::Ones(2), 0, LossSpec::simple(), sched, p, 1), ShapeError);
  EXPECT_THROW(build_feature_matrix(model, random_samples(2, 2, 1), LossSpec::simple(), sched, p, 1), ShapeError);
  EXPECT_THROW(build_feature_matrix(model, SampleSet{}, LossSpec::simple(), sched, Projector(1, model.dim(), 2), 1),
               ParameterError);
}
