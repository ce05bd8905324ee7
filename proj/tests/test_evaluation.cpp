#include <gtest/gtest.h>

#include <cmath>

#include "dtrak/attribution.hpp"
#include "dtrak/evaluation.hpp"
#include "test_util.hpp"

using namespace dtrak;
using dtrak::testing::ConstantStub;
using dtrak::testing::random_samples;
using dtrak::testing::tiny_arch;

namespace {

/// F[m] = sum of w over the members of mask m, one seed.
LDSBenchmark additive_bench(const Vec& w, int subsets, std::uint64_t seed) {
  SubsetSpec spec;
  spec.count = subsets;
  spec.rng_seed = seed;
  LDSBenchmark b;
  b.masks = draw_subset_masks(static_cast<std::size_t>(w.size()), spec);
  b.query_keys = {0};
  for (const auto& m : b.masks) b.F.push_back(g_tau(w, m));
  b.validate();
  return b;
}

/// Pearson correlation of plain ranks; inputs are tie-free here.
double reference_spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto rank = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (double x : v) {
        less += x < v[i];
        equal += x == v[i];
      }
      r[i] = less + (equal + 1.0) / 2.0;
    }
    return r;
  };
  const auto ra = rank(a), rb = rank(b);
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i] / n;
    mb += rb[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST(ModelOutput, MatchesEvalLoss) {
  const auto sched = build_linear_schedule(100, 1e-4, 0.02);
  const auto model = init_params(tiny_arch(), 1);
  const Sample s{42, Vec::Ones(2)};
  const auto spec = LossSpec::simple({5}, 2);
  EXPECT_DOUBLE_EQ(model_output_F(model, s, spec, sched, 3), eval_loss(model, s.x, spec, sched, {3, 42}));
  EXPECT_NE(model_output_F(model, s, spec, sched, 3), model_output_F(model, s, spec, sched, 4));
  EXPECT_NE(model_output_F(model, s, spec, sched, 3), model_output_F(model, {43, s.x}, spec, sched, 3));
}

TEST(GTau, SumsMembers) {
  EXPECT_DOUBLE_EQ(g_tau((Vec(3) << 1, 2, 3).finished(), {1, 0, 1}), 4.0);
  EXPECT_DOUBLE_EQ(g_tau((Vec(3) << 1, 2, 3).finished(), {0, 0, 0}), 0.0);
  EXPECT_THROW(g_tau(Vec::Ones(3), {1, 0}), ShapeError);
}

TEST(Spearman, Examples) {
  EXPECT_DOUBLE_EQ(*spearman({1, 2, 3}, {1, 3, 2}), 0.5);
  EXPECT_DOUBLE_EQ(*spearman({1, 2, 3, 4}, {1, 3, 2, 4}), 0.8);
  EXPECT_DOUBLE_EQ(*spearman({1, 2, 3}, {30, 20, 10}), -1.0);
  EXPECT_FALSE(spearman({1, 2, 3}, {5, 5, 5}).has_value());
  EXPECT_FALSE(spearman({7, 7}, {1, 2}).has_value());
  EXPECT_THROW(spearman({1}, {1}), ParameterError);
  EXPECT_THROW(spearman({1, 2}, {1}), ShapeError);
  EXPECT_EQ(average_ranks({10, 20, 10, 5}), (std::vector<double>{2.5, 4, 2.5, 1}));
}

TEST(Lds, AdditiveFixtureIsPerfect) {
  // Gaussian weights so distinct subsets never tie on their sums.
  const Vec w = dtrak::testing::random_matrix(8, 1, 21).col(0);
  const auto b = additive_bench(w, 30, 5);
  EXPECT_DOUBLE_EQ(lds(b, Mat(w.transpose())).mean, 1.0);
  EXPECT_DOUBLE_EQ(lds(b, Mat(-w.transpose())).mean, -1.0);
  // Rank-based: invariant to positive scaling and shifts of the scores.
  EXPECT_DOUBLE_EQ(lds(b, Mat(3.0 * w.transpose())).mean, 1.0);
  EXPECT_DOUBLE_EQ(lds(b, Mat((w.array() + 10.0).matrix().transpose())).mean, 1.0);
}

TEST(Lds, MatchesReferenceOnNoisyScores) {
  const Vec w = (Vec(8) << 0.3, -1.2, 2.0, 0.7, -0.1, 1.5, -2.2, 0.9).finished();
  const auto b = additive_bench(w, 25, 6);
  const Vec s = w + (Vec(8) << 1.0, 0.5, -2.0, 0.1, 0.9, -0.3, 1.1, 0.0).finished();
  std::vector<double> f, g;
  for (std::size_t m = 0; m < b.subsets(); ++m) {
    f.push_back(b.F[m]);
    g.push_back(g_tau(s, b.masks[m]));
  }
  EXPECT_NEAR(lds(b, Mat(s.transpose())).mean, reference_spearman(f, g), 1e-12);
}

TEST(Lds, ExcludesConstantQueries) {
  const Vec w = (Vec(6) << 1, 2, 3, 4, 5, 6).finished();
  auto b = additive_bench(w, 10, 2);
  b.query_keys = {0, 1};
  std::vector<double> F;
  for (std::size_t m = 0; m < b.subsets(); ++m) {
    F.push_back(b.F[m]);
    F.push_back(7.0);
  }
  b.F = F;
  b.validate();
  Mat scores(2, 6);
  scores.row(0) = w.transpose();
  scores.row(1) = w.transpose();
  const auto r = lds(b, scores);
  EXPECT_EQ(r.valid, 1u);
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_FALSE(r.per_query[1].has_value());
  EXPECT_DOUBLE_EQ(r.mean, 1.0);
  // Zero scores make g constant too.
  scores.row(0).setZero();
  EXPECT_TRUE(std::isnan(lds(b, scores).mean));
  EXPECT_THROW(lds(b, Mat::Zero(2, 5)), ShapeError);
}

TEST(Lds, SeedMeanAveragesSeeds) {
  LDSBenchmark b;
  b.masks = {{1, 0}, {0, 1}};
  b.seeds = 2;
  b.query_keys = {9};
  b.F = {1.0, 3.0, 10.0, 20.0};
  b.validate();
  EXPECT_EQ(b.seed_mean(0), (std::vector<double>{2.0, 15.0}));
  b.output_sign = 0.5;
  EXPECT_THROW(b.validate(), ValidationError);
  b.output_sign = 1.0;
  b.F.pop_back();
  EXPECT_THROW(b.validate(), ValidationError);
}

TEST(Bootstrap, MatchesBruteForce) {
  const Vec w = (Vec(8) << 0.3, -1.2, 2.0, 0.7, -0.1, 1.5, -2.2, 0.9).finished();
  const auto b = additive_bench(w, 20, 7);
  const Vec s = w + (Vec(8) << 1.0, 0.5, -2.0, 0.1, 0.9, -0.3, 1.1, 0.0).finished();
  const auto res = bootstrap_lds(b, Mat(s.transpose()), 30, 99);
  std::vector<double> means;
  for (std::size_t r = 0; r < 30; ++r) {
    std::vector<double> f, g;
    for (std::size_t m : bootstrap_indices(b.subsets(), 99, r)) {
      f.push_back(b.F[m]);
      g.push_back(g_tau(s, b.masks[m]));
    }
    if (auto rho = spearman(f, g)) means.push_back(*rho);
  }
  ASSERT_EQ(res.resample_means.size(), means.size());
  double mean = 0;
  for (double v : means) mean += v / double(means.size());
  double ss = 0;
  for (double v : means) ss += (v - mean) * (v - mean);
  EXPECT_NEAR(res.mean, mean, 1e-12);
  EXPECT_NEAR(res.std, std::sqrt(ss / double(means.size() - 1)), 1e-12);
  EXPECT_NEAR(res.ci_low(), res.mean - 1.96 * res.std, 1e-15);
  EXPECT_NEAR(res.ci_high(), res.mean + 1.96 * res.std, 1e-15);
}

TEST(Bootstrap, DegenerateCases) {
  const Vec w = (Vec(6) << 1, 2, 3, 4, 5, 6).finished();
  const auto b = additive_bench(w, 12, 3);
  const auto one = bootstrap_lds(b, Mat(w.transpose()), 1, 1);
  EXPECT_DOUBLE_EQ(one.std, 0.0);
  const auto perfect = bootstrap_lds(b, Mat(w.transpose()), 20, 1);
  EXPECT_DOUBLE_EQ(perfect.mean, 1.0);
  EXPECT_DOUBLE_EQ(perfect.std, 0.0);
  EXPECT_THROW(bootstrap_lds(b, Mat(w.transpose()), 0, 1), ParameterError);
  EXPECT_EQ(bootstrap_indices(12, 5, 3), bootstrap_indices(12, 5, 3));
  EXPECT_NE(bootstrap_indices(12, 5, 3), bootstrap_indices(12, 5, 4));
}

TEST(Counterfactual, Helpers) {
  const Vec a = (Vec(3) << 1, -2, 0.5).finished();
  EXPECT_EQ(cosine_similarity(a, a), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(a, -a), -1.0);
  EXPECT_EQ(cosine_similarity(a, Vec::Zero(3)), 0.0);
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_EQ(top_k_indices((Vec(5) << 1, 5, 5, 0, 3).finished(), 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(top_k_indices((Vec(5) << 1, 5, 5, 0, 3).finished(), 3), (std::vector<std::size_t>{1, 2, 4}));
  RandomProjectionEmbedder e(1, 3, 8);
  EXPECT_EQ(e(a).size(), 8);
  EXPECT_THROW(e(Vec::Zero(2)), ShapeError);
}

TEST(Counterfactual, ZeroRemovalsReproduceGenerations) {
  CounterfactualSetup setup;
  setup.arch = tiny_arch(2, 50);
  setup.sched = build_linear_schedule(50, 1e-4, 0.02);
  setup.retrain.epochs = 3;
  setup.retrain.batch_size = 4;
  setup.retrain.seed = 5;
  setup.ddim_steps = 5;
  const auto data = random_samples(8, 2, 1);
  RandomProjectionEmbedder emb(2, 2, 8);
  const Vec scores = Vec::LinSpaced(8, 0.0, 1.0);
  const auto rep = counterfactual_run(data, scores, 0, setup, {1, 2, 3}, emb);
  EXPECT_EQ(rep.targeted.removed.size(), 0u);
  EXPECT_DOUBLE_EQ(rep.targeted.median_l2, 0.0);
  EXPECT_DOUBLE_EQ(rep.targeted.median_cosine, 1.0);
  EXPECT_DOUBLE_EQ(rep.random.median_l2, 0.0);

  const auto rep2 = counterfactual_run(data, scores, 3, setup, {1, 2, 3}, emb);
  EXPECT_EQ(rep2.targeted.removed, (std::vector<std::size_t>{5, 6, 7}));
  EXPECT_EQ(rep2.random.removed.size(), 3u);
  EXPECT_EQ(rep2.targeted.l2.size(), 3u);
  EXPECT_GT(rep2.targeted.median_l2, 0.0);
  EXPECT_THROW(counterfactual_run(data, scores, 8, setup, {1}, emb), ParameterError);
  EXPECT_THROW(counterfactual_run(data, Vec::Zero(7), 2, setup, {1}, emb), ShapeError);
}

TEST(Loo, OracleAndEmpiricalInfluence) {
  const auto sched = build_linear_schedule(50, 1e-4, 0.02);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.lr_init = 1e-2;
  cfg.seed = 4;
  const auto data = random_samples(4, 2, 3);
  const auto queries = random_samples(2, 2, 8, 100);
  const auto spec = LossSpec::simple({5});
  const auto r = loo_oracle(data, tiny_arch(2, 50), sched, cfg, spec, queries, 6);
  ASSERT_EQ(r.diffs.rows(), 4);
  ASSERT_EQ(r.diffs.cols(), 2);
  const auto again = loo_oracle(data, tiny_arch(2, 50), sched, cfg, spec, queries, 6);
  EXPECT_EQ(r.diffs, again.diffs);

  // Direct check of one left-out model.
  const auto m1 = train_final(apply_mask(data, {1, 0, 1, 1}), tiny_arch(2, 50), sched, cfg).params;
  EXPECT_DOUBLE_EQ(r.F_minus(1, 0), model_output_F(m1, queries[0], spec, sched, 6));

  // Two-mask family {full, without n}: influence is minus the LOO difference.
  const auto fam = loo_mask_family(4);
  ASSERT_EQ(fam.size(), 5u);
  EXPECT_EQ(popcount(fam[0]), 4u);
  for (std::size_t n = 0; n < 4; ++n) {
    const auto ei = empirical_influence({fam[0], fam[n + 1]},
                                        {{r.F_full[0]}, {r.F_minus(Eigen::Index(n), 0)}}, n);
    EXPECT_DOUBLE_EQ(ei, -r.diffs(Eigen::Index(n), 0));
  }
  // Full family: EI_n = (S - D_n) / N - D_n.
  std::vector<std::vector<double>> F = {{r.F_full[1]}};
  for (Eigen::Index n = 0; n < 4; ++n) F.push_back({r.F_minus(n, 1)});
  const double S = r.diffs.col(1).sum();
  for (std::size_t n = 0; n < 4; ++n) {
    const double d = r.diffs(Eigen::Index(n), 1);
    EXPECT_NEAR(empirical_influence(fam, F, n), (S - d) / 4.0 - d, 1e-12);
  }
  EXPECT_THROW(loo_oracle(random_samples(1, 2, 1), tiny_arch(2, 50), sched, cfg, spec, queries, 6),
               ParameterError);
}

TEST(Benchmark, BuildAppliesOutputSign) {
  const auto sched = build_linear_schedule(50, 1e-4, 0.02);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  const auto data = random_samples(6, 2, 3);
  SubsetSpec spec;
  spec.count = 3;
  spec.seeds_per_subset = 2;
  const auto bank = train_subsets(data, tiny_arch(2, 50), sched, cfg, spec);
  const auto queries = random_samples(2, 2, 9, 50);
  const auto out = LossSpec::simple({4});
  const auto neg = build_benchmark(bank, queries, out, sched, 3);
  const auto pos = build_benchmark(bank, queries, out, sched, 3, 1.0);
  neg.validate();
  EXPECT_EQ(neg.seeds, 2);
  EXPECT_EQ(neg.query_keys, (std::vector<std::uint64_t>{50, 51}));
  for (std::size_t i = 0; i < neg.F.size(); ++i) EXPECT_EQ(neg.F[i], -pos.F[i]);
  EXPECT_DOUBLE_EQ(pos.at(2, 1, 1), model_output_F(bank.models[2][1].params, queries[1], out, sched, 3));
}
