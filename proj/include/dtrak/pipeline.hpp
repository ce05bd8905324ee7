#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtrak/attribution.hpp"
#include "dtrak/config.hpp"
#include "dtrak/evaluation.hpp"
#include "dtrak/io.hpp"
#include "dtrak/sampler.hpp"

namespace dtrak::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr std::uint64_t kValidationKeyBase = 1ULL << 32;
inline constexpr std::uint64_t kGenerationKeyBase = 2ULL << 32;

/// Where each artifact of an experiment lives under cfg.out.
struct Layout {
  fs::path root;

  explicit Layout(const ExperimentConfig& cfg) : root(cfg.out) {}

  fs::path dataset() const { return root / "data" / "dataset.json"; }
  fs::path generated() const { return root / "data" / "generated.json"; }
  fs::path checkpoint(int epoch) const {
    return root / "models" / "full" / ("epoch_" + std::to_string(epoch) + ".dtrk");
  }
  fs::path bank_dir(const std::string& bank) const { return root / "banks" / bank; }
  fs::path bank_model(const std::string& bank, std::size_t m, std::size_t s) const {
    return bank_dir(bank) / "models" / ("m" + std::to_string(m) + "_s" + std::to_string(s) + ".dtrk");
  }
  fs::path benchmark(const std::string& bank, const std::string& split) const {
    return bank_dir(bank) / ("benchmark_" + split);
  }
  fs::path features(const std::string& tag, const std::string& split) const {
    return root / "features" / tag / (split + ".dtrk");
  }
  fs::path scores_dir(const std::string& split) const { return root / "scores" / split; }
  fs::path reports() const { return root / "reports"; }
};

inline std::string format_lambda(double lambda) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", lambda);
  return buf;
}

// ------------------------------------------------------------------ gen-data

inline Sample make_sample(const ExperimentConfig& cfg, std::uint64_t key) {
  auto rng = SeededStream::keyed(cfg.data_seed(), Purpose::kData, {key});
  const int dim = cfg.data_dim();
  Vec x(dim);
  const int label = static_cast<int>(rng.next_below(2));
  if (cfg.data.kind == "tiny-images") {
    // Two classes of side x side images: a bright row or a bright column.
    const int side = cfg.data.image_side;
    const int pos = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(side)));
    for (int r = 0; r < side; ++r) {
      for (int c = 0; c < side; ++c) {
        const bool on = label == 0 ? r == pos : c == pos;
        x[r * side + c] = (on ? 1.0 : -1.0) + cfg.data.noise_std * rng.next_gaussian();
      }
    }
  } else {
    const double shift = (label == 0 ? -0.5 : 0.5) * cfg.data.separation / std::sqrt(static_cast<double>(dim));
    for (int i = 0; i < dim; ++i) x[i] = shift + cfg.data.noise_std * rng.next_gaussian();
  }
  return {key, x};
}

inline io::Dataset make_dataset(const ExperimentConfig& cfg) {
  if (cfg.data.n_train < 2) throw ParameterError("data.n_train must be >= 2");
  if (cfg.data.n_validation < 0) throw ParameterError("data.n_validation must be >= 0");
  if (cfg.data_dim() < 1) throw ParameterError("data dimension must be >= 1");
  io::Dataset d;
  d.name = cfg.data.kind;
  d.dim = cfg.data_dim();
  for (int i = 0; i < cfg.data.n_train; ++i) {
    d.splits["train"].push_back(d.samples.size());
    d.samples.push_back(make_sample(cfg, static_cast<std::uint64_t>(i)));
  }
  d.splits["validation"];
  for (int i = 0; i < cfg.data.n_validation; ++i) {
    d.splits["validation"].push_back(d.samples.size());
    d.samples.push_back(make_sample(cfg, kValidationKeyBase + static_cast<std::uint64_t>(i)));
  }
  return d;
}

inline io::Dataset gen_data(const ExperimentConfig& cfg) {
  auto d = make_dataset(cfg);
  io::save_dataset(Layout(cfg).dataset(), d);
  return d;
}

// --------------------------------------------------------------------- inputs

inline io::Dataset load_data(const ExperimentConfig& cfg) {
  const auto path = Layout(cfg).dataset();
  if (!fs::exists(path)) throw ValidationError("no dataset at " + path.string() + "; run gen-data first");
  auto d = io::load_dataset(path);
  if (d.dim != cfg.data_dim()) throw ValidationError("dataset dimension differs from config");
  return d;
}

inline SampleSet train_set(const ExperimentConfig& cfg) { return load_data(cfg).split("train"); }

/// Query samples of a split: "validation", "generation", or "train".
inline SampleSet query_set(const ExperimentConfig& cfg, const std::string& split) {
  if (split == "generation") {
    const auto path = Layout(cfg).generated();
    if (!fs::exists(path)) throw ValidationError("no generated samples; run train first");
    return io::load_dataset(path).split("generation");
  }
  if (split != "validation" && split != "train") throw ParameterError("unknown split '" + split + "'");
  return load_data(cfg).split(split);
}

inline json provenance(const ExperimentConfig& cfg) {
  return {{"config_digest", config_digest(cfg)}};
}

// ---------------------------------------------------------------------- train

inline std::vector<int> checkpoint_epochs(const ExperimentConfig& cfg) {
  std::set<int> e(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end());
  e.insert(cfg.train.epochs);
  return {e.begin(), e.end()};
}

inline Checkpoint load_full_checkpoint(const ExperimentConfig& cfg, std::optional<int> epoch = std::nullopt) {
  const auto path = Layout(cfg).checkpoint(epoch.value_or(cfg.train.epochs));
  if (!fs::exists(path)) throw ValidationError("no checkpoint at " + path.string() + "; run train first");
  return io::load_checkpoint(path);
}

/// Generated samples from the final model; sample i uses cfg.generation_seed(i).
inline SampleSet generate(const ExperimentConfig& cfg, const ModelParams& model,
                          std::vector<std::vector<TrajectoryStep>>* trajectories = nullptr) {
  const auto sched = cfg.make_schedule();
  SampleSet out(static_cast<std::size_t>(cfg.generation.count));
  if (trajectories) trajectories->assign(out.size(), {});
  parallel_for(out.size(), [&](std::size_t i) {
    out[i].key = kGenerationKeyBase + i;
    out[i].x = ddim_sample(model, sched, cfg.generation.ddim_steps, cfg.generation_seed(static_cast<int>(i)),
                           cfg.data_dim(), trajectories ? &(*trajectories)[i] : nullptr);
  });
  return out;
}

inline std::vector<Checkpoint> run_train(const ExperimentConfig& cfg) {
  const auto data = train_set(cfg);
  const auto sched = cfg.make_schedule();
  auto cks = train(data, cfg.make_arch(), sched, cfg.make_train_config(), checkpoint_epochs(cfg));
  const Layout layout(cfg);
  for (const auto& c : cks) io::save_checkpoint(layout.checkpoint(c.epoch), c);
  io::Dataset gen;
  gen.name = "generation";
  gen.dim = cfg.data_dim();
  gen.samples = generate(cfg, cks.back().params);
  for (std::size_t i = 0; i < gen.samples.size(); ++i) gen.splits["generation"].push_back(i);
  io::save_dataset(layout.generated(), gen);
  return cks;
}

// -------------------------------------------------------------- subset banks

/// "lds" is the evaluation benchmark; "retrain" feeds empirical-if and datamodel.
inline SubsetSpec bank_spec(const ExperimentConfig& cfg, const std::string& bank) {
  if (bank == "lds") return {cfg.benchmark.fraction, cfg.benchmark.subsets, cfg.benchmark.seeds, cfg.subset_seed()};
  if (bank == "retrain") {
    return {cfg.retrain_bank.fraction, cfg.retrain_bank.subsets, 1, cfg.retrain_subset_seed()};
  }
  throw ParameterError("unknown subset bank '" + bank + "' (expected lds or retrain)");
}

inline std::vector<std::string> available_query_splits(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  if (cfg.data.n_validation > 0) out.push_back("validation");
  if (fs::exists(Layout(cfg).generated()) && cfg.generation.count > 0) out.push_back("generation");
  return out;
}

inline LDSBenchmark build_split_benchmark(const ExperimentConfig& cfg, const SubsetModelBank& bank,
                                          const std::string& split) {
  return build_benchmark(bank, query_set(cfg, split), cfg.output_spec(), cfg.make_schedule(),
                         cfg.benchmark_noise_seed(), cfg.benchmark.output_sign);
}

inline SubsetModelBank run_train_subsets(const ExperimentConfig& cfg, const std::string& bank_name) {
  const auto spec = bank_spec(cfg, bank_name);
  const auto data = train_set(cfg);
  const auto sched = cfg.make_schedule();
  auto bank = train_subsets(data, cfg.make_arch(), sched, cfg.make_train_config(), spec);
  const Layout layout(cfg);
  for (std::size_t m = 0; m < bank.models.size(); ++m) {
    for (std::size_t s = 0; s < bank.models[m].size(); ++s) {
      io::save_checkpoint(layout.bank_model(bank_name, m, s), bank.models[m][s]);
    }
  }
  json extra = provenance(cfg);
  extra["bank"] = bank_name;
  extra["dataset_digest"] = dataset_digest(data);
  for (const auto& split : available_query_splits(cfg)) {
    io::save_benchmark(layout.benchmark(bank_name, split), build_split_benchmark(cfg, bank, split), extra);
  }
  return bank;
}

inline LDSBenchmark load_bank_benchmark(const ExperimentConfig& cfg, const std::string& bank,
                                        const std::string& split) {
  const auto dir = Layout(cfg).benchmark(bank, split);
  if (!fs::exists(dir / "F.dtrk")) {
    throw ValidationError("no " + bank + " benchmark for split '" + split + "'; run train-subsets first");
  }
  return io::load_benchmark(dir);
}

// -------------------------------------------------------------------- features

/// Gradient-feature request: which loss, which checkpoint, which projector.
struct FeatureRequest {
  LossSpec spec;
  int epoch = 0;
  std::uint64_t projector_seed = 0;
  /// Distinguishes projector families (one per checkpoint for TracInCP / GAS).
  std::string family = "trak";
};

inline LossSpec feature_spec(const ExperimentConfig& cfg, const std::string& loss) {
  LossSpec s = parse_loss_kind(loss);
  s.plan = cfg.feature_plan();
  s.noises_per_timestep = cfg.features.noises_per_timestep;
  validate(s);
  return s;
}

inline std::string plan_tag(const TimestepPlan& p) {
  return "t" + std::to_string(p.count) + (p.strategy == TimestepStrategy::kUniform ? "u" : "c");
}

inline std::string feature_tag(const FeatureRequest& r) {
  std::string loss = loss_name(r.spec);
  std::replace(loss.begin(), loss.end(), ':', '-');
  return r.family + "/" + loss + "_" + plan_tag(r.spec.plan) + "_n" + std::to_string(r.spec.noises_per_timestep) +
         "/epoch_" + std::to_string(r.epoch);
}

inline FeatureRequest trak_request(const ExperimentConfig& cfg, const std::string& loss) {
  return {feature_spec(cfg, loss), cfg.train.epochs, cfg.projector_seed(), "trak"};
}

/// Computes (or reuses a matching cached) feature matrix for one split.
inline GradientFeatureMatrix ensure_features(const ExperimentConfig& cfg, const FeatureRequest& req,
                                             const std::string& split) {
  const auto path = Layout(cfg).features(feature_tag(req), split);
  const auto ck = load_full_checkpoint(cfg, req.epoch);
  const auto samples = query_set(cfg, split);
  if (fs::exists(path)) {
    auto fm = io::load_features(path);
    std::vector<std::uint64_t> keys;
    for (const auto& s : samples) keys.push_back(s.key);
    if (fm.meta.model_digest == model_digest(ck.params) && fm.meta.loss == loss_name(req.spec) &&
        fm.meta.plan.count == req.spec.plan.count && fm.meta.plan.strategy == req.spec.plan.strategy &&
        fm.meta.noises_per_timestep == req.spec.noises_per_timestep &&
        fm.meta.noise_seed == cfg.feature_noise_seed() && fm.meta.projector_seed == req.projector_seed &&
        fm.meta.k == cfg.features.k && fm.meta.sample_keys == keys) {
      return fm;
    }
  }
  const Projector proj(req.projector_seed, ck.params.dim(), cfg.features.k);
  auto fm = build_feature_matrix(ck.params, samples, req.spec, cfg.make_schedule(), proj,
                                 cfg.feature_noise_seed(), split);
  json extra = provenance(cfg);
  extra["epoch"] = req.epoch;
  extra["family"] = req.family;
  io::save_features(path, fm, cfg.features.dtype, extra);
  // Reload so callers always see the stored precision.
  return io::load_features(path);
}

// ------------------------------------------------------------------- attribute

struct AttributeRequest {
  std::string method = "trak";
  /// Empty means the method's default loss.
  std::string loss;
  std::string split = "validation";
  /// Empty means every lambda of the config grid.
  std::optional<double> lambda;
  SimilarityMode similarity = SimilarityMode::kCosine;
};

inline bool is_kernel_method(const std::string& m) {
  return m == "trak" || m == "d-trak" || m == "relative-if" || m == "renorm-if" || m == "journey-trak";
}

inline bool is_gradient_method(const std::string& m) {
  return is_kernel_method(m) || m == "grad-dot" || m == "grad-cos" || m == "tracincp" || m == "gas";
}

inline std::string default_loss(const std::string& method) {
  if (method == "d-trak") return "square";
  if (is_gradient_method(method)) return "simple";
  return "";
}

inline std::string score_file_name(const std::string& method, const std::string& loss,
                                   const std::optional<TimestepPlan>& plan, const std::optional<double>& lambda) {
  std::string name = method;
  if (!loss.empty()) {
    std::string l = loss;
    std::replace(l.begin(), l.end(), ':', '-');
    name += "__" + l;
  }
  if (plan) name += "__" + plan_tag(*plan);
  if (lambda) name += "__lam" + format_lambda(*lambda);
  return name + ".dtrk";
}

namespace detail {

inline Mat raw_matrix(const SampleSet& s) {
  Mat m(static_cast<Eigen::Index>(s.size()), s.empty() ? 0 : s.front().x.size());
  for (std::size_t i = 0; i < s.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = s[i].x.transpose();
  return m;
}

inline std::vector<std::uint64_t> keys_of(const SampleSet& s) {
  std::vector<std::uint64_t> k;
  for (const auto& x : s) k.push_back(x.key);
  return k;
}

}  // namespace detail

/// Scores every query of a split against the training set and writes one
/// MatrixFile per lambda (or one file for lambda-free methods).
inline std::vector<fs::path> run_attribute(const ExperimentConfig& cfg, const AttributeRequest& req) {
  const auto& names = method_names();
  if (std::find(names.begin(), names.end(), req.method) == names.end()) {
    throw ParameterError("unknown method '" + req.method + "'");
  }
  const std::string loss = req.loss.empty() ? default_loss(req.method) : req.loss;
  if (req.method == "trak" && loss != "simple") throw ParameterError("trak uses the simple loss; use d-trak for others");
  if (!is_gradient_method(req.method) && !req.loss.empty()) {
    throw ParameterError("method '" + req.method + "' takes no --loss");
  }
  if (req.method == "journey-trak" && req.split != "generation") {
    throw ParameterError("journey-trak needs sampling trajectories; use --split generation");
  }
  const Layout layout(cfg);
  const auto train = train_set(cfg);
  const auto queries = query_set(cfg, req.split);
  if (queries.empty()) throw ValidationError("split '" + req.split + "' is empty");

  AttributionScoreMatrix out;
  out.meta.method = req.method;
  out.meta.query_keys = detail::keys_of(queries);
  out.meta.train_keys = detail::keys_of(train);
  json extra = provenance(cfg);
  extra["split"] = req.split;
  extra["dataset_digest"] = dataset_digest(train);

  std::optional<TimestepPlan> plan;
  std::vector<fs::path> written;
  auto emit = [&](const Mat& scores, std::optional<double> lambda) {
    out.scores = scores;
    out.meta.lambda = lambda.value_or(0.0);
    const auto path = layout.scores_dir(req.split) / score_file_name(req.method, out.meta.loss, plan, lambda);
    io::save_scores(path, out, io::DType::kF64, extra);
    written.push_back(path);
  };

  if (is_kernel_method(req.method)) {
    const auto fr = trak_request(cfg, loss);
    plan = fr.spec.plan;
    out.meta.loss = loss_name(fr.spec);
    out.meta.k = cfg.features.k;
    const auto train_fm = ensure_features(cfg, fr, "train");
    out.meta.model_digests = {train_fm.meta.model_digest};
    extra["feature_noise_seed"] = cfg.feature_noise_seed();
    extra["projector_seed"] = fr.projector_seed;
    Mat journey;
    std::vector<Mat> journey_steps;
    if (req.method == "journey-trak") {
      // Journey TRAK always differentiates the simple loss at trajectory states.
      const auto ck = load_full_checkpoint(cfg);
      std::vector<std::vector<TrajectoryStep>> traj;
      generate(cfg, ck.params, &traj);
      const Projector proj(fr.projector_seed, ck.params.dim(), cfg.features.k);
      journey_steps.resize(traj.size());
      parallel_for(traj.size(), [&](std::size_t q) {
        journey_steps[q] = journey_features(ck.params, traj[q], proj, cfg.feature_noise_seed(),
                                            queries[q].key, cfg.journey_resamples);
      });
      extra["journey_resamples"] = cfg.journey_resamples;
    }
    Mat query_phi;
    if (req.method != "journey-trak") query_phi = ensure_features(cfg, fr, req.split).phi;
    const std::vector<double> lambdas = req.lambda ? std::vector<double>{*req.lambda} : cfg.lambdas;
    for (double lambda : lambdas) {
      const KernelPreconditioner pre(train_fm.phi, {lambda, cfg.solver});
      Mat s;
      if (req.method == "trak" || req.method == "d-trak") s = trak_scores(query_phi, train_fm.phi, pre);
      else if (req.method == "relative-if") s = relative_if_scores(query_phi, train_fm.phi, pre);
      else if (req.method == "renorm-if") s = renorm_if_scores(query_phi, train_fm.phi, pre);
      else {
        s.resize(static_cast<Eigen::Index>(queries.size()), train_fm.phi.rows());
        for (std::size_t q = 0; q < queries.size(); ++q) {
          s.row(static_cast<Eigen::Index>(q)) =
              journey_trak_from_features(journey_steps[q], train_fm.phi, pre).transpose();
        }
      }
      extra["solver"] = solver_name(cfg.solver);
      emit(s, lambda);
    }
    return written;
  }

  if (req.method == "grad-dot" || req.method == "grad-cos") {
    const auto fr = trak_request(cfg, loss);
    plan = fr.spec.plan;
    out.meta.loss = loss_name(fr.spec);
    out.meta.k = cfg.features.k;
    const auto t = ensure_features(cfg, fr, "train");
    const auto q = ensure_features(cfg, fr, req.split);
    out.meta.model_digests = {t.meta.model_digest};
    emit(similarity_scores(q.phi, t.phi, req.method == "grad-dot" ? SimilarityMode::kDot : SimilarityMode::kCosine),
         std::nullopt);
    return written;
  }

  if (req.method == "tracincp" || req.method == "gas") {
    const auto spec = feature_spec(cfg, loss);
    plan = spec.plan;
    out.meta.loss = loss_name(spec);
    out.meta.k = cfg.features.k;
    std::vector<CheckpointFeatures> per;
    for (int epoch : checkpoint_epochs(cfg)) {
      const FeatureRequest fr{spec, epoch,
                              derive_key(cfg.projector_seed(), Purpose::kProjection, {static_cast<std::uint64_t>(epoch)}),
                              "checkpoints"};
      const auto t = ensure_features(cfg, fr, "train");
      per.push_back({ensure_features(cfg, fr, req.split).phi, t.phi});
      out.meta.model_digests.push_back(t.meta.model_digest);
    }
    extra["checkpoint_epochs"] = checkpoint_epochs(cfg);
    emit(req.method == "tracincp" ? tracincp_scores(per) : gas_scores(per), std::nullopt);
    return written;
  }

  if (req.method == "raw-pixel" || req.method == "embed-sim") {
    out.meta.loss = "none";
    Mat qm = detail::raw_matrix(queries), tm = detail::raw_matrix(train);
    if (req.method == "embed-sim") {
      const RandomProjectionEmbedder emb(cfg.embedder_seed(), cfg.data_dim(), cfg.counterfactual.embed_dim);
      Mat qe(qm.rows(), cfg.counterfactual.embed_dim), te(tm.rows(), cfg.counterfactual.embed_dim);
      for (Eigen::Index i = 0; i < qm.rows(); ++i) qe.row(i) = emb(qm.row(i).transpose()).transpose();
      for (Eigen::Index i = 0; i < tm.rows(); ++i) te.row(i) = emb(tm.row(i).transpose()).transpose();
      qm = qe;
      tm = te;
      extra["embedder_seed"] = cfg.embedder_seed();
    }
    extra["similarity"] = req.similarity == SimilarityMode::kDot ? "dot" : "cosine";
    emit(similarity_scores(qm, tm, req.similarity), std::nullopt);
    return written;
  }

  // empirical-if and datamodel read the retraining bank's F values on this split.
  const auto bench = load_bank_benchmark(cfg, "retrain", req.split);
  if (bench.query_keys != out.meta.query_keys) throw ValidationError("retrain bank queries differ from split");
  if (bench.train_size() != train.size()) throw ValidationError("retrain bank masks differ from training set");
  out.meta.loss = loss_name(bench.output_spec);
  Mat s(static_cast<Eigen::Index>(queries.size()), static_cast<Eigen::Index>(train.size()));
  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (req.method == "empirical-if") {
      std::vector<std::vector<double>> F(bench.subsets());
      for (std::size_t m = 0; m < bench.subsets(); ++m) {
        for (int sd = 0; sd < bench.seeds; ++sd) F[m].push_back(bench.at(m, static_cast<std::size_t>(sd), q));
      }
      for (std::size_t n = 0; n < train.size(); ++n) {
        s(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(n)) = empirical_influence(bench.masks, F, n);
      }
    } else {
      s.row(static_cast<Eigen::Index>(q)) =
          datamodel_fit(bench.masks, bench.seed_mean(q), cfg.retrain_bank.datamodel_ridge).transpose();
    }
  }
  extra["bank"] = "retrain";
  if (req.method == "datamodel") extra["ridge"] = cfg.retrain_bank.datamodel_ridge;
  emit(s, std::nullopt);
  return written;
}

// ----------------------------------------------------------------------- report

struct ReportRow {
  std::string method;
  std::string loss;
  std::string split;
  std::string timesteps;
  std::string lambda;
  double lds_point = 0.0;
  double lds_mean = 0.0;
  double lds_std = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t valid = 0;
  std::size_t excluded = 0;
  int resamples = 0;
  std::string file;
};

inline ReportRow evaluate_scores(const LDSBenchmark& bench, const AttributionScoreMatrix& s,
                                 int resamples, std::uint64_t bootstrap_seed) {
  if (s.meta.query_keys != bench.query_keys) throw ValidationError("score queries differ from benchmark queries");
  const auto point = lds(bench, s.scores);
  const auto boot = bootstrap_lds(bench, s.scores, resamples, bootstrap_seed);
  ReportRow r;
  r.method = s.meta.method;
  r.loss = s.meta.loss;
  r.lds_point = point.mean;
  r.lds_mean = boot.mean;
  r.lds_std = boot.std;
  r.ci_low = boot.ci_low();
  r.ci_high = boot.ci_high();
  r.valid = point.valid;
  r.excluded = point.excluded;
  r.resamples = resamples;
  return r;
}

inline std::string csv_header() {
  return "method,loss,split,timesteps,lambda,lds_point,lds_mean,lds_std,ci_low,ci_high,valid,excluded,resamples";
}

inline std::string pct(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

/// LDS values are percentages with two decimals.
inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << csv_header() << "\n";
  for (const auto& r : rows) {
    os << r.method << "," << r.loss << "," << r.split << "," << r.timesteps << "," << r.lambda << ","
       << pct(r.lds_point) << "," << pct(r.lds_mean) << "," << pct(r.lds_std) << "," << pct(r.ci_low) << ","
       << pct(r.ci_high) << "," << r.valid << "," << r.excluded << "," << r.resamples << "\n";
  }
  return os.str();
}

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json report_json(const std::vector<ReportRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    arr.push_back({{"method", r.method},
                   {"loss", r.loss},
                   {"split", r.split},
                   {"timesteps", r.timesteps},
                   {"lambda", r.lambda},
                   {"lds_point", finite_or_null(r.lds_point)},
                   {"lds_mean", finite_or_null(r.lds_mean)},
                   {"lds_std", finite_or_null(r.lds_std)},
                   {"ci_low", finite_or_null(r.ci_low)},
                   {"ci_high", finite_or_null(r.ci_high)},
                   {"valid", r.valid},
                   {"excluded", r.excluded},
                   {"resamples", r.resamples},
                   {"file", r.file}});
  }
  return {{"rows", arr}, {"exclusion_rule", "queries with constant F or g_tau across subsets are excluded"}};
}

/// Best-lambda LDS of one method per split; NaN if absent.
inline double best_lds(const std::vector<ReportRow>& rows, const std::string& method, const std::string& split) {
  double best = std::nan("");
  for (const auto& r : rows) {
    if (r.method == method && r.split == split && std::isfinite(r.lds_point) &&
        (!std::isfinite(best) || r.lds_point > best)) {
      best = r.lds_point;
    }
  }
  return best;
}

/// Scores every saved score file against the matching lds benchmark.
inline std::vector<ReportRow> collect_report(const ExperimentConfig& cfg) {
  const Layout layout(cfg);
  std::vector<ReportRow> rows;
  for (const std::string split : {"validation", "generation"}) {
    const auto dir = layout.scores_dir(split);
    if (!fs::exists(dir) || !fs::exists(layout.benchmark("lds", split) / "F.dtrk")) continue;
    const auto bench = load_bank_benchmark(cfg, "lds", split);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".dtrk") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      json extra;
      const auto s = io::load_scores(f, &extra);
      auto r = evaluate_scores(bench, s, cfg.bootstrap_resamples, cfg.bootstrap_seed());
      r.split = split;
      r.file = f.filename().string();
      r.lambda = is_kernel_method(r.method) ? format_lambda(s.meta.lambda) : "";
      const auto p1 = r.file.find("__t");
      if (p1 != std::string::npos) r.timesteps = r.file.substr(p1 + 3, r.file.find("__", p1 + 3) - p1 - 3);
      rows.push_back(r);
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    const bool va = a.split == "validation", vb = b.split == "validation";
    if (va != vb) return va;
    if (a.method != b.method) return a.method < b.method;
    if (a.loss != b.loss) return a.loss < b.loss;
    if (a.timesteps != b.timesteps) return a.timesteps < b.timesteps;
    const double la = a.lambda.empty() ? 0.0 : std::stod(a.lambda), lb = b.lambda.empty() ? 0.0 : std::stod(b.lambda);
    return la < lb;
  });
  return rows;
}

inline void write_report(const ExperimentConfig& cfg, const std::vector<ReportRow>& rows) {
  const Layout layout(cfg);
  json j = report_json(rows);
  j["provenance"] = provenance(cfg);
  json gaps = json::object();
  for (const std::string split : {"validation", "generation"}) {
    const double g = best_lds(rows, "d-trak", split) - best_lds(rows, "trak", split);
    gaps[split] = finite_or_null(g);
  }
  j["d_trak_minus_trak_best"] = gaps;
  io::write_atomic(layout.reports() / "lds.csv", report_csv(rows));
  io::write_atomic(layout.reports() / "lds.json", j.dump(2) + "\n");
}

// -------------------------------------------------------------- counterfactual

struct CounterfactualSummary {
  std::string method;
  std::size_t K = 0;
  std::vector<CounterfactualReport> per_query;
  double targeted_median_l2 = 0.0;
  double random_median_l2 = 0.0;
  double targeted_median_cosine = 0.0;
  double random_median_cosine = 0.0;
};

/// For each of the first gen_seeds generated queries: remove its top-K
/// training samples (and K random ones), retrain, and regenerate with the
/// query's own seed.
inline CounterfactualSummary run_counterfactual(const ExperimentConfig& cfg, const Mat& generation_scores,
                                                const std::string& label, std::size_t K) {
  const auto train = train_set(cfg);
  const auto ck = load_full_checkpoint(cfg);
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(cfg.counterfactual.gen_seeds),
                                           static_cast<std::size_t>(generation_scores.rows()));
  if (count == 0) throw ParameterError("counterfactual needs at least one generated query");
  const RandomProjectionEmbedder emb(cfg.embedder_seed(), cfg.data_dim(), cfg.counterfactual.embed_dim);
  CounterfactualSetup setup{cfg.make_arch(), cfg.make_schedule(), cfg.make_train_config(), cfg.generation.ddim_steps,
                            0, label};
  CounterfactualSummary out;
  out.method = label;
  out.K = K;
  out.per_query.resize(count);
  parallel_for(count, [&](std::size_t q) {
    CounterfactualSetup s = setup;
    s.removal_seed = derive_key(cfg.removal_seed(), Purpose::kRemoval, {q});
    out.per_query[q] = counterfactual_run(train, generation_scores.row(static_cast<Eigen::Index>(q)).transpose(), K, s,
                                          {cfg.generation_seed(static_cast<int>(q))}, emb, &ck.params);
  });
  std::vector<double> tl2, rl2, tc, rc;
  for (const auto& r : out.per_query) {
    tl2.insert(tl2.end(), r.targeted.l2.begin(), r.targeted.l2.end());
    rl2.insert(rl2.end(), r.random.l2.begin(), r.random.l2.end());
    tc.insert(tc.end(), r.targeted.cosine.begin(), r.targeted.cosine.end());
    rc.insert(rc.end(), r.random.cosine.begin(), r.random.cosine.end());
  }
  out.targeted_median_l2 = median(tl2);
  out.random_median_l2 = median(rl2);
  out.targeted_median_cosine = median(tc);
  out.random_median_cosine = median(rc);
  return out;
}

inline void write_counterfactual(const ExperimentConfig& cfg, const CounterfactualSummary& s) {
  std::ostringstream csv;
  csv << "query,arm,l2,cosine\n";
  json per = json::array();
  char buf[96];
  for (std::size_t q = 0; q < s.per_query.size(); ++q) {
    for (const auto* arm : {&s.per_query[q].targeted, &s.per_query[q].random}) {
      std::snprintf(buf, sizeof buf, "%zu,%s,%.2f,%.2f\n", q, arm->label.c_str(), arm->l2.front(), arm->cosine.front());
      csv << buf;
      per.push_back({{"query", q}, {"arm", arm->label}, {"l2", arm->l2.front()}, {"cosine", arm->cosine.front()},
                     {"removed", arm->removed}});
    }
  }
  const json j = {{"method", s.method},
                  {"K", s.K},
                  {"targeted_median_l2", s.targeted_median_l2},
                  {"random_median_l2", s.random_median_l2},
                  {"targeted_median_cosine", s.targeted_median_cosine},
                  {"random_median_cosine", s.random_median_cosine},
                  {"per_query", per},
                  {"provenance", provenance(cfg)}};
  const auto dir = Layout(cfg).reports();
  io::write_atomic(dir / ("counterfactual_" + s.method + ".csv"), csv.str());
  io::write_atomic(dir / ("counterfactual_" + s.method + ".json"), j.dump(2) + "\n");
}

// ------------------------------------------------------------------- loo-oracle

/// Saves scores(q, n) = F(q; without n) - F(q; full) as a score matrix.
inline AttributionScoreMatrix run_loo_oracle(const ExperimentConfig& cfg, const std::string& split) {
  const auto train = train_set(cfg);
  const auto queries = query_set(cfg, split);
  const auto r = loo_oracle(train, cfg.make_arch(), cfg.make_schedule(), cfg.make_train_config(), cfg.output_spec(),
                            queries, cfg.benchmark_noise_seed());
  AttributionScoreMatrix s;
  s.scores = r.diffs.transpose();
  s.meta.method = "loo-oracle";
  s.meta.loss = loss_name(cfg.output_spec());
  s.meta.query_keys = detail::keys_of(queries);
  s.meta.train_keys = detail::keys_of(train);
  json extra = provenance(cfg);
  extra["split"] = split;
  extra["convention"] = "F(without n) - F(full)";
  io::save_scores(Layout(cfg).reports() / ("loo_" + split + ".dtrk"), s, io::DType::kF64, extra);
  return s;
}

}  // namespace dtrak::pipeline
