#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dtrak/pipeline.hpp"

namespace dtrak::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

inline std::string percent(double v, int decimals = 1) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f%%", decimals, 100.0 * v);
  return buf;
}

namespace detail {

/// Benchmark directory for a score file: explicit, or the lds bank of the score's split.
inline fs::path benchmark_for(const ExperimentConfig& cfg, const std::string& explicit_dir,
                              const fs::path& scores_path) {
  if (!explicit_dir.empty()) return explicit_dir;
  nlohmann::json extra;
  io::load_scores(scores_path, &extra);
  const std::string split = extra.value("split", "");
  if (split.empty()) throw ParameterError("score file has no split; pass --benchmark");
  return pipeline::Layout(cfg).benchmark("lds", split);
}

inline std::vector<std::string> splits_arg(const std::string& s, bool allow_train) {
  if (s == "all") return allow_train ? std::vector<std::string>{"train", "validation", "generation"}
                                     : std::vector<std::string>{"validation", "generation"};
  if (s == "validation" || s == "generation" || (allow_train && s == "train")) return {s};
  throw ParameterError("unknown split '" + s + "'");
}

}  // namespace detail

/// Runs one CLI invocation in-process. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Training-data attribution lab for diffusion models", "dtrak"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Master seed (overrides DTRAK_SEED and the config)");
  app.add_option("--config", config_path, "Experiment config (JSON)");
  app.add_option("--out", out_dir, "Output directory (overrides the config)");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  std::string kind;
  gen->add_option("--kind", kind, "gaussian-mixture or tiny-images");

  auto* train = app.add_subcommand("train", "Train the full model, save checkpoints, generate queries");

  auto* subsets = app.add_subcommand("train-subsets", "Train a subset bank and evaluate its benchmark");
  std::string bank = "lds";
  subsets->add_option("--bank", bank, "lds (evaluation) or retrain (empirical-if / datamodel)");

  auto* feats = app.add_subcommand("features", "Compute projected gradient features");
  std::string feat_loss = "simple", feat_split = "all";
  int feat_epoch = 0;
  feats->add_option("--loss", feat_loss, "Loss functional: simple, elbo, square, avg, p1, p2, pinf, interp:<eta>");
  feats->add_option("--split", feat_split, "train, validation, generation or all");
  feats->add_option("--epoch", feat_epoch, "Checkpoint epoch (default: final)");

  auto* attr = app.add_subcommand("attribute", "Score queries against the training set");
  pipeline::AttributeRequest areq;
  std::string attr_split = "all", similarity = "cos";
  double attr_lambda = 0.0;
  attr->add_option("--method", areq.method, "Attribution method")->required();
  attr->add_option("--loss", areq.loss, "Loss functional for gradient methods");
  attr->add_option("--split", attr_split, "validation, generation or all");
  auto* lambda_opt = attr->add_option("--lambda", attr_lambda, "Single ridge value (default: the config grid)");
  attr->add_option("--similarity", similarity, "dot or cos (raw-pixel, embed-sim)");

  auto* lds_cmd = app.add_subcommand("lds", "Linear datamodeling score of a score file");
  std::string scores_path, bench_dir;
  lds_cmd->add_option("--scores", scores_path, "Score MatrixFile")->required();
  lds_cmd->add_option("--benchmark", bench_dir, "Benchmark directory (default: from the score's split)");

  auto* boot = app.add_subcommand("bootstrap", "Bootstrap the LDS over subsets");
  int resamples = -1;
  boot->add_option("--scores", scores_path, "Score MatrixFile")->required();
  boot->add_option("--benchmark", bench_dir, "Benchmark directory");
  boot->add_option("--resamples", resamples, "Resample count (default: config)");

  auto* cf = app.add_subcommand("counterfactual", "Remove top-K attributed samples, retrain, compare generations");
  std::string cf_method = "d-trak", cf_loss;
  double cf_lambda = 0.0;
  int cf_k = -1;
  cf->add_option("--method", cf_method, "Attribution method whose generation scores drive removal");
  cf->add_option("--loss", cf_loss, "Loss of the method's features");
  auto* cf_lambda_opt = cf->add_option("--lambda", cf_lambda, "Lambda of the score file (kernel methods)");
  cf->add_option("--K", cf_k, "Removals per query (default: config)");

  auto* loo = app.add_subcommand("loo-oracle", "Leave-one-out retraining oracle");
  std::string loo_split = "validation";
  loo->add_option("--split", loo_split, "Query split");

  auto* report = app.add_subcommand("report", "LDS and bootstrap table over all score files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    auto cfg = load_config(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path),
                           seed_opt->count() ? std::optional<std::uint64_t>(seed) : std::nullopt,
                           out_dir.empty() ? std::nullopt : std::optional<std::string>(out_dir));

    if (*gen) {
      if (!kind.empty()) cfg.data.kind = kind;
      if (cfg.data.kind != "gaussian-mixture" && cfg.data.kind != "tiny-images") {
        throw ParameterError("--kind must be gaussian-mixture or tiny-images");
      }
      const auto d = pipeline::gen_data(cfg);
      out << "wrote " << d.samples.size() << " samples (dim " << d.dim << ") to "
          << pipeline::Layout(cfg).dataset().string() << "\n";
    } else if (*train) {
      const auto cks = pipeline::run_train(cfg);
      out << "trained " << cks.size() << " checkpoint(s); final digest " << model_digest(cks.back().params) << "\n";
    } else if (*subsets) {
      const auto b = pipeline::run_train_subsets(cfg, bank);
      out << "trained bank '" << bank << "': " << b.masks.size() << " subsets x "
          << (b.models.empty() ? 0 : b.models.front().size()) << " seeds\n";
    } else if (*feats) {
      const auto spec = pipeline::feature_spec(cfg, feat_loss);
      const int epoch = feat_epoch > 0 ? feat_epoch : cfg.train.epochs;
      const pipeline::FeatureRequest fr{spec, epoch, cfg.projector_seed(), "trak"};
      for (const auto& split : detail::splits_arg(feat_split, true)) {
        if (split == "generation" && !fs::exists(pipeline::Layout(cfg).generated())) continue;
        const auto fm = pipeline::ensure_features(cfg, fr, split);
        out << split << ": " << fm.rows() << " x " << fm.k() << " (" << loss_name(spec) << ")\n";
      }
    } else if (*attr) {
      if (lambda_opt->count()) areq.lambda = attr_lambda;
      if (similarity == "dot") areq.similarity = SimilarityMode::kDot;
      else if (similarity == "cos" || similarity == "cosine") areq.similarity = SimilarityMode::kCosine;
      else throw ParameterError("--similarity must be dot or cos");
      auto splits = detail::splits_arg(attr_split, false);
      for (const auto& split : splits) {
        if (split == "generation" && !fs::exists(pipeline::Layout(cfg).generated())) continue;
        if (split == "validation" && cfg.data.n_validation == 0) continue;
        if (areq.method == "journey-trak" && split != "generation") {
          if (attr_split == "all") continue;
        }
        areq.split = split;
        for (const auto& p : pipeline::run_attribute(cfg, areq)) out << "wrote " << p.string() << "\n";
      }
    } else if (*lds_cmd || *boot) {
      const auto dir = detail::benchmark_for(cfg, bench_dir, scores_path);
      const auto bench = io::load_benchmark(dir);
      const auto s = io::load_scores(scores_path);
      if (s.meta.query_keys != bench.query_keys) throw ValidationError("score queries differ from benchmark queries");
      if (*lds_cmd) {
        const auto r = lds(bench, s.scores);
        for (std::size_t q = 0; q < r.per_query.size(); ++q) {
          out << "query " << bench.query_keys[q] << ": "
              << (r.per_query[q] ? percent(*r.per_query[q]) : std::string("undefined (excluded)")) << "\n";
        }
        out << "mean LDS " << percent(r.mean) << " over " << r.valid << " queries (" << r.excluded
            << " excluded)\n";
      } else {
        const int R = resamples > 0 ? resamples : cfg.bootstrap_resamples;
        const auto b = bootstrap_lds(bench, s.scores, R, cfg.bootstrap_seed());
        out << "bootstrap LDS " << percent(b.mean, 2) << " +/- " << percent(b.std, 2) << " (95% CI "
            << percent(b.ci_low(), 2) << " .. " << percent(b.ci_high(), 2) << ", " << R << " resamples)\n";
      }
    } else if (*cf) {
      const std::string loss = cf_loss.empty() ? pipeline::default_loss(cf_method) : cf_loss;
      std::optional<TimestepPlan> plan;
      std::optional<double> lambda;
      if (pipeline::is_gradient_method(cf_method)) plan = cfg.feature_plan();
      if (pipeline::is_kernel_method(cf_method)) lambda = cf_lambda_opt->count() ? cf_lambda : cfg.lambdas.front();
      std::string loss_label;
      if (pipeline::is_gradient_method(cf_method)) loss_label = loss_name(pipeline::feature_spec(cfg, loss));
      else if (cf_method == "raw-pixel" || cf_method == "embed-sim") loss_label = "none";
      else loss_label = loss_name(cfg.output_spec());
      const auto path = pipeline::Layout(cfg).scores_dir("generation") /
                        pipeline::score_file_name(cf_method, loss_label, plan, lambda);
      if (!fs::exists(path)) throw ValidationError("no score file " + path.string() + "; run attribute first");
      const auto s = io::load_scores(path);
      const std::size_t K = static_cast<std::size_t>(cf_k >= 0 ? cf_k : cfg.counterfactual.K);
      const auto summary = pipeline::run_counterfactual(cfg, s.scores, cf_method, K);
      pipeline::write_counterfactual(cfg, summary);
      char buf[256];
      std::snprintf(buf, sizeof buf,
                    "median l2: %s %.4f, random %.4f; median cosine: %s %.4f, random %.4f\n", cf_method.c_str(),
                    summary.targeted_median_l2, summary.random_median_l2, cf_method.c_str(),
                    summary.targeted_median_cosine, summary.random_median_cosine);
      out << buf;
    } else if (*loo) {
      const auto s = pipeline::run_loo_oracle(cfg, loo_split);
      out << "wrote leave-one-out differences " << s.scores.rows() << " x " << s.scores.cols() << "\n";
    } else if (*report) {
      const auto rows = pipeline::collect_report(cfg);
      pipeline::write_report(cfg, rows);
      out << pipeline::report_csv(rows);
    }
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed metadata: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace dtrak::cli
