// awe: command-line driver for training, affinity construction, retraining,
// evaluation and prediction with affinity weighted embedding models.
//
// Exit codes: 0 success, 2 usage error, 3 artifact/validation error, 4 I/O error.

#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "awe/awe.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitArtifact = 3;
constexpr int kExitIo = 4;

struct TrainFlags {
  awe::TrainConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--dim", cfg.dim, "embedding dimension")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--lr", cfg.learning_rate, "learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--margin", cfg.margin, "hinge margin")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--epochs", cfg.epochs, "training epochs")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--max-neg", cfg.max_negative_trials, "negative draws per step (0: Dy-1)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    app->add_option("--max-norm", cfg.max_norm, "column norm bound C")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--init-scale", cfg.init_scale, "initialization scale")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--seed", cfg.seed, "random seed")->capture_default_str();
  }
};

struct KernelFlags {
  awe::KernelConfig cfg;
  std::string agg = "sum";
  std::string mode = "embedded-x";
  int exclude_self = 1;
  void add(CLI::App* app) {
    app->add_option("--lambda-x", cfg.lambda_x, "input kernel width (0: median heuristic)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    app->add_option("--lambda-y", cfg.lambda_y, "label kernel width for embedded-xy (0: median heuristic)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    app->add_option("--n", cfg.n, "neighbors kept per query")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--agg", agg, "neighbor aggregation")->check(CLI::IsMember({"sum", "max"}))->capture_default_str();
    app->add_option("--mode", mode, "kernel space")
        ->check(CLI::IsMember({"embedded-x", "embedded-xy", "raw"}))
        ->capture_default_str();
    app->add_option("--bias", cfg.bias, "constant added to G")->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_option("--exclude-self", exclude_self, "skip the query itself among training neighbors")
        ->check(CLI::IsMember({0, 1}))
        ->capture_default_str();
  }
  awe::KernelConfig get() const {
    auto c = cfg;
    c.agg = *awe::parse_aggregation(agg);
    c.mode = *awe::parse_kernel_mode(mode);
    c.exclude_self = exclude_self != 0;
    return c;
  }
};

struct Loaded {
  awe::EmbeddingModel model;
  std::string hash;
};

Loaded load_model_with_hash(const std::string& path) {
  const auto bytes = awe::text::read_file(path);
  return {awe::parse_model(bytes), awe::content_hash(bytes)};
}

/// Reads a dataset sized to the model: files without a #dims header take the
/// model's dimensions; files with one must fit inside them.
awe::Dataset load_for_model(const std::string& path, const awe::EmbeddingModel& model, bool labels_optional) {
  awe::ParseOptions opts{awe::Dims{model.dx(), model.dy()}, labels_optional};
  auto d = awe::load_dataset(path, opts);
  if (d.x_dim > model.dx() || d.y_dim > model.dy())
    throw awe::ArtifactError(path + " has dimensions beyond the model's");
  d.x_dim = model.dx();
  d.y_dim = model.dy();
  return d;
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  for (auto part : awe::text::split(s, ',')) {
    auto k = awe::text::parse_uint<std::size_t>(part);
    if (!k || *k == 0) throw CLI::ValidationError("--k", "expected comma-separated positive integers");
    ks.push_back(*k);
  }
  return ks;
}

struct ScoringFlags {
  std::string model_path, train_path, cache_model_path, cache_path;
  std::size_t knn_n = 20;
  double lambda_x = 0.0;
  std::size_t workers = 1;

  void add(CLI::App* app) {
    app->add_option("--model", model_path, "model file (linear, affinity, knn-embed)");
    app->add_option("--train", train_path, "training set (affinity, knn-raw, knn-embed)");
    app->add_option("--cache-model", cache_model_path, "model the affinity cache was built from");
    app->add_option("--cache-config-from", cache_path, "training affinity cache (kernel settings and fingerprint)");
    app->add_option("--n", knn_n, "neighbors for the kNN baselines")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--lambda-x", lambda_x, "kNN kernel width (0: median heuristic)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    app->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  }

  static void require(const std::string& value, const char* flag, const std::string& algo) {
    if (value.empty()) throw CLI::RequiredError(std::string(flag) + " (needed by --algo " + algo + ")");
  }
};

using ScoreFn = std::function<std::vector<double>(const awe::Example&)>;

/// Holds whatever a scorer needs alive and hands out the per-example scorer.
struct ScorerContext {
  std::optional<awe::EmbeddingModel> model;
  std::optional<awe::Dataset> train;
  std::optional<awe::TestWeighter> weighter;
  std::optional<awe::KnnClassifier> knn;
};

/// Queries are loaded by the caller once the model (if any) is known; for
/// algorithms without a model the training set fixes the dimensions.
ScoreFn make_scorer(const std::string& algo, const ScoringFlags& f, ScorerContext& ctx,
                    const std::function<awe::Dataset(const awe::EmbeddingModel*)>& load_queries,
                    awe::Dataset& queries) {
  if (algo == "linear") {
    ScoringFlags::require(f.model_path, "--model", algo);
    ctx.model = awe::load_model(f.model_path);
    queries = load_queries(&*ctx.model);
    return [&ctx](const awe::Example& ex) { return awe::score_all_linear(*ctx.model, ex.features); };
  }
  if (algo == "affinity") {
    ScoringFlags::require(f.model_path, "--model", algo);
    ScoringFlags::require(f.train_path, "--train", algo);
    ScoringFlags::require(f.cache_model_path, "--cache-model", algo);
    ScoringFlags::require(f.cache_path, "--cache-config-from", algo);
    ctx.model = awe::load_model(f.model_path);
    auto base = load_model_with_hash(f.cache_model_path);
    if (base.model.dx() != ctx.model->dx() || base.model.dy() != ctx.model->dy())
      throw awe::ArtifactError("--model and --cache-model dimensions differ");
    ctx.train = load_for_model(f.train_path, *ctx.model, false);
    queries = load_queries(&*ctx.model);
    const auto cache = awe::load_cache(f.cache_path);
    ctx.weighter.emplace(std::move(base.model), base.hash, cache, *ctx.train, queries, f.workers);
    return [&ctx](const awe::Example& ex) {
      const auto ux = awe::embed_x(*ctx.model, ex.features);
      std::vector<double> s(ctx.model->dy());
      for (std::size_t j = 0; j < s.size(); ++j) {
        const auto l = static_cast<awe::LabelId>(j);
        s[j] = (*ctx.weighter)(ex, l) * awe::score_embedded(*ctx.model, ux, l);
      }
      return s;
    };
  }
  if (algo == "knn-raw" || algo == "knn-embed") {
    ScoringFlags::require(f.train_path, "--train", algo);
    const awe::EmbeddingModel* mp = nullptr;
    if (algo == "knn-embed") {
      ScoringFlags::require(f.model_path, "--model", algo);
      ctx.model = awe::load_model(f.model_path);
      mp = &*ctx.model;
      ctx.train = load_for_model(f.train_path, *mp, false);
    } else {
      ctx.train = awe::load_dataset(f.train_path);
    }
    queries = load_queries(mp);
    if (!mp) {
      if (queries.x_dim > ctx.train->x_dim || queries.y_dim > ctx.train->y_dim)
        throw awe::ArtifactError("query dimensions exceed the training set's");
    }
    ctx.knn.emplace(*ctx.train, f.knn_n, f.lambda_x, mp);
    return [&ctx](const awe::Example& ex) { return ctx.knn->scores(ex.features); };
  }
  throw CLI::ValidationError("--algo", "unknown algorithm " + algo);
}

awe::Dataset load_queries_for(const std::string& path, const awe::EmbeddingModel* model, const ScorerContext& ctx,
                              bool labels_optional) {
  if (model) return load_for_model(path, *model, labels_optional);
  awe::ParseOptions opts{awe::Dims{ctx.train->x_dim, ctx.train->y_dim}, labels_optional};
  return awe::load_dataset(path, opts);
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Affinity weighted embedding models"};
  app.set_config("--config", "", "key=value config file; flags override it");
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train the standard embedding model");
  std::string train_data, train_out;
  TrainFlags train_flags;
  train->add_option("--data", train_data, "training set")->required();
  train->add_option("--out", train_out, "model file to write")->required();
  train_flags.add(train);

  // affinity
  auto* affinity = app.add_subcommand("affinity", "build the sparsified affinity cache from a model");
  std::string aff_model, aff_train, aff_queries, aff_out;
  KernelFlags aff_kernel;
  std::size_t aff_workers = 1;
  affinity->add_option("--model", aff_model, "model the embedding comes from")->required();
  affinity->add_option("--train", aff_train, "training set (neighbor pool)")->required();
  affinity->add_option("--queries", aff_queries, "query set (default: the training set)");
  affinity->add_option("--out", aff_out, "cache file to write")->required();
  affinity->add_option("--workers", aff_workers, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  aff_kernel.add(affinity);

  // retrain
  auto* retrain = app.add_subcommand("retrain", "train the weighted model over an affinity cache");
  std::string rt_cache, rt_base, rt_data, rt_out;
  bool rt_warm = false;
  TrainFlags rt_flags;
  retrain->add_option("--cache", rt_cache, "affinity cache built on the training set")->required();
  retrain->add_option("--base", rt_base, "model the cache was built from")->required();
  retrain->add_option("--data", rt_data, "training set")->required();
  retrain->add_option("--out", rt_out, "model file to write")->required();
  retrain->add_flag("--warm-start", rt_warm, "start from the base model instead of a fresh initialization");
  rt_flags.add(retrain);

  // eval
  auto* eval = app.add_subcommand("eval", "precision@k on a labeled test set");
  std::string ev_test, ev_algos = "linear", ev_ks = "1,3", ev_format = "table";
  ScoringFlags ev_flags;
  eval->add_option("--test", ev_test, "test set")->required();
  eval->add_option("--algo", ev_algos, "comma list of linear, affinity, knn-raw, knn-embed")->capture_default_str();
  eval->add_option("--k", ev_ks, "comma list of k for prec@k")->capture_default_str();
  eval->add_option("--format", ev_format, "report layout")->check(CLI::IsMember({"table", "tsv"}))->capture_default_str();
  ev_flags.add(eval);

  // predict
  auto* predict = app.add_subcommand("predict", "top-ranked labels per query");
  std::string pr_data, pr_algo = "linear";
  std::size_t pr_top = 1;
  ScoringFlags pr_flags;
  predict->add_option("--data", pr_data, "queries (labels optional)")->required();
  predict->add_option("--algo", pr_algo, "linear, affinity, knn-raw or knn-embed")
      ->check(CLI::IsMember({"linear", "affinity", "knn-raw", "knn-embed"}))
      ->capture_default_str();
  predict->add_option("--top", pr_top, "labels per query")->check(CLI::PositiveNumber)->capture_default_str();
  pr_flags.add(predict);

  // pipeline
  auto* pipeline = app.add_subcommand("pipeline", "train, build G, retrain; repeated for --rounds");
  std::string pl_data, pl_dir;
  awe::PipelineConfig pl_cfg;
  TrainFlags pl_train;
  KernelFlags pl_kernel;
  pipeline->add_option("--data", pl_data, "training set")->required();
  pipeline->add_option("--out-dir", pl_dir, "artifact directory")->required();
  pipeline->add_option("--rounds", pl_cfg.rounds, "1 = base model only")->check(CLI::PositiveNumber)->capture_default_str();
  pipeline->add_flag("--warm-start", pl_cfg.warm_start, "start each round from the previous model");
  pipeline->add_option("--workers", pl_cfg.workers, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  pl_train.add(pipeline);
  pl_kernel.add(pipeline);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train) {
      const auto data = awe::load_dataset(train_data);
      const auto model = awe::train_warp(data, train_flags.cfg);
      awe::save_model(model, train_out);
      std::printf("loss %s\n", awe::text::format_real(awe::mean_hinge_loss(model, data, train_flags.cfg.margin)).c_str());
    } else if (*affinity) {
      const auto model = awe::load_model(aff_model);
      const auto data = load_for_model(aff_train, model, false);
      const auto queries = aff_queries.empty() ? data : load_for_model(aff_queries, model, true);
      const auto cache = awe::build_affinity_cache(model, data, queries, aff_kernel.get(), aff_workers);
      awe::save_cache(cache, aff_out);
      std::fprintf(stderr, "affinity: %zu queries, lambda_x %s\n", cache.lists.size(),
                   awe::text::format_real(cache.config.lambda_x).c_str());
    } else if (*retrain) {
      const auto base = load_model_with_hash(rt_base);
      const auto cache = awe::load_cache(rt_cache);
      awe::verify_fingerprint(cache, base.hash);
      const auto data = load_for_model(rt_data, base.model, false);
      awe::CacheWeighter weighter(cache, data, &base.model);
      const auto model = awe::train_warp(data, rt_flags.cfg, weighter, rt_warm ? &base.model : nullptr);
      awe::save_model(model, rt_out);
      std::printf("loss %s\n",
                  awe::text::format_real(awe::mean_hinge_loss(model, data, rt_flags.cfg.margin, weighter)).c_str());
    } else if (*eval) {
      const auto ks = parse_ks(ev_ks);
      awe::EvalReport report;
      for (auto algo_sv : awe::text::split(ev_algos, ',')) {
        const std::string algo(algo_sv);
        ScorerContext ctx;
        awe::Dataset test;
        auto scorer = make_scorer(
            algo, ev_flags, ctx,
            [&](const awe::EmbeddingModel* m) { return load_queries_for(ev_test, m, ctx, true); }, test);
        report.push_back(awe::evaluate(algo, scorer, test, ks, ev_flags.workers));
      }
      std::fputs((ev_format == "tsv" ? awe::format_report_tsv(report) : awe::format_report_table(report)).c_str(),
                 stdout);
    } else if (*predict) {
      ScorerContext ctx;
      awe::Dataset queries;
      auto scorer = make_scorer(
          pr_algo, pr_flags, ctx,
          [&](const awe::EmbeddingModel* m) { return load_queries_for(pr_data, m, ctx, true); }, queries);
      std::string out;
      for (const auto& q : queries.examples) {
        const auto scores = scorer(q);
        const auto ranked = awe::rank_labels(std::span<const double>(scores));
        out += std::to_string(q.id);
        for (std::size_t r = 0; r < std::min(pr_top, ranked.size()); ++r)
          out += '\t' + std::to_string(ranked[r]) + ':' + awe::text::format_real(scores[ranked[r]]);
        out += '\n';
      }
      std::fputs(out.c_str(), stdout);
    } else if (*pipeline) {
      const auto data = awe::load_dataset(pl_data);
      pl_cfg.train = {pl_train.cfg};
      pl_cfg.kernel = pl_kernel.get();
      pl_cfg.artifact_dir = pl_dir;
      const auto art = awe::run_pipeline(data, pl_cfg);
      for (const auto& m : art.models) std::printf("model %zu %s\n", m.round, (art.dir / m.path).string().c_str());
      for (const auto& c : art.caches) std::printf("cache %zu %s\n", c.round, (art.dir / c.path).string().c_str());
    }
  } catch (const CLI::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const awe::IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kExitIo;
  } catch (const awe::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitArtifact;
  } catch (const awe::ArtifactError& e) {
    std::fprintf(stderr, "artifact error: %s\n", e.what());
    return kExitArtifact;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitArtifact;
  }
  return 0;
}
