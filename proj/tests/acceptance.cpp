// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "awe/awe.hpp"
#include "support.hpp"
#include "synthetic.hpp"

using namespace awe;
namespace fs = std::filesystem;
using awe::testing::Dense;

namespace {

constexpr double kWeightTol = 1e-12;    // kNN weights, reductions, constant-G variants
constexpr double kGradTol = 1e-4;       // relative error, analytic vs finite differences
constexpr double kFdStep = 1e-5;
constexpr double kLowRankTol = 1e-10;
constexpr double kRuntimeLimit = 600.0;  // seconds for the ordering experiment

struct Outcome {
  bool pass;
  std::string detail;
};

char buf[512];

template <typename... A>
std::string fmt(const char* f, A... a) {
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("awe_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

// ---------------------------------------------------------------------------

Outcome ordering() {
  const auto start = std::chrono::steady_clock::now();
  const awe::testing::SyntheticConfig sc;
  int wins = 0;
  double lin_sum = 0, knn_sum = 0, aff_sum = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto [train, test] = awe::testing::make_synthetic(sc, seed);
    PipelineConfig pc;
    pc.rounds = 2;
    pc.train[0].dim = 32;
    pc.train[0].seed = seed;
    pc.artifact_dir = scratch("ordering").string();
    const auto art = run_pipeline(train, pc);
    const auto m0 = load_model(art.model_path(0).string());
    const auto m1 = load_model(art.model_path(1).string());
    const auto g = make_test_weighter(art, 1, train, test);
    const KnnClassifier knn(train, 20, 0.0);

    const double lin =
        evaluate("linear", [&](const Example& e) { return score_all_linear(m0, e.features); }, test, {1}).at(1);
    const double aff = evaluate(
                           "affinity",
                           [&](const Example& e) {
                             std::vector<double> s(train.y_dim);
                             for (LabelId l = 0; l < s.size(); ++l) s[l] = score_affinity(m1, g(e, l), e.features, l);
                             return s;
                           },
                           test, {1})
                           .at(1);
    const double raw = evaluate("knn-raw", [&](const Example& e) { return knn.scores(e.features); }, test, {1}).at(1);
    wins += aff >= lin;
    lin_sum += lin;
    aff_sum += aff;
    knn_sum += raw;
    per_seed += fmt(" [%.3f %.3f %.3f]", aff, lin, raw);
    fs::remove_all(pc.artifact_dir);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool pass = wins >= 3 && lin_sum >= knn_sum && secs < kRuntimeLimit;
  return {pass, fmt("affinity>=linear in %d/5; mean affinity %.3f linear %.3f knn-raw %.3f; %.1fs;", wins, aff_sum / 5,
                    lin_sum / 5, knn_sum / 5, secs) +
                    " per seed [aff lin knn]" + per_seed};
}

// ---------------------------------------------------------------------------

Outcome knn_oracle() {
  std::mt19937_64 rng(2);
  std::size_t fixtures = 0, queries = 0, mismatches = 0;
  double worst = 0.0;
  for (std::size_t m : {1u, 2u, 7u, 50u, 200u, 500u}) {
    for (int rep = 0; rep < 3; ++rep, ++fixtures) {
      const bool ints = rep == 2;  // integer values force exact distance ties
      const auto train = awe::testing::random_dataset(m, 10, 6, rng, 4, 2, ints);
      const auto model = awe::testing::random_model(4, 10, 6, rng);
      for (int q = 0; q < 10; ++q, ++queries) {
        const auto x = awe::testing::random_sparse(10, 1 + rng() % 4, rng, ints);
        const double lambda = 0.05 + 0.5 * static_cast<double>(rng() % 8);
        const std::size_t n = 1 + rng() % (m + 3);
        std::optional<ExampleId> exclude;
        if (rng() % 2) exclude.emplace(rng() % m);

        for (const bool raw : {false, true}) {
          KernelConfig cfg;
          cfg.lambda_x = lambda;
          cfg.n = n;
          cfg.mode = raw ? KernelMode::Raw : KernelMode::EmbeddedX;
          const auto got = knn_embed(model, train, x, cfg, exclude);
          const auto want = awe::testing::oracle_knn(raw ? nullptr : &model, train, x, lambda, n, raw, exclude);
          if (got.neighbors.size() != want.size()) {
            ++mismatches;
            continue;
          }
          for (std::size_t i = 0; i < want.size(); ++i) {
            const double err = std::abs(got.neighbors[i].weight - want[i].weight);
            worst = std::max(worst, err);
            if (got.neighbors[i].id != want[i].id || err > kWeightTol) ++mismatches;
          }
          const auto ranked = knn_predict(train, x, raw ? nullptr : &model, n, lambda);
          if (ranked != awe::testing::oracle_knn_predict(raw ? nullptr : &model, train, x, lambda, n, raw))
            ++mismatches;
        }
      }
    }
  }
  return {mismatches == 0, fmt("%zu fixtures, %zu queries x {embedded, raw}; %zu mismatches; max weight error %.3g",
                               fixtures, queries, mismatches, worst)};
}

// ---------------------------------------------------------------------------

double triplet_loss(const EmbeddingModel& m, const SparseVector& x, LabelId pos, LabelId neg, double g_pos,
                    double g_neg, double scale, double margin) {
  const auto ux = awe::testing::oracle_embed(m, x);
  double fp = 0, fn = 0;
  for (std::size_t k = 0; k < m.d; ++k) {
    fp += ux[k] * m.V.col(pos)[k];
    fn += ux[k] * m.V.col(neg)[k];
  }
  return scale * std::max(0.0, margin + g_neg * fn - g_pos * fp);
}

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    diff += (a[k] - b[k]) * (a[k] - b[k]);
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nb));
  return denom == 0 ? 0 : std::sqrt(diff) / denom;
}

Outcome gradient_check() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> gdist(0.2, 2.0);
  const double margin = 1.0;
  int checked = 0, failed = 0;
  double worst = 0.0;
  while (checked < 100) {
    auto m = awe::testing::random_model(6, 15, 8, rng);
    const auto x = awe::testing::random_sparse(15, 1 + rng() % 5, rng);
    const LabelId pos = static_cast<LabelId>(rng() % 8);
    const LabelId neg = static_cast<LabelId>((pos + 1 + rng() % 7) % 8);
    const bool weighted = checked % 2 == 1;
    const double gp = weighted ? gdist(rng) : 1.0, gn = weighted ? gdist(rng) : 1.0;
    const double scale = rank_weight(1 + rng() % 7);
    // Strictly inside the hinge: well away from the kink for +-h perturbations.
    if (triplet_loss(m, x, pos, neg, gp, gn, 1.0, margin) < 0.05) continue;
    const auto grad = warp_gradient(m, x, pos, neg, gp, gn, scale);
    auto fd_column = [&](std::span<double> col) {
      std::vector<double> g(col.size());
      for (std::size_t k = 0; k < col.size(); ++k) {
        const double keep = col[k];
        col[k] = keep + kFdStep;
        const double up = triplet_loss(m, x, pos, neg, gp, gn, scale, margin);
        col[k] = keep - kFdStep;
        const double down = triplet_loss(m, x, pos, neg, gp, gn, scale, margin);
        col[k] = keep;
        g[k] = (up - down) / (2 * kFdStep);
      }
      return g;
    };
    std::vector<double> errs;
    std::size_t t = 0;
    for (const auto& e : x) errs.push_back(rel_error(grad.u[t++], fd_column(m.U.col(e.index))));
    errs.push_back(rel_error(grad.v_pos, fd_column(m.V.col(pos))));
    errs.push_back(rel_error(grad.v_neg, fd_column(m.V.col(neg))));
    bool ok = true;
    for (double e : errs) {
      worst = std::max(worst, e);
      ok = ok && e < kGradTol;
    }
    failed += !ok;
    ++checked;
  }
  return {failed == 0, fmt("%d violating triplets, %d failed; max relative error %.3g", checked, failed, worst)};
}

// ---------------------------------------------------------------------------

Outcome constant_g() {
  std::mt19937_64 rng(4);
  bool bytes_ok = true;
  for (int rep = 0; rep < 3; ++rep) {
    const auto train = awe::testing::random_dataset(150, 20, 7, rng, 5, 2);
    TrainConfig cfg;
    cfg.dim = 5;
    cfg.epochs = 4;
    cfg.seed = 10 + rep;
    const auto base = serialize_model(train_warp(train, cfg));
    const auto ones = serialize_model(train_warp(train, cfg, [](const Example&, LabelId) { return 1.0; }));
    bytes_ok = bytes_ok && base == ones;
  }
  double worst = 0.0;
  const auto m = awe::testing::random_model(6, 30, 9, rng);
  for (int t = 0; t < 1000; ++t) {
    const auto x = awe::testing::random_sparse(30, 1 + rng() % 8, rng);
    const LabelId l = static_cast<LabelId>(rng() % 9);
    worst = std::max(worst, std::abs(score_affinity(m, 1.0, x, l) - score_linear(m, x, l)));
  }
  return {bytes_ok && worst <= kWeightTol,
          fmt("unit-weight retrain byte-identical: %s; max |score_affinity(G=1) - score_linear| %.3g over 1000 pairs",
              bytes_ok ? "yes" : "no", worst)};
}

// ---------------------------------------------------------------------------

Outcome g_algebra() {
  std::mt19937_64 rng(5);
  const auto train = awe::testing::random_dataset(120, 12, 8, rng, 4, 3);
  const auto model = awe::testing::random_model(4, 12, 8, rng);
  std::size_t floor_bad = 0, order_bad = 0, sparse_bad = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto x = awe::testing::random_sparse(12, 1 + rng() % 4, rng);
    const LabelId l = static_cast<LabelId>(rng() % 8);
    KernelConfig cfg;
    cfg.lambda_x = 0.1 + static_cast<double>(rng() % 20) / 10.0;
    cfg.n = 1 + rng() % 30;
    const auto list = knn_embed(model, train, x, cfg);

    KernelConfig biased = cfg;
    biased.bias = static_cast<double>(rng() % 5) / 4.0;
    for (const auto agg : {Aggregation::Sum, Aggregation::Max}) {
      biased.agg = agg;
      if (!(affinity_G(list, train, l, biased) >= biased.bias)) ++floor_bad;
    }

    KernelConfig sum = cfg, max = cfg;
    max.agg = Aggregation::Max;
    const double gs = affinity_G(list, train, l, sum), gm = affinity_G(list, train, l, max);
    if (!(gm <= gs && gs <= static_cast<double>(cfg.n) * gm)) ++order_bad;

    KernelConfig full = cfg;
    full.n = train.m();
    const double gf = affinity_G(knn_embed(model, train, x, full), train, l, full);
    if (!(gs <= gf)) ++sparse_bad;
  }
  return {floor_bad + order_bad + sparse_bad == 0,
          fmt("1000 pairs; bias floor violations %zu; max<=sum<=n*max violations %zu; top-n>full violations %zu",
              floor_bad, order_bad, sparse_bad)};
}

// ---------------------------------------------------------------------------

Outcome variants() {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst_one = 0.0, worst_one_oracle = 0.0, worst_lr = 0.0, worst_lr_oracle = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t dx = 6 + rng() % 10, dy = 3 + rng() % 6, dg = 1 + rng() % 4;
    const auto m = awe::testing::random_model(4, dx, dy, rng);
    const auto ones = ExplicitPairWeights::constant(dx, dy, 1.0);
    const awe::testing::DenseMatrix dense_ones(dx, Dense(dy, 1.0));

    LowRankPairWeights lr{ColumnMatrix(dg, dx), ColumnMatrix(dg, dy)};
    for (std::size_t i = 0; i < dx; ++i)
      for (auto& v : lr.x_side.col(i)) v = normal(rng);
    for (std::size_t j = 0; j < dy; ++j)
      for (auto& v : lr.y_side.col(j)) v = normal(rng);
    const auto materialized = lr.materialize();
    awe::testing::DenseMatrix dense_lr(dx, Dense(dy, 0.0));
    for (std::size_t i = 0; i < dx; ++i)
      for (std::size_t j = 0; j < dy; ++j)
        for (std::size_t k = 0; k < dg; ++k) dense_lr[i][j] += lr.x_side.col(i)[k] * lr.y_side.col(j)[k];

    for (int t = 0; t < 25; ++t) {
      const auto x = awe::testing::random_sparse(dx, 1 + rng() % 5, rng);
      const LabelId l = static_cast<LabelId>(rng() % dy);
      const auto y_one = awe::testing::sv({{l, 1.0}});
      worst_one = std::max(worst_one, std::abs(score_featurepair(m, ones, x, y_one) - score_linear(m, x, l)));
      worst_one_oracle = std::max(worst_one_oracle, std::abs(score_featurepair(m, ones, x, y_one) -
                                                             awe::testing::oracle_double_sum(m, dense_ones, x, y_one)));
      const auto y = awe::testing::random_sparse(dy, 1 + rng() % 3, rng);
      const double low = score_lowrank(m, lr, x, y);
      worst_lr = std::max(worst_lr, std::abs(low - score_featurepair(m, materialized, x, y)));
      worst_lr_oracle = std::max(worst_lr_oracle, std::abs(low - awe::testing::oracle_double_sum(m, dense_lr, x, y)));
    }
  }
  const bool pass = worst_one <= kWeightTol && worst_one_oracle <= kWeightTol && worst_lr <= kLowRankTol &&
                    worst_lr_oracle <= kLowRankTol;
  return {pass, fmt("G=1 vs linear %.3g, vs double sum %.3g; low-rank vs materialized %.3g, vs double sum %.3g",
                    worst_one, worst_one_oracle, worst_lr, worst_lr_oracle)};
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) files[e.path().filename().string()] = text::read_file(e.path().string());
  return files;
}

Outcome integrity() {
  std::mt19937_64 rng(7);
  const auto train = awe::testing::random_dataset(200, 25, 8, rng, 5, 2);
  PipelineConfig pc;
  pc.rounds = 3;
  pc.train[0].dim = 6;
  pc.train[0].epochs = 4;
  pc.kernel.n = 10;

  std::vector<std::map<std::string, std::string>> runs;
  for (std::size_t workers : {1u, 1u, 4u}) {
    pc.workers = workers;
    pc.artifact_dir = scratch("integrity").string();
    run_pipeline(train, pc);
    runs.push_back(snapshot(pc.artifact_dir));
  }
  const bool rerun_same = runs[0] == runs[1] && runs[0].size() == 6;
  const bool workers_same = runs[0] == runs[2];

  const auto art = load_pipeline(pc.artifact_dir);
  const auto m0 = load_model(art.model_path(0).string());
  const auto cache = load_cache(art.cache_path(1).string());
  bool cache_workers_same = true;
  for (std::size_t w : {2u, 3u, 8u})
    cache_workers_same = cache_workers_same &&
                         serialize_cache(build_affinity_cache(m0, train, train, cache.config, w)) ==
                             text::read_file(art.cache_path(1).string());

  // Fingerprint mismatches: every other model, and every single-value perturbation tried.
  std::size_t rejected = 0, attempts = 0;
  auto rejects = [&](const std::function<void()>& f) {
    ++attempts;
    try {
      f();
    } catch (const ArtifactError&) {
      ++rejected;
    }
  };
  for (std::size_t r = 1; r < art.models.size(); ++r) {
    const auto other = load_model(art.model_path(r).string());
    rejects([&] { verify_fingerprint(cache, content_hash(text::read_file(art.model_path(r).string()))); });
    rejects([&] { TestWeighter(other, model_fingerprint(other), cache, train, train); });
  }
  for (int t = 0; t < 20; ++t) {
    auto tweaked = m0;
    auto col = tweaked.U.col(rng() % tweaked.dx());
    col[rng() % col.size()] += 1e-9;
    rejects([&] { verify_fingerprint(cache, model_fingerprint(tweaked)); });
  }
  const auto original = text::read_file(art.model_path(0).string());
  text::write_file(art.model_path(0).string(), original + " ");
  rejects([&] { load_pipeline(pc.artifact_dir); });
  text::write_file(art.model_path(0).string(), original);
  fs::remove_all(pc.artifact_dir);

  const bool pass = rerun_same && workers_same && cache_workers_same && rejected == attempts;
  return {pass, fmt("rerun identical: %s; workers 1 vs 4 identical: %s; cache workers {1,2,3,8} identical: %s; "
                    "fingerprint mismatches rejected %zu/%zu",
                    rerun_same ? "yes" : "no", workers_same ? "yes" : "no", cache_workers_same ? "yes" : "no",
                    rejected, attempts)};
}

// ---------------------------------------------------------------------------

Outcome round_trips() {
  std::mt19937_64 rng(8);
  std::size_t checked = 0, bad = 0;
  auto check = [&](const std::string& first, const std::string& second) {
    ++checked;
    if (first != second) ++bad;
  };
  for (int rep = 0; rep < 10; ++rep) {
    auto data = awe::testing::random_dataset(1 + rng() % 60, 15, 6, rng, 5, 3);
    const auto d1 = write_dataset(data);
    check(d1, write_dataset(parse_dataset(d1)));

    const auto model = awe::testing::random_model(1 + rng() % 5, 15, 6, rng);
    const auto m1 = serialize_model(model);
    check(m1, serialize_model(parse_model(m1)));

    KernelConfig cfg;
    cfg.n = 1 + rng() % 10;
    cfg.agg = rep % 2 ? Aggregation::Max : Aggregation::Sum;
    cfg.mode = static_cast<KernelMode>(rep % 3);
    cfg.bias = rep % 4 == 0 ? 0.125 : 0.0;
    const auto c1 = serialize_cache(build_affinity_cache(model, data, data, cfg));
    check(c1, serialize_cache(parse_cache(c1)));
  }
  std::size_t manifests = 0;
  for (bool warm : {false, true}) {
    PipelineConfig pc;
    pc.rounds = 2;
    pc.warm_start = warm;
    pc.train[0].dim = 3;
    pc.train[0].epochs = 2;
    pc.kernel.n = 4;
    pc.artifact_dir = scratch("manifest").string();
    run_pipeline(awe::testing::random_dataset(40, 10, 4, rng), pc);
    const auto text1 = text::read_file((fs::path(pc.artifact_dir) / "manifest.awe").string());
    check(text1, serialize_manifest(parse_manifest(text1)));
    ++manifests;
    fs::remove_all(pc.artifact_dir);
  }
  return {bad == 0, fmt("%zu write-read-write cycles (datasets, models, caches, %zu manifests); %zu differ", checked,
                        manifests, bad)};
}

} // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"ordering: affinity >= linear (3 of 5 seeds), linear >= raw kNN (mean)", ordering},
      {"kNN matches brute-force oracles", knn_oracle},
      {"WARP gradient matches central differences", gradient_check},
      {"constant G reduces to the base model", constant_g},
      {"G algebra", g_algebra},
      {"feature-pair and low-rank variants", variants},
      {"determinism and artifact integrity", integrity},
      {"format round trips", round_trips},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
