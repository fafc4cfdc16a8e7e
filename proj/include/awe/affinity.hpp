#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "awe/data.hpp"
#include "awe/errors.hpp"
#include "awe/hash.hpp"
#include "awe/linear_embedding.hpp"
#include "awe/parallel.hpp"
#include "awe/text.hpp"

namespace awe {

// ---------------------------------------------------------------------------
// Kernel configuration

enum class KernelMode { EmbeddedX, EmbeddedXY, Raw };
enum class Aggregation { Sum, Max };

inline std::string_view to_string(KernelMode m) {
  switch (m) {
    case KernelMode::EmbeddedX: return "embedded-x";
    case KernelMode::EmbeddedXY: return "embedded-xy";
    case KernelMode::Raw: return "raw";
  }
  return "?";
}

inline std::string_view to_string(Aggregation a) { return a == Aggregation::Sum ? "sum" : "max"; }

inline std::optional<KernelMode> parse_kernel_mode(std::string_view s) {
  if (s == "embedded-x") return KernelMode::EmbeddedX;
  if (s == "embedded-xy") return KernelMode::EmbeddedXY;
  if (s == "raw") return KernelMode::Raw;
  return std::nullopt;
}

inline std::optional<Aggregation> parse_aggregation(std::string_view s) {
  if (s == "sum") return Aggregation::Sum;
  if (s == "max") return Aggregation::Max;
  return std::nullopt;
}

/// Parameters of G(x, y). The label kernel is always the exact-label
/// indicator, except in embedded-xy mode where lambda_y weights the distance
/// between label embeddings. A lambda of 0 means "not chosen yet"; see
/// resolve_kernel_config().
struct KernelConfig {
  double lambda_x = 0.0;
  double lambda_y = 0.0;  // embedded-xy only
  KernelMode mode = KernelMode::EmbeddedX;
  Aggregation agg = Aggregation::Sum;
  std::size_t n = 20;
  double bias = 0.0;
  bool exclude_self = true;

  void validate() const {
    if (n < 1) throw DataError("neighbor count n must be >= 1");
    if (!(lambda_x > 0.0) || !std::isfinite(lambda_x)) throw DataError("lambda_x must be positive");
    if (mode == KernelMode::EmbeddedXY && (!(lambda_y > 0.0) || !std::isfinite(lambda_y)))
      throw DataError("lambda_y must be positive in embedded-xy mode");
    if (!(bias >= 0.0) || !std::isfinite(bias)) throw DataError("bias must be nonnegative");
  }

  friend bool operator==(const KernelConfig&, const KernelConfig&) = default;
};

/// exp(-lambda_x * ||u_q - u_i||^2)
inline double kernel_weight(std::span<const double> u_q, std::span<const double> u_i, double lambda_x) {
  if (u_q.size() != u_i.size()) throw std::invalid_argument("kernel_weight: length mismatch");
  return std::exp(-lambda_x * squared_distance(u_q, u_i));
}

/// 1 / median squared distance over `pairs` random distinct pairs; falls back
/// to 1 when fewer than two points exist or the median is zero.
template <typename DistanceFn>
double median_heuristic_lambda(std::size_t count, DistanceFn&& dist, std::uint64_t seed,
                               std::size_t pairs = 1000) {
  if (count < 2) return 1.0;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, count - 1);
  std::vector<double> d2;
  d2.reserve(pairs);
  while (d2.size() < pairs) {
    const auto a = pick(rng), b = pick(rng);
    if (a != b) d2.push_back(dist(a, b));
  }
  std::sort(d2.begin(), d2.end());
  const double median = pairs % 2 ? d2[pairs / 2] : 0.5 * (d2[pairs / 2 - 1] + d2[pairs / 2]);
  return median > 0.0 && std::isfinite(median) ? 1.0 / median : 1.0;
}

// ---------------------------------------------------------------------------
// Exact nearest neighbors

struct Neighbor {
  ExampleId id = 0;
  double weight = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Top-n training examples for one query: weights descending, ties by
/// ascending id.
struct NeighborList {
  ExampleId query_id = 0;
  std::vector<Neighbor> neighbors;

  friend bool operator==(const NeighborList&, const NeighborList&) = default;
};

/// Training points in the space the kernel measures distance in: rows of
/// U x for the embedded modes, raw sparse features for mode raw. Built once
/// and shared read-only across query workers.
class NeighborIndex {
public:
  NeighborIndex(const EmbeddingModel& model, const Dataset& train, KernelMode mode)
      : model_(&model), train_(&train), raw_(mode == KernelMode::Raw) {
    if (train.empty()) throw DataError("empty training set");
    if (train.x_dim > model.dx() || train.y_dim > model.dy())
      throw ArtifactError("model dimensions do not cover the training set");
    if (!raw_) {
      points_.reserve(train.m());
      for (const auto& ex : train.examples) points_.push_back(embed_x(model, ex.features));
    }
  }

  /// Raw feature space, no model involved.
  explicit NeighborIndex(const Dataset& train) : model_(nullptr), train_(&train), raw_(true) {
    if (train.empty()) throw DataError("empty training set");
  }

  std::size_t size() const { return train_->m(); }
  const Dataset& train() const { return *train_; }

  /// Squared distance between training points a and b (by position).
  double point_distance(std::size_t a, std::size_t b) const {
    if (raw_) return squared_distance(train_->examples[a].features, train_->examples[b].features);
    return squared_distance(std::span<const double>(points_[a]), std::span<const double>(points_[b]));
  }

  double median_lambda(std::uint64_t seed) const {
    return median_heuristic_lambda(size(), [&](std::size_t a, std::size_t b) { return point_distance(a, b); }, seed);
  }

  NeighborList query(const SparseVector& x, double lambda_x, std::size_t n,
                     std::optional<ExampleId> exclude, ExampleId query_id) const {
    std::vector<Neighbor> all;
    all.reserve(size());
    std::vector<double> ux;
    if (!raw_) ux = embed_x(*model_, x);
    else if (model_ && x.extent() > model_->dx()) throw DataError("feature index out of range for model");
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& ex = train_->examples[i];
      if (exclude && ex.id == *exclude) continue;
      const double d2 = raw_ ? squared_distance(x, ex.features)
                             : squared_distance(std::span<const double>(ux), std::span<const double>(points_[i]));
      all.push_back({ex.id, std::exp(-lambda_x * d2)});
    }
    const auto keep = std::min(n, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(),
                      [](const Neighbor& a, const Neighbor& b) {
                        return a.weight > b.weight || (a.weight == b.weight && a.id < b.id);
                      });
    all.resize(keep);
    return {query_id, std::move(all)};
  }

private:
  const EmbeddingModel* model_;
  const Dataset* train_;
  bool raw_;
  std::vector<std::vector<double>> points_;
};

/// Fills in lambda_x (and lambda_y for embedded-xy) by the median heuristic
/// when they are unset (<= 0).
inline KernelConfig resolve_kernel_config(const EmbeddingModel& model, const Dataset& train,
                                          KernelConfig cfg, std::uint64_t seed = 0) {
  if (!(cfg.lambda_x > 0.0)) cfg.lambda_x = NeighborIndex(model, train, cfg.mode).median_lambda(seed);
  if (cfg.mode == KernelMode::EmbeddedXY && !(cfg.lambda_y > 0.0)) {
    cfg.lambda_y = median_heuristic_lambda(
        model.dy(),
        [&](std::size_t a, std::size_t b) { return squared_distance(model.V.col(a), model.V.col(b)); },
        seed);
  }
  return cfg;
}

/// Exact top-n neighbors of `query` among `train`. `exclude` drops one
/// training id (the query itself when it is a training example).
inline NeighborList knn_embed(const EmbeddingModel& model, const Dataset& train, const SparseVector& query,
                              const KernelConfig& cfg, std::optional<ExampleId> exclude = std::nullopt,
                              ExampleId query_id = 0) {
  return NeighborIndex(model, train, cfg.mode).query(query, cfg.lambda_x, cfg.n, exclude, query_id);
}

// ---------------------------------------------------------------------------
// Affinity cache (the materialized, sparsified G)

struct AffinityCache {
  KernelConfig config;
  std::string model_fingerprint;
  std::map<ExampleId, NeighborList> lists;

  const NeighborList& at(ExampleId query) const {
    auto it = lists.find(query);
    if (it == lists.end()) throw ArtifactError("no neighbor list for query " + std::to_string(query));
    return it->second;
  }

  friend bool operator==(const AffinityCache&, const AffinityCache&) = default;
};

inline std::string model_fingerprint(const EmbeddingModel& model) { return content_hash(serialize_model(model)); }

/// One neighbor list per query, computed as a parallel map. Queries whose id
/// appears in `train` skip themselves when cfg.exclude_self is set.
inline AffinityCache build_affinity_cache(const EmbeddingModel& model, const Dataset& train,
                                          const Dataset& queries, KernelConfig cfg, std::size_t workers = 1) {
  if (queries.x_dim > model.dx()) throw ArtifactError("query dimension exceeds model dimension");
  NeighborIndex index(model, train, cfg.mode);
  if (!(cfg.lambda_x > 0.0)) cfg.lambda_x = index.median_lambda(0);
  cfg = resolve_kernel_config(model, train, cfg);
  cfg.validate();

  std::unordered_map<ExampleId, bool> in_train;
  if (cfg.exclude_self)
    for (const auto& ex : train.examples) in_train.emplace(ex.id, true);

  auto lists = parallel_map<NeighborList>(queries.m(), workers, [&](std::size_t q) {
    const auto& ex = queries.examples[q];
    std::optional<ExampleId> exclude;
    if (cfg.exclude_self && in_train.count(ex.id)) exclude = ex.id;
    return index.query(ex.features, cfg.lambda_x, cfg.n, exclude, ex.id);
  });

  AffinityCache cache{cfg, model_fingerprint(model), {}};
  for (auto& l : lists) {
    const auto id = l.query_id;
    if (!cache.lists.emplace(id, std::move(l)).second)
      throw DataError("duplicate query id " + std::to_string(id));
  }
  return cache;
}

inline std::string serialize_cache(const AffinityCache& cache) {
  const auto& c = cache.config;
  std::string out = "awe-cache v1\n";
  out += "model " + cache.model_fingerprint + " lambda_x " + text::format_real(c.lambda_x) + " n " +
         std::to_string(c.n) + " agg " + std::string(to_string(c.agg)) + " mode " +
         std::string(to_string(c.mode)) + " bias " + text::format_real(c.bias) + " exclude_self " +
         (c.exclude_self ? "1" : "0");
  if (c.mode == KernelMode::EmbeddedXY) out += " lambda_y " + text::format_real(c.lambda_y);
  out += '\n';
  for (const auto& [id, list] : cache.lists) {
    out += std::to_string(id) + ' ' + std::to_string(list.neighbors.size());
    for (const auto& nb : list.neighbors) out += ' ' + std::to_string(nb.id) + ':' + text::format_real(nb.weight);
    out += '\n';
  }
  return out;
}

inline AffinityCache parse_cache(const std::string& content) {
  std::istringstream in(content);
  std::string line;
  if (!std::getline(in, line) || text::strip_cr(line) != "awe-cache v1")
    throw ArtifactError("not an awe-cache v1 file");
  if (!std::getline(in, line)) throw ArtifactError("cache file truncated");
  auto tok = text::split_ws(text::strip_cr(line));
  static constexpr std::string_view keys[] = {"model", "lambda_x", "n", "agg", "mode", "bias", "exclude_self"};
  if (tok.size() != 14 && tok.size() != 16) throw ArtifactError("malformed cache header");
  for (std::size_t k = 0; k < 7; ++k)
    if (tok[2 * k] != keys[k]) throw ArtifactError("malformed cache header");

  AffinityCache cache;
  cache.model_fingerprint = std::string(tok[1]);
  auto lx = text::parse_real(tok[3]);
  auto n = text::parse_uint<std::size_t>(tok[5]);
  auto agg = parse_aggregation(tok[7]);
  auto mode = parse_kernel_mode(tok[9]);
  auto bias = text::parse_real(tok[11]);
  if (!lx || !n || !agg || !mode || !bias || (tok[13] != "0" && tok[13] != "1"))
    throw ArtifactError("malformed cache header");
  auto& c = cache.config;
  c.lambda_x = *lx, c.n = *n, c.agg = *agg, c.mode = *mode, c.bias = *bias;
  c.exclude_self = tok[13] == "1";
  if ((tok.size() == 16) != (c.mode == KernelMode::EmbeddedXY)) throw ArtifactError("malformed cache header");
  if (tok.size() == 16) {
    auto ly = tok[14] == "lambda_y" ? text::parse_real(tok[15]) : std::nullopt;
    if (!ly) throw ArtifactError("malformed cache header");
    c.lambda_y = *ly;
  }
  try {
    c.validate();
  } catch (const DataError& e) {
    throw ArtifactError(std::string("invalid cache config: ") + e.what());
  }

  std::size_t lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    auto t = text::split_ws(text::strip_cr(line));
    if (t.empty()) continue;
    auto qid = text::parse_uint<ExampleId>(t[0]);
    auto k = t.size() > 1 ? text::parse_uint<std::size_t>(t[1]) : std::nullopt;
    if (!qid || !k || t.size() != 2 + *k || *k > c.n)
      throw ArtifactError("malformed cache line " + std::to_string(lineno));
    NeighborList list{*qid, {}};
    for (std::size_t j = 0; j < *k; ++j) {
      auto colon = t[2 + j].find(':');
      auto id = colon == std::string_view::npos ? std::nullopt : text::parse_uint<ExampleId>(t[2 + j].substr(0, colon));
      auto w = colon == std::string_view::npos ? std::nullopt : text::parse_real(t[2 + j].substr(colon + 1));
      if (!id || !w || !(*w >= 0.0 && *w <= 1.0))
        throw ArtifactError("malformed neighbor on cache line " + std::to_string(lineno));
      list.neighbors.push_back({*id, *w});
    }
    if (!cache.lists.emplace(*qid, std::move(list)).second)
      throw ArtifactError("duplicate query on cache line " + std::to_string(lineno));
  }
  return cache;
}

inline AffinityCache load_cache(const std::string& path) { return parse_cache(text::read_file(path)); }

inline void save_cache(const AffinityCache& cache, const std::string& path) {
  text::write_file(path, serialize_cache(cache));
}

/// Throws unless the cache was built from the model file with this hash.
inline void verify_fingerprint(const AffinityCache& cache, std::string_view model_hash) {
  if (cache.model_fingerprint != model_hash)
    throw ArtifactError("affinity cache fingerprint " + cache.model_fingerprint +
                        " does not match model " + std::string(model_hash));
}

// ---------------------------------------------------------------------------
// Evaluating G

/// G(x, label) from a neighbor list: the sum (or max) of kernel weights of
/// neighbors whose label set contains `label`, plus the bias. In embedded-xy
/// mode every neighbor contributes, scaled by the label-embedding kernel
/// against the sum of its label embeddings; `label_model` supplies V.
class Affinity {
public:
  Affinity(const Dataset& train, KernelConfig cfg, const EmbeddingModel* label_model = nullptr)
      : cfg_(cfg), label_model_(label_model) {
    if (cfg.mode == KernelMode::EmbeddedXY && !label_model)
      throw std::invalid_argument("embedded-xy affinity needs the label embedding");
    for (const auto& ex : train.examples) by_id_.emplace(ex.id, &ex);
    y_dim_ = train.y_dim;
    if (cfg.mode == KernelMode::EmbeddedXY) {
      const std::size_t d = label_model->d;
      for (const auto& ex : train.examples) {
        std::vector<double> vy(d, 0.0);
        for (LabelId l : ex.labels) {
          auto col = label_model->V.col(l);
          for (std::size_t k = 0; k < d; ++k) vy[k] += col[k];
        }
        label_embedding_.emplace(ex.id, std::move(vy));
      }
    }
  }

  const KernelConfig& config() const { return cfg_; }

  double operator()(const NeighborList& list, LabelId label) const {
    if (label >= y_dim_) throw DataError("label out of range");
    double acc = 0.0;
    for (const auto& nb : list.neighbors) {
      double w;
      if (cfg_.mode == KernelMode::EmbeddedXY) {
        w = nb.weight * std::exp(-cfg_.lambda_y * squared_distance(label_model_->V.col(label),
                                                                   std::span<const double>(lookup_embedding(nb.id))));
      } else {
        if (!lookup(nb.id).has_label(label)) continue;
        w = nb.weight;
      }
      acc = cfg_.agg == Aggregation::Sum ? acc + w : std::max(acc, w);
    }
    return acc + cfg_.bias;
  }

private:
  const Example& lookup(ExampleId id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw ArtifactError("neighbor id " + std::to_string(id) + " not in training set");
    return *it->second;
  }
  const std::vector<double>& lookup_embedding(ExampleId id) const {
    auto it = label_embedding_.find(id);
    if (it == label_embedding_.end()) throw ArtifactError("neighbor id " + std::to_string(id) + " not in training set");
    return it->second;
  }

  KernelConfig cfg_;
  const EmbeddingModel* label_model_;
  std::size_t y_dim_ = 0;
  std::unordered_map<ExampleId, const Example*> by_id_;
  std::unordered_map<ExampleId, std::vector<double>> label_embedding_;
};

inline double affinity_G(const NeighborList& list, const Dataset& train, LabelId label, const KernelConfig& cfg,
                         const EmbeddingModel* label_model = nullptr) {
  return Affinity(train, cfg, label_model)(list, label);
}

inline double affinity_G(const AffinityCache& cache, ExampleId query, const Dataset& train, LabelId label,
                         const EmbeddingModel* label_model = nullptr) {
  return Affinity(train, cache.config, label_model)(cache.at(query), label);
}

/// Weighter over a cache for training the weighted model: G(ex, label) with
/// ex looked up by id. Holds references; the cache and dataset must outlive it.
class CacheWeighter {
public:
  CacheWeighter(const AffinityCache& cache, const Dataset& train, const EmbeddingModel* label_model = nullptr)
      : cache_(&cache), affinity_(train, cache.config, label_model) {}

  double operator()(const Example& ex, LabelId label) const { return affinity_(cache_->at(ex.id), label); }

private:
  const AffinityCache* cache_;
  Affinity affinity_;
};

/// f(x, y) = G(x, y) * x^T U^T V y
inline double score_affinity(const EmbeddingModel& model, double g_value, const SparseVector& x, LabelId label) {
  return g_value * score_linear(model, x, label);
}

// ---------------------------------------------------------------------------
// Feature-pair variants

/// Explicit G_ij for input feature i and label j; missing pairs are 0.
struct ExplicitPairWeights {
  std::size_t dx = 0, dy = 0;
  std::map<std::pair<FeatureIndex, LabelId>, double> entries;

  double at(FeatureIndex i, LabelId j) const {
    auto it = entries.find({i, j});
    return it == entries.end() ? 0.0 : it->second;
  }

  void set(FeatureIndex i, LabelId j, double v) {
    if (i >= dx || j >= dy) throw DataError("pair weight index out of range");
    if (!std::isfinite(v)) throw DataError("non-finite pair weight");
    entries[{i, j}] = v;
  }

  static ExplicitPairWeights constant(std::size_t dx, std::size_t dy, double v) {
    ExplicitPairWeights w{dx, dy, {}};
    for (std::size_t i = 0; i < dx; ++i)
      for (std::size_t j = 0; j < dy; ++j) w.set(static_cast<FeatureIndex>(i), static_cast<LabelId>(j), v);
    return w;
  }
};

/// G_ij = g_i . h_j with g_i column i of `x_side` and h_j column j of `y_side`.
struct LowRankPairWeights {
  ColumnMatrix x_side;  // d_g x Dx
  ColumnMatrix y_side;  // d_g x Dy

  double at(FeatureIndex i, LabelId j) const { return dot(x_side.col(i), y_side.col(j)); }

  ExplicitPairWeights materialize() const {
    ExplicitPairWeights w{x_side.cols(), y_side.cols(), {}};
    for (std::size_t i = 0; i < x_side.cols(); ++i)
      for (std::size_t j = 0; j < y_side.cols(); ++j)
        w.set(static_cast<FeatureIndex>(i), static_cast<LabelId>(j), at(static_cast<FeatureIndex>(i), static_cast<LabelId>(j)));
    return w;
  }
};

using FeaturePairWeights = std::variant<ExplicitPairWeights, LowRankPairWeights>;

namespace detail {
template <typename PairWeight>
double score_pairs(const EmbeddingModel& model, std::size_t wdx, std::size_t wdy, const SparseVector& x,
                   const SparseVector& y, PairWeight&& g) {
  if (wdx != model.dx() || wdy != model.dy()) throw DataError("pair weights do not match model dimensions");
  if (x.extent() > model.dx() || y.extent() > model.dy()) throw DataError("vector index out of range for model");
  double s = 0.0;
  for (const auto& xi : x)
    for (const auto& yj : y)
      s += g(xi.index, static_cast<LabelId>(yj.index)) * xi.value *
           dot(model.U.col(xi.index), model.V.col(yj.index)) * yj.value;
  return s;
}
} // namespace detail

/// sum_ij G_ij x_i (U_i . V_j) y_j
inline double score_featurepair(const EmbeddingModel& model, const ExplicitPairWeights& w, const SparseVector& x,
                                const SparseVector& y) {
  return detail::score_pairs(model, w.dx, w.dy, x, y, [&](FeatureIndex i, LabelId j) { return w.at(i, j); });
}

/// sum_ij (g_i . h_j) x_i (U_i . V_j) y_j
inline double score_lowrank(const EmbeddingModel& model, const LowRankPairWeights& w, const SparseVector& x,
                            const SparseVector& y) {
  if (w.x_side.rows() != w.y_side.rows()) throw DataError("low-rank factors disagree on rank");
  return detail::score_pairs(model, w.x_side.cols(), w.y_side.cols(), x, y,
                             [&](FeatureIndex i, LabelId j) { return w.at(i, j); });
}

inline double score_pairs(const EmbeddingModel& model, const FeaturePairWeights& w, const SparseVector& x,
                          const SparseVector& y) {
  return std::visit(
      [&](const auto& weights) {
        if constexpr (std::is_same_v<std::decay_t<decltype(weights)>, ExplicitPairWeights>)
          return score_featurepair(model, weights, x, y);
        else
          return score_lowrank(model, weights, x, y);
      },
      w);
}

} // namespace awe
