#pragma once

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "awe/affinity.hpp"
#include "awe/data.hpp"
#include "awe/linear_embedding.hpp"
#include "awe/parallel.hpp"

namespace awe {

/// |top-k of ranked ∩ truth| / k. `truth` must be sorted.
inline double precision_at_k(std::span<const LabelId> ranked, std::span<const LabelId> truth, std::size_t k) {
  if (k < 1) throw std::invalid_argument("precision_at_k requires k >= 1");
  if (k > ranked.size()) throw std::invalid_argument("k exceeds ranked list length");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < k; ++r)
    if (std::binary_search(truth.begin(), truth.end(), ranked[r])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(k);
}

struct EvalRow {
  std::string algorithm;
  std::vector<std::size_t> ks;
  std::vector<double> precision;  // parallel to ks
  std::size_t evaluated = 0;
  std::size_t skipped = 0;        // examples with an empty truth set

  double at(std::size_t k) const {
    for (std::size_t t = 0; t < ks.size(); ++t)
      if (ks[t] == k) return precision[t];
    throw std::out_of_range("no prec@" + std::to_string(k) + " in row " + algorithm);
  }
};

using EvalReport = std::vector<EvalRow>;

/// Mean prec@k over test examples with a non-empty truth set. `scorer(ex)`
/// returns one score per label. Per-example work runs as a parallel map; the
/// means are accumulated in ascending example-id order.
template <typename Scorer>
EvalRow evaluate(std::string algorithm, Scorer&& scorer, const Dataset& test, std::vector<std::size_t> ks,
                 std::size_t workers = 1) {
  if (test.empty()) throw DataError("empty test set");
  if (ks.empty()) throw DataError("no k values requested");

  auto per_example = parallel_map<std::vector<double>>(test.m(), workers, [&](std::size_t q) {
    const Example& ex = test.examples[q];
    if (ex.labels.empty()) return std::vector<double>{};
    const std::vector<double> scores = scorer(ex);
    const auto ranked = rank_labels(std::span<const double>(scores));
    std::vector<double> p;
    p.reserve(ks.size());
    for (auto k : ks) p.push_back(precision_at_k(ranked, ex.labels, k));
    return p;
  });

  std::vector<std::size_t> order(test.m());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return test.examples[a].id < test.examples[b].id; });

  EvalRow row{std::move(algorithm), ks, std::vector<double>(ks.size(), 0.0), 0, 0};
  for (auto q : order) {
    if (test.examples[q].labels.empty()) {
      ++row.skipped;
      continue;
    }
    ++row.evaluated;
    for (std::size_t t = 0; t < ks.size(); ++t) row.precision[t] += per_example[q][t];
  }
  if (row.evaluated)
    for (auto& p : row.precision) p /= static_cast<double>(row.evaluated);
  return row;
}

/// Distance-weighted kNN vote: each label scores the summed kernel weight of
/// the k nearest training examples that carry it. Without a model distances
/// are measured on raw features, otherwise in the U x embedding.
class KnnClassifier {
public:
  KnnClassifier(const Dataset& train, std::size_t k, double lambda_x, const EmbeddingModel* model = nullptr)
      : index_(model ? NeighborIndex(*model, train, KernelMode::EmbeddedX) : NeighborIndex(train)),
        train_(&train), k_(k), lambda_x_(lambda_x) {
    if (k < 1) throw DataError("k must be >= 1");
    if (!(lambda_x_ > 0.0)) lambda_x_ = index_.median_lambda(0);
    for (std::size_t i = 0; i < train.m(); ++i) pos_.emplace(train.examples[i].id, i);
  }

  double lambda_x() const { return lambda_x_; }

  NeighborList neighbors(const SparseVector& x, std::optional<ExampleId> exclude = std::nullopt) const {
    return index_.query(x, lambda_x_, k_, exclude, 0);
  }

  std::vector<double> scores(const SparseVector& x, std::optional<ExampleId> exclude = std::nullopt) const {
    std::vector<double> s(train_->y_dim, 0.0);
    for (const auto& nb : neighbors(x, exclude).neighbors)
      for (LabelId l : train_->examples[pos_.at(nb.id)].labels) s[l] += nb.weight;
    return s;
  }

private:
  NeighborIndex index_;
  const Dataset* train_;
  std::size_t k_;
  double lambda_x_;
  std::unordered_map<ExampleId, std::size_t> pos_;
};

inline std::vector<LabelId> knn_predict(const Dataset& train, const SparseVector& query, const EmbeddingModel* model,
                                        std::size_t k, double lambda_x,
                                        std::optional<ExampleId> exclude = std::nullopt) {
  const auto s = KnnClassifier(train, k, lambda_x, model).scores(query, exclude);
  return rank_labels(std::span<const double>(s));
}

/// Aligned text table: one row per algorithm, one column per k.
inline std::string format_report_table(const EvalReport& report) {
  std::size_t width = 9;
  for (const auto& r : report) width = std::max(width, r.algorithm.size());
  std::string out;
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(w, s.size()), ' ');
    return s;
  };
  if (report.empty()) return out;
  out += pad("Algorithm", width);
  for (auto k : report.front().ks) out += "  " + pad("Prec@" + std::to_string(k), 8);
  out += "  evaluated  skipped\n";
  for (const auto& r : report) {
    out += pad(r.algorithm, width);
    for (double p : r.precision) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%6.2f%%", 100.0 * p);
      out += "  " + pad(buf, 8);
    }
    out += "  " + pad(std::to_string(r.evaluated), 9) + "  " + std::to_string(r.skipped) + "\n";
  }
  return out;
}

/// `<algorithm>\tprec@<k>=<value>...`, one line per row.
inline std::string format_report_tsv(const EvalReport& report) {
  std::string out;
  for (const auto& r : report) {
    out += r.algorithm;
    for (std::size_t t = 0; t < r.ks.size(); ++t)
      out += "\tprec@" + std::to_string(r.ks[t]) + "=" + text::format_real(r.precision[t]);
    out += '\n';
  }
  return out;
}

} // namespace awe
