#pragma once

// Shared fixtures, random generators and brute-force oracles for the test
// suites. The oracles work on dense copies of everything and deliberately
// avoid the library's sparse and embedded code paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "awe/awe.hpp"

namespace awe::testing {

using Dense = std::vector<double>;
using DenseMatrix = std::vector<Dense>;  // [row][col]

inline SparseVector sv(std::vector<Entry> e) { return SparseVector::from_entries(std::move(e)); }

inline Dense densify(const SparseVector& x, std::size_t dim) {
  Dense out(dim, 0.0);
  for (const auto& e : x) out[e.index] = e.value;
  return out;
}

/// Model whose columns are given explicitly (U_cols[i] is U_i).
inline EmbeddingModel model_from_columns(const DenseMatrix& u_cols, const DenseMatrix& v_cols, double c = 1e9) {
  EmbeddingModel m(u_cols.front().size(), u_cols.size(), v_cols.size(), c);
  for (std::size_t i = 0; i < u_cols.size(); ++i) std::copy(u_cols[i].begin(), u_cols[i].end(), m.U.col(i).begin());
  for (std::size_t j = 0; j < v_cols.size(); ++j) std::copy(v_cols[j].begin(), v_cols[j].end(), m.V.col(j).begin());
  return m;
}

inline EmbeddingModel identity_model(std::size_t dim, std::size_t dy) {
  DenseMatrix u(dim, Dense(dim, 0.0)), v(dy, Dense(dim, 0.0));
  for (std::size_t i = 0; i < dim; ++i) u[i][i] = 1.0;
  for (std::size_t j = 0; j < dy; ++j) v[j][j % dim] = 1.0;
  return model_from_columns(u, v);
}

inline EmbeddingModel random_model(std::size_t d, std::size_t dx, std::size_t dy, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  EmbeddingModel m(d, dx, dy, 1.0);
  for (auto& v : m.U.data()) v = normal(rng);
  for (auto& v : m.V.data()) v = normal(rng);
  return m;
}

inline SparseVector random_sparse(std::size_t dim, std::size_t nnz, std::mt19937_64& rng, bool integer_values = false) {
  std::vector<FeatureIndex> idx(dim);
  for (std::size_t i = 0; i < dim; ++i) idx[i] = static_cast<FeatureIndex>(i);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(nnz, dim));
  std::sort(idx.begin(), idx.end());
  std::uniform_real_distribution<double> val(-2.0, 2.0);
  std::uniform_int_distribution<int> ival(1, 3);
  std::vector<Entry> e;
  for (auto i : idx) {
    double v = integer_values ? ival(rng) : val(rng);
    if (v == 0.0) v = 0.5;
    e.push_back({i, v});
  }
  return SparseVector::from_entries(std::move(e));
}

/// m examples, each with 1..max_labels labels and 1..max_nnz features.
inline Dataset random_dataset(std::size_t m, std::size_t dx, std::size_t dy, std::mt19937_64& rng,
                              std::size_t max_nnz = 5, std::size_t max_labels = 2, bool integer_values = false) {
  Dataset d{{}, dx, dy};
  std::uniform_int_distribution<std::size_t> nnz(1, max_nnz), nl(1, max_labels);
  std::uniform_int_distribution<LabelId> lab(0, static_cast<LabelId>(dy - 1));
  for (std::size_t i = 0; i < m; ++i) {
    Example ex;
    ex.id = i;
    ex.features = random_sparse(dx, nnz(rng), rng, integer_values);
    const auto k = nl(rng);
    while (ex.labels.size() < std::min(k, dy)) {
      auto l = lab(rng);
      if (!ex.has_label(l)) {
        ex.labels.push_back(l);
        std::sort(ex.labels.begin(), ex.labels.end());
      }
    }
    d.examples.push_back(std::move(ex));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Oracles

/// U x by a full dense matrix-vector product.
inline Dense oracle_embed(const EmbeddingModel& m, const SparseVector& x) {
  const Dense xd = densify(x, m.dx());
  Dense out(m.d, 0.0);
  for (std::size_t i = 0; i < m.dx(); ++i)
    for (std::size_t k = 0; k < m.d; ++k) out[k] += m.U.data()[i * m.d + k] * xd[i];
  return out;
}

inline double oracle_sqdist(const Dense& a, const Dense& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

struct OracleNeighbor {
  ExampleId id;
  double weight;
};

/// All-pairs brute force: every training point's kernel weight, fully sorted
/// (weight descending, id ascending), truncated to n.
inline std::vector<OracleNeighbor> oracle_knn(const EmbeddingModel* m, const Dataset& train, const SparseVector& q,
                                              double lambda, std::size_t n, bool raw,
                                              std::optional<ExampleId> exclude = std::nullopt) {
  std::vector<OracleNeighbor> all;
  const Dense qp = raw ? densify(q, train.x_dim) : oracle_embed(*m, q);
  for (const auto& ex : train.examples) {
    if (exclude && ex.id == *exclude) continue;
    const Dense p = raw ? densify(ex.features, train.x_dim) : oracle_embed(*m, ex.features);
    all.push_back({ex.id, std::exp(-lambda * oracle_sqdist(qp, p))});
  }
  std::sort(all.begin(), all.end(), [](const OracleNeighbor& a, const OracleNeighbor& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    return a.id < b.id;
  });
  if (all.size() > n) all.resize(n);
  return all;
}

/// Label ranking from a kNN vote computed by brute force.
inline std::vector<LabelId> oracle_knn_predict(const EmbeddingModel* m, const Dataset& train, const SparseVector& q,
                                               double lambda, std::size_t k, bool raw) {
  Dense votes(train.y_dim, 0.0);
  for (const auto& nb : oracle_knn(m, train, q, lambda, k, raw))
    for (const auto& ex : train.examples)
      if (ex.id == nb.id)
        for (auto l : ex.labels) votes[l] += nb.weight;
  std::vector<LabelId> order;
  for (std::size_t j = 0; j < votes.size(); ++j) order.push_back(static_cast<LabelId>(j));
  // Selection sort: repeatedly take the best remaining (highest vote, lowest id).
  std::vector<LabelId> ranked;
  while (!order.empty()) {
    std::size_t best = 0;
    for (std::size_t t = 1; t < order.size(); ++t)
      if (votes[order[t]] > votes[order[best]]) best = t;
    ranked.push_back(order[best]);
    order.erase(order.begin() + static_cast<std::ptrdiff_t>(best));
  }
  return ranked;
}

/// sum_i sum_j G[i][j] x_i (sum_k U[k][i] V[k][j]) y_j over every (i, j).
inline double oracle_double_sum(const EmbeddingModel& m, const DenseMatrix& g, const SparseVector& x,
                                const SparseVector& y) {
  const Dense xd = densify(x, m.dx()), yd = densify(y, m.dy());
  double s = 0.0;
  for (std::size_t i = 0; i < m.dx(); ++i)
    for (std::size_t j = 0; j < m.dy(); ++j) {
      double uv = 0.0;
      for (std::size_t k = 0; k < m.d; ++k) uv += m.U.col(i)[k] * m.V.col(j)[k];
      s += g[i][j] * xd[i] * uv * yd[j];
    }
  return s;
}

} // namespace awe::testing
