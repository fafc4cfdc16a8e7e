#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "awe/data.hpp"
#include "awe/errors.hpp"
#include "awe/text.hpp"

namespace awe {

/// Dense column-major matrix; column j is a contiguous span of `rows()` reals.
class ColumnMatrix {
public:
  ColumnMatrix() = default;
  ColumnMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  std::span<double> col(std::size_t j) { return {data_.data() + j * rows_, rows_}; }
  std::span<const double> col(std::size_t j) const { return {data_.data() + j * rows_, rows_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  friend bool operator==(const ColumnMatrix&, const ColumnMatrix&) = default;

private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

/// Rescales w onto the ball of radius c if it lies outside.
inline void project_to_ball(std::span<double> w, double c) {
  const double len = std::sqrt(squared_norm(w));
  if (len > c) {
    const double scale = c / len;
    for (auto& v : w) v *= scale;
  }
}

/// f(x, y) = x^T U^T V y. Column U_i embeds input feature i, column V_j
/// embeds label j; both live in R^d.
struct EmbeddingModel {
  std::size_t d = 0;
  ColumnMatrix U;  // d x Dx
  ColumnMatrix V;  // d x Dy
  double max_norm = 1.0;

  EmbeddingModel() = default;
  EmbeddingModel(std::size_t dim, std::size_t dx, std::size_t dy, double c)
      : d(dim), U(dim, dx), V(dim, dy), max_norm(c) {}

  std::size_t dx() const { return U.cols(); }
  std::size_t dy() const { return V.cols(); }

  friend bool operator==(const EmbeddingModel&, const EmbeddingModel&) = default;
};

struct TrainConfig {
  std::size_t dim = 100;
  double learning_rate = 0.01;
  double margin = 1.0;
  std::size_t epochs = 30;
  std::size_t max_negative_trials = 0;  // 0 means Dy - 1
  std::uint64_t seed = 1;
  double init_scale = 1.0;
  double max_norm = 1.0;

  void validate() const {
    if (dim == 0) throw DataError("dim must be positive");
    if (!(learning_rate > 0.0)) throw DataError("learning rate must be positive");
    if (!(margin > 0.0)) throw DataError("margin must be positive");
    if (epochs == 0) throw DataError("epochs must be positive");
    if (!(init_scale > 0.0)) throw DataError("init scale must be positive");
    if (!(max_norm > 0.0)) throw DataError("max norm must be positive");
  }
};

inline std::vector<double> embed_x(const EmbeddingModel& model, const SparseVector& x) {
  std::vector<double> out(model.d, 0.0);
  for (const auto& e : x) {
    if (e.index >= model.dx()) throw DataError("feature index out of range for model");
    auto col = model.U.col(e.index);
    for (std::size_t k = 0; k < model.d; ++k) out[k] += e.value * col[k];
  }
  return out;
}

inline double score_embedded(const EmbeddingModel& model, std::span<const double> ux, LabelId label) {
  if (label >= model.dy()) throw DataError("label out of range for model");
  return dot(ux, model.V.col(label));
}

inline double score_linear(const EmbeddingModel& model, const SparseVector& x, LabelId label) {
  return score_embedded(model, embed_x(model, x), label);
}

/// Scores of every label for one input, indexed by label id.
inline std::vector<double> score_all_linear(const EmbeddingModel& model, const SparseVector& x) {
  const auto ux = embed_x(model, x);
  std::vector<double> out(model.dy());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = dot(ux, model.V.col(j));
  return out;
}

/// Label ids by descending score; equal scores keep ascending id order.
inline std::vector<LabelId> rank_labels(std::span<const double> scores) {
  std::vector<LabelId> order(scores.size());
  std::iota(order.begin(), order.end(), LabelId{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](LabelId a, LabelId b) { return scores[a] > scores[b]; });
  return order;
}

template <typename Scorer>
  requires std::is_invocable_r_v<double, Scorer, LabelId>
std::vector<LabelId> rank_labels(Scorer&& scorer, std::size_t dy) {
  std::vector<double> scores(dy);
  for (std::size_t j = 0; j < dy; ++j) scores[j] = scorer(static_cast<LabelId>(j));
  return rank_labels(std::span<const double>(scores));
}

/// WARP rank weight L(k) = sum_{j=1..k} 1/j.
inline double rank_weight(std::size_t k) {
  if (k < 1) throw std::invalid_argument("rank_weight requires k >= 1");
  double s = 0.0;
  for (std::size_t j = 1; j <= k; ++j) s += 1.0 / static_cast<double>(j);
  return s;
}

/// Weighter used by the standard (step one) model: no weighting at all.
struct Unweighted {};

template <typename W>
concept Weighter = std::is_same_v<std::remove_cvref_t<W>, Unweighted> ||
                   std::is_invocable_r_v<double, W, const Example&, LabelId>;

namespace detail {
template <typename W>
double weight_of(W& w, const Example& ex, LabelId l) {
  if constexpr (std::is_same_v<std::remove_cvref_t<W>, Unweighted>) return 1.0;
  else return w(ex, l);
}

template <typename W>
double apply_weight(double g, double s) {
  if constexpr (std::is_same_v<std::remove_cvref_t<W>, Unweighted>) return s;
  else return g * s;
}
} // namespace detail

/// Gradient of rank_scale * (margin + g_neg f(x,neg) - g_pos f(x,pos)) with
/// respect to every parameter column it touches, evaluated inside the hinge.
struct WarpGradient {
  std::vector<std::vector<double>> u;  // one per entry of x, same order
  std::vector<double> v_pos;
  std::vector<double> v_neg;
};

inline WarpGradient warp_gradient(const EmbeddingModel& model, const SparseVector& x,
                                  LabelId pos, LabelId neg, double g_pos, double g_neg,
                                  double rank_scale) {
  const auto ux = embed_x(model, x);
  auto vp = model.V.col(pos), vn = model.V.col(neg);
  WarpGradient g;
  g.v_pos.resize(model.d);
  g.v_neg.resize(model.d);
  for (std::size_t k = 0; k < model.d; ++k) {
    g.v_pos[k] = -rank_scale * g_pos * ux[k];
    g.v_neg[k] = rank_scale * g_neg * ux[k];
  }
  std::vector<double> diff(model.d);
  for (std::size_t k = 0; k < model.d; ++k) diff[k] = g_neg * vn[k] - g_pos * vp[k];
  g.u.reserve(x.size());
  for (const auto& e : x) {
    std::vector<double> col(model.d);
    for (std::size_t k = 0; k < model.d; ++k) col[k] = rank_scale * e.value * diff[k];
    g.u.push_back(std::move(col));
  }
  return g;
}

struct StepReport {
  std::size_t draws = 0;  // N, negatives sampled
  bool violated = false;
  std::size_t rank_estimate = 0;
  LabelId negative = 0;   // the violating label when violated
};

/// One WARP update for (ex, pos). Negatives are drawn uniformly with
/// replacement from labels outside ex.labels until one violates the margin
/// or the trial budget runs out. The scores compared already include the
/// weighter factor. Only columns touched by the update are projected.
template <typename W, typename Rng>
  requires Weighter<W>
StepReport warp_step(EmbeddingModel& model, const Example& ex, LabelId pos, W&& weighter,
                     const TrainConfig& cfg, Rng& rng) {
  StepReport report;
  const std::size_t dy = model.dy();
  const std::size_t n_neg = dy - ex.labels.size();
  if (n_neg == 0) return report;
  const std::size_t max_trials = cfg.max_negative_trials ? cfg.max_negative_trials : dy - 1;

  const auto ux = embed_x(model, ex.features);
  const double g_pos = detail::weight_of(weighter, ex, pos);
  const double f_pos = detail::apply_weight<W>(g_pos, score_embedded(model, ux, pos));

  std::uniform_int_distribution<std::size_t> pick(0, n_neg - 1);
  LabelId neg = 0;
  double g_neg = 0.0;
  while (report.draws < max_trials) {
    ++report.draws;
    // Map r onto the r-th label not in ex.labels.
    auto r = static_cast<LabelId>(pick(rng));
    for (LabelId p : ex.labels)
      if (p <= r) ++r;
    neg = r;
    g_neg = detail::weight_of(weighter, ex, neg);
    const double f_neg = detail::apply_weight<W>(g_neg, score_embedded(model, ux, neg));
    if (f_neg + cfg.margin > f_pos) {
      report.violated = true;
      break;
    }
  }
  if (!report.violated) return report;

  report.negative = neg;
  report.rank_estimate = std::max<std::size_t>(1, (dy - 1) / report.draws);
  const double scale = rank_weight(report.rank_estimate);
  const auto grad = warp_gradient(model, ex.features, pos, neg, g_pos, g_neg, scale);

  const double lr = cfg.learning_rate;
  std::size_t t = 0;
  for (const auto& e : ex.features) {
    auto col = model.U.col(e.index);
    for (std::size_t k = 0; k < model.d; ++k) col[k] -= lr * grad.u[t][k];
    project_to_ball(col, model.max_norm);
    ++t;
  }
  auto vp = model.V.col(pos), vn = model.V.col(neg);
  for (std::size_t k = 0; k < model.d; ++k) {
    vp[k] -= lr * grad.v_pos[k];
    vn[k] -= lr * grad.v_neg[k];
  }
  project_to_ball(vp, model.max_norm);
  project_to_ball(vn, model.max_norm);
  return report;
}

/// Zero-mean Gaussian entries with standard deviation init_scale / sqrt(d),
/// then every column projected onto the max-norm ball.
template <typename Rng>
EmbeddingModel init_model(std::size_t dx, std::size_t dy, const TrainConfig& cfg, Rng& rng) {
  EmbeddingModel model(cfg.dim, dx, dy, cfg.max_norm);
  std::normal_distribution<double> normal(0.0, cfg.init_scale / std::sqrt(static_cast<double>(cfg.dim)));
  for (auto& v : model.U.data()) v = normal(rng);
  for (auto& v : model.V.data()) v = normal(rng);
  for (std::size_t i = 0; i < dx; ++i) project_to_ball(model.U.col(i), model.max_norm);
  for (std::size_t j = 0; j < dy; ++j) project_to_ball(model.V.col(j), model.max_norm);
  return model;
}

/// WARP training. Each epoch visits the examples in a seeded shuffled order
/// and draws one positive label uniformly per visit. When `start` is given it
/// replaces random initialization (warm start).
template <typename W>
  requires Weighter<W>
EmbeddingModel train_warp(const Dataset& train, const TrainConfig& cfg, W&& weighter,
                          const EmbeddingModel* start = nullptr) {
  cfg.validate();
  if (train.empty()) throw DataError("empty training set");
  for (const auto& ex : train.examples)
    if (ex.labels.empty())
      throw DataError("training example " + std::to_string(ex.id) + " has no labels");

  std::mt19937_64 rng(cfg.seed);
  EmbeddingModel model;
  if (start) {
    if (start->d != cfg.dim || start->dx() != train.x_dim || start->dy() != train.y_dim)
      throw ArtifactError("warm-start model dimensions do not match");
    model = *start;
    model.max_norm = cfg.max_norm;
  } else {
    model = init_model(train.x_dim, train.y_dim, cfg, rng);
  }

  std::vector<std::size_t> order(train.m());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t idx : order) {
      const Example& ex = train.examples[idx];
      std::uniform_int_distribution<std::size_t> pick(0, ex.labels.size() - 1);
      const LabelId pos = ex.labels[pick(rng)];
      warp_step(model, ex, pos, weighter, cfg, rng);
    }
  }
  return model;
}

inline EmbeddingModel train_warp(const Dataset& train, const TrainConfig& cfg,
                                 const EmbeddingModel* start = nullptr) {
  return train_warp(train, cfg, Unweighted{}, start);
}

/// Mean over (example, positive, negative) triplets of
/// max(0, margin + f(x, neg) - f(x, pos)), with f including the weighter.
template <typename W = Unweighted>
  requires Weighter<W>
double mean_hinge_loss(const EmbeddingModel& model, const Dataset& data, double margin,
                       W&& weighter = {}) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ex : data.examples) {
    if (ex.labels.empty()) continue;
    const auto ux = embed_x(model, ex.features);
    std::vector<double> f(model.dy());
    for (std::size_t j = 0; j < f.size(); ++j) {
      const auto l = static_cast<LabelId>(j);
      f[j] = detail::apply_weight<W>(detail::weight_of(weighter, ex, l), score_embedded(model, ux, l));
    }
    for (LabelId p : ex.labels) {
      for (std::size_t j = 0; j < f.size(); ++j) {
        if (ex.has_label(static_cast<LabelId>(j))) continue;
        total += std::max(0.0, margin + f[j] - f[p]);
        ++count;
      }
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

// Model file: "awe-model v1", a dims line, Dx lines of U columns, then Dy
// lines of V columns, every real at 17 significant digits.
inline std::string serialize_model(const EmbeddingModel& model) {
  std::string out = "awe-model v1\n";
  out += "d " + std::to_string(model.d) + " dx " + std::to_string(model.dx()) + " dy " +
         std::to_string(model.dy()) + " C " + text::format_real(model.max_norm) + "\n";
  auto emit = [&](std::span<const double> col) {
    for (std::size_t k = 0; k < col.size(); ++k) {
      if (k) out += ' ';
      out += text::format_real(col[k]);
    }
    out += '\n';
  };
  for (std::size_t i = 0; i < model.dx(); ++i) emit(model.U.col(i));
  for (std::size_t j = 0; j < model.dy(); ++j) emit(model.V.col(j));
  return out;
}

inline EmbeddingModel parse_model(const std::string& content) {
  std::istringstream in(content);
  std::string line;
  if (!std::getline(in, line) || text::strip_cr(line) != "awe-model v1")
    throw ArtifactError("not an awe-model v1 file");
  if (!std::getline(in, line)) throw ArtifactError("model file truncated");
  auto tok = text::split_ws(text::strip_cr(line));
  if (tok.size() != 8 || tok[0] != "d" || tok[2] != "dx" || tok[4] != "dy" || tok[6] != "C")
    throw ArtifactError("malformed model header");
  auto d = text::parse_uint<std::size_t>(tok[1]);
  auto dx = text::parse_uint<std::size_t>(tok[3]);
  auto dy = text::parse_uint<std::size_t>(tok[5]);
  auto c = text::parse_real(tok[7]);
  if (!d || !dx || !dy || !c || *d == 0 || *dx == 0 || *dy == 0 || !(*c > 0.0))
    throw ArtifactError("malformed model header");

  EmbeddingModel model(*d, *dx, *dy, *c);
  auto read_col = [&](std::span<double> col) {
    if (!std::getline(in, line)) throw ArtifactError("model file truncated");
    auto vals = text::split_ws(text::strip_cr(line));
    if (vals.size() != col.size()) throw ArtifactError("model row has wrong length");
    for (std::size_t k = 0; k < col.size(); ++k) {
      auto v = text::parse_real(vals[k]);
      if (!v || !std::isfinite(*v)) throw ArtifactError("malformed model entry");
      col[k] = *v;
    }
  };
  for (std::size_t i = 0; i < *dx; ++i) read_col(model.U.col(i));
  for (std::size_t j = 0; j < *dy; ++j) read_col(model.V.col(j));
  while (std::getline(in, line))
    if (!text::strip_cr(line).empty()) throw ArtifactError("trailing data in model file");
  return model;
}

inline EmbeddingModel load_model(const std::string& path) { return parse_model(text::read_file(path)); }

inline void save_model(const EmbeddingModel& model, const std::string& path) {
  text::write_file(path, serialize_model(model));
}

} // namespace awe
