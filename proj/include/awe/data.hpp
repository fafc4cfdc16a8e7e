#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "awe/errors.hpp"
#include "awe/text.hpp"

namespace awe {

using FeatureIndex = std::uint32_t;
using LabelId = std::uint32_t;
using ExampleId = std::uint64_t;

struct Entry {
  FeatureIndex index = 0;
  double value = 0.0;

  friend bool operator==(const Entry&, const Entry&) = default;
};

/// Sorted (index, value) pairs. Indices strictly increasing, values finite
/// and nonzero. Construct through from_entries() to get validation.
class SparseVector {
public:
  SparseVector() = default;

  static SparseVector from_entries(std::vector<Entry> entries) {
    for (std::size_t k = 0; k < entries.size(); ++k) {
      if (!std::isfinite(entries[k].value))
        throw DataError("non-finite feature value");
      if (entries[k].value == 0.0) throw DataError("zero feature value");
      if (k > 0 && entries[k].index <= entries[k - 1].index)
        throw DataError(entries[k].index == entries[k - 1].index
                            ? "duplicate feature index"
                            : "unsorted feature index");
    }
    SparseVector v;
    v.entries_ = std::move(entries);
    return v;
  }

  std::span<const Entry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// One past the largest index, 0 when empty.
  std::size_t extent() const {
    return entries_.empty() ? 0 : std::size_t{entries_.back().index} + 1;
  }

  friend bool operator==(const SparseVector&, const SparseVector&) = default;

private:
  std::vector<Entry> entries_;
};

inline double dot(const SparseVector& a, const SparseVector& b) {
  double s = 0.0;
  auto ia = a.begin(), ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (ia->index < ib->index) ++ia;
    else if (ib->index < ia->index) ++ib;
    else s += (ia++)->value * (ib++)->value;
  }
  return s;
}

/// Squared Euclidean distance, summed in ascending index order.
inline double squared_distance(const SparseVector& a, const SparseVector& b) {
  double s = 0.0;
  auto ia = a.begin(), ib = b.begin();
  while (ia != a.end() || ib != b.end()) {
    double diff;
    if (ib == b.end() || (ia != a.end() && ia->index < ib->index)) {
      diff = (ia++)->value;
    } else if (ia == a.end() || ib->index < ia->index) {
      diff = -(ib++)->value;
    } else {
      diff = ia->value - ib->value;
      ++ia, ++ib;
    }
    s += diff * diff;
  }
  return s;
}

struct Example {
  ExampleId id = 0;
  SparseVector features;
  std::vector<LabelId> labels;  // sorted, unique

  bool has_label(LabelId l) const {
    return std::binary_search(labels.begin(), labels.end(), l);
  }

  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  std::vector<Example> examples;
  std::size_t x_dim = 1;
  std::size_t y_dim = 1;

  std::size_t m() const { return examples.size(); }
  bool empty() const { return examples.empty(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct Dims {
  std::size_t x_dim;
  std::size_t y_dim;
};

/// Checks every Dataset invariant; throws DataError on the first violation.
inline void validate(const Dataset& d, bool labels_optional = false) {
  if (d.x_dim == 0 || d.y_dim == 0) throw DataError("dimensions must be positive");
  std::vector<ExampleId> ids;
  ids.reserve(d.m());
  for (const auto& ex : d.examples) {
    if (ex.features.extent() > d.x_dim)
      throw DataError("feature index out of range in example " + std::to_string(ex.id));
    if (!labels_optional && ex.labels.empty())
      throw DataError("empty label set in example " + std::to_string(ex.id));
    for (std::size_t k = 0; k < ex.labels.size(); ++k) {
      if (ex.labels[k] >= d.y_dim)
        throw DataError("label out of range in example " + std::to_string(ex.id));
      if (k > 0 && ex.labels[k] <= ex.labels[k - 1])
        throw DataError("labels not sorted/unique in example " + std::to_string(ex.id));
    }
    ids.push_back(ex.id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw DataError("duplicate example id");
}

struct ParseOptions {
  std::optional<Dims> dims;      // used when the stream has no #dims header
  bool labels_optional = false;  // accept an empty label field
};

/// Reads the line-oriented dataset format:
///   #dims <Dx> <Dy>            (optional, first non-empty line)
///   <l1,l2,...> <idx>:<val> ... (one example per line; ids assigned 0,1,...)
/// Lines starting with '#' are comments. Errors carry the 1-based line number.
inline Dataset parse_dataset(std::istream& in, const ParseOptions& opts = {}) {
  Dataset d;
  std::optional<Dims> header;
  std::size_t max_x = 0, max_y = 0;
  std::string raw;
  std::size_t lineno = 0;
  bool seen_content = false;

  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = text::strip_cr(raw);
    if (line.empty()) continue;
    if (line.front() == '#') {
      if (line.starts_with("#dims")) {
        if (seen_content || header)
          throw DataError::at_line(lineno, "#dims header must precede examples");
        auto tok = text::split_ws(line);
        std::optional<std::size_t> dx, dy;
        if (tok.size() == 3) {
          dx = text::parse_uint<std::size_t>(tok[1]);
          dy = text::parse_uint<std::size_t>(tok[2]);
        }
        if (!dx || !dy || *dx == 0 || *dy == 0)
          throw DataError::at_line(lineno, "malformed #dims header");
        header = Dims{*dx, *dy};
      }
      continue;
    }
    seen_content = true;

    Example ex;
    ex.id = d.examples.size();
    std::string_view rest = line;
    bool empty_label_field = line.front() == ' ' || line.front() == '\t';
    auto tok = text::split_ws(rest);
    std::size_t first_feature = 0;
    if (!empty_label_field) {
      if (tok.empty() || tok[0].find(':') != std::string_view::npos)
        throw DataError::at_line(lineno, "missing label field");
      for (auto part : text::split(tok[0], ',')) {
        auto l = text::parse_uint<LabelId>(part);
        if (!l) throw DataError::at_line(lineno, "malformed label '" + std::string(part) + "'");
        ex.labels.push_back(*l);
      }
      std::sort(ex.labels.begin(), ex.labels.end());
      if (std::adjacent_find(ex.labels.begin(), ex.labels.end()) != ex.labels.end())
        throw DataError::at_line(lineno, "duplicate label");
      first_feature = 1;
    } else if (!opts.labels_optional) {
      throw DataError::at_line(lineno, "empty label set");
    }

    std::vector<Entry> entries;
    for (std::size_t t = first_feature; t < tok.size(); ++t) {
      auto colon = tok[t].find(':');
      if (colon == std::string_view::npos)
        throw DataError::at_line(lineno, "malformed feature '" + std::string(tok[t]) + "'");
      auto idx = text::parse_uint<FeatureIndex>(tok[t].substr(0, colon));
      auto val = text::parse_real(tok[t].substr(colon + 1));
      if (!idx || !val)
        throw DataError::at_line(lineno, "malformed feature '" + std::string(tok[t]) + "'");
      if (!std::isfinite(*val)) throw DataError::at_line(lineno, "non-finite feature value");
      if (*val == 0.0) throw DataError::at_line(lineno, "zero feature value");
      if (!entries.empty() && *idx <= entries.back().index)
        throw DataError::at_line(lineno, *idx == entries.back().index
                                             ? "duplicate feature index"
                                             : "unsorted feature index");
      entries.push_back({*idx, *val});
    }
    ex.features = SparseVector::from_entries(std::move(entries));

    max_x = std::max(max_x, ex.features.extent());
    if (!ex.labels.empty()) max_y = std::max<std::size_t>(max_y, ex.labels.back() + std::size_t{1});

    const auto& declared = header ? header : opts.dims;
    if (declared) {
      if (ex.features.extent() > declared->x_dim)
        throw DataError::at_line(lineno, "feature index exceeds declared dimension");
      if (!ex.labels.empty() && ex.labels.back() >= declared->y_dim)
        throw DataError::at_line(lineno, "label exceeds declared dimension");
    }
    d.examples.push_back(std::move(ex));
  }
  if (in.bad()) throw IoError("read error while parsing dataset");

  if (header) {
    d.x_dim = header->x_dim, d.y_dim = header->y_dim;
  } else if (opts.dims) {
    d.x_dim = opts.dims->x_dim, d.y_dim = opts.dims->y_dim;
  } else {
    d.x_dim = std::max<std::size_t>(max_x, 1);
    d.y_dim = std::max<std::size_t>(max_y, 1);
  }
  return d;
}

inline Dataset parse_dataset(const std::string& s, const ParseOptions& opts = {}) {
  std::istringstream in(s);
  return parse_dataset(in, opts);
}

inline Dataset load_dataset(const std::string& path, const ParseOptions& opts = {}) {
  std::istringstream in(text::read_file(path));
  return parse_dataset(in, opts);
}

/// Canonical text: always a #dims header, labels ascending, values at 17
/// significant digits. Example ids are positional and not written.
inline std::string write_dataset(const Dataset& d) {
  std::string out = "#dims " + std::to_string(d.x_dim) + " " + std::to_string(d.y_dim) + "\n";
  for (const auto& ex : d.examples) {
    if (ex.labels.empty()) out += ' ';
    for (std::size_t k = 0; k < ex.labels.size(); ++k) {
      if (k) out += ',';
      out += std::to_string(ex.labels[k]);
    }
    for (const auto& e : ex.features) {
      out += ' ';
      out += std::to_string(e.index);
      out += ':';
      out += text::format_real(e.value);
    }
    out += '\n';
  }
  return out;
}

/// Seeded shuffle partition. Both parts keep the original ids and relative
/// order; the test part gets round(fraction * m) examples.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double test_fraction,
                                                 std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw DataError("test fraction must lie in (0, 1)");
  std::vector<std::size_t> order(d.m());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(d.m())));
  std::vector<bool> is_test(d.m(), false);
  for (std::size_t k = 0; k < n_test; ++k) is_test[order[k]] = true;

  Dataset train{{}, d.x_dim, d.y_dim}, test{{}, d.x_dim, d.y_dim};
  for (std::size_t k = 0; k < d.m(); ++k)
    (is_test[k] ? test : train).examples.push_back(d.examples[k]);
  return {std::move(train), std::move(test)};
}

} // namespace awe
