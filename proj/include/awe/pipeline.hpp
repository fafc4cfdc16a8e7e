#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "awe/affinity.hpp"
#include "awe/data.hpp"
#include "awe/errors.hpp"
#include "awe/hash.hpp"
#include "awe/linear_embedding.hpp"
#include "awe/text.hpp"

namespace awe {

/// Settings for the iterative procedure: round 0 trains the plain model,
/// every later round builds G from the previous round's model and trains a
/// weighted model on it.
struct PipelineConfig {
  std::size_t rounds = 2;
  // One entry per round, or a single entry reused with seed + round.
  std::vector<TrainConfig> train{TrainConfig{}};
  KernelConfig kernel;
  bool warm_start = false;
  std::string artifact_dir = ".";
  std::size_t workers = 1;

  TrainConfig train_config(std::size_t round) const {
    if (train.size() == rounds) return train[round];
    TrainConfig c = train.front();
    c.seed += round;
    return c;
  }

  void validate() const {
    if (rounds < 1) throw DataError("rounds must be >= 1");
    if (train.size() != 1 && train.size() != rounds)
      throw DataError("need one train config or one per round");
    for (const auto& t : train) t.validate();
    if (kernel.n < 1) throw DataError("neighbor count n must be >= 1");
    if (!(kernel.bias >= 0.0)) throw DataError("bias must be nonnegative");
  }
};

struct ArtifactEntry {
  std::string kind;  // "model" or "cache"
  std::size_t round = 0;
  std::string path;  // relative to the manifest's directory
  std::string hash;

  friend bool operator==(const ArtifactEntry&, const ArtifactEntry&) = default;
};

struct Manifest {
  std::vector<ArtifactEntry> entries;
  std::vector<std::pair<std::string, std::string>> cfg;

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

inline std::string serialize_manifest(const Manifest& m) {
  std::string out = "awe-manifest v1\n";
  for (const auto& e : m.entries)
    out += e.kind + ' ' + std::to_string(e.round) + ' ' + e.path + ' ' + e.hash + '\n';
  for (const auto& [k, v] : m.cfg) out += "cfg " + k + '=' + v + '\n';
  return out;
}

inline Manifest parse_manifest(const std::string& content) {
  std::istringstream in(content);
  std::string line;
  if (!std::getline(in, line) || text::strip_cr(line) != "awe-manifest v1")
    throw ArtifactError("not an awe-manifest v1 file");
  Manifest m;
  while (std::getline(in, line)) {
    auto sv = text::strip_cr(line);
    if (sv.empty()) continue;
    auto tok = text::split_ws(sv);
    if (tok[0] == "cfg" && tok.size() == 2) {
      auto eq = tok[1].find('=');
      if (eq == std::string_view::npos) throw ArtifactError("malformed manifest cfg line");
      m.cfg.emplace_back(std::string(tok[1].substr(0, eq)), std::string(tok[1].substr(eq + 1)));
    } else if ((tok[0] == "model" || tok[0] == "cache") && tok.size() == 4) {
      auto round = text::parse_uint<std::size_t>(tok[1]);
      if (!round) throw ArtifactError("malformed manifest round");
      m.entries.push_back({std::string(tok[0]), *round, std::string(tok[2]), std::string(tok[3])});
    } else {
      throw ArtifactError("malformed manifest line: " + std::string(sv));
    }
  }
  return m;
}

namespace detail {
inline std::vector<std::pair<std::string, std::string>> config_lines(const PipelineConfig& c) {
  std::vector<std::pair<std::string, std::string>> out;
  out.emplace_back("rounds", std::to_string(c.rounds));
  out.emplace_back("warm_start", c.warm_start ? "1" : "0");
  out.emplace_back("kernel.lambda_x", text::format_real(c.kernel.lambda_x));
  out.emplace_back("kernel.lambda_y", text::format_real(c.kernel.lambda_y));
  out.emplace_back("kernel.mode", std::string(to_string(c.kernel.mode)));
  out.emplace_back("kernel.agg", std::string(to_string(c.kernel.agg)));
  out.emplace_back("kernel.n", std::to_string(c.kernel.n));
  out.emplace_back("kernel.bias", text::format_real(c.kernel.bias));
  out.emplace_back("kernel.exclude_self", c.kernel.exclude_self ? "1" : "0");
  for (std::size_t r = 0; r < c.rounds; ++r) {
    const auto t = c.train_config(r);
    const auto p = "round" + std::to_string(r) + ".";
    out.emplace_back(p + "dim", std::to_string(t.dim));
    out.emplace_back(p + "lr", text::format_real(t.learning_rate));
    out.emplace_back(p + "margin", text::format_real(t.margin));
    out.emplace_back(p + "epochs", std::to_string(t.epochs));
    out.emplace_back(p + "max_neg", std::to_string(t.max_negative_trials));
    out.emplace_back(p + "seed", std::to_string(t.seed));
    out.emplace_back(p + "init_scale", text::format_real(t.init_scale));
    out.emplace_back(p + "max_norm", text::format_real(t.max_norm));
  }
  return out;
}
} // namespace detail

/// Paths produced by run_pipeline. models[r] is round r's model; caches[r - 1]
/// is round r's cache, built from models[r - 1].
struct PipelineArtifacts {
  std::filesystem::path dir;
  std::vector<ArtifactEntry> models;
  std::vector<ArtifactEntry> caches;

  std::filesystem::path manifest_path() const { return dir / "manifest.awe"; }
  std::filesystem::path model_path(std::size_t round) const { return dir / models.at(round).path; }
  std::filesystem::path cache_path(std::size_t round) const { return dir / caches.at(round - 1).path; }
};

/// Writes model<r>.awe and cache<r>.awe files into config.artifact_dir and
/// finally manifest.awe. A missing manifest means the run did not finish.
inline PipelineArtifacts run_pipeline(const Dataset& train, const PipelineConfig& config) {
  config.validate();
  namespace fs = std::filesystem;
  PipelineArtifacts art;
  art.dir = config.artifact_dir;
  std::error_code ec;
  fs::create_directories(art.dir, ec);
  if (ec) throw IoError("cannot create " + art.dir.string() + ": " + ec.message());
  fs::remove(art.manifest_path(), ec);

  auto write = [&](const std::string& kind, std::size_t round, const std::string& content) {
    ArtifactEntry e{kind, round, kind + std::to_string(round) + ".awe", content_hash(content)};
    text::write_file((art.dir / e.path).string(), content);
    return e;
  };

  EmbeddingModel prev = train_warp(train, config.train_config(0));
  art.models.push_back(write("model", 0, serialize_model(prev)));

  for (std::size_t r = 1; r < config.rounds; ++r) {
    const AffinityCache cache = build_affinity_cache(prev, train, train, config.kernel, config.workers);
    art.caches.push_back(write("cache", r, serialize_cache(cache)));
    CacheWeighter weighter(cache, train, &prev);
    EmbeddingModel next =
        train_warp(train, config.train_config(r), weighter, config.warm_start ? &prev : nullptr);
    art.models.push_back(write("model", r, serialize_model(next)));
    prev = std::move(next);
  }

  Manifest manifest;
  manifest.entries.push_back(art.models[0]);
  for (std::size_t r = 1; r < config.rounds; ++r) {
    manifest.entries.push_back(art.caches[r - 1]);
    manifest.entries.push_back(art.models[r]);
  }
  manifest.cfg = detail::config_lines(config);
  text::write_file(art.manifest_path().string(), serialize_manifest(manifest));
  return art;
}

/// Reads a manifest and checks the whole chain: every file hashes to its
/// recorded value and every cache's fingerprint names its source model.
inline PipelineArtifacts load_pipeline(const std::filesystem::path& dir) {
  PipelineArtifacts art;
  art.dir = dir;
  const Manifest m = parse_manifest(text::read_file(art.manifest_path().string()));
  for (const auto& e : m.entries) {
    const auto content = text::read_file((dir / e.path).string());
    if (content_hash(content) != e.hash) throw ArtifactError(e.path + " does not match its manifest hash");
    if (e.kind == "model") {
      if (e.round != art.models.size()) throw ArtifactError("manifest models out of order");
      art.models.push_back(e);
    } else {
      if (e.round != art.caches.size() + 1 || e.round > art.models.size())
        throw ArtifactError("manifest caches out of order");
      verify_fingerprint(parse_cache(content), art.models[e.round - 1].hash);
      art.caches.push_back(e);
    }
  }
  if (art.models.empty()) throw ArtifactError("manifest lists no models");
  return art;
}

/// G for queries outside the training set: neighbor lists against `train`
/// in the embedding of the model the training cache was built from, with the
/// training cache's kernel settings (self exclusion off). Owns its model and
/// lists; `train` must outlive it.
class TestWeighter {
public:
  TestWeighter(EmbeddingModel base, const std::string& base_hash, const AffinityCache& train_cache,
               const Dataset& train, const Dataset& queries, std::size_t workers = 1)
      : base_(std::make_shared<EmbeddingModel>(std::move(base))) {
    verify_fingerprint(train_cache, base_hash);
    KernelConfig cfg = train_cache.config;
    cfg.exclude_self = false;
    lists_ = std::make_shared<AffinityCache>(build_affinity_cache(*base_, train, queries, cfg, workers));
    affinity_ = std::make_shared<Affinity>(train, cfg, base_.get());
  }

  double operator()(const Example& query, LabelId label) const { return (*affinity_)(lists_->at(query.id), label); }

  const AffinityCache& lists() const { return *lists_; }
  const EmbeddingModel& base_model() const { return *base_; }

private:
  std::shared_ptr<EmbeddingModel> base_;
  std::shared_ptr<AffinityCache> lists_;
  std::shared_ptr<Affinity> affinity_;
};

inline TestWeighter make_test_weighter(const PipelineArtifacts& art, std::size_t round, const Dataset& train,
                                       const Dataset& queries, std::size_t workers = 1) {
  if (round < 1 || round >= art.models.size()) throw ArtifactError("no affinity round " + std::to_string(round));
  const auto model_bytes = text::read_file(art.model_path(round - 1).string());
  const auto model_hash = content_hash(model_bytes);
  if (model_hash != art.models[round - 1].hash) throw ArtifactError("model file changed since the pipeline ran");
  const AffinityCache cache = load_cache(art.cache_path(round).string());
  return TestWeighter(parse_model(model_bytes), model_hash, cache, train, queries, workers);
}

} // namespace awe
