#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "racap/audio.hpp"
#include "racap/checkpoint.hpp"
#include "racap/log.hpp"
#include "racap/optim.hpp"

namespace racap {

/// Single encoder layer over frames, flattened and unit-normalized.
struct EmbedderParams {
  EncoderLayerParams layer;
  double dropout = 0.3;
  std::size_t feature_dim = 0;
  std::size_t frames = 0;

  static EmbedderParams init(std::size_t feature_dim, std::size_t frames, std::size_t heads, std::size_t ffn_dim,
                             double dropout, double stddev, Rng& rng) {
    return {EncoderLayerParams::init(feature_dim, heads, ffn_dim, stddev, rng), dropout, feature_dim, frames};
  }

  std::size_t embedding_dim() const { return feature_dim * frames; }

  NamedTensors parameters() const {
    NamedTensors out;
    layer.collect(out, "embed");
    return out;
  }
};

/// Returns a [1 x D_a*T] unit vector.
inline Tensor embed(const EmbedderParams& p, const AudioFeatureSequence& phi,
                    const ForwardMode& mode = ForwardMode::eval()) {
  require_shape(phi.frames.ndim() == 2 && phi.feature_dim() == p.feature_dim,
                "audio features " + shape_str(phi.frames.dims()) + " do not match embedder dim " +
                    std::to_string(p.feature_dim));
  require_shape(phi.num_frames() == p.frames, "audio has " + std::to_string(phi.num_frames()) +
                                                  " frames, embedder expects " + std::to_string(p.frames));
  const Tensor h = transformer_encoder_layer(p.layer, maybe_dropout(phi.frames, p.dropout, mode));
  return l2_normalize(reshape(h, {1, p.embedding_dim()}));
}

/// Squared Euclidean distance, differentiable.
inline Tensor sq_l2(const Tensor& a, const Tensor& b) {
  require_shape(a.size() == b.size(), "sq_l2 size mismatch");
  const Tensor d = a - b;
  return dot(d, d);
}

inline double sq_l2_value(std::span<const double> a, std::span<const double> b) {
  require_shape(a.size() == b.size(), "sq_l2 size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// max(0, D(a,p) - D(a,n) + margin).
inline Tensor triplet_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negative, double margin) {
  return relu(add_scalar(sq_l2(anchor, positive) - sq_l2(anchor, negative), margin));
}

struct NegativeCandidate {
  std::size_t id = 0;
  double distance = 0.0;
};

enum class NegativeKind { kSemiHard, kNearestBeyondPositive, kFarthest };

struct NegativeChoice {
  std::size_t id = 0;
  double distance = 0.0;
  NegativeKind kind = NegativeKind::kSemiHard;
};

/// Uniform pick among negatives with d_ap <= d_an < d_ap + margin. When
/// none qualifies, the nearest negative at or beyond d_ap is taken, else
/// the farthest one. Ties go to the smaller id.
inline NegativeChoice select_semi_hard_negative(double d_ap, std::span<const NegativeCandidate> negatives,
                                                double margin, Rng& rng) {
  require(!negatives.empty(), "cannot select a negative from an empty pool");
  std::vector<NegativeCandidate> window;
  for (const auto& n : negatives)
    if (n.distance >= d_ap && n.distance < d_ap + margin) window.push_back(n);
  if (!window.empty()) {
    const auto& pick = window[std::uniform_int_distribution<std::size_t>(0, window.size() - 1)(rng)];
    return {pick.id, pick.distance, NegativeKind::kSemiHard};
  }
  const NegativeCandidate* nearest = nullptr;
  const NegativeCandidate* farthest = nullptr;
  for (const auto& n : negatives) {
    if (n.distance >= d_ap &&
        (!nearest || n.distance < nearest->distance || (n.distance == nearest->distance && n.id < nearest->id)))
      nearest = &n;
    if (!farthest || n.distance > farthest->distance || (n.distance == farthest->distance && n.id < farthest->id))
      farthest = &n;
  }
  if (nearest) return {nearest->id, nearest->distance, NegativeKind::kNearestBeyondPositive};
  return {farthest->id, farthest->distance, NegativeKind::kFarthest};
}

/// Pool of embedder training items plus, per anchor, the pool indices
/// labeled similar. Anchors may come from outside the pool (validation).
struct TripletPool {
  std::vector<AudioFeatureSequence> features;
};

struct TripletAnchors {
  std::vector<AudioFeatureSequence> features;
  std::vector<std::vector<std::size_t>> similar;  // pool indices
  std::vector<std::optional<std::size_t>> self;   // pool index of the anchor itself, if any
};

struct TripletConfig {
  double margin = 0.3;
  std::size_t batch = 128;
  std::size_t epochs = 200;
  double lr = 1e-4;
};

/// One mined negative, kept for auditing the selection rule.
struct SelectionRecord {
  double d_ap = 0.0;
  double d_an = 0.0;
  NegativeKind kind = NegativeKind::kSemiHard;
};

struct MiningStats {
  std::size_t semi_hard = 0;
  std::size_t fallback_nearest = 0;
  std::size_t fallback_farthest = 0;
  std::vector<SelectionRecord> records;

  std::size_t total() const { return semi_hard + fallback_nearest + fallback_farthest; }
  void add(double d_ap, const NegativeChoice& c) {
    records.push_back({d_ap, c.distance, c.kind});
    switch (c.kind) {
      case NegativeKind::kSemiHard: ++semi_hard; break;
      case NegativeKind::kNearestBeyondPositive: ++fallback_nearest; break;
      case NegativeKind::kFarthest: ++fallback_farthest; break;
    }
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
};

struct RetrievalTrainResult {
  EmbedderParams params;
  std::size_t best_epoch = 0;
  double best_valid_loss = 0.0;
  std::size_t skipped_anchors = 0;
  MiningStats mining;
  std::vector<EpochRecord> curve;
};

namespace detail {

inline std::vector<std::size_t> negatives_of(std::size_t pool_size, const std::vector<std::size_t>& similar,
                                             std::optional<std::size_t> self) {
  std::vector<std::size_t> out;
  std::size_t s = 0;
  for (std::size_t j = 0; j < pool_size; ++j) {
    while (s < similar.size() && similar[s] < j) ++s;
    if ((s < similar.size() && similar[s] == j) || self == j) continue;
    out.push_back(j);
  }
  return out;
}

inline std::vector<std::vector<double>> embed_all(const EmbedderParams& p,
                                                  const std::vector<AudioFeatureSequence>& items) {
  std::vector<std::vector<double>> out;
  out.reserve(items.size());
  for (const auto& f : items) out.push_back(embed(p, f).values());
  return out;
}

inline void check_finite(double loss, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(loss)) {
    log().error("non-finite triplet loss at epoch {} batch {}", epoch, batch);
    throw NumericError("non-finite triplet loss at epoch " + std::to_string(epoch) + ", batch " +
                       std::to_string(batch));
  }
}

}  // namespace detail

/// Mean hinge over every (anchor, similar, not-similar) triple, with all
/// embeddings computed without dropout. Zero when no triple exists.
inline double exhaustive_triplet_loss(const EmbedderParams& p, const TripletPool& pool,
                                      const TripletAnchors& anchors, double margin) {
  const auto pool_emb = detail::embed_all(p, pool.features);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t a = 0; a < anchors.features.size(); ++a) {
    const auto& pos = anchors.similar[a];
    const auto neg = detail::negatives_of(pool.features.size(), pos, anchors.self[a]);
    if (pos.empty() || neg.empty()) continue;
    const auto e = anchors.self[a] ? pool_emb[*anchors.self[a]] : embed(p, anchors.features[a]).values();
    std::vector<double> d_neg;
    for (auto n : neg) d_neg.push_back(sq_l2_value(e, pool_emb[n]));
    for (auto q : pos) {
      const double d_ap = sq_l2_value(e, pool_emb[q]);
      for (double d_an : d_neg) total += std::max(0.0, d_ap - d_an + margin);
      count += d_neg.size();
    }
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

/// Triplet training with semi-hard mining. Returns the parameters with the
/// lowest validation loss (the last epoch's when there is no validation set).
inline RetrievalTrainResult train_retrieval(EmbedderParams params, const TripletPool& pool,
                                            const TripletAnchors& train, const TripletAnchors& valid,
                                            const TripletConfig& cfg, std::uint64_t seed) {
  require(cfg.margin >= 0.0 && cfg.batch > 0, "invalid triplet configuration");
  Rng rng(seed);
  params.layer = params.layer.clone();
  RetrievalTrainResult result;

  std::vector<std::size_t> usable;
  std::vector<std::vector<std::size_t>> negatives(train.features.size());
  for (std::size_t a = 0; a < train.features.size(); ++a) {
    negatives[a] = detail::negatives_of(pool.features.size(), train.similar[a], train.self[a]);
    if (!train.similar[a].empty() && !negatives[a].empty()) usable.push_back(a);
  }
  result.skipped_anchors = train.features.size() - usable.size();
  if (result.skipped_anchors > 0)
    log().info("triplet training: skipping {} anchors without a positive or negative", result.skipped_anchors);
  if (usable.empty()) throw DataError("triplet training has no usable anchors");

  bool has_valid = false;
  for (std::size_t a = 0; a < valid.features.size(); ++a)
    has_valid = has_valid || (!valid.similar[a].empty() &&
                              !detail::negatives_of(pool.features.size(), valid.similar[a], valid.self[a]).empty());
  const NamedTensors named = params.parameters();
  set_trainable(named, true);
  Adam opt(tensors_of(named), LrSchedule::constant(cfg.lr));

  auto snapshot = [&] {
    EmbedderParams copy = params;
    copy.layer = params.layer.clone();
    return copy;
  };

  double best = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(usable.begin(), usable.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < usable.size(); start += cfg.batch, ++batches) {
      const std::size_t end = std::min(usable.size(), start + cfg.batch);
      const auto pool_emb = detail::embed_all(params, pool.features);
      const ForwardMode mode = ForwardMode::train(rng);
      std::vector<Tensor> losses;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t a = usable[k];
        const auto anchor_emb = train.self[a] ? pool_emb[*train.self[a]] : embed(params, train.features[a]).values();
        const auto& pos = train.similar[a];
        const std::size_t p = pos[std::uniform_int_distribution<std::size_t>(0, pos.size() - 1)(rng)];
        const double d_ap = sq_l2_value(anchor_emb, pool_emb[p]);
        std::vector<NegativeCandidate> cands;
        for (auto n : negatives[a]) cands.push_back({n, sq_l2_value(anchor_emb, pool_emb[n])});
        const NegativeChoice choice = select_semi_hard_negative(d_ap, cands, cfg.margin, rng);
        result.mining.add(d_ap, choice);
        losses.push_back(triplet_loss(embed(params, train.features[a], mode), embed(params, pool.features[p], mode),
                                      embed(params, pool.features[choice.id], mode), cfg.margin));
      }
      const Tensor loss = scale(add_n(losses), 1.0 / static_cast<double>(losses.size()));
      detail::check_finite(loss.item(), epoch, batches);
      opt.zero_grad();
      loss.backward();
      opt.step(epoch);
      epoch_loss += loss.item();
    }
    EpochRecord rec{epoch, epoch_loss / static_cast<double>(batches), 0.0};
    rec.valid_loss = has_valid ? exhaustive_triplet_loss(params, pool, valid, cfg.margin) : rec.train_loss;
    detail::check_finite(rec.valid_loss, epoch, batches);
    result.curve.push_back(rec);
    log().debug("triplet epoch {} train {:.6f} valid {:.6f}", epoch, rec.train_loss, rec.valid_loss);
    if (rec.valid_loss <= best || !has_valid) {
      best = rec.valid_loss;
      result.best_epoch = epoch;
      result.params = snapshot();
    }
  }
  if (cfg.epochs == 0) {
    result.params = snapshot();
    best = exhaustive_triplet_loss(params, pool, has_valid ? valid : train, cfg.margin);
  }
  result.best_valid_loss = best;
  set_trainable(params.parameters(), false);
  set_trainable(result.params.parameters(), false);
  log().info("triplet training: {} semi-hard negatives, {} nearest fallbacks, {} farthest fallbacks",
             result.mining.semi_hard, result.mining.fallback_nearest, result.mining.fallback_farthest);
  return result;
}

struct RetrievalIndex {
  std::vector<std::string> ids;
  Tensor embeddings;  // [n x dim], unit rows
  std::vector<std::vector<std::string>> captions;

  std::size_t size() const { return ids.size(); }
};

inline RetrievalIndex build_index(const EmbedderParams& p, const std::vector<std::string>& ids,
                                  const std::vector<AudioFeatureSequence>& features,
                                  const std::vector<std::vector<std::string>>& captions) {
  require(!ids.empty(), "cannot build an index from an empty dataset");
  require(ids.size() == features.size() && ids.size() == captions.size(), "index inputs differ in length");
  RetrievalIndex idx{ids, Tensor({ids.size(), p.embedding_dim()}), captions};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto e = embed(p, features[i]).values();
    std::copy(e.begin(), e.end(), idx.embeddings.data().begin() + static_cast<std::ptrdiff_t>(i * e.size()));
  }
  std::vector<std::string> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), "index ids must be unique");
  return idx;
}

/// `<stem>.ract` holds the embedding matrix, `<stem>.json` the ids and captions.
inline void save_index(const std::filesystem::path& stem, const RetrievalIndex& idx) {
  const CheckpointPaths paths(stem);
  write_file_atomic(paths.tensors, encode_archive({{"index.embeddings", idx.embeddings}}));
  nlohmann::json j{{"ids", idx.ids}, {"captions", idx.captions}};
  write_file_atomic(paths.meta, j.dump(1) + "\n");
}

inline RetrievalIndex load_index(const std::filesystem::path& stem) {
  const CheckpointPaths paths(stem);
  RetrievalIndex idx;
  idx.embeddings = archive_get(load_archive(paths.tensors), "index.embeddings");
  try {
    const auto j = nlohmann::json::parse(read_file(paths.meta));
    idx.ids = j.at("ids").get<std::vector<std::string>>();
    idx.captions = j.at("captions").get<std::vector<std::vector<std::string>>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed index sidecar " + paths.meta.string() + ": " + e.what());
  }
  if (idx.embeddings.ndim() != 2 || idx.embeddings.rows() != idx.ids.size() || idx.captions.size() != idx.ids.size())
    throw DataError("index sidecar and embedding matrix disagree in size");
  return idx;
}

struct RetrievalHit {
  std::size_t row = 0;
  std::string id;
  double distance = 0.0;
};

/// K nearest index rows by squared distance, ties by ascending id. The row
/// whose id equals `exclude` is never returned.
inline std::vector<RetrievalHit> retrieve_topk(const RetrievalIndex& idx, std::span<const double> query,
                                               std::size_t k, const std::optional<std::string>& exclude = {}) {
  require(k >= 1, "K must be at least 1");
  require_shape(idx.size() > 0 && query.size() == idx.embeddings.cols(), "query dim does not match the index");
  std::vector<RetrievalHit> hits;
  hits.reserve(idx.size());
  const std::size_t dim = idx.embeddings.cols();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (exclude && idx.ids[i] == *exclude) continue;
    hits.push_back({i, idx.ids[i], sq_l2_value(query, idx.embeddings.data().subspan(i * dim, dim))});
  }
  require(hits.size() >= k, "index has " + std::to_string(hits.size()) + " eligible items, fewer than K=" +
                                std::to_string(k));
  auto before = [](const RetrievalHit& a, const RetrievalHit& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  };
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), before);
  hits.resize(k);
  return hits;
}

}  // namespace racap
