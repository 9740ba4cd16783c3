#pragma once

// End-to-end orchestration shared by the command-line tool and the tests.
// Every function here is a pure function of (config, inputs, seed).

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "racap/config.hpp"
#include "racap/decoder.hpp"
#include "racap/manifest.hpp"
#include "racap/metrics.hpp"
#include "racap/retrieval.hpp"
#include "racap/similarity.hpp"
#include "racap/synthetic.hpp"

namespace racap {

/// A dataset directory loaded against a config: manifest, vocabulary,
/// frozen LM and every item's audio features.
struct Workspace {
  DatasetManifest manifest;
  TinyTokenizer tokenizer;
  TinyCausalLm lm;
  std::vector<AudioFeatureSequence> features;

  static Workspace load(const std::filesystem::path& manifest_path, const PipelineConfig& cfg) {
    DatasetManifest m = load_manifest(manifest_path);
    const DatasetLayout layout{m.base_dir};
    TinyTokenizer tok = TinyTokenizer::load(layout.vocab());
    TinyCausalLm lm = TinyCausalLm::load(layout.lm_stem());
    if (lm.vocab_size() != tok.vocab_size())
      throw DataError(fmt::format("LM vocabulary {} differs from vocab.txt size {}", lm.vocab_size(), tok.vocab_size()));
    if (cfg.lm_dim != lm.feature_dim())
      throw ConfigError(fmt::format("model.D_l={} but the dataset's LM has width {}", cfg.lm_dim, lm.feature_dim()));
    if (cfg.vocab != 0 && cfg.vocab != tok.vocab_size())
      throw ConfigError(fmt::format("model.vocab={} but the dataset vocabulary has {} tokens", cfg.vocab, tok.vocab_size()));
    std::vector<AudioFeatureSequence> feats;
    feats.reserve(m.rows.size());
    for (const auto& row : m.rows)
      feats.push_back(ingest_precomputed_features(m.resolve(row), cfg.audio_dim, cfg.audio_frames));
    return {std::move(m), std::move(tok), std::move(lm), std::move(feats)};
  }

  std::vector<std::size_t> rows(Split s) const { return manifest.indices(s); }
  const std::string& id(std::size_t row) const { return manifest.rows[row].id; }
  const std::vector<std::string>& captions(std::size_t row) const { return manifest.rows[row].captions; }
  std::vector<TokenId> encode(const std::string& text) const { return tokenizer.encode(text); }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& r : manifest.rows) out.push_back(r.id);
    return out;
  }
};

inline std::size_t effective_vocab(const PipelineConfig& cfg, const Workspace& ws) {
  return cfg.vocab == 0 ? ws.tokenizer.vocab_size() : cfg.vocab;
}

// ---------------------------------------------------------------- similarity

/// Scores every manifest item's first caption against every other.
inline SimilarityArtifacts prepare_similarity(const Workspace& ws, const PipelineConfig& cfg) {
  std::vector<TokenizedCaption> caps;
  for (const auto& row : ws.manifest.rows) caps.push_back(ws.tokenizer.tokenize(row.captions.front()));
  const LmTextEncoder enc(ws.lm);
  return compute_similarity(caps, enc, cfg.similarity_threshold);
}

inline void save_similarity(const std::filesystem::path& dir, const SimilarityArtifacts& s, const Workspace& ws,
                            const PipelineConfig& cfg) {
  write_file_atomic(dir / "similarity.ract", encode_archive(s.to_archive()));
  nlohmann::json j{{"ids", ws.ids()},
                   {"threshold", s.labels.threshold},
                   {"similar_pairs", s.labels.count()},
                   {"config_hash", cfg.hash()},
                   {"lm_fingerprint", fmt::format("{:016x}", ws.lm.fingerprint())}};
  write_file_atomic(dir / "similarity.json", j.dump(1) + "\n");
}

/// Loads similarity artifacts and checks they were computed for this manifest.
inline SimilarityArtifacts load_similarity(const std::filesystem::path& dir, const Workspace& ws) {
  SimilarityArtifacts s = SimilarityArtifacts::from_archive(load_archive(dir / "similarity.ract"));
  std::vector<std::string> ids;
  try {
    ids = nlohmann::json::parse(read_file(dir / "similarity.json")).at("ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed " + (dir / "similarity.json").string() + ": " + e.what());
  }
  if (ids != ws.ids()) throw DataError("similarity labels were computed for a different manifest");
  return s;
}

/// Pool positions (indices into `pool_rows`) labeled similar to `row`.
inline std::vector<std::size_t> similar_in_pool(const SimilarLabelMatrix& labels, std::size_t row,
                                                const std::vector<std::size_t>& pool_rows) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < pool_rows.size(); ++j)
    if (labels.similar(row, pool_rows[j])) out.push_back(j);
  return out;
}

// ----------------------------------------------------------------- retrieval

inline TripletConfig triplet_config(const PipelineConfig& cfg) {
  return {cfg.triplet_margin, cfg.triplet_batch, cfg.triplet_epochs, cfg.triplet_lr};
}

inline EmbedderParams init_embedder(const PipelineConfig& cfg, Rng& rng) {
  return EmbedderParams::init(cfg.audio_dim, cfg.audio_frames, cfg.embed_heads, cfg.embed_ffn_dim, cfg.embed_dropout,
                              cfg.init_stddev(), rng);
}

struct RetrievalRun {
  RetrievalTrainResult train;
  RetrievalIndex index;
};

inline RetrievalIndex index_training_items(const Workspace& ws, const EmbedderParams& p) {
  std::vector<std::string> ids;
  std::vector<AudioFeatureSequence> feats;
  std::vector<std::vector<std::string>> caps;
  for (auto r : ws.rows(Split::kTrain)) {
    ids.push_back(ws.id(r));
    feats.push_back(ws.features[r]);
    caps.push_back(ws.captions(r));
  }
  return build_index(p, ids, feats, caps);
}

inline RetrievalRun run_train_retrieval(const Workspace& ws, const SimilarityArtifacts& sim, const PipelineConfig& cfg,
                                        std::uint64_t seed) {
  const auto train_rows = ws.rows(Split::kTrain);
  const auto valid_rows = ws.rows(Split::kValid);
  TripletPool pool;
  TripletAnchors train, valid;
  for (std::size_t k = 0; k < train_rows.size(); ++k) {
    pool.features.push_back(ws.features[train_rows[k]]);
    train.features.push_back(ws.features[train_rows[k]]);
    train.similar.push_back(similar_in_pool(sim.labels, train_rows[k], train_rows));
    train.self.push_back(k);
  }
  for (auto r : valid_rows) {
    valid.features.push_back(ws.features[r]);
    valid.similar.push_back(similar_in_pool(sim.labels, r, train_rows));
    valid.self.push_back(std::nullopt);
  }
  Rng rng(seed);
  EmbedderParams init = init_embedder(cfg, rng);
  RetrievalRun run{train_retrieval(init, pool, train, valid, triplet_config(cfg), rng()), {}};
  run.index = index_training_items(ws, run.train.params);
  return run;
}

inline void save_embedder(const std::filesystem::path& stem, const EmbedderParams& p, const CheckpointMeta& base) {
  CheckpointMeta meta = base;
  meta.kind = "embedder";
  meta.extra["feature_dim"] = p.feature_dim;
  meta.extra["frames"] = p.frames;
  meta.extra["heads"] = p.layer.attention.num_heads;
  meta.extra["ffn_dim"] = p.layer.ff_in.out_dim();
  meta.extra["dropout"] = p.dropout;
  save_checkpoint(stem, p.parameters(), meta);
}

inline EmbedderParams load_embedder(const std::filesystem::path& stem, CheckpointMeta* meta_out = nullptr) {
  const Checkpoint c = load_checkpoint(stem);
  if (c.meta.kind != "embedder") throw DataError(stem.string() + " is not an embedder checkpoint");
  EmbedderParams p;
  try {
    Rng rng(0);
    p = EmbedderParams::init(c.meta.extra.at("feature_dim"), c.meta.extra.at("frames"), c.meta.extra.at("heads"),
                             c.meta.extra.at("ffn_dim"), c.meta.extra.at("dropout"), 1.0, rng);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("embedder checkpoint metadata incomplete: " + std::string(e.what()));
  }
  restore_parameters(p.parameters(), c.tensors);
  set_trainable(p.parameters(), false);
  if (meta_out) *meta_out = c.meta;
  return p;
}

inline std::string curve_tsv(const std::vector<std::pair<double, double>>& curve) {
  std::string out = "epoch\ttrain_loss\tvalid_loss\n";
  for (std::size_t e = 0; e < curve.size(); ++e)
    out += fmt::format("{}\t{:.17g}\t{:.17g}\n", e, curve[e].first, curve[e].second);
  return out;
}

/// Writes embedder.*, index.*, retrieval_curve.tsv and mining.json into `dir`.
inline void save_retrieval_run(const std::filesystem::path& dir, const RetrievalRun& run, const PipelineConfig& cfg,
                               std::uint64_t seed) {
  CheckpointMeta meta{"embedder", cfg.hash(), seed, run.train.best_epoch, run.train.best_valid_loss, {}};
  meta.extra["optimizer"] = "adam";
  meta.extra["skipped_anchors"] = run.train.skipped_anchors;
  save_embedder(dir / "embedder", run.train.params, meta);
  save_index(dir / "index", run.index);
  std::vector<std::pair<double, double>> curve;
  for (const auto& r : run.train.curve) curve.emplace_back(r.train_loss, r.valid_loss);
  write_file_atomic(dir / "retrieval_curve.tsv", curve_tsv(curve));
  const auto& m = run.train.mining;
  std::size_t violations = 0;
  for (const auto& r : m.records)
    if (r.kind == NegativeKind::kSemiHard && !(r.d_an >= r.d_ap && r.d_an < r.d_ap + cfg.triplet_margin)) ++violations;
  nlohmann::json j{{"selections", m.total()},
                   {"semi_hard", m.semi_hard},
                   {"fallback_nearest", m.fallback_nearest},
                   {"fallback_farthest", m.fallback_farthest},
                   {"semi_hard_violations", violations},
                   {"skipped_anchors", run.train.skipped_anchors}};
  write_file_atomic(dir / "mining.json", j.dump(1) + "\n");
}

struct LoadedRetrieval {
  EmbedderParams embedder;
  RetrievalIndex index;
};

inline LoadedRetrieval load_retrieval(const std::filesystem::path& dir) {
  return {load_embedder(dir / "embedder"), load_index(dir / "index")};
}

// ------------------------------------------------------------------- decoder

inline DecoderTrainConfig decoder_train_config(const PipelineConfig& cfg) {
  DecoderTrainConfig d;
  d.smoothing = cfg.decoder_lambda;
  d.batch = cfg.decoder_batch;
  d.epochs = cfg.decoder_epochs;
  d.schedule = LrSchedule::cosine(cfg.decoder_lr_max, cfg.decoder_lr_min, cfg.decoder_lr_period);
  d.guidance_k = cfg.retrieval_k;
  return d;
}

inline DecoderParams init_decoder(const Workspace& ws, const PipelineConfig& cfg, Rng& rng) {
  return DecoderParams::init(ws.lm, cfg.audio_dim, cfg.decoder_reduced_dim, cfg.decoder_heads, cfg.decoder_dropout,
                             cfg.init_stddev(), rng);
}

/// Training targets are every caption of every train item; validation uses
/// every caption of every valid item. Guidance comes from train items.
inline DecoderData decoder_data(const Workspace& ws, const SimilarLabelMatrix& labels) {
  const auto train_rows = ws.rows(Split::kTrain);
  DecoderData d;
  for (auto r : train_rows) {
    std::vector<std::vector<TokenId>> caps;
    for (const auto& c : ws.captions(r)) caps.push_back(ws.encode(c));
    d.guidance_pool.push_back(std::move(caps));
  }
  auto add = [&](std::vector<DecoderExample>& out, std::size_t r) {
    const auto similar = similar_in_pool(labels, r, train_rows);
    for (const auto& c : ws.captions(r)) out.push_back({ws.features[r], ws.encode(c), similar});
  };
  for (auto r : train_rows) add(d.train, r);
  for (auto r : ws.rows(Split::kValid)) add(d.valid, r);
  return d;
}

inline DecoderTrainResult run_train_decoder(const Workspace& ws, const SimilarityArtifacts& sim,
                                            const PipelineConfig& cfg, std::uint64_t seed) {
  const auto before = ws.lm.fingerprint();
  Rng rng(seed);
  DecoderParams init = init_decoder(ws, cfg, rng);
  DecoderTrainResult r = train_decoder(ws.lm, init, decoder_data(ws, sim.labels), decoder_train_config(cfg), rng());
  if (ws.lm.fingerprint() != before) throw Error("frozen language model changed during decoder training");
  return r;
}

inline void save_decoder(const std::filesystem::path& dir, const DecoderTrainResult& r, const Workspace& ws,
                         const PipelineConfig& cfg, std::uint64_t seed) {
  CheckpointMeta meta{"decoder", cfg.hash(), seed, r.best_epoch, r.best_valid_loss, {}};
  meta.extra["lm_fingerprint"] = fmt::format("{:016x}", ws.lm.fingerprint());
  meta.extra["skipped_items"] = r.skipped_items;
  meta.extra["resampled_items"] = r.resampled_items;
  save_checkpoint(dir / "decoder", r.params.parameters(), meta);
  write_file_atomic(dir / "decoder_curve.tsv", curve_tsv(r.curve));
}

inline DecoderParams load_decoder(const std::filesystem::path& dir, const Workspace& ws, const PipelineConfig& cfg) {
  const Checkpoint c = load_checkpoint(dir / "decoder");
  if (c.meta.kind != "decoder") throw DataError((dir / "decoder").string() + " is not a decoder checkpoint");
  check_config_hash(c.meta, cfg.hash());
  if (c.meta.extra.value("lm_fingerprint", "") != fmt::format("{:016x}", ws.lm.fingerprint()))
    throw DataError("decoder checkpoint was trained against a different language model");
  Rng rng(0);
  DecoderParams p = init_decoder(ws, cfg, rng);
  restore_parameters(p.parameters(), c.tensors);
  set_trainable(p.parameters(), false);
  return p;
}

// ---------------------------------------------------------------- evaluation

enum class Scope { kRetrievedGuidance, kRetrievalOnly, kOracleGuidance };

inline std::optional<Scope> parse_scope(std::string_view s) {
  if (s == "i") return Scope::kRetrievedGuidance;
  if (s == "ii") return Scope::kRetrievalOnly;
  if (s == "iii") return Scope::kOracleGuidance;
  return std::nullopt;
}

struct Prediction {
  std::string id;
  std::string text;
  std::vector<std::string> guidance;
};

/// Top-K index hits for a manifest row. Rows that are themselves in the
/// index never retrieve their own entry.
inline std::vector<RetrievalHit> retrieve_for_row(const Workspace& ws, const LoadedRetrieval& ret, std::size_t row,
                                                  std::size_t k) {
  const auto& id = ws.id(row);
  const bool in_index = std::find(ret.index.ids.begin(), ret.index.ids.end(), id) != ret.index.ids.end();
  const auto query = embed(ret.embedder, ws.features[row]).values();
  auto hits = retrieve_topk(ret.index, query, k, in_index ? std::optional(id) : std::nullopt);
  for (const auto& h : hits)
    if (h.id == id) throw Error("leave-one-out violated: " + id + " retrieved itself");
  return hits;
}

/// The K training captions closest to the row's first caption by BERTScore
/// F1. Captions of items labeled similar rank ahead of the rest; ties go to
/// the smaller (item id, caption position).
inline std::vector<std::string> oracle_guidance(const Workspace& ws, const SimilarityArtifacts& sim, std::size_t row,
                                                std::size_t k) {
  const LmTextEncoder enc(ws.lm);
  const Tensor query = enc.encode(ws.tokenizer.tokenize(ws.captions(row).front()));
  struct Candidate {
    bool similar;
    double f1;
    std::size_t item, pos;
  };
  std::vector<Candidate> pool;
  for (auto r : ws.rows(Split::kTrain)) {
    if (r == row) continue;
    const auto& caps = ws.captions(r);
    for (std::size_t c = 0; c < caps.size(); ++c)
      pool.push_back({sim.labels.similar(row, r) != 0, bertscore(enc.encode(ws.tokenizer.tokenize(caps[c])), query).f1, r, c});
  }
  require(pool.size() >= k, "not enough training captions for oracle guidance");
  std::sort(pool.begin(), pool.end(), [&](const Candidate& a, const Candidate& b) {
    if (a.similar != b.similar) return a.similar;
    if (a.f1 != b.f1) return a.f1 > b.f1;
    if (a.item != b.item) return ws.id(a.item) < ws.id(b.item);
    return a.pos < b.pos;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(ws.captions(pool[i].item)[pool[i].pos]);
  return out;
}

struct ScopeInputs {
  const LoadedRetrieval* retrieval = nullptr;     // scopes i and ii
  const DecoderParams* decoder = nullptr;         // scopes i and iii
  const SimilarityArtifacts* similarity = nullptr;  // scope iii
};

inline std::vector<Prediction> predict(const Workspace& ws, const PipelineConfig& cfg, Scope scope,
                                       const std::vector<std::size_t>& rows, const ScopeInputs& in) {
  if (scope != Scope::kOracleGuidance && !in.retrieval) throw DataError("this scope needs a retrieval index");
  if (scope != Scope::kRetrievalOnly && !in.decoder) throw DataError("this scope needs a decoder checkpoint");
  if (scope == Scope::kOracleGuidance && !in.similarity) throw DataError("oracle guidance needs similarity labels");
  const auto gen = decoder_generation(ws.lm, cfg.generate_beam, cfg.generate_max_len);
  std::vector<Prediction> out;
  for (auto row : rows) {
    Prediction p{ws.id(row), "", {}};
    if (scope == Scope::kOracleGuidance) {
      p.guidance = oracle_guidance(ws, *in.similarity, row, cfg.retrieval_k);
    } else {
      const std::size_t k = scope == Scope::kRetrievalOnly ? 1 : cfg.retrieval_k;
      for (const auto& h : retrieve_for_row(ws, *in.retrieval, row, k))
        p.guidance.push_back(in.retrieval->index.captions[h.row].front());
    }
    if (scope == Scope::kRetrievalOnly) {
      p.text = p.guidance.front();
    } else {
      GuidanceCaptions g;
      for (const auto& c : p.guidance) g.captions.push_back(ws.encode(c));
      p.text = ws.tokenizer.decode(generate_caption(ws.lm, *in.decoder, ws.features[row], g, gen));
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline EvalReport evaluate_predictions(const Workspace& ws, const std::vector<Prediction>& preds) {
  std::vector<std::string> cands, ids;
  std::vector<std::vector<std::string>> refs;
  for (const auto& p : preds) {
    const auto row = ws.manifest.find(p.id);
    if (!row) throw DataError("prediction for unknown id " + p.id);
    ids.push_back(p.id);
    cands.push_back(p.text);
    refs.push_back(ws.captions(*row));
  }
  return evaluate_corpus(cands, refs, ids);
}

inline std::string predictions_jsonl(const std::vector<Prediction>& preds) {
  std::string out;
  for (const auto& p : preds) out += nlohmann::json{{"id", p.id}, {"text", p.text}, {"guidance", p.guidance}}.dump() + "\n";
  return out;
}

inline std::string references_jsonl(const Workspace& ws, const std::vector<std::size_t>& rows) {
  std::string out;
  for (auto r : rows) out += nlohmann::json{{"id", ws.id(r)}, {"texts", ws.captions(r)}}.dump() + "\n";
  return out;
}

/// Reads {id, text} or {id, texts} records keyed by id, in file order.
inline std::vector<std::pair<std::string, std::vector<std::string>>> read_text_records(
    const std::filesystem::path& path, bool multi) {
  const std::string text = read_file(path);
  std::vector<std::pair<std::string, std::vector<std::string>>> out;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string::npos) nl = text.size();
    const std::string line = text.substr(start, nl - start);
    start = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (multi)
        out.emplace_back(j.at("id").get<std::string>(), j.at("texts").get<std::vector<std::string>>());
      else
        out.emplace_back(j.at("id").get<std::string>(), std::vector<std::string>{j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(fmt::format("{} line {}: {}", path.string(), line_no, e.what()));
    }
  }
  return out;
}

/// Scores candidate records against reference records matched by id.
inline EvalReport evaluate_files(const std::filesystem::path& candidates, const std::filesystem::path& references) {
  const auto cand = read_text_records(candidates, false);
  const auto refs = read_text_records(references, true);
  std::map<std::string, const std::vector<std::string>*> by_id;
  for (const auto& [id, texts] : refs)
    if (!by_id.emplace(id, &texts).second) throw DataError("duplicate reference id " + id);
  std::vector<std::string> texts, ids;
  std::vector<std::vector<std::string>> ref_sets;
  for (const auto& [id, t] : cand) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("no references for candidate id " + id);
    if (it->second->empty()) throw DataError("empty reference list for id " + id);
    ids.push_back(id);
    texts.push_back(t.front());
    ref_sets.push_back(*it->second);
  }
  if (texts.empty()) throw DataError("no candidates to evaluate");
  return evaluate_corpus(texts, ref_sets, ids);
}

inline void save_report(const std::filesystem::path& dir, const EvalReport& r) {
  write_file_atomic(dir / "report.json", r.to_json().dump(1) + "\n");
  write_file_atomic(dir / "scores.tsv", r.table());
}

}  // namespace racap
