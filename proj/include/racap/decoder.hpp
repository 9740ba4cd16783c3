#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "racap/audio.hpp"
#include "racap/beam_search.hpp"
#include "racap/checkpoint.hpp"
#include "racap/lm.hpp"
#include "racap/log.hpp"
#include "racap/optim.hpp"

namespace racap {

/// K guidance captions; the decoder sees them joined by SEP tokens.
struct GuidanceCaptions {
  std::vector<std::vector<TokenId>> captions;

  std::vector<TokenId> joined(TokenId sep) const {
    std::vector<TokenId> out;
    for (std::size_t k = 0; k < captions.size(); ++k) {
      if (k) out.push_back(sep);
      out.insert(out.end(), captions[k].begin(), captions[k].end());
    }
    return out;
  }
};

/// Trainable part of the caption decoder.
struct DecoderParams {
  MhaParams fuse;          // hypothesis features attend over guidance features
  Linear reduce_hyp;       // D_l -> D_r
  Linear reduce_audio;     // D_a -> D_r
  MhaParams audio;         // over D_r
  Linear expand;           // D_r -> D_l
  Linear lmhead;           // D_l -> vocab, no bias
  double dropout = 0.3;

  /// New layers draw from N(0, stddev); lmhead starts as a copy of the
  /// LM's own prediction layer.
  static DecoderParams init(const FrozenLm& lm, std::size_t audio_dim, std::size_t reduced_dim, std::size_t heads,
                            double dropout, double stddev, Rng& rng) {
    const std::size_t d = lm.feature_dim();
    DecoderParams p;
    p.fuse = MhaParams::init(d, d, d, heads, stddev, rng);
    p.reduce_hyp = Linear::init(d, reduced_dim, stddev, rng);
    p.reduce_audio = Linear::init(audio_dim, reduced_dim, stddev, rng);
    p.audio = MhaParams::init(reduced_dim, reduced_dim, reduced_dim, heads, stddev, rng);
    p.expand = Linear::init(reduced_dim, d, stddev, rng);
    p.lmhead.weight = trainable(lm.prediction_head().clone());
    p.dropout = dropout;
    return p;
  }

  std::size_t lm_dim() const { return fuse.d_query(); }
  std::size_t audio_dim() const { return reduce_audio.in_dim(); }
  std::size_t vocab_size() const { return lmhead.out_dim(); }

  NamedTensors parameters() const {
    NamedTensors out;
    fuse.collect(out, "decoder.fuse");
    reduce_hyp.collect(out, "decoder.reduce_hyp");
    reduce_audio.collect(out, "decoder.reduce_audio");
    audio.collect(out, "decoder.audio");
    expand.collect(out, "decoder.expand");
    lmhead.collect(out, "decoder.lmhead");
    return out;
  }

  DecoderParams clone() const {
    return {fuse.clone(),  reduce_hyp.clone(), reduce_audio.clone(), audio.clone(),
            expand.clone(), lmhead.clone(),    dropout};
  }
};

/// Frozen LM features of the joined guidance, [M x D_l].
inline Tensor encode_refs(const FrozenLm& lm, const GuidanceCaptions& refs) {
  const auto tokens = refs.joined(lm.specials().sep);
  require(!tokens.empty(), "guidance captions are empty");
  for (auto t : tokens) require(t < lm.vocab_size(), "guidance token id out of vocabulary");
  return lm.features(tokens).detach();
}

/// Hypothesis positions query the guidance positions.
inline Tensor fuse(const DecoderParams& p, const Tensor& psi_hyps, const Tensor& psi_refs,
                   const ForwardMode& mode = ForwardMode::eval()) {
  return maybe_dropout(multi_head_attention(p.fuse, psi_hyps, psi_refs), p.dropout, mode);
}

/// Reduced fused features query the reduced audio frames; the result is
/// mapped back to D_l.
inline Tensor fuse_audio(const DecoderParams& p, const Tensor& psi, const AudioFeatureSequence& phi,
                         const ForwardMode& mode = ForwardMode::eval()) {
  require_shape(phi.frames.ndim() == 2 && phi.feature_dim() == p.audio_dim(),
                "audio features " + shape_str(phi.frames.dims()) + " vs decoder audio dim " +
                    std::to_string(p.audio_dim()));
  const Tensor attended = multi_head_attention(p.audio, p.reduce_hyp(psi), p.reduce_audio(phi.frames));
  return p.expand(maybe_dropout(attended, p.dropout, mode));
}

/// Next-token logits for every prefix position, [L x V], from precomputed
/// hypothesis features.
inline Tensor decoder_logits_from_features(const DecoderParams& p, const Tensor& psi_hyps, const Tensor& psi_refs,
                                           const AudioFeatureSequence& phi,
                                           const ForwardMode& mode = ForwardMode::eval()) {
  const Tensor psi = fuse(p, psi_hyps, psi_refs, mode);
  return p.lmhead(psi + fuse_audio(p, psi, phi, mode));
}

inline Tensor decoder_logits(const FrozenLm& lm, const DecoderParams& p, const AudioFeatureSequence& phi,
                             const Tensor& psi_refs, std::span<const TokenId> prefix,
                             const ForwardMode& mode = ForwardMode::eval()) {
  require(!prefix.empty() && prefix.front() == lm.specials().bos, "decoder prefix must start with BOS");
  require_shape(p.vocab_size() == lm.vocab_size() && p.lm_dim() == lm.feature_dim(),
                "decoder parameters do not match the language model");
  return decoder_logits_from_features(p, lm.features(prefix), psi_refs, phi, mode);
}

/// p(next token | audio, guidance, prefix); the prefix starts with BOS.
inline std::vector<double> posterior(const FrozenLm& lm, const DecoderParams& p, const AudioFeatureSequence& phi,
                                     const Tensor& psi_refs, std::span<const TokenId> prefix) {
  const Tensor logits = decoder_logits(lm, p, phi, psi_refs, prefix);
  const Tensor last = slice_rows(logits, logits.rows() - 1, 1);
  return softmax(last).values();
}

/// Generation settings for the decoder: specials other than EOS are banned.
inline GenerationConfig decoder_generation(const FrozenLm& lm, std::size_t beam, std::size_t max_len) {
  const auto& sp = lm.specials();
  GenerationConfig g;
  g.beam = beam;
  g.max_len = max_len;
  g.eos = sp.eos;
  g.banned = {sp.pad, sp.bos, sp.sep, sp.unk};
  return g;
}

inline std::vector<TokenId> generate_caption(const FrozenLm& lm, const DecoderParams& p,
                                             const AudioFeatureSequence& phi, const GuidanceCaptions& refs,
                                             const GenerationConfig& gen) {
  const Tensor psi_refs = encode_refs(lm, refs);
  const TokenId bos = lm.specials().bos;
  return beam_search(
      [&](const std::vector<TokenId>& tokens) {
        std::vector<TokenId> prefix{bos};
        prefix.insert(prefix.end(), tokens.begin(), tokens.end());
        return posterior(lm, p, phi, psi_refs, prefix);
      },
      gen);
}

struct DecoderTrainConfig {
  double smoothing = 0.1;
  std::size_t batch = 512;
  std::size_t epochs = 200;
  LrSchedule schedule = LrSchedule::cosine(1e-4, 1e-6, 20);
  std::size_t guidance_k = 5;
};

/// One training or validation target with its audio and the indices of
/// guidance-pool items labeled similar to it.
struct DecoderExample {
  AudioFeatureSequence audio;
  std::vector<TokenId> caption;
  std::vector<std::size_t> similar;
};

struct DecoderData {
  std::vector<std::vector<std::vector<TokenId>>> guidance_pool;  // per pool item, its captions
  std::vector<DecoderExample> train;
  std::vector<DecoderExample> valid;
};

/// Teacher-forcing input and target sequences for one caption.
struct TeacherForcing {
  std::vector<TokenId> input;   // BOS w1 .. wN
  std::vector<TokenId> target;  // w1 .. wN EOS
};

inline TeacherForcing teacher_forcing(const SpecialTokens& sp, const std::vector<TokenId>& caption) {
  TeacherForcing tf;
  tf.input.push_back(sp.bos);
  tf.input.insert(tf.input.end(), caption.begin(), caption.end());
  tf.target = caption;
  tf.target.push_back(sp.eos);
  return tf;
}

/// Draws K guidance captions from the similar items in random order;
/// with fewer than K similar items they are drawn with replacement.
inline GuidanceCaptions sample_guidance(const DecoderData& data, const std::vector<std::size_t>& similar,
                                        std::size_t k, Rng& rng) {
  require(!similar.empty(), "no similar captions to sample guidance from");
  std::vector<std::size_t> items;
  if (similar.size() >= k) {
    items = similar;
    std::shuffle(items.begin(), items.end(), rng);
    items.resize(k);
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, similar.size() - 1);
    for (std::size_t i = 0; i < k; ++i) items.push_back(similar[pick(rng)]);
  }
  GuidanceCaptions g;
  for (auto item : items) {
    const auto& caps = data.guidance_pool.at(item);
    g.captions.push_back(caps[std::uniform_int_distribution<std::size_t>(0, caps.size() - 1)(rng)]);
  }
  return g;
}

/// Mean per-token cross-entropy of one example under teacher forcing.
inline double teacher_forcing_loss(const FrozenLm& lm, const DecoderParams& p, const AudioFeatureSequence& phi,
                                   const GuidanceCaptions& refs, const std::vector<TokenId>& caption,
                                   double smoothing) {
  const auto tf = teacher_forcing(lm.specials(), caption);
  return smoothed_cross_entropy(decoder_logits(lm, p, phi, encode_refs(lm, refs), tf.input), tf.target, smoothing)
      .item();
}

struct DecoderTrainResult {
  DecoderParams params;
  std::size_t best_epoch = 0;
  double best_valid_loss = 0.0;
  std::size_t skipped_items = 0;
  std::size_t resampled_items = 0;  // fewer than K similar captions
  std::vector<std::pair<double, double>> curve;  // (train, valid) per epoch
};

/// Fixed guidance per validation example, drawn once from `seed`.
inline std::vector<std::optional<GuidanceCaptions>> fixed_guidance(const DecoderData& data,
                                                                   const std::vector<DecoderExample>& examples,
                                                                   std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::optional<GuidanceCaptions>> out;
  for (const auto& ex : examples)
    out.push_back(ex.similar.empty() ? std::nullopt : std::optional(sample_guidance(data, ex.similar, k, rng)));
  return out;
}

inline double mean_teacher_forcing_loss(const FrozenLm& lm, const DecoderParams& p,
                                        const std::vector<DecoderExample>& examples,
                                        const std::vector<std::optional<GuidanceCaptions>>& guidance,
                                        double smoothing) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (!guidance[i]) continue;
    total += teacher_forcing_loss(lm, p, examples[i].audio, *guidance[i], examples[i].caption, smoothing);
    ++n;
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

/// Label-smoothed teacher-forcing training with freshly sampled guidance
/// every step. Keeps the parameters with the lowest validation loss (the
/// last epoch's when there is no validation data).
inline DecoderTrainResult train_decoder(const FrozenLm& lm, DecoderParams params, const DecoderData& data,
                                        const DecoderTrainConfig& cfg, std::uint64_t seed) {
  require(cfg.batch > 0 && cfg.guidance_k > 0, "invalid decoder training configuration");
  Rng rng(seed);
  params = params.clone();
  DecoderTrainResult result;

  struct Prepared {
    std::size_t example;
    TeacherForcing tf;
    Tensor psi_hyps;
  };
  std::vector<Prepared> usable;
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    const auto& ex = data.train[i];
    if (ex.similar.empty()) {
      ++result.skipped_items;
      continue;
    }
    if (ex.similar.size() < cfg.guidance_k) ++result.resampled_items;
    auto tf = teacher_forcing(lm.specials(), ex.caption);
    Tensor psi = lm.features(tf.input).detach();
    usable.push_back({i, std::move(tf), std::move(psi)});
  }
  if (result.skipped_items > 0)
    log().info("decoder training: skipping {} items without similar captions", result.skipped_items);
  if (result.resampled_items > 0)
    log().info("decoder training: {} items have fewer than {} similar captions; guidance drawn with replacement",
               result.resampled_items, cfg.guidance_k);
  if (usable.empty()) throw DataError("decoder training has no usable items");

  const auto valid_guidance = fixed_guidance(data, data.valid, cfg.guidance_k, rng());
  const bool has_valid = std::any_of(valid_guidance.begin(), valid_guidance.end(), [](auto& g) { return g.has_value(); });

  const NamedTensors named = params.parameters();
  set_trainable(named, true);
  Adam opt(tensors_of(named), cfg.schedule);
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(usable.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch, ++batches) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      const ForwardMode mode = ForwardMode::train(rng);
      std::vector<Tensor> losses;
      for (std::size_t k = start; k < end; ++k) {
        const Prepared& item = usable[order[k]];
        const DecoderExample& ex = data.train[item.example];
        const GuidanceCaptions refs = sample_guidance(data, ex.similar, cfg.guidance_k, rng);
        const Tensor logits = decoder_logits_from_features(params, item.psi_hyps, encode_refs(lm, refs), ex.audio, mode);
        losses.push_back(smoothed_cross_entropy(logits, item.tf.target, cfg.smoothing));
      }
      const Tensor loss = scale(add_n(losses), 1.0 / static_cast<double>(losses.size()));
      if (!std::isfinite(loss.item())) {
        log().error("non-finite decoder loss at epoch {} batch {}", epoch, batches);
        throw NumericError("non-finite decoder loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches));
      }
      opt.zero_grad();
      loss.backward();
      opt.step(epoch);
      epoch_loss += loss.item();
    }
    const double train_loss = epoch_loss / static_cast<double>(batches);
    const double valid_loss =
        has_valid ? mean_teacher_forcing_loss(lm, params, data.valid, valid_guidance, cfg.smoothing) : train_loss;
    if (!std::isfinite(valid_loss)) throw NumericError("non-finite decoder validation loss at epoch " + std::to_string(epoch));
    result.curve.emplace_back(train_loss, valid_loss);
    log().debug("decoder epoch {} train {:.6f} valid {:.6f}", epoch, train_loss, valid_loss);
    if (valid_loss <= best || !has_valid) {
      best = valid_loss;
      result.best_epoch = epoch;
      result.params = params.clone();
    }
  }
  if (cfg.epochs == 0) {
    result.params = params.clone();
    best = has_valid ? mean_teacher_forcing_loss(lm, params, data.valid, valid_guidance, cfg.smoothing) : 0.0;
  }
  result.best_valid_loss = best;
  set_trainable(result.params.parameters(), false);
  return result;
}

}  // namespace racap
