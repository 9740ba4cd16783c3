#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "racap/checkpoint.hpp"
#include "racap/config.hpp"
#include "racap/nn.hpp"
#include "racap/optim.hpp"
#include "racap/tokenizer.hpp"

namespace racap {

/// A frozen causal language model used purely as a feature extractor.
/// Row i of features() depends only on tokens[0..i].
class FrozenLm {
 public:
  virtual ~FrozenLm() = default;
  /// [L x feature_dim()] features, no gradient tracking.
  virtual Tensor features(std::span<const TokenId> tokens) const = 0;
  virtual std::size_t feature_dim() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual const SpecialTokens& specials() const = 0;
  /// Token prediction layer as a [feature_dim x vocab] matrix.
  virtual Tensor prediction_head() const = 0;
};

struct TinyLmConfig {
  std::size_t vocab = 0;
  std::size_t dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 64;
  std::size_t max_len = 256;
  double embed_std = 1.0;
  double position_scale = 0.3;
  double init_std = 0.02;

  nlohmann::json to_json() const {
    return {{"vocab", vocab},     {"dim", dim},           {"layers", layers},
            {"heads", heads},     {"ffn_dim", ffn_dim},   {"max_len", max_len},
            {"embed_std", embed_std}, {"position_scale", position_scale}, {"init_std", init_std}};
  }
  static TinyLmConfig from_json(const nlohmann::json& j) {
    TinyLmConfig c;
    c.vocab = j.at("vocab");
    c.dim = j.at("dim");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.ffn_dim = j.at("ffn_dim");
    c.max_len = j.at("max_len");
    c.embed_std = j.at("embed_std");
    c.position_scale = j.at("position_scale");
    c.init_std = j.at("init_std");
    return c;
  }
};

/// Tiny GPT-style stand-in: token embedding + scaled sinusoidal positions,
/// causal post-norm encoder layers, head tied to the embedding table.
class TinyCausalLm : public FrozenLm {
 public:
  TinyCausalLm(const TinyLmConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    require(cfg.vocab > SpecialTokens{}.unk, "vocabulary must include the special tokens");
    Rng rng(seed);
    embedding_ = Tensor::randn({cfg.vocab, cfg.dim}, cfg.embed_std, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l)
      layers_.push_back(EncoderLayerParams::init(cfg.dim, cfg.heads, cfg.ffn_dim, cfg.init_std, rng));
    positions_ = Tensor({cfg.max_len, cfg.dim});
    for (std::size_t p = 0; p < cfg.max_len; ++p)
      for (std::size_t i = 0; i < cfg.dim; ++i) {
        const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(cfg.dim));
        const double angle = static_cast<double>(p) * rate;
        positions_(p, i) = cfg.position_scale * (i % 2 == 0 ? std::sin(angle) : std::cos(angle));
      }
    set_trainable(parameters(), false);
  }

  const TinyLmConfig& config() const { return cfg_; }

  NamedTensors parameters() const {
    NamedTensors out{{"lm.embedding", embedding_}};
    for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect(out, fmt::format("lm.layer{}", l));
    return out;
  }

  Tensor features(std::span<const TokenId> tokens) const override { return forward(tokens); }
  std::size_t feature_dim() const override { return cfg_.dim; }
  std::size_t vocab_size() const override { return cfg_.vocab; }
  const SpecialTokens& specials() const override { return specials_; }
  Tensor prediction_head() const override { return transpose(embedding_).detach(); }

  /// Next-token logits [L x vocab] through the tied head.
  Tensor logits(std::span<const TokenId> tokens) const {
    return matmul(forward(tokens), transpose(embedding_));
  }

  /// Fits the model to next-token prediction on `sequences` (each given
  /// without BOS/EOS), then freezes it again.
  void pretrain(const std::vector<std::vector<TokenId>>& sequences, std::size_t epochs, double lr,
                std::uint64_t seed) {
    if (epochs == 0 || sequences.empty()) return;
    const NamedTensors params = parameters();
    set_trainable(params, true);
    Adam opt(tensors_of(params), LrSchedule::constant(lr));
    Rng rng(seed);
    std::vector<std::size_t> order(sequences.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t e = 0; e < epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      for (auto idx : order) {
        std::vector<TokenId> input{specials_.bos};
        input.insert(input.end(), sequences[idx].begin(), sequences[idx].end());
        std::vector<TokenId> target(sequences[idx].begin(), sequences[idx].end());
        target.push_back(specials_.eos);
        opt.zero_grad();
        smoothed_cross_entropy(logits(input), target, 0.0).backward();
        opt.step(e);
      }
    }
    set_trainable(params, false);
    zero_grads(params);
  }

  /// FNV-1a over the raw parameter bytes; changes iff any weight changes.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [_, t] : parameters())
      for (double v : t.data()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) {
          h ^= (bits >> (8 * i)) & 0xff;
          h *= 0x100000001b3ull;
        }
      }
    return h;
  }

  void save(const std::filesystem::path& stem) const {
    CheckpointMeta meta;
    meta.kind = "lm";
    meta.extra = cfg_.to_json();
    save_checkpoint(stem, parameters(), meta);
  }

  static TinyCausalLm load(const std::filesystem::path& stem) {
    const Checkpoint c = load_checkpoint(stem);
    if (c.meta.kind != "lm") throw DataError(stem.string() + " is not a language-model checkpoint");
    TinyCausalLm lm(TinyLmConfig::from_json(c.meta.extra), 0);
    restore_parameters(lm.parameters(), c.tensors);
    return lm;
  }

 private:
  Tensor forward(std::span<const TokenId> tokens) const {
    require(!tokens.empty(), "language model input is empty");
    require(tokens.size() <= cfg_.max_len, "sequence longer than the model's max_len");
    Tensor x = embedding(embedding_, tokens) + slice_rows(positions_, 0, tokens.size());
    for (const auto& layer : layers_) x = transformer_encoder_layer(layer, x, /*causal=*/true);
    return x;
  }

  TinyLmConfig cfg_;
  SpecialTokens specials_;
  Tensor embedding_;
  Tensor positions_;
  std::vector<EncoderLayerParams> layers_;
};

/// Deterministic construction of a frozen tiny LM.
inline TinyCausalLm build_tiny_lm(const TinyLmConfig& cfg, std::uint64_t seed) {
  return TinyCausalLm(cfg, seed);
}

}  // namespace racap
