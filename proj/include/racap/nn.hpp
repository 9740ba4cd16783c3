#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "racap/ops.hpp"

namespace racap {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Whether dropout is active, and the generator that drives it.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;

  static ForwardMode eval() { return {}; }
  static ForwardMode train(Rng& r) { return {true, &r}; }
};

inline Tensor maybe_dropout(const Tensor& x, double p, const ForwardMode& mode) {
  if (!mode.training || p == 0.0) return x;
  require(mode.rng != nullptr, "training mode needs a random generator");
  return dropout(x, p, *mode.rng);
}

inline Tensor trainable(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

/// y = x W + b with W stored as [in x out].
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when the map has no bias

  static Linear init(std::size_t in, std::size_t out, double stddev, Rng& rng,
                     bool with_bias = true) {
    Linear l;
    l.weight = trainable(Tensor::randn({in, out}, stddev, rng));
    if (with_bias) l.bias = trainable(Tensor({out}));
    return l;
  }

  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }

  Tensor operator()(const Tensor& x) const {
    require_shape(x.ndim() == 2 && x.cols() == in_dim(),
                  "linear expects [* x " + std::to_string(in_dim()) + "], got " +
                      shape_str(x.dims()));
    Tensor y = matmul(x, weight);
    return bias.defined() ? add_bias(y, bias) : y;
  }

  void collect(NamedTensors& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  }

  /// Independent copy of the values (no shared storage, no graph).
  Linear clone() const { return {weight.clone(), bias.defined() ? bias.clone() : Tensor()}; }
};

struct MhaParams {
  std::size_t num_heads = 1;
  Linear query;   // d_query -> d_model
  Linear key;     // d_kv -> d_model
  Linear value;   // d_kv -> d_model
  Linear output;  // d_model -> d_query

  static MhaParams init(std::size_t d_query, std::size_t d_kv, std::size_t d_model,
                        std::size_t heads, double stddev, Rng& rng) {
    require(heads > 0 && d_model % heads == 0,
            "d_model " + std::to_string(d_model) + " not divisible by " +
                std::to_string(heads) + " heads");
    MhaParams p;
    p.num_heads = heads;
    p.query = Linear::init(d_query, d_model, stddev, rng);
    p.key = Linear::init(d_kv, d_model, stddev, rng);
    p.value = Linear::init(d_kv, d_model, stddev, rng);
    p.output = Linear::init(d_model, d_query, stddev, rng);
    return p;
  }

  std::size_t d_query() const { return query.in_dim(); }
  std::size_t d_kv() const { return key.in_dim(); }
  std::size_t d_model() const { return query.out_dim(); }

  void validate() const {
    require_shape(num_heads > 0 && d_model() % num_heads == 0, "heads do not divide d_model");
    require_shape(key.out_dim() == d_model() && value.out_dim() == d_model() &&
                      value.in_dim() == d_kv() && output.in_dim() == d_model() &&
                      output.out_dim() == d_query(),
                  "inconsistent attention projections");
  }

  void collect(NamedTensors& out, const std::string& prefix) const {
    query.collect(out, prefix + ".q");
    key.collect(out, prefix + ".k");
    value.collect(out, prefix + ".v");
    output.collect(out, prefix + ".o");
  }

  MhaParams clone() const { return {num_heads, query.clone(), key.clone(), value.clone(), output.clone()}; }
};

/// Scaled dot-product attention per head over query rows [Lq x d_query] and
/// key/value rows [Lkv x d_kv]. With `causal`, row i only sees rows <= i.
inline Tensor multi_head_attention(const MhaParams& p, const Tensor& query,
                                   const Tensor& key_value, bool causal = false) {
  p.validate();
  require_shape(query.ndim() == 2 && query.cols() == p.d_query(),
                "attention query " + shape_str(query.dims()) + " vs d_query " +
                    std::to_string(p.d_query()));
  require_shape(key_value.ndim() == 2 && key_value.cols() == p.d_kv(),
                "attention key/value " + shape_str(key_value.dims()) + " vs d_kv " +
                    std::to_string(p.d_kv()));
  const Tensor q = p.query(query);
  const Tensor k = p.key(key_value);
  const Tensor v = p.value(key_value);
  const std::size_t head_dim = p.d_model() / p.num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  std::vector<Tensor> heads;
  heads.reserve(p.num_heads);
  for (std::size_t h = 0; h < p.num_heads; ++h) {
    const Tensor qh = slice_cols(q, h * head_dim, head_dim);
    const Tensor kh = slice_cols(k, h * head_dim, head_dim);
    const Tensor vh = slice_cols(v, h * head_dim, head_dim);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (causal) scores = causal_mask(scores);
    heads.push_back(matmul(softmax(scores, 1), vh));
  }
  return p.output(p.num_heads == 1 ? heads[0] : concat_cols(heads));
}

/// Post-norm Transformer encoder block: self-attention and a GELU
/// feed-forward map, each wrapped in a residual connection + LayerNorm.
struct EncoderLayerParams {
  MhaParams attention;
  Linear ff_in;
  Linear ff_out;
  Tensor norm1_gain, norm1_bias;
  Tensor norm2_gain, norm2_bias;

  static EncoderLayerParams init(std::size_t dim, std::size_t heads, std::size_t ffn_dim,
                                 double stddev, Rng& rng) {
    EncoderLayerParams p;
    p.attention = MhaParams::init(dim, dim, dim, heads, stddev, rng);
    p.ff_in = Linear::init(dim, ffn_dim, stddev, rng);
    p.ff_out = Linear::init(ffn_dim, dim, stddev, rng);
    p.norm1_gain = trainable(Tensor({dim}, 1.0));
    p.norm1_bias = trainable(Tensor({dim}));
    p.norm2_gain = trainable(Tensor({dim}, 1.0));
    p.norm2_bias = trainable(Tensor({dim}));
    return p;
  }

  std::size_t dim() const { return attention.d_query(); }

  void collect(NamedTensors& out, const std::string& prefix) const {
    attention.collect(out, prefix + ".attn");
    ff_in.collect(out, prefix + ".ff_in");
    ff_out.collect(out, prefix + ".ff_out");
    out.emplace_back(prefix + ".norm1.gain", norm1_gain);
    out.emplace_back(prefix + ".norm1.bias", norm1_bias);
    out.emplace_back(prefix + ".norm2.gain", norm2_gain);
    out.emplace_back(prefix + ".norm2.bias", norm2_bias);
  }

  EncoderLayerParams clone() const {
    return {attention.clone(), ff_in.clone(), ff_out.clone(), norm1_gain.clone(),
            norm1_bias.clone(), norm2_gain.clone(), norm2_bias.clone()};
  }
};

inline Tensor transformer_encoder_layer(const EncoderLayerParams& p, const Tensor& x,
                                        bool causal = false) {
  require_shape(x.ndim() == 2 && x.cols() == p.dim(),
                "encoder layer expects [T x " + std::to_string(p.dim()) + "], got " +
                    shape_str(x.dims()));
  const Tensor attended = multi_head_attention(p.attention, x, x, causal);
  const Tensor h = layer_norm(x + attended, p.norm1_gain, p.norm1_bias);
  const Tensor ff = p.ff_out(gelu(p.ff_in(h)));
  return layer_norm(h + ff, p.norm2_gain, p.norm2_bias);
}

inline std::vector<Tensor> tensors_of(const NamedTensors& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& [_, t] : named) out.push_back(t);
  return out;
}

inline void zero_grads(const NamedTensors& named) {
  for (const auto& [_, t] : named) {
    Tensor h = t;
    h.zero_grad();
  }
}

inline void set_trainable(const NamedTensors& named, bool on) {
  for (const auto& [_, t] : named) {
    Tensor h = t;
    h.set_requires_grad(on);
  }
}

}  // namespace racap
