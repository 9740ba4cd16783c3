#pragma once

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "racap/error.hpp"
#include "racap/fs_util.hpp"

namespace racap {

struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
inline std::vector<KeyValue> parse_key_values(std::string_view text) {
  auto trim = [](std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
  };
  std::vector<KeyValue> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    out.push_back({std::string(key), std::string(value), line_no});
  }
  return out;
}

namespace detail {

inline double parse_double(const KeyValue& kv) {
  double v = 0.0;
  const char* end = kv.value.data() + kv.value.size();
  auto [p, ec] = std::from_chars(kv.value.data(), end, v);
  if (ec != std::errc() || p != end || !std::isfinite(v))
    throw ConfigError("line " + std::to_string(kv.line) + ": '" + kv.key +
                      "' expects a number, got '" + kv.value + "'");
  return v;
}

inline std::size_t parse_count(const KeyValue& kv) {
  std::uint64_t v = 0;
  const char* end = kv.value.data() + kv.value.size();
  auto [p, ec] = std::from_chars(kv.value.data(), end, v);
  if (ec != std::errc() || p != end)
    throw ConfigError("line " + std::to_string(kv.line) + ": '" + kv.key +
                      "' expects a non-negative integer, got '" + kv.value + "'");
  return static_cast<std::size_t>(v);
}

inline bool parse_bool(const KeyValue& kv) {
  if (kv.value == "true" || kv.value == "1") return true;
  if (kv.value == "false" || kv.value == "0") return false;
  throw ConfigError("line " + std::to_string(kv.line) + ": '" + kv.key +
                    "' expects true/false, got '" + kv.value + "'");
}

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

/// Binds config keys to struct fields for parsing and canonical printing.
class FieldTable {
 public:
  void add(std::string key, double* field) {
    entries_.push_back({std::move(key), [field](const KeyValue& kv) { *field = detail::parse_double(kv); },
                        [field] { return fmt::format("{}", *field); }});
  }
  void add(std::string key, std::size_t* field) {
    entries_.push_back({std::move(key), [field](const KeyValue& kv) { *field = detail::parse_count(kv); },
                        [field] { return fmt::format("{}", *field); }});
  }
  void add(std::string key, std::uint64_t* field, int)  // seeds
  {
    entries_.push_back({std::move(key),
                        [field](const KeyValue& kv) { *field = static_cast<std::uint64_t>(detail::parse_count(kv)); },
                        [field] { return fmt::format("{}", *field); }});
  }
  void add(std::string key, bool* field) {
    entries_.push_back({std::move(key), [field](const KeyValue& kv) { *field = detail::parse_bool(kv); },
                        [field] { return *field ? std::string("true") : std::string("false"); }});
  }

  void apply(const std::vector<KeyValue>& kvs) {
    std::map<std::string, std::size_t> seen;
    for (const auto& kv : kvs) {
      if (auto [it, fresh] = seen.emplace(kv.key, kv.line); !fresh)
        throw ConfigError("line " + std::to_string(kv.line) + ": key '" + kv.key +
                          "' already set on line " + std::to_string(it->second));
      bool found = false;
      for (auto& e : entries_)
        if (e.key == kv.key) {
          e.parse(kv);
          found = true;
          break;
        }
      if (!found) throw ConfigError("line " + std::to_string(kv.line) + ": unknown key '" + kv.key + "'");
    }
  }

  std::string to_text() const {
    std::string out;
    for (const auto& e : entries_) out += e.key + "=" + e.print() + "\n";
    return out;
  }

 private:
  struct Entry {
    std::string key;
    std::function<void(const KeyValue&)> parse;
    std::function<std::string()> print;
  };
  std::vector<Entry> entries_;
};

/// Every hyperparameter of the pipeline. Defaults are the published
/// full-scale values; configs/synthetic.cfg carries the desk-scale set.
struct PipelineConfig {
  // Caption similarity labels.
  double similarity_threshold = 0.7;
  // Retrieval embedder and triplet training.
  double triplet_margin = 0.3;
  std::size_t triplet_batch = 128;
  std::size_t triplet_epochs = 200;
  double triplet_lr = 1e-4;
  double embed_dropout = 0.3;
  std::size_t embed_heads = 4;
  std::size_t embed_ffn_dim = 512;
  std::size_t retrieval_k = 5;
  // Caption decoder.
  double decoder_lambda = 0.1;
  std::size_t decoder_batch = 512;
  std::size_t decoder_epochs = 200;
  double decoder_lr_max = 1e-4;
  double decoder_lr_min = 1e-6;
  std::size_t decoder_lr_period = 20;
  double decoder_dropout = 0.3;
  std::size_t decoder_reduced_dim = 60;
  std::size_t decoder_heads = 4;
  std::size_t generate_beam = 4;
  std::size_t generate_max_len = 30;
  // Initialization N(0, init.std); with init.std_is_variance the value is
  // read as a variance instead.
  double init_std = 0.02;
  bool init_std_is_variance = false;
  // Model dimensions; model.vocab = 0 takes the tokenizer's size.
  std::size_t audio_dim = 128;
  std::size_t audio_frames = 10;
  std::size_t lm_dim = 768;
  std::size_t vocab = 50257;

  FieldTable fields() {
    FieldTable t;
    t.add("similarity.threshold", &similarity_threshold);
    t.add("triplet.margin", &triplet_margin);
    t.add("triplet.batch", &triplet_batch);
    t.add("triplet.epochs", &triplet_epochs);
    t.add("triplet.lr", &triplet_lr);
    t.add("embed.dropout", &embed_dropout);
    t.add("embed.heads", &embed_heads);
    t.add("embed.ffn_dim", &embed_ffn_dim);
    t.add("retrieval.K", &retrieval_k);
    t.add("decoder.lambda", &decoder_lambda);
    t.add("decoder.batch", &decoder_batch);
    t.add("decoder.epochs", &decoder_epochs);
    t.add("decoder.lr_max", &decoder_lr_max);
    t.add("decoder.lr_min", &decoder_lr_min);
    t.add("decoder.lr_period", &decoder_lr_period);
    t.add("decoder.dropout", &decoder_dropout);
    t.add("decoder.D_r", &decoder_reduced_dim);
    t.add("decoder.heads", &decoder_heads);
    t.add("generate.beam", &generate_beam);
    t.add("generate.max_len", &generate_max_len);
    t.add("init.std", &init_std);
    t.add("init.std_is_variance", &init_std_is_variance);
    t.add("model.D_a", &audio_dim);
    t.add("model.T", &audio_frames);
    t.add("model.D_l", &lm_dim);
    t.add("model.vocab", &vocab);
    return t;
  }

  /// Standard deviation implied by the init.* keys.
  double init_stddev() const { return init_std_is_variance ? std::sqrt(init_std) : init_std; }

  void validate() const {
    auto check = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError(what);
    };
    check(similarity_threshold >= 0.0 && similarity_threshold <= 1.0, "similarity.threshold must be in [0,1]");
    check(triplet_margin > 0.0, "triplet.margin must be positive");
    check(triplet_batch > 0 && decoder_batch > 0, "batch sizes must be positive");
    check(triplet_lr > 0.0 && decoder_lr_max > 0.0 && decoder_lr_min >= 0.0, "learning rates must be positive");
    check(embed_dropout >= 0.0 && embed_dropout < 1.0, "embed.dropout must be in [0,1)");
    check(decoder_dropout >= 0.0 && decoder_dropout < 1.0, "decoder.dropout must be in [0,1)");
    check(decoder_lambda >= 0.0 && decoder_lambda < 1.0, "decoder.lambda must be in [0,1)");
    check(decoder_lr_period > 0, "decoder.lr_period must be positive");
    check(retrieval_k > 0, "retrieval.K must be positive");
    check(generate_beam > 0, "generate.beam must be at least 1");
    check(generate_max_len > 0, "generate.max_len must be at least 1");
    check(init_std > 0.0, "init.std must be positive");
    check(audio_dim > 0 && audio_frames > 0 && lm_dim > 0, "model dims must be positive");
    check(embed_heads > 0 && audio_dim % embed_heads == 0, "embed.heads must divide model.D_a");
    check(decoder_heads > 0 && lm_dim % decoder_heads == 0 && decoder_reduced_dim % decoder_heads == 0,
          "decoder.heads must divide model.D_l and decoder.D_r");
  }

  static PipelineConfig parse(std::string_view text) {
    PipelineConfig c;
    c.fields().apply(parse_key_values(text));
    c.validate();
    return c;
  }

  static PipelineConfig load(const std::filesystem::path& path) {
    std::string text;
    try {
      text = read_file(path);
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    return parse(text);
  }

  /// Canonical resolved form: every key, fixed order.
  std::string to_text() const {
    PipelineConfig copy = *this;
    return copy.fields().to_text();
  }

  std::string hash() const { return fmt::format("{:016x}", detail::fnv1a(to_text())); }
};

}  // namespace racap
