#pragma once

// Desk-scale synthetic dataset: clustered audio features from the tiny
// extractor, captions drawn from per-cluster word lists, a word-level
// vocabulary and a briefly pretrained tiny LM.
//
// Output directory layout:
//   manifest.jsonl, vocab.txt, lm.ract, lm.json, features/<id>.ract

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "racap/audio.hpp"
#include "racap/config.hpp"
#include "racap/lm.hpp"
#include "racap/manifest.hpp"
#include "racap/tokenizer.hpp"

namespace racap {

struct SyntheticDatasetSpec {
  std::size_t clusters = 4;
  std::size_t items_per_cluster = 25;
  std::size_t captions_per_item = 3;
  double valid_fraction = 0.1;
  double test_fraction = 0.2;
  std::size_t conditions = 24;
  // Every caption of an item names the same sound event (verb); subjects
  // and tails still vary per caption.
  bool shared_event = true;
  double signal_amplitude = 1.0;
  double nuisance_amplitude = 2.0;
  double noise = 0.3;
  std::size_t audio_dim = 8;
  std::size_t frames = 16;
  std::size_t lm_dim = 32;
  std::size_t lm_layers = 2;
  std::size_t lm_heads = 4;
  std::size_t lm_ffn_dim = 64;
  std::size_t lm_pretrain_epochs = 30;
  double lm_pretrain_lr = 3e-3;
  std::uint64_t seed = 0;

  FieldTable fields() {
    FieldTable t;
    t.add("clusters", &clusters);
    t.add("items_per_cluster", &items_per_cluster);
    t.add("captions_per_item", &captions_per_item);
    t.add("valid_fraction", &valid_fraction);
    t.add("test_fraction", &test_fraction);
    t.add("conditions", &conditions);
    t.add("shared_event", &shared_event);
    t.add("signal_amplitude", &signal_amplitude);
    t.add("nuisance_amplitude", &nuisance_amplitude);
    t.add("noise", &noise);
    t.add("audio_dim", &audio_dim);
    t.add("frames", &frames);
    t.add("lm_dim", &lm_dim);
    t.add("lm_layers", &lm_layers);
    t.add("lm_heads", &lm_heads);
    t.add("lm_ffn_dim", &lm_ffn_dim);
    t.add("lm_pretrain_epochs", &lm_pretrain_epochs);
    t.add("lm_pretrain_lr", &lm_pretrain_lr);
    t.add("seed", &seed, 0);
    return t;
  }

  void validate() const;

  static SyntheticDatasetSpec parse(std::string_view text) {
    SyntheticDatasetSpec s;
    s.fields().apply(parse_key_values(text));
    s.validate();
    return s;
  }

  static SyntheticDatasetSpec load(const std::filesystem::path& path) {
    std::string text;
    try {
      text = read_file(path);
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    return parse(text);
  }

  std::string to_text() const {
    SyntheticDatasetSpec copy = *this;
    return copy.fields().to_text();
  }
};

struct CaptionTheme {
  std::vector<std::string> subjects, verbs, tails;
};

inline const std::vector<CaptionTheme>& caption_themes() {
  static const std::vector<CaptionTheme> themes{
      {{"a dog", "a small dog", "the dog"}, {"barks", "is barking", "growls"}, {"loudly", "nearby", "outside"}},
      {{"a car", "an engine", "a truck"}, {"revs", "idles", "accelerates"},
       {"on the road", "in traffic", "down the street"}},
      {{"rain", "heavy rain", "a storm"}, {"falls", "pours", "patters"}, {"on a roof", "on the window", "on leaves"}},
      {{"a man", "a woman", "a person"}, {"speaks", "talks", "whispers"}, {"quietly", "to a crowd", "on a phone"}},
      {{"a bird", "birds", "a crow"}, {"chirps", "sings", "calls"}, {"in the trees", "at dawn", "repeatedly"}},
      {{"water", "a stream", "a faucet"}, {"flows", "trickles", "splashes"},
       {"steadily", "into a sink", "over rocks"}},
      {{"a bell", "church bells", "a chime"}, {"rings", "tolls", "clangs"}, {"twice", "in the distance", "slowly"}},
      {{"a baby", "an infant", "a child"}, {"cries", "laughs", "babbles"}, {"softly", "in a crib", "happily"}},
  };
  return themes;
}

inline void SyntheticDatasetSpec::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  check(clusters >= 2, "a synthetic dataset needs at least 2 clusters");
  check(clusters <= caption_themes().size(), fmt::format("at most {} clusters are available", caption_themes().size()));
  check(items_per_cluster >= 2, "a synthetic dataset needs at least 2 items per cluster");
  check(captions_per_item >= 1, "captions_per_item must be at least 1");
  check(valid_fraction >= 0.0 && test_fraction >= 0.0 && valid_fraction + test_fraction < 1.0,
        "valid_fraction + test_fraction must be below 1");
  check(conditions >= 1, "conditions must be at least 1");
  check(noise >= 0.0 && signal_amplitude > 0.0 && nuisance_amplitude >= 0.0, "amplitudes must be nonnegative");
  check(audio_dim >= 2 && frames >= 1, "audio_dim must be >= 2 and frames >= 1");
  check(lm_dim > 0 && lm_heads > 0 && lm_dim % lm_heads == 0, "lm_heads must divide lm_dim");
  check(lm_pretrain_lr > 0.0, "lm_pretrain_lr must be positive");
}

struct SyntheticItem {
  std::string id;
  Split split = Split::kTrain;
  std::size_t cluster = 0;
  std::size_t condition = 0;
  std::vector<std::string> captions;
  AudioFeatureSequence features;
};

struct SyntheticDataset {
  std::vector<SyntheticItem> items;
  TinyTokenizer tokenizer;
  TinyCausalLm lm;
};

/// One caption from a theme; `verb` fixes the event instead of drawing it.
inline std::string synthetic_caption(const CaptionTheme& theme, Rng& rng,
                                     std::optional<std::size_t> verb = std::nullopt) {
  auto draw = [&rng](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  const std::string& subject = theme.subjects[draw(theme.subjects.size())];
  const std::string& event = theme.verbs[verb ? *verb : draw(theme.verbs.size())];
  return subject + " " + event + " " + theme.tails[draw(theme.tails.size())];
}

inline TinyLmConfig lm_config_for(const SyntheticDatasetSpec& spec, std::size_t vocab) {
  TinyLmConfig c;
  c.vocab = vocab;
  c.dim = spec.lm_dim;
  c.layers = spec.lm_layers;
  c.heads = spec.lm_heads;
  c.ffn_dim = spec.lm_ffn_dim;
  return c;
}

/// Builds everything in memory; a pure function of the spec.
inline SyntheticDataset generate_synthetic_dataset(const SyntheticDatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  AudioExtractorConfig ecfg;
  ecfg.feature_dim = spec.audio_dim;
  ecfg.frames = spec.frames;
  ecfg.clusters = spec.clusters;
  ecfg.conditions = spec.conditions;
  ecfg.signal_amplitude = spec.signal_amplitude;
  ecfg.nuisance_amplitude = spec.nuisance_amplitude;
  ecfg.noise = spec.noise;
  const TinyAudioExtractor extractor(ecfg, rng());

  const auto n = static_cast<double>(spec.items_per_cluster);
  const auto n_test = static_cast<std::size_t>(std::floor(spec.test_fraction * n));
  const auto n_valid = static_cast<std::size_t>(std::floor(spec.valid_fraction * n));

  std::vector<SyntheticItem> items;
  std::uniform_int_distribution<std::size_t> condition(0, spec.conditions - 1);
  for (std::size_t c = 0; c < spec.clusters; ++c)
    for (std::size_t i = 0; i < spec.items_per_cluster; ++i) {
      SyntheticItem item;
      item.id = fmt::format("c{}_{:03}", c, i);
      item.split = i < n_test ? Split::kTest : i < n_test + n_valid ? Split::kValid : Split::kTrain;
      item.cluster = c;
      item.condition = condition(rng);
      const auto& theme = caption_themes()[c];
      std::optional<std::size_t> event;
      if (spec.shared_event) event = std::uniform_int_distribution<std::size_t>(0, theme.verbs.size() - 1)(rng);
      for (std::size_t k = 0; k < spec.captions_per_item; ++k)
        item.captions.push_back(synthetic_caption(theme, rng, event));
      item.features = extractor.extract({c, item.condition, rng()});
      items.push_back(std::move(item));
    }

  std::vector<std::string> train_captions;
  for (const auto& item : items)
    if (item.split == Split::kTrain) train_captions.insert(train_captions.end(), item.captions.begin(), item.captions.end());
  TinyTokenizer tokenizer = TinyTokenizer::build(train_captions);

  TinyCausalLm lm(lm_config_for(spec, tokenizer.vocab_size()), rng());
  std::vector<std::vector<TokenId>> sequences;
  for (const auto& c : train_captions) sequences.push_back(tokenizer.encode(c));
  lm.pretrain(sequences, spec.lm_pretrain_epochs, spec.lm_pretrain_lr, rng());

  return {std::move(items), std::move(tokenizer), std::move(lm)};
}

/// File names inside a dataset directory.
struct DatasetLayout {
  std::filesystem::path dir;

  std::filesystem::path manifest() const { return dir / "manifest.jsonl"; }
  std::filesystem::path vocab() const { return dir / "vocab.txt"; }
  std::filesystem::path lm_stem() const { return dir / "lm"; }
  std::filesystem::path features_dir() const { return dir / "features"; }
};

inline DatasetManifest write_synthetic_dataset(const SyntheticDataset& ds, const std::filesystem::path& dir) {
  const DatasetLayout layout{dir};
  std::filesystem::create_directories(layout.features_dir());
  DatasetManifest m;
  m.base_dir = dir;
  for (const auto& item : ds.items) {
    const std::string rel = "features/" + item.id + ".ract";
    save_audio_features(dir / rel, item.features);
    m.rows.push_back({item.id, item.split, rel, item.captions});
  }
  ds.tokenizer.save(layout.vocab());
  ds.lm.save(layout.lm_stem());
  save_manifest(layout.manifest(), m);
  return m;
}

}  // namespace racap
