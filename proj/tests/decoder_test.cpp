#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>

#include "racap/decoder.hpp"
#include "support/gradcheck.hpp"
#include "support/tempdir.hpp"

namespace racap {
namespace {

using testing::check_gradients;
using testing::worst;

TinyCausalLm tiny_lm(std::size_t vocab = 12, std::size_t dim = 8, std::uint64_t seed = 3) {
  TinyLmConfig c;
  c.vocab = vocab;
  c.dim = dim;
  c.layers = 1;
  c.heads = 2;
  c.ffn_dim = 16;
  return TinyCausalLm(c, seed);
}

AudioFeatureSequence audio(std::size_t t, std::size_t d, Rng& rng) { return {Tensor::randn({t, d}, 1.0, rng)}; }

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<TokenId> out(n);
  for (auto& t : out) t = 5 + rng() % (vocab - 5);
  return out;
}

TEST(Guidance, JoinedWithSeparators) {
  const GuidanceCaptions g{{{5, 6}, {7}, {8, 9}}};
  EXPECT_EQ(g.joined(3), (std::vector<TokenId>{5, 6, 3, 7, 3, 8, 9}));
  EXPECT_EQ(GuidanceCaptions{{{5}}}.joined(3), (std::vector<TokenId>{5}));
}

TEST(TeacherForcing, ShiftsByOneWithBosAndEos) {
  const auto tf = teacher_forcing(SpecialTokens{}, {7, 8, 9});
  EXPECT_EQ(tf.input, (std::vector<TokenId>{1, 7, 8, 9}));
  EXPECT_EQ(tf.target, (std::vector<TokenId>{7, 8, 9, 2}));
}

TEST(DecoderInit, LmheadStartsAsTheLmPredictionLayer) {
  const auto lm = tiny_lm();
  Rng rng(1);
  const auto p = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.02, rng);
  EXPECT_EQ(p.lmhead.weight.values(), lm.prediction_head().values());
  EXPECT_FALSE(p.lmhead.bias.defined());
  EXPECT_EQ(p.vocab_size(), 12u);
  EXPECT_EQ(p.lm_dim(), 8u);
  EXPECT_EQ(p.audio_dim(), 4u);
}

TEST(DecoderInit, NewLayersFollowTheRequestedStd) {
  const auto lm = tiny_lm(12, 32);
  Rng rng(2);
  const auto p = DecoderParams::init(lm, 16, 16, 4, 0.0, 0.02, rng);
  const auto w = p.fuse.query.weight.values();
  double sq = 0.0;
  for (double v : w) sq += v * v;
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(w.size())), 0.02, 0.003);
}

TEST(DecoderForward, LogitShapes) {
  const auto lm = tiny_lm();
  Rng rng(3);
  const auto p = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.3, rng);
  const Tensor refs = encode_refs(lm, {{{5, 6, 7}, {8}}});
  EXPECT_EQ(refs.dims(), (Shape{5, 8}));
  const std::vector<TokenId> prefix{1, 5, 9};
  EXPECT_EQ(decoder_logits(lm, p, audio(6, 4, rng), refs, prefix).dims(), (Shape{3, 12}));
}

TEST(DecoderForward, PrefixMustStartWithBos) {
  const auto lm = tiny_lm();
  Rng rng(4);
  const auto p = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.3, rng);
  const Tensor refs = encode_refs(lm, {{{5}}});
  const std::vector<TokenId> prefix{5, 6};
  EXPECT_THROW(decoder_logits(lm, p, audio(2, 4, rng), refs, prefix), ContractError);
}

TEST(DecoderForward, WrongAudioWidthIsAShapeError) {
  const auto lm = tiny_lm();
  Rng rng(5);
  const auto p = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.3, rng);
  const std::vector<TokenId> prefix{1};
  EXPECT_THROW(decoder_logits(lm, p, audio(2, 5, rng), encode_refs(lm, {{{5}}}), prefix), ShapeError);
}

TEST(DecoderForward, GradientCheckOverShapes) {
  Rng rng(6);
  for (std::size_t trial = 0; trial < 5; ++trial) {
    const std::size_t d = 4 + 2 * (trial % 2), da = 2 + trial, dr = 2 * (1 + trial % 2), heads = 1 + trial % 2;
    const std::size_t vocab = 7 + trial;
    auto p = [&] {
      const auto lm = tiny_lm(vocab, d, 10 + trial);
      return DecoderParams::init(lm, da, dr, heads, 0.0, 0.5, rng);
    }();
    const Tensor hyps = Tensor::randn({2 + trial % 3, d}, 1.0, rng);
    const Tensor refs = Tensor::randn({1 + trial, d}, 1.0, rng);
    const auto phi = audio(3, da, rng);
    std::vector<std::size_t> targets(hyps.rows());
    for (auto& t : targets) t = rng() % vocab;
    const NamedTensors named = p.parameters();
    set_trainable(named, true);
    auto loss = [&] { return smoothed_cross_entropy(decoder_logits_from_features(p, hyps, refs, phi), targets, 0.1); };
    EXPECT_LT(worst(check_gradients(loss, named)), 1e-4) << "trial " << trial;
  }
}

TEST(DecoderForward, BothFusionPathsReceiveGradient) {
  const auto lm = tiny_lm();
  Rng rng(7);
  auto p = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.3, rng);
  const NamedTensors named = p.parameters();
  set_trainable(named, true);
  const std::vector<TokenId> prefix{1, 6, 7};
  const Tensor loss = smoothed_cross_entropy(
      decoder_logits(lm, p, audio(3, 4, rng), encode_refs(lm, {{{5, 8}}}), prefix), std::vector<std::size_t>{6, 7, 2}, 0.1);
  loss.backward();
  for (const auto& [name, t] : named) {
    double g = 0.0;
    for (double v : t.grad()) g += std::abs(v);
    EXPECT_GT(g, 0.0) << name;
  }
}

TEST(Posterior, SumsToOne) {
  const auto lm = tiny_lm();
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.5, rng);
    std::vector<TokenId> prefix{1};
    const auto rest = random_tokens(trial % 6, 12, rng);
    prefix.insert(prefix.end(), rest.begin(), rest.end());
    const auto probs = posterior(lm, p, audio(3, 4, rng), encode_refs(lm, {{random_tokens(3, 12, rng)}}), prefix);
    EXPECT_NEAR(std::accumulate(probs.begin(), probs.end(), 0.0), 1.0, 1e-9);
    for (double v : probs) EXPECT_GE(v, 0.0);
  }
}

TEST(Posterior, ZeroLmheadGivesUniform) {
  const auto lm = tiny_lm();
  Rng rng(9);
  auto p = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.5, rng);
  p.lmhead.weight = Tensor({8, 12}, 0.0);
  const std::vector<TokenId> prefix{1, 7};
  for (double v : posterior(lm, p, audio(2, 4, rng), encode_refs(lm, {{{5}}}), prefix)) EXPECT_NEAR(v, 1.0 / 12, 1e-15);
}

TEST(Posterior, EarlierRowsIgnoreLaterTokens) {
  const auto lm = tiny_lm();
  Rng rng(10);
  const auto p = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.5, rng);
  const auto phi = audio(3, 4, rng);
  const Tensor refs = encode_refs(lm, {{{5, 6}, {9}}});
  const std::vector<TokenId> a{1, 5, 6, 7, 8};
  std::vector<TokenId> b = a;
  b[3] = 11;
  b[4] = 10;
  const Tensor la = decoder_logits(lm, p, phi, refs, a);
  const Tensor lb = decoder_logits(lm, p, phi, refs, b);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 12; ++c) EXPECT_EQ(la(r, c), lb(r, c));
  bool differs = false;
  for (std::size_t c = 0; c < 12; ++c) differs = differs || la(4, c) != lb(4, c);
  EXPECT_TRUE(differs);
}

TEST(Posterior, DependsOnGuidanceAndAudio) {
  const auto lm = tiny_lm();
  Rng rng(11);
  const auto p = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.5, rng);
  const std::vector<TokenId> prefix{1, 6};
  const auto phi = audio(3, 4, rng);
  const auto base = posterior(lm, p, phi, encode_refs(lm, {{{5, 6}}}), prefix);
  EXPECT_NE(base, posterior(lm, p, phi, encode_refs(lm, {{{9, 10}}}), prefix));
  EXPECT_NE(base, posterior(lm, p, audio(3, 4, rng), encode_refs(lm, {{{5, 6}}}), prefix));
}

TEST(Checkpoint, ReloadReproducesForwardBitwise) {
  testing::TempDir dir;
  const auto lm = tiny_lm();
  Rng rng(12);
  const auto p = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.5, rng);
  save_checkpoint(dir / "dec", p.parameters(), {"decoder", "h", 1, 0, 0.0, {}});
  Rng other(99);
  auto q = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.5, other);
  restore_parameters(q.parameters(), load_checkpoint(dir / "dec").tensors);
  const auto phi = audio(3, 4, rng);
  const Tensor refs = encode_refs(lm, {{{5, 6}}});
  const std::vector<TokenId> prefix{1, 7, 8};
  EXPECT_EQ(decoder_logits(lm, p, phi, refs, prefix).values(), decoder_logits(lm, q, phi, refs, prefix).values());
}

TEST(Checkpoint, CloneIsIndependent) {
  const auto lm = tiny_lm();
  Rng rng(13);
  const auto p = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.5, rng);
  const auto c = p.clone();
  Tensor w = c.expand.weight;
  w[0] += 1.0;
  EXPECT_NE(p.expand.weight[0], c.expand.weight[0]);
}

// A fixed random next-token table keyed by prefix: a stand-in model for
// search tests with a vocabulary small enough to enumerate.
struct TableModel {
  std::size_t vocab;
  std::uint64_t seed;
  mutable std::map<std::vector<TokenId>, std::vector<double>> table;

  std::vector<double> operator()(const std::vector<TokenId>& prefix) const {
    auto it = table.find(prefix);
    if (it != table.end()) return it->second;
    std::uint64_t h = seed;
    for (auto t : prefix) h = h * 1000003u + t + 1;
    Rng rng(h);
    std::vector<double> p(vocab);
    double s = 0;
    for (auto& v : p) s += (v = std::exp(2.0 * std::normal_distribution<double>()(rng)));
    for (auto& v : p) v /= s;
    return table[prefix] = p;
  }
};

TEST(BeamSearch, WideBeamEqualsExhaustiveEnumeration) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const TableModel m{3, seed, {}};
    GenerationConfig g{9, 3, 2, {}};
    const auto best = exhaustive_best(std::ref(m), g);
    const auto beam = beam_search_hypothesis(std::ref(m), g);
    EXPECT_EQ(beam.tokens, best.tokens) << "seed " << seed;
    EXPECT_EQ(beam.score(), best.score());
  }
}

TEST(BeamSearch, BeamOneIsGreedy) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const TableModel m{5, seed + 100, {}};
    GenerationConfig g{1, 6, 4, {0}};
    std::vector<TokenId> greedy;
    for (std::size_t step = 0; step < 6; ++step) {
      auto p = m(greedy);
      p[0] = 0.0;
      const auto t = static_cast<TokenId>(std::max_element(p.begin(), p.end()) - p.begin());
      greedy.push_back(t);
      if (t == 4) break;
    }
    EXPECT_EQ(beam_search_hypothesis(std::ref(m), g).tokens, greedy) << "seed " << seed;
  }
}

TEST(BeamSearch, BannedTokensNeverEmitted) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TableModel m{6, seed + 200, {}};
    GenerationConfig g{4, 5, 5, {0, 1, 3}};
    for (auto t : beam_search_hypothesis(std::ref(m), g).tokens) EXPECT_TRUE(t != 0 && t != 1 && t != 3);
  }
}

TEST(BeamSearch, HandComputedLengthNormalization) {
  // EOS immediately scores log 0.4; "a" then EOS scores (log 0.6 + log 0.9)/2.
  const NextTokenFn next = [](const std::vector<TokenId>& prefix) {
    if (prefix.empty()) return std::vector<double>{0.0, 0.6, 0.4};
    return std::vector<double>{0.0, 0.1, 0.9};
  };
  const auto h = beam_search_hypothesis(next, {2, 3, 2, {}});
  EXPECT_EQ(h.tokens, (std::vector<TokenId>{1, 2}));
  EXPECT_NEAR(h.score(), (std::log(0.6) + std::log(0.9)) / 2.0, 1e-12);
  EXPECT_EQ(h.content(), (std::vector<TokenId>{1}));
}

TEST(BeamSearch, StopsAtMaxLength) {
  const NextTokenFn next = [](const std::vector<TokenId>&) { return std::vector<double>{0.0, 1.0, 0.0}; };
  const auto h = beam_search_hypothesis(next, {3, 4, 2, {}});
  EXPECT_EQ(h.tokens.size(), 4u);
  EXPECT_FALSE(h.ended_on_eos);
}

DecoderData toy_data(const TinyTokenizer& tok, Rng& rng) {
  const std::vector<std::string> caps{"a dog barks", "a cat meows", "a dog growls", "a cat purrs"};
  DecoderData d;
  for (const auto& c : caps) d.guidance_pool.push_back({tok.encode(c)});
  for (std::size_t i = 0; i < caps.size(); ++i) {
    const std::size_t other = i ^ 2;  // same animal
    d.train.push_back({audio(3, 4, rng), tok.encode(caps[i]), {other}});
  }
  d.valid.push_back({audio(3, 4, rng), tok.encode(caps[0]), {2}});
  return d;
}

TEST(SampleGuidance, DistinctWhenEnoughAndWithReplacementOtherwise) {
  DecoderData d;
  for (TokenId t = 5; t < 12; ++t) d.guidance_pool.push_back({{t}});
  Rng rng(14);
  const auto g = sample_guidance(d, {0, 1, 2, 3, 4, 5}, 5, rng);
  ASSERT_EQ(g.captions.size(), 5u);
  std::set<std::vector<TokenId>> seen(g.captions.begin(), g.captions.end());
  EXPECT_EQ(seen.size(), 5u);
  const auto few = sample_guidance(d, {2}, 5, rng);
  ASSERT_EQ(few.captions.size(), 5u);
  for (const auto& c : few.captions) EXPECT_EQ(c, (std::vector<TokenId>{7}));
  EXPECT_THROW(sample_guidance(d, {}, 5, rng), ContractError);
}

TEST(TrainDecoder, LossFallsAndLmStaysFrozen) {
  const std::vector<std::string> caps{"a dog barks", "a cat meows", "a dog growls", "a cat purrs"};
  const auto tok = TinyTokenizer::build(caps);
  const auto lm = tiny_lm(tok.vocab_size(), 8, 21);
  Rng rng(22);
  const auto data = toy_data(tok, rng);
  const auto init = DecoderParams::init(lm, 4, 4, 2, 0.0, 0.1, rng);
  const auto before = lm.fingerprint();
  DecoderTrainConfig cfg;
  cfg.batch = 4;
  cfg.epochs = 40;
  cfg.schedule = LrSchedule::constant(1e-2);
  cfg.guidance_k = 2;
  const auto r = train_decoder(lm, init, data, cfg, 23);
  EXPECT_EQ(lm.fingerprint(), before);
  EXPECT_LT(r.curve.back().first, r.curve.front().first);
  EXPECT_EQ(r.resampled_items, 4u);
  EXPECT_EQ(r.curve[r.best_epoch].second, r.best_valid_loss);
  for (const auto& [_, t] : r.params.parameters()) EXPECT_FALSE(t.requires_grad());
}

TEST(TrainDecoder, SameSeedIsBitwiseReproducible) {
  const std::vector<std::string> caps{"a dog barks", "a cat meows", "a dog growls", "a cat purrs"};
  const auto tok = TinyTokenizer::build(caps);
  const auto lm = tiny_lm(tok.vocab_size(), 8, 31);
  Rng r1(32), r2(32);
  const auto d1 = toy_data(tok, r1);
  const auto d2 = toy_data(tok, r2);
  DecoderTrainConfig cfg;
  cfg.batch = 2;
  cfg.epochs = 3;
  cfg.guidance_k = 2;
  const auto a = train_decoder(lm, DecoderParams::init(lm, 4, 4, 2, 0.3, 0.1, r1), d1, cfg, 33);
  const auto b = train_decoder(lm, DecoderParams::init(lm, 4, 4, 2, 0.3, 0.1, r2), d2, cfg, 33);
  EXPECT_EQ(encode_archive(a.params.parameters()), encode_archive(b.params.parameters()));
}

TEST(TrainDecoder, ItemsWithoutSimilarCaptionsAreSkipped) {
  const std::vector<std::string> caps{"a dog barks", "a cat meows", "a dog growls", "a cat purrs"};
  const auto tok = TinyTokenizer::build(caps);
  const auto lm = tiny_lm(tok.vocab_size(), 8, 41);
  Rng rng(42);
  auto data = toy_data(tok, rng);
  data.train[1].similar.clear();
  DecoderTrainConfig cfg;
  cfg.batch = 4;
  cfg.epochs = 1;
  cfg.guidance_k = 1;
  EXPECT_EQ(train_decoder(lm, DecoderParams::init(lm, 4, 4, 2, 0.0, 0.1, rng), data, cfg, 43).skipped_items, 1u);
  for (auto& ex : data.train) ex.similar.clear();
  EXPECT_THROW(train_decoder(lm, DecoderParams::init(lm, 4, 4, 2, 0.0, 0.1, rng), data, cfg, 43), DataError);
}

}  // namespace
}  // namespace racap
