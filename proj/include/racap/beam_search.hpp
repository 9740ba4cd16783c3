#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "racap/error.hpp"
#include "racap/tokenizer.hpp"

namespace racap {

struct GenerationConfig {
  std::size_t beam = 4;
  std::size_t max_len = 30;
  TokenId eos = SpecialTokens{}.eos;
  std::set<TokenId> banned;  // never emitted
};

/// Probability row over the vocabulary for the next token given the
/// tokens generated so far (without any start token).
using NextTokenFn = std::function<std::vector<double>(const std::vector<TokenId>&)>;

struct BeamHypothesis {
  std::vector<TokenId> tokens;  // includes the final EOS when it ended on one
  double log_prob = 0.0;
  bool ended_on_eos = false;

  /// Mean log-probability per emitted token (EOS counts as a token).
  double score() const { return log_prob / static_cast<double>(tokens.size()); }

  /// Generated content without the terminating EOS.
  std::vector<TokenId> content() const {
    return ended_on_eos ? std::vector<TokenId>(tokens.begin(), tokens.end() - 1) : tokens;
  }
};

namespace detail {

/// Strict ordering: higher value first, then lexicographically smaller ids.
inline bool ranks_before(double va, const std::vector<TokenId>& a, double vb, const std::vector<TokenId>& b) {
  if (va != vb) return va > vb;
  return a < b;
}

}  // namespace detail

/// Beam search. Live beams are pruned on cumulative log-probability; every
/// beam that emits EOS or reaches max_len is finished, and the finished
/// hypothesis with the best length-normalized score wins.
inline BeamHypothesis beam_search_hypothesis(const NextTokenFn& next, const GenerationConfig& cfg) {
  require(cfg.beam >= 1, "beam size must be at least 1");
  require(cfg.max_len >= 1, "max length must be at least 1");
  std::vector<BeamHypothesis> live{BeamHypothesis{}};
  std::vector<BeamHypothesis> finished;
  for (std::size_t step = 0; step < cfg.max_len && !live.empty(); ++step) {
    std::vector<BeamHypothesis> cands;
    for (const auto& h : live) {
      const std::vector<double> probs = next(h.tokens);
      for (TokenId t = 0; t < probs.size(); ++t) {
        if (cfg.banned.count(t) || probs[t] <= 0.0) continue;
        BeamHypothesis c = h;
        c.tokens.push_back(t);
        c.log_prob += std::log(probs[t]);
        c.ended_on_eos = t == cfg.eos;
        cands.push_back(std::move(c));
      }
    }
    std::sort(cands.begin(), cands.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
      return detail::ranks_before(a.log_prob, a.tokens, b.log_prob, b.tokens);
    });
    if (cands.size() > cfg.beam) cands.resize(cfg.beam);
    live.clear();
    const bool last = step + 1 == cfg.max_len;
    for (auto& c : cands) (c.ended_on_eos || last ? finished : live).push_back(std::move(c));
  }
  require(!finished.empty(), "beam search produced no hypothesis");
  return *std::min_element(finished.begin(), finished.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
    return detail::ranks_before(a.score(), a.tokens, b.score(), b.tokens);
  });
}

inline std::vector<TokenId> beam_search(const NextTokenFn& next, const GenerationConfig& cfg) {
  return beam_search_hypothesis(next, cfg).content();
}

/// Reference answer by enumerating every sequence up to max_len that the
/// search could produce. Exponential; for tests on tiny vocabularies.
inline BeamHypothesis exhaustive_best(const NextTokenFn& next, const GenerationConfig& cfg) {
  std::vector<BeamHypothesis> frontier{BeamHypothesis{}};
  std::vector<BeamHypothesis> complete;
  for (std::size_t step = 0; step < cfg.max_len; ++step) {
    std::vector<BeamHypothesis> grown;
    for (const auto& h : frontier) {
      const auto probs = next(h.tokens);
      for (TokenId t = 0; t < probs.size(); ++t) {
        if (cfg.banned.count(t) || probs[t] <= 0.0) continue;
        BeamHypothesis c = h;
        c.tokens.push_back(t);
        c.log_prob += std::log(probs[t]);
        c.ended_on_eos = t == cfg.eos;
        (c.ended_on_eos || step + 1 == cfg.max_len ? complete : grown).push_back(std::move(c));
      }
    }
    frontier = std::move(grown);
  }
  require(!complete.empty(), "no sequence to enumerate");
  return *std::min_element(complete.begin(), complete.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
    return detail::ranks_before(a.score(), a.tokens, b.score(), b.tokens);
  });
}

}  // namespace racap
