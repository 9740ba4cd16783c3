#pragma once

// Corpus caption metrics computed the way the common captioning evaluation
// toolkit does: corpus BLEU with closest-reference length, ROUGE-L with
// beta 1.2, and CIDEr-D (clipped tf-idf, Gaussian length penalty, x10).
// No smoothing is applied anywhere: zero matches give a zero score.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "racap/error.hpp"
#include "racap/log.hpp"
#include "racap/text.hpp"

namespace racap {

using Words = std::vector<std::string>;
using NgramCounts = std::map<Words, double>;

inline NgramCounts count_ngrams(const Words& words, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= words.size(); ++i) out[Words(words.begin() + i, words.begin() + i + n)] += 1.0;
  return out;
}

namespace detail {

inline void check_corpus(std::size_t candidates, std::size_t reference_sets) {
  if (candidates == 0) throw ContractError("cannot score an empty corpus");
  if (candidates != reference_sets)
    throw ContractError(fmt::format("{} candidates but {} reference sets", candidates, reference_sets));
}

inline void check_references(const std::vector<std::vector<Words>>& refs) {
  for (const auto& r : refs)
    if (r.empty()) throw ContractError("every candidate needs at least one reference");
}

}  // namespace detail

/// Sufficient statistics for BLEU up to order 4.
struct BleuStats {
  double cand_len = 0.0;
  double ref_len = 0.0;
  std::array<double, 4> guess{};
  std::array<double, 4> correct{};

  void operator+=(const BleuStats& o) {
    cand_len += o.cand_len;
    ref_len += o.ref_len;
    for (int k = 0; k < 4; ++k) {
      guess[k] += o.guess[k];
      correct[k] += o.correct[k];
    }
  }

  /// Geometric mean of clipped precisions to order n, times the brevity
  /// penalty min(1, exp(1 - r/c)).
  double score(std::size_t n) const {
    require(n >= 1 && n <= 4, "BLEU order must be in 1..4");
    double log_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (correct[k] == 0.0 || guess[k] == 0.0) return 0.0;
      log_sum += std::log(correct[k] / guess[k]);
    }
    const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
    return bp * std::exp(log_sum / static_cast<double>(n));
  }
};

inline BleuStats bleu_stats(const Words& cand, const std::vector<Words>& refs) {
  BleuStats s;
  s.cand_len = static_cast<double>(cand.size());
  // Closest reference length, shorter one on ties.
  double best_gap = -1.0;
  for (const auto& r : refs) {
    const double len = static_cast<double>(r.size());
    const double gap = std::abs(len - s.cand_len);
    if (best_gap < 0.0 || gap < best_gap || (gap == best_gap && len < s.ref_len)) {
      best_gap = gap;
      s.ref_len = len;
    }
  }
  for (std::size_t k = 0; k < 4; ++k) {
    NgramCounts max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : count_ngrams(r, k + 1)) max_ref[g] = std::max(max_ref[g], c);
    for (const auto& [g, c] : count_ngrams(cand, k + 1)) {
      s.guess[k] += c;
      if (auto it = max_ref.find(g); it != max_ref.end()) s.correct[k] += std::min(c, it->second);
    }
  }
  return s;
}

inline double bleu_n(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references,
                     std::size_t n) {
  detail::check_corpus(candidates.size(), references.size());
  detail::check_references(references);
  BleuStats total;
  for (std::size_t i = 0; i < candidates.size(); ++i) total += bleu_stats(candidates[i], references[i]);
  return total.score(n);
}

inline std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Sentence ROUGE-L: best precision and best recall over the references,
/// combined as an F-measure weighted by beta.
inline double rouge_l_sentence(const Words& cand, const std::vector<Words>& refs, double beta = 1.2) {
  double p_max = 0.0, r_max = 0.0;
  for (const auto& r : refs) {
    const auto lcs = static_cast<double>(lcs_length(cand, r));
    if (!cand.empty()) p_max = std::max(p_max, lcs / static_cast<double>(cand.size()));
    if (!r.empty()) r_max = std::max(r_max, lcs / static_cast<double>(r.size()));
  }
  if (p_max == 0.0 || r_max == 0.0) return 0.0;
  const double b2 = beta * beta;
  return (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max);
}

inline double rouge_l(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references) {
  detail::check_corpus(candidates.size(), references.size());
  detail::check_references(references);
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) total += rouge_l_sentence(candidates[i], references[i]);
  return total / static_cast<double>(candidates.size());
}

/// Per-item CIDEr-D scores (already scaled by 10).
inline std::vector<double> cider_d_items(const std::vector<Words>& candidates,
                                         const std::vector<std::vector<Words>>& references, double sigma = 6.0) {
  detail::check_corpus(candidates.size(), references.size());
  detail::check_references(references);
  if (candidates.size() < 2) throw ContractError("CIDEr needs a corpus of at least two items");

  std::map<Words, double> doc_freq;
  for (const auto& refs : references) {
    std::map<Words, bool> seen;
    for (const auto& r : refs)
      for (std::size_t n = 1; n <= 4; ++n)
        for (const auto& [g, _] : count_ngrams(r, n)) seen[g] = true;
    for (const auto& [g, _] : seen) doc_freq[g] += 1.0;
  }
  const double log_corpus = std::log(static_cast<double>(candidates.size()));

  struct Vec {
    std::array<NgramCounts, 4> weights;
    std::array<double, 4> norm{};
    double bigrams = 0.0;
  };
  auto vectorize = [&](const Words& w) {
    Vec v;
    for (std::size_t n = 1; n <= 4; ++n) {
      for (const auto& [g, tf] : count_ngrams(w, n)) {
        auto it = doc_freq.find(g);
        const double df = std::log(std::max(1.0, it == doc_freq.end() ? 0.0 : it->second));
        const double weight = tf * (log_corpus - df);
        v.weights[n - 1][g] = weight;
        v.norm[n - 1] += weight * weight;
        if (n == 2) v.bigrams += tf;
      }
      v.norm[n - 1] = std::sqrt(v.norm[n - 1]);
    }
    return v;
  };

  std::vector<double> scores;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Vec hyp = vectorize(candidates[i]);
    std::array<double, 4> sum{};
    for (const auto& r : references[i]) {
      const Vec ref = vectorize(r);
      const double delta = hyp.bigrams - ref.bigrams;
      for (std::size_t n = 0; n < 4; ++n) {
        double val = 0.0;
        for (const auto& [g, w] : hyp.weights[n]) {
          auto it = ref.weights[n].find(g);
          if (it != ref.weights[n].end()) val += std::min(w, it->second) * it->second;
        }
        if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) val /= hyp.norm[n] * ref.norm[n];
        sum[n] += val * std::exp(-(delta * delta) / (2.0 * sigma * sigma));
      }
    }
    double mean = 0.0;
    for (double v : sum) mean += v;
    mean /= 4.0;
    scores.push_back(mean / static_cast<double>(references[i].size()) * 10.0);
  }
  return scores;
}

inline double cider(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references) {
  const auto items = cider_d_items(candidates, references);
  double total = 0.0;
  for (double v : items) total += v;
  return total / static_cast<double>(items.size());
}

struct ItemScores {
  std::string id;
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider = 0.0;
};

struct EvalReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider = 0.0;
  std::vector<ItemScores> items;

  /// Two-row tab-separated table: header then values.
  std::string table() const {
    return fmt::format("BLEU-1\tBLEU-2\tBLEU-3\tBLEU-4\tCIDEr\tROUGE-L\n{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\n",
                       bleu[0], bleu[1], bleu[2], bleu[3], cider, rouge_l);
  }

  nlohmann::json to_json() const {
    nlohmann::json items_json = nlohmann::json::array();
    for (const auto& it : items)
      items_json.push_back({{"id", it.id}, {"bleu", it.bleu}, {"rouge_l", it.rouge_l}, {"cider", it.cider}});
    return {{"bleu", bleu}, {"rouge_l", rouge_l}, {"cider", cider}, {"items", items_json}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.bleu = j.at("bleu").get<std::array<double, 4>>();
    r.rouge_l = j.at("rouge_l").get<double>();
    r.cider = j.at("cider").get<double>();
    for (const auto& it : j.at("items"))
      r.items.push_back({it.at("id").get<std::string>(), it.at("bleu").get<std::array<double, 4>>(),
                         it.at("rouge_l").get<double>(), it.at("cider").get<double>()});
    return r;
  }
};

/// Normalizes text and scores the corpus. `ids` may be empty.
inline EvalReport evaluate_corpus(const std::vector<std::string>& candidates,
                                  const std::vector<std::vector<std::string>>& references,
                                  const std::vector<std::string>& ids = {}) {
  detail::check_corpus(candidates.size(), references.size());
  require(ids.empty() || ids.size() == candidates.size(), "ids and candidates differ in length");
  std::vector<Words> cand;
  std::vector<std::vector<Words>> refs(references.size());
  std::size_t empty = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand.push_back(normalize_words(candidates[i]));
    if (cand.back().empty()) ++empty;
    for (const auto& r : references[i]) refs[i].push_back(normalize_words(r));
  }
  detail::check_references(refs);
  if (empty > 0) log().warn("{} of {} candidates are empty and score zero", empty, candidates.size());

  EvalReport report;
  BleuStats total;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    const BleuStats s = bleu_stats(cand[i], refs[i]);
    total += s;
    ItemScores item;
    item.id = ids.empty() ? std::to_string(i) : ids[i];
    for (std::size_t n = 1; n <= 4; ++n) item.bleu[n - 1] = s.score(n);
    item.rouge_l = rouge_l_sentence(cand[i], refs[i]);
    report.items.push_back(item);
  }
  for (std::size_t n = 1; n <= 4; ++n) report.bleu[n - 1] = total.score(n);
  report.rouge_l = rouge_l(cand, refs);
  if (cand.size() >= 2) {
    const auto c = cider_d_items(cand, refs);
    for (std::size_t i = 0; i < c.size(); ++i) report.items[i].cider = c[i];
    report.cider = cider(cand, refs);
  } else {
    log().warn("CIDEr needs at least two items; reporting 0");
  }
  return report;
}

}  // namespace racap
