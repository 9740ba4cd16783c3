#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "racap/archive.hpp"
#include "racap/lm.hpp"
#include "racap/tokenizer.hpp"

namespace racap {

/// Maps a caption to contextual token embeddings, one row per token.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Tensor encode(const TokenizedCaption& caption) const = 0;
};

/// Uses the frozen LM's final-layer features as the token embeddings.
class LmTextEncoder : public TextEncoder {
 public:
  explicit LmTextEncoder(const FrozenLm& lm) : lm_(lm) {}
  Tensor encode(const TokenizedCaption& caption) const override {
    return lm_.features(caption.token_ids).detach();
  }

 private:
  const FrozenLm& lm_;
};

struct BertScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

namespace detail {

inline std::vector<std::vector<double>> unit_rows(const Tensor& m, const char* which) {
  require_shape(m.ndim() == 2 && m.rows() >= 1, std::string(which) + " embeddings must be a non-empty matrix");
  std::vector<std::vector<double>> rows(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double sq = 0.0;
    for (std::size_t k = 0; k < m.cols(); ++k) sq += m(i, k) * m(i, k);
    require(sq > 0.0, std::string(which) + " has a zero-norm token embedding");
    const double norm = std::sqrt(sq);
    for (std::size_t k = 0; k < m.cols(); ++k) rows[i][k] = m(i, k) / norm;
  }
  return rows;
}

}  // namespace detail

/// Greedy-matching BERTScore without idf weighting. Inputs are [tokens x dim].
inline BertScore bertscore(const Tensor& candidate, const Tensor& reference) {
  const auto c = detail::unit_rows(candidate, "candidate");
  const auto r = detail::unit_rows(reference, "reference");
  require_shape(candidate.cols() == reference.cols(), "candidate and reference embedding dims differ");
  std::vector<double> best_c(c.size(), -std::numeric_limits<double>::infinity());
  std::vector<double> best_r(r.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = 0; j < r.size(); ++j) {
      double cos = 0.0;
      for (std::size_t k = 0; k < c[i].size(); ++k) cos += c[i][k] * r[j][k];
      best_c[i] = std::max(best_c[i], cos);
      best_r[j] = std::max(best_r[j], cos);
    }
  BertScore s;
  for (double v : best_c) s.precision += v;
  for (double v : best_r) s.recall += v;
  s.precision /= static_cast<double>(c.size());
  s.recall /= static_cast<double>(r.size());
  const double denom = s.precision + s.recall;
  s.f1 = denom == 0.0 ? 0.0 : 2.0 * (s.precision * s.recall) / denom;
  return s;
}

/// Square caption-pair score matrix.
struct SimilarityMatrix {
  Tensor scores;  // [n x n]

  std::size_t size() const { return scores.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return scores(i, j); }
};

/// F1 for every off-diagonal pair; the diagonal is fixed at 1.
inline SimilarityMatrix pairwise_similarity(const std::vector<Tensor>& embeddings) {
  const std::size_t n = embeddings.size();
  require(n >= 2, "pairwise similarity needs at least two captions");
  Tensor m({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    m(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) m(i, j) = m(j, i) = bertscore(embeddings[i], embeddings[j]).f1;
  }
  return {m};
}

inline SimilarityMatrix pairwise_similarity(const std::vector<TokenizedCaption>& captions, const TextEncoder& enc) {
  std::vector<Tensor> embeddings;
  embeddings.reserve(captions.size());
  for (const auto& c : captions) embeddings.push_back(enc.encode(c));
  return pairwise_similarity(embeddings);
}

/// Affine rescale of the off-diagonal entries onto [0, 1].
inline SimilarityMatrix normalize_minmax(const SimilarityMatrix& m) {
  const std::size_t n = m.size();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) {
        lo = std::min(lo, m(i, j));
        hi = std::max(hi, m(i, j));
      }
  if (!(hi > lo)) throw DataError("similarity matrix has no spread: all off-diagonal scores are equal");
  Tensor out = m.scores.clone();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) out(i, j) = (m(i, j) - lo) / (hi - lo);
  return {out};
}

struct SimilarLabelMatrix {
  std::size_t n = 0;
  double threshold = 0.0;
  std::vector<std::uint8_t> labels;  // row-major n x n

  bool similar(std::size_t i, std::size_t j) const { return labels[i * n + j] != 0; }

  /// Indices j != i labeled similar to i, ascending.
  std::vector<std::size_t> similar_to(std::size_t i) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < n; ++j)
      if (similar(i, j)) out.push_back(j);
    return out;
  }

  std::size_t count() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }

  Tensor to_tensor() const {
    Tensor t({n, n});
    for (std::size_t k = 0; k < labels.size(); ++k) t.data()[k] = labels[k];
    return t;
  }

  static SimilarLabelMatrix from_tensor(const Tensor& t, double threshold) {
    if (t.ndim() != 2 || t.rows() != t.cols()) throw DataError("label matrix must be square");
    SimilarLabelMatrix m{t.rows(), threshold, {}};
    for (double v : t.data()) {
      if (v != 0.0 && v != 1.0) throw DataError("label matrix entries must be 0 or 1");
      m.labels.push_back(v == 1.0);
    }
    return m;
  }
};

/// Strictly-greater thresholding; the diagonal is never similar.
inline SimilarLabelMatrix label_similar(const SimilarityMatrix& normalized, double threshold = 0.7) {
  const std::size_t n = normalized.size();
  SimilarLabelMatrix out{n, threshold, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && normalized(i, j) > threshold) out.labels[i * n + j] = 1;
  return out;
}

/// Everything prepare-similarity persists.
struct SimilarityArtifacts {
  SimilarityMatrix raw;
  SimilarityMatrix normalized;
  SimilarLabelMatrix labels;

  NamedTensors to_archive() const {
    return {{"similarity.raw", raw.scores},
            {"similarity.normalized", normalized.scores},
            {"labels", labels.to_tensor()},
            {"threshold", Tensor({1}, labels.threshold)}};
  }

  static SimilarityArtifacts from_archive(const NamedTensors& a) {
    SimilarityArtifacts s;
    s.raw = {archive_get(a, "similarity.raw")};
    s.normalized = {archive_get(a, "similarity.normalized")};
    s.labels = SimilarLabelMatrix::from_tensor(archive_get(a, "labels"), archive_get(a, "threshold").item());
    if (s.raw.scores.dims() != s.normalized.scores.dims() || s.raw.size() != s.labels.n)
      throw DataError("similarity archive matrices disagree in size");
    return s;
  }
};

inline SimilarityArtifacts compute_similarity(const std::vector<TokenizedCaption>& captions, const TextEncoder& enc,
                                              double threshold) {
  SimilarityArtifacts s;
  s.raw = pairwise_similarity(captions, enc);
  s.normalized = normalize_minmax(s.raw);
  s.labels = label_similar(s.normalized, threshold);
  return s;
}

}  // namespace racap
