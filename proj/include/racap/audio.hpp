#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "racap/archive.hpp"

namespace racap {

/// Tensor names used by single-tensor feature archives. The stored matrix
/// is feature-major ([dim x length]); in memory rows are frames/tokens.
inline constexpr std::string_view kAudioRole = "audio";
inline constexpr std::string_view kLmRole = "lm";

/// Frozen audio features, one row per frame: [T x D_a].
struct AudioFeatureSequence {
  Tensor frames;

  std::size_t num_frames() const { return frames.rows(); }
  std::size_t feature_dim() const { return frames.cols(); }
};

/// Frozen token features, one row per token: [L x D_l].
struct LmFeatureMatrix {
  Tensor tokens;

  std::size_t length() const { return tokens.rows(); }
  std::size_t feature_dim() const { return tokens.cols(); }
};

namespace detail {

inline Tensor load_role_matrix(const std::filesystem::path& path, std::string_view role,
                               std::size_t expected_dim, std::size_t expected_len) {
  const NamedTensors archive = load_archive(path);
  if (archive.size() != 1 || archive.front().first != role)
    throw DataError(path.string() + ": expected a single tensor named '" + std::string(role) + "'");
  const Tensor& stored = archive.front().second;
  if (stored.ndim() != 2)
    throw DataError(path.string() + ": '" + std::string(role) + "' must be a matrix, got dims " +
                    shape_str(stored.dims()));
  if (expected_dim != 0 && stored.rows() != expected_dim)
    throw DataError(path.string() + ": feature dim " + std::to_string(stored.rows()) + " but config expects " +
                    std::to_string(expected_dim));
  if (expected_len != 0 && stored.cols() != expected_len)
    throw DataError(path.string() + ": length " + std::to_string(stored.cols()) + " but config expects " +
                    std::to_string(expected_len));
  for (double v : stored.data())
    if (!std::isfinite(v)) throw DataError(path.string() + ": non-finite feature value");
  return transpose(stored).detach();
}

}  // namespace detail

/// Loads externally computed audio features ([D_a x T] on disk). A zero
/// expectation skips that check.
inline AudioFeatureSequence ingest_precomputed_features(const std::filesystem::path& path,
                                                        std::size_t expected_dim = 0,
                                                        std::size_t expected_frames = 0) {
  return {detail::load_role_matrix(path, kAudioRole, expected_dim, expected_frames)};
}

inline LmFeatureMatrix ingest_lm_features(const std::filesystem::path& path, std::size_t expected_dim = 0) {
  return {detail::load_role_matrix(path, kLmRole, expected_dim, 0)};
}

inline void save_audio_features(const std::filesystem::path& path, const AudioFeatureSequence& f) {
  save_archive(path, {{std::string(kAudioRole), transpose(f.frames).detach()}});
}

inline void save_lm_features(const std::filesystem::path& path, const LmFeatureMatrix& f) {
  save_archive(path, {{std::string(kLmRole), transpose(f.tokens).detach()}});
}

/// What the synthetic extractor needs to know about an item.
struct AudioDescriptor {
  std::size_t cluster = 0;
  std::size_t condition = 0;  // recording condition, shared across clusters
  std::uint64_t item_seed = 0;
};

struct AudioExtractorConfig {
  std::size_t feature_dim = 8;
  std::size_t frames = 16;
  std::size_t clusters = 4;
  std::size_t conditions = 4;
  double signal_amplitude = 1.0;
  double nuisance_amplitude = 2.0;
  double noise = 0.3;
};

/// Frozen stand-in extractor. The first half of the feature dims carries a
/// per-cluster pattern, the second half a per-condition pattern that is
/// unrelated to content, and every value gets item-specific noise.
class TinyAudioExtractor {
 public:
  TinyAudioExtractor(const AudioExtractorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    require(cfg.feature_dim >= 2 && cfg.frames >= 1, "audio extractor needs feature_dim >= 2 and frames >= 1");
    require(cfg.clusters >= 1 && cfg.conditions >= 1, "audio extractor needs clusters and conditions");
    Rng rng(seed);
    const std::size_t signal = signal_dims();
    const std::size_t nuisance = cfg.feature_dim - signal;
    for (std::size_t c = 0; c < cfg.clusters; ++c)
      cluster_bank_.push_back(Tensor::randn({cfg.frames, signal}, cfg.signal_amplitude, rng));
    for (std::size_t c = 0; c < cfg.conditions; ++c)
      condition_bank_.push_back(Tensor::randn({cfg.frames, nuisance}, cfg.nuisance_amplitude, rng));
  }

  const AudioExtractorConfig& config() const { return cfg_; }
  std::size_t signal_dims() const { return cfg_.feature_dim / 2; }

  AudioFeatureSequence extract(const AudioDescriptor& d) const {
    require(d.cluster < cfg_.clusters, "cluster index out of range");
    require(d.condition < cfg_.conditions, "condition index out of range");
    Rng rng(d.item_seed);
    std::normal_distribution<double> noise(0.0, cfg_.noise);
    const std::size_t signal = signal_dims();
    Tensor out({cfg_.frames, cfg_.feature_dim});
    for (std::size_t t = 0; t < cfg_.frames; ++t)
      for (std::size_t k = 0; k < cfg_.feature_dim; ++k) {
        const double base = k < signal ? cluster_bank_[d.cluster](t, k) : condition_bank_[d.condition](t, k - signal);
        out(t, k) = base + noise(rng);
      }
    return {out};
  }

 private:
  AudioExtractorConfig cfg_;
  std::vector<Tensor> cluster_bank_;
  std::vector<Tensor> condition_bank_;
};

}  // namespace racap
