#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "racap/archive.hpp"
#include "racap/log.hpp"

namespace racap {

struct CheckpointMeta {
  std::string kind;         // "embedder", "decoder", "lm"
  std::string config_hash;  // PipelineConfig::hash() of the producing run
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  double valid_loss = 0.0;
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json to_json(const CheckpointMeta& m) {
  return {{"kind", m.kind},   {"config_hash", m.config_hash}, {"seed", m.seed},
          {"epoch", m.epoch}, {"valid_loss", m.valid_loss},   {"extra", m.extra},
          {"format_version", kArchiveVersion}};
}

/// A checkpoint is `<stem>.ract` (parameters) plus `<stem>.json` (metadata).
struct CheckpointPaths {
  std::filesystem::path tensors, meta;

  explicit CheckpointPaths(const std::filesystem::path& stem) {
    tensors = stem;
    tensors += ".ract";
    meta = stem;
    meta += ".json";
  }
};

inline void save_checkpoint(const std::filesystem::path& stem, const NamedTensors& params,
                            const CheckpointMeta& meta) {
  const CheckpointPaths p(stem);
  write_file_atomic(p.tensors, encode_archive(params));
  write_file_atomic(p.meta, to_json(meta).dump(2) + "\n");
}

struct Checkpoint {
  NamedTensors tensors;
  CheckpointMeta meta;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  const CheckpointPaths p(stem);
  Checkpoint c;
  c.tensors = load_archive(p.tensors);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(p.meta));
    c.meta.kind = j.at("kind").get<std::string>();
    c.meta.config_hash = j.at("config_hash").get<std::string>();
    c.meta.seed = j.at("seed").get<std::uint64_t>();
    c.meta.epoch = j.at("epoch").get<std::size_t>();
    c.meta.valid_loss = j.at("valid_loss").get<double>();
    c.meta.extra = j.value("extra", nlohmann::json::object());
    if (j.value("format_version", 0) != kArchiveVersion)
      throw DataError("unsupported checkpoint version in " + p.meta.string());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint metadata " + p.meta.string() + ": " + e.what());
  }
  return c;
}

/// Copies checkpoint values into existing parameters, matching by name.
/// Missing tensors and dimension mismatches are errors.
inline void restore_parameters(const NamedTensors& target, const NamedTensors& stored) {
  for (const auto& [name, t] : target) {
    const Tensor& src = archive_get(stored, name);
    if (src.dims() != t.dims())
      throw ShapeError("checkpoint tensor '" + name + "' has dims " + shape_str(src.dims()) +
                       ", model expects " + shape_str(t.dims()));
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  }
}

/// Warns when a checkpoint was produced under a different configuration.
inline void check_config_hash(const CheckpointMeta& meta, const std::string& expected) {
  if (meta.config_hash != expected)
    log().warn("checkpoint config hash {} differs from current config {}", meta.config_hash, expected);
}

}  // namespace racap
