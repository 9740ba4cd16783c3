#pragma once

// Dataset manifest: one JSON object per line,
//   {"id": "...", "split": "train"|"valid"|"test",
//    "feature_path": "...", "captions": ["...", ...]}
// feature_path is resolved relative to the manifest's directory.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string_view>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "racap/fs_util.hpp"

namespace racap {

enum class Split { kTrain, kValid, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  return std::nullopt;
}

struct ManifestRow {
  std::string id;
  Split split = Split::kTrain;
  std::string feature_path;
  std::vector<std::string> captions;
};

struct DatasetManifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRow> rows;

  std::filesystem::path resolve(const ManifestRow& row) const {
    const std::filesystem::path p(row.feature_path);
    return p.is_absolute() ? p : base_dir / p;
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].split == s) out.push_back(i);
    return out;
  }

  std::optional<std::size_t> find(std::string_view id) const {
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].id == id) return i;
    return std::nullopt;
  }
};

inline nlohmann::json to_json(const ManifestRow& r) {
  return {{"id", r.id}, {"split", to_string(r.split)}, {"feature_path", r.feature_path},
          {"captions", r.captions}};
}

/// Parses and validates manifest text. `check_paths` verifies that every
/// feature file exists under `base_dir`.
inline DatasetManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir,
                                      bool check_paths = true) {
  DatasetManifest m;
  m.base_dir = base_dir;
  std::unordered_map<std::string, std::size_t> id_line;
  std::unordered_map<std::string, bool> path_ok;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) -> DataError {
    return DataError("manifest line " + std::to_string(line_no) + ": " + what);
  };
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw fail("expected a JSON object");
    for (const char* key : {"id", "split", "feature_path", "captions"})
      if (!j.contains(key)) throw fail(std::string("missing field '") + key + "'");

    ManifestRow row;
    if (!j["id"].is_string() || j["id"].get<std::string>().empty()) throw fail("'id' must be a non-empty string");
    row.id = j["id"].get<std::string>();
    if (!j["split"].is_string()) throw fail("'split' must be a string");
    const auto split = parse_split(j["split"].get<std::string>());
    if (!split) throw fail("unknown split '" + j["split"].get<std::string>() + "'");
    row.split = *split;
    if (!j["feature_path"].is_string()) throw fail("'feature_path' must be a string");
    row.feature_path = j["feature_path"].get<std::string>();
    if (!j["captions"].is_array() || j["captions"].empty()) throw fail("'captions' must be a non-empty list");
    for (const auto& c : j["captions"]) {
      if (!c.is_string()) throw fail("captions must be strings");
      row.captions.push_back(c.get<std::string>());
    }
    if (auto [it, fresh] = id_line.emplace(row.id, line_no); !fresh)
      throw fail("duplicate id '" + row.id + "' (first seen on line " + std::to_string(it->second) + ")");
    if (check_paths) {
      auto [it, fresh] = path_ok.emplace(row.feature_path, false);
      if (fresh) it->second = std::filesystem::exists(m.resolve(row));
      if (!it->second) throw fail("feature_path '" + row.feature_path + "' does not exist");
    }
    m.rows.push_back(std::move(row));
  }
  if (m.indices(Split::kTrain).empty()) throw DataError("manifest has no train rows");
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_file(path), path.parent_path());
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::string text;
  for (const auto& r : m.rows) text += to_json(r).dump() + "\n";
  write_file_atomic(path, text);
}

}  // namespace racap
