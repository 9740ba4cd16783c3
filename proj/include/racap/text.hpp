#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace racap {

/// Lowercases, drops punctuation and splits on whitespace. Used both for
/// tokenizing captions and for metric computation.
inline std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else if (std::ispunct(c)) {
      continue;
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

}  // namespace racap
