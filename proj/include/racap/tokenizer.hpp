#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "racap/fs_util.hpp"
#include "racap/text.hpp"

namespace racap {

using TokenId = std::size_t;

struct SpecialTokens {
  TokenId pad = 0;
  TokenId bos = 1;
  TokenId eos = 2;
  TokenId sep = 3;
  TokenId unk = 4;

  bool is_special(TokenId t) const { return t <= unk; }
};

inline const std::vector<std::string>& special_token_names() {
  static const std::vector<std::string> names{"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};
  return names;
}

struct TokenizedCaption {
  std::string text;
  std::vector<TokenId> token_ids;
};

/// Word-level vocabulary: five special tokens followed by the sorted set of
/// normalized words seen in the training captions.
class TinyTokenizer {
 public:
  TinyTokenizer() : vocab_(special_token_names()) { reindex(); }

  static TinyTokenizer build(std::span<const std::string> captions) {
    std::set<std::string> words;
    for (const auto& c : captions)
      for (auto& w : normalize_words(c)) words.insert(std::move(w));
    TinyTokenizer t;
    t.vocab_.insert(t.vocab_.end(), words.begin(), words.end());
    t.reindex();
    return t;
  }

  /// Reads one token per line, specials first.
  static TinyTokenizer load(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    TinyTokenizer t;
    t.vocab_.clear();
    std::size_t start = 0;
    while (start < text.size()) {
      auto nl = text.find('\n', start);
      if (nl == std::string::npos) nl = text.size();
      if (nl > start) t.vocab_.push_back(text.substr(start, nl - start));
      start = nl + 1;
    }
    const auto& sp = special_token_names();
    if (t.vocab_.size() < sp.size() || !std::equal(sp.begin(), sp.end(), t.vocab_.begin()))
      throw DataError(path.string() + ": vocabulary must start with the special tokens");
    t.reindex();
    if (t.index_.size() != t.vocab_.size()) throw DataError(path.string() + ": duplicate vocabulary entries");
    return t;
  }

  void save(const std::filesystem::path& path) const {
    std::string text;
    for (const auto& w : vocab_) text += w + "\n";
    write_file_atomic(path, text);
  }

  std::size_t vocab_size() const { return vocab_.size(); }
  const SpecialTokens& specials() const { return specials_; }
  const std::string& token(TokenId id) const { return vocab_.at(id); }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& w : normalize_words(text)) {
      auto it = index_.find(w);
      ids.push_back(it == index_.end() ? specials_.unk : it->second);
    }
    return ids;
  }

  TokenizedCaption tokenize(std::string_view text) const {
    TokenizedCaption c{std::string(text), encode(text)};
    require(!c.token_ids.empty(), "caption has no tokens: '" + std::string(text) + "'");
    return c;
  }

  /// Joins word tokens; special tokens other than <unk> are dropped.
  std::string decode(std::span<const TokenId> ids) const {
    std::vector<std::string> words;
    for (auto id : ids) {
      require(id < vocab_.size(), "token id out of vocabulary");
      if (!specials_.is_special(id) || id == specials_.unk) words.push_back(vocab_[id]);
    }
    return join_words(words);
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < vocab_.size(); ++i) index_.emplace(vocab_[i], i);
  }

  std::vector<std::string> vocab_;
  std::map<std::string, TokenId, std::less<>> index_;
  SpecialTokens specials_;
};

}  // namespace racap
