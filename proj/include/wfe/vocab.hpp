#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "wfe/errors.hpp"

namespace wfe {

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kUnk = 2;
inline constexpr std::size_t kNumReserved = 3;

inline const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> tokens = {"<s>", "</s>", "<unk>"};
  return tokens;
}

inline bool is_reserved(int id) { return id >= 0 && static_cast<std::size_t>(id) < kNumReserved; }

inline std::vector<std::string> split_tokens(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

class Vocabulary {
 public:
  Vocabulary() {
    for (const auto& t : reserved_tokens()) push(t);
  }

  /// Keeps the most frequent tokens (ties broken lexicographically) until
  /// the vocabulary, reserved entries included, holds `max_size` tokens.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus,
                          std::size_t max_size) {
    std::map<std::string, std::size_t> counts;
    for (const auto& line : corpus)
      for (const auto& tok : line) ++counts[tok];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [tok, n] : ranked) {
      if (v.size() >= max_size) break;
      if (v.ids_.count(tok)) continue;
      v.push(tok);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw InputError("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(std::span<const std::string> words) const {
    std::vector<int> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  /// Target-side encoding: ids followed by EOS.
  std::vector<int> encode_target(std::span<const std::string> words) const {
    auto out = encode(words);
    out.push_back(kEos);
    return out;
  }

  /// Token strings for `ids`, dropping BOS and EOS.
  std::vector<std::string> decode(std::span<const int> ids) const {
    std::vector<std::string> out;
    for (int id : ids) {
      if (id == kBos || id == kEos) continue;
      out.push_back(token(id));
    }
    return out;
  }

  /// One token per line, line number = id.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write vocabulary file " + path);
    for (const auto& t : tokens_) out << t << '\n';
    if (!out) throw InputError("failed writing vocabulary file " + path);
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read vocabulary file " + path);
    Vocabulary v;
    v.tokens_.clear();
    v.ids_.clear();
    std::string line;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || v.ids_.count(line)) {
        throw FormatError("vocabulary " + path + ": empty or duplicate token on line " +
                              std::to_string(v.size() + 1),
                          offset);
      }
      v.push(line);
      offset += line.size() + 1;
    }
    for (std::size_t i = 0; i < kNumReserved; ++i) {
      if (v.size() <= i || v.tokens_[i] != reserved_tokens()[i]) {
        throw FormatError("vocabulary " + path + ": reserved token " + reserved_tokens()[i] +
                              " missing from line " + std::to_string(i + 1),
                          0);
      }
    }
    return v;
  }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void push(const std::string& token) {
    ids_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(token);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace wfe
