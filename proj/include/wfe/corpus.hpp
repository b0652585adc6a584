#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "wfe/errors.hpp"
#include "wfe/rng.hpp"
#include "wfe/vocab.hpp"

namespace wfe {

struct TextPair {
  std::vector<std::string> source;
  std::vector<std::string> target;

  bool operator==(const TextPair&) const = default;
};

struct Example {
  std::vector<int> source;
  std::vector<int> target;  // ends with EOS
};

using ParallelCorpus = std::vector<Example>;

inline std::string format_pair(const TextPair& p) {
  return join_tokens(p.source) + '\t' + join_tokens(p.target);
}

inline std::string format_corpus(const std::vector<TextPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) out += format_pair(p) + '\n';
  return out;
}

/// `source<TAB>target` per line, tokens separated by spaces.
inline void write_corpus(const std::string& path, const std::vector<TextPair>& pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write corpus file " + path);
  out << format_corpus(pairs);
  if (!out) throw InputError("failed writing corpus file " + path);
}

inline std::vector<TextPair> parse_corpus(std::istream& in, const std::string& name) {
  std::vector<TextPair> pairs;
  std::string line;
  std::size_t offset = 0, lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t line_bytes = line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(name + ": line " + std::to_string(lineno) + " has no tab separator", offset);
    }
    TextPair p{split_tokens(std::string_view(line).substr(0, tab)),
               split_tokens(std::string_view(line).substr(tab + 1))};
    if (p.source.empty() || p.target.empty()) {
      throw FormatError(name + ": line " + std::to_string(lineno) + " has an empty side", offset);
    }
    pairs.push_back(std::move(p));
    offset += line_bytes;
  }
  return pairs;
}

inline std::vector<TextPair> read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read corpus file " + path);
  return parse_corpus(in, path);
}

inline ParallelCorpus encode_corpus(const std::vector<TextPair>& pairs, const Vocabulary& src,
                                    const Vocabulary& tgt) {
  ParallelCorpus out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({src.encode(p.source), tgt.encode_target(p.target)});
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic keyword-compression task
// ---------------------------------------------------------------------------
//
// The source interleaves content words with filler words; the target is the
// content words in source order. Each chosen content word is repeated
// according to a count drawn from `repeat_counts` (mostly 1, sometimes 2),
// and the copies appear in both source and target, so every target token is
// visible in its source and the true frequencies are mostly 1.

struct SyntheticConfig {
  std::size_t pairs = 2500;
  std::size_t vocab_size = 60;  // content + filler words, reserved tokens excluded
  int min_content = 3;
  int max_content = 6;
  int min_filler = 2;
  int max_filler = 6;
  std::vector<int> repeat_counts = {1, 1, 1, 2};

  std::size_t filler_words() const { return vocab_size / 3; }
  std::size_t content_words() const { return vocab_size - filler_words(); }

  void validate() const {
    if (vocab_size < 20) throw ConfigError("synthetic corpus: vocabulary size must be >= 20");
    if (min_content < 1 || max_content < min_content) {
      throw ConfigError("synthetic corpus: bad content length range");
    }
    if (min_filler < 0 || max_filler < min_filler) {
      throw ConfigError("synthetic corpus: bad filler count range");
    }
    if (repeat_counts.empty()) throw ConfigError("synthetic corpus: empty repeat distribution");
  }
};

inline std::string synthetic_word(char prefix, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%03zu", prefix, index);
  return buf;
}

inline std::vector<TextPair> gen_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t n_content = cfg.content_words(), n_filler = cfg.filler_words();
  std::vector<TextPair> out;
  out.reserve(cfg.pairs);
  for (std::size_t p = 0; p < cfg.pairs; ++p) {
    TextPair pair;
    const int words = rng.between(cfg.min_content, cfg.max_content);
    for (int w = 0; w < words; ++w) {
      const std::string word = synthetic_word('w', static_cast<std::size_t>(rng.below(n_content)));
      const int copies = cfg.repeat_counts[rng.below(cfg.repeat_counts.size())];
      for (int c = 0; c < copies; ++c) pair.target.push_back(word);
    }
    pair.source = pair.target;
    const int fillers = rng.between(cfg.min_filler, cfg.max_filler);
    for (int f = 0; f < fillers; ++f) {
      const auto pos = static_cast<std::ptrdiff_t>(rng.below(pair.source.size() + 1));
      pair.source.insert(pair.source.begin() + pos,
                         synthetic_word('f', static_cast<std::size_t>(rng.below(n_filler))));
    }
    out.push_back(std::move(pair));
  }
  return out;
}

struct CorpusSplits {
  std::vector<TextPair> train, val, test;
};

/// 80/10/10 split in generation order; every split keeps at least one pair
/// when there are three or more.
inline CorpusSplits split_corpus(const std::vector<TextPair>& pairs) {
  const std::size_t n = pairs.size();
  std::size_t n_val = n / 10, n_test = n / 10;
  if (n >= 3) {
    n_val = std::max<std::size_t>(n_val, 1);
    n_test = std::max<std::size_t>(n_test, 1);
  }
  const std::size_t n_train = n - n_val - n_test;
  CorpusSplits s;
  s.train.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(pairs.begin() + static_cast<std::ptrdiff_t>(n_train),
               pairs.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(pairs.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), pairs.end());
  return s;
}

}  // namespace wfe
