#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wfe/corpus.hpp"
#include "wfe/errors.hpp"
#include "wfe/model.hpp"
#include "wfe/vocab.hpp"
#include "wfe/wfe.hpp"

namespace wfe {

using Tokens = std::vector<std::string>;

// ---------------------------------------------------------------------------
// ROUGE
// ---------------------------------------------------------------------------
//
// Plain ROUGE-N (clipped n-gram overlap) and ROUGE-L (LCS) without stemming
// or stopword removal. Corpus scores average the per-pair scores.

enum class RougeVariant { rouge1, rouge2, rougeL };
enum class RougeBasis { recall, precision, f1 };

struct RougeScore {
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;

  double get(RougeBasis b) const {
    switch (b) {
      case RougeBasis::recall: return recall;
      case RougeBasis::precision: return precision;
      case RougeBasis::f1: return f1;
    }
    return 0.0;
  }
};

inline RougeScore score_from_counts(double match, double cand_total, double ref_total) {
  RougeScore s;
  s.recall = ref_total > 0 ? match / ref_total : 0.0;
  s.precision = cand_total > 0 ? match / cand_total : 0.0;
  s.f1 = s.recall + s.precision > 0 ? 2.0 * s.recall * s.precision / (s.recall + s.precision) : 0.0;
  return s;
}

inline std::map<Tokens, int> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<Tokens, int> out;
  if (t.size() < n) return out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) {
    ++out[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i),
                 t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return out;
}

inline RougeScore rouge_n(const Tokens& cand, const Tokens& ref, std::size_t n) {
  const auto c = ngram_counts(cand, n);
  const auto r = ngram_counts(ref, n);
  double match = 0.0;
  for (const auto& [gram, rc] : r) {
    auto it = c.find(gram);
    if (it != c.end()) match += std::min(rc, it->second);
  }
  const double cand_total = cand.size() >= n ? static_cast<double>(cand.size() - n + 1) : 0.0;
  const double ref_total = ref.size() >= n ? static_cast<double>(ref.size() - n + 1) : 0.0;
  return score_from_counts(match, cand_total, ref_total);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline RougeScore rouge_l(const Tokens& cand, const Tokens& ref) {
  return score_from_counts(static_cast<double>(lcs_length(cand, ref)),
                           static_cast<double>(cand.size()), static_cast<double>(ref.size()));
}

inline RougeScore rouge_pair(const Tokens& cand, const Tokens& ref, RougeVariant v) {
  switch (v) {
    case RougeVariant::rouge1: return rouge_n(cand, ref, 1);
    case RougeVariant::rouge2: return rouge_n(cand, ref, 2);
    case RougeVariant::rougeL: return rouge_l(cand, ref);
  }
  return {};
}

/// Longest prefix of `text` of at most `limit` bytes that ends on a UTF-8
/// character boundary.
inline std::string truncate_utf8(const std::string& text, std::size_t limit) {
  if (text.size() <= limit) return text;
  std::size_t cut = limit;
  while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
  return text.substr(0, cut);
}

inline Tokens apply_byte_limit(const Tokens& cand, std::optional<std::size_t> byte_limit) {
  if (!byte_limit) return cand;
  return split_tokens(truncate_utf8(join_tokens(cand), *byte_limit));
}

/// Mean per-pair ROUGE over aligned candidate/reference lists. Empty
/// references score 0 and add a line to `warnings` when provided.
inline double rouge(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                    RougeVariant variant, RougeBasis basis,
                    std::optional<std::size_t> byte_limit = std::nullopt,
                    std::vector<std::string>* warnings = nullptr) {
  if (candidates.size() != references.size()) {
    throw InputError("rouge: " + std::to_string(candidates.size()) + " candidates vs " +
                     std::to_string(references.size()) + " references");
  }
  if (candidates.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (references[i].empty()) {
      if (warnings) warnings->push_back("reference " + std::to_string(i + 1) + " is empty; scored 0");
      continue;
    }
    total += rouge_pair(apply_byte_limit(candidates[i], byte_limit), references[i], variant).get(basis);
  }
  return total / static_cast<double>(candidates.size());
}

// ---------------------------------------------------------------------------
// Repetition
// ---------------------------------------------------------------------------

inline bool is_reserved_token(const std::string& t) {
  const auto& r = reserved_tokens();
  return std::find(r.begin(), r.end(), t) != r.end();
}

/// Fraction of non-special tokens that are surplus repeats of a word already
/// emitted in the same output.
inline double repeat_rate(const std::vector<Tokens>& outputs) {
  std::size_t surplus = 0, total = 0;
  for (const auto& out : outputs) {
    std::map<std::string, std::size_t> counts;
    for (const auto& t : out) {
      if (is_reserved_token(t)) continue;
      ++total;
      if (counts[t]++ > 0) ++surplus;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(surplus) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// WFE confusion matrix
// ---------------------------------------------------------------------------

/// Rows: true frequency {1, 2, >=3}. Columns: quantized estimate {0, 1, 2, 3, >=4}.
struct ConfusionMatrix {
  static constexpr std::size_t kRows = 3;
  static constexpr std::size_t kCols = 5;
  std::array<std::array<std::size_t, kCols>, kRows> counts{};

  static std::size_t row_of(int truth) { return static_cast<std::size_t>(std::min(truth, 3) - 1); }
  static std::size_t col_of(int estimate) {
    return static_cast<std::size_t>(std::clamp(estimate, 0, 4));
  }

  /// Buckets every word with a_star >= 1.
  void add(std::span<const int> a_star, std::span<const int> quantized) {
    if (a_star.size() != quantized.size()) {
      throw DimensionError("confusion: " + std::to_string(a_star.size()) + " true vs " +
                           std::to_string(quantized.size()) + " estimated frequencies");
    }
    for (std::size_t m = 0; m < a_star.size(); ++m) {
      if (a_star[m] >= 1) ++counts[row_of(a_star[m])][col_of(quantized[m])];
    }
  }

  std::size_t total() const {
    std::size_t t = 0;
    for (const auto& row : counts)
      for (auto c : row) t += c;
    return t;
  }

  std::string render() const {
    static const char* rows[kRows] = {"1", "2", ">=3"};
    std::ostringstream os;
    os << "true\\est\t0\t1\t2\t3\t>=4\n";
    for (std::size_t r = 0; r < kRows; ++r) {
      os << rows[r];
      for (auto c : counts[r]) os << '\t' << c;
      os << '\n';
    }
    return os.str();
  }
};

inline ConfusionMatrix wfe_confusion(const Seq2Seq& model, const ParallelCorpus& corpus) {
  const auto& wfe_params = model.wfe();
  NoGradGuard no_grad;
  ConfusionMatrix cm;
  for (const auto& ex : corpus) {
    const EncoderStates enc = encode(model, ex.source);
    const WfeEstimate est = wfe_forward(enc.states, wfe_params);
    const auto a_star = true_frequency(ex.target, model.config().tgt_vocab);
    cm.add(a_star, quantize(est.a_hat.data()));
  }
  return cm;
}

}  // namespace wfe
