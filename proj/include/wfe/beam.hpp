#pragma once

// K-best beam search, optionally constrained by word-frequency estimates.
//
// Each outer iteration expands every working hypothesis (its score vector
// over the M target words forms one column of the candidate matrix), takes
// the K−C best finite cells, turns them into new hypotheses, keeps the top K
// of those together with the already complete ones, and separates the result
// into complete and working sets again. Decoding ends when no working
// hypothesis is left.
//
// In WFE mode every hypothesis carries a residual budget r̃ (initially r̂)
// and candidate scores get the extra term log(clip01(r̃) ⊙ ĝ). Emitting word
// m subtracts 1 from r̃[m], so once r̃[m] <= 0 the word scores −∞ and can no
// longer be produced by that hypothesis or any of its descendants.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wfe/errors.hpp"
#include "wfe/model.hpp"
#include "wfe/vocab.hpp"
#include "wfe/wfe.hpp"

namespace wfe {

enum class DecodeMode { baseline, wfe };

/// Score used for −∞ cells inside the candidate matrix.
inline constexpr double kScoreSentinel = -1e30;

struct BeamHypothesis {
  double score = 0.0;         // cumulative log-likelihood s
  std::vector<int> tokens;    // starts with BOS
  DecoderState state;         // decoder state after consuming `tokens`
  std::optional<std::vector<double>> budget;  // residual budget r̃ (WFE mode)
  bool complete = false;
  bool forced = false;        // EOS was imposed by the length cap
  std::size_t id = 0;

  std::size_t emitted() const { return tokens.empty() ? 0 : tokens.size() - 1; }

  /// Emitted tokens without BOS/EOS.
  std::vector<int> output() const {
    std::vector<int> out;
    for (std::size_t i = 1; i < tokens.size(); ++i)
      if (tokens[i] != kEos) out.push_back(tokens[i]);
    return out;
  }
};

/// Externally supplied or model-estimated (r̂, ĝ) over the target vocabulary.
struct WfeGuide {
  std::vector<double> r_hat;
  std::vector<double> g_hat;
};

struct DecodeOptions {
  std::size_t beam = 5;
  DecodeMode mode = DecodeMode::baseline;
  std::size_t max_len = 0;  // emitted tokens including EOS; 0 means 2·|X| + 5
  std::vector<int> exempt = {kBos, kEos, kUnk};  // never adjusted or budgeted
  std::ostream* trace = nullptr;
};

struct DecodeResult {
  std::vector<BeamHypothesis> hypotheses;  // complete, best first
  bool length_capped = false;              // every result needed a forced EOS

  const BeamHypothesis& best() const { return hypotheses.front(); }
};

inline std::size_t default_max_len(std::size_t source_length) { return 2 * source_length + 5; }

inline bool is_exempt(std::span<const int> exempt, std::size_t m) {
  return std::find(exempt.begin(), exempt.end(), static_cast<int>(m)) != exempt.end();
}

/// Ordering used by findKBest and selectTopK: higher score, then shorter,
/// then lexicographically smaller token ids.
inline bool hypothesis_before(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

// ---------------------------------------------------------------------------

struct Expansion {
  std::vector<double> base;    // s + log Softmax(o_j)
  std::vector<double> adjust;  // ã_j, all zero in baseline mode
  DecoderState next;
};

inline Expansion expand(const Seq2Seq& model, const EncoderStates& enc, const BeamHypothesis& h) {
  if (h.complete) throw StateError("calc_ll: hypothesis is already complete");
  if (h.tokens.empty()) throw StateError("calc_ll: hypothesis has no tokens (missing BOS)");
  NoGradGuard no_grad;
  DecodeStep step = decode_step(model, enc, h.state, h.tokens.back());
  const Tensor lp = log_softmax(step.logits);
  Expansion e;
  e.base.resize(lp.size());
  for (std::size_t m = 0; m < lp.size(); ++m) e.base[m] = h.score + lp[m];
  e.adjust.assign(lp.size(), 0.0);
  e.next = std::move(step.state);
  return e;
}

/// õ_j = v(s_{j−1}, M) + log Softmax(o_j).
inline std::vector<double> calc_ll(const Seq2Seq& model, const EncoderStates& enc,
                                   const BeamHypothesis& h) {
  return expand(model, enc, h).base;
}

/// ã_j = log(ClipReLU1(r̃_j) ⊙ ĝ); exempt entries are 0 and blocked entries −∞.
inline std::vector<double> wfe_adjustment(std::span<const double> budget,
                                          std::span<const double> g_hat,
                                          std::span<const int> exempt) {
  if (budget.size() != g_hat.size()) {
    throw DimensionError("wfe adjustment: budget of " + std::to_string(budget.size()) +
                         " vs gate of " + std::to_string(g_hat.size()));
  }
  std::vector<double> out(budget.size(), 0.0);
  for (std::size_t m = 0; m < out.size(); ++m) {
    if (is_exempt(exempt, m)) continue;
    const double v = std::clamp(budget[m], 0.0, 1.0) * g_hat[m];
    out[m] = v > 0.0 ? std::log(v) : -std::numeric_limits<double>::infinity();
  }
  return out;
}

inline std::vector<double> calc_ll_wfe(const Seq2Seq& model, const EncoderStates& enc,
                                       const BeamHypothesis& h, std::span<const double> g_hat,
                                       std::span<const int> exempt = {}) {
  if (!h.budget) throw StateError("calc_ll_wfe: hypothesis carries no residual budget");
  std::vector<double> scores = calc_ll(model, enc, h);
  const auto adj = wfe_adjustment(*h.budget, g_hat, exempt);
  if (adj.size() != scores.size()) {
    throw DimensionError("calc_ll_wfe: budget covers " + std::to_string(adj.size()) +
                         " words, model emits " + std::to_string(scores.size()));
  }
  for (std::size_t m = 0; m < scores.size(); ++m) scores[m] += adj[m];
  return scores;
}

/// r̃_{j+1} = r̃_j − onehot(emitted), exempt ids untouched.
inline std::vector<double> update_budget(std::span<const double> budget, int emitted,
                                         std::span<const int> exempt = {}) {
  if (emitted < 0 || static_cast<std::size_t>(emitted) >= budget.size()) {
    throw InputError("update_budget: token id " + std::to_string(emitted) + " out of range");
  }
  std::vector<double> out(budget.begin(), budget.end());
  if (!is_exempt(exempt, static_cast<std::size_t>(emitted))) out[static_cast<std::size_t>(emitted)] -= 1.0;
  return out;
}

// ---------------------------------------------------------------------------

namespace detail {

struct Cell {
  double score;
  double base;
  double adjust;
  std::size_t k;  // working hypothesis
  int m;          // word
};

inline void trace_triplet(std::ostream& os, std::size_t step, const BeamHypothesis& child,
                          const BeamHypothesis& parent, const Cell& cell) {
  nlohmann::json rec;
  rec["step"] = step;
  rec["hyp"] = child.id;
  rec["parent"] = parent.id;
  rec["token"] = cell.m;
  rec["base_logprob"] = cell.base - parent.score;
  rec["adjustment"] = std::isfinite(cell.adjust) ? nlohmann::json(cell.adjust) : nlohmann::json("-inf");
  rec["score"] = child.score;
  rec["complete"] = child.complete;
  if (parent.budget) rec["budget"] = *parent.budget;
  os << rec.dump() << '\n';
}

}  // namespace detail

/// Estimates (r̂, ĝ) from the model's own WFE head.
inline WfeGuide estimate_guide(const Seq2Seq& model, const EncoderStates& enc) {
  NoGradGuard no_grad;
  const WfeEstimate est = wfe_forward(enc.states, model.wfe());
  return {est.r_hat.to_vector(), est.g_hat.to_vector()};
}

inline DecodeResult beam_search(const Seq2Seq& model, std::span<const int> source,
                                const DecodeOptions& opts, const WfeGuide* guide = nullptr) {
  if (opts.beam < 1) throw ConfigError("beam_search: beam width K must be >= 1");
  NoGradGuard no_grad;
  const std::size_t M = model.config().tgt_vocab;
  const std::size_t K = opts.beam;
  const EncoderStates enc = encode(model, source);
  const std::size_t max_len = opts.max_len ? opts.max_len : default_max_len(source.size());
  const bool wfe_mode = opts.mode == DecodeMode::wfe;

  WfeGuide own;
  if (wfe_mode && !guide) {
    if (!model.has_wfe()) {
      throw StateError("WFE decoding requested but the model has no WFE parameters");
    }
    own = estimate_guide(model, enc);
    guide = &own;
  }
  if (wfe_mode && (guide->r_hat.size() != M || guide->g_hat.size() != M)) {
    throw DimensionError("beam_search: WFE estimates must cover all " + std::to_string(M) +
                         " target words");
  }

  std::size_t next_id = 0;
  BeamHypothesis root;
  root.tokens = {kBos};
  root.state = initial_decoder_state(model, enc);
  if (wfe_mode) root.budget = guide->r_hat;
  root.id = next_id++;

  std::vector<BeamHypothesis> working{std::move(root)};
  std::vector<BeamHypothesis> complete;
  std::size_t step = 0;

  while (!working.empty()) {
    ++step;
    // Score every (word, hypothesis) cell.
    std::vector<Expansion> expansions;
    expansions.reserve(working.size());
    std::vector<detail::Cell> cells;
    for (std::size_t k = 0; k < working.size(); ++k) {
      Expansion e = expand(model, enc, working[k]);
      if (wfe_mode) e.adjust = wfe_adjustment(*working[k].budget, guide->g_hat, opts.exempt);
      const bool at_cap = working[k].emitted() + 1 >= max_len;
      for (std::size_t m = 0; m < M; ++m) {
        if (static_cast<int>(m) == kBos) continue;
        if (at_cap && static_cast<int>(m) != kEos) continue;
        double v = e.base[m] + e.adjust[m];
        if (!std::isfinite(v)) v = kScoreSentinel;
        if (v <= kScoreSentinel) continue;
        cells.push_back({v, e.base[m], e.adjust[m], k, static_cast<int>(m)});
      }
      expansions.push_back(std::move(e));
    }

    // findKBest over the candidate matrix.
    const std::size_t want = K - complete.size();
    const auto cell_before = [&](const detail::Cell& a, const detail::Cell& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.k != b.k) return working[a.k].tokens < working[b.k].tokens;
      return a.m < b.m;
    };
    const std::size_t take = std::min(want, cells.size());
    std::partial_sort(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(take), cells.end(),
                      cell_before);
    cells.resize(take);

    // makeTriplet.
    std::vector<BeamHypothesis> fresh;
    fresh.reserve(cells.size());
    for (const auto& c : cells) {
      const BeamHypothesis& parent = working[c.k];
      BeamHypothesis child;
      child.score = c.score;
      child.tokens = parent.tokens;
      child.tokens.push_back(c.m);
      child.state = expansions[c.k].next;
      if (parent.budget) child.budget = update_budget(*parent.budget, c.m, opts.exempt);
      child.complete = c.m == kEos;
      child.forced = child.complete && parent.emitted() + 1 >= max_len;
      child.id = next_id++;
      if (opts.trace) detail::trace_triplet(*opts.trace, step, child, parent, c);
      fresh.push_back(std::move(child));
    }

    // Every cell of every working hypothesis is blocked: close them with a
    // forced EOS so the search still returns something.
    if (fresh.empty() && complete.empty()) {
      for (std::size_t k = 0; k < working.size(); ++k) {
        BeamHypothesis child = working[k];
        const double eos = expansions[k].base[static_cast<std::size_t>(kEos)];
        child.score = std::isfinite(eos) ? eos : kScoreSentinel;
        child.tokens.push_back(kEos);
        child.complete = child.forced = true;
        child.id = next_id++;
        fresh.push_back(std::move(child));
      }
    }

    // selectTopK over complete ∪ fresh, then sepComp.
    std::vector<BeamHypothesis> pool = std::move(complete);
    for (auto& h : fresh) pool.push_back(std::move(h));
    std::stable_sort(pool.begin(), pool.end(), hypothesis_before);
    if (pool.size() > K) pool.resize(K);

    complete.clear();
    working.clear();
    for (auto& h : pool) (h.complete ? complete : working).push_back(std::move(h));
  }

  DecodeResult result;
  result.hypotheses = std::move(complete);
  std::stable_sort(result.hypotheses.begin(), result.hypotheses.end(), hypothesis_before);
  result.length_capped =
      !result.hypotheses.empty() &&
      std::all_of(result.hypotheses.begin(), result.hypotheses.end(),
                  [](const BeamHypothesis& h) { return h.forced; });
  return result;
}

}  // namespace wfe
