#include <gtest/gtest.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>

#include "oracles.hpp"
#include "support.hpp"
#include "wfe/beam.hpp"

using namespace wfe;
using namespace wfe::testing;

namespace {

BeamHypothesis root_hypothesis(const Seq2Seq& m, const EncoderStates& enc, double score = 0.0) {
  BeamHypothesis h;
  h.score = score;
  h.tokens = {kBos};
  h.state = initial_decoder_state(m, enc);
  return h;
}

WfeGuide random_guide(Rng& rng, std::size_t M, double r_max) {
  WfeGuide g;
  for (std::size_t m = 0; m < M; ++m) {
    g.r_hat.push_back(rng.uniform(-0.5, r_max));
    const double u = rng.uniform();
    g.g_hat.push_back(u < 0.2 ? 0.0 : u);
  }
  return g;
}

}  // namespace

TEST(CalcLL, ZeroModelUniform) {
  const auto m = Seq2Seq::zeros(small_config(3, 4, 8, 4));
  const auto enc = encode(m, std::vector<int>{3, 4});
  const auto scores = calc_ll(m, enc, root_hypothesis(m, enc, -1.2));
  ASSERT_EQ(scores.size(), 4u);
  for (double s : scores) EXPECT_NEAR(s, -1.2 - std::log(4.0), 1e-12);
  EXPECT_NEAR(scores[0], -2.5863, 1e-4);
}

TEST(CalcLL, FirstStepIsLogSoftmax) {
  const auto m = random_model(small_config(3, 4, 8, 6), 1);
  const auto enc = encode(m, std::vector<int>{3, 4, 7});
  const auto scores = calc_ll(m, enc, root_hypothesis(m, enc));
  const auto step = decode_step(m, enc, initial_decoder_state(m, enc), kBos);
  const auto lp = log_softmax(step.logits);
  for (std::size_t i = 0; i < scores.size(); ++i) EXPECT_EQ(scores[i], lp[i]);
}

TEST(CalcLL, NeverExceedsParentScore) {
  Rng rng(2);
  const auto m = random_model(small_config(3, 4, 8, 6), 2, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto enc = encode(m, random_ids(rng, 3, 8));
    const double s = rng.uniform(-5, 0);
    for (double v : calc_ll(m, enc, root_hypothesis(m, enc, s))) ASSERT_LE(v, s);
  }
}

TEST(CalcLL, CompleteHypothesisRejected) {
  const auto m = random_model(small_config(3, 4, 8, 6), 1);
  const auto enc = encode(m, std::vector<int>{3});
  auto h = root_hypothesis(m, enc);
  h.complete = true;
  EXPECT_THROW(calc_ll(m, enc, h), StateError);
}

TEST(WfeAdjustment, PartialBudget) {
  const std::vector<double> budget = {5, 5, 5, 0.3}, g = {1, 1, 1, 1};
  const auto adj = wfe_adjustment(budget, g, std::vector<int>{kBos, kEos, kUnk});
  EXPECT_NEAR(adj[3], std::log(0.3), 1e-15);
  EXPECT_NEAR(adj[3], -1.204, 1e-3);
  EXPECT_EQ(adj[0], 0.0);
}

TEST(WfeAdjustment, FullBudgetNoPenalty) {
  const std::vector<double> budget = {1.0, 4.0}, g = {1.0, 1.0 - 1e-12};
  const auto adj = wfe_adjustment(budget, g, std::vector<int>{});
  EXPECT_EQ(adj[0], 0.0);
  EXPECT_NEAR(adj[1], 0.0, 1e-11);
}

TEST(WfeAdjustment, ExhaustedBudgetBlocks) {
  const std::vector<double> budget = {0.0, -0.7, 2.0}, g = {1, 1, 0};
  const auto adj = wfe_adjustment(budget, g, std::vector<int>{});
  for (double a : adj) EXPECT_TRUE(std::isinf(a) && a < 0);
}

TEST(WfeAdjustment, NeverPositive) {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> budget(6), g(6);
    for (auto& v : budget) v = rng.uniform(-2, 3);
    for (auto& v : g) v = rng.uniform();
    for (double a : wfe_adjustment(budget, g, std::vector<int>{kBos, kEos, kUnk})) ASSERT_LE(a, 0.0);
  }
}

TEST(CalcLLWfe, AddsAdjustmentToBase) {
  const auto m = random_model(small_config(3, 4, 8, 5), 4);
  const auto enc = encode(m, std::vector<int>{3, 4});
  auto h = root_hypothesis(m, enc);
  h.budget = std::vector<double>{1, 1, 1, 0.3, 0.0};
  const std::vector<double> g = {1, 1, 1, 1, 1};
  const auto base = calc_ll(m, enc, h);
  const auto adj = calc_ll_wfe(m, enc, h, g, std::vector<int>{kBos, kEos, kUnk});
  EXPECT_EQ(adj[1], base[1]);
  EXPECT_NEAR(adj[3], base[3] + std::log(0.3), 1e-12);
  EXPECT_TRUE(std::isinf(adj[4]));
  h.budget.reset();
  EXPECT_THROW(calc_ll_wfe(m, enc, h, g), StateError);
}

TEST(UpdateBudget, StepwiseEmission) {
  std::vector<double> r = {2.3, 1.0, 0.4};
  const std::vector<double> g = {1, 1, 1};
  const std::vector<int> none;
  // Emission allowed while the adjustment is finite.
  std::vector<bool> allowed;
  for (int k = 0; k < 4; ++k) {
    allowed.push_back(std::isfinite(wfe_adjustment(r, g, none)[0]));
    r = update_budget(r, 0, none);
  }
  EXPECT_EQ(allowed, (std::vector<bool>{true, true, true, false}));
  EXPECT_NEAR(r[0], 2.3 - 4.0, 1e-12);
}

TEST(UpdateBudget, SingleUseBlocksAfterwards) {
  auto r = update_budget(std::vector<double>{2.3, 1.0, 0.4}, 1);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_TRUE(std::isinf(wfe_adjustment(r, std::vector<double>{1, 1, 1}, std::vector<int>{})[1]));
}

TEST(UpdateBudget, UntouchedEntriesConstantAndExemptIgnored) {
  const std::vector<double> r = {2.3, 1.0, 0.4};
  const auto next = update_budget(r, 2, std::vector<int>{2});
  EXPECT_EQ(next, r);
  const auto other = update_budget(r, 0);
  EXPECT_EQ(other[1], 1.0);
  EXPECT_EQ(other[2], 0.4);
  EXPECT_THROW(update_budget(r, 3), InputError);
}

TEST(BeamSearch, WidthOneEqualsGreedy) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto m = random_model(small_config(4, 6, 12, 9), 100 + trial, 1.0);
    const auto x = random_ids(rng, 2 + rng.below(5), 12);
    DecodeOptions opts;
    opts.beam = 1;
    const auto res = beam_search(m, x, opts);
    const auto want = greedy_decode(m, x, default_max_len(x.size()));
    ASSERT_EQ(res.hypotheses.size(), 1u);
    EXPECT_EQ(std::vector<int>(res.best().tokens.begin() + 1, res.best().tokens.end()), want.tokens);
    EXPECT_NEAR(res.best().score, want.score, 1e-12);
  }
}

TEST(BeamSearch, WideBeamMatchesBruteForce) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = random_model(small_config(3, 4, 8, 5), 200 + trial, 1.5);
    const auto x = random_ids(rng, 1 + rng.below(4), 8);
    DecodeOptions opts;
    opts.beam = 125;
    opts.max_len = 3;
    const auto res = beam_search(m, x, opts);
    const auto want = brute_force_decode(m, x, 3);
    EXPECT_EQ(std::vector<int>(res.best().tokens.begin() + 1, res.best().tokens.end()), want.tokens);
    EXPECT_NEAR(res.best().score, want.score, 1e-12);
  }
}

TEST(BeamSearch, WideBeamMatchesBruteForceWithGuidance) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = random_model(small_config(3, 4, 8, 6), 300 + trial, 1.5);
    const auto x = random_ids(rng, 1 + rng.below(4), 8);
    const WfeGuide guide = random_guide(rng, 6, 2.5);
    DecodeOptions opts;
    opts.beam = 6 * 6 * 6;
    opts.max_len = 3;
    opts.mode = DecodeMode::wfe;
    const auto res = beam_search(m, x, opts, &guide);
    const Guidance g{guide.r_hat, guide.g_hat};
    const auto want = brute_force_decode(m, x, 3, &g);
    EXPECT_EQ(std::vector<int>(res.best().tokens.begin() + 1, res.best().tokens.end()), want.tokens);
    EXPECT_NEAR(res.best().score, want.score, 1e-12);
  }
}

TEST(BeamSearch, ResultsAreRankedCompleteAndCapped) {
  Rng rng(8);
  const auto m = random_model(small_config(4, 6, 12, 9), 9, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_ids(rng, 1 + rng.below(6), 12);
    DecodeOptions opts;
    opts.beam = 1 + rng.below(6);
    opts.max_len = 1 + rng.below(6);
    const auto res = beam_search(m, x, opts);
    ASSERT_FALSE(res.hypotheses.empty());
    ASSERT_LE(res.hypotheses.size(), opts.beam);
    for (std::size_t i = 0; i < res.hypotheses.size(); ++i) {
      const auto& h = res.hypotheses[i];
      EXPECT_TRUE(h.complete);
      EXPECT_EQ(h.tokens.front(), kBos);
      EXPECT_EQ(h.tokens.back(), kEos);
      EXPECT_LE(h.emitted(), opts.max_len);
      for (std::size_t t = 1; t < h.tokens.size(); ++t) EXPECT_NE(h.tokens[t], kBos);
      for (std::size_t t = 1; t + 1 < h.tokens.size(); ++t) EXPECT_NE(h.tokens[t], kEos);
      if (i > 0) {
        EXPECT_GE(res.hypotheses[i - 1].score, h.score);
      }
    }
  }
}

TEST(BeamSearch, HardCapHolds) {
  Rng rng(9);
  const auto m = random_model(small_config(4, 6, 12, 9), 10, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_ids(rng, 1 + rng.below(6), 12);
    const WfeGuide guide = random_guide(rng, 9, 2.5);
    DecodeOptions opts;
    opts.beam = 1 + rng.below(5);
    opts.mode = DecodeMode::wfe;
    const auto res = beam_search(m, x, opts, &guide);
    for (const auto& h : res.hypotheses)
      ASSERT_EQ(hard_cap_violations(h.tokens, guide.r_hat, guide.g_hat), 0u);
  }
}

TEST(BeamSearch, SaturatedBudgetMatchesBaseline) {
  Rng rng(10);
  const auto m = random_model(small_config(4, 6, 12, 9), 11, 1.0);
  for (int trial = 0; trial < 30; ++trial) {
    const auto x = random_ids(rng, 1 + rng.below(6), 12);
    DecodeOptions opts;
    opts.beam = 1 + rng.below(5);
    const auto base = beam_search(m, x, opts);
    const WfeGuide guide{std::vector<double>(9, 100.0), std::vector<double>(9, 1.0)};
    opts.mode = DecodeMode::wfe;
    const auto wfe = beam_search(m, x, opts, &guide);
    ASSERT_EQ(base.hypotheses.size(), wfe.hypotheses.size());
    for (std::size_t i = 0; i < base.hypotheses.size(); ++i)
      EXPECT_EQ(base.hypotheses[i].tokens, wfe.hypotheses[i].tokens);
  }
}

TEST(BeamSearch, OracleCountsPreventRepeats) {
  Rng rng(11);
  const auto m = random_model(small_config(4, 6, 12, 9), 12, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_ids(rng, 2 + rng.below(5), 12);
    const auto y = random_target(rng, 1 + rng.below(4), 9);
    const auto a_star = true_frequency(y, 9);
    WfeGuide guide;
    for (int a : a_star) {
      guide.r_hat.push_back(a);
      guide.g_hat.push_back(a >= 1 ? 1.0 : 0.0);
    }
    DecodeOptions opts;
    opts.mode = DecodeMode::wfe;
    const auto res = beam_search(m, x, opts, &guide);
    for (const auto& [word, count] : content_counts(res.best().tokens))
      EXPECT_LE(count, a_star[static_cast<std::size_t>(word)]);
  }
}

TEST(BeamSearch, AllBlockedFallsBackToEos) {
  const auto m = random_model(small_config(4, 6, 12, 9), 13);
  const WfeGuide guide{std::vector<double>(9, 0.0), std::vector<double>(9, 0.0)};
  DecodeOptions opts;
  opts.mode = DecodeMode::wfe;
  const auto res = beam_search(m, std::vector<int>{3, 4}, opts, &guide);
  ASSERT_FALSE(res.hypotheses.empty());
  for (const auto& h : res.hypotheses) {
    for (int t : h.output()) EXPECT_TRUE(is_reserved(t));
  }
}

TEST(BeamSearch, WfeModeNeedsEstimates) {
  const auto m = random_model(small_config(4, 6, 12, 9, false), 14);
  DecodeOptions opts;
  opts.mode = DecodeMode::wfe;
  EXPECT_THROW(beam_search(m, std::vector<int>{3}, opts), StateError);
  const WfeGuide short_guide{std::vector<double>(3, 1.0), std::vector<double>(3, 1.0)};
  EXPECT_THROW(beam_search(m, std::vector<int>{3}, opts, &short_guide), DimensionError);
  opts.beam = 0;
  EXPECT_THROW(beam_search(m, std::vector<int>{3}, opts), ConfigError);
}

TEST(BeamSearch, UsesModelEstimatesWhenNoGuideGiven) {
  const auto m = random_model(small_config(4, 6, 12, 9), 15, 1.0);
  const std::vector<int> x = {3, 5, 7};
  DecodeOptions opts;
  opts.mode = DecodeMode::wfe;
  const auto own = beam_search(m, x, opts);
  const auto guide = estimate_guide(m, encode(m, x));
  const auto explicit_guide = beam_search(m, x, opts, &guide);
  EXPECT_EQ(own.best().tokens, explicit_guide.best().tokens);
  for (const auto& h : own.hypotheses) EXPECT_EQ(hard_cap_violations(h.tokens, guide.r_hat, guide.g_hat), 0u);
}

TEST(BeamSearch, TraceIsJsonLines) {
  const auto m = random_model(small_config(4, 6, 12, 9), 16, 1.0);
  Rng rng(16);
  const WfeGuide guide = random_guide(rng, 9, 2.0);
  std::ostringstream trace;
  DecodeOptions opts;
  opts.mode = DecodeMode::wfe;
  opts.beam = 3;
  opts.trace = &trace;
  beam_search(m, std::vector<int>{3, 4, 5}, opts, &guide);
  std::istringstream lines(trace.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto rec = nlohmann::json::parse(line);
    ASSERT_TRUE(rec.contains("step") && rec.contains("token") && rec.contains("score"));
    ASSERT_TRUE(rec.contains("budget"));
    if (rec["adjustment"].is_number()) {
      ASSERT_LE(rec["adjustment"].get<double>(), 0.0);
    }
    ++n;
  }
  EXPECT_GT(n, 0u);
}

TEST(BeamSearch, BudgetsNeverIncrease) {
  const auto m = random_model(small_config(4, 6, 12, 9), 17, 1.0);
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const WfeGuide guide = random_guide(rng, 9, 3.0);
    DecodeOptions opts;
    opts.mode = DecodeMode::wfe;
    opts.beam = 4;
    for (const auto& h : beam_search(m, random_ids(rng, 4, 12), opts, &guide).hypotheses) {
      std::vector<double> r = guide.r_hat;
      for (std::size_t t = 1; t < h.tokens.size(); ++t) {
        const auto next = update_budget(r, h.tokens[t], opts.exempt);
        for (std::size_t k = 0; k < r.size(); ++k) ASSERT_LE(next[k], r[k]);
        r = next;
      }
      ASSERT_TRUE(h.budget.has_value());
      EXPECT_EQ(*h.budget, r);
    }
  }
}
