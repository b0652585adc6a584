#pragma once

#include <cstdint>
#include <vector>

#include "wfe/model.hpp"
#include "wfe/rng.hpp"
#include "wfe/vocab.hpp"

namespace wfe::testing {

inline ModelConfig small_config(std::size_t emb, std::size_t hidden, std::size_t src_vocab,
                                std::size_t tgt_vocab, bool with_wfe = true) {
  ModelConfig c;
  c.emb_dim = emb;
  c.hidden = hidden;
  c.src_vocab = src_vocab;
  c.tgt_vocab = tgt_vocab;
  c.with_wfe = with_wfe;
  return c;
}

inline Seq2Seq random_model(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  return Seq2Seq(cfg, rng, scale);
}

/// Ids drawn from the non-reserved part of a vocabulary.
inline std::vector<int> random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> out(n);
  for (auto& id : out) id = static_cast<int>(kNumReserved + rng.below(vocab - kNumReserved));
  return out;
}

inline std::vector<int> random_target(Rng& rng, std::size_t n, std::size_t vocab) {
  auto out = random_ids(rng, n, vocab);
  out.push_back(kEos);
  return out;
}

}  // namespace wfe::testing
