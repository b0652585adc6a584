#pragma once

// Attentional LSTM encoder-decoder.
//
// Encoder: two stacked bidirectional LSTM layers. Each direction has H/2
// units and the two directions are concatenated, so every encoder column is
// exactly H wide. Decoder: two stacked LSTM layers of H units, initialised
// from the final encoder states through a linear bridge, followed by global
// bilinear attention over the encoder columns, a tanh combination layer and
// the output projection onto the M target words.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wfe/errors.hpp"
#include "wfe/rng.hpp"
#include "wfe/tensor.hpp"
#include "wfe/vocab.hpp"
#include "wfe/wfe.hpp"

namespace wfe {

struct ModelConfig {
  std::size_t emb_dim = 32;
  std::size_t hidden = 64;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  std::size_t layers = 2;
  double dropout = 0.3;
  bool with_wfe = true;
  bool wfe_bias = false;

  void validate() const {
    if (emb_dim < 1) throw ConfigError("model: embedding dimension must be >= 1");
    if (hidden < 2 || hidden % 2 != 0) throw ConfigError("model: hidden size must be even and >= 2");
    if (src_vocab <= kNumReserved || tgt_vocab <= kNumReserved) {
      throw ConfigError("model: vocabularies must contain at least one non-reserved token");
    }
    if (layers != 2) throw ConfigError("model: exactly 2 layers are supported");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct LstmWeights {
  Tensor weight;  // 4n x (input + n), gate order i, f, o, g
  Tensor bias;    // 4n
  std::size_t units() const { return bias.size() / 4; }
};

struct LstmState {
  Tensor h;
  Tensor c;
};

/// Inverted dropout on non-recurrent connections. Inactive by default.
struct Dropout {
  double rate = 0.0;
  Rng* rng = nullptr;

  bool active() const { return rate > 0.0 && rng != nullptr; }

  Tensor apply(const Tensor& x) const {
    if (!active()) return x;
    std::vector<double> mask(x.size());
    const double keep = 1.0 / (1.0 - rate);
    for (auto& m : mask) m = rng->bernoulli(rate) ? 0.0 : keep;
    return mul(x, Tensor(x.shape(), std::move(mask)));
  }
};

class Seq2Seq {
 public:
  /// Uniform(-init_scale, init_scale) initialisation drawn from `rng` in
  /// parameter-name order.
  Seq2Seq(const ModelConfig& config, Rng& rng, double init_scale = 0.08) : config_(config) {
    config_.validate();
    build([&](std::size_t) { return rng.uniform(-init_scale, init_scale); });
  }

  /// Every parameter set to zero.
  static Seq2Seq zeros(const ModelConfig& config) {
    return Seq2Seq(config, FillTag{}, [](std::size_t) { return 0.0; });
  }

  const ModelConfig& config() const { return config_; }
  bool has_wfe() const { return wfe_.has_value(); }

  const WfeParams& wfe() const {
    if (!wfe_) throw StateError("model has no WFE parameters (trained as a pure baseline)");
    return *wfe_;
  }

  /// All parameters in a fixed order with stable names.
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    out.push_back({"encdec.src_embed", src_embed});
    out.push_back({"encdec.tgt_embed", tgt_embed});
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "encdec.enc.l" + std::to_string(l);
      out.push_back({p + ".fwd.W", enc_fwd[l].weight});
      out.push_back({p + ".fwd.b", enc_fwd[l].bias});
      out.push_back({p + ".bwd.W", enc_bwd[l].weight});
      out.push_back({p + ".bwd.b", enc_bwd[l].bias});
    }
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "encdec.bridge.l" + std::to_string(l);
      out.push_back({p + ".h.W", bridge_h[l].first});
      out.push_back({p + ".h.b", bridge_h[l].second});
      out.push_back({p + ".c.W", bridge_c[l].first});
      out.push_back({p + ".c.b", bridge_c[l].second});
    }
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "encdec.dec.l" + std::to_string(l);
      out.push_back({p + ".W", dec[l].weight});
      out.push_back({p + ".b", dec[l].bias});
    }
    out.push_back({"encdec.attn.W", attn_w});
    out.push_back({"encdec.combine.W", combine_w});
    out.push_back({"encdec.combine.b", combine_b});
    out.push_back({"encdec.out.W", out_w});
    out.push_back({"encdec.out.b", out_b});
    if (wfe_) {
      out.push_back({"wfe.W_r1", wfe_->W_r1});
      out.push_back({"wfe.W_r2", wfe_->W_r2});
      out.push_back({"wfe.W_g1", wfe_->W_g1});
      out.push_back({"wfe.W_g2", wfe_->W_g2});
      if (wfe_->has_bias()) {
        out.push_back({"wfe.b_r1", wfe_->b_r1});
        out.push_back({"wfe.b_r2", wfe_->b_r2});
        out.push_back({"wfe.b_g1", wfe_->b_g1});
        out.push_back({"wfe.b_g2", wfe_->b_g2});
      }
    }
    return out;
  }

  std::vector<Tensor> parameter_tensors() const {
    std::vector<Tensor> out;
    for (auto& p : parameters()) out.push_back(p.tensor);
    return out;
  }

  void zero_grad() const {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  Tensor src_embed, tgt_embed;
  std::vector<LstmWeights> enc_fwd, enc_bwd, dec;
  std::vector<std::pair<Tensor, Tensor>> bridge_h, bridge_c;
  Tensor attn_w, combine_w, combine_b, out_w, out_b;

 private:
  struct FillTag {};

  template <class Init>
  Seq2Seq(const ModelConfig& config, FillTag, Init init) : config_(config) {
    config_.validate();
    build(init);
  }

  template <class Init>
  void build(Init init) {
    const std::size_t D = config_.emb_dim, H = config_.hidden, half = H / 2;
    const std::size_t M = config_.tgt_vocab;
    const auto make = [&](Shape shape) {
      std::vector<double> v(shape_numel(shape));
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = init(i);
      return Tensor(std::move(shape), std::move(v), true);
    };
    const auto lstm = [&](std::size_t input, std::size_t units) {
      LstmWeights w;
      w.weight = make({4 * units, input + units});
      w.bias = make({4 * units});
      return w;
    };

    src_embed = make({config_.src_vocab, D});
    tgt_embed = make({M, D});
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::size_t in = l == 0 ? D : H;
      enc_fwd.push_back(lstm(in, half));
      enc_bwd.push_back(lstm(in, half));
    }
    for (std::size_t l = 0; l < config_.layers; ++l) {
      Tensor hw = make({H, H});
      Tensor hb = make({H});
      Tensor cw = make({H, H});
      Tensor cb = make({H});
      bridge_h.emplace_back(hw, hb);
      bridge_c.emplace_back(cw, cb);
    }
    for (std::size_t l = 0; l < config_.layers; ++l) dec.push_back(lstm(l == 0 ? D : H, H));
    attn_w = make({H, H});
    combine_w = make({H, 2 * H});
    combine_b = make({H});
    out_w = make({M, H});
    out_b = make({M});
    if (config_.with_wfe) {
      WfeParams w;
      w.W_r1 = make({H, H});
      w.W_r2 = make({M, H});
      w.W_g1 = make({H, H});
      w.W_g2 = make({M, 2 * H});
      if (config_.wfe_bias) {
        w.b_r1 = make({H});
        w.b_r2 = make({M});
        w.b_g1 = make({H});
        w.b_g2 = make({M});
      }
      wfe_ = std::move(w);
    }
  }

  ModelConfig config_;
  std::optional<WfeParams> wfe_;
};

// ---------------------------------------------------------------------------

/// One LSTM step: i,f,o = sigmoid, g = tanh, c' = f⊙c + i⊙g, h' = o⊙tanh(c').
inline LstmState lstm_cell(const Tensor& x, const LstmState& prev, const LstmWeights& w) {
  const std::size_t n = w.units();
  if (prev.h.size() != n || prev.c.size() != n || w.weight.cols() != x.size() + n) {
    throw DimensionError("lstm_cell: input " + shape_str(x.shape()) + ", hidden " +
                         shape_str(prev.h.shape()) + ", cell " + shape_str(prev.c.shape()) +
                         " do not fit weights " + shape_str(w.weight.shape()));
  }
  Tensor z = add(matmul(w.weight, concat({x, prev.h})), w.bias);
  Tensor i = sigmoid(slice(z, 0, n));
  Tensor f = sigmoid(slice(z, n, n));
  Tensor o = sigmoid(slice(z, 2 * n, n));
  Tensor g = tanh(slice(z, 3 * n, n));
  Tensor c = add(mul(f, prev.c), mul(i, g));
  return {mul(o, tanh(c)), c};
}

struct EncoderStates {
  Tensor states;                 // H x I, column i is h^s_i
  std::vector<Tensor> columns;   // the same columns as separate vectors
  std::vector<LstmState> final_fwd;  // per layer, after the last position
  std::vector<LstmState> final_bwd;  // per layer, after the first position

  std::size_t length() const { return columns.size(); }
};

struct DecoderState {
  std::vector<LstmState> layers;
};

struct DecodeStep {
  Tensor logits;     // o_j, pre-softmax scores over the M target words
  Tensor attention;  // weights over the I source positions
  DecoderState state;
};

inline void check_ids(std::span<const int> ids, std::size_t vocab, const char* what) {
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || static_cast<std::size_t>(ids[k]) >= vocab) {
      throw InputError(std::string(what) + ": token id " + std::to_string(ids[k]) +
                       " at position " + std::to_string(k) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
}

inline EncoderStates encode(const Seq2Seq& model, std::span<const int> source,
                            const Dropout& dropout = {}) {
  if (source.empty()) throw InputError("encode: empty source sequence");
  const auto& cfg = model.config();
  check_ids(source, cfg.src_vocab, "encode");
  const std::size_t I = source.size(), half = cfg.hidden / 2;

  std::vector<Tensor> inputs;
  inputs.reserve(I);
  for (int id : source) {
    inputs.push_back(dropout.apply(gather_row(model.src_embed, static_cast<std::size_t>(id))));
  }

  EncoderStates enc;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::vector<Tensor> fwd(I), bwd(I);
    LstmState sf{Tensor::zeros({half}), Tensor::zeros({half})};
    for (std::size_t i = 0; i < I; ++i) {
      sf = lstm_cell(inputs[i], sf, model.enc_fwd[l]);
      fwd[i] = sf.h;
    }
    LstmState sb{Tensor::zeros({half}), Tensor::zeros({half})};
    for (std::size_t i = I; i-- > 0;) {
      sb = lstm_cell(inputs[i], sb, model.enc_bwd[l]);
      bwd[i] = sb.h;
    }
    enc.final_fwd.push_back(sf);
    enc.final_bwd.push_back(sb);
    for (std::size_t i = 0; i < I; ++i) inputs[i] = concat({fwd[i], bwd[i]});
    if (l + 1 < cfg.layers) {
      for (auto& t : inputs) t = dropout.apply(t);
    }
  }
  enc.columns = std::move(inputs);
  enc.states = stack_columns(enc.columns);
  return enc;
}

/// Decoder layer l starts from a linear map of the concatenated final
/// forward/backward states of encoder layer l.
inline DecoderState initial_decoder_state(const Seq2Seq& model, const EncoderStates& enc) {
  DecoderState s;
  for (std::size_t l = 0; l < model.config().layers; ++l) {
    Tensor h = concat({enc.final_fwd[l].h, enc.final_bwd[l].h});
    Tensor c = concat({enc.final_fwd[l].c, enc.final_bwd[l].c});
    s.layers.push_back({add(matmul(model.bridge_h[l].first, h), model.bridge_h[l].second),
                        add(matmul(model.bridge_c[l].first, c), model.bridge_c[l].second)});
  }
  return s;
}

inline DecodeStep decode_step(const Seq2Seq& model, const EncoderStates& enc,
                              const DecoderState& state, int prev_token,
                              const Dropout& dropout = {}) {
  const auto& cfg = model.config();
  if (prev_token < 0 || static_cast<std::size_t>(prev_token) >= cfg.tgt_vocab) {
    throw InputError("decode_step: token id " + std::to_string(prev_token) +
                     " outside target vocabulary of " + std::to_string(cfg.tgt_vocab));
  }
  if (state.layers.size() != cfg.layers) {
    throw DimensionError("decode_step: decoder state has " + std::to_string(state.layers.size()) +
                         " layers, model has " + std::to_string(cfg.layers));
  }
  if (enc.states.rows() != cfg.hidden) {
    throw DimensionError("decode_step: encoder states " + shape_str(enc.states.shape()) +
                         " do not match hidden size " + std::to_string(cfg.hidden));
  }

  DecodeStep out;
  Tensor x = dropout.apply(gather_row(model.tgt_embed, static_cast<std::size_t>(prev_token)));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LstmState next = lstm_cell(x, state.layers[l], model.dec[l]);
    out.state.layers.push_back(next);
    x = l + 1 < cfg.layers ? dropout.apply(next.h) : next.h;
  }

  // score_i = h^s_i · (W_a h_t)
  Tensor query = matmul(model.attn_w, x);
  out.attention = softmax(matmul(transpose(enc.states), query));
  Tensor context = matmul(enc.states, out.attention);
  Tensor combined =
      tanh(add(matmul(model.combine_w, concat({context, x})), model.combine_b));
  out.logits = add(matmul(model.out_w, dropout.apply(combined)), model.out_b);
  return out;
}

/// Teacher-forced −Σ_j log p(y_j | y_<j, X) given an existing encoding.
inline Tensor nll_from_encoding(const Seq2Seq& model, const EncoderStates& enc,
                                std::span<const int> target, const Dropout& dropout = {}) {
  if (target.empty()) throw InputError("nll_loss: empty target sequence");
  if (target.back() != kEos) throw InputError("nll_loss: target must end with EOS");
  check_ids(target, model.config().tgt_vocab, "nll_loss");

  DecoderState state = initial_decoder_state(model, enc);
  int prev = kBos;
  std::vector<Tensor> terms;
  terms.reserve(target.size());
  for (int y : target) {
    DecodeStep step = decode_step(model, enc, state, prev, dropout);
    terms.push_back(pick(log_softmax(step.logits), static_cast<std::size_t>(y)));
    state = std::move(step.state);
    prev = y;
  }
  return scale(sum(concat(terms)), -1.0);
}

inline Tensor nll_loss(const Seq2Seq& model, std::span<const int> source,
                       std::span<const int> target, const Dropout& dropout = {}) {
  if (target.empty()) throw InputError("nll_loss: empty target sequence");
  return nll_from_encoding(model, encode(model, source, dropout), target, dropout);
}

}  // namespace wfe
