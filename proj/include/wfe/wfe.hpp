#pragma once

// Word-frequency estimation head.
//
// From the encoder state matrix H^s (H x I) it produces, for every target
// word m, an occurrence gate g_hat[m] in (0,1) and an upper-bound frequency
// r_hat[m] >= 0; their product a_hat estimates how many times m appears in
// the output.
//
//   r = W_r2 · (W_r1 · H^s) · 1_I                       (sum over positions)
//   g = W_g2 · [RowMax(W_g1 · H^s) ; RowMin(W_g1 · H^s)]
//   r_hat = ReLU(r), g_hat = Sigmoid(g), a_hat = r_hat ⊙ g_hat

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "wfe/errors.hpp"
#include "wfe/tensor.hpp"

namespace wfe {

struct WfeParams {
  Tensor W_r1;  // H x H
  Tensor W_r2;  // M x H
  Tensor W_g1;  // H x H
  Tensor W_g2;  // M x 2H
  // Optional biases; undefined unless the model enables them.
  Tensor b_r1, b_r2, b_g1, b_g2;

  bool has_bias() const { return b_r1.defined(); }
  std::size_t hidden() const { return W_r1.rows(); }
  std::size_t vocab() const { return W_r2.rows(); }

  void validate() const {
    const std::size_t h = hidden(), m = vocab();
    const auto expect = [](const Tensor& t, Shape s, const char* name) {
      if (t.shape() != s) {
        throw DimensionError(std::string("WFE parameter ") + name + " has shape " +
                             shape_str(t.shape()) + ", expected " + shape_str(s));
      }
    };
    expect(W_r1, {h, h}, "W_r1");
    expect(W_r2, {m, h}, "W_r2");
    expect(W_g1, {h, h}, "W_g1");
    expect(W_g2, {m, 2 * h}, "W_g2");
  }
};

struct WfeEstimate {
  Tensor r;      // pre-activation frequency
  Tensor g;      // pre-activation occurrence
  Tensor r_hat;  // ReLU(r)
  Tensor g_hat;  // Sigmoid(g)
  Tensor a_hat;  // r_hat ⊙ g_hat
};

struct WfeLossConfig {
  double epsilon = 0.25;
  int b = 2;
  double c1 = 0.2;  // over-estimation weight
  double c2 = 1.0;  // under-estimation weight

  void validate() const {
    if (!(epsilon >= 0.0)) throw ConfigError("wfe loss: epsilon must be >= 0");
    if (b < 1) throw ConfigError("wfe loss: exponent b must be >= 1");
    if (!(c1 > 0.0 && c1 < c2)) throw ConfigError("wfe loss: need 0 < c1 < c2");
  }
};

inline WfeEstimate wfe_forward(const Tensor& encoder_states, const WfeParams& p) {
  if (encoder_states.rank() != 2 || encoder_states.cols() == 0) {
    throw DimensionError("wfe_forward: encoder states must be a nonempty H x I matrix, got " +
                         shape_str(encoder_states.shape()));
  }
  if (encoder_states.rows() != p.hidden()) {
    throw DimensionError("wfe_forward: encoder width " + std::to_string(encoder_states.rows()) +
                         " does not match W_r1 " + shape_str(p.W_r1.shape()));
  }
  const std::size_t positions = encoder_states.cols();

  Tensor hr1 = matmul(p.W_r1, encoder_states);
  Tensor pooled = matmul(hr1, Tensor::full({positions}, 1.0));
  if (p.has_bias()) pooled = add(pooled, scale(p.b_r1, static_cast<double>(positions)));
  Tensor r = matmul(p.W_r2, pooled);
  if (p.has_bias()) r = add(r, p.b_r2);

  Tensor hg1 = matmul(p.W_g1, encoder_states);
  Tensor vote = concat({row_max(hg1), row_min(hg1)});
  if (p.has_bias()) vote = add(vote, concat({p.b_g1, p.b_g1}));
  Tensor g = matmul(p.W_g2, vote);
  if (p.has_bias()) g = add(g, p.b_g2);

  WfeEstimate e;
  e.r = r;
  e.g = g;
  e.r_hat = relu(r);
  e.g_hat = sigmoid(g);
  e.a_hat = mul(e.r_hat, e.g_hat);
  return e;
}

/// Counts of each target id in `target` (EOS included).
inline std::vector<int> true_frequency(std::span<const int> target, std::size_t vocab_size) {
  std::vector<int> counts(vocab_size, 0);
  for (int id : target) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw InputError("true_frequency: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(vocab_size));
    }
    ++counts[static_cast<std::size_t>(id)];
  }
  return counts;
}

/// Asymmetric epsilon-insensitive loss:
///   sum_m c1·max(0, a_hat−a*−ε)^b + c2·max(0, a*−a_hat−ε)^b
inline Tensor wfe_loss(const Tensor& a_hat, std::span<const int> a_star, const WfeLossConfig& cfg) {
  if (a_hat.rank() != 1 || a_hat.size() != a_star.size()) {
    throw DimensionError("wfe_loss: estimate " + shape_str(a_hat.shape()) + " vs " +
                         std::to_string(a_star.size()) + " true frequencies");
  }
  std::vector<double> target(a_star.begin(), a_star.end());
  Tensor truth = Tensor::vector(std::move(target));
  Tensor over = relu(add_scalar(sub(a_hat, truth), -cfg.epsilon));
  Tensor under = relu(add_scalar(sub(truth, a_hat), -cfg.epsilon));
  return add(scale(sum(pow_int(over, cfg.b)), cfg.c1), scale(sum(pow_int(under, cfg.b)), cfg.c2));
}

inline Tensor wfe_loss(const WfeEstimate& estimate, std::span<const int> a_star,
                       const WfeLossConfig& cfg) {
  return wfe_loss(estimate.a_hat, a_star, cfg);
}

/// Rounds each estimate to the nearest count: floor(a_hat + 0.5).
inline std::vector<int> quantize(std::span<const double> a_hat) {
  std::vector<int> out;
  out.reserve(a_hat.size());
  for (double v : a_hat) out.push_back(static_cast<int>(std::floor(v + 0.5)));
  return out;
}

}  // namespace wfe
