#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "wfe/checkpoint.hpp"
#include "wfe/corpus.hpp"
#include "wfe/errors.hpp"
#include "wfe/model.hpp"
#include "wfe/rng.hpp"
#include "wfe/wfe.hpp"

namespace wfe {

struct TrainConfig {
  std::size_t adam_epochs = 5;  // Adam for these epochs, SGD afterwards
  double lr_adam = 0.001;
  double lr_sgd = 0.01;
  double clip_adam = 10.0;
  double clip_sgd = 5.0;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 15;
  std::size_t patience = 3;
  double dropout = 0.3;
  double wfe_weight = 1.0;  // λ in nll + λ·Ψ
  std::uint64_t seed = 1;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const {
    if (!(lr_adam > 0.0 && lr_sgd > 0.0)) throw ConfigError("train: learning rates must be > 0");
    if (!(clip_adam > 0.0 && clip_sgd > 0.0)) throw ConfigError("train: clip thresholds must be > 0");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max epochs must be >= 1");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("train: dropout must lie in [0, 1)");
    if (!(wfe_weight >= 0.0)) throw ConfigError("train: WFE weight must be >= 0");
  }
};

enum class Phase { adam, sgd };

inline const char* phase_name(Phase p) { return p == Phase::adam ? "adam" : "sgd"; }

struct JointLoss {
  Tensor total;
  double nll = 0.0;
  double wfe = 0.0;  // Ψ, 0 when the model has no WFE head
};

/// nll(X, Y) + λ·Ψ(wfe_forward(encode(X)), counts(Y)). The encoder is shared
/// by both terms. With λ = 0 or no WFE head the total is exactly the NLL.
inline JointLoss joint_loss(const Seq2Seq& model, std::span<const int> source,
                            std::span<const int> target, const WfeLossConfig& loss_cfg,
                            double wfe_weight, const Dropout& dropout = {}) {
  const EncoderStates enc = encode(model, source, dropout);
  JointLoss out;
  Tensor nll = nll_from_encoding(model, enc, target, dropout);
  out.nll = nll.item();
  out.total = nll;
  if (model.has_wfe()) {
    const auto a_star = true_frequency(target, model.config().tgt_vocab);
    Tensor psi = wfe_loss(wfe_forward(enc.states, model.wfe()), a_star, loss_cfg);
    out.wfe = psi.item();
    if (wfe_weight != 0.0) out.total = add(nll, scale(psi, wfe_weight));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimisation
// ---------------------------------------------------------------------------

inline double global_grad_norm(std::span<Tensor> params) {
  double s = 0.0;
  for (auto& p : params)
    for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping happened).
inline double clip_global_norm(std::span<Tensor> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double factor = max_norm / norm;
  for (auto& p : params)
    for (double& g : p.grad()) g *= factor;
  return factor;
}

class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {}

  void step(std::span<Tensor> params) {
    for (auto& p : params) {
      auto w = p.mutable_data();
      auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
    }
  }

 private:
  double lr_;
};

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

  void step(std::span<Tensor> params) {
    if (m_.empty()) {
      for (auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k].mutable_data();
      auto g = params[k].grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon_);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, epsilon_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  Phase phase = Phase::adam;
  double train_nll = 0.0;  // per-example means
  double train_wfe = 0.0;
  double val_nll = 0.0;
  double val_wfe = 0.0;
  double seconds = 0.0;

  double val_joint(double wfe_weight) const { return val_nll + wfe_weight * val_wfe; }
};

/// `epoch<TAB>phase<TAB>train_nll<TAB>train_wfe<TAB>val_nll<TAB>val_wfe<TAB>seconds`
inline std::string format_epoch(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%s\t%.6f\t%.6f\t%.6f\t%.6f\t%.2f", r.epoch,
                phase_name(r.phase), r.train_nll, r.train_wfe, r.val_nll, r.val_wfe, r.seconds);
  return buf;
}

struct TrainResult {
  Checkpoint best;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> log;
};

struct CorpusLoss {
  double nll = 0.0;
  double wfe = 0.0;
};

/// Mean per-example NLL and Ψ without dropout.
inline CorpusLoss evaluate_loss(const Seq2Seq& model, const ParallelCorpus& corpus,
                                const WfeLossConfig& loss_cfg) {
  NoGradGuard no_grad;
  CorpusLoss out;
  for (const auto& ex : corpus) {
    const auto l = joint_loss(model, ex.source, ex.target, loss_cfg, 0.0);
    out.nll += l.nll;
    out.wfe += l.wfe;
  }
  if (!corpus.empty()) {
    out.nll /= static_cast<double>(corpus.size());
    out.wfe /= static_cast<double>(corpus.size());
  }
  return out;
}

/// Two-phase (Adam then SGD) mini-batch training with global-norm clipping,
/// per-epoch shuffling and early stopping on validation joint loss. On
/// return `model` holds the best-validation parameters.
inline TrainResult train(Seq2Seq& model, const ParallelCorpus& train_set,
                         const ParallelCorpus& val_set, const TrainConfig& cfg,
                         const WfeLossConfig& loss_cfg, std::ostream* log = nullptr) {
  cfg.validate();
  loss_cfg.validate();
  if (train_set.empty() || val_set.empty()) throw InputError("train: empty training or validation corpus");

  Rng rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  Dropout dropout{cfg.dropout, &rng};
  std::vector<Tensor> params = model.parameter_tensors();
  std::optional<Adam> adam;
  std::optional<Sgd> sgd;

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t batch_index = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const Phase phase = epoch <= cfg.adam_epochs ? Phase::adam : Phase::sgd;
    if (phase == Phase::adam && !adam) adam.emplace(cfg.lr_adam, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    if (phase == Phase::sgd && !sgd) sgd.emplace(cfg.lr_sgd);

    rng.shuffle(order);
    double nll_sum = 0.0, wfe_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - begin);
      for (auto& p : params) p.zero_grad();
      for (std::size_t i = begin; i < end; ++i) {
        const Example& ex = train_set[order[i]];
        JointLoss l = joint_loss(model, ex.source, ex.target, loss_cfg, cfg.wfe_weight, dropout);
        if (!std::isfinite(l.total.item())) {
          throw NumericError("training diverged: non-finite loss in batch " +
                             std::to_string(batch_index) + " (epoch " + std::to_string(epoch) + ")");
        }
        scale(l.total, inv).backward();
        nll_sum += l.nll;
        wfe_sum += l.wfe;
      }
      if (phase == Phase::adam) {
        clip_global_norm(params, cfg.clip_adam);
        adam->step(params);
      } else {
        clip_global_norm(params, cfg.clip_sgd);
        sgd->step(params);
      }
    }

    const CorpusLoss val = evaluate_loss(model, val_set, loss_cfg);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = phase;
    rec.train_nll = nll_sum / static_cast<double>(train_set.size());
    rec.train_wfe = wfe_sum / static_cast<double>(train_set.size());
    rec.val_nll = val.nll;
    rec.val_wfe = val.wfe;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(rec);
    if (log) *log << format_epoch(rec) << '\n' << std::flush;

    const double joint = rec.val_joint(cfg.wfe_weight);
    if (joint < best_val) {
      best_val = joint;
      result.best_epoch = epoch;
      result.best = make_checkpoint(model, loss_cfg);
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.patience) {
      break;
    }
  }

  assign_parameters(model, result.best);
  return result;
}

}  // namespace wfe
