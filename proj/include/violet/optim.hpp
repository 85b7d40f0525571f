// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "violet/autograd.hpp"
#include "violet/error.hpp"

namespace violet {

struct OptimizerConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 1e-3;
  double warmup_fraction = 0.1;
  double min_lr_fraction = 0.0;  // cosine floor as a fraction of the peak
};

/// Linear warmup over the first warmup_fraction of steps, then cosine decay.
inline double learning_rate(const OptimizerConfig& c, long step, long total_steps) {
  if (total_steps <= 0) return c.lr;
  const long warmup = static_cast<long>(std::ceil(c.warmup_fraction * static_cast<double>(total_steps)));
  if (warmup > 0 && step < warmup) return c.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max(total_steps - warmup, 1L));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  const double floor = c.lr * c.min_lr_fraction;
  return floor + (c.lr - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

/// AdamW with decoupled weight decay. Moments live in ParamStores keyed like
/// the parameters so they can be checkpointed alongside them.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig config = {}) : config_(config) {}

  const OptimizerConfig& config() const { return config_; }
  long step_count() const { return step_; }
  const ParamStore& first_moment() const { return m_; }
  const ParamStore& second_moment() const { return v_; }

  void restore(long step, ParamStore m, ParamStore v) {
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  /// Updates every parameter that has a gradient entry. Gains and biases
  /// (row vectors) are excluded from weight decay.
  void step(ParamStore& params, const ParamStore& grads, double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (const auto& [path, g] : grads) {
      if (!params.contains(path)) continue;
      Matrix& p = params.at(path);
      if (!m_.contains(path)) {
        m_.set(path, Matrix::Zero(p.rows(), p.cols()));
        v_.set(path, Matrix::Zero(p.rows(), p.cols()));
      }
      Matrix& m = m_.at(path);
      Matrix& v = v_.at(path);
      m = config_.beta1 * m + (1.0 - config_.beta1) * g;
      v.array() = config_.beta2 * v.array() + (1.0 - config_.beta2) * g.array().square();
      if (p.rows() > 1 && config_.weight_decay > 0.0) p *= 1.0 - lr * config_.weight_decay;
      p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config_.eps);
    }
  }

 private:
  OptimizerConfig config_;
  long step_ = 0;
  ParamStore m_;
  ParamStore v_;
};

}  // namespace violet
