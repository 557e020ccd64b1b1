#ifndef LOIRE_CORE_OPTIM_HPP_
#define LOIRE_CORE_OPTIM_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "loire/core/params.hpp"

namespace loire::optim {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled (AdamW-style) decay; 0 gives plain Adam.
  double weight_decay = 0.0;
};

/**
 * Adam over the trainable tensors of a ParamStore. Tensors whose
 * requires_grad flag is off are skipped entirely, so frozen parameters are
 * never read for gradients nor written.
 */
template <typename T>
class Adam {
 public:
  Adam(ParamStore<T>& params, AdamOptions opts) : params_(params), opts_(opts) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params.at(i).size(), 0.0);
      v_[i].assign(params.at(i).size(), 0.0);
    }
  }

  void set_lr(double lr) { opts_.lr = lr; }
  double lr() const { return opts_.lr; }
  long steps() const { return t_; }

  /// Applies one update using gradients scaled by `grad_scale`.
  void step(double grad_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_.at(i);
      if (!p.requires_grad() || p.grad().size() != p.size()) continue;
      auto& w = p.mutable_value();
      const auto& g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = static_cast<double>(g[k]) * grad_scale;
        m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * gk;
        v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * gk * gk;
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        double wk = static_cast<double>(w[k]);
        if (opts_.weight_decay > 0.0) wk -= opts_.lr * opts_.weight_decay * wk;
        wk -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
        w[k] = static_cast<T>(wk);
      }
    }
  }

 private:
  ParamStore<T>& params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long t_ = 0;
};

/// Multiplies the base rate by gamma every `step_size` epochs.
inline double step_lr(double base, int epoch, int step_size, double gamma) {
  if (step_size <= 0) return base;
  return base * std::pow(gamma, static_cast<double>(epoch / step_size));
}

/// Linear warmup to the base rate, then linear decay to zero at `total`.
inline double warmup_linear(double base, long step, long total, double warmup_frac) {
  const long warm = static_cast<long>(std::ceil(warmup_frac * static_cast<double>(total)));
  if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
  if (total <= warm) return base;
  const double remain = static_cast<double>(total - step) / static_cast<double>(total - warm);
  return base * std::max(0.0, remain);
}

}  // namespace loire::optim

#endif  // LOIRE_CORE_OPTIM_HPP_
