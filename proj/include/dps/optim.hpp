#pragma once

#include <cmath>
#include <vector>

#include "dps/tensor.hpp"

namespace dps {

/// Cosine annealing between lr_start (step 0) and lr_end (step >= total).
inline double cosine_lr(std::int64_t step, std::int64_t total, double lr_start, double lr_end) {
  if (total <= 0 || step >= total) return lr_end;
  if (step < 0) step = 0;
  constexpr double kPi = 3.14159265358979323846;
  return lr_end + 0.5 * (lr_start - lr_end) *
                      (1.0 + std::cos(kPi * static_cast<double>(step) / static_cast<double>(total)));
}

/// Standard Adam with bias correction. Moment buffers are kept per parameter
/// in registration order and serialized into checkpoints.
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<std::vector<real>> m, v;
  std::int64_t step_count = 0;

  void init(const std::vector<std::int64_t>& sizes) {
    m.clear();
    v.clear();
    for (auto n : sizes) {
      m.emplace_back(static_cast<std::size_t>(n), 0);
      v.emplace_back(static_cast<std::size_t>(n), 0);
    }
    step_count = 0;
  }

  void step(const std::vector<Tensor*>& params, const std::vector<std::vector<real>>& grads,
            double lr) {
    if (params.size() != m.size() || grads.size() != m.size())
      shape_error("adam: parameter/gradient/moment counts disagree");
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& value = params[k]->values();
      const auto& g = grads[k];
      if (g.size() != value.size() || m[k].size() != value.size())
        shape_error("adam: shape mismatch on parameter " + std::to_string(k) + " (" +
                    std::to_string(value.size()) + " values vs " + std::to_string(g.size()) +
                    " gradients)");
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = beta1 * static_cast<double>(m[k][i]) + (1.0 - beta1) * gi;
        const double vi = beta2 * static_cast<double>(v[k][i]) + (1.0 - beta2) * gi * gi;
        m[k][i] = static_cast<real>(mi);
        v[k][i] = static_cast<real>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        value[i] -= static_cast<real>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

}  // namespace dps
