#pragma once

#include "tempogen/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace tempogen {

struct AdamWSettings {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// Moment buffers for one parameter.
struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

// One decoupled-weight-decay Adam update on a flat buffer. `step` is the
// 1-based update count used for bias correction.
void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments,
                long step, double lr, const AdamWSettings& settings, double weight_decay);

// Learning-rate multiplier 0.5 * (1 + cos(pi * step / total)), clamped to the
// schedule range.
double cosine_multiplier(long step, long total);

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWSettings settings, std::vector<bool> decay_mask = {});

  // Applies one update with learning rate settings.lr * lr_multiplier. Params
  // without a grad are treated as having zero gradient.
  void step(double lr_multiplier = 1.0);
  void zero_grad();
  long steps_taken() const { return step_; }
  const AdamWSettings& settings() const { return settings_; }

 private:
  std::vector<Tensor> params_;
  std::vector<bool> decay_;
  std::vector<AdamMoments> moments_;
  AdamWSettings settings_;
  long step_ = 0;
};

// Global L2 norm of all grads.
double grad_norm(std::span<const Tensor> params);
// Rescales grads so the global norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace tempogen
