#include "tempogen/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace tempogen {

void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments,
                long step, double lr, const AdamWSettings& s, double weight_decay) {
  if (moments.m.empty()) {
    moments.m.assign(param.size(), 0.0);
    moments.v.assign(param.size(), 0.0);
  }
  if (moments.m.size() != param.size() || (!grad.empty() && grad.size() != param.size())) {
    throw ShapeError("adamw_step: moment/grad buffers do not match parameter size");
  }
  if (step < 1) throw std::invalid_argument("adamw_step: step counts from 1");
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : grad[i];
    moments.m[i] = s.beta1 * moments.m[i] + (1.0 - s.beta1) * g;
    moments.v[i] = s.beta2 * moments.v[i] + (1.0 - s.beta2) * g * g;
    const double mhat = moments.m[i] / bc1;
    const double vhat = moments.v[i] / bc2;
    param[i] -= lr * weight_decay * param[i];
    param[i] -= lr * mhat / (std::sqrt(vhat) + s.eps);
  }
}

double cosine_multiplier(long step, long total) {
  if (total <= 0) return 1.0;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(std::vector<Tensor> params, AdamWSettings settings, std::vector<bool> decay_mask)
    : params_(std::move(params)), decay_(std::move(decay_mask)), settings_(settings) {
  if (decay_.empty()) decay_.assign(params_.size(), true);
  if (decay_.size() != params_.size()) throw std::invalid_argument("AdamW: decay mask size mismatch");
  moments_.resize(params_.size());
}

void AdamW::step(double lr_multiplier) {
  ++step_;
  const double lr = settings_.lr * lr_multiplier;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    adamw_step(p.mutable_data(), p.has_grad() ? p.grad() : std::span<const double>{}, moments_[i], step_, lr,
               settings_, decay_[i] ? settings_.weight_decay : 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double grad_norm(std::span<const Tensor> params) {
  double s = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) s += g * g;
  }
  return std::sqrt(s);
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / (norm + 1e-12);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      auto& g = p.node()->grad;
      for (auto& v : g) v *= f;
    }
  }
  return norm;
}

}  // namespace tempogen
