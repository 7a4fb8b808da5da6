#pragma once

#include "tempogen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace tempogen::testing {

// Max over inputs of |analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, floor),
// using central differences on every element.
inline double gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                        double eps = 1e-5, double floor = 1e-8) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  backward(f(inputs));
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(analytic.size());
    NoGradGuard guard;
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x0 = data[i];
      data[i] = x0 + eps;
      const double hi = f(inputs).item();
      data[i] = x0 - eps;
      const double lo = f(inputs).item();
      data[i] = x0;
      numeric[i] = (hi - lo) / (2 * eps);
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor}));
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  return Tensor::randn(std::move(shape), stddev, rng);
}

// Weighted sum with fixed random weights, so every output element matters.
inline Tensor weighted_sum(const Tensor& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(x, Tensor::randn(x.shape(), 1.0, rng)));
}

}  // namespace tempogen::testing
