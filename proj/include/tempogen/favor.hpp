#pragma once

// Causal FAVOR+ attention: positive random features approximating the
// softmax kernel, evaluated with a single left-to-right prefix scan.

#include "tempogen/favor_kernels.hpp"
#include "tempogen/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace tempogen::favor {

inline constexpr double kDefaultStabilizer = 1e-6;

// m x d projection matrix for the positive feature map.
//
// With orthogonal set, every block of d consecutive rows is an orthogonal
// set rescaled to norm sqrt(d), so each block's Gram matrix is d * I. A
// trailing partial block takes the leading rows of a fresh orthogonal block.
struct RandomFeatureMap {
  std::vector<double> omega;  // row-major [m, d]
  std::size_t m = 0;
  std::size_t d = 0;
  std::uint64_t seed = 0;
  bool orthogonal = false;

  static RandomFeatureMap draw(std::size_t features, std::size_t head_dim, std::uint64_t seed, bool orthogonal);
};

// phi(x) = exp(omega^T x - |x|^2 / 2) / sqrt(m) applied to the last axis.
// No input scaling is applied here.
Tensor feature_map(const Tensor& x, const RandomFeatureMap& map);

// q, k: [b, h, n, d]; v: [b, h, n, dv]. Queries and keys are scaled by
// d^(-1/4) before the feature map so phi(q)^T phi(k) estimates
// exp(q.k / sqrt(d)). Differentiable in q, k and v.
Tensor causal_linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, const RandomFeatureMap& map,
                               double stabilizer = kDefaultStabilizer);

// Reference O(n^2) causal softmax attention; not recorded on the tape.
Tensor exact_causal_softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Per-head running state for token-by-token decoding; produces the same
// values as causal_linear_attention at each position.
class PrefixState {
 public:
  PrefixState(const RandomFeatureMap& map, std::size_t value_dim, double stabilizer = kDefaultStabilizer);

  // Consumes (q_i, k_i, v_i) for the next position and writes out_i.
  void step(std::span<const double> q, std::span<const double> k, std::span<const double> v,
            std::span<double> out);
  std::size_t length() const { return length_; }

 private:
  const RandomFeatureMap* map_;
  double stabilizer_;
  double input_scale_;
  kernels::PrefixAccumulator<double> acc_;
  std::vector<double> qf_;
  std::vector<double> kf_;
  std::size_t length_ = 0;
};

}  // namespace tempogen::favor
