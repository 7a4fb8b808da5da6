#pragma once

// Raw single-head attention kernels templated on the scalar type. The
// autodiff op and the incremental decoder run these at fp64; the scaling
// benchmark may also instantiate them at fp32.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace tempogen::favor::kernels {

template <class T>
using RowMatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using VecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// out[i, r] = exp(omega_r . (s x_i) - |s x_i|^2 / 2) / sqrt(m)
template <class T>
void positive_features(const T* x, std::size_t n, std::size_t d, const T* omega, std::size_t m, T input_scale,
                       T* out) {
  using Index = Eigen::Index;
  const auto rows = static_cast<Index>(n), cols = static_cast<Index>(m), dim = static_cast<Index>(d);
  Eigen::Map<const RowMatT<T>> X(x, rows, dim);
  Eigen::Map<const RowMatT<T>> W(omega, cols, dim);
  Eigen::Map<RowMatT<T>> O(out, rows, cols);
  O.noalias() = X * W.transpose();
  const T half_s2 = input_scale * input_scale / T(2);
  const T norm = T(1) / std::sqrt(static_cast<T>(m));
  // Row by row: a colwise broadcast over a row-major matrix does not vectorise.
  for (Index i = 0; i < rows; ++i) {
    const T shift = X.row(i).squaredNorm() * half_s2;
    O.row(i) = ((O.row(i).array() * input_scale - shift).exp() * norm).matrix();
  }
}

// Running prefix sums S = sum_j phi(k_j) v_j^T and z = sum_j phi(k_j).
template <class T>
struct PrefixAccumulator {
  std::size_t m = 0;
  std::size_t dv = 0;
  RowMatT<T> S;
  VecT<T> z;

  PrefixAccumulator(std::size_t features, std::size_t value_dim)
      : m(features),
        dv(value_dim),
        S(RowMatT<T>::Zero(static_cast<Eigen::Index>(features), static_cast<Eigen::Index>(value_dim))),
        z(VecT<T>::Zero(static_cast<Eigen::Index>(features))) {}

  void push(const T* key_features, const T* v) {
    Eigen::Map<const VecT<T>> k(key_features, static_cast<Eigen::Index>(m));
    Eigen::Map<const VecT<T>> val(v, static_cast<Eigen::Index>(dv));
    S.noalias() += k * val.transpose();
    z += k;
  }

  // Writes phi(q)^T S / (phi(q)^T z + eps) to out; returns the denominator.
  T read(const T* query_features, T eps, T* out) const {
    Eigen::Map<const VecT<T>> q(query_features, static_cast<Eigen::Index>(m));
    Eigen::Map<VecT<T>> o(out, static_cast<Eigen::Index>(dv));
    o.noalias() = S.transpose() * q;
    const T den = q.dot(z) + eps;
    o /= den;
    return den;
  }
};

inline constexpr std::size_t kChunk = 32;

// Running state of the chunked scan: the prefix state S, z carries every
// position before the current chunk and a lower-triangular product handles
// positions inside it.
template <class T>
struct ChunkScan {
  RowMatT<T> S;
  VecT<T> z;
  RowMatT<T> A, num;
  VecT<T> dn;

  ChunkScan(std::size_t m, std::size_t dv)
      : S(RowMatT<T>::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(dv))),
        z(VecT<T>::Zero(static_cast<Eigen::Index>(m))) {}

  // Consumes C positions of features and values; den may be null.
  void step(const T* q_features, const T* k_features, const T* v, Eigen::Index C, T eps, T* out, T* den) {
    const Eigen::Index M = S.rows(), Dv = S.cols();
    Eigen::Map<const RowMatT<T>> Q(q_features, C, M);
    Eigen::Map<const RowMatT<T>> K(k_features, C, M);
    Eigen::Map<const RowMatT<T>> V(v, C, Dv);
    A.noalias() = Q * K.transpose();
    A.template triangularView<Eigen::StrictlyUpper>().setZero();
    num.noalias() = Q * S;
    num.noalias() += A * V;
    dn.noalias() = Q * z;
    dn += A.rowwise().sum();
    dn.array() += eps;
    Eigen::Map<RowMatT<T>> o(out, C, Dv);
    for (Eigen::Index r = 0; r < C; ++r) o.row(r) = num.row(r) / dn(r);
    if (den) Eigen::Map<VecT<T>>(den, C) = dn;
    S.noalias() += K.transpose() * V;
    z.noalias() += K.transpose().rowwise().sum();
  }
};

// Causal linear attention over precomputed [n, m] features.
template <class T>
void causal_linear_head(const T* q_features, const T* k_features, const T* v, std::size_t n, std::size_t m,
                        std::size_t dv, T eps, T* out, T* den) {
  ChunkScan<T> scan(m, dv);
  for (std::size_t i0 = 0; i0 < n; i0 += kChunk) {
    const auto C = static_cast<Eigen::Index>(std::min(kChunk, n - i0));
    scan.step(q_features + i0 * m, k_features + i0 * m, v + i0 * dv, C, eps, out + i0 * dv, den ? den + i0 : nullptr);
  }
}

// Same computation from raw queries and keys, building features one chunk at a
// time so memory stays O(m * dv) whatever n is. Used where no backward pass
// needs the features afterwards.
template <class T>
void causal_favor_head(const T* q, const T* k, const T* v, std::size_t n, std::size_t d, std::size_t dv,
                       const T* omega, std::size_t m, T input_scale, T eps, T* out) {
  ChunkScan<T> scan(m, dv);
  std::vector<T> qf(kChunk * m), kf(kChunk * m);
  for (std::size_t i0 = 0; i0 < n; i0 += kChunk) {
    const std::size_t C = std::min(kChunk, n - i0);
    positive_features(q + i0 * d, C, d, omega, m, input_scale, qf.data());
    positive_features(k + i0 * d, C, d, omega, m, input_scale, kf.data());
    scan.step(qf.data(), kf.data(), v + i0 * dv, static_cast<Eigen::Index>(C), eps, out + i0 * dv, nullptr);
  }
}

// Reference O(n^2) causal softmax attention with logits q.k / sqrt(d).
template <class T>
void exact_causal_head(const T* q, const T* k, const T* v, std::size_t n, std::size_t d, std::size_t dv, T* out) {
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  std::vector<T> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* qi = q + i * d;
    T mx = -INFINITY;
    for (std::size_t j = 0; j <= i; ++j) {
      const T* kj = k + j * d;
      T dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += qi[c] * kj[c];
      w[j] = dot * inv_sqrt_d;
      mx = std::max(mx, w[j]);
    }
    T total = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      w[j] = std::exp(w[j] - mx);
      total += w[j];
    }
    T* oi = out + i * dv;
    std::fill(oi, oi + dv, T(0));
    for (std::size_t j = 0; j <= i; ++j) {
      const T a = w[j] / total;
      const T* vj = v + j * dv;
      for (std::size_t c = 0; c < dv; ++c) oi[c] += a * vj[c];
    }
  }
}

}  // namespace tempogen::favor::kernels
