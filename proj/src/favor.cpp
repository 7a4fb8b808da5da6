#include "tempogen/favor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <stdexcept>

namespace tempogen::favor {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* op) {
  if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected [b,h,n,d] operands, got " + to_string(q.shape()) + ", " +
                     to_string(k.shape()) + ", " + to_string(v.shape()));
  }
  if (q.shape() != k.shape() || v.dim(0) != q.dim(0) || v.dim(1) != q.dim(1) || v.dim(2) != q.dim(2)) {
    throw ShapeError(std::string(op) + ": incompatible q/k/v shapes " + to_string(q.shape()) + ", " +
                     to_string(k.shape()) + ", " + to_string(v.shape()));
  }
}

using Index = Eigen::Index;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstVec = Eigen::Map<const Eigen::VectorXd>;
using MutVec = Eigen::Map<Eigen::VectorXd>;

// dx += s W omega - s^2 rowsum(W) x with W = dphi * phi, over `rows` rows.
void feature_backward(const double* x, const double* phi, const double* dphi, const double* omega,
                      std::size_t rows, std::size_t m, std::size_t d, double s, double* dx) {
  const auto n = static_cast<Index>(rows), mm = static_cast<Index>(m), dd = static_cast<Index>(d);
  const RowMat w = ConstMap(dphi, n, mm).cwiseProduct(ConstMap(phi, n, mm));
  const Eigen::VectorXd wsum = w.rowwise().sum();
  MutMap g(dx, n, dd);
  g.noalias() += s * (w * ConstMap(omega, mm, dd));
  ConstMap xm(x, n, dd);
  for (Index i = 0; i < n; ++i) g.row(i) -= (s * s * wsum(i)) * xm.row(i);
}

}  // namespace

RandomFeatureMap RandomFeatureMap::draw(std::size_t features, std::size_t head_dim, std::uint64_t seed,
                                        bool orthogonal) {
  if (features < 1) throw std::invalid_argument("random feature count must be >= 1");
  if (head_dim < 1) throw std::invalid_argument("head dimension must be >= 1");
  RandomFeatureMap map;
  map.m = features;
  map.d = head_dim;
  map.seed = seed;
  map.orthogonal = orthogonal;
  map.omega.resize(features * head_dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  if (!orthogonal) {
    for (auto& w : map.omega) w = normal(rng);
    return map;
  }
  const double radius = std::sqrt(static_cast<double>(head_dim));
  for (std::size_t row = 0; row < features; row += head_dim) {
    RowMat g(head_dim, head_dim);
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = normal(rng);
    Eigen::HouseholderQR<RowMat> qr(g);
    const RowMat qm = qr.householderQ();
    const std::size_t take = std::min(head_dim, features - row);
    for (std::size_t i = 0; i < take; ++i)
      for (std::size_t j = 0; j < head_dim; ++j)
        map.omega[(row + i) * head_dim + j] = radius * qm(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return map;
}

Tensor feature_map(const Tensor& x, const RandomFeatureMap& map) {
  if (map.m < 1) throw std::invalid_argument("feature_map: m must be >= 1");
  if (x.rank() < 1 || x.dim(-1) != map.d) {
    throw ShapeError("feature_map: input " + to_string(x.shape()) + " does not end in head dim " +
                     std::to_string(map.d));
  }
  const std::size_t rows = x.numel() / map.d;
  Buffer out(rows * map.m);
  kernels::positive_features(x.data().data(), rows, map.d, map.omega.data(), map.m, 1.0, out.data());
  Shape shape = x.shape();
  shape.back() = map.m;
  const std::size_t m = map.m, d = map.d;
  auto omega = std::make_shared<std::vector<double>>(map.omega);
  return make_result(std::move(shape), std::move(out), {x}, [rows, m, d, omega](detail::Node& self) {
    auto& px = *self.parents[0];
    feature_backward(px.value.data(), self.value.data(), self.grad.data(), omega->data(), rows, m, d, 1.0,
                     px.grad_buffer().data());
  });
}

Tensor causal_linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, const RandomFeatureMap& map,
                               double stabilizer) {
  check_qkv(q, k, v, "causal_linear_attention");
  if (q.dim(3) != map.d) {
    throw ShapeError("causal_linear_attention: head dim " + std::to_string(q.dim(3)) + " but feature map expects " +
                     std::to_string(map.d));
  }
  if (!(stabilizer > 0.0)) throw std::invalid_argument("causal_linear_attention: stabilizer must be positive");
  const std::size_t heads = q.dim(0) * q.dim(1);
  const std::size_t n = q.dim(2), d = q.dim(3), dv = v.dim(3), m = map.m;
  const double s = std::pow(static_cast<double>(d), -0.25);

  auto qf = std::make_shared<Buffer>(heads * n * m);
  auto kf = std::make_shared<Buffer>(heads * n * m);
  auto den = std::make_shared<Buffer>(heads * n);
  Buffer out(heads * n * dv);
  const double* qv = q.data().data();
  const double* kv = k.data().data();
  const double* vv = v.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    kernels::positive_features(qv + h * n * d, n, d, map.omega.data(), m, s, qf->data() + h * n * m);
    kernels::positive_features(kv + h * n * d, n, d, map.omega.data(), m, s, kf->data() + h * n * m);
    kernels::causal_linear_head(qf->data() + h * n * m, kf->data() + h * n * m, vv + h * n * dv, n, m, dv,
                                stabilizer, out.data() + h * n * dv, den->data() + h * n);
  }
  Shape shape{q.dim(0), q.dim(1), n, dv};
  auto omega = std::make_shared<std::vector<double>>(map.omega);
  return make_result(
      std::move(shape), std::move(out), {q, k, v},
      [heads, n, d, dv, m, s, qf, kf, den, omega](detail::Node& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        const auto N = static_cast<Index>(n), M = static_cast<Index>(m), Dv = static_cast<Index>(dv);
        const auto chunk = static_cast<Index>(kernels::kChunk);
        RowMat dqf(N, M), dkf(N, M), dnum(N, Dv);
        Eigen::VectorXd dden(N);
        RowMat S(M, Dv), A, P;
        Eigen::VectorXd z(M);
        for (std::size_t h = 0; h < heads; ++h) {
          ConstMap Q(qf->data() + h * n * m, N, M);
          ConstMap K(kf->data() + h * n * m, N, M);
          ConstMap V(pv.value.data() + h * n * dv, N, Dv);
          ConstMap O(self.value.data() + h * n * dv, N, Dv);
          ConstMap G(self.grad.data() + h * n * dv, N, Dv);
          ConstVec D(den->data() + h * n, N);
          // out_i = num_i / den_i
          for (Index i = 0; i < N; ++i) {
            dnum.row(i) = G.row(i) / D(i);
            dden(i) = -G.row(i).dot(O.row(i)) / D(i);
          }
          // P_ij = dnum_i . v_j + dden_i for j <= i, the upstream weight on q_i . k_j.
          // Forward sweep: d(phi(q)) from the prefix state and the in-chunk terms.
          S.setZero();
          z.setZero();
          for (Index i0 = 0; i0 < N; i0 += chunk) {
            const Index C = std::min(chunk, N - i0);
            const auto Kb = K.middleRows(i0, C);
            const auto Vb = V.middleRows(i0, C);
            const auto Gn = dnum.middleRows(i0, C);
            const auto Gd = dden.segment(i0, C);
            P.noalias() = Gn * Vb.transpose();
            P.colwise() += Gd;
            P.triangularView<Eigen::StrictlyUpper>().setZero();
            auto dq = dqf.middleRows(i0, C);
            dq.noalias() = Gn * S.transpose();
            dq.noalias() += Gd * z.transpose();
            dq.noalias() += P * Kb;
            S.noalias() += Kb.transpose() * Vb;
            z.noalias() += Kb.transpose().rowwise().sum();
          }
          // Backward sweep: suffix state for d(phi(k)) and dv.
          RowMat& R = S;
          Eigen::VectorXd& r = z;
          R.setZero();
          r.setZero();
          const bool want_v = pv.requires_grad;
          double* gv = want_v ? pv.grad_buffer().data() + h * n * dv : nullptr;
          const Index last = ((N - 1) / chunk) * chunk;
          for (Index i0 = last; i0 >= 0; i0 -= chunk) {
            const Index C = std::min(chunk, N - i0);
            const auto Qb = Q.middleRows(i0, C);
            const auto Kb = K.middleRows(i0, C);
            const auto Vb = V.middleRows(i0, C);
            const auto Gn = dnum.middleRows(i0, C);
            const auto Gd = dden.segment(i0, C);
            P.noalias() = Gn * Vb.transpose();
            P.colwise() += Gd;
            P.triangularView<Eigen::StrictlyUpper>().setZero();
            auto dk = dkf.middleRows(i0, C);
            dk.noalias() = Vb * R.transpose();
            dk.rowwise() += r.transpose();
            dk.noalias() += P.transpose() * Qb;
            if (want_v) {
              A.noalias() = Qb * Kb.transpose();
              A.triangularView<Eigen::StrictlyUpper>().setZero();
              MutMap gvb(gv + i0 * dv, C, Dv);
              gvb.noalias() += Kb * R;
              gvb.noalias() += A.transpose() * Gn;
            }
            R.noalias() += Qb.transpose() * Gn;
            r.noalias() += Qb.transpose() * Gd;
          }
          if (pq.requires_grad) {
            feature_backward(pq.value.data() + h * n * d, Q.data(), dqf.data(), omega->data(), n, m, d, s,
                             pq.grad_buffer().data() + h * n * d);
          }
          if (pk.requires_grad) {
            feature_backward(pk.value.data() + h * n * d, K.data(), dkf.data(), omega->data(), n, m, d, s,
                             pk.grad_buffer().data() + h * n * d);
          }
        }
      });
}

Tensor exact_causal_softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_qkv(q, k, v, "exact_causal_softmax_attention");
  const std::size_t heads = q.dim(0) * q.dim(1);
  const std::size_t n = q.dim(2), d = q.dim(3), dv = v.dim(3);
  Buffer out(heads * n * dv);
  for (std::size_t h = 0; h < heads; ++h) {
    kernels::exact_causal_head(q.data().data() + h * n * d, k.data().data() + h * n * d,
                               v.data().data() + h * n * dv, n, d, dv, out.data() + h * n * dv);
  }
  return make_result({q.dim(0), q.dim(1), n, dv}, std::move(out), {}, nullptr);
}

PrefixState::PrefixState(const RandomFeatureMap& map, std::size_t value_dim, double stabilizer)
    : map_(&map),
      stabilizer_(stabilizer),
      input_scale_(std::pow(static_cast<double>(map.d), -0.25)),
      acc_(map.m, value_dim),
      qf_(map.m),
      kf_(map.m) {}

void PrefixState::step(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                       std::span<double> out) {
  if (q.size() != map_->d || k.size() != map_->d || v.size() != acc_.dv || out.size() != acc_.dv) {
    throw ShapeError("PrefixState::step: vector sizes do not match the feature map / value dim");
  }
  kernels::positive_features(q.data(), 1, map_->d, map_->omega.data(), map_->m, input_scale_, qf_.data());
  kernels::positive_features(k.data(), 1, map_->d, map_->omega.data(), map_->m, input_scale_, kf_.data());
  acc_.push(kf_.data(), v.data());
  acc_.read(qf_.data(), stabilizer_, out.data());
  ++length_;
}

}  // namespace tempogen::favor
