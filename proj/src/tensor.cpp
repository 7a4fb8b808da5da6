#include "tempogen/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace tempogen {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

#ifdef __GLIBC__
// Activations and gradients are multi-megabyte buffers allocated and freed
// every step. Served by mmap they would be page-faulted in afresh each time;
// keeping them on the heap lets freed pages be reused.
const bool g_heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  return true;
}();
#endif

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.defined() || !b.defined()) throw std::invalid_argument(std::string(op) + ": undefined operand");
  if (!is_suffix(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b.shape()) + " onto " +
                     to_string(a.shape()));
  }
}

bool wants_grad(const std::shared_ptr<detail::Node>& n) { return n && n->requires_grad; }

// Visits (offset, j) for every element of a buffer of size n viewed as rows
// of length period; keeps the broadcast index out of the inner loop.
template <class F>
void for_blocks(std::size_t n, std::size_t period, F&& f) {
  for (std::size_t o = 0; o < n; o += period)
    for (std::size_t j = 0; j < period; ++j) f(o, j);
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(numel_of(shape), value);
  return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (numel_of(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value.assign(values.begin(), values.end());
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return from(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(int i) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int idx = i < 0 ? r + i : i;
  if (idx < 0 || idx >= r) throw std::out_of_range("dim index out of range");
  return s[static_cast<std::size_t>(idx)];
}

std::size_t Tensor::numel() const { return node_->value.size(); }
std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw std::logic_error("mutable_data is only permitted on leaf tensors");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + to_string(s));
  std::size_t off = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= s[k]) throw std::out_of_range("tensor index out of range");
    off = off * s[k] + i;
    ++k;
  }
  return node_->value[off];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw std::logic_error("requires_grad can only be toggled on leaves");
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
void Tensor::zero_grad() { node_->grad.clear(); }
bool Tensor::is_leaf() const { return node_ && !node_->backward_fn; }

Tensor Tensor::detach() const { return from(shape(), {node_->value.begin(), node_->value.end()}, false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1 || !loss.shape().empty()) {
    throw ShapeError("backward requires a scalar loss, got " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  auto root = loss.node();
  if (root->consumed) throw std::logic_error("backward: tape already consumed");
  if (!root->requires_grad) throw std::logic_error("backward: loss is not on an active tape");

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) {
      n->grad_buffer();
      n->backward_fn(*n);
    }
  }
  for (detail::Node* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->consumed = true;
    }
  }
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "add");
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t nb = bv.size();
  Buffer out(av.size());
  for_blocks(av.size(), nb, [&](std::size_t o, std::size_t j) { out[o + j] = av[o + j] + bv[j]; });
  return make_result(a.shape(), std::move(out), {a, b}, [nb](detail::Node& self) {
    const auto& g = self.grad;
    if (wants_grad(self.parents[0])) {
      auto& ga = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (wants_grad(self.parents[1])) {
      auto& gb = self.parents[1]->grad_buffer();
      for_blocks(g.size(), nb, [&](std::size_t o, std::size_t j) { gb[j] += g[o + j]; });
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "sub");
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t nb = bv.size();
  Buffer out(av.size());
  for_blocks(av.size(), nb, [&](std::size_t o, std::size_t j) { out[o + j] = av[o + j] - bv[j]; });
  return make_result(a.shape(), std::move(out), {a, b}, [nb](detail::Node& self) {
    const auto& g = self.grad;
    if (wants_grad(self.parents[0])) {
      auto& ga = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (wants_grad(self.parents[1])) {
      auto& gb = self.parents[1]->grad_buffer();
      for_blocks(g.size(), nb, [&](std::size_t o, std::size_t j) { gb[j] -= g[o + j]; });
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "mul");
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t nb = bv.size();
  Buffer out(av.size());
  for_blocks(av.size(), nb, [&](std::size_t o, std::size_t j) { out[o + j] = av[o + j] * bv[j]; });
  return make_result(a.shape(), std::move(out), {a, b}, [nb](detail::Node& self) {
    const auto& g = self.grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (wants_grad(self.parents[0])) {
      auto& ga = self.parents[0]->grad_buffer();
      for_blocks(g.size(), nb, [&](std::size_t o, std::size_t j) { ga[o + j] += g[o + j] * bv[j]; });
    }
    if (wants_grad(self.parents[1])) {
      auto& gb = self.parents[1]->grad_buffer();
      for_blocks(g.size(), nb, [&](std::size_t o, std::size_t j) { gb[j] += g[o + j] * av[o + j]; });
    }
  });
}

Tensor exp(const Tensor& x) {
  Buffer out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * self.value[i];
  });
}

Tensor log(const Tensor& x) {
  Buffer out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    const auto& xv = self.parents[0]->value;
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] / xv[i];
  });
}

Tensor relu(const Tensor& x) {
  Buffer out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    const auto& xv = self.parents[0]->value;
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += xv[i] > 0.0 ? self.grad[i] : 0.0;
  });
}

Tensor scale(const Tensor& x, double factor) {
  Buffer out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  return make_result(x.shape(), std::move(out), {x}, [factor](detail::Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * factor;
  });
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t n = b.dim(-1);
  const bool shared_b = b.rank() == 2;
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  if (b.dim(-2) != k || (!shared_b && a_batch != b_batch)) {
    throw ShapeError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t batch = numel_of(a_batch);
  Shape out_shape = a_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Buffer out(batch * m * n);
  if (shared_b) {
    MapMat(out.data(), batch * m, n).noalias() =
        ConstMapMat(a.data().data(), batch * m, k) * ConstMapMat(b.data().data(), k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      MapMat(out.data() + i * m * n, m, n).noalias() =
          ConstMapMat(a.data().data() + i * m * k, m, k) * ConstMapMat(b.data().data() + i * k * n, k, n);
    }
  }
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [batch, m, k, n, shared_b](detail::Node& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       const double* g = self.grad.data();
                       if (shared_b) {
                         ConstMapMat gm(g, batch * m, n);
                         if (pa.requires_grad) {
                           MapMat(pa.grad_buffer().data(), batch * m, k).noalias() +=
                               gm * ConstMapMat(pb.value.data(), k, n).transpose();
                         }
                         if (pb.requires_grad) {
                           MapMat(pb.grad_buffer().data(), k, n).noalias() +=
                               ConstMapMat(pa.value.data(), batch * m, k).transpose() * gm;
                         }
                         return;
                       }
                       for (std::size_t i = 0; i < batch; ++i) {
                         ConstMapMat gm(g + i * m * n, m, n);
                         if (pa.requires_grad) {
                           MapMat(pa.grad_buffer().data() + i * m * k, m, k).noalias() +=
                               gm * ConstMapMat(pb.value.data() + i * k * n, k, n).transpose();
                         }
                         if (pb.requires_grad) {
                           MapMat(pb.grad_buffer().data() + i * k * n, k, n).noalias() +=
                               ConstMapMat(pa.value.data() + i * m * k, m, k).transpose() * gm;
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() < 1 || w.rank() != 2 || bias.rank() != 1 || x.dim(-1) != w.dim(0) || bias.dim(0) != w.dim(1)) {
    throw ShapeError("linear shape mismatch: " + to_string(x.shape()) + " x " + to_string(w.shape()) + " + " +
                     to_string(bias.shape()));
  }
  const std::size_t k = w.dim(0);
  const std::size_t n = w.dim(1);
  const std::size_t rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Buffer out(rows * n);
  MapMat om(out.data(), rows, n);
  om.noalias() = ConstMapMat(x.data().data(), rows, k) * ConstMapMat(w.data().data(), k, n);
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), n);
  return make_result(std::move(out_shape), std::move(out), {x, w, bias}, [rows, k, n](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    ConstMapMat gm(self.grad.data(), rows, n);
    if (px.requires_grad) {
      MapMat(px.grad_buffer().data(), rows, k).noalias() += gm * ConstMapMat(pw.value.data(), k, n).transpose();
    }
    if (pw.requires_grad) {
      MapMat(pw.grad_buffer().data(), k, n).noalias() += ConstMapMat(px.value.data(), rows, k).transpose() * gm;
    }
    if (pb.requires_grad) {
      Eigen::Map<Eigen::RowVectorXd>(pb.grad_buffer().data(), n) += gm.colwise().sum();
    }
  });
}

// ---- reductions & reshapes -------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {x}, [](detail::Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (auto& v : gx) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  Buffer out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

// ---- layer norm ------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm needs rank >= 1 input");
  const std::size_t d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm affine shapes " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                     " do not match feature dim of " + to_string(x.shape()));
  }
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm eps must be positive");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto rstd = std::make_shared<Buffer>(rows);
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [d, rows, xhat, rstd](detail::Node& self) {
    const auto& g = self.grad;
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto& gamma = pg.value;
    if (pg.requires_grad) {
      auto& gg = pg.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
    }
    if (px.requires_grad) {
      auto& gx = px.grad_buffer();
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0;
        double mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = g[r * d + j] * gamma[j];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * d + j];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = g[r * d + j] * gamma[j];
          gx[r * d + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
        }
      }
    }
  });
}

// ---- indexing --------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows needs a rank-2 table, got " + to_string(table.shape()));
  const std::size_t rows = table.dim(0);
  const std::size_t d = table.dim(1);
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  Buffer out(ids.size() * d, 0.0);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < -1 || id >= static_cast<int>(rows)) {
      throw std::out_of_range("gather_rows: id " + std::to_string(id) + " outside table of " +
                              std::to_string(rows) + " rows");
    }
    if (id >= 0) std::copy_n(tv.data() + static_cast<std::size_t>(id) * d, d, out.data() + i * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), {table}, [saved = std::move(saved), d](detail::Node& self) {
    auto& gt = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      if (saved[i] < 0) continue;
      double* dst = gt.data() + static_cast<std::size_t>(saved[i]) * d;
      const double* src = self.grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0) {
    throw ShapeError("split_heads: cannot split " + to_string(x.shape()) + " into " + std::to_string(heads) +
                     " heads");
  }
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2), dh = D / heads;
  Buffer out(x.numel());
  const auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xv.data() + (b * L + l) * D + h * dh, dh, out.data() + ((b * heads + h) * L + l) * dh);
  return make_result({B, heads, L, dh}, std::move(out), {x}, [B, L, D, dh, heads](detail::Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t h = 0; h < heads; ++h) {
          double* dst = gx.data() + (b * L + l) * D + h * dh;
          const double* src = self.grad.data() + ((b * heads + h) * L + l) * dh;
          for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
        }
  });
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("merge_heads expects [B,H,L,dh], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), H = x.dim(1), L = x.dim(2), dh = x.dim(3), D = H * dh;
  Buffer out(x.numel());
  const auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t l = 0; l < L; ++l)
        std::copy_n(xv.data() + ((b * H + h) * L + l) * dh, dh, out.data() + (b * L + l) * D + h * dh);
  return make_result({B, L, D}, std::move(out), {x}, [B, H, L, dh, D](detail::Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t l = 0; l < L; ++l) {
          double* dst = gx.data() + ((b * H + h) * L + l) * dh;
          const double* src = self.grad.data() + (b * L + l) * D + h * dh;
          for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
        }
  });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout probability must lie in [0, 1)");
  if (p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  std::vector<double> m(x.numel());
  for (auto& v : m) v = keep(rng) ? s : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(m)));
}

// ---- losses ----------------------------------------------------------------

Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> mask) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy_logits expects [n,V], got " + to_string(logits.shape()));
  const std::size_t n = logits.dim(0);
  const std::size_t V = logits.dim(1);
  if (targets.size() != n || mask.size() != n) {
    throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets / " +
                     std::to_string(mask.size()) + " mask entries for " + std::to_string(n) + " rows");
  }
  const auto lv = logits.data();
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
      throw std::out_of_range("cross_entropy_logits: target " + std::to_string(targets[i]) + " outside [0," +
                              std::to_string(V) + ")");
    }
    ++count;
  }
  // Softmax probabilities are kept for the backward rule.
  auto probs = std::make_shared<Buffer>(count ? n * V : 0, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n && count; ++i) {
    if (!mask[i]) continue;
    const double* row = lv.data() + i * V;
    const double mx = *std::max_element(row, row + V);
    double se = 0.0;
    for (std::size_t j = 0; j < V; ++j) se += std::exp(row[j] - mx);
    const double lse = mx + std::log(se);
    total += lse - row[targets[i]];
    for (std::size_t j = 0; j < V; ++j) (*probs)[i * V + j] = std::exp(row[j] - lse);
  }
  const double inv = count ? 1.0 / static_cast<double>(count) : 0.0;
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return make_result({}, {total * inv}, {logits},
                     [probs, tgt = std::move(tgt), msk = std::move(msk), inv, n, V](detail::Node& self) {
                       auto& gl = self.parents[0]->grad_buffer();
                       if (inv == 0.0) return;
                       const double g = self.grad[0] * inv;
                       for (std::size_t i = 0; i < n; ++i) {
                         if (!msk[i]) continue;
                         for (std::size_t j = 0; j < V; ++j) gl[i * V + j] += g * (*probs)[i * V + j];
                         gl[i * V + static_cast<std::size_t>(tgt[i])] -= g;
                       }
                     });
}

Tensor binary_cross_entropy_logits(const Tensor& logits, std::span<const int> labels) {
  const std::size_t c = logits.numel();
  if (labels.size() != c) {
    throw ShapeError("binary_cross_entropy_logits: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(logits.shape()));
  }
  const auto xv = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("binary labels must be 0 or 1");
    const double x = xv[i];
    total += std::max(x, 0.0) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const double inv = 1.0 / static_cast<double>(c);
  std::vector<int> y(labels.begin(), labels.end());
  return make_result({}, {total * inv}, {logits}, [y = std::move(y), inv](detail::Node& self) {
    const auto& xv = self.parents[0]->value;
    auto& gx = self.parents[0]->grad_buffer();
    const double g = self.grad[0] * inv;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double x = xv[i];
      const double sig = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      gx[i] += g * (sig - y[i]);
    }
  });
}

}  // namespace tempogen
