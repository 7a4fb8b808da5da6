#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tempogen {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// 64-byte aligned storage. Vectorised kernels then split each row into the
// same packets whatever the buffer address, so results depend on the data
// alone; with malloc's 16-byte alignment an unrelated allocation could shift
// a row onto a different packet boundary and change its last bits.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into parents' grads.
  std::function<void(Node& self)> backward_fn;

  Buffer& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major fp64 array that may participate in a reverse-mode tape.
//
// Copies are shallow: two Tensor handles may refer to the same node. Values
// are immutable after construction except through mutable_data() on leaves,
// which the optimizer uses to update parameters in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative indices count from the back.
  std::size_t dim(int i) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  bool is_leaf() const;
  // A new leaf sharing no tape history.
  Tensor detach() const;

  // Internal constructor for ops.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Populates grad on every requires_grad leaf reachable from loss, then frees
// the intermediate tape. Leaf grads accumulate across calls.
void backward(const Tensor& loss);

// ---- ops -----------------------------------------------------------------
//
// Binary elementwise ops accept either equal shapes or a right operand whose
// shape is a suffix of the left operand's shape (leading batch broadcast).
// A rank-0 right operand is the empty suffix and therefore always broadcasts.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, double factor);

// a: [..., m, k]; b: [k, n] (broadcast) or [..., k, n] with a's batch dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [..., k] times w: [k, n] plus bias: [n]; equal to add(matmul(x, w), bias).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// Rows of table selected by ids; id -1 yields a zero row.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

// [B, L, H*dh] -> [B, H, L, dh] and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x);

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

// Mean negative log-likelihood of targets over rows where mask is set.
// An all-masked batch yields 0 with zero gradient.
Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> mask);

// Mean elementwise BCE-with-logits; labels must be 0 or 1.
Tensor binary_cross_entropy_logits(const Tensor& logits, std::span<const int> labels);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// Builds an op result. Parents and the backward rule are only recorded when
// grad mode is on and some parent requires grad.
Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward_fn);

}  // namespace tempogen
