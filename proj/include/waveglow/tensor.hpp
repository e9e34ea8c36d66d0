#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "waveglow/errors.hpp"
#include "waveglow/rng.hpp"

namespace waveglow {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
inline thread_local int no_grad_depth = 0;

// Fixed 64-byte alignment for every buffer Eigen maps. Vector reductions pick
// their peeling from the runtime pointer alignment; pinning the alignment
// keeps the summation order identical across runs, which the bit-exact
// reproducibility guarantees rely on.
template <typename T, std::size_t Align>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}
  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, std::size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t(Align));
  }
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

}  // namespace detail

template <typename T>
using AlignedVec = std::vector<T, detail::AlignedAllocator<T, 64>>;

// Scoped switch that stops ops from recording backward rules. Inference and
// finite-difference probes run under this so intermediates are freed eagerly.
struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// One node of the dynamically recorded computation graph. Values are written
// once at creation; grad is the only field mutated afterwards.
template <typename T>
struct TensorNode {
  Shape shape;
  AlignedVec<T> value;
  AlignedVec<T> grad;  // sized lazily, only for grad-tracked nodes
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;  // null for leaves

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value.assign(static_cast<size_t>(shape_numel(shape)), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return filled(Shape{}, v, requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("Tensor::from: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(data.begin(), data.end());
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->value) v = static_cast<T>(stddev * rng.normal());
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->value) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<T> data() { return {node_->value.data(), node_->value.size()}; }
  std::span<const T> data() const { return {node_->value.data(), node_->value.size()}; }

  T item() const {
    if (numel() != 1)
      throw ShapeError("Tensor::item: expected scalar, got shape " + shape_str(shape()));
    return node_->value[0];
  }

  T& at(std::int64_t i) { return node_->value[static_cast<size_t>(i)]; }
  T at(std::int64_t i) const { return node_->value[static_cast<size_t>(i)]; }
  T& at(std::int64_t i, std::int64_t j) {
    return node_->value[static_cast<size_t>(i * dim(1) + j)];
  }
  T at(std::int64_t i, std::int64_t j) const {
    return node_->value[static_cast<size_t>(i * dim(1) + j)];
  }
  T& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return node_->value[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }
  T at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return node_->value[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) {
    node_->requires_grad = b;
    if (b) node_->ensure_grad();
  }

  std::span<T> grad() {
    node_->ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
  }
  std::span<const T> grad() const {
    node_->ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Topologically ordered record of the operations reaching a root tensor.
// Backward replays it once, in reverse, seeding d(root)/d(root) = 1.
template <typename T>
class Graph {
 public:
  static Graph trace(const Tensor<T>& root) {
    Graph g;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;  // node, next-parent index
    auto push = [&](TensorNode<T>* n) {
      if (n->requires_grad && seen.insert(n).second) stack.emplace_back(n, 0);
    };
    push(root.node().get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        TensorNode<T>* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        g.order_.push_back(n);  // post-order: parents precede the node
        stack.pop_back();
      }
    }
    return g;
  }

  // Accumulates d(root)/d(node) into every grad-tracked node's grad buffer.
  void run_backward(const Tensor<T>& root) {
    root.node()->ensure_grad();
    root.node()->grad[0] += T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      TensorNode<T>* n = *it;
      if (!n->backward_fn) continue;
      for (auto& p : n->parents)
        if (p->requires_grad) p->ensure_grad();
      n->backward_fn(*n);
    }
  }

  size_t size() const { return order_.size(); }

 private:
  std::vector<TensorNode<T>*> order_;
};

// Reverse-mode differentiation from a scalar loss. Grads accumulate across
// calls; callers reset with zero_grad when starting a fresh evaluation.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw ShapeError("backward: loss does not depend on any grad-tracked tensor");
  Graph<T>::trace(loss).run_backward(loss);
}

}  // namespace waveglow
