#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace vdvae {

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative extent in shape");
    n *= std::size_t(d);
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

template <typename T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> val;
  std::vector<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this->grad, accumulates into parents' grad buffers.
  std::function<void(TensorNode&)> backprop;

  std::size_t size() const { return val.size(); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), T(0));
  }
};

// Dense n-d array with reverse-mode autodiff. Copies are shallow: they share
// the underlying node, like framework tensor handles.
template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(std::vector<int> shape, T value, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->val.assign(shape_numel(shape), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("data length does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return node().shape; }
  std::size_t size() const { return node().val.size(); }
  std::vector<T>& val() { return node().val; }
  const std::vector<T>& val() const { return node().val; }
  T item() const {
    if (size() != 1) throw std::runtime_error("item() on non-scalar tensor");
    return node().val[0];
  }
  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool rg) { node().requires_grad = rg; }

  bool has_grad() const { return node().grad.size() == node().val.size(); }
  std::vector<T>& grad() {
    if (!has_grad()) throw std::runtime_error("gradient not populated; run backward first");
    return node().grad;
  }
  const std::vector<T>& grad() const {
    if (!has_grad()) throw std::runtime_error("gradient not populated; run backward first");
    return node().grad;
  }
  void clear_grad() { node().grad.clear(); }

  std::shared_ptr<Node> node_ptr() const { return n_; }
  Node& node() const {
    if (!n_) throw std::runtime_error("use of undefined tensor");
    return *n_;
  }

  bool all_finite() const {
    for (T v : node().val)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  // Reverse pass from a scalar. Traversal is exact reverse topological order
  // of construction; accumulation into shared inputs is additive.
  void backward() const {
    Node& root = node();
    if (root.size() != 1) throw std::runtime_error("backward() requires a scalar loss");
    if (!root.requires_grad) return;

    // Iterative post-order DFS; graphs can be thousands of nodes deep.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(&root, 0);
    visited.insert(&root);
    while (!stack.empty()) {
      auto& [n, next_child] = stack.back();
      if (next_child < n->parents.size()) {
        Node* p = n->parents[next_child++].get();
        if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    root.ensure_grad();
    root.grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backprop && n->grad.size() == n->val.size()) n->backprop(*n);
    }
  }

 private:
  std::shared_ptr<Node> n_;
};

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace vdvae
