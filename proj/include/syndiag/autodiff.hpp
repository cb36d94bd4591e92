#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "syndiag/tensor.hpp"

namespace syndiag {

// Reverse-mode tape over whole tensors. Each graph node stores its forward
// value and a closure that scatters the node's cotangent into its parents.
// Graphs are rebuilt per forward pass; parameter leaves persist across steps.

struct TapeNode;
using NodePtr = std::shared_ptr<TapeNode>;

struct TapeNode {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  bool is_leaf = false;
  int64_t id = 0;  // creation order; parents always have smaller ids
  std::vector<NodePtr> parents;
  std::function<void(TapeNode&)> backprop;

  Tensor& ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor(value.shape());
    return grad;
  }
};

// Shared handle to a tape node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  // Leaf holding a constant (no gradient).
  static Var constant(Tensor t);
  // Leaf parameter; gradient is accumulated during backward.
  static Var parameter(Tensor t);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  void zero_grad() {
    if (node_ && node_->grad.numel() > 0) node_->grad.fill(0.0);
  }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Runs reverse accumulation from a scalar root. Every reachable leaf with
// requires_grad receives (accumulates) a gradient of its own shape.
void backward(const Var& root);

// --- elementwise / scalar ---
Var add(const Var& a, const Var& b);         // same shape
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);         // Hadamard
Var add_const(const Var& a, double c);
Var scale(const Var& a, double c);
Var neg(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);
Var reciprocal(const Var& a);
Var sigmoid(const Var& a);
Var tanh_(const Var& a);
Var gelu(const Var& a);                      // tanh approximation
Var relu(const Var& a);
Var square(const Var& a);

// Multiplies every element of `a` by scalar variable `s` (shape [1]).
Var scale_by(const Var& a, const Var& s);

// --- shape ---
Var reshape(const Var& a, std::vector<int64_t> shape);
Var concat_rows(const std::vector<Var>& parts);  // rank-1 parts act as single rows
Var slice_rows(const Var& a, int64_t begin, int64_t end);
Var row(const Var& a, int64_t r);                // -> rank-1 [cols]
Var slice_cols(const Var& a, int64_t begin, int64_t end);
Var concat_cols(const std::vector<Var>& parts);
Var stack_rows(const std::vector<Var>& rows);    // rank-1 [D] each -> [n, D]

// --- linear algebra ---
Var matmul(const Var& a, const Var& b);      // [m,k]x[k,n]
Var matmul_nt(const Var& a, const Var& b);   // a * b^T, b is [n,k]
Var matvec(const Var& m, const Var& v);      // [m,k]x[k] -> [k? no: m]
Var linear(const Var& x, const Var& w, const Var& b);  // rows(x) x w^T + b, w [out,in]

// --- reductions ---
Var sum(const Var& a);                       // -> scalar
Var mean(const Var& a);                      // -> scalar
Var mean_rows(const Var& a);                 // [m,n] -> [n]
Var row_max(const Var& a);                   // [m,n] -> [m]; ties: lowest index
Var col_max(const Var& a);                   // [m,n] -> [n]; ties: lowest index
Var dot(const Var& a, const Var& b);         // rank-1, -> scalar

// --- normalization / attention pieces ---
Var l2_normalize(const Var& a);              // rank-1; rejects zero vectors
Var l2_normalize_rows(const Var& a);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// --- losses ---
Var mse(const Var& a, const Var& b);
// Mean cross-entropy of row-wise logits against integer targets.
Var cross_entropy(const Var& logits, const std::vector<int>& targets);

// --- convolution (NCHW single image: [C,H,W]) ---
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var adaptive_avg_pool(const Var& x, int out_hw);

// Detached copy: value flows forward, gradient stops here.
Var detach(const Var& a);

}  // namespace syndiag
