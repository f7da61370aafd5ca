#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "anchorcir/tensor.hpp"

namespace anchorcir {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape is alive
// and has not been cleared.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Reverse-mode tape. Operations are appended in execution order, so every node's inputs
// precede it and a single reverse sweep visits nodes in a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Appends an operation node. It participates in gradients iff any input does.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Accumulated gradient; a zero tensor if nothing has flowed into the node.
  Tensor grad(Var v) const;
  // Mutable gradient buffer for backward rules, allocated on first use.
  Tensor& grad_buffer(std::uint32_t id);
  bool has_grad(std::uint32_t id) const { return !nodes_[id].grad.empty(); }

  // Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. Leaf gradients add up across
  // repeated calls until zero_grad(); intermediate ones are reset per call.
  void backward(Var root);

  void zero_grad();
  void clear();
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Differentiable operations. All accept and return tape handles; shapes are checked.
namespace ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// x (r×c) + bias (1×c) broadcast over rows.
Var add_row(Var x, Var bias);
Var matmul(Var a, Var b);
// a · bᵀ
Var matmul_bt(Var a, Var b);
Var square(Var a);
Var transpose(Var a);
Var gelu(Var a);
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
// 1×c column means.
Var mean_rows(Var x);
// Scalar (1×1) sum of all entries.
Var sum(Var x);
Var l2_normalize_rows(Var x);
// logits (r×c) + beta ⊗ mask: beta is 1×1 (shared by all rows) or r×1 (one per row);
// mask holds c entries.
Var add_masked_bias(Var logits, Var beta, std::span<const double> mask);

}  // namespace ad
}  // namespace anchorcir
