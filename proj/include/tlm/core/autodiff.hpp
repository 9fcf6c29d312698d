#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "tlm/core/tensor.hpp"

namespace tlm {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradients produced by one backward pass, looked up by the leaf Var.
class Gradients {
 public:
  // Zero tensor of the leaf's shape when the loss does not depend on it.
  const Tensor& of(const Var& v) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
  std::vector<Tensor> zeros_;
};

// Ordered record of differentiable operations. One forward pass, one backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op result. backward is kept only when some input requires grad.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  Gradients backward(const Var& loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Gradient accumulator for node id; only valid inside backward.
  Tensor& grad(std::size_t id);
  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool consumed_ = false;
};

namespace ad {

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var sum(const Var& a);
Var mean(const Var& a);
Var square(const Var& a);
Var silu(const Var& a);
Var sigmoid(const Var& a);
Var softmax_rows(const Var& a);

// Row-wise RMS normalization with a learned per-column scale.
Var rms_norm(const Var& x, const Var& scale, double eps);

// Gathers rows of table[V x d] for each id.
Var embedding(const Var& table, std::span<const int> ids);

// Rotary position encoding on rows of n_heads * head_dim columns, positions = row % seq_len.
Var rope(const Var& x, std::size_t n_heads, std::size_t head_dim, std::size_t seq_len);

// Causal grouped-query attention over batch sequences of length seq_len.
// q: [B*T x n_heads*head_dim], k/v: [B*T x kv_groups*head_dim].
Var causal_attention(const Var& q, const Var& k, const Var& v, std::size_t seq_len, std::size_t n_heads,
                     std::size_t kv_groups, std::size_t head_dim);

// y[r, c] = x[r, c] * gate[c / group_width]
Var scale_column_groups(const Var& x, const Var& gate, std::size_t group_width);

// Mean over rows of -log softmax(logits)[target].
Var softmax_cross_entropy(const Var& logits, std::span<const int> targets);

}  // namespace ad

// Max over coordinates of |analytic - central difference| / (|central difference| + eps).
struct FiniteDiffResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

// f builds a scalar on the given tape from the point leaf.
using ScalarFn = std::function<Var(Tape&, const Var&)>;

FiniteDiffResult finite_diff_check(const ScalarFn& f, const Tensor& point, double h = 1e-5, double eps = 1e-8);

}  // namespace tlm
