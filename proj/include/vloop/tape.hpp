#pragma once

#include <array>
#include <functional>
#include <vector>

#include "vloop/tensor.hpp"

namespace vloop {

/// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode autodiff tape. Operations append nodes in topological order
/// (inputs always precede their consumers); backward() walks the record once
/// in reverse, accumulating gradients into every tracked node.
///
/// All reductions run in a fixed index order, so identical inputs produce
/// bit-identical values and gradients.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    std::array<int, 4> parents{-1, -1, -1, -1};
    int arity = 0;
    bool requires_grad = false;
    std::function<void(Tape&, Node&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void reserve(std::size_t n) { nodes_.reserve(n); }
  void clear();
  std::size_t size() const { return nodes_.size(); }

  Var leaf(Tensor value, bool requires_grad);

  const Tensor& value(Var v) const { return node(v).value; }
  const Tensor& grad(Var v) const;
  bool wants_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  Tensor& grad_buf(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Tensor& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  /// Seeds d(loss)/d(loss)=1 and runs the whole tape backward. The loss must
  /// be rank-0; anything else is a rank error. Nodes not on a path to the
  /// loss keep zero gradients.
  void backward(Var loss);

  // ---- elementwise / scalar ----
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var add_const(Var a, double c);
  Var relu(Var a);
  Var tanh_(Var a);
  Var sigmoid_(Var a);
  Var exp_(Var a);
  Var softplus(Var a);
  Var clamp(Var a, double lo, double hi);
  Var softmax(Var a);  // over the last (only) axis of a vector

  // ---- reductions ----
  Var sum(Var a);         // -> rank 0
  Var dot(Var a, Var b);  // -> rank 0

  // ---- linear algebra ----
  Var matmul(Var a, Var b);            // [m x n] * [n x p]
  Var matvec(Var a, Var x);            // [m x n] * [n]
  Var linear(Var w, Var x, Var b);     // w*x + b, fused
  Var transpose2d(Var a);

  // ---- shape ----
  Var reshape(Var a, std::vector<int> shape);
  Var concat(const std::vector<Var>& parts);  // 1-D
  Var slice1d(Var a, int start, int len);

  // ---- sequence / conv ----
  Var conv1d(Var input, Var weights, int stride, int padding);
  Var add_channel_bias(Var x, Var b);          // [C x L] + [C]
  Var global_max_pool_time(Var x);             // [C x L] -> [C]
  Var batchnorm_time(Var x, Var gamma, Var beta, double eps,
                     Tensor* batch_mean_out, Tensor* batch_var_out);
  Var batchnorm_time_eval(Var x, Var gamma, Var beta,
                          const Tensor& running_mean, const Tensor& running_var,
                          double eps);
  Var dropout_mul(Var x, Tensor mask);

  // ---- model-specific fused ops ----
  Var buffer_shift(Var s, Var u);              // [d x k], [d] -> [d x k]
  Var add_col_broadcast(Var s, Var v);         // [d x k] + [d] per column
  Var rows_gather(Var table, std::vector<int> ids);
  Var weighted_rowsum(Var rows, Var weights);  // sum_j w_j * rows[j,:]
  Var div_vec_scalar(Var v, Var s, double eps);
  /// Gaussian-mixture alignment scores over positions 0..length-1:
  /// out[j] = sum_i cw[i] * exp(-(loc[i]-j)^2 / (2*width[i]^2)).
  Var gmm_scores(Var locations, Var widths, Var component_weights, int length);

 private:
  Node& node(Var v);
  const Node& node(Var v) const;
  Var push(Tensor value, std::initializer_list<Var> parents,
           std::function<void(Tape&, Node&)> backward);

  std::vector<Node> nodes_;
};

}  // namespace vloop
