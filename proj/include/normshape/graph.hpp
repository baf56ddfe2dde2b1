#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "normshape/tensor.hpp"

namespace normshape::nn {

/// Handle to a value recorded on a Graph.
struct Var {
  int id = -1;
};

/// Reverse-mode tape. Operations are recorded in evaluation order; every node
/// only refers to earlier nodes, so the tape is acyclic by construction and
/// backward() is a single reverse sweep.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  Var constant(Tensor<T> value);
  /// Leaf bound to a Parameter. The parameter must outlive the graph.
  Var parameter(Parameter<T>& p);

  Var conv3d(Var x, Var kernel, Var bias, int stride, int pad);
  Var conv3d_transpose(Var x, Var kernel, Var bias, int stride, int pad, int output_pad);
  Var linear(Var x, Var weight, Var bias);
  Var leaky_relu(Var x, T slope);
  Var sigmoid(Var x);
  Var clamp(Var x, T lo, T hi);
  Var reshape(Var x, std::vector<int> shape);
  /// Contiguous flat slice [begin, begin + count) as a rank-1 tensor.
  Var slice(Var x, std::size_t begin, std::size_t count);
  Var add(Var a, Var b);
  Var scale(Var x, T alpha);
  Var sum(Var x);

  /// z = mu + exp(logvar / 2) * eps with eps supplied by the caller.
  Var reparameterize(Var mu, Var logvar, const std::vector<T>& eps);
  /// 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar).
  Var kl_gaussian(Var mu, Var logvar);
  /// -sum(x log p + (1 - x) log(1 - p)) over all voxels.
  Var bernoulli_nll(Var probs, const std::vector<std::uint8_t>& targets);

  const Tensor<T>& value(Var v) const { return nodes_[check(v)].value; }
  /// Gradient of the last backward() target with respect to v (zeros if unused).
  const Tensor<T>& grad(Var v) const { return nodes_[check(v)].grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Propagates d(loss)/d(node) through the tape (loss must be a scalar) and
  /// then adds parameter-leaf gradients into Parameter::grad.
  void backward(Var loss);
  /// Same sweep without touching Parameter::grad; pair with
  /// accumulate_parameter_grads() to reduce in a fixed order.
  void backward_local(Var loss);
  void accumulate_parameter_grads();

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<int> inputs;
    std::function<void(Graph&, int)> backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  int check(Var v) const;
  Var push(Tensor<T> value, std::vector<int> inputs, std::function<void(Graph&, int)> backward);
  /// Grad buffer of an input node, allocated on first use; nullptr if the
  /// node does not require gradients.
  T* grad_of(int id);

  std::vector<Node> nodes_;
};

}  // namespace normshape::nn
