#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "regvit/tensor.hpp"

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape records primitive operations in topological order. Each recorded node
// keeps its value, its input node ids and a closure that scatters the node's
// adjoint into its inputs. backward() replays the tape in reverse record order
// exactly once and returns a fresh Gradients object, so repeated calls on the
// same tape are bitwise identical.
namespace regvit::ad {

using NodeId = std::size_t;

class Tape;
class Gradients;

struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class GradientBuffer {
 public:
  explicit GradientBuffer(std::size_t n) : grads_(n), present_(n, false) {}

  void accumulate(NodeId id, const Tensor& g);
  bool has(NodeId id) const { return present_[id]; }
  const Tensor& get(NodeId id) const { return grads_[id]; }

 private:
  friend Gradients backward(const Tape& tape, Var loss);
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradientBuffer& grads)>;

// Loss must be a single-element node.
Gradients backward(const Tape& tape, Var loss);

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A differentiable input.
  Var leaf(Tensor value);
  // An input that never needs a gradient.
  Var constant(Tensor value);
  // Records the output of a primitive. The node requires a gradient iff any
  // of its inputs does; otherwise the closure is dropped.
  Var record(Tensor value, std::vector<NodeId> inputs, BackwardFn backward);

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  bool is_leaf(NodeId id) const { return nodes_[id].is_leaf; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_[id].inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  friend Gradients backward(const Tape& tape, Var loss);

  struct Node {
    Tensor value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
};

class Gradients {
 public:
  // Gradient of the loss with respect to v; zeros if v was not reached.
  const Tensor& operator[](Var v) const { return grads_.at(v.id); }
  const Tensor& operator[](NodeId id) const { return grads_.at(id); }

 private:
  friend Gradients backward(const Tape& tape, Var loss);
  std::vector<Tensor> grads_;
};

Var matmul(Var a, Var b);
// a · bᵀ
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
// Adds a length-c vector to every row of an r×c matrix.
Var add_row(Var x, Var row);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
Var sum(Var x);
Var softmax_lastdim(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps);
Var gelu(Var x);
Var reshape(Var x, Shape shape);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
// Softmax cross-entropy of a single logit vector against an integer label.
Var cross_entropy(Var logits, std::size_t label);

}  // namespace regvit::ad
