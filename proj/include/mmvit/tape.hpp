#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mmvit/tensor.hpp"

namespace mmvit {

// Reverse-mode automatic differentiation over Tensors.
//
// A Tape owns a flat list of Nodes in creation order, which is by construction
// a topological order of the computation graph (an op can only consume nodes
// that already exist). Each node stores its forward value, a gradient buffer
// of the same shape, and a closure that scatters the node's gradient into its
// parents. backward(root) requires a scalar root, runs exactly once per tape,
// and sweeps the node list in reverse creation order, so every node's gradient
// is complete before its closure fires.

using NodeId = int32_t;

class Tape;

// Lightweight handle: a node index bound to its tape. All ops are free
// functions over Values so expressions compose naturally.
struct Value {
    Tape* tape = nullptr;
    NodeId id = -1;

    const Tensor& val() const;
    const Tensor& grad() const;
};

struct Node {
    Tensor value;
    Tensor grad;
    // Scatters grad(self) into the parents' gradients. Empty for leaves.
    std::function<void(Tape&, NodeId)> backprop;
};

class Tape {
  public:
    // Enters a constant or parameter into the graph. Leaves have no parents.
    Value leaf(Tensor v);

    // Internal to ops: appends a node with the given backward rule.
    Value emit(Tensor v, std::function<void(Tape&, NodeId)> backprop);

    const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
    Tensor& grad(NodeId id) { return nodes_[static_cast<size_t>(id)].grad; }
    const Tensor& grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].grad; }

    // Seeds the root gradient with 1 and propagates to all parents. The root
    // must be scalar (one element); a second call on the same tape is a state
    // error because gradients would accumulate twice.
    void backward(Value root);

    size_t size() const { return nodes_.size(); }
    bool backward_ran() const { return backward_done_; }

  private:
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// ---- Operators. Result values live on the same tape as the inputs. ----

// out = a @ b for 2-D operands [m x k] @ [k x n].
Value matmul(Value a, Value b);

// Elementwise; shapes must match exactly.
Value add(Value a, Value b);
Value mul(Value a, Value b);

// Broadcast-adds a vector [n] to every row of a [... x n] tensor.
Value add_rowvec(Value a, Value v);

// out = k * a, out = a + c.
Value scale(Value a, double k);
Value shift(Value a, double c);

// Softmax over the last axis of a [m x n] tensor, with max subtraction.
Value softmax_rows(Value a);

// Softmax over the entries of each row where mask != 0; masked-out entries
// are exactly zero in the output. Every row must keep at least one entry.
// `mask` has one byte per element of `a` and is shared, not copied.
Value masked_softmax_rows(Value a, std::shared_ptr<const std::vector<uint8_t>> mask);

// Layer normalization over the last axis with learned gain/bias [d].
// Population variance, epsilon 1e-5 inside the square root.
Value layer_norm(Value x, Value gain, Value bias);
inline constexpr double kLayerNormEps = 1e-5;

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Value gelu(Value x);

// Full reductions to a scalar node of shape [1].
Value mean(Value x);
Value sum(Value x);

// Swaps the two trailing axes (batched over leading axes).
Value transpose_last_two(Value x);

// Concatenation along the first axis of 2-D blocks [r_i x n].
Value concat_rows(const std::vector<Value>& parts);

// Concatenation/split along the last axis of 2-D tensors.
Value concat_last_dim(const std::vector<Value>& parts);
std::vector<Value> split_last_dim(Value x, int parts);

// out[i] = x[index[i]] for 2-D x; repeated indices accumulate gradient into
// the same source row, which is what token replication relies on.
Value gather_rows(Value x, std::vector<int> index);

// Contiguous row slice [begin, begin+count) of a 2-D tensor.
Value slice_rows(Value x, int begin, int count);

// Same data, new shape (element count preserved).
Value reshape(Value x, std::vector<int> shape);

// Depthwise 2-D convolution with zero "same" padding over an [H x W x C]
// lattice; kernel [kh x kw x C], one filter per channel, stride 1. Padding
// splits as (k-1)/2 before and the remainder after, so the kernel tap at
// index (kh-1)/2, (kw-1)/2 sits on the output position.
Value conv2d_same(Value x, Value kernel);

// Full (dense-channel) variant: kernel [kh x kw x Cin x Cout].
Value conv2d_same_full(Value x, Value kernel);

// Numerically stable softmax cross-entropy between logits [C] (or [1 x C])
// and an integer label. Returns a scalar node.
Value cross_entropy_logits(Value logits, int label);

}  // namespace mmvit
