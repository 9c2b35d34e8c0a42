#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// Nodes are appended in evaluation order, so walking the tape backwards is a
// valid reverse topological order. A node only stores a backward closure when
// at least one of its inputs requires a gradient; forward-only evaluation
// therefore costs no more than plain tensor code.

#include <functional>
#include <vector>

#include "gnr/tensor.hpp"

namespace gnr::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v);
  /// Refers to `v` without copying; `v` must outlive the tape.
  Var constant_ref(const Tensor& v);
  Var variable(Tensor v);
  /// A referenced leaf that accumulates a gradient (trainable weights).
  Var parameter(const Tensor& v);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  bool has_grad(Var v) const;
  /// Gradient of the last backward() root with respect to `v`; zeros if the
  /// root does not depend on `v`.
  Tensor grad(Var v) const;

  /// Seeds d(root)/d(root) = 1 and propagates. `root` must hold one element.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  Var push(Tensor value, const std::vector<Var>& parents, Backward backward);
  /// Gradient accumulator for `v`, zero-initialized on first access.
  Tensor& grad_ref(Var v);

 private:
  struct Node {
    Tensor own;
    const Tensor* ref = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    Tensor grad;
    Backward backward;
  };

  Var make_leaf(Tensor own, const Tensor* ref, bool requires_grad);
  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

// Elementwise.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var square(Var a);
Var abs(Var a);
Var silu(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// Reductions to a one-element tensor.
Var sum(Var a);
Var mean(Var a);

Var reshape(Var a, Shape shape);

/// x: (C, ...) plus per-channel bias v: (C).
Var add_channel(Var x, Var v);

/// x: (Cin, H, W), w: (Cout, Cin, k, k), b: (Cout). Stride 1, same padding.
Var conv2d(Var x, Var w, Var b);
Var avg_pool2(Var x);
Var upsample_nearest2(Var x);
Var concat_channels(Var a, Var b);
Var group_norm(Var x, int groups, Var gamma, Var beta, double eps = 1e-5);

/// v: (in), w: (out, in), b: (out).
Var linear(Var v, Var w, Var b);

// 2-D matrix ops.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var softmax_rows(Var a);
Var slice_rows(Var a, int begin, int end);
Var concat_rows(const std::vector<Var>& parts);
/// table: (V, d) -> (d), mean of the listed rows.
Var mean_rows(Var table, const std::vector<int>& rows);

}  // namespace gnr::ad
