#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cdet/params.hpp"
#include "cdet/tensor.hpp"

namespace cdet {

enum class OpKind : unsigned char {
  kConstant,
  kParameter,
  kConv3x3,
  kDeconv2x,
  kRelu,
  kAdd,
  kSoftmax,
  kSigmoid,
  kL2NormScale,
  kAnchorLayout,
};

/// Scalar type of the convolution matrix products. Tensors stay double
/// either way; kSingle rounds the GEMM operands to float.
enum class GemmPrecision : unsigned char { kDouble, kSingle };

/// Tape-based reverse-mode graph over CHW tensors.
///
/// Ops are recorded in call order; `backward()` walks the tape in reverse and
/// accumulates gradients into every input, ending with the bound parameters'
/// `grad` buffers. Seed the output gradients through `grad()` before calling
/// it. A graph is single-use: build, seed, backward, discard.
class Graph {
 public:
  using Var = std::size_t;

  Graph() = default;
  explicit Graph(GemmPrecision precision) : precision_(precision) {}

  Var constant(Tensor value);
  /// Binds `param`; backward() adds into param.grad.
  Var parameter(Parameter& param);

  /// 3x3 cross-correlation, padding 1, stride 1 or 2. Weights are
  /// (out, in, 9), bias (out). Output spatial size is ceil(in / stride).
  Var conv3x3(Var input, Var weights, Var bias, int stride);
  /// Transposed convolution, kernel 2, stride 2, no bias. Weights are
  /// (in, out, 4). Output spatial size is exactly twice the input.
  Var deconv2x(Var input, Var weights);
  Var relu(Var input);
  Var add(Var a, Var b);
  /// Softmax along the last (w) axis of every row.
  Var softmax(Var input);
  Var sigmoid(Var input);
  /// y = scale[c] * x / sqrt(sum_c x^2 + eps) at every spatial location.
  Var l2norm_scale(Var input, Var scale);
  /// Gathers per-anchor predictions out of per-level head maps laid out as
  /// (anchors_per_cell * per_anchor, H, W). Result is (1, total_anchors,
  /// per_anchor) in level, row, column, anchor order.
  Var anchor_layout(std::span<const Var> heads, int per_anchor);

  const Tensor& value(Var v) const { return nodes_[v].value; }
  /// Gradient buffer of `v`, allocated (zeroed) on first access.
  Tensor& grad(Var v);

  void backward();

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(Var v) const { return nodes_[v].kind; }
  std::size_t count(OpKind kind) const noexcept;

  static constexpr double kL2NormEps = 1e-10;

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    std::vector<Var> inputs;
    int stride = 1;
    int per_anchor = 0;
    Parameter* param = nullptr;
  };

  Var push(Node node);
  void check(Var v) const;

  std::vector<Node> nodes_;
  GemmPrecision precision_ = GemmPrecision::kDouble;
};

}  // namespace cdet
