#pragma once

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "voxadapt/tensor.hpp"

namespace voxadapt {

/// Handle to a node recorded on a Tape.
struct Var {
  int id = -1;
  [[nodiscard]] bool valid() const noexcept { return id >= 0; }
};

enum class OpKind {
  Leaf,
  Detach,
  Conv,
  LeakyRelu,
  BatchNorm,
  L1Loss,
  Dense,
  Sigmoid,
  Sum,
  Scale,
  Add,
  Sub,
  Concat,
  Slice,
  Reshape,
};

std::string_view op_name(OpKind kind);

/// Views handed to a node's backward function. `input_grads[i]` is null when
/// input i does not lead to any requested variable; otherwise the function
/// accumulates into it.
struct BackwardArgs {
  std::span<const Tensor* const> inputs;
  const Tensor& output;
  const Tensor& grad_output;
  std::span<Tensor* const> input_grads;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

/// Linear record of the operations of one forward pass.
///
/// Nodes are appended in execution order, so the tape is topologically sorted
/// by construction. With recording disabled only forward values are kept and
/// gradients() is unavailable.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  [[nodiscard]] bool recording() const noexcept { return record_; }

  /// A source value. Whether it is differentiated depends only on the `wrt`
  /// list passed to gradients().
  Var leaf(Tensor value);

  [[nodiscard]] const Tensor& value(Var v) const;
  [[nodiscard]] OpKind kind(Var v) const;
  [[nodiscard]] std::span<const int> inputs(Var v) const;
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Appends an operation. A null `backward` marks the node non-differentiable.
  Var push(OpKind kind, std::vector<Var> inputs, Tensor value, BackwardFn backward);

  /// Reverse-mode pass from scalar `loss`. Returns one gradient per `wrt`
  /// entry, shaped like its value; variables off every path get zeros.
  [[nodiscard]] std::vector<Tensor> gradients(Var loss, std::span<const Var> wrt) const;

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<int> inputs;
    Tensor value;
    BackwardFn backward;
  };

  const Node& node(Var v) const;

  bool record_ = true;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations.

enum class ConvRank { Two = 2, Three = 3 };

struct ConvOptions {
  std::size_t stride = 1;
  ConvRank rank = ConvRank::Two;
  bool transposed = false;
};

/// Strided convolution with "same" zero padding, or its transpose.
///
/// Layouts are channel-first: input [N, C, spatial...]. A forward kernel is
/// [C_out, C_in, s, s(, s)]; a transposed kernel is [C_in, C_out, s, s(, s)],
/// i.e. the layout of the forward convolution it is the adjoint of. Forward
/// output extent is ceil(n / stride); transposed output extent is n * stride.
Var conv(Tape& tape, Var input, Var kernels, Var bias, const ConvOptions& options);

Var leaky_relu(Tape& tape, Var input, double slope);

enum class Mode { Train, Inference };

/// Running statistics for batch normalization. Owned by a ParameterSet.
struct RunningStats {
  Tensor* mean = nullptr;
  Tensor* var = nullptr;
  double momentum = 0.9;
  double eps = 1e-5;
};

/// Per-channel normalization over the batch and spatial axes (axis 1 is the
/// channel axis). In train mode batch moments are used and, when `update` is
/// set, folded into the running statistics. Inference mode uses the running
/// statistics and mutates nothing.
Var batch_norm(Tape& tape, Var input, Var scale, Var shift, Mode mode, const RunningStats& stats,
               bool update = true);

/// Mean absolute difference; a single-element result.
Var l1_loss(Tape& tape, Var a, Var b);

/// Affine map of the flattened trailing axes: [N, in] x [out, in]^T + [out].
Var dense(Tape& tape, Var input, Var weights, Var bias);

Var sigmoid(Tape& tape, Var input);
Var sum(Tape& tape, Var input);
Var scale(Tape& tape, Var input, double factor);
Var add(Tape& tape, Var a, Var b);
Var sub(Tape& tape, Var a, Var b);
Var concat_batch(Tape& tape, std::span<const Var> parts);
Var slice_batch(Tape& tape, Var input, std::size_t begin, std::size_t end);
Var reshape(Tape& tape, Var input, Shape shape);
/// Copies the value and blocks gradient flow.
Var detach(Tape& tape, Var input);

// Plain-tensor conveniences that evaluate one op without keeping a tape.
Tensor conv_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias, const ConvOptions& options);

}  // namespace voxadapt
