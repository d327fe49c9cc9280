#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "hvae/tensor.hpp"

namespace hvae {

enum class Op : std::uint8_t {
  Leaf,
  Add, Sub, Mul, Div, Pow, Min, Max,
  Relu, LeakyRelu, Sigmoid, Tanh, Exp, Log, Softplus,
  MatMul, Transpose, Reshape,
  Conv2d, ConvInputGrad, ConvKernelGrad,
  ReduceSum, ReduceMean, BroadcastAxes,
  ConcatChannels, SliceChannels,
  Softmax, UpsampleNearest2, DownsampleSum2,
};

enum class ScalarSide : std::uint8_t { None, Left, Right };

// One recorded primitive. Operand tensors are saved by value (shared
// storage) and keep their node handles, so adjoints composed from them
// stay attached to the graph.
struct TapeNode {
  Op op = Op::Leaf;
  std::int64_t in0 = -1;
  std::int64_t in1 = -1;
  Tensor a, b, out;
  double scalar = 0.0;
  ScalarSide sside = ScalarSide::None;
  int i0 = 0;  // conv stride / softmax axis / slice from
  int i1 = 0;  // conv padding / slice to
  std::vector<int> axes;
  Shape aux;
};

class GradientMap {
 public:
  Tensor at(const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const;

  std::unordered_map<std::int64_t, Tensor> by_node;
};

// Explicit computation record. Entries are appended in topological
// order; a backward pass visits each entry at most once, in reverse.
// One backward() per record; a second call is an error.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Marks `t` as a gradient leaf on this tape and returns the
  // handle-bearing copy. Only watched leaves appear in backward()'s
  // gradient map.
  Tensor watch(const Tensor& t);

  // Reverse sweep from a scalar output; adjoint arithmetic is not
  // recorded. Unreached leaves get zero gradients.
  GradientMap backward(const Tensor& output);

  // Gradient of a scalar w.r.t. one recorded tensor, with the adjoint
  // arithmetic recorded as new entries. The result participates in the
  // graph, so an enclosing backward() differentiates through it.
  Tensor grad(const Tensor& output, const Tensor& wrt);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  const TapeNode& node_at(std::int64_t id) const { return nodes_[static_cast<std::size_t>(id)]; }

  static Tape* active();

  std::uint64_t id() const { return id_; }

  // Internal: appends a node and stamps the handle onto `value`.
  std::int64_t append(TapeNode node, Tensor& value);

 private:
  void sweep(std::int64_t out_id, std::unordered_map<std::int64_t, Tensor>& grads,
             std::int64_t wrt_id);

  std::vector<TapeNode> nodes_;
  std::vector<std::int64_t> leaves_;
  std::uint64_t id_ = next_id();
  bool consumed_ = false;

  static std::uint64_t next_id();
};

// RAII activation of a tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suppresses recording while alive (used for value-only evaluation
// inside an active tape scope).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Re-enables recording inside an outer NoGradGuard, for private tapes.
class EnableRecordingGuard {
 public:
  EnableRecordingGuard();
  ~EnableRecordingGuard();
  EnableRecordingGuard(const EnableRecordingGuard&) = delete;
  EnableRecordingGuard& operator=(const EnableRecordingGuard&) = delete;

 private:
  int saved_;
};

bool recording_enabled();

// ---- primitive operations ------------------------------------------
// Shapes must match exactly for tensor/tensor forms; the only
// broadcasting is scalar-with-tensor.

Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor add(double a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, double b);
Tensor sub(double a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double b);
Tensor mul(double a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, double b);
Tensor div(double a, const Tensor& b);
Tensor pow(const Tensor& a, const Tensor& b);
Tensor pow(const Tensor& a, double b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, double b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, double b);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& t);
Tensor leaky_relu(const Tensor& t, double alpha = 0.2);
Tensor sigmoid(const Tensor& t);
Tensor tanh(const Tensor& t);
Tensor exp(const Tensor& t);
Tensor log(const Tensor& t);
Tensor softplus(const Tensor& t);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& t, Shape shape);

// Direct cross-correlation: input [C_in,H,W], kernels [C_out,C_in,kh,kw].
Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride = 1, int padding = 0);
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernels, int stride, int padding,
                         const Shape& input_shape);
Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad_out, int stride, int padding,
                          const Shape& kernel_shape);

// Empty axes list reduces over all axes (scalar result).
Tensor reduce_sum(const Tensor& t, std::vector<int> axes = {});
Tensor reduce_mean(const Tensor& t, std::vector<int> axes = {});
// Adjoint of reduce: re-inserts `axes` so that dropping them from
// `target` recovers t.shape().
Tensor broadcast_axes(const Tensor& t, std::vector<int> axes, Shape target);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& t, int from, int to);

Tensor softmax(const Tensor& t, int axis);

Tensor upsample_nearest2(const Tensor& t);
Tensor downsample_sum2(const Tensor& t);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// `f` must be built from the ops above so it can run both recorded and
// unrecorded.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step);

}  // namespace hvae
