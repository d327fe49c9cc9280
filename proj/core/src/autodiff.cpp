#include "hvae/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

#include "hvae/errors.hpp"

namespace hvae {

namespace {

thread_local Tape* g_active = nullptr;
thread_local int g_no_grad_depth = 0;

std::string op_shape_error(const char* name, const Tensor& a, const Tensor& b) {
  return std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape());
}

// Appends a node when a tape is live and any operand is connected to it.
Tensor finish(TapeNode node, Tensor value, const char* name) {
  check_finite(value, name);
  if (g_no_grad_depth > 0 || g_active == nullptr) return value;
  const std::uint64_t tid = g_active->id();
  if (node.a.defined() && node.a.tape_id() != tid) node.in0 = -1;
  if (node.b.defined() && node.b.tape_id() != tid) node.in1 = -1;
  if (node.in0 < 0 && node.in1 < 0) return value;
  g_active->append(std::move(node), value);
  return value;
}

enum class BinKind : std::uint8_t { Add, Sub, Mul, Div, Pow, Min, Max };

inline double apply_bin(BinKind k, double x, double y) {
  switch (k) {
    case BinKind::Add: return x + y;
    case BinKind::Sub: return x - y;
    case BinKind::Mul: return x * y;
    case BinKind::Div: return x / y;
    case BinKind::Pow: return std::pow(x, y);
    case BinKind::Min: return x < y ? x : y;
    case BinKind::Max: return x > y ? x : y;
  }
  return 0.0;
}

Tensor binary_tt(Op op, BinKind kind, const Tensor& a, const Tensor& b, const char* name) {
  if (!a.same_shape(b)) throw std::invalid_argument(op_shape_error(name, a, b));
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply_bin(kind, av[i], bv[i]);
  TapeNode node;
  node.op = op;
  node.in0 = a.node();
  node.in1 = b.node();
  node.a = a;
  node.b = b;
  return finish(std::move(node), Tensor(a.shape(), std::move(out)), name);
}

Tensor binary_ts(Op op, BinKind kind, const Tensor& a, double s, ScalarSide side,
                 const char* name) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  if (side == ScalarSide::Right) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply_bin(kind, av[i], s);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply_bin(kind, s, av[i]);
  }
  TapeNode node;
  node.op = op;
  node.in0 = a.node();
  node.a = a;
  node.scalar = s;
  node.sside = side;
  return finish(std::move(node), Tensor(a.shape(), std::move(out)), name);
}

enum class UnKind : std::uint8_t { Relu, LeakyRelu, Sigmoid, Tanh, Exp, Log, Softplus };

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

Tensor unary(Op op, UnKind kind, const Tensor& a, double alpha, const char* name) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    switch (kind) {
      case UnKind::Relu: out[i] = x > 0.0 ? x : 0.0; break;
      case UnKind::LeakyRelu: out[i] = x > 0.0 ? x : alpha * x; break;
      case UnKind::Sigmoid: out[i] = stable_sigmoid(x); break;
      case UnKind::Tanh: out[i] = std::tanh(x); break;
      case UnKind::Exp: out[i] = std::exp(x); break;
      case UnKind::Log:
        if (x <= 0.0 && strict_finite_enabled()) {
          throw NumericError("log of non-positive value " + std::to_string(x));
        }
        out[i] = std::log(x);
        break;
      case UnKind::Softplus: out[i] = stable_softplus(x); break;
    }
  }
  TapeNode node;
  node.op = op;
  node.in0 = a.node();
  node.a = a;
  node.scalar = alpha;
  return finish(std::move(node), Tensor(a.shape(), std::move(out)), name);
}

struct ConvDims {
  int ci, h, w, co, kh, kw, oh, ow;
};

ConvDims conv_dims(const Shape& in, const Shape& k, int stride, int padding, const char* name) {
  if (in.size() != 3) {
    throw std::invalid_argument(std::string(name) + ": input must be [C,H,W], got " + shape_str(in));
  }
  if (k.size() != 4) {
    throw std::invalid_argument(std::string(name) + ": kernels must be [Co,Ci,kh,kw], got " +
                                shape_str(k));
  }
  if (k[1] != in[0]) {
    throw std::invalid_argument(std::string(name) + ": channel mismatch, input has " +
                                std::to_string(in[0]) + " channels but kernels expect " +
                                std::to_string(k[1]));
  }
  if (stride < 1) throw std::invalid_argument(std::string(name) + ": stride must be positive");
  if (padding < 0) throw std::invalid_argument(std::string(name) + ": padding must be non-negative");
  ConvDims d{in[0], in[1], in[2], k[0], k[2], k[3], 0, 0};
  const int num_h = d.h + 2 * padding - d.kh;
  const int num_w = d.w + 2 * padding - d.kw;
  if (num_h < 0 || num_w < 0 || num_h % stride != 0 || num_w % stride != 0) {
    throw std::invalid_argument(std::string(name) + ": non-integer output extent for input " +
                                shape_str(in) + ", kernel " + shape_str(k) + ", stride " +
                                std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  d.oh = num_h / stride + 1;
  d.ow = num_w / stride + 1;
  return d;
}

// Output rows y with 0 <= y*stride + tap - padding < extent.
inline void tap_range(int tap, int padding, int stride, int extent, int out_extent, int& lo,
                      int& hi) {
  const int off = padding - tap;
  lo = off > 0 ? (off + stride - 1) / stride : 0;
  hi = (extent - 1 + off) / stride;
  if (hi > out_extent - 1) hi = out_extent - 1;
}

std::vector<int> normalize_axes(std::vector<int> axes, int rank, const char* name) {
  if (axes.empty()) {
    axes.resize(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i) axes[static_cast<std::size_t>(i)] = i;
    return axes;
  }
  std::sort(axes.begin(), axes.end());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] < 0 || axes[i] >= rank) {
      throw std::invalid_argument(std::string(name) + ": axis " + std::to_string(axes[i]) +
                                  " out of range for rank " + std::to_string(rank));
    }
    if (i > 0 && axes[i] == axes[i - 1]) {
      throw std::invalid_argument(std::string(name) + ": duplicate axis " +
                                  std::to_string(axes[i]));
    }
  }
  return axes;
}

Shape drop_axes(const Shape& shape, const std::vector<int>& axes) {
  Shape out;
  out.reserve(shape.size() - axes.size());
  std::size_t k = 0;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (k < axes.size() && axes[k] == i) {
      ++k;
      continue;
    }
    out.push_back(shape[static_cast<std::size_t>(i)]);
  }
  return out;
}

Tensor reduce_impl(Op op, const Tensor& t, std::vector<int> axes, const char* name) {
  axes = normalize_axes(std::move(axes), t.rank(), name);
  const Shape out_shape = drop_axes(t.shape(), axes);
  std::vector<double> out(shape_numel(out_shape), 0.0);

  const int rank = t.rank();
  std::vector<char> reduced(static_cast<std::size_t>(rank), 0);
  std::size_t count = 1;
  for (int ax : axes) {
    reduced[static_cast<std::size_t>(ax)] = 1;
    count *= static_cast<std::size_t>(t.shape()[static_cast<std::size_t>(ax)]);
  }
  // Row-major strides of the output, laid against kept input axes.
  std::vector<std::size_t> out_stride(static_cast<std::size_t>(rank), 0);
  std::size_t stride = 1;
  for (int i = rank - 1; i >= 0; --i) {
    if (!reduced[static_cast<std::size_t>(i)]) {
      out_stride[static_cast<std::size_t>(i)] = stride;
      stride *= static_cast<std::size_t>(t.shape()[static_cast<std::size_t>(i)]);
    }
  }

  const auto& tv = t.values();
  std::vector<std::size_t> coord(static_cast<std::size_t>(rank), 0);
  std::size_t out_idx = 0;
  for (std::size_t i = 0; i < tv.size(); ++i) {
    out[out_idx] += tv[i];
    for (int d = rank - 1; d >= 0; --d) {
      const std::size_t dd = static_cast<std::size_t>(d);
      if (++coord[dd] < static_cast<std::size_t>(t.shape()[dd])) {
        out_idx += out_stride[dd];
        break;
      }
      coord[dd] = 0;
      out_idx -= out_stride[dd] * (static_cast<std::size_t>(t.shape()[dd]) - 1);
    }
  }

  if (op == Op::ReduceMean) {
    const double inv = count > 0 ? 1.0 / static_cast<double>(count) : 0.0;
    for (auto& v : out) v *= inv;
  }

  TapeNode node;
  node.op = op;
  node.in0 = t.node();
  node.a = t;
  node.axes = axes;
  return finish(std::move(node), Tensor(out_shape, std::move(out)), name);
}

void append_contrib(std::vector<std::pair<std::int64_t, Tensor>>& out, std::int64_t id, Tensor g) {
  if (id >= 0) out.emplace_back(id, std::move(g));
}

// Adjoint of one node, composed from the public ops so it can itself be
// recorded. `want0`/`want1` gate the per-operand work.
void vjp_into(const TapeNode& n, const Tensor& g, bool want0, bool want1,
              std::vector<std::pair<std::int64_t, Tensor>>& out) {
  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::Add:
      if (want0) append_contrib(out, n.in0, g);
      if (want1) append_contrib(out, n.in1, g);
      return;
    case Op::Sub:
      if (n.sside == ScalarSide::Left) {
        if (want0) append_contrib(out, n.in0, neg(g));
        return;
      }
      if (want0) append_contrib(out, n.in0, g);
      if (want1) append_contrib(out, n.in1, neg(g));
      return;
    case Op::Mul:
      if (n.sside != ScalarSide::None) {
        if (want0) append_contrib(out, n.in0, mul(g, n.scalar));
        return;
      }
      if (want0) append_contrib(out, n.in0, mul(g, n.b));
      if (want1) append_contrib(out, n.in1, mul(g, n.a));
      return;
    case Op::Div:
      if (n.sside == ScalarSide::Right) {
        if (want0) append_contrib(out, n.in0, div(g, n.scalar));
        return;
      }
      if (n.sside == ScalarSide::Left) {
        // d/dt (s/t) = -out/t
        if (want0) append_contrib(out, n.in0, mul(g, div(neg(n.out), n.a)));
        return;
      }
      if (want0) append_contrib(out, n.in0, div(g, n.b));
      if (want1) append_contrib(out, n.in1, mul(g, div(neg(n.out), n.b)));
      return;
    case Op::Pow:
      if (n.sside == ScalarSide::Right) {
        if (want0) append_contrib(out, n.in0, mul(mul(g, n.scalar), pow(n.a, n.scalar - 1.0)));
        return;
      }
      if (want0) append_contrib(out, n.in0, mul(g, mul(n.b, pow(n.a, sub(n.b, 1.0)))));
      if (want1) append_contrib(out, n.in1, mul(g, mul(n.out, log(n.a))));
      return;
    case Op::Min:
    case Op::Max: {
      // Subgradient masks; ties go to the first operand.
      const bool is_min = n.op == Op::Min;
      std::vector<double> m0(n.a.numel());
      const auto& av = n.a.values();
      if (n.sside == ScalarSide::None) {
        const auto& bv = n.b.values();
        for (std::size_t i = 0; i < m0.size(); ++i) {
          const bool first = is_min ? av[i] <= bv[i] : av[i] >= bv[i];
          m0[i] = first ? 1.0 : 0.0;
        }
        if (want0) append_contrib(out, n.in0, mul(g, Tensor(n.a.shape(), m0)));
        if (want1) {
          for (auto& v : m0) v = 1.0 - v;
          append_contrib(out, n.in1, mul(g, Tensor(n.a.shape(), std::move(m0))));
        }
        return;
      }
      for (std::size_t i = 0; i < m0.size(); ++i) {
        const bool first = is_min ? av[i] <= n.scalar : av[i] >= n.scalar;
        m0[i] = first ? 1.0 : 0.0;
      }
      if (want0) append_contrib(out, n.in0, mul(g, Tensor(n.a.shape(), std::move(m0))));
      return;
    }
    case Op::Relu:
    case Op::LeakyRelu: {
      std::vector<double> m(n.a.numel());
      const auto& av = n.a.values();
      const double slope = n.op == Op::Relu ? 0.0 : n.scalar;
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = av[i] > 0.0 ? 1.0 : slope;
      if (want0) append_contrib(out, n.in0, mul(g, Tensor(n.a.shape(), std::move(m))));
      return;
    }
    case Op::Sigmoid:
      if (want0) append_contrib(out, n.in0, mul(mul(g, n.out), sub(1.0, n.out)));
      return;
    case Op::Tanh:
      if (want0) append_contrib(out, n.in0, mul(g, sub(1.0, mul(n.out, n.out))));
      return;
    case Op::Exp:
      if (want0) append_contrib(out, n.in0, mul(g, n.out));
      return;
    case Op::Log:
      if (want0) append_contrib(out, n.in0, div(g, n.a));
      return;
    case Op::Softplus:
      if (want0) append_contrib(out, n.in0, mul(g, sigmoid(n.a)));
      return;
    case Op::MatMul:
      if (want0) append_contrib(out, n.in0, matmul(g, transpose(n.b)));
      if (want1) append_contrib(out, n.in1, matmul(transpose(n.a), g));
      return;
    case Op::Transpose:
      if (want0) append_contrib(out, n.in0, transpose(g));
      return;
    case Op::Reshape:
      if (want0) append_contrib(out, n.in0, reshape(g, n.a.shape()));
      return;
    case Op::Conv2d:
      if (want0) append_contrib(out, n.in0, conv2d_input_grad(g, n.b, n.i0, n.i1, n.a.shape()));
      if (want1) append_contrib(out, n.in1, conv2d_kernel_grad(n.a, g, n.i0, n.i1, n.b.shape()));
      return;
    case Op::ConvInputGrad:
      // r = GI(go, K): d go = F(g, K); d K = GK(g, go).
      if (want0) append_contrib(out, n.in0, conv2d(g, n.b, n.i0, n.i1));
      if (want1) append_contrib(out, n.in1, conv2d_kernel_grad(g, n.a, n.i0, n.i1, n.b.shape()));
      return;
    case Op::ConvKernelGrad:
      // r = GK(I, go): d I = GI(go, g); d go = F(I, g).
      if (want0) append_contrib(out, n.in0, conv2d_input_grad(n.b, g, n.i0, n.i1, n.a.shape()));
      if (want1) append_contrib(out, n.in1, conv2d(n.a, g, n.i0, n.i1));
      return;
    case Op::ReduceSum:
      if (want0) append_contrib(out, n.in0, broadcast_axes(g, n.axes, n.a.shape()));
      return;
    case Op::ReduceMean: {
      if (!want0) return;
      std::size_t count = 1;
      for (int ax : n.axes) count *= static_cast<std::size_t>(n.a.shape()[static_cast<std::size_t>(ax)]);
      append_contrib(out, n.in0,
                     mul(broadcast_axes(g, n.axes, n.a.shape()), 1.0 / static_cast<double>(count)));
      return;
    }
    case Op::BroadcastAxes:
      if (want0) append_contrib(out, n.in0, reduce_sum(g, n.axes));
      return;
    case Op::ConcatChannels: {
      const int c1 = n.a.shape()[0];
      const int c2 = n.b.shape()[0];
      if (want0) append_contrib(out, n.in0, slice_channels(g, 0, c1));
      if (want1) append_contrib(out, n.in1, slice_channels(g, c1, c1 + c2));
      return;
    }
    case Op::SliceChannels: {
      if (!want0) return;
      const Shape& src = n.a.shape();
      Tensor padded = g;
      if (n.i0 > 0) {
        padded = concat_channels(Tensor::zeros({n.i0, src[1], src[2]}), padded);
      }
      if (n.i1 < src[0]) {
        padded = concat_channels(padded, Tensor::zeros({src[0] - n.i1, src[1], src[2]}));
      }
      append_contrib(out, n.in0, padded);
      return;
    }
    case Op::Softmax: {
      if (!want0) return;
      const Tensor inner = mul(g, n.out);
      const Tensor row = reduce_sum(inner, {n.i0});
      const Tensor full = broadcast_axes(row, {n.i0}, n.out.shape());
      append_contrib(out, n.in0, mul(n.out, sub(g, full)));
      return;
    }
    case Op::UpsampleNearest2:
      if (want0) append_contrib(out, n.in0, downsample_sum2(g));
      return;
    case Op::DownsampleSum2:
      if (want0) append_contrib(out, n.in0, upsample_nearest2(g));
      return;
  }
}

}  // namespace

// ---- tape ------------------------------------------------------------

std::uint64_t Tape::next_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

Tape* Tape::active() { return g_active; }

bool recording_enabled() { return g_no_grad_depth == 0; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active) { g_active = &tape; }
TapeScope::~TapeScope() { g_active = previous_; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

EnableRecordingGuard::EnableRecordingGuard() : saved_(g_no_grad_depth) { g_no_grad_depth = 0; }
EnableRecordingGuard::~EnableRecordingGuard() { g_no_grad_depth = saved_; }

std::int64_t Tape::append(TapeNode node, Tensor& value) {
  const std::int64_t id = static_cast<std::int64_t>(nodes_.size());
  TensorAccess::set_node(value, id, id_);
  node.out = value;
  nodes_.push_back(std::move(node));
  return id;
}

Tensor Tape::watch(const Tensor& t) {
  Tensor leaf = t;
  TapeNode node;
  node.op = Op::Leaf;
  const std::int64_t id = static_cast<std::int64_t>(nodes_.size());
  TensorAccess::set_node(leaf, id, id_);
  TensorAccess::set_requires_grad(leaf, true);
  node.out = leaf;
  nodes_.push_back(std::move(node));
  leaves_.push_back(id);
  return leaf;
}

void Tape::sweep(std::int64_t out_id, std::unordered_map<std::int64_t, Tensor>& grads,
                 std::int64_t wrt_id) {
  // Restrict the walk to nodes that both feed the output and depend on
  // the target; -1 means every ancestor of the output is wanted.
  std::vector<char> relevant;
  if (wrt_id >= 0) {
    if (wrt_id > out_id) return;
    relevant.assign(static_cast<std::size_t>(out_id) + 1, 0);
    relevant[static_cast<std::size_t>(wrt_id)] = 1;
    for (std::int64_t i = wrt_id + 1; i <= out_id; ++i) {
      const TapeNode& n = nodes_[static_cast<std::size_t>(i)];
      relevant[static_cast<std::size_t>(i)] =
          (n.in0 >= 0 && relevant[static_cast<std::size_t>(n.in0)]) ||
          (n.in1 >= 0 && relevant[static_cast<std::size_t>(n.in1)]);
    }
    if (!relevant[static_cast<std::size_t>(out_id)]) return;
  }

  for (std::int64_t i = out_id; i >= 0; --i) {
    auto it = grads.find(i);
    if (it == grads.end()) continue;
    if (wrt_id >= 0 && !relevant[static_cast<std::size_t>(i)]) continue;
    // Copy: recorded adjoints may grow nodes_ and invalidate references.
    const TapeNode node = nodes_[static_cast<std::size_t>(i)];
    if (node.op == Op::Leaf) continue;
    const Tensor g = it->second;
    const bool want0 =
        node.in0 >= 0 && (wrt_id < 0 || relevant[static_cast<std::size_t>(node.in0)]);
    const bool want1 =
        node.in1 >= 0 && (wrt_id < 0 || relevant[static_cast<std::size_t>(node.in1)]);
    if (!want0 && !want1) continue;
    std::vector<std::pair<std::int64_t, Tensor>> contrib;
    vjp_into(node, g, want0, want1, contrib);
    for (auto& [id, c] : contrib) {
      auto slot = grads.find(id);
      if (slot == grads.end()) {
        grads.emplace(id, std::move(c));
      } else {
        slot->second = add(slot->second, c);
      }
    }
  }
}

GradientMap Tape::backward(const Tensor& output) {
  if (consumed_) {
    throw std::invalid_argument("backward called twice on the same computation record");
  }
  consumed_ = true;
  if (output.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar output, got shape " +
                                shape_str(output.shape()));
  }
  std::unordered_map<std::int64_t, Tensor> grads;
  if (output.node() >= 0 && output.tape_id() == id_) {
    NoGradGuard no_grad;
    grads.emplace(output.node(), Tensor::full(output.shape(), 1.0));
    sweep(output.node(), grads, -1);
  }
  GradientMap result;
  for (std::int64_t leaf : leaves_) {
    auto it = grads.find(leaf);
    if (it != grads.end()) {
      result.by_node.emplace(leaf, it->second);
    } else {
      result.by_node.emplace(leaf, Tensor::zeros(nodes_[static_cast<std::size_t>(leaf)].out.shape()));
    }
  }
  return result;
}

Tensor Tape::grad(const Tensor& output, const Tensor& wrt) {
  if (output.numel() != 1) {
    throw std::invalid_argument("grad requires a scalar output, got shape " +
                                shape_str(output.shape()));
  }
  if (wrt.node() < 0 || wrt.tape_id() != id_) {
    throw std::invalid_argument("grad target is not recorded on this tape");
  }
  if (output.node() < 0 || output.tape_id() != id_) {
    return Tensor::zeros(wrt.shape());
  }
  std::unordered_map<std::int64_t, Tensor> grads;
  grads.emplace(output.node(), Tensor::full(output.shape(), 1.0));
  sweep(output.node(), grads, wrt.node());
  auto it = grads.find(wrt.node());
  if (it == grads.end()) return Tensor::zeros(wrt.shape());
  return it->second;
}

Tensor GradientMap::at(const Tensor& leaf) const {
  auto it = by_node.find(leaf.node());
  if (leaf.node() < 0 || it == by_node.end()) {
    throw std::invalid_argument("tensor is not a watched leaf of this record");
  }
  return it->second;
}

bool GradientMap::contains(const Tensor& leaf) const {
  return leaf.node() >= 0 && by_node.count(leaf.node()) > 0;
}

// ---- elementwise -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary_tt(Op::Add, BinKind::Add, a, b, "add"); }
Tensor add(const Tensor& a, double b) { return binary_ts(Op::Add, BinKind::Add, a, b, ScalarSide::Right, "add"); }
Tensor add(double a, const Tensor& b) { return binary_ts(Op::Add, BinKind::Add, b, a, ScalarSide::Left, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_tt(Op::Sub, BinKind::Sub, a, b, "sub"); }
Tensor sub(const Tensor& a, double b) { return binary_ts(Op::Sub, BinKind::Sub, a, b, ScalarSide::Right, "sub"); }
Tensor sub(double a, const Tensor& b) { return binary_ts(Op::Sub, BinKind::Sub, b, a, ScalarSide::Left, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_tt(Op::Mul, BinKind::Mul, a, b, "mul"); }
Tensor mul(const Tensor& a, double b) { return binary_ts(Op::Mul, BinKind::Mul, a, b, ScalarSide::Right, "mul"); }
Tensor mul(double a, const Tensor& b) { return binary_ts(Op::Mul, BinKind::Mul, b, a, ScalarSide::Left, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_tt(Op::Div, BinKind::Div, a, b, "div"); }
Tensor div(const Tensor& a, double b) { return binary_ts(Op::Div, BinKind::Div, a, b, ScalarSide::Right, "div"); }
Tensor div(double a, const Tensor& b) { return binary_ts(Op::Div, BinKind::Div, b, a, ScalarSide::Left, "div"); }
Tensor pow(const Tensor& a, const Tensor& b) { return binary_tt(Op::Pow, BinKind::Pow, a, b, "pow"); }
Tensor pow(const Tensor& a, double b) { return binary_ts(Op::Pow, BinKind::Pow, a, b, ScalarSide::Right, "pow"); }
Tensor minimum(const Tensor& a, const Tensor& b) { return binary_tt(Op::Min, BinKind::Min, a, b, "minimum"); }
Tensor minimum(const Tensor& a, double b) { return binary_ts(Op::Min, BinKind::Min, a, b, ScalarSide::Right, "minimum"); }
Tensor maximum(const Tensor& a, const Tensor& b) { return binary_tt(Op::Max, BinKind::Max, a, b, "maximum"); }
Tensor maximum(const Tensor& a, double b) { return binary_ts(Op::Max, BinKind::Max, a, b, ScalarSide::Right, "maximum"); }
Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor relu(const Tensor& t) { return unary(Op::Relu, UnKind::Relu, t, 0.0, "relu"); }
Tensor leaky_relu(const Tensor& t, double alpha) {
  return unary(Op::LeakyRelu, UnKind::LeakyRelu, t, alpha, "leaky_relu");
}
Tensor sigmoid(const Tensor& t) { return unary(Op::Sigmoid, UnKind::Sigmoid, t, 0.0, "sigmoid"); }
Tensor tanh(const Tensor& t) { return unary(Op::Tanh, UnKind::Tanh, t, 0.0, "tanh"); }
Tensor exp(const Tensor& t) { return unary(Op::Exp, UnKind::Exp, t, 0.0, "exp"); }
Tensor log(const Tensor& t) { return unary(Op::Log, UnKind::Log, t, 0.0, "log"); }
Tensor softplus(const Tensor& t) { return unary(Op::Softplus, UnKind::Softplus, t, 0.0, "softplus"); }

// ---- linear algebra ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul: both operands must be rank-2, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < m; ++i) {
    double* orow = out.data() + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double aik = av[static_cast<std::size_t>(i) * k + kk];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  TapeNode node;
  node.op = Op::MatMul;
  node.in0 = a.node();
  node.in1 = b.node();
  node.a = a;
  node.b = b;
  return finish(std::move(node), Tensor({m, n}, std::move(out)), "matmul");
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw std::invalid_argument("transpose: operand must be rank-2, got " + shape_str(a.shape()));
  }
  const int m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      out[static_cast<std::size_t>(j) * m + i] = av[static_cast<std::size_t>(i) * n + j];
    }
  }
  TapeNode node;
  node.op = Op::Transpose;
  node.in0 = a.node();
  node.a = a;
  return finish(std::move(node), Tensor({n, m}, std::move(out)), "transpose");
}

Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(t.shape()) + " as " +
                                shape_str(shape));
  }
  Tensor value = TensorAccess::reshaped_view(t, std::move(shape));
  TapeNode node;
  node.op = Op::Reshape;
  node.in0 = t.node();
  node.a = t;
  return finish(std::move(node), std::move(value), "reshape");
}

// ---- convolution ---------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride, int padding) {
  const ConvDims d = conv_dims(input.shape(), kernels.shape(), stride, padding, "conv2d");
  std::vector<double> out(static_cast<std::size_t>(d.co) * d.oh * d.ow, 0.0);
  const auto& in = input.values();
  const auto& kv = kernels.values();
  for (int co = 0; co < d.co; ++co) {
    double* oc = out.data() + static_cast<std::size_t>(co) * d.oh * d.ow;
    for (int ci = 0; ci < d.ci; ++ci) {
      const double* icp = in.data() + static_cast<std::size_t>(ci) * d.h * d.w;
      const double* kc = kv.data() + (static_cast<std::size_t>(co) * d.ci + ci) * d.kh * d.kw;
      for (int i = 0; i < d.kh; ++i) {
        int ylo, yhi;
        tap_range(i, padding, stride, d.h, d.oh, ylo, yhi);
        for (int j = 0; j < d.kw; ++j) {
          const double wgt = kc[i * d.kw + j];
          if (wgt == 0.0) continue;
          int xlo, xhi;
          tap_range(j, padding, stride, d.w, d.ow, xlo, xhi);
          for (int y = ylo; y <= yhi; ++y) {
            const int u = y * stride + i - padding;
            double* orow = oc + static_cast<std::size_t>(y) * d.ow;
            const double* irow = icp + static_cast<std::size_t>(u) * d.w + (j - padding);
            if (stride == 1) {
              for (int x = xlo; x <= xhi; ++x) orow[x] += wgt * irow[x];
            } else {
              for (int x = xlo; x <= xhi; ++x) orow[x] += wgt * irow[static_cast<std::size_t>(x) * stride];
            }
          }
        }
      }
    }
  }
  TapeNode node;
  node.op = Op::Conv2d;
  node.in0 = input.node();
  node.in1 = kernels.node();
  node.a = input;
  node.b = kernels;
  node.i0 = stride;
  node.i1 = padding;
  return finish(std::move(node), Tensor({d.co, d.oh, d.ow}, std::move(out)), "conv2d");
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernels, int stride, int padding,
                         const Shape& input_shape) {
  const ConvDims d = conv_dims(input_shape, kernels.shape(), stride, padding, "conv2d_input_grad");
  if (grad_out.shape() != Shape{d.co, d.oh, d.ow}) {
    throw std::invalid_argument("conv2d_input_grad: gradient shape " + shape_str(grad_out.shape()) +
                                " does not match expected " + shape_str({d.co, d.oh, d.ow}));
  }
  std::vector<double> out(shape_numel(input_shape), 0.0);
  const auto& gv = grad_out.values();
  const auto& kv = kernels.values();
  for (int co = 0; co < d.co; ++co) {
    const double* gc = gv.data() + static_cast<std::size_t>(co) * d.oh * d.ow;
    for (int ci = 0; ci < d.ci; ++ci) {
      double* icp = out.data() + static_cast<std::size_t>(ci) * d.h * d.w;
      const double* kc = kv.data() + (static_cast<std::size_t>(co) * d.ci + ci) * d.kh * d.kw;
      for (int i = 0; i < d.kh; ++i) {
        int ylo, yhi;
        tap_range(i, padding, stride, d.h, d.oh, ylo, yhi);
        for (int j = 0; j < d.kw; ++j) {
          const double wgt = kc[i * d.kw + j];
          if (wgt == 0.0) continue;
          int xlo, xhi;
          tap_range(j, padding, stride, d.w, d.ow, xlo, xhi);
          for (int y = ylo; y <= yhi; ++y) {
            const int u = y * stride + i - padding;
            const double* grow = gc + static_cast<std::size_t>(y) * d.ow;
            double* irow = icp + static_cast<std::size_t>(u) * d.w + (j - padding);
            if (stride == 1) {
              for (int x = xlo; x <= xhi; ++x) irow[x] += wgt * grow[x];
            } else {
              for (int x = xlo; x <= xhi; ++x) irow[static_cast<std::size_t>(x) * stride] += wgt * grow[x];
            }
          }
        }
      }
    }
  }
  TapeNode node;
  node.op = Op::ConvInputGrad;
  node.in0 = grad_out.node();
  node.in1 = kernels.node();
  node.a = grad_out;
  node.b = kernels;
  node.i0 = stride;
  node.i1 = padding;
  return finish(std::move(node), Tensor(input_shape, std::move(out)), "conv2d_input_grad");
}

Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad_out, int stride, int padding,
                          const Shape& kernel_shape) {
  const ConvDims d = conv_dims(input.shape(), kernel_shape, stride, padding, "conv2d_kernel_grad");
  if (grad_out.shape() != Shape{d.co, d.oh, d.ow}) {
    throw std::invalid_argument("conv2d_kernel_grad: gradient shape " +
                                shape_str(grad_out.shape()) + " does not match expected " +
                                shape_str({d.co, d.oh, d.ow}));
  }
  std::vector<double> out(shape_numel(kernel_shape), 0.0);
  const auto& gv = grad_out.values();
  const auto& in = input.values();
  for (int co = 0; co < d.co; ++co) {
    const double* gc = gv.data() + static_cast<std::size_t>(co) * d.oh * d.ow;
    for (int ci = 0; ci < d.ci; ++ci) {
      const double* icp = in.data() + static_cast<std::size_t>(ci) * d.h * d.w;
      double* kc = out.data() + (static_cast<std::size_t>(co) * d.ci + ci) * d.kh * d.kw;
      for (int i = 0; i < d.kh; ++i) {
        int ylo, yhi;
        tap_range(i, padding, stride, d.h, d.oh, ylo, yhi);
        for (int j = 0; j < d.kw; ++j) {
          int xlo, xhi;
          tap_range(j, padding, stride, d.w, d.ow, xlo, xhi);
          double acc = 0.0;
          for (int y = ylo; y <= yhi; ++y) {
            const int u = y * stride + i - padding;
            const double* grow = gc + static_cast<std::size_t>(y) * d.ow;
            const double* irow = icp + static_cast<std::size_t>(u) * d.w + (j - padding);
            if (stride == 1) {
              for (int x = xlo; x <= xhi; ++x) acc += grow[x] * irow[x];
            } else {
              for (int x = xlo; x <= xhi; ++x) acc += grow[x] * irow[static_cast<std::size_t>(x) * stride];
            }
          }
          kc[i * d.kw + j] += acc;
        }
      }
    }
  }
  TapeNode node;
  node.op = Op::ConvKernelGrad;
  node.in0 = input.node();
  node.in1 = grad_out.node();
  node.a = input;
  node.b = grad_out;
  node.i0 = stride;
  node.i1 = padding;
  return finish(std::move(node), Tensor(kernel_shape, std::move(out)), "conv2d_kernel_grad");
}

// ---- reductions -----------------------------------------------------------

Tensor reduce_sum(const Tensor& t, std::vector<int> axes) {
  return reduce_impl(Op::ReduceSum, t, std::move(axes), "reduce_sum");
}

Tensor reduce_mean(const Tensor& t, std::vector<int> axes) {
  return reduce_impl(Op::ReduceMean, t, std::move(axes), "reduce_mean");
}

Tensor broadcast_axes(const Tensor& t, std::vector<int> axes, Shape target) {
  const int rank = static_cast<int>(target.size());
  axes = normalize_axes(std::move(axes), rank, "broadcast_axes");
  if (drop_axes(target, axes) != t.shape()) {
    throw std::invalid_argument("broadcast_axes: source " + shape_str(t.shape()) +
                                " does not match target " + shape_str(target) + " minus axes");
  }
  std::vector<char> inserted(static_cast<std::size_t>(rank), 0);
  for (int ax : axes) inserted[static_cast<std::size_t>(ax)] = 1;
  std::vector<std::size_t> src_stride(static_cast<std::size_t>(rank), 0);
  std::size_t stride = 1;
  for (int i = rank - 1; i >= 0; --i) {
    if (!inserted[static_cast<std::size_t>(i)]) {
      src_stride[static_cast<std::size_t>(i)] = stride;
      stride *= static_cast<std::size_t>(target[static_cast<std::size_t>(i)]);
    }
  }
  std::vector<double> out(shape_numel(target));
  const auto& tv = t.values();
  std::vector<std::size_t> coord(static_cast<std::size_t>(rank), 0);
  std::size_t src_idx = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = tv[src_idx];
    for (int d = rank - 1; d >= 0; --d) {
      const std::size_t dd = static_cast<std::size_t>(d);
      if (++coord[dd] < static_cast<std::size_t>(target[dd])) {
        src_idx += src_stride[dd];
        break;
      }
      coord[dd] = 0;
      src_idx -= src_stride[dd] * (static_cast<std::size_t>(target[dd]) - 1);
    }
  }
  TapeNode node;
  node.op = Op::BroadcastAxes;
  node.in0 = t.node();
  node.a = t;
  node.axes = axes;
  node.aux = target;
  return finish(std::move(node), Tensor(std::move(target), std::move(out)), "broadcast_axes");
}

// ---- channel layout --------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3) {
    throw std::invalid_argument("concat_channels: operands must be [C,H,W], got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  if (a.shape()[1] != b.shape()[1] || a.shape()[2] != b.shape()[2]) {
    throw std::invalid_argument("concat_channels: spatial mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  std::vector<double> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  TapeNode node;
  node.op = Op::ConcatChannels;
  node.in0 = a.node();
  node.in1 = b.node();
  node.a = a;
  node.b = b;
  return finish(std::move(node),
                Tensor({a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]}, std::move(out)),
                "concat_channels");
}

Tensor slice_channels(const Tensor& t, int from, int to) {
  if (t.rank() != 3) {
    throw std::invalid_argument("slice_channels: operand must be [C,H,W], got " +
                                shape_str(t.shape()));
  }
  if (from < 0 || to < from || to > t.shape()[0]) {
    throw std::invalid_argument("slice_channels: range [" + std::to_string(from) + "," +
                                std::to_string(to) + ") invalid for " + shape_str(t.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(t.shape()[1]) * t.shape()[2];
  std::vector<double> out(t.values().begin() + static_cast<std::ptrdiff_t>(from * plane),
                          t.values().begin() + static_cast<std::ptrdiff_t>(to * plane));
  TapeNode node;
  node.op = Op::SliceChannels;
  node.in0 = t.node();
  node.a = t;
  node.i0 = from;
  node.i1 = to;
  return finish(std::move(node), Tensor({to - from, t.shape()[1], t.shape()[2]}, std::move(out)),
                "slice_channels");
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax(const Tensor& t, int axis) {
  if (axis < 0 || axis >= t.rank()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " invalid for " +
                                shape_str(t.shape()));
  }
  const int n = t.shape()[static_cast<std::size_t>(axis)];
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(t.shape()[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < t.rank(); ++i) inner *= static_cast<std::size_t>(t.shape()[static_cast<std::size_t>(i)]);
  std::vector<double> out(t.numel());
  const auto& tv = t.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * static_cast<std::size_t>(n) * inner + in;
      double m = -1e308;
      for (int k = 0; k < n; ++k) m = std::max(m, tv[base + static_cast<std::size_t>(k) * inner]);
      double sum = 0.0;
      for (int k = 0; k < n; ++k) {
        const double e = std::exp(tv[base + static_cast<std::size_t>(k) * inner] - m);
        out[base + static_cast<std::size_t>(k) * inner] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (int k = 0; k < n; ++k) out[base + static_cast<std::size_t>(k) * inner] *= inv;
    }
  }
  TapeNode node;
  node.op = Op::Softmax;
  node.in0 = t.node();
  node.a = t;
  node.i0 = axis;
  return finish(std::move(node), Tensor(t.shape(), std::move(out)), "softmax");
}

// ---- spatial resampling --------------------------------------------------------

Tensor upsample_nearest2(const Tensor& t) {
  if (t.rank() != 3) {
    throw std::invalid_argument("upsample_nearest2: operand must be [C,H,W], got " +
                                shape_str(t.shape()));
  }
  const int c = t.shape()[0], h = t.shape()[1], w = t.shape()[2];
  std::vector<double> out(static_cast<std::size_t>(c) * 4 * h * w);
  const auto& tv = t.values();
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      const double* irow = tv.data() + (static_cast<std::size_t>(ch) * h + y) * w;
      double* o0 = out.data() + (static_cast<std::size_t>(ch) * 2 * h + 2 * y) * 2 * w;
      double* o1 = o0 + static_cast<std::size_t>(2) * w;
      for (int x = 0; x < w; ++x) {
        const double v = irow[x];
        o0[2 * x] = v;
        o0[2 * x + 1] = v;
        o1[2 * x] = v;
        o1[2 * x + 1] = v;
      }
    }
  }
  TapeNode node;
  node.op = Op::UpsampleNearest2;
  node.in0 = t.node();
  node.a = t;
  return finish(std::move(node), Tensor({c, 2 * h, 2 * w}, std::move(out)), "upsample_nearest2");
}

Tensor downsample_sum2(const Tensor& t) {
  if (t.rank() != 3 || t.shape()[1] % 2 != 0 || t.shape()[2] % 2 != 0) {
    throw std::invalid_argument("downsample_sum2: operand must be [C,2H,2W], got " +
                                shape_str(t.shape()));
  }
  const int c = t.shape()[0], h = t.shape()[1] / 2, w = t.shape()[2] / 2;
  std::vector<double> out(static_cast<std::size_t>(c) * h * w);
  const auto& tv = t.values();
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      const double* i0 = tv.data() + (static_cast<std::size_t>(ch) * 2 * h + 2 * y) * 2 * w;
      const double* i1 = i0 + static_cast<std::size_t>(2) * w;
      double* orow = out.data() + (static_cast<std::size_t>(ch) * h + y) * w;
      for (int x = 0; x < w; ++x) {
        orow[x] = i0[2 * x] + i0[2 * x + 1] + i1[2 * x] + i1[2 * x + 1];
      }
    }
  }
  TapeNode node;
  node.op = Op::DownsampleSum2;
  node.in0 = t.node();
  node.a = t;
  return finish(std::move(node), Tensor({c, h, w}, std::move(out)), "downsample_sum2");
}

// ---- finite differences -----------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be positive");
  Tensor analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor wx = tape.watch(x);
    Tensor y = f(wx);
    if (y.numel() != 1) {
      throw std::invalid_argument("finite_diff_check: f must return a scalar");
    }
    if (!y.all_finite()) throw NumericError("finite_diff_check: non-finite function value");
    analytic = tape.backward(y).at(wx);
  }
  NoGradGuard no_grad;
  double worst = 0.0;
  std::vector<double> base = x.values();
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> vp = base;
    std::vector<double> vm = base;
    vp[i] += step;
    vm[i] -= step;
    const double fp = f(Tensor(x.shape(), std::move(vp))).value();
    const double fm = f(Tensor(x.shape(), std::move(vm))).value();
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_check: non-finite function value at perturbed point");
    }
    const double central = (fp - fm) / (2.0 * step);
    const double ref = analytic.at(i);
    const double err = std::abs(ref - central) / std::max(1.0, std::abs(ref));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace hvae
