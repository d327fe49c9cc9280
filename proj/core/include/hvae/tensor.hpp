#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace hvae {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Global strict-finite toggle. ON rejects NaN/Inf at operation
// boundaries; training loops switch it OFF for the hot path.
bool strict_finite_enabled();
void set_strict_finite(bool on);

class StrictFiniteGuard {
 public:
  explicit StrictFiniteGuard(bool on) : previous_(strict_finite_enabled()) {
    set_strict_finite(on);
  }
  ~StrictFiniteGuard() { set_strict_finite(previous_); }
  StrictFiniteGuard(const StrictFiniteGuard&) = delete;
  StrictFiniteGuard& operator=(const StrictFiniteGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major f64 tensor. Values are immutable once constructed;
// copies share storage. `node()` is the handle into the active Tape,
// -1 when the tensor is a plain constant.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return full(Shape{}, value); }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }

  const std::vector<double>& values() const { return *data_; }
  double at(std::size_t i) const { return (*data_)[i]; }

  // Scalar accessor; requires numel() == 1.
  double value() const;

  std::int64_t node() const { return node_; }
  std::uint64_t tape_id() const { return tape_id_; }
  bool requires_grad() const { return requires_grad_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

 private:
  Shape shape_{};
  std::shared_ptr<const std::vector<double>> data_;
  std::int64_t node_ = -1;
  std::uint64_t tape_id_ = 0;  // node_ is only meaningful for this tape
  bool requires_grad_ = false;

  friend struct TensorAccess;
};

// Internal hook used by the tape and the op layer to attach graph
// handles without exposing mutation in the public interface.
struct TensorAccess {
  static void set_node(Tensor& t, std::int64_t node, std::uint64_t tape_id) {
    t.node_ = node;
    t.tape_id_ = tape_id;
  }
  static void set_requires_grad(Tensor& t, bool rg) { t.requires_grad_ = rg; }
  // Row-major reinterpretation sharing the same storage.
  static Tensor reshaped_view(const Tensor& t, Shape shape) {
    Tensor r = t;
    r.shape_ = std::move(shape);
    r.node_ = -1;
    r.tape_id_ = 0;
    r.requires_grad_ = false;
    return r;
  }
};

// Throws NumericError when strict finiteness is on and a value is not
// finite. `context` names the offending operation.
void check_finite(const Tensor& t, const char* context);

}  // namespace hvae
