#include "hvae/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hvae/errors.hpp"

namespace hvae {

namespace {
std::atomic<bool> g_strict_finite{true};
}

bool strict_finite_enabled() { return g_strict_finite.load(std::memory_order_relaxed); }
void set_strict_finite(bool on) { g_strict_finite.store(on, std::memory_order_relaxed); }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ",";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  for (int e : shape_) {
    if (e < 0) throw std::invalid_argument("tensor extent must be non-negative, got " + shape_str(shape_));
  }
  if (shape_numel(shape_) != values.size()) {
    throw std::invalid_argument("tensor shape " + shape_str(shape_) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(v));
}

double Tensor::value() const {
  if (numel() != 1) {
    throw std::invalid_argument("scalar access on tensor of shape " + shape_str(shape_));
  }
  return (*data_)[0];
}

bool Tensor::all_finite() const {
  if (!data_) return true;
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void check_finite(const Tensor& t, const char* context) {
  if (!strict_finite_enabled()) return;
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + context);
  }
}

}  // namespace hvae
