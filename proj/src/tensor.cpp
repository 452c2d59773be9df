#include "voxadapt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace voxadapt {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                     " values");
  }
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw ShapeError("index rank does not match tensor rank");
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw ShapeError("index out of range on axis " + std::to_string(axis));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_to_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::slice_batch(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > shape_.at(0)) throw ShapeError("invalid batch slice");
  const std::size_t row = data_.size() / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                          data_.begin() + static_cast<std::ptrdiff_t>(end * row));
  return Tensor(std::move(s), std::move(out));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor concat_batch(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_batch needs at least one tensor");
  Shape s = parts.front().shape();
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.rank() != s.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1)) {
      throw ShapeError("concat_batch: trailing shape mismatch " + shape_to_string(p.shape()) + " vs " +
                       shape_to_string(s));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  s[0] = rows;
  return Tensor(std::move(s), std::move(out));
}

void require_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError(what + " produced non-finite values");
}

}  // namespace voxadapt
