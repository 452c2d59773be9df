#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxadapt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when an operation produces NaN or Inf from finite inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles. Last axis varies fastest.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, value); }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] std::span<double> data() noexcept { return data_; }
  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::initializer_list<std::size_t> index);
  [[nodiscard]] double at(std::initializer_list<std::size_t> index) const;

  /// Scalar value of a single-element tensor.
  [[nodiscard]] double item() const;

  [[nodiscard]] Tensor reshaped(Shape shape) const;
  void fill(double value);

  /// Rows [begin, end) along axis 0.
  [[nodiscard]] Tensor slice_batch(std::size_t begin, std::size_t end) const;

  [[nodiscard]] bool all_finite() const noexcept;
  bool operator==(const Tensor& other) const = default;

 private:
  [[nodiscard]] std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
};

/// Concatenates tensors along axis 0; trailing dimensions must agree.
Tensor concat_batch(std::span<const Tensor> parts);

/// Throws NumericError naming `what` if the tensor holds NaN/Inf.
void require_finite(const Tensor& t, const std::string& what);

}  // namespace voxadapt
