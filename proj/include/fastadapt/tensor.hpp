#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fastadapt {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Thrown for shape/arity violations in tensor primitives.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown when a NaN/Inf shows up where finite values are required.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major tensor of doubles. Storage is shared and never mutated
// after construction, so copies are cheap and safe to share across threads.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_->size(); }
  bool is_scalar() const { return size() == 1 && (rank() == 0 || (rank() == 1 && shape_[0] == 1)); }

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  const double* ptr() const { return data_->data(); }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;

  // Shares storage; the element count must be unchanged.
  Tensor reshaped(Shape shape) const;
  std::vector<double> to_vector() const { return *data_; }

  bool all_finite() const;
  bool same_values(const Tensor& other) const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

// y + a * x, elementwise; shapes must match.
Tensor axpy(double a, const Tensor& x, const Tensor& y);
Tensor scaled(const Tensor& x, double a);
double squared_norm(const Tensor& x);

}  // namespace fastadapt
