#include "fastadapt/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace fastadapt {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : shape_{}, data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_size(shape_) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " holds " + std::to_string(shape_size(shape_)) +
                     " values but " + std::to_string(data.size()) + " were given");
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw ShapeError("from_rows: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
  return (*data_)[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

bool Tensor::all_finite() const {
  // x - x is 0 for finite x and nan otherwise; Eigen's reduction vectorizes.
  Eigen::Map<const Eigen::ArrayXd> a(ptr(), static_cast<Eigen::Index>(size()));
  return (a - a).sum() == 0.0;
}

bool Tensor::same_values(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  return std::memcmp(ptr(), other.ptr(), size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor axpy(double a, const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape()) {
    throw ShapeError("axpy: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  std::vector<double> out(y.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = y[i] + a * x[i];
  return Tensor(y.shape(), std::move(out));
}

Tensor scaled(const Tensor& x, double a) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x[i];
  return Tensor(x.shape(), std::move(out));
}

double squared_norm(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  return s;
}

}  // namespace fastadapt
