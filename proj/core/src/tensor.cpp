#include "pointlama/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace pointlama {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("DenseArray: rank-0 shapes are not allowed, use {1}");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("DenseArray: zero-sized dimension in shape " + to_string(shape));
  }
}

}  // namespace

DenseArray::DenseArray(Shape shape, double fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

DenseArray::DenseArray(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("DenseArray: buffer of " + std::to_string(data_.size()) +
                     " elements does not match shape " + to_string(shape_));
  }
}

std::size_t DenseArray::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw ShapeError("DenseArray::at: index rank " + std::to_string(index.size()) +
                     " vs array rank " + std::to_string(shape_.size()));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw std::out_of_range("DenseArray::at: index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double& DenseArray::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
double DenseArray::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

double DenseArray::item() const {
  if (data_.size() != 1) throw ShapeError("DenseArray::item on array of shape " + to_string(shape_));
  return data_[0];
}

DenseArray DenseArray::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
  }
  return DenseArray(std::move(shape), data_);
}

void DenseArray::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

}  // namespace pointlama
