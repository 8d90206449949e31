#include "tqpt/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace tqpt {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + to_string(shape_) + " holds " +
                     std::to_string(shape_size(shape_)) + " values but " +
                     std::to_string(data_.size()) + " were supplied");
  }
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[axis];
}

template <typename T>
std::size_t BasicTensor<T>::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw ShapeError("rows() needs a rank-2 tensor, got " + to_string(shape_));
  return shape_[0];
}

template <typename T>
std::size_t BasicTensor<T>::cols() const {
  if (shape_.empty()) return 0;
  return shape_.back();
}

template <typename T>
void BasicTensor<T>::enable_grad() {
  if (!has_grad_) {
    grad_.assign(data_.size(), T{0});
    has_grad_ = true;
  }
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  enable_grad();
  std::fill(grad_.begin(), grad_.end(), T{0});
}

template <typename T>
std::span<T> BasicTensor<T>::grad() {
  if (!has_grad_) throw InvalidArgument("tensor " + to_string(shape_) + " has no gradient buffer");
  return grad_;
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!has_grad_) throw InvalidArgument("tensor " + to_string(shape_) + " has no gradient buffer");
  return grad_;
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void BasicTensor<T>::reshape(Shape shape) {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  shape_ = std::move(shape);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace tqpt
