#include "sact/tensor.hpp"

#include <cstring>
#include <sstream>

namespace sact {

std::string Shape::str() const {
  std::ostringstream os;
  os << '(' << batch << ", " << height << ", " << width << ", " << channels << ')';
  return os.str();
}

namespace {
std::string dimension_message(std::string_view where, const std::string& axis, Index expected,
                              Index actual) {
  std::ostringstream os;
  os << where << ": dimension mismatch on axis '" << axis << "' (expected " << expected << ", got "
     << actual << ')';
  return os.str();
}
}  // namespace

DimensionError::DimensionError(std::string_view where, std::string axis, Index expected, Index actual)
    : std::invalid_argument(dimension_message(where, axis, expected, actual)),
      axis_(std::move(axis)),
      expected_(expected),
      actual_(actual) {}

void expect_axis(std::string_view where, const char* axis, Index expected, Index actual) {
  if (expected != actual) throw DimensionError(where, axis, expected, actual);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::example(Index n) const {
  if (n < 0 || n >= shape_.batch) throw std::out_of_range("Tensor::example: batch index out of range");
  Tensor out(Shape{1, shape_.height, shape_.width, shape_.channels});
  const Index stride = out.size();
  out.array() = data_.segment(n * stride, stride);
  return out;
}

template <typename Scalar>
void Tensor<Scalar>::set_example(Index n, const Tensor& ex) {
  expect_axis("Tensor::set_example", "height", shape_.height, ex.height());
  expect_axis("Tensor::set_example", "width", shape_.width, ex.width());
  expect_axis("Tensor::set_example", "channels", shape_.channels, ex.channels());
  const Index stride = ex.size();
  data_.segment(n * stride, stride) = ex.array();
}

template <typename Scalar>
bool Tensor<Scalar>::identical(const Tensor& other) const {
  if (!(shape_ == other.shape_)) return false;
  return size() == 0 ||
         std::memcmp(data_.data(), other.data_.data(), sizeof(Scalar) * static_cast<std::size_t>(size())) == 0;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace sact
