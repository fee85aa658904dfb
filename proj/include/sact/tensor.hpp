#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sact {

using Index = std::int64_t;

/// Rank-4 tensor geometry, batch-major NHWC.
struct Shape {
  Index batch = 0;
  Index height = 0;
  Index width = 0;
  Index channels = 0;

  Index size() const { return batch * height * width * channels; }
  Index positions() const { return batch * height * width; }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Raised when an operand's extent along a named axis does not match.
class DimensionError : public std::invalid_argument {
 public:
  DimensionError(std::string_view where, std::string axis, Index expected, Index actual);

  const std::string& axis() const { return axis_; }
  Index expected() const { return expected_; }
  Index actual() const { return actual_; }

 private:
  std::string axis_;
  Index expected_;
  Index actual_;
};

class UnsupportedConfiguration : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void expect_axis(std::string_view where, const char* axis, Index expected, Index actual);

/// 2-D row-major field at one spatial resolution (halting scores, ponder maps, saliency).
template <typename Scalar>
using Field = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// a_ij: per-position active flags at a block's spatial resolution.
using ActiveMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense rank-4 array (batch x height x width x channels), channels fastest.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Row = Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;
  using ConstRow = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(check(shape)), data_(Storage::Zero(shape.size())) {}
  Tensor(Shape shape, Scalar fill) : shape_(check(shape)), data_(Storage::Constant(shape.size(), fill)) {}
  Tensor(Index n, Index h, Index w, Index c) : Tensor(Shape{n, h, w, c}) {}

  static Tensor scalar(Scalar v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  Index size() const { return shape_.size(); }
  Index batch() const { return shape_.batch; }
  Index height() const { return shape_.height; }
  Index width() const { return shape_.width; }
  Index channels() const { return shape_.channels; }
  bool empty() const { return shape_.size() == 0; }

  Index offset(Index n, Index h, Index w, Index c) const {
    return ((n * shape_.height + h) * shape_.width + w) * shape_.channels + c;
  }
  Index position(Index n, Index h, Index w) const { return (n * shape_.height + h) * shape_.width + w; }

  Scalar& operator()(Index n, Index h, Index w, Index c) { return data_[offset(n, h, w, c)]; }
  Scalar operator()(Index n, Index h, Index w, Index c) const { return data_[offset(n, h, w, c)]; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> values() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  /// positions x channels view.
  Eigen::Map<RowMatrix> matrix() { return {data_.data(), shape_.positions(), shape_.channels}; }
  Eigen::Map<const RowMatrix> matrix() const { return {data_.data(), shape_.positions(), shape_.channels}; }

  /// Channel vector at flat position index.
  Row row(Index pos) { return {data_.data() + pos * shape_.channels, shape_.channels}; }
  ConstRow row(Index pos) const { return {data_.data() + pos * shape_.channels, shape_.channels}; }

  Scalar item() const {
    if (size() != 1) throw DimensionError("Tensor::item", "size", 1, size());
    return data_[0];
  }

  bool all_finite() const { return data_.allFinite(); }

  Tensor example(Index n) const;
  void set_example(Index n, const Tensor& ex);

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.array() = data_.template cast<Other>();
    return out;
  }

  /// Bitwise comparison; two tensors with NaNs at the same bit pattern compare equal.
  bool identical(const Tensor& other) const;

 private:
  static Shape check(Shape s) {
    if (s.batch < 0 || s.height < 0 || s.width < 0 || s.channels < 0)
      throw std::invalid_argument("Tensor: negative extent in shape " + s.str());
    return s;
  }

  Shape shape_{};
  Storage data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace sact
