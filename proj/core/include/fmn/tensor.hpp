#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fmn/errors.hpp"

namespace fmn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major n-dimensional array with an optional gradient buffer.
///
/// Values are owned; copies are deep. The gradient buffer is allocated on
/// demand and always has numel() entries when present.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool flag) { requires_grad_ = flag; }

  bool has_grad() const { return !grad_.empty(); }
  /// Allocates a zero gradient buffer if none exists.
  std::span<T> grad();
  std::span<const T> grad() const { return grad_; }
  void zero_grad();
  void clear_grad() { grad_.clear(); }

  /// Same data, new shape. Throws DimensionError if numel differs.
  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    Tensor<U> t(shape_, std::move(out));
    t.set_requires_grad(requires_grad_);
    return t;
  }

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
  bool requires_grad_ = false;
};

/// Writes a tensor in the "FMNT" binary layout: magic, u32 rank, u32 dims,
/// then little-endian float32 values in row-major order.
void write_tensor(const std::filesystem::path& path, const Tensor<float>& tensor);
Tensor<float> read_tensor(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_tensor(const Tensor<float>& tensor);
Tensor<float> decode_tensor(std::span<const std::uint8_t> bytes);

}  // namespace fmn
