#include "fmn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fmn/binary_io.hpp"

namespace fmn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
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
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_to_string(shape_));
  }
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ContractError("item() requires a single-element tensor");
  return data_[0];
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), T{0});
  return grad_;
}

template <typename T>
void Tensor<T>::zero_grad() {
  grad_.assign(data_.size(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

namespace {
constexpr std::string_view kTensorMagic = "FMNT";
}

std::vector<std::uint8_t> encode_tensor(const Tensor<float>& tensor) {
  io::ByteWriter w;
  w.put_bytes(kTensorMagic);
  w.put_u32(static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) w.put_u32(static_cast<std::uint32_t>(d));
  for (float v : tensor.data()) w.put_f32(v);
  return w.take();
}

Tensor<float> decode_tensor(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "FMNT tensor");
  r.expect_magic(kTensorMagic);
  const std::uint32_t rank = r.get_u32();
  if (rank == 0 || rank > 8) throw ParseError("FMNT tensor: unsupported rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = r.get_u32();
  const std::size_t n = shape_numel(shape);
  if (n == 0 || r.remaining() != n * 4) throw ParseError("FMNT tensor: payload size does not match shape");
  std::vector<float> data(n);
  for (auto& v : data) v = r.get_f32();
  return Tensor<float>(std::move(shape), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor<float>& tensor) {
  io::write_file(path, encode_tensor(tensor));
}

Tensor<float> read_tensor(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_tensor(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace fmn
