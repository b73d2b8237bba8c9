#include "seriex/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include "seriex/packed.hpp"

namespace seriex {

namespace {

template <typename T>
void store_le(std::uint8_t* dst, T value) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  std::memcpy(dst, bytes, sizeof(T));
}

template <typename T>
T load_le(const std::uint8_t* src) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, src, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

template <typename T, typename Src>
std::vector<std::uint8_t> encode(std::span<const Src> values) {
  std::vector<std::uint8_t> out(values.size() * sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) store_le<T>(out.data() + i * sizeof(T), static_cast<T>(values[i]));
  return out;
}

}  // namespace

std::string_view dtype_name(DType dtype) noexcept {
  switch (dtype) {
    case DType::Float64: return "float64";
    case DType::Float32: return "float32";
    case DType::Int32: return "int32";
    case DType::PackedInt2: return "packed-int2";
    case DType::PackedInt4: return "packed-int4";
    case DType::PackedInt8: return "packed-int8";
  }
  return "unknown";
}

DType dtype_from_name(std::string_view name) {
  for (DType d : {DType::Float64, DType::Float32, DType::Int32, DType::PackedInt2, DType::PackedInt4,
                  DType::PackedInt8}) {
    if (dtype_name(d) == name) return d;
  }
  fail(ErrorKind::Unsupported, "unsupported dtype '" + std::string(name) + "'");
}

bool is_packed(DType dtype) noexcept { return packed_bits(dtype) != 0; }

int packed_bits(DType dtype) noexcept {
  switch (dtype) {
    case DType::PackedInt2: return 2;
    case DType::PackedInt4: return 4;
    case DType::PackedInt8: return 8;
    default: return 0;
  }
}

DType packed_dtype(int bits) {
  switch (bits) {
    case 2: return DType::PackedInt2;
    case 4: return DType::PackedInt4;
    case 8: return DType::PackedInt8;
    default: fail(ErrorKind::Unsupported, "no packed dtype for " + std::to_string(bits) + " bits");
  }
}

std::size_t element_count(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::size_t payload_size(DType dtype, std::size_t elements) noexcept {
  switch (dtype) {
    case DType::Float64: return elements * 8;
    case DType::Float32:
    case DType::Int32: return elements * 4;
    default: return (elements * static_cast<std::size_t>(packed_bits(dtype)) + 7) / 8;
  }
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) t(c, r) = m(r, c);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols == b.rows, ErrorKind::ShapeMismatch,
          "matmul: inner dimensions differ (" + std::to_string(a.cols) + " vs " + std::to_string(b.rows) + ")");
  Matrix out(a.rows, b.cols);
  for (std::size_t r = 0; r < a.rows; ++r)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double av = a(r, k);
      for (std::size_t c = 0; c < b.cols; ++c) out(r, c) += av * b(k, c);
    }
  return out;
}

double max_abs(std::span<const double> v) noexcept {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::ShapeMismatch, "max_abs_diff: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

Tensor::Tensor(Shape shape, DType dtype, std::vector<std::uint8_t> payload, std::optional<std::size_t> channel_axis)
    : shape_(std::move(shape)), dtype_(dtype), payload_(std::move(payload)), channel_axis_(channel_axis) {
  const auto expected = payload_size(dtype_, element_count(shape_));
  require(payload_.size() == expected, ErrorKind::Format,
          "tensor payload is " + std::to_string(payload_.size()) + " bytes, expected " + std::to_string(expected));
  if (channel_axis_) {
    require(*channel_axis_ < shape_.size(), ErrorKind::InvalidArgument,
            "channel_axis " + std::to_string(*channel_axis_) + " is not an axis of " + shape_string(shape_));
  }
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  const auto n = payload_size(dtype, element_count(shape));
  return Tensor(std::move(shape), dtype, std::vector<std::uint8_t>(n, 0));
}

Tensor Tensor::from_f64(Shape shape, std::span<const double> values) {
  require(values.size() == element_count(shape), ErrorKind::ShapeMismatch, "from_f64: value count mismatch");
  return Tensor(std::move(shape), DType::Float64, encode<double>(values));
}

Tensor Tensor::from_f32(Shape shape, std::span<const float> values) {
  require(values.size() == element_count(shape), ErrorKind::ShapeMismatch, "from_f32: value count mismatch");
  return Tensor(std::move(shape), DType::Float32, encode<float>(values));
}

Tensor Tensor::from_i32(Shape shape, std::span<const std::int32_t> values) {
  require(values.size() == element_count(shape), ErrorKind::ShapeMismatch, "from_i32: value count mismatch");
  return Tensor(std::move(shape), DType::Int32, encode<std::int32_t>(values));
}

Tensor Tensor::from_packed(Shape shape, std::span<const std::int32_t> values, int bits) {
  require(values.size() == element_count(shape), ErrorKind::ShapeMismatch, "from_packed: value count mismatch");
  return Tensor(std::move(shape), packed_dtype(bits), pack_bits(values, bits));
}

Tensor Tensor::from_matrix(const Matrix& m) { return from_f64({m.rows, m.cols}, m.data); }

Tensor Tensor::with_channel_axis(std::optional<std::size_t> axis) const {
  return Tensor(shape_, dtype_, payload_, axis);
}

Tensor Tensor::reshaped(Shape shape) const {
  require(element_count(shape) == size(), ErrorKind::ShapeMismatch,
          "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  return Tensor(std::move(shape), dtype_, payload_);
}

std::vector<double> Tensor::to_f64() const {
  const std::size_t n = size();
  std::vector<double> out(n);
  switch (dtype_) {
    case DType::Float64:
      for (std::size_t i = 0; i < n; ++i) out[i] = load_le<double>(payload_.data() + 8 * i);
      break;
    case DType::Float32:
      for (std::size_t i = 0; i < n; ++i) out[i] = load_le<float>(payload_.data() + 4 * i);
      break;
    default: {
      const auto ints = to_i32();
      std::copy(ints.begin(), ints.end(), out.begin());
    }
  }
  return out;
}

std::vector<std::int32_t> Tensor::to_i32() const {
  const std::size_t n = size();
  if (dtype_ == DType::Int32) {
    std::vector<std::int32_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = load_le<std::int32_t>(payload_.data() + 4 * i);
    return out;
  }
  require(is_packed(dtype_), ErrorKind::InvalidArgument,
          "to_i32 on non-integer dtype " + std::string(dtype_name(dtype_)));
  return unpack_bits(payload_, n, packed_bits(dtype_));
}

Matrix Tensor::to_matrix() const {
  require(rank() >= 1, ErrorKind::ShapeMismatch, "to_matrix on a scalar tensor");
  const std::size_t rows = shape_[0];
  const std::size_t cols = rows == 0 ? 0 : size() / rows;
  return Matrix(rows, cols, to_f64());
}

}  // namespace seriex
