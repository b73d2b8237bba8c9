#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "seriex/error.hpp"

namespace seriex {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { Float64, Float32, Int32, PackedInt2, PackedInt4, PackedInt8 };

std::string_view dtype_name(DType dtype) noexcept;
/// Throws ErrorKind::Unsupported for anything outside the dtype set.
DType dtype_from_name(std::string_view name);
bool is_packed(DType dtype) noexcept;
/// Field width for packed dtypes, 0 otherwise.
int packed_bits(DType dtype) noexcept;
DType packed_dtype(int bits);

std::size_t element_count(const Shape& shape) noexcept;
std::size_t payload_size(DType dtype, std::size_t elements) noexcept;
std::string shape_string(const Shape& shape);

/// Row-major dense matrix used by every compute kernel.
template <typename T>
struct MatrixT {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  MatrixT() = default;
  MatrixT(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}
  MatrixT(std::size_t r, std::size_t c, std::vector<T> values) : rows(r), cols(c), data(std::move(values)) {
    require(data.size() == r * c, ErrorKind::ShapeMismatch, "matrix payload does not match extents");
  }

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const noexcept { return data.size(); }
  bool operator==(const MatrixT&) const = default;
};

using Matrix = MatrixT<double>;
using Int32Matrix = MatrixT<std::int32_t>;
using Int64Matrix = MatrixT<std::int64_t>;

Matrix transpose(const Matrix& m);
Matrix matmul(const Matrix& a, const Matrix& b);
double max_abs(std::span<const double> v) noexcept;
double max_abs_diff(std::span<const double> a, std::span<const double> b);

/// N-dimensional value carrier. The payload is always stored little-endian, so
/// it is byte-for-byte what lands in an SQTF file.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, DType dtype, std::vector<std::uint8_t> payload,
         std::optional<std::size_t> channel_axis = std::nullopt);

  static Tensor zeros(Shape shape, DType dtype = DType::Float64);
  static Tensor from_f64(Shape shape, std::span<const double> values);
  static Tensor from_f32(Shape shape, std::span<const float> values);
  static Tensor from_i32(Shape shape, std::span<const std::int32_t> values);
  static Tensor from_packed(Shape shape, std::span<const std::int32_t> values, int bits);
  static Tensor from_matrix(const Matrix& m);

  const Shape& shape() const noexcept { return shape_; }
  DType dtype() const noexcept { return dtype_; }
  std::size_t size() const noexcept { return element_count(shape_); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::span<const std::uint8_t> payload() const noexcept { return payload_; }
  std::optional<std::size_t> channel_axis() const noexcept { return channel_axis_; }

  Tensor with_channel_axis(std::optional<std::size_t> axis) const;
  Tensor reshaped(Shape shape) const;

  /// Decodes any dtype into float64.
  std::vector<double> to_f64() const;
  /// Decodes int32 and packed dtypes; throws for float dtypes.
  std::vector<std::int32_t> to_i32() const;
  /// Views a rank-2 tensor (or any tensor as rows = dim0, cols = rest) as a matrix.
  Matrix to_matrix() const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  DType dtype_ = DType::Float64;
  std::vector<std::uint8_t> payload_;
  std::optional<std::size_t> channel_axis_;
};

}  // namespace seriex
