#include "seriex/packed.hpp"

#include <string>

namespace seriex {

void check_packed_bits(int bits) {
  require(bits == 2 || bits == 4 || bits == 8, ErrorKind::Unsupported,
          "packed width must be 2, 4 or 8 bits, got " + std::to_string(bits));
}

std::vector<std::uint8_t> pack_bits(std::span<const std::int32_t> values, int bits) {
  check_packed_bits(bits);
  const auto lo = packed_min(bits);
  const auto hi = packed_max(bits);
  const std::uint32_t mask = (1u << bits) - 1u;
  std::vector<std::uint8_t> out(payload_size(packed_dtype(bits), values.size()), 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto v = values[i];
    if (v < lo || v > hi) {
      fail(ErrorKind::InvalidArgument, "value " + std::to_string(v) + " at index " + std::to_string(i) +
                                           " outside int" + std::to_string(bits) + " range");
    }
    const std::size_t bit = static_cast<std::size_t>(bits) * i;
    out[bit / 8] |= static_cast<std::uint8_t>((static_cast<std::uint32_t>(v) & mask) << (bit % 8));
  }
  return out;
}

std::vector<std::int32_t> unpack_bits(std::span<const std::uint8_t> payload, std::size_t count, int bits) {
  check_packed_bits(bits);
  require(payload.size() == payload_size(packed_dtype(bits), count), ErrorKind::Format,
          "packed payload length does not match element count");
  const std::uint32_t mask = (1u << bits) - 1u;
  const std::uint32_t sign = 1u << (bits - 1);
  std::vector<std::int32_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t bit = static_cast<std::size_t>(bits) * i;
    const std::uint32_t field = (static_cast<std::uint32_t>(payload[bit / 8]) >> (bit % 8)) & mask;
    // sign-extend
    out[i] = static_cast<std::int32_t>(field ^ sign) - static_cast<std::int32_t>(sign);
  }
  return out;
}

std::int32_t PackedIntMatrix::at(std::size_t r, std::size_t c) const {
  const std::size_t i = r * cols + c;
  const std::size_t bit = static_cast<std::size_t>(bits) * i;
  const std::uint32_t mask = (1u << bits) - 1u;
  const std::uint32_t sign = 1u << (bits - 1);
  const std::uint32_t field = (static_cast<std::uint32_t>(payload[bit / 8]) >> (bit % 8)) & mask;
  return static_cast<std::int32_t>(field ^ sign) - static_cast<std::int32_t>(sign);
}

std::vector<std::int32_t> PackedIntMatrix::unpack() const { return unpack_bits(payload, rows * cols, bits); }

Int32Matrix PackedIntMatrix::to_matrix() const { return Int32Matrix(rows, cols, unpack()); }

PackedIntMatrix pack_int(std::span<const std::int32_t> values, int bits) {
  return pack_int(1, values.size(), values, bits);
}

PackedIntMatrix pack_int(std::size_t rows, std::size_t cols, std::span<const std::int32_t> values, int bits) {
  require(rows * cols == values.size(), ErrorKind::ShapeMismatch, "pack_int: extents do not match value count");
  return PackedIntMatrix{rows, cols, bits, pack_bits(values, bits)};
}

PackedIntMatrix pack_int(const Int32Matrix& m, int bits) { return pack_int(m.rows, m.cols, m.data, bits); }

}  // namespace seriex
