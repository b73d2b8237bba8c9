#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "seriex/tensor.hpp"

namespace seriex {

/// Signed two's-complement fields of width `bits`, packed LSB-first: element i
/// occupies bits [bits*i mod 8, ...) of byte floor(bits*i / 8).
struct PackedIntMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bits = 8;
  std::vector<std::uint8_t> payload;

  std::int32_t at(std::size_t r, std::size_t c) const;
  std::vector<std::int32_t> unpack() const;
  Int32Matrix to_matrix() const;
  bool operator==(const PackedIntMatrix&) const = default;
};

constexpr std::int32_t packed_min(int bits) noexcept { return -(std::int32_t{1} << (bits - 1)); }
constexpr std::int32_t packed_max(int bits) noexcept { return (std::int32_t{1} << (bits - 1)) - 1; }

void check_packed_bits(int bits);

std::vector<std::uint8_t> pack_bits(std::span<const std::int32_t> values, int bits);
std::vector<std::int32_t> unpack_bits(std::span<const std::uint8_t> payload, std::size_t count, int bits);

PackedIntMatrix pack_int(std::span<const std::int32_t> values, int bits);
PackedIntMatrix pack_int(std::size_t rows, std::size_t cols, std::span<const std::int32_t> values, int bits);
PackedIntMatrix pack_int(const Int32Matrix& m, int bits);

}  // namespace seriex
