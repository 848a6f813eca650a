#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "h2tune/alignment.hpp"

namespace h2tune {

// Stack wire/checkpoint format, all integers and floats little-endian:
//
//   offset 0   4 bytes   magic "H2TN"
//   offset 4   1 byte    version (1)
//   offset 5   u32       depth L
//   offset 9   u32       rank r
//   offset 13  f64[L*r*r] layer-major, row-major within a layer
inline constexpr std::uint8_t kStackFormatVersion = 1;
inline constexpr std::size_t kStackHeaderBytes = 13;

std::size_t serialized_size(int depth, int rank);

std::vector<std::uint8_t> serialize_stack(const SharedStack& stack);

// Throws FormatError with the offset of the first byte that could not be decoded.
SharedStack deserialize_stack(std::span<const std::uint8_t> bytes);

void write_stack_file(const std::filesystem::path& path, const SharedStack& stack);
SharedStack read_stack_file(const std::filesystem::path& path);

}  // namespace h2tune
