#include "h2tune/serialization.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <limits>

#include <fmt/format.h>

#include "h2tune/errors.hpp"

namespace h2tune {

namespace {

constexpr std::uint8_t kMagic[4] = {'H', '2', 'T', 'N'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

double get_f64(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[at + static_cast<std::size_t>(i)]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

std::size_t serialized_size(int depth, int rank) {
  return kStackHeaderBytes + 8 * static_cast<std::size_t>(depth) * static_cast<std::size_t>(rank) *
                                 static_cast<std::size_t>(rank);
}

std::vector<std::uint8_t> serialize_stack(const SharedStack& stack) {
  std::vector<std::uint8_t> out;
  out.reserve(serialized_size(stack.depth(), stack.rank()));
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(kStackFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(stack.depth()));
  put_u32(out, static_cast<std::uint32_t>(stack.rank()));
  for (const Matrix& m : stack.layers())
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(out, m(i, j));
  return out;
}

SharedStack deserialize_stack(std::span<const std::uint8_t> bytes) {
  for (std::size_t i = 0; i < 4; ++i) {
    if (i >= bytes.size()) throw FormatError(i, fmt::format("truncated magic at byte {}", i));
    if (bytes[i] != kMagic[i]) throw FormatError(i, fmt::format("bad magic at byte {}", i));
  }
  if (bytes.size() < 5) throw FormatError(4, "missing version byte");
  if (bytes[4] != kStackFormatVersion) {
    throw FormatError(4, fmt::format("unsupported version {}", static_cast<int>(bytes[4])));
  }
  if (bytes.size() < 9) throw FormatError(5, "truncated depth field");
  const std::uint32_t depth = get_u32(bytes, 5);
  if (depth == 0 || depth > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
    throw FormatError(5, fmt::format("invalid depth {}", depth));
  }
  if (bytes.size() < kStackHeaderBytes) throw FormatError(9, "truncated rank field");
  const std::uint32_t rank = get_u32(bytes, 9);
  if (rank == 0 || rank > 65535) throw FormatError(9, fmt::format("invalid rank {}", rank));

  const std::uint64_t count = static_cast<std::uint64_t>(depth) * rank * rank;
  const std::uint64_t available = (bytes.size() - kStackHeaderBytes) / 8;
  if (available < count) {
    throw FormatError(kStackHeaderBytes + 8 * available,
                      fmt::format("payload holds {} of {} values", available, count));
  }
  const std::size_t expected = kStackHeaderBytes + 8 * count;
  if (bytes.size() != expected) {
    throw FormatError(expected, fmt::format("{} trailing bytes", bytes.size() - expected));
  }

  std::vector<Matrix> layers;
  layers.reserve(depth);
  std::size_t at = kStackHeaderBytes;
  for (std::uint32_t l = 0; l < depth; ++l) {
    Matrix m(rank, rank);
    for (std::uint32_t i = 0; i < rank; ++i)
      for (std::uint32_t j = 0; j < rank; ++j, at += 8) m(i, j) = get_f64(bytes, at);
    layers.push_back(std::move(m));
  }
  return SharedStack(std::move(layers));
}

void write_stack_file(const std::filesystem::path& path, const SharedStack& stack) {
  const std::vector<std::uint8_t> bytes = serialize_stack(stack);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(fmt::format("cannot open {} for writing", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(fmt::format("failed writing {}", path.string()));
}

SharedStack read_stack_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open {}", path.string()));
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_stack(bytes);
}

}  // namespace h2tune
