#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>

#include <Eigen/Dense>

namespace h2tune {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Bitwise equality, distinguishing -0.0 from 0.0 and comparing NaN payloads.
inline bool bit_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  if (a.size() == 0) return true;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

// SplitMix64 finalizer, used to derive independent sub-seeds from a master seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (std::uint64_t p : parts) h = mix_seed(h ^ mix_seed(p));
  return h;
}

// Standard normal value addressed by (seed, row, col). Matrices filled this way
// agree on their overlapping leading block regardless of their shape.
inline double indexed_normal(std::uint64_t seed, std::uint64_t row, std::uint64_t col) {
  const std::uint64_t h1 = derive_seed({seed, row, col, 1});
  const std::uint64_t h2 = derive_seed({seed, row, col, 2});
  // 53-bit uniforms in (0, 1].
  const double u1 = (static_cast<double>(h1 >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(h2 >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline Matrix indexed_gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      m(i, j) = scale * indexed_normal(seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j));
  return m;
}

}  // namespace h2tune
