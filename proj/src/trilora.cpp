#include "h2tune/trilora.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <fmt/format.h>

#include "h2tune/errors.hpp"

namespace h2tune {

void ResourceDescriptor::validate() const {
  if (!(sparsity_ratio >= 0.0 && sparsity_ratio <= 1.0)) {
    throw ConfigError(fmt::format("sparsity ratio {} outside [0, 1]", sparsity_ratio));
  }
  if (declared_rank < 1) {
    throw ConfigError(fmt::format("declared rank {} must be positive", declared_rank));
  }
}

int mask_budget(int rank, double beta) {
  return static_cast<int>(std::lround(beta * static_cast<double>(rank) * rank));
}

Matrix TriLoraLayer::core() const {
  const int r = rank();
  return Matrix::Identity(r, r) + mask.cwiseProduct(R);
}

void TriLoraLayer::validate() const {
  const auto a = base_weight.rows();
  const auto b = base_weight.cols();
  const auto r = R.rows();
  if (r < 1 || R.cols() != r) throw ShapeError(fmt::format("R must be square, got {}x{}", r, R.cols()));
  if (r > std::min(a, b)) {
    throw ConfigError(fmt::format("rank {} exceeds min({}, {})", r, a, b));
  }
  if (A.rows() != a || A.cols() != r) throw ShapeError(fmt::format("A is {}x{}, expected {}x{}", A.rows(), A.cols(), a, r));
  if (B.rows() != r || B.cols() != b) throw ShapeError(fmt::format("B is {}x{}, expected {}x{}", B.rows(), B.cols(), r, b));
  if (mask.rows() != r || mask.cols() != r) throw ShapeError("mask shape differs from R");
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    const double m = mask.data()[i];
    if (m != 0.0 && m != 1.0) throw ConfigError(fmt::format("mask entry {} is not binary", m));
  }
}

TriLoraLayer init_trilora(int in_dim, int out_dim, int rank, double beta, std::uint64_t seed) {
  if (in_dim < 1 || out_dim < 1) {
    throw ConfigError(fmt::format("layer dims must be positive, got {}x{}", in_dim, out_dim));
  }
  if (rank < 1 || rank > std::min(in_dim, out_dim)) {
    throw ConfigError(fmt::format("rank {} must lie in [1, min({}, {})]", rank, in_dim, out_dim));
  }
  if (!(beta >= 0.0 && beta <= 1.0)) {
    throw ConfigError(fmt::format("sparsity ratio {} outside [0, 1]", beta));
  }

  TriLoraLayer layer;
  layer.base_weight = Matrix::Zero(in_dim, out_dim);
  layer.A = indexed_gaussian(in_dim, rank, derive_seed({seed, 0xa}), 1.0 / std::sqrt(static_cast<double>(rank)));
  layer.B = Matrix::Zero(rank, out_dim);
  layer.R = Matrix::Zero(rank, rank);
  layer.mask = Matrix::Zero(rank, rank);

  std::mt19937_64 rng(derive_seed({seed, 0x3a5c}));
  // Partial Fisher-Yates over the row-major cell indices.
  const int cells = rank * rank;
  const int ones = mask_budget(rank, beta);
  std::vector<int> order(static_cast<std::size_t>(cells));
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < ones; ++i) {
    std::uniform_int_distribution<int> pick(i, cells - 1);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
    const int cell = order[static_cast<std::size_t>(i)];
    layer.mask(cell / rank, cell % rank) = 1.0;
  }
  return layer;
}

Matrix delta_matrix(const TriLoraLayer& layer) { return layer.A * layer.core() * layer.B; }

namespace {

void require_finite(const Matrix& x) {
  if (!x.allFinite()) throw NumericError("input", "non-finite input to apply_delta");
}

}  // namespace

Matrix apply_delta(const TriLoraLayer& layer, const Matrix& x) {
  if (x.cols() != layer.in_dim()) {
    throw ShapeError(fmt::format("input width {} != layer in_dim {}", x.cols(), layer.in_dim()));
  }
  require_finite(x);
  const Matrix u = x * layer.A;
  return x * layer.base_weight + (u * layer.core()) * layer.B;
}

RowVector apply_delta(const TriLoraLayer& layer, const RowVector& x) {
  const Matrix out = apply_delta(layer, Matrix(x));
  return out.row(0);
}

}  // namespace h2tune
