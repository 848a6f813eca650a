#include "h2tune/alignment.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "h2tune/errors.hpp"

namespace h2tune {

SharedStack::SharedStack(std::vector<Matrix> layers) : layers_(std::move(layers)) {
  for (const Matrix& m : layers_) {
    if (m.rows() != m.cols() || m.rows() != layers_.front().rows()) {
      throw ShapeError("shared stack layers must be square with a common rank");
    }
  }
}

SharedStack SharedStack::zeros(int depth, int rank) {
  return SharedStack(std::vector<Matrix>(static_cast<std::size_t>(depth), Matrix::Zero(rank, rank)));
}

static void require_same_shape(const SharedStack& a, const SharedStack& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(fmt::format("stack shape mismatch: {}x{} vs {}x{}", a.depth(), a.rank(),
                                 b.depth(), b.rank()));
  }
}

SharedStack& SharedStack::operator+=(const SharedStack& other) {
  require_same_shape(*this, other);
  for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l] += other.layers_[l];
  return *this;
}

SharedStack& SharedStack::operator-=(const SharedStack& other) {
  require_same_shape(*this, other);
  for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l] -= other.layers_[l];
  return *this;
}

SharedStack& SharedStack::operator*=(double s) {
  for (Matrix& m : layers_) m *= s;
  return *this;
}

double SharedStack::squared_norm() const {
  double total = 0.0;
  for (const Matrix& m : layers_) total += m.squaredNorm();
  return total;
}

SharedStack operator+(SharedStack a, const SharedStack& b) { return a += b; }
SharedStack operator-(SharedStack a, const SharedStack& b) { return a -= b; }
SharedStack operator*(double s, SharedStack a) { return a *= s; }

double inner(const SharedStack& a, const SharedStack& b) {
  require_same_shape(a, b);
  double total = 0.0;
  for (int l = 0; l < a.depth(); ++l) total += a[l].cwiseProduct(b[l]).sum();
  return total;
}

bool bit_equal(const SharedStack& a, const SharedStack& b) {
  if (a.depth() != b.depth()) return false;
  for (int l = 0; l < a.depth(); ++l) {
    if (!bit_equal(a[l], b[l])) return false;
  }
  return true;
}

SharedStack to_global(const SharedStack& stack, const RelationMatrix& relation) {
  if (stack.depth() != relation.local_depth()) {
    throw ShapeError(fmt::format("stack depth {} != relation rows {}", stack.depth(),
                                 relation.local_depth()));
  }
  const int r = stack.rank();
  SharedStack out = SharedStack::zeros(relation.global_depth(), r);
  for (int m = 0; m < relation.global_depth(); ++m) {
    for (int l = 0; l < stack.depth(); ++l) out[m] += relation.omega(l, m) * stack[l];
  }
  return out;
}

SharedStack to_local(const SharedStack& global_stack, const RelationMatrix& relation) {
  if (global_stack.depth() != relation.global_depth()) {
    throw ShapeError(fmt::format("global stack depth {} != relation columns {}",
                                 global_stack.depth(), relation.global_depth()));
  }
  const int r = global_stack.rank();
  SharedStack out = SharedStack::zeros(relation.local_depth(), r);
  for (int l = 0; l < relation.local_depth(); ++l) {
    for (int m = 0; m < global_stack.depth(); ++m) out[l] += relation.omega(l, m) * global_stack[m];
  }
  return out;
}

RelationMatrix init_relation(int local_depth, int global_depth) {
  if (local_depth < 1 || global_depth < 1) {
    throw ConfigError(fmt::format("depths must be positive, got {} and {}", local_depth, global_depth));
  }
  if (local_depth > global_depth) {
    throw ConfigError(fmt::format("local depth {} exceeds global depth {}", local_depth, global_depth));
  }
  RelationMatrix rel{Matrix::Zero(local_depth, global_depth)};
  const double denom = static_cast<double>(std::max(local_depth - 1, 1));
  for (int l = 0; l < local_depth; ++l) {
    const auto m = std::lround(static_cast<double>(l) * (global_depth - 1) / denom);
    rel.omega(l, static_cast<Eigen::Index>(m)) = 1.0;
  }
  return rel;
}

}  // namespace h2tune
