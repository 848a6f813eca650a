#pragma once

#include <vector>

#include "h2tune/linalg.hpp"

namespace h2tune {

// An ordered stack of L square r x r task-shared matrices.
class SharedStack {
 public:
  SharedStack() = default;
  explicit SharedStack(std::vector<Matrix> layers);

  static SharedStack zeros(int depth, int rank);

  int depth() const { return static_cast<int>(layers_.size()); }
  int rank() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().rows()); }

  const Matrix& operator[](int l) const { return layers_[static_cast<std::size_t>(l)]; }
  Matrix& operator[](int l) { return layers_[static_cast<std::size_t>(l)]; }
  const std::vector<Matrix>& layers() const { return layers_; }

  SharedStack& operator+=(const SharedStack& other);
  SharedStack& operator-=(const SharedStack& other);
  SharedStack& operator*=(double s);

  // Sum of squared entries over every layer.
  double squared_norm() const;

  bool same_shape(const SharedStack& other) const {
    return depth() == other.depth() && rank() == other.rank();
  }

 private:
  std::vector<Matrix> layers_;
};

SharedStack operator+(SharedStack a, const SharedStack& b);
SharedStack operator-(SharedStack a, const SharedStack& b);
SharedStack operator*(double s, SharedStack a);

// Elementwise inner product summed over all layers.
double inner(const SharedStack& a, const SharedStack& b);

bool bit_equal(const SharedStack& a, const SharedStack& b);

// Trainable L_k x L_g map from a client's layers to global layer slots.
struct RelationMatrix {
  Matrix omega;

  int local_depth() const { return static_cast<int>(omega.rows()); }
  int global_depth() const { return static_cast<int>(omega.cols()); }
};

// Output slot m = sum_l omega(l, m) * stack[l].
SharedStack to_global(const SharedStack& stack, const RelationMatrix& relation);

// Output layer l = sum_m omega(l, m) * global_stack[m]. Adjoint of to_global.
SharedStack to_local(const SharedStack& global_stack, const RelationMatrix& relation);

// One-hot interpolation: local layer l (0-based) maps to global slot
// round(l * (L_g - 1) / max(L_k - 1, 1)).
RelationMatrix init_relation(int local_depth, int global_depth);

}  // namespace h2tune
