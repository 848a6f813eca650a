#pragma once

#include <cstdint>

#include "h2tune/linalg.hpp"

namespace h2tune {

// Per-client resource budget. `sparsity_ratio` is the fraction of the r_g x r_g
// shared matrix that the client is allowed to train; `declared_rank` records the
// client's nominal local rank and is not used by the math.
struct ResourceDescriptor {
  double sparsity_ratio = 1.0;
  int declared_rank = 1;

  void validate() const;
};

// One fine-tuned layer: W = base + A (I + mask o R) B, with base frozen.
//
// A (a x r) and B (r x b) are task-specific; R (r x r) is the task-shared matrix
// exchanged with the server. `mask` holds exact 0.0/1.0 entries and is fixed at
// construction; R entries under a zero are never written by training.
struct TriLoraLayer {
  Matrix base_weight;
  Matrix A;
  Matrix B;
  Matrix R;
  Matrix mask;

  int in_dim() const { return static_cast<int>(base_weight.rows()); }
  int out_dim() const { return static_cast<int>(base_weight.cols()); }
  int rank() const { return static_cast<int>(R.rows()); }

  // I + mask o R.
  Matrix core() const;

  // Throws ConfigError/ShapeError when shapes disagree or the mask is not binary.
  void validate() const;
};

// Number of trainable R entries for a client with ratio `beta`: round(beta * r^2).
int mask_budget(int rank, double beta);

// A ~ N(0, 1/r), B = 0, R = 0, mask with exactly mask_budget(r, beta) ones at
// positions chosen uniformly without replacement. Base weight is zero; callers
// building a model install their own frozen base.
TriLoraLayer init_trilora(int in_dim, int out_dim, int rank, double beta, std::uint64_t seed);

// A (I + mask o R) B, materialized.
Matrix delta_matrix(const TriLoraLayer& layer);

// x base + ((x A)(I + mask o R)) B for a single row vector, without forming the delta.
RowVector apply_delta(const TriLoraLayer& layer, const RowVector& x);

// Batched form of apply_delta: one sample per row of `x`.
Matrix apply_delta(const TriLoraLayer& layer, const Matrix& x);

}  // namespace h2tune
