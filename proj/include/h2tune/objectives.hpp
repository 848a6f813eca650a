#pragma once

#include <span>
#include <vector>

#include "h2tune/alignment.hpp"
#include "h2tune/linalg.hpp"

namespace h2tune {

struct Hyperparameters {
  double eta = 0.05;          // task-specific (A, B) step
  double eta_shared = 0.05;   // task-shared (R, Omega) step
  int epochs = 1;             // tau
  int rounds = 1;             // T
  double weight_decay = 0.0;  // coefficient on (1/2)(|A|^2 + |B|^2)
  double kl_weight = 1.0;     // lambda on matrix_kl in the share loss
  double divergence_weight = 1.0;  // mu on KL(y'', y') in the specific loss
  double divergence_clamp = 10.0;  // per-sample cap on KL(y'', y')
  int batch_size = 16;

  void validate() const;
};

// Components of one loss evaluation. For the share loss `reg` is 0 and
// total = ce + lambda * kl_term; for the specific loss
// total = ce - mu * kl_term + reg, with kl_term already clamped.
struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double kl_term = 0.0;
  double reg = 0.0;
};

RowVector softmax(const RowVector& logits);
RowVector log_softmax(const RowVector& logits);

// -log softmax(logits)[label]. Throws NumericError on a bad label or non-finite logits.
double cross_entropy(const RowVector& logits, int label);

// d cross_entropy / d logits = softmax - onehot(label).
RowVector cross_entropy_grad(const RowVector& logits, int label);

// KL(softmax(p) || softmax(q)).
double prediction_kl(const RowVector& p_logits, const RowVector& q_logits);

// Gradient of prediction_kl with respect to p_logits.
RowVector prediction_kl_grad(const RowVector& p_logits, const RowVector& q_logits);

// Mean over layers of KL(softmax(vec(local_l)) || softmax(vec(reference_l))).
double matrix_kl(const SharedStack& local, const SharedStack& reference);

struct MatrixKlGradient {
  SharedStack d_local;
  SharedStack d_reference;
};

MatrixKlGradient matrix_kl_grad(const SharedStack& local, const SharedStack& reference);

// Single-sample share loss.
LossBreakdown loss_share(const RowVector& logits, int label, const SharedStack& local_R,
                         const SharedStack& ref_R, const Hyperparameters& h);

// Single-sample specific loss. `phase1_logits` is a constant.
LossBreakdown loss_specific(const RowVector& logits, int label, const RowVector& phase1_logits,
                            std::span<const Matrix> A_all, std::span<const Matrix> B_all,
                            const Hyperparameters& h);

// Batch forms: per-sample terms averaged over rows; matrix_kl and the weight
// penalty enter once per batch.
LossBreakdown loss_share(const Matrix& logits, std::span<const int> labels,
                         const SharedStack& local_R, const SharedStack& ref_R,
                         const Hyperparameters& h);
LossBreakdown loss_specific(const Matrix& logits, std::span<const int> labels,
                            const Matrix& phase1_logits, std::span<const Matrix> A_all,
                            std::span<const Matrix> B_all, const Hyperparameters& h);

// (1/2) sum of squared Frobenius norms over A_all and B_all.
double half_squared_norm(std::span<const Matrix> A_all, std::span<const Matrix> B_all);

}  // namespace h2tune
