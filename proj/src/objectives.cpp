#include "h2tune/objectives.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "h2tune/errors.hpp"

namespace h2tune {

void Hyperparameters::validate() const {
  if (!(eta >= 0.0) || !(eta_shared >= 0.0)) {
    throw ConfigError("learning rates must be non-negative");
  }
  if (epochs < 1 || rounds < 0) throw ConfigError("epochs must be >= 1 and rounds >= 0");
  if (!(weight_decay >= 0.0) || !(kl_weight >= 0.0) || !(divergence_weight >= 0.0)) {
    throw ConfigError("weight_decay, kl_weight and divergence_weight must be >= 0");
  }
  if (!(divergence_clamp > 0.0)) throw ConfigError("divergence_clamp must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

namespace {

// log sum exp(v) = max + log1p(sum of the other exp(v_i - max)). The log1p tail
// stays accurate when one logit dominates.
struct LogSumExp {
  double max;
  double tail;
};

LogSumExp log_sum_exp_parts(const RowVector& v) {
  Eigen::Index top = 0;
  const double m = v.maxCoeff(&top);
  double rest = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (i != top) rest += std::exp(v(i) - m);
  return {m, std::log1p(rest)};
}

double log_sum_exp(const RowVector& v) {
  const LogSumExp parts = log_sum_exp_parts(v);
  return parts.max + parts.tail;
}

void require_finite(const RowVector& v, const char* term) {
  if (!v.allFinite()) throw NumericError(term, fmt::format("non-finite {}", term));
}

double kl_from_logits(const RowVector& p, const RowVector& q) {
  const RowVector lp = log_softmax(p);
  const RowVector lq = log_softmax(q);
  const double kl = (lp.array().exp() * (lp - lq).array()).sum();
  // Rounding can leave a tiny negative value when p and q coincide.
  return std::max(kl, 0.0);
}

RowVector kl_grad_p(const RowVector& p, const RowVector& q) {
  const RowVector lp = log_softmax(p);
  const RowVector lq = log_softmax(q);
  const RowVector prob = lp.array().exp();
  const double kl = (prob.array() * (lp - lq).array()).sum();
  return prob.array() * ((lp - lq).array() - kl);
}

RowVector flatten(const Matrix& m) {
  // Row-major flattening; the KL is invariant to the order anyway.
  RowVector out(m.size());
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(k++) = m(i, j);
  return out;
}

Matrix unflatten(const RowVector& v, Eigen::Index rows, Eigen::Index cols) {
  Matrix out(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = v(k++);
  return out;
}

void require_same_stacks(const SharedStack& a, const SharedStack& b) {
  if (!a.same_shape(b) || a.depth() == 0) {
    throw ShapeError(fmt::format("matrix_kl needs equal non-empty stacks, got {}x{} and {}x{}",
                                 a.depth(), a.rank(), b.depth(), b.rank()));
  }
}

}  // namespace

RowVector softmax(const RowVector& logits) {
  return (logits.array() - log_sum_exp(logits)).exp();
}

RowVector log_softmax(const RowVector& logits) {
  return logits.array() - log_sum_exp(logits);
}

double cross_entropy(const RowVector& logits, int label) {
  if (logits.size() < 2) throw ShapeError("cross_entropy needs at least two classes");
  if (label < 0 || label >= logits.size()) {
    throw NumericError("label", fmt::format("label {} outside [0, {})", label, logits.size()));
  }
  require_finite(logits, "logits");
  const LogSumExp parts = log_sum_exp_parts(logits);
  return std::max((parts.max - logits(label)) + parts.tail, 0.0);
}

RowVector cross_entropy_grad(const RowVector& logits, int label) {
  RowVector g = softmax(logits);
  g(label) -= 1.0;
  return g;
}

double prediction_kl(const RowVector& p_logits, const RowVector& q_logits) {
  if (p_logits.size() != q_logits.size()) throw ShapeError("prediction_kl length mismatch");
  require_finite(p_logits, "logits");
  require_finite(q_logits, "reference logits");
  return kl_from_logits(p_logits, q_logits);
}

RowVector prediction_kl_grad(const RowVector& p_logits, const RowVector& q_logits) {
  return kl_grad_p(p_logits, q_logits);
}

double matrix_kl(const SharedStack& local, const SharedStack& reference) {
  require_same_stacks(local, reference);
  double total = 0.0;
  for (int l = 0; l < local.depth(); ++l) {
    total += kl_from_logits(flatten(local[l]), flatten(reference[l]));
  }
  return total / local.depth();
}

MatrixKlGradient matrix_kl_grad(const SharedStack& local, const SharedStack& reference) {
  require_same_stacks(local, reference);
  const int L = local.depth();
  const int r = local.rank();
  MatrixKlGradient g{SharedStack::zeros(L, r), SharedStack::zeros(L, r)};
  const double scale = 1.0 / L;
  for (int l = 0; l < L; ++l) {
    const RowVector p = flatten(local[l]);
    const RowVector q = flatten(reference[l]);
    g.d_local[l] = scale * unflatten(kl_grad_p(p, q), r, r);
    // d KL(p||q) / d q_logits = softmax(q) - softmax(p).
    g.d_reference[l] = scale * unflatten(softmax(q) - softmax(p), r, r);
  }
  return g;
}

double half_squared_norm(std::span<const Matrix> A_all, std::span<const Matrix> B_all) {
  double total = 0.0;
  for (const Matrix& a : A_all) total += a.squaredNorm();
  for (const Matrix& b : B_all) total += b.squaredNorm();
  return 0.5 * total;
}

LossBreakdown loss_share(const RowVector& logits, int label, const SharedStack& local_R,
                         const SharedStack& ref_R, const Hyperparameters& h) {
  LossBreakdown out;
  out.ce = cross_entropy(logits, label);
  out.kl_term = matrix_kl(local_R, ref_R);
  out.total = out.ce + h.kl_weight * out.kl_term;
  return out;
}

LossBreakdown loss_specific(const RowVector& logits, int label, const RowVector& phase1_logits,
                            std::span<const Matrix> A_all, std::span<const Matrix> B_all,
                            const Hyperparameters& h) {
  LossBreakdown out;
  out.ce = cross_entropy(logits, label);
  out.kl_term = std::min(prediction_kl(logits, phase1_logits), h.divergence_clamp);
  out.reg = h.weight_decay * half_squared_norm(A_all, B_all);
  out.total = out.ce - h.divergence_weight * out.kl_term + out.reg;
  return out;
}

LossBreakdown loss_share(const Matrix& logits, std::span<const int> labels,
                         const SharedStack& local_R, const SharedStack& ref_R,
                         const Hyperparameters& h) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size() || labels.empty()) {
    throw ShapeError("logits rows must match a non-empty label list");
  }
  LossBreakdown out;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    out.ce += cross_entropy(logits.row(i), labels[static_cast<std::size_t>(i)]);
  }
  out.ce /= static_cast<double>(logits.rows());
  out.kl_term = matrix_kl(local_R, ref_R);
  out.total = out.ce + h.kl_weight * out.kl_term;
  return out;
}

LossBreakdown loss_specific(const Matrix& logits, std::span<const int> labels,
                            const Matrix& phase1_logits, std::span<const Matrix> A_all,
                            std::span<const Matrix> B_all, const Hyperparameters& h) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size() || labels.empty() ||
      phase1_logits.rows() != logits.rows() || phase1_logits.cols() != logits.cols()) {
    throw ShapeError("logits, phase-1 logits and labels must agree in length");
  }
  LossBreakdown out;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    out.ce += cross_entropy(logits.row(i), labels[static_cast<std::size_t>(i)]);
    out.kl_term +=
        std::min(prediction_kl(logits.row(i), phase1_logits.row(i)), h.divergence_clamp);
  }
  const double n = static_cast<double>(logits.rows());
  out.ce /= n;
  out.kl_term /= n;
  out.reg = h.weight_decay * half_squared_norm(A_all, B_all);
  out.total = out.ce - h.divergence_weight * out.kl_term + out.reg;
  return out;
}

}  // namespace h2tune
