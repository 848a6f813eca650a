#include "h2tune/client_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "h2tune/errors.hpp"

namespace h2tune {

Batch make_batch(const Dataset& data, const std::vector<int>& order, std::size_t begin, std::size_t end) {
  Batch b;
  b.x.resize(static_cast<Eigen::Index>(end - begin), data.x_train.cols());
  b.y.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    const int row = order[i];
    b.x.row(static_cast<Eigen::Index>(i - begin)) = data.x_train.row(row);
    b.y.push_back(data.y_train[static_cast<std::size_t>(row)]);
  }
  return b;
}

Batch full_batch(const Dataset& data) { return Batch{data.x_train, data.y_train}; }

namespace {

void check_finite(double v, const std::string& term) {
  if (!std::isfinite(v)) throw NumericError(term, fmt::format("non-finite {}", term));
}

void check_finite(const Matrix& m, const std::string& term) {
  if (!m.allFinite()) throw NumericError(term, fmt::format("non-finite {}", term));
}

void check_gradients_finite(const Gradients& g) {
  check_finite(g.loss.ce, "ce");
  check_finite(g.loss.kl_term, "kl_term");
  check_finite(g.loss.reg, "reg");
  check_finite(g.loss.total, "total");
  for (std::size_t l = 0; l < g.dA.size(); ++l) {
    check_finite(g.dA[l], fmt::format("grad_A[{}]", l));
    check_finite(g.dB[l], fmt::format("grad_B[{}]", l));
    check_finite(g.dR[l], fmt::format("grad_R[{}]", l));
  }
  check_finite(g.d_omega, "grad_omega");
}

// d mean CE / d logits.
Matrix ce_logit_grad(const Matrix& logits, const std::vector<int>& labels) {
  Matrix d(logits.rows(), logits.cols());
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    d.row(i) = inv_n * cross_entropy_grad(logits.row(i), labels[static_cast<std::size_t>(i)]);
  }
  return d;
}

Matrix omega_gradient(const SharedStack& d_reference, const SharedStack& global_stack) {
  Matrix d(d_reference.depth(), global_stack.depth());
  for (int l = 0; l < d_reference.depth(); ++l)
    for (int m = 0; m < global_stack.depth(); ++m) d(l, m) = d_reference[l].cwiseProduct(global_stack[m]).sum();
  return d;
}

double change_norm_shared(const ClientState& before, const ClientState& after) {
  double sq = (after.relation.omega - before.relation.omega).squaredNorm();
  for (int l = 0; l < before.model.depth(); ++l) sq += (after.model.layer(l).R - before.model.layer(l).R).squaredNorm();
  return std::sqrt(sq);
}

double change_norm_specific(const ClientState& before, const ClientState& after) {
  double sq = 0.0;
  for (int l = 0; l < before.model.depth(); ++l) {
    sq += (after.model.layer(l).A - before.model.layer(l).A).squaredNorm();
    sq += (after.model.layer(l).B - before.model.layer(l).B).squaredNorm();
  }
  return std::sqrt(sq);
}

void require_global_depth(const ClientState& state, const SharedStack& global_stack) {
  if (global_stack.depth() != state.relation.global_depth() || global_stack.rank() != state.model.rank()) {
    throw ShapeError(fmt::format("client {}: global stack {}x{} does not match relation width {} / rank {}",
                                 state.id, global_stack.depth(), global_stack.rank(),
                                 state.relation.global_depth(), state.model.rank()));
  }
}

}  // namespace

Gradients share_gradients(const ClientState& state, const SharedStack& global_stack, const Batch& batch) {
  require_global_depth(state, global_stack);
  const Hyperparameters& h = state.hyper;
  ForwardCache cache;
  Gradients g;
  g.logits = state.model.forward(batch.x, cache);
  const SharedStack local = state.model.shared_stack();
  const SharedStack reference = to_local(global_stack, state.relation);
  g.loss = loss_share(g.logits, batch.y, local, reference, h);

  LayerGradients lg = state.model.backward(cache, ce_logit_grad(g.logits, batch.y));
  const MatrixKlGradient kl = matrix_kl_grad(local, reference);
  g.dA = std::move(lg.dA);
  g.dB = std::move(lg.dB);
  g.dR = std::move(lg.dR);
  for (std::size_t l = 0; l < g.dR.size(); ++l) g.dR[l] += h.kl_weight * kl.d_local[static_cast<int>(l)];
  g.d_omega = h.kl_weight * omega_gradient(kl.d_reference, global_stack);
  return g;
}

Gradients specific_gradients(const ClientState& state, const Matrix& phase1_logits, const Batch& batch) {
  const Hyperparameters& h = state.hyper;
  ForwardCache cache;
  Gradients g;
  g.logits = state.model.forward(batch.x, cache);
  const std::vector<Matrix> As = state.model.A_all();
  const std::vector<Matrix> Bs = state.model.B_all();
  g.loss = loss_specific(g.logits, batch.y, phase1_logits, As, Bs, h);

  Matrix d_logits = ce_logit_grad(g.logits, batch.y);
  const double inv_n = 1.0 / static_cast<double>(g.logits.rows());
  for (Eigen::Index i = 0; i < g.logits.rows(); ++i) {
    // The clamped KL contributes no gradient once it saturates.
    if (prediction_kl(g.logits.row(i), phase1_logits.row(i)) < h.divergence_clamp) {
      d_logits.row(i) -= h.divergence_weight * inv_n * prediction_kl_grad(g.logits.row(i), phase1_logits.row(i));
    }
  }
  LayerGradients lg = state.model.backward(cache, d_logits);
  g.dA = std::move(lg.dA);
  g.dB = std::move(lg.dB);
  g.dR = std::move(lg.dR);
  for (std::size_t l = 0; l < g.dA.size(); ++l) {
    g.dA[l] += h.weight_decay * As[l];
    g.dB[l] += h.weight_decay * Bs[l];
  }
  g.d_omega = Matrix::Zero(state.relation.local_depth(), state.relation.global_depth());
  return g;
}

Gradients joint_gradients(const ClientState& state, const SharedStack& global_stack, const Batch& batch) {
  Gradients g = share_gradients(state, global_stack, batch);
  const Hyperparameters& h = state.hyper;
  g.loss.reg = h.weight_decay * half_squared_norm(state.model.A_all(), state.model.B_all());
  g.loss.total += g.loss.reg;
  for (int l = 0; l < state.model.depth(); ++l) {
    g.dA[static_cast<std::size_t>(l)] += h.weight_decay * state.model.layer(l).A;
    g.dB[static_cast<std::size_t>(l)] += h.weight_decay * state.model.layer(l).B;
  }
  return g;
}

ShareStepResult phase_share_step(ClientState& state, const SharedStack& global_stack, const Batch& batch) {
  const Gradients g = share_gradients(state, global_stack, batch);
  check_gradients_finite(g);
  const double step = state.hyper.eta_shared;
  const ClientState before = state;
  for (int l = 0; l < state.model.depth(); ++l) {
    TriLoraLayer& layer = state.model.layer(l);
    layer.R -= step * layer.mask.cwiseProduct(g.dR[static_cast<std::size_t>(l)]);
  }
  state.relation.omega -= step * g.d_omega;

  ShareStepResult out;
  out.report.loss = g.loss;
  out.report.shared_change = change_norm_shared(before, state);
  out.report.samples = batch.size();
  out.phase1_logits = state.model.forward(batch.x);
  return out;
}

PhaseReport phase_specific_step(ClientState& state, const Matrix& phase1_logits, const Batch& batch) {
  const Gradients g = specific_gradients(state, phase1_logits, batch);
  check_gradients_finite(g);
  const double step = state.hyper.eta;
  const ClientState before = state;
  for (int l = 0; l < state.model.depth(); ++l) {
    TriLoraLayer& layer = state.model.layer(l);
    layer.A -= step * g.dA[static_cast<std::size_t>(l)];
    layer.B -= step * g.dB[static_cast<std::size_t>(l)];
  }
  PhaseReport report;
  report.loss = g.loss;
  report.specific_change = change_norm_specific(before, state);
  report.samples = batch.size();
  return report;
}

PhaseReport joint_step(ClientState& state, const SharedStack& global_stack, const Batch& batch) {
  const Gradients g = joint_gradients(state, global_stack, batch);
  check_gradients_finite(g);
  const ClientState before = state;
  for (int l = 0; l < state.model.depth(); ++l) {
    TriLoraLayer& layer = state.model.layer(l);
    const auto i = static_cast<std::size_t>(l);
    layer.A -= state.hyper.eta * g.dA[i];
    layer.B -= state.hyper.eta * g.dB[i];
    layer.R -= state.hyper.eta_shared * layer.mask.cwiseProduct(g.dR[i]);
  }
  state.relation.omega -= state.hyper.eta_shared * g.d_omega;
  PhaseReport report;
  report.loss = g.loss;
  report.shared_change = change_norm_shared(before, state);
  report.specific_change = change_norm_specific(before, state);
  report.samples = batch.size();
  return report;
}

double ProximalProblem::objective(const SharedStack& R) const {
  const SharedStack diff = R - anchor;
  double value = inner(linear, R) + diff.squared_norm() / eta_shared;
  if (kl_weight != 0.0) value += kl_weight * matrix_kl(R, reference);
  return value;
}

SharedStack ProximalProblem::gradient(const SharedStack& R) const {
  SharedStack g = linear + (2.0 / eta_shared) * (R - anchor);
  if (kl_weight != 0.0) g += kl_weight * matrix_kl_grad(R, reference).d_local;
  for (int l = 0; l < g.depth(); ++l) g[l] = mask[l].cwiseProduct(g[l]);
  return g;
}

SharedStack solve_proximal(const ProximalProblem& problem, int inner_steps) {
  if (inner_steps < 1) throw ConfigError("proximal solve needs at least one inner step");
  if (!(problem.eta_shared > 0.0)) throw ConfigError("proximal solve needs eta_shared > 0");
  // Exact minimizer of the quadratic part in one step; halved on overshoot.
  const double initial_step = 1.0 / (2.0 / problem.eta_shared + problem.kl_weight);
  const double start_value = problem.objective(problem.anchor);

  SharedStack R = problem.anchor;
  double value = start_value;
  for (int it = 0; it < inner_steps; ++it) {
    const SharedStack g = problem.gradient(R);
    if (g.squared_norm() == 0.0) break;
    double step = initial_step;
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving, step *= 0.5) {
      SharedStack candidate = R - step * g;
      const double candidate_value = problem.objective(candidate);
      if (candidate_value <= value) {
        R = std::move(candidate);
        value = candidate_value;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }
  if (!(value <= start_value)) {
    throw SolverError(fmt::format("proximal objective rose from {} to {}", start_value, value));
  }
  return R;
}

ShareStepResult proximal_share_step(ClientState& state, const SharedStack& global_stack,
                                    const Batch& batch, int inner_steps) {
  const Gradients g = share_gradients(state, global_stack, batch);
  check_gradients_finite(g);

  // Forward-path (cross-entropy) gradient only; the KL enters the proximal objective.
  ForwardCache cache;
  const Matrix logits = state.model.forward(batch.x, cache);
  LayerGradients ce = state.model.backward(cache, ce_logit_grad(logits, batch.y));

  ProximalProblem problem;
  problem.linear = SharedStack(std::move(ce.dR));
  problem.reference = to_local(global_stack, state.relation);
  problem.anchor = state.model.shared_stack();
  std::vector<Matrix> masks;
  for (const TriLoraLayer& layer : state.model.layers()) masks.push_back(layer.mask);
  problem.mask = SharedStack(std::move(masks));
  problem.kl_weight = state.hyper.kl_weight;
  problem.eta_shared = state.hyper.eta_shared;

  const ClientState before = state;
  state.model.set_shared_stack(solve_proximal(problem, inner_steps));
  state.relation.omega -= state.hyper.eta_shared * g.d_omega;

  ShareStepResult out;
  out.report.loss = g.loss;
  out.report.shared_change = change_norm_shared(before, state);
  out.report.samples = batch.size();
  out.phase1_logits = state.model.forward(batch.x);
  return out;
}

LocalRoundResult local_round(ClientState& state, const SharedStack& global_stack, int epochs,
                             int round_index, const TrainingMode& mode, const PhaseObserver& observer) {
  if (epochs < 1) throw ConfigError("local round needs at least one epoch");
  require_global_depth(state, global_stack);
  const Dataset& data = *state.data;
  const auto n = static_cast<std::size_t>(data.x_train.rows());
  const auto batch_size = static_cast<std::size_t>(state.hyper.batch_size);

  LocalRoundResult result;
  result.steps_per_epoch = static_cast<int>((n + batch_size - 1) / batch_size);
  int steps = 0;

  auto observe = [&](PhaseKind kind, const ClientState& before) {
    if (observer) observer(kind, before, state);
  };

  std::vector<int> order(n);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    result.epoch_stacks.push_back(state.model.shared_stack());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed({state.seed, static_cast<std::uint64_t>(round_index),
                                     static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), rng);

    for (std::size_t begin = 0; begin < n; begin += batch_size) {
      const Batch batch = make_batch(data, order, begin, std::min(n, begin + batch_size));
      const bool last_step = epoch + 1 == epochs && begin + batch_size >= n;
      std::optional<ClientState> before;

      if (!mode.disentangle) {
        if (observer) before = state;
        const PhaseReport r = joint_step(state, global_stack, batch);
        if (before) observe(PhaseKind::kJoint, *before);
        result.share_loss += r.loss.total;
        result.specific_loss += r.loss.total;
      } else {
        if (observer) before = state;
        const ShareStepResult share = mode.proximal && last_step
                                          ? proximal_share_step(state, global_stack, batch, mode.proximal_inner_steps)
                                          : phase_share_step(state, global_stack, batch);
        if (before) observe(PhaseKind::kShare, *before);

        if (observer) before = state;
        const PhaseReport specific = phase_specific_step(state, share.phase1_logits, batch);
        if (before) observe(PhaseKind::kSpecific, *before);

        result.share_loss += share.report.loss.total;
        result.specific_loss += specific.loss.total;
      }
      ++steps;
    }
  }
  result.epoch_stacks.push_back(state.model.shared_stack());
  if (steps > 0) {
    result.share_loss /= steps;
    result.specific_loss /= steps;
  }
  result.upload = to_global(state.model.shared_stack(), state.relation);
  return result;
}

namespace {

std::vector<double*> all_parameters(ClientState& state) {
  std::vector<double*> out;
  auto add = [&](Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) out.push_back(m.data() + i);
  };
  for (int l = 0; l < state.model.depth(); ++l) {
    TriLoraLayer& layer = state.model.layer(l);
    add(layer.A);
    add(layer.B);
    add(layer.R);
  }
  add(state.relation.omega);
  return out;
}

// Same ordering as all_parameters.
std::vector<double> flatten_gradients(const Gradients& g) {
  std::vector<double> out;
  auto add = [&](const Matrix& m) { out.insert(out.end(), m.data(), m.data() + m.size()); };
  for (std::size_t l = 0; l < g.dA.size(); ++l) {
    add(g.dA[l]);
    add(g.dB[l]);
    add(g.dR[l]);
  }
  add(g.d_omega);
  return out;
}

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

}  // namespace

double check_gradients(const ClientState& state, const SharedStack& global_stack, const Batch& batch,
                       const std::optional<Matrix>& phase1_logits, double fd_step) {
  const Matrix y_prime = phase1_logits ? *phase1_logits : state.model.forward(batch.x);

  auto share_value = [&](const ClientState& s) {
    return loss_share(s.model.forward(batch.x), batch.y, s.model.shared_stack(),
                      to_local(global_stack, s.relation), s.hyper)
        .total;
  };
  auto specific_value = [&](const ClientState& s) {
    return loss_specific(s.model.forward(batch.x), batch.y, y_prime, s.model.A_all(), s.model.B_all(), s.hyper)
        .total;
  };

  const std::vector<double> analytic_share = flatten_gradients(share_gradients(state, global_stack, batch));
  const std::vector<double> analytic_specific = flatten_gradients(specific_gradients(state, y_prime, batch));

  ClientState probe = state;
  const std::vector<double*> params = all_parameters(probe);
  std::vector<double> numeric_share(params.size());
  std::vector<double> numeric_specific(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = *params[i];
    *params[i] = saved + fd_step;
    const double share_plus = share_value(probe);
    const double specific_plus = specific_value(probe);
    *params[i] = saved - fd_step;
    const double share_minus = share_value(probe);
    const double specific_minus = specific_value(probe);
    *params[i] = saved;
    numeric_share[i] = (share_plus - share_minus) / (2.0 * fd_step);
    numeric_specific[i] = (specific_plus - specific_minus) / (2.0 * fd_step);
  }
  return std::max(relative_error(analytic_share, numeric_share),
                  relative_error(analytic_specific, numeric_specific));
}

}  // namespace h2tune
