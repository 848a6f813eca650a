#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "h2tune/alignment.hpp"
#include "h2tune/objectives.hpp"
#include "h2tune/taskgen.hpp"
#include "h2tune/trilora.hpp"

namespace h2tune {

struct ClientState {
  int id = 0;
  ClientModel model;
  RelationMatrix relation;
  ResourceDescriptor resource;
  Hyperparameters hyper;
  std::shared_ptr<const Dataset> data;
  std::uint64_t seed = 0;  // drives per-round sample order
};

struct Batch {
  Matrix x;
  std::vector<int> y;

  int size() const { return static_cast<int>(y.size()); }
};

// Rows [begin, end) of `order` taken from the training split.
Batch make_batch(const Dataset& data, const std::vector<int>& order, std::size_t begin, std::size_t end);

// The whole training split in dataset order.
Batch full_batch(const Dataset& data);

struct PhaseReport {
  LossBreakdown loss;
  double shared_change = 0.0;    // Frobenius norm of the change in {R, Omega}
  double specific_change = 0.0;  // Frobenius norm of the change in {A, B}
  int samples = 0;
};

struct ShareStepResult {
  PhaseReport report;
  Matrix phase1_logits;  // y', captured after the update
};

// Analytic gradients of one loss with respect to all four parameter groups.
// `dR` is the true gradient of the loss in R (mask applies only to the
// forward-path contribution); updates multiply it by the mask again.
struct Gradients {
  LossBreakdown loss;
  Matrix logits;
  std::vector<Matrix> dA;
  std::vector<Matrix> dB;
  std::vector<Matrix> dR;
  Matrix d_omega;
};

Gradients share_gradients(const ClientState& state, const SharedStack& global_stack, const Batch& batch);
Gradients specific_gradients(const ClientState& state, const Matrix& phase1_logits, const Batch& batch);

// Joint objective used when disentanglement is disabled: share loss plus the
// weight penalty on A and B.
Gradients joint_gradients(const ClientState& state, const SharedStack& global_stack, const Batch& batch);

// Phase 1: A, B frozen; R <- R - eta' (mask o dR), Omega <- Omega - eta' dOmega.
ShareStepResult phase_share_step(ClientState& state, const SharedStack& global_stack, const Batch& batch);

// Phase 2: R, Omega, mask frozen; A <- A - eta dA, B <- B - eta dB.
PhaseReport phase_specific_step(ClientState& state, const Matrix& phase1_logits, const Batch& batch);

// All groups updated together from joint_gradients.
PhaseReport joint_step(ClientState& state, const SharedStack& global_stack, const Batch& batch);

// Objective minimized by the proximal step, over the local R stack:
//   <linear, R> + lambda * matrix_kl(R, reference) + (1/eta') |R - anchor|^2.
struct ProximalProblem {
  SharedStack linear;
  SharedStack reference;
  SharedStack anchor;
  SharedStack mask;
  double kl_weight = 0.0;
  double eta_shared = 1.0;

  double objective(const SharedStack& R) const;
  SharedStack gradient(const SharedStack& R) const;  // masked
};

// Backtracking gradient descent on `problem` from its anchor. Entries where the
// mask is zero stay at the anchor. Throws SolverError if the result ends above
// the starting objective.
SharedStack solve_proximal(const ProximalProblem& problem, int inner_steps);

// Phase 1 with the R update replaced by a proximal step around the current R.
// The linear term is the masked forward-path gradient of the cross entropy.
ShareStepResult proximal_share_step(ClientState& state, const SharedStack& global_stack,
                                    const Batch& batch, int inner_steps);

enum class PhaseKind { kShare, kSpecific, kJoint };

// Called with the state before and after every phase step.
using PhaseObserver = std::function<void(PhaseKind, const ClientState& before, const ClientState& after)>;

struct TrainingMode {
  bool disentangle = true;
  bool proximal = false;
  int proximal_inner_steps = 20;
};

struct LocalRoundResult {
  SharedStack upload;  // to_global(R, Omega) after training
  // Local R stack at the start of each epoch, followed by the final stack.
  std::vector<SharedStack> epoch_stacks;
  int steps_per_epoch = 0;
  double share_loss = 0.0;     // mean over steps
  double specific_loss = 0.0;  // mean over steps
};

// `epochs` passes over the training split in a round-seeded order, each batch
// running phase_share_step then phase_specific_step.
LocalRoundResult local_round(ClientState& state, const SharedStack& global_stack, int epochs,
                             int round_index, const TrainingMode& mode = {},
                             const PhaseObserver& observer = {});

// Worst relative error (over the two losses) between the analytic gradient in
// all four groups and central differences with step `fd_step`. The error of a
// loss is |analytic - numeric| / max(|analytic|, |numeric|) over the
// concatenated gradient vector. Without `phase1_logits` the current logits are used.
double check_gradients(const ClientState& state, const SharedStack& global_stack, const Batch& batch,
                       const std::optional<Matrix>& phase1_logits = std::nullopt,
                       double fd_step = 1e-6);

}  // namespace h2tune
