#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "h2tune/alignment.hpp"
#include "h2tune/client_trainer.hpp"
#include "h2tune/objectives.hpp"
#include "h2tune/taskgen.hpp"
#include "h2tune/trilora.hpp"

namespace h2tune {

struct ClientConfig {
  ArchSpec arch;
  SyntheticTaskSpec task;
  ResourceDescriptor resource;
  Hyperparameters hyper;
};

enum class Transport { kInProcess, kFileExchange };

struct FederationConfig {
  std::vector<ClientConfig> clients;
  int rank = 1;
  int rounds = 1;
  int epochs = 1;
  std::uint64_t seed = 0;
  Transport transport = Transport::kInProcess;
  std::filesystem::path exchange_dir;  // required for kFileExchange
  TrainingMode mode;
  bool communicate = true;  // false: no aggregation, the global stack stays zero
  bool parallel = true;

  int global_depth() const;
  void validate() const;
};

struct ClientRoundMetrics {
  int client = 0;
  double share_loss = 0.0;
  double specific_loss = 0.0;
  double eval_accuracy = 0.0;
  double gg_sq = 0.0;  // mean over local epochs of the squared generalized gradient
};

struct RoundRecord {
  int round = 0;
  std::vector<ClientRoundMetrics> clients;
  double gg_sq_mean = 0.0;  // mean of gg_sq over clients
  double wall_seconds = 0.0;
};

// Elementwise mean, accumulated in ascending client order. Throws ProtocolError
// naming the first upload whose shape differs from upload 0.
SharedStack aggregate(std::span<const SharedStack> uploads);

// |before - after|_F / step.
double generalized_gradient(const SharedStack& before, const SharedStack& after, double step);

// Initial client state as built by Federation: model, relation and data derived
// from the master seed and the client's config.
ClientState make_client(const FederationConfig& config, int client);

// Synchronous round driver. Clients train concurrently between barriers; the
// server aggregates after every upload has arrived.
class Federation {
 public:
  // `observer` sees every phase of every client; calls are serialized.
  explicit Federation(FederationConfig config, PhaseObserver observer = {});

  const RoundRecord& run_round();
  // Runs every remaining round and returns the full history.
  const std::vector<RoundRecord>& run();

  int rounds_completed() const { return static_cast<int>(history_.size()); }
  const std::vector<RoundRecord>& history() const { return history_; }
  const SharedStack& global_stack() const { return global_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  const FederationConfig& config() const { return config_; }

  // Test accuracy of every client's current model.
  std::vector<double> evaluate() const;

  // Mask budgets and untouched masked R entries. Throws InvariantError.
  void check_invariants() const;

 private:
  FederationConfig config_;
  PhaseObserver observer_;
  std::vector<ClientState> clients_;
  std::vector<SharedStack> initial_shared_;
  SharedStack global_;
  std::vector<RoundRecord> history_;
};

std::vector<RoundRecord> run_federation(const FederationConfig& config);

}  // namespace h2tune
