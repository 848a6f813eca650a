#include "h2tune/federation.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>

#include <fmt/format.h>

#include "h2tune/errors.hpp"
#include "h2tune/serialization.hpp"

namespace h2tune {

int FederationConfig::global_depth() const {
  int depth = 0;
  for (const ClientConfig& c : clients) depth = std::max(depth, c.arch.depth());
  return depth;
}

void FederationConfig::validate() const {
  if (clients.empty()) throw ConfigError("federation needs at least one client");
  if (rank < 1) throw ConfigError("global rank must be positive");
  if (rounds < 0 || epochs < 1) throw ConfigError("rounds must be >= 0 and epochs >= 1");
  if (transport == Transport::kFileExchange && exchange_dir.empty()) {
    throw ConfigError("file-exchange transport needs an exchange directory");
  }
  for (std::size_t k = 0; k < clients.size(); ++k) {
    const ClientConfig& c = clients[k];
    try {
      c.arch.validate();
      c.task.validate();
      c.resource.validate();
      c.hyper.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("client {}: {}", k, e.what()));
    }
    if (rank > c.arch.min_dim()) {
      throw ConfigError(fmt::format("client {}: rank {} exceeds smallest layer dim {}", k, rank, c.arch.min_dim()));
    }
    if (c.task.input_dim != c.arch.input_dim() || c.task.num_classes != c.arch.num_classes) {
      throw ConfigError(fmt::format("client {}: task shape {}->{} does not match architecture {}->{}", k,
                                    c.task.input_dim, c.task.num_classes, c.arch.input_dim(),
                                    c.arch.num_classes));
    }
  }
}

SharedStack aggregate(std::span<const SharedStack> uploads) {
  if (uploads.empty()) throw ProtocolError(-1, "no uploads to aggregate");
  const SharedStack& first = uploads.front();
  for (std::size_t k = 1; k < uploads.size(); ++k) {
    if (!uploads[k].same_shape(first)) {
      throw ProtocolError(static_cast<int>(k),
                          fmt::format("client {} uploaded {}x{}, expected {}x{}", k, uploads[k].depth(),
                                      uploads[k].rank(), first.depth(), first.rank()));
    }
  }
  SharedStack sum = first;
  for (std::size_t k = 1; k < uploads.size(); ++k) sum += uploads[k];
  sum *= 1.0 / static_cast<double>(uploads.size());
  return sum;
}

double generalized_gradient(const SharedStack& before, const SharedStack& after, double step) {
  if (!before.same_shape(after)) throw ShapeError("generalized_gradient: stack shape mismatch");
  if (!(step > 0.0)) throw ConfigError("generalized_gradient needs a positive step");
  return std::sqrt((before - after).squared_norm()) / step;
}

ClientState make_client(const FederationConfig& config, int client) {
  const ClientConfig& c = config.clients[static_cast<std::size_t>(client)];
  const auto k = static_cast<std::uint64_t>(client);

  // Tasks sharing a shared_seed stay aligned under every master seed.
  SyntheticTaskSpec task = c.task;
  task.shared_seed = derive_seed({config.seed, 0x5a4ed, c.task.shared_seed});
  task.private_seed = derive_seed({config.seed, 0x9217, c.task.private_seed});

  ClientState state;
  state.id = client;
  state.model = build_family_model(c.arch, config.rank, c.resource.sparsity_ratio, derive_seed({config.seed, 0xfa3171}),
                                   derive_seed({config.seed, 0x30de1, k}), config.global_depth());
  state.relation = init_relation(c.arch.depth(), config.global_depth());
  state.resource = c.resource;
  state.hyper = c.hyper;
  state.hyper.epochs = config.epochs;
  state.hyper.rounds = config.rounds;
  state.data = std::make_shared<const Dataset>(gen_task(task));
  state.seed = derive_seed({config.seed, 0x0de7, k});
  return state;
}

Federation::Federation(FederationConfig config, PhaseObserver observer)
    : config_(std::move(config)), observer_(std::move(observer)) {
  config_.validate();
  for (int k = 0; k < static_cast<int>(config_.clients.size()); ++k) {
    clients_.push_back(make_client(config_, k));
    initial_shared_.push_back(clients_.back().model.shared_stack());
  }
  global_ = SharedStack::zeros(config_.global_depth(), config_.rank);
}

std::vector<double> Federation::evaluate() const {
  std::vector<double> out;
  for (const ClientState& c : clients_) out.push_back(accuracy(c.model.forward(c.data->x_test), c.data->y_test));
  return out;
}

const RoundRecord& Federation::run_round() {
  const auto started = std::chrono::steady_clock::now();
  const int t = rounds_completed();
  const std::size_t K = clients_.size();

  std::mutex observer_mutex;
  PhaseObserver observer;
  if (observer_) {
    observer = [&](PhaseKind kind, const ClientState& before, const ClientState& after) {
      std::lock_guard<std::mutex> lock(observer_mutex);
      observer_(kind, before, after);
    };
  }

  std::vector<std::optional<LocalRoundResult>> results(K);
  std::vector<std::exception_ptr> failures(K);
  auto work = [&](std::size_t k) {
    try {
      results[k] = local_round(clients_[k], global_, config_.epochs, t, config_.mode, observer);
    } catch (...) {
      failures[k] = std::current_exception();
    }
  };
  if (config_.parallel && K > 1) {
    std::vector<std::jthread> workers;
    for (std::size_t k = 0; k < K; ++k) workers.emplace_back(work, k);
  } else {
    for (std::size_t k = 0; k < K; ++k) work(k);
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (!failures[k]) continue;
    try {
      std::rethrow_exception(failures[k]);
    } catch (const NumericError& e) {
      throw DivergenceError(t, static_cast<int>(k), e.term(),
                            fmt::format("round {} client {}: {}", t, k, e.what()));
    }
  }

  std::vector<SharedStack> uploads;
  for (std::size_t k = 0; k < K; ++k) uploads.push_back(results[k]->upload);
  std::filesystem::path round_dir;
  if (config_.transport == Transport::kFileExchange) {
    round_dir = config_.exchange_dir / fmt::format("round_{}", t);
    std::filesystem::create_directories(round_dir);
    for (std::size_t k = 0; k < K; ++k) write_stack_file(round_dir / fmt::format("client_{}.r2g", k), uploads[k]);
    for (std::size_t k = 0; k < K; ++k) uploads[k] = read_stack_file(round_dir / fmt::format("client_{}.r2g", k));
  }
  if (config_.communicate) {
    global_ = aggregate(uploads);
    if (!round_dir.empty()) {
      write_stack_file(round_dir / "global.r2g", global_);
      global_ = read_stack_file(round_dir / "global.r2g");
    }
  }

  RoundRecord record;
  record.round = t;
  const std::vector<double> acc = evaluate();
  for (std::size_t k = 0; k < K; ++k) {
    const LocalRoundResult& r = *results[k];
    ClientRoundMetrics m;
    m.client = static_cast<int>(k);
    m.share_loss = r.share_loss;
    m.specific_loss = r.specific_loss;
    m.eval_accuracy = acc[k];
    const double step = clients_[k].hyper.eta_shared * r.steps_per_epoch;
    if (step > 0.0) {
      for (std::size_t j = 0; j + 1 < r.epoch_stacks.size(); ++j) {
        const double g = generalized_gradient(r.epoch_stacks[j], r.epoch_stacks[j + 1], step);
        m.gg_sq += g * g;
      }
      m.gg_sq /= static_cast<double>(r.epoch_stacks.size() - 1);
    }
    record.gg_sq_mean += m.gg_sq;
    record.clients.push_back(m);
  }
  record.gg_sq_mean /= static_cast<double>(K);
  record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  history_.push_back(std::move(record));
  return history_.back();
}

const std::vector<RoundRecord>& Federation::run() {
  while (rounds_completed() < config_.rounds) run_round();
  return history_;
}

void Federation::check_invariants() const {
  for (std::size_t k = 0; k < clients_.size(); ++k) {
    const ClientState& c = clients_[k];
    if (c.relation.local_depth() != c.model.depth()) {
      throw InvariantError(fmt::format("client {}: relation rows differ from model depth", k));
    }
    for (int l = 0; l < c.model.depth(); ++l) {
      const TriLoraLayer& layer = c.model.layer(l);
      const int ones = static_cast<int>(layer.mask.sum());
      if (ones != mask_budget(layer.rank(), c.resource.sparsity_ratio)) {
        throw InvariantError(fmt::format("client {} layer {}: mask has {} ones", k, l, ones));
      }
      const Matrix& initial = initial_shared_[k][l];
      for (Eigen::Index i = 0; i < layer.R.rows(); ++i) {
        for (Eigen::Index j = 0; j < layer.R.cols(); ++j) {
          if (layer.mask(i, j) == 0.0 && std::bit_cast<std::uint64_t>(layer.R(i, j)) !=
                                             std::bit_cast<std::uint64_t>(initial(i, j))) {
            throw InvariantError(fmt::format("client {} layer {}: masked R entry ({}, {}) changed", k, l, i, j));
          }
        }
      }
    }
    if (!c.relation.omega.allFinite()) throw InvariantError(fmt::format("client {}: non-finite relation", k));
  }
  for (const RoundRecord& r : history_) {
    for (const ClientRoundMetrics& m : r.clients) {
      if (!(m.eval_accuracy >= 0.0 && m.eval_accuracy <= 1.0) || !(m.gg_sq >= 0.0)) {
        throw InvariantError(fmt::format("round {} client {}: metric out of range", r.round, m.client));
      }
    }
  }
}

std::vector<RoundRecord> run_federation(const FederationConfig& config) {
  Federation federation(config);
  return federation.run();
}

}  // namespace h2tune
