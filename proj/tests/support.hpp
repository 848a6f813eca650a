#pragma once

// Random instance builders shared by the unit tests and the acceptance runner.

#include <memory>
#include <random>
#include <vector>

#include "h2tune/client_trainer.hpp"
#include "h2tune/federation.hpp"
#include "h2tune/taskgen.hpp"

namespace testing_support {

using namespace h2tune;

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline SharedStack random_stack(std::mt19937_64& rng, int depth, int rank, double scale = 1.0) {
  std::vector<Matrix> layers;
  for (int l = 0; l < depth; ++l) layers.push_back(random_matrix(rng, rank, rank, scale));
  return SharedStack(std::move(layers));
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// Widths in [rank, rank + 4], output width num_classes >= rank.
inline ArchSpec random_arch(std::mt19937_64& rng, int depth, int rank, int num_classes, Activation act) {
  ArchSpec spec;
  spec.activation = act;
  spec.num_classes = num_classes;
  int in = uniform_int(rng, rank, rank + 4);
  for (int l = 0; l < depth; ++l) {
    const int out = l + 1 == depth ? num_classes : uniform_int(rng, rank, rank + 4);
    spec.layer_dims.emplace_back(in, out);
    in = out;
  }
  return spec;
}

struct Instance {
  ClientState state;
  SharedStack global;
  Batch batch;
};

// A client away from its initialization: B, R and Omega are random so every
// gradient path is exercised. Shapes, depths, activation and sparsity vary.
inline Instance random_instance(std::mt19937_64& rng, int batch_rows = 6) {
  const int rank = uniform_int(rng, 1, 3);
  const int local_depth = uniform_int(rng, 1, 3);
  const int global_depth = uniform_int(rng, local_depth, 4);
  const int classes = uniform_int(rng, std::max(2, rank), rank + 2);
  const Activation act = uniform_int(rng, 0, 1) == 0 ? Activation::kTanh : Activation::kIdentity;
  const ArchSpec arch = random_arch(rng, local_depth, rank, classes, act);
  const double betas[] = {0.0, 0.5, 1.0};
  const double beta = betas[uniform_int(rng, 0, 2)];

  Instance inst;
  ClientState& s = inst.state;
  s.model = build_toy_model(arch, rank, beta, rng());
  for (int l = 0; l < s.model.depth(); ++l) {
    TriLoraLayer& layer = s.model.layer(l);
    layer.B = random_matrix(rng, layer.B.rows(), layer.B.cols(), 0.5);
    layer.R = random_matrix(rng, rank, rank, 0.5);
  }
  s.relation = init_relation(local_depth, global_depth);
  s.relation.omega += random_matrix(rng, local_depth, global_depth, 0.3);
  s.resource.sparsity_ratio = beta;
  s.resource.declared_rank = rank;
  std::uniform_real_distribution<double> u(0.1, 2.0);
  s.hyper.eta = 0.05;
  s.hyper.eta_shared = 0.05;
  s.hyper.kl_weight = u(rng);
  s.hyper.divergence_weight = u(rng);
  s.hyper.weight_decay = 0.1 * u(rng);
  s.hyper.batch_size = batch_rows;

  SyntheticTaskSpec task;
  task.input_dim = arch.input_dim();
  task.num_classes = classes;
  task.n_train = batch_rows;
  task.n_test = 4;
  task.shared_seed = rng();
  task.private_seed = rng();
  s.data = std::make_shared<const Dataset>(gen_task(task));
  s.seed = rng();

  inst.global = random_stack(rng, global_depth, rank, 0.5);
  inst.batch = full_batch(*s.data);
  return inst;
}

// Three heterogeneous clients (depth 2/3/4, widths 8/12/16, rank 4).
inline FederationConfig small_federation(int rounds, std::uint64_t seed = 1) {
  FederationConfig cfg;
  cfg.rank = 4;
  cfg.rounds = rounds;
  cfg.epochs = 2;
  cfg.seed = seed;
  const int widths[] = {8, 12, 16};
  const double betas[] = {0.25, 0.5, 1.0};
  for (int k = 0; k < 3; ++k) {
    ClientConfig c;
    const int w = widths[k];
    for (int l = 0; l < k + 1; ++l) c.arch.layer_dims.emplace_back(w, w);
    c.arch.layer_dims.emplace_back(w, 4);
    c.arch.num_classes = 4;
    c.task.input_dim = w;
    c.task.num_classes = 4;
    c.task.n_train = 48;
    c.task.n_test = 64;
    c.task.shared_seed = 1;
    c.task.private_seed = 11 + static_cast<std::uint64_t>(k);
    c.task.shared_weight = 0.7;
    c.resource.sparsity_ratio = betas[k];
    c.resource.declared_rank = 4;
    c.hyper.eta = 0.1;
    c.hyper.eta_shared = 0.1;
    c.hyper.weight_decay = 0.001;
    c.hyper.batch_size = 16;
    cfg.clients.push_back(c);
  }
  return cfg;
}

}  // namespace testing_support
