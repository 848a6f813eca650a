#include "h2tune/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <fmt/format.h>

#include "h2tune/errors.hpp"

namespace h2tune {

int ArchSpec::min_dim() const {
  int m = std::numeric_limits<int>::max();
  for (const auto& [a, b] : layer_dims) m = std::min({m, a, b});
  return m;
}

void ArchSpec::validate() const {
  if (layer_dims.empty()) throw ConfigError("architecture needs at least one layer");
  for (std::size_t l = 0; l < layer_dims.size(); ++l) {
    const auto [a, b] = layer_dims[l];
    if (a < 1 || b < 1) throw ConfigError(fmt::format("layer {} has non-positive dims {}x{}", l, a, b));
    if (l + 1 < layer_dims.size() && b != layer_dims[l + 1].first) {
      throw ConfigError(fmt::format("layer {} outputs {} but layer {} expects {}", l, b, l + 1,
                                    layer_dims[l + 1].first));
    }
  }
  if (layer_dims.back().second != num_classes) {
    throw ConfigError(fmt::format("final layer width {} != num_classes {}",
                                  layer_dims.back().second, num_classes));
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
}

ClientModel::ClientModel(std::vector<TriLoraLayer> layers, Activation activation)
    : layers_(std::move(layers)), activation_(activation) {
  if (layers_.empty()) throw ConfigError("model needs at least one layer");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    layers_[l].validate();
    if (layers_[l].rank() != layers_.front().rank()) throw ShapeError("layers must share one rank");
    if (l + 1 < layers_.size() && layers_[l].out_dim() != layers_[l + 1].in_dim()) {
      throw ConfigError(fmt::format("layer {} output does not chain into layer {}", l, l + 1));
    }
  }
}

std::vector<Matrix> ClientModel::A_all() const {
  std::vector<Matrix> out;
  for (const auto& layer : layers_) out.push_back(layer.A);
  return out;
}

std::vector<Matrix> ClientModel::B_all() const {
  std::vector<Matrix> out;
  for (const auto& layer : layers_) out.push_back(layer.B);
  return out;
}

SharedStack ClientModel::shared_stack() const {
  std::vector<Matrix> rs;
  for (const auto& layer : layers_) rs.push_back(layer.R);
  return SharedStack(std::move(rs));
}

void ClientModel::set_shared_stack(const SharedStack& stack) {
  if (stack.depth() != depth() || stack.rank() != rank()) throw ShapeError("shared stack shape mismatch");
  for (int l = 0; l < depth(); ++l) layers_[static_cast<std::size_t>(l)].R = stack[l];
}

Matrix ClientModel::forward(const Matrix& x) const {
  ForwardCache scratch;
  return forward(x, scratch);
}

Matrix ClientModel::forward(const Matrix& x, ForwardCache& cache) const {
  cache.inputs.clear();
  cache.pre.clear();
  cache.low.clear();
  Matrix h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const TriLoraLayer& layer = layers_[l];
    if (h.cols() != layer.in_dim()) {
      throw ShapeError(fmt::format("layer {} expects width {}, got {}", l, layer.in_dim(), h.cols()));
    }
    Matrix low = h * layer.A;
    Matrix z = h * layer.base_weight + (low * layer.core()) * layer.B;
    cache.inputs.push_back(std::move(h));
    cache.low.push_back(std::move(low));
    if (l + 1 < layers_.size() && activation_ == Activation::kTanh) {
      h = z.array().tanh();
    } else {
      h = z;
    }
    cache.pre.push_back(std::move(z));
  }
  return h;
}

LayerGradients ClientModel::backward(const ForwardCache& cache, const Matrix& d_logits) const {
  const std::size_t L = layers_.size();
  LayerGradients g;
  g.dA.resize(L);
  g.dB.resize(L);
  g.dR.resize(L);
  Matrix dz = d_logits;
  for (std::size_t i = L; i-- > 0;) {
    const TriLoraLayer& layer = layers_[i];
    const Matrix core = layer.core();
    const Matrix v = cache.low[i] * core;
    g.dB[i] = v.transpose() * dz;
    const Matrix dv = dz * layer.B.transpose();
    g.dR[i] = layer.mask.cwiseProduct(cache.low[i].transpose() * dv);
    const Matrix du = dv * core.transpose();
    g.dA[i] = cache.inputs[i].transpose() * du;
    if (i == 0) break;
    Matrix dh = dz * layer.base_weight.transpose() + du * layer.A.transpose();
    if (activation_ == Activation::kTanh) {
      // The input of layer i is tanh(pre[i-1]).
      dh.array() *= 1.0 - cache.inputs[i].array().square();
    }
    dz = std::move(dh);
  }
  return g;
}

ClientModel build_toy_model(const ArchSpec& spec, int rank, double beta, std::uint64_t seed) {
  spec.validate();
  if (rank < 1 || rank > spec.min_dim()) {
    throw ConfigError(fmt::format("rank {} too large for architecture (min dim {})", rank, spec.min_dim()));
  }
  std::vector<TriLoraLayer> layers;
  for (int l = 0; l < spec.depth(); ++l) {
    const auto [a, b] = spec.layer_dims[static_cast<std::size_t>(l)];
    const auto key = static_cast<std::uint64_t>(l);
    TriLoraLayer layer = init_trilora(a, b, rank, beta, derive_seed({seed, 0xada7, key}));
    layer.base_weight = indexed_gaussian(a, b, derive_seed({seed, 0xba5e, key}), 1.0 / std::sqrt(static_cast<double>(a)));
    layers.push_back(std::move(layer));
  }
  return ClientModel(std::move(layers), spec.activation);
}

ClientModel build_family_model(const ArchSpec& spec, int rank, double beta, std::uint64_t family_seed,
                               std::uint64_t client_seed, int global_depth) {
  spec.validate();
  if (rank < 1 || rank > spec.min_dim()) {
    throw ConfigError(fmt::format("rank {} too large for architecture (min dim {})", rank, spec.min_dim()));
  }
  const RelationMatrix slots = init_relation(spec.depth(), global_depth);
  std::vector<TriLoraLayer> layers;
  for (int l = 0; l < spec.depth(); ++l) {
    const auto [a, b] = spec.layer_dims[static_cast<std::size_t>(l)];
    Eigen::Index slot = 0;
    slots.omega.row(l).maxCoeff(&slot);
    const auto key = static_cast<std::uint64_t>(slot);
    TriLoraLayer layer = init_trilora(a, b, rank, beta, derive_seed({client_seed, 0xada7, static_cast<std::uint64_t>(l)}));
    // Same distribution as init_trilora's A, keyed by the family instead of the client.
    layer.A = indexed_gaussian(a, rank, derive_seed({family_seed, 0xa, key}), 1.0 / std::sqrt(static_cast<double>(rank)));
    layer.base_weight = indexed_gaussian(a, b, derive_seed({family_seed, 0xba5e, key}), 1.0 / std::sqrt(static_cast<double>(a)));
    layers.push_back(std::move(layer));
  }
  return ClientModel(std::move(layers), spec.activation);
}

void SyntheticTaskSpec::validate() const {
  if (input_dim < 1 || num_classes < 2) throw ConfigError("task needs input_dim >= 1 and num_classes >= 2");
  if (n_train < 1 || n_test < 1) throw ConfigError("n_train and n_test must be >= 1");
  if (!(shared_weight >= 0.0 && shared_weight <= 1.0)) throw ConfigError("shared_weight outside [0, 1]");
  if (!(score_noise >= 0.0)) throw ConfigError("score_noise must be >= 0");
  if (!(label_flip >= 0.0 && label_flip <= 1.0)) throw ConfigError("label_flip outside [0, 1]");
}

Matrix teacher_matrix(int num_classes, int input_dim, std::uint64_t seed) {
  return indexed_gaussian(num_classes, input_dim, seed);
}

Dataset gen_task(const SyntheticTaskSpec& spec) {
  spec.validate();
  const Matrix teacher = spec.shared_weight * teacher_matrix(spec.num_classes, spec.input_dim, spec.shared_seed) +
                         (1.0 - spec.shared_weight) *
                             teacher_matrix(spec.num_classes, spec.input_dim, spec.private_seed ^ 0x5eed5eedULL);

  std::mt19937_64 rng(derive_seed({spec.private_seed, spec.shared_seed, 0xda7a}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> other(1, spec.num_classes - 1);

  const int n = spec.n_train + spec.n_test;
  Matrix x(n, spec.input_dim);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < spec.input_dim; ++j) x(i, j) = normal(rng);
    RowVector score = x.row(i) * teacher.transpose();
    for (Eigen::Index c = 0; c < score.size(); ++c) score(c) += spec.score_noise * normal(rng);
    Eigen::Index label = 0;
    score.maxCoeff(&label);
    // Draw both values unconditionally so the stream does not depend on outcomes.
    const double flip = unit(rng);
    const int shift = other(rng);
    if (flip < spec.label_flip) label = (label + shift) % spec.num_classes;
    y[static_cast<std::size_t>(i)] = static_cast<int>(label);
  }

  Dataset d;
  d.num_classes = spec.num_classes;
  d.x_train = x.topRows(spec.n_train);
  d.x_test = x.bottomRows(spec.n_test);
  d.y_train.assign(y.begin(), y.begin() + spec.n_train);
  d.y_test.assign(y.begin() + spec.n_train, y.end());
  return d;
}

double accuracy(const Matrix& logits, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw ShapeError("accuracy: length mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    if (best == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace h2tune
