#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "h2tune/alignment.hpp"
#include "h2tune/linalg.hpp"
#include "h2tune/trilora.hpp"

namespace h2tune {

enum class Activation { kTanh, kIdentity };

struct ArchSpec {
  std::vector<std::pair<int, int>> layer_dims;  // (in, out) per layer
  Activation activation = Activation::kTanh;
  int num_classes = 2;

  int depth() const { return static_cast<int>(layer_dims.size()); }
  int input_dim() const { return layer_dims.empty() ? 0 : layer_dims.front().first; }
  int min_dim() const;

  // Chain, positivity and output-width checks.
  void validate() const;
};

// Per-layer activations kept for the backward pass. `inputs[l]` feeds layer l,
// `pre[l]` is its pre-activation output, and `low[l]` is inputs[l] * A_l.
struct ForwardCache {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;
  std::vector<Matrix> low;
};

struct LayerGradients {
  std::vector<Matrix> dA;
  std::vector<Matrix> dB;
  // Gradient with respect to R through the forward path, already multiplied by the mask.
  std::vector<Matrix> dR;
};

// A stack of TriLoRA layers with a fixed activation between layers and raw
// logits at the output.
class ClientModel {
 public:
  ClientModel() = default;
  ClientModel(std::vector<TriLoraLayer> layers, Activation activation);

  int depth() const { return static_cast<int>(layers_.size()); }
  int rank() const { return layers_.empty() ? 0 : layers_.front().rank(); }
  int input_dim() const { return layers_.front().in_dim(); }
  int num_classes() const { return layers_.back().out_dim(); }
  Activation activation() const { return activation_; }

  const std::vector<TriLoraLayer>& layers() const { return layers_; }
  TriLoraLayer& layer(int l) { return layers_[static_cast<std::size_t>(l)]; }
  const TriLoraLayer& layer(int l) const { return layers_[static_cast<std::size_t>(l)]; }

  std::vector<Matrix> A_all() const;
  std::vector<Matrix> B_all() const;
  SharedStack shared_stack() const;
  void set_shared_stack(const SharedStack& stack);

  // Logits for every row of `x`.
  Matrix forward(const Matrix& x) const;
  Matrix forward(const Matrix& x, ForwardCache& cache) const;

  // Backpropagates d loss / d logits through a cached forward pass.
  LayerGradients backward(const ForwardCache& cache, const Matrix& d_logits) const;

 private:
  std::vector<TriLoraLayer> layers_;
  Activation activation_ = Activation::kTanh;
};

// Frozen base ~ N(0, 1/a) per layer plus init_trilora adapters, all derived from `seed`.
ClientModel build_toy_model(const ArchSpec& spec, int rank, double beta, std::uint64_t seed);

// Member of a model family: the frozen base and the adapter A of local layer l
// are drawn from `family_seed` keyed by l's global slot under
// init_relation(depth, global_depth), entry by entry. Aligned layers of models
// with different widths and depths therefore agree on their overlapping block
// (the base up to its 1/sqrt(fan-in) scale). Masks come from `client_seed`.
ClientModel build_family_model(const ArchSpec& spec, int rank, double beta, std::uint64_t family_seed,
                               std::uint64_t client_seed, int global_depth);

struct SyntheticTaskSpec {
  int input_dim = 8;
  int num_classes = 3;
  int n_train = 256;
  int n_test = 256;
  std::uint64_t shared_seed = 1;
  std::uint64_t private_seed = 2;
  double shared_weight = 0.5;
  double score_noise = 0.1;  // std of Gaussian noise added to teacher scores
  double label_flip = 0.05;  // probability a label is replaced by a different class

  void validate() const;
};

struct Dataset {
  Matrix x_train;
  std::vector<int> y_train;
  Matrix x_test;
  std::vector<int> y_test;
  int num_classes = 0;
};

// Index-addressed teacher weights: tasks with different input widths that share
// a seed agree on their common leading features.
Matrix teacher_matrix(int num_classes, int input_dim, std::uint64_t seed);

Dataset gen_task(const SyntheticTaskSpec& spec);

// Fraction of rows whose argmax logit equals the label.
double accuracy(const Matrix& logits, const std::vector<int>& labels);

}  // namespace h2tune
