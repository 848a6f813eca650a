#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "h2tune/errors.hpp"
#include "h2tune/taskgen.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace {

using namespace h2tune;
using testing_support::random_matrix;

int argmax(const Matrix& m, Eigen::Index row) {
  Eigen::Index best = 0;
  m.row(row).maxCoeff(&best);
  return static_cast<int>(best);
}

// Fraction of rows where argmax(x W^T) equals the label.
double teacher_agreement(const Matrix& x, const std::vector<int>& y, const Matrix& teacher) {
  const Matrix scores = x * teacher.transpose();
  int hits = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) hits += argmax(scores, i) == y[static_cast<std::size_t>(i)];
  return static_cast<double>(hits) / static_cast<double>(x.rows());
}

// Multinomial logistic regression by full-batch gradient descent; returns C x d weights.
Matrix fit_logistic(const Matrix& x, const std::vector<int>& y, int classes) {
  Matrix w = Matrix::Zero(classes, x.cols());
  const double n = static_cast<double>(x.rows());
  for (int it = 0; it < 500; ++it) {
    Matrix g = Matrix::Zero(classes, x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const std::vector<double> z = oracle::flatten(Matrix(x.row(i) * w.transpose()));
      const std::vector<double> p = oracle::softmax(z);
      for (int c = 0; c < classes; ++c) {
        const double d = p[static_cast<std::size_t>(c)] - (y[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0);
        g.row(c) += d * x.row(i);
      }
    }
    w -= 0.5 * g / n;
  }
  return w;
}

SyntheticTaskSpec spec(int d, int c, double s, std::uint64_t shared, std::uint64_t priv, int n_train = 400) {
  SyntheticTaskSpec t;
  t.input_dim = d;
  t.num_classes = c;
  t.n_train = n_train;
  t.n_test = 200;
  t.shared_seed = shared;
  t.private_seed = priv;
  t.shared_weight = s;
  return t;
}

TEST(GenTask, Deterministic) {
  const Dataset a = gen_task(spec(6, 3, 0.5, 1, 2));
  const Dataset b = gen_task(spec(6, 3, 0.5, 1, 2));
  EXPECT_TRUE(bit_equal(a.x_train, b.x_train));
  EXPECT_TRUE(bit_equal(a.x_test, b.x_test));
  EXPECT_EQ(a.y_train, b.y_train);
  EXPECT_EQ(a.y_test, b.y_test);
}

TEST(GenTask, ShapesAndSplitDisjoint) {
  const Dataset d = gen_task(spec(5, 4, 0.5, 3, 4, 120));
  EXPECT_EQ(d.x_train.rows(), 120);
  EXPECT_EQ(d.x_train.cols(), 5);
  EXPECT_EQ(d.x_test.rows(), 200);
  EXPECT_EQ(d.num_classes, 4);
  for (Eigen::Index i = 0; i < d.x_test.rows(); ++i)
    for (Eigen::Index j = 0; j < d.x_train.rows(); ++j) ASSERT_FALSE(bit_equal(Matrix(d.x_test.row(i)), Matrix(d.x_train.row(j))));
  for (int y : d.y_train) EXPECT_TRUE(y >= 0 && y < 4);
}

TEST(GenTask, InputsAreStandardNormal) {
  const Dataset d = gen_task(spec(8, 3, 0.5, 1, 2, 5000));
  const double n = static_cast<double>(d.x_train.size());
  const double mean = d.x_train.sum() / n;
  const double var = d.x_train.array().square().sum() / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.03);
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(GenTask, FullySharedTasksUseTheSharedTeacher) {
  const Matrix teacher = teacher_matrix(3, 6, 7);
  for (std::uint64_t priv : {11ULL, 12ULL}) {
    const Dataset d = gen_task(spec(6, 3, 1.0, 7, priv, 2000));
    // Only score noise and the label flips separate labels from the teacher.
    const double agree = teacher_agreement(d.x_train, d.y_train, teacher);
    EXPECT_GE(agree, 0.88);
    EXPECT_LE(agree, 0.97);
  }
}

TEST(GenTask, PrivateTasksIgnoreTheSharedTeacher) {
  const Matrix teacher = teacher_matrix(3, 6, 7);
  const Dataset d = gen_task(spec(6, 3, 0.0, 7, 11, 2000));
  EXPECT_LT(teacher_agreement(d.x_train, d.y_train, teacher), 0.7);
}

TEST(GenTask, ClassHistogramIsBalancedEnough) {
  const SyntheticTaskSpec s = spec(8, 3, 0.5, 21, 22, 5000);
  const Dataset d = gen_task(s);
  std::vector<int> counts(3, 0);
  for (int y : d.y_train) ++counts[static_cast<std::size_t>(y)];
  for (int c : counts) {
    const double f = c / 5000.0;
    EXPECT_GE(f, 0.15);
    EXPECT_LE(f, 0.55);
  }
  EXPECT_EQ(gen_task(s).y_train, d.y_train);
}

TEST(GenTask, LogisticFitsAgreeWhenFullyShared) {
  const Dataset a = gen_task(spec(6, 3, 1.0, 5, 101, 1500));
  const Dataset b = gen_task(spec(6, 3, 1.0, 5, 202, 1500));
  const Matrix wa = fit_logistic(a.x_train, a.y_train, 3);
  const Matrix wb = fit_logistic(b.x_train, b.y_train, 3);
  std::mt19937_64 rng(9);
  const Matrix probe = random_matrix(rng, 2000, 6);
  const Matrix sa = probe * wa.transpose();
  const Matrix sb = probe * wb.transpose();
  int same = 0;
  for (Eigen::Index i = 0; i < probe.rows(); ++i) same += argmax(sa, i) == argmax(sb, i);
  EXPECT_GE(same / 2000.0, 0.95);
}

TEST(GenTask, RejectsBadSpecs) {
  SyntheticTaskSpec s = spec(4, 3, 0.5, 1, 2);
  s.shared_weight = 1.5;
  EXPECT_THROW(gen_task(s), ConfigError);
  s = spec(4, 1, 0.5, 1, 2);
  EXPECT_THROW(gen_task(s), ConfigError);
}

TEST(TeacherMatrix, AgreesOnCommonFeatures) {
  const Matrix small = teacher_matrix(3, 4, 99);
  const Matrix large = teacher_matrix(3, 9, 99);
  EXPECT_TRUE(bit_equal(small, Matrix(large.leftCols(4))));
}

ArchSpec arch(std::vector<std::pair<int, int>> dims, Activation act, int classes) {
  ArchSpec a;
  a.layer_dims = std::move(dims);
  a.activation = act;
  a.num_classes = classes;
  return a;
}

TEST(BuildToyModel, SingleIdentityLayerIsLinear) {
  const ClientModel m = build_toy_model(arch({{5, 3}}, Activation::kIdentity, 3), 2, 0.5, 4);
  std::mt19937_64 rng(1);
  const Matrix x = random_matrix(rng, 7, 5);
  EXPECT_LE(oracle::max_relative(m.forward(x), oracle::matmul(x, m.layer(0).base_weight)), 1e-14);
}

TEST(BuildToyModel, ForwardMatchesLayerByLayerOracle) {
  std::mt19937_64 rng(2);
  ClientModel m = build_toy_model(arch({{6, 5}, {5, 4}, {4, 3}}, Activation::kTanh, 3), 3, 1.0, 8);
  for (int l = 0; l < 3; ++l) {
    m.layer(l).B = random_matrix(rng, 3, m.layer(l).out_dim(), 0.5);
    m.layer(l).R = random_matrix(rng, 3, 3, 0.5);
  }
  const Matrix x = random_matrix(rng, 4, 6);
  Matrix h = x;
  for (int l = 0; l < 3; ++l) {
    const TriLoraLayer& layer = m.layer(l);
    h = oracle::matmul(h, layer.base_weight + oracle::trilora_delta(layer.A, layer.R, layer.mask, layer.B));
    if (l < 2) h = h.array().tanh().matrix();
  }
  EXPECT_LE(oracle::max_relative(m.forward(x), h), 1e-12);
}

TEST(BuildToyModel, BaseScaleIsInverseSqrtFanIn) {
  const ClientModel m = build_toy_model(arch({{400, 100}, {100, 4}}, Activation::kTanh, 4), 2, 0.5, 3);
  const Matrix& w = m.layer(0).base_weight;
  EXPECT_NEAR(w.squaredNorm() / static_cast<double>(w.size()), 1.0 / 400.0, 1e-4);
}

TEST(BuildToyModel, DeterministicGivenSeed) {
  const ArchSpec a = arch({{8, 6}, {6, 4}}, Activation::kTanh, 4);
  const ClientModel m1 = build_toy_model(a, 3, 0.5, 17);
  const ClientModel m2 = build_toy_model(a, 3, 0.5, 17);
  for (int l = 0; l < 2; ++l) {
    EXPECT_TRUE(bit_equal(m1.layer(l).base_weight, m2.layer(l).base_weight));
    EXPECT_TRUE(bit_equal(m1.layer(l).A, m2.layer(l).A));
    EXPECT_TRUE(bit_equal(m1.layer(l).mask, m2.layer(l).mask));
  }
}

TEST(BuildToyModel, RejectsBadArchitectures) {
  EXPECT_THROW(build_toy_model(arch({{8, 6}, {5, 4}}, Activation::kTanh, 4), 2, 0.5, 1), ConfigError);
  EXPECT_THROW(build_toy_model(arch({{8, 6}, {6, 3}}, Activation::kTanh, 4), 2, 0.5, 1), ConfigError);
  EXPECT_THROW(build_toy_model(arch({{8, 6}, {6, 3}}, Activation::kTanh, 3), 4, 0.5, 1), ConfigError);
}

TEST(BuildFamilyModel, AlignedLayersShareBaseBlock) {
  const ArchSpec narrow = arch({{6, 6}, {6, 4}}, Activation::kTanh, 4);
  const ArchSpec wide = arch({{9, 9}, {9, 9}, {9, 4}}, Activation::kTanh, 4);
  const ClientModel a = build_family_model(narrow, 3, 0.5, 5, 100, 3);
  const ClientModel b = build_family_model(wide, 3, 0.5, 5, 200, 3);
  // Layer 0 of both maps to slot 0; the last layers both map to slot 2. Bases
  // agree up to their 1/sqrt(fan-in) scale.
  EXPECT_LE(oracle::max_relative(a.layer(0).base_weight * std::sqrt(6.0),
                                 Matrix(b.layer(0).base_weight.topLeftCorner(6, 6)) * std::sqrt(9.0)),
            1e-15);
  EXPECT_TRUE(bit_equal(a.layer(0).A, Matrix(b.layer(0).A.topRows(6))));
  EXPECT_TRUE(bit_equal(a.layer(1).A, Matrix(b.layer(2).A.topRows(6))));
  EXPECT_FALSE(bit_equal(a.layer(0).mask, b.layer(0).mask) && bit_equal(a.layer(1).mask, b.layer(2).mask));
}

TEST(Accuracy, CountsArgmaxHits) {
  Matrix logits(4, 2);
  logits << 1, 0, 0, 1, 2, 1, -1, 3;
  EXPECT_DOUBLE_EQ(accuracy(logits, {0, 1, 1, 1}), 0.75);
}

}  // namespace
