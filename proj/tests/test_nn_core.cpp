#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

using namespace fedstyle;
using namespace fedstyle::testing;

namespace {

EncoderParams identity_encoder(std::size_t d) {
  EncoderParams p;
  p.activation = Activation::identity;
  DenseLayer l{Tensor::matrix(d, d), Tensor({d}, 0.0)};
  for (std::size_t i = 0; i < d; ++i) l.weight(i, i) = 1.0;
  p.layers.push_back(l);
  return p;
}

// Loss of a full encoder + normalization + recognition pipeline, for a
// parameter-level gradient check.
double pipeline_loss(const EncoderParams& enc, const Tensor& x, const std::vector<Label>& y,
                     const Tensor& protos) {
  return recognition_loss(l2_normalize(forward_encoder(enc, x)), y, protos, 0.5).loss;
}

}  // namespace

TEST(Tensor, RejectsMismatchedShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor::from_rows({{1, 2}, {3}}), ShapeError);
}

TEST(Encoder, IdentityLayerPassesInputThrough) {
  const auto out = forward_encoder(identity_encoder(2), Tensor::from_rows({{1, 2}}));
  EXPECT_EQ(out, Tensor::from_rows({{1, 2}}));
}

TEST(Encoder, ZeroWeightsGiveBias) {
  EncoderParams p = identity_encoder(3);
  p.layers[0].weight = Tensor::matrix(3, 3);
  p.layers[0].bias = Tensor::vector({0.5, -1, 2});
  const auto out = forward_encoder(p, Tensor::from_rows({{1, 2, 3}, {-4, 5, 6}}));
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_EQ(out(r, 0), 0.5);
    EXPECT_EQ(out(r, 1), -1.0);
    EXPECT_EQ(out(r, 2), 2.0);
  }
}

TEST(Encoder, MatchesHandRolledForward) {
  for (Activation act : {Activation::tanh, Activation::relu, Activation::identity}) {
    std::mt19937_64 rng(11);
    const std::vector<std::size_t> dims{5, 7, 3};
    EncoderParams p = make_encoder(dims, act, rng);
    for (double& b : p.layers[0].bias.values()) b = 0.1;
    const Tensor x = random_matrix(4, 5, rng);
    const Tensor out = forward_encoder(p, x);
    for (std::size_t r = 0; r < 4; ++r) {
      double h[7];
      for (int j = 0; j < 7; ++j) {
        double s = p.layers[0].bias[j];
        for (int c = 0; c < 5; ++c) s += p.layers[0].weight(j, c) * x(r, c);
        h[j] = act == Activation::tanh ? std::tanh(s)
               : act == Activation::relu ? (s > 0 ? s : 0.0)
                                         : s;
      }
      for (int o = 0; o < 3; ++o) {
        double s = p.layers[1].bias[o];
        for (int j = 0; j < 7; ++j) s += p.layers[1].weight(o, j) * h[j];
        EXPECT_NEAR(out(r, o), s, 1e-12);
      }
    }
  }
}

TEST(Encoder, RejectsWrongInputDim) {
  std::mt19937_64 rng(1);
  const std::vector<std::size_t> dims{4, 3};
  const auto p = make_encoder(dims, Activation::tanh, rng);
  EXPECT_THROW(forward_encoder(p, Tensor::matrix(2, 5)), ShapeError);
}

TEST(Encoder, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const std::vector<std::size_t> dims{4, 6, 3};
  for (Activation act : {Activation::tanh, Activation::identity}) {
    EncoderParams p = make_encoder(dims, act, rng);
    const Tensor x = random_matrix(6, 4, rng);
    const auto y = pk_labels(3, 2);
    const Tensor protos = random_unit_rows(3, 3, rng);
    const auto trace = forward_encoder_traced(p, x);
    const Tensor unit = l2_normalize(trace.output);
    const auto rec = recognition_loss(unit, y, protos, 0.5);
    const auto grads = backward_encoder(p, trace, l2_normalize_backward(trace.output, rec.grad));
    auto pt = p.tensors();
    auto gt = grads.tensors();
    for (std::size_t t = 0; t < pt.size(); ++t) {
      const Tensor orig = *pt[t];
      const Tensor num = numeric_gradient(
          [&](const Tensor& v) {
            *pt[t] = v;
            return pipeline_loss(p, x, y, protos);
          },
          orig);
      *pt[t] = orig;
      EXPECT_LT(max_relative_error(*gt[t], num), 1e-4) << "tensor " << t;
    }
  }
}

TEST(Normalize, HandCases) {
  const auto a = l2_normalize(Tensor::from_rows({{3, 4}}));
  EXPECT_DOUBLE_EQ(a(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(a(0, 1), 0.8);
  const auto b = l2_normalize(Tensor::from_rows({{2, 0, 0}}));
  EXPECT_EQ(b, Tensor::from_rows({{1, 0, 0}}));
  const auto u = Tensor::from_rows({{0.6, 0.8}});
  EXPECT_LT(max_abs_diff(l2_normalize(u), u), 1e-15);
}

TEST(Normalize, ZeroRowRejected) {
  EXPECT_THROW(l2_normalize(Tensor::from_rows({{0, 0}, {1, 0}})), DegenerateInputError);
}

TEST(CrossEntropy, UniformLogitsGiveLogP) {
  const std::vector<Label> y{2};
  EXPECT_NEAR(cross_entropy_loss(Tensor::matrix(1, 4, 0.7), y).loss, std::log(4.0), 1e-15);
}

TEST(CrossEntropy, LargeMarginDrivesLossToZero) {
  const std::vector<Label> y{0};
  const auto r = cross_entropy_loss(Tensor::from_rows({{200, 0, 0}}), y);
  EXPECT_LT(r.loss, 1e-80);
  EXPECT_TRUE(r.grad.all_finite());
}

TEST(CrossEntropy, GradientOnRandom3x5) {
  std::mt19937_64 rng(8);
  const Tensor z = random_matrix(3, 5, rng, 2.0);
  const std::vector<Label> y{4, 0, 2};
  const auto r = cross_entropy_loss(z, y);
  const auto num = numeric_gradient([&](const Tensor& v) { return cross_entropy_loss(v, y).loss; }, z);
  EXPECT_LT(max_relative_error(r.grad, num), 1e-6);
}

TEST(CrossEntropy, LabelOutOfRange) {
  const std::vector<Label> y{5};
  EXPECT_THROW(cross_entropy_loss(Tensor::matrix(1, 3), y), IndexError);
}

TEST(CrossEntropy, SmoothedGradient) {
  std::mt19937_64 rng(9);
  const Tensor z = random_matrix(4, 6, rng);
  const std::vector<Label> y{1, 5, 0, 3};
  const auto r = cross_entropy_loss(z, y, 0.1);
  const auto num =
      numeric_gradient([&](const Tensor& v) { return cross_entropy_loss(v, y, 0.1).loss; }, z);
  EXPECT_LT(max_relative_error(r.grad, num), 1e-6);
}

TEST(Triplet, SatisfiedMarginGivesZero) {
  const Tensor f = Tensor::from_rows({{0, 0}, {0, 0}, {5, 0}, {5, 0}});
  const std::vector<Label> y{0, 0, 1, 1};
  const auto r = triplet_loss(f, y, 0.3);
  EXPECT_EQ(r.loss, 0.0);
  for (double g : r.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(Triplet, EqualDistancesGiveMargin) {
  // Every anchor sees d_ap = 1 and d_an = 1.
  const double s = std::sqrt(3.0) / 2.0;
  const Tensor f = Tensor::from_rows({{0, 0}, {1, 0}, {0.5, s}, {0.5, s}});
  const std::vector<Label> y{0, 0, 1, 1};
  // Anchors 2 and 3 coincide: d_ap = 0 for them, so only anchors 0 and 1
  // contribute exactly the margin.
  const auto r = triplet_loss(f, y, 0.3);
  EXPECT_NEAR(r.loss, (0.3 + 0.3 + 0.0 + 0.0) / 4.0, 1e-12);

  const Tensor g = Tensor::from_rows({{0, 0}, {1, 0}});
  const std::vector<Label> y2{0, 0};
  EXPECT_THROW(triplet_loss(g, y2, 0.3), SamplingError);
}

TEST(Triplet, SingleInstanceIdentityRejected) {
  const std::vector<Label> y{0, 0, 1};
  EXPECT_THROW(triplet_loss(Tensor::matrix(3, 2, 1.0), y, 0.3), SamplingError);
}

TEST(Triplet, GradientOnRandomPkBatch) {
  std::mt19937_64 rng(21);
  const auto y = pk_labels(3, 3);
  const Tensor f = random_matrix(9, 4, rng, 0.5);
  const auto r = triplet_loss(f, y, 0.3);
  ASSERT_GT(r.loss, 0.0);
  const auto num = numeric_gradient([&](const Tensor& v) { return triplet_loss(v, y, 0.3).loss; }, f);
  EXPECT_LT(max_relative_error(r.grad, num), 1e-4);
}

TEST(Recognition, SinglePrototypeGivesZero) {
  std::mt19937_64 rng(2);
  const std::vector<Label> y{0, 0};
  const auto r = recognition_loss(random_unit_rows(2, 3, rng), y, random_unit_rows(1, 3, rng), 0.05);
  EXPECT_NEAR(r.loss, 0.0, 1e-15);
}

TEST(Recognition, OrthogonalPrototypesHandValue) {
  const Tensor protos = Tensor::from_rows({{1, 0}, {0, 1}});
  const std::vector<Label> y{0};
  const auto r = recognition_loss(Tensor::from_rows({{1, 0}}), y, protos, 1.0);
  EXPECT_NEAR(r.loss, std::log(1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(r.loss, 0.3133, 5e-5);
}

TEST(Recognition, Errors) {
  const Tensor protos = Tensor::from_rows({{1, 0}, {0, 1}});
  const std::vector<Label> bad{2};
  EXPECT_THROW(recognition_loss(Tensor::from_rows({{1, 0}}), bad, protos, 0.05), IndexError);
  const std::vector<Label> y{0};
  EXPECT_THROW(recognition_loss(Tensor::from_rows({{1, 0}}), y, protos, 0.0), ConfigError);
}

TEST(Recognition, GradientOnRandomUnitInputs) {
  std::mt19937_64 rng(13);
  const Tensor f = random_unit_rows(6, 5, rng);
  const Tensor protos = random_unit_rows(4, 5, rng);
  const std::vector<Label> y{0, 1, 2, 3, 1, 0};
  const auto r = recognition_loss(f, y, protos, 0.1);
  const auto num = numeric_gradient(
      [&](const Tensor& v) { return recognition_loss(v, y, protos, 0.1).loss; }, f);
  EXPECT_LT(max_relative_error(r.grad, num), 1e-4);
}

namespace {

struct Scalar {
  Tensor w = Tensor::vector({1.0, -2.0});
  std::vector<Tensor*> tensors() { return {&w}; }
  std::vector<const Tensor*> tensors() const { return {&w}; }
};

}  // namespace

TEST(Sgd, ZeroLearningRateIsNoOp) {
  Scalar p, g;
  g.w = Tensor::vector({3.0, 4.0});
  OptimizerState s;
  s.base_lr = s.current_lr = 0.0;
  sgd_step(p, g, s);
  EXPECT_EQ(p.w, Tensor::vector({1.0, -2.0}));
}

TEST(Sgd, VanillaStep) {
  Scalar p, g;
  g.w = Tensor::vector({3.0, 4.0});
  OptimizerState s;
  s.current_lr = 0.1;
  s.sgd_momentum = 0.0;
  s.weight_decay = 0.0;
  sgd_step(p, g, s);
  EXPECT_EQ(p.w[0], 1.0 - 0.1 * 3.0);
  EXPECT_EQ(p.w[1], -2.0 - 0.1 * 4.0);
}

TEST(Sgd, TwoStepsMomentumClosedForm) {
  Scalar p, g;
  g.w = Tensor::vector({3.0, 4.0});
  OptimizerState s;
  s.current_lr = 0.1;
  s.sgd_momentum = 0.9;
  s.weight_decay = 0.0;
  sgd_step(p, g, s);
  sgd_step(p, g, s);
  // v1 = g, v2 = mu g + g; theta2 = theta0 - lr (v1 + v2).
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(s.velocity[0][i], 0.9 * g.w[i] + g.w[i], 1e-15);
  }
  EXPECT_NEAR(p.w[0], 1.0 - 0.1 * (3.0 + 1.9 * 3.0), 1e-14);
  EXPECT_NEAR(p.w[1], -2.0 - 0.1 * (4.0 + 1.9 * 4.0), 1e-14);
}

TEST(Sgd, WeightDecayIsCoupled) {
  Scalar p, g;
  g.w = Tensor::vector({0.0, 0.0});
  OptimizerState s;
  s.current_lr = 0.5;
  s.sgd_momentum = 0.0;
  s.weight_decay = 0.1;
  sgd_step(p, g, s);
  EXPECT_NEAR(p.w[0], 1.0 - 0.5 * 0.1 * 1.0, 1e-15);
}

TEST(LrSchedule, Milestones) {
  OptimizerState s;
  lr_schedule(s, 0);
  EXPECT_DOUBLE_EQ(s.current_lr, 1e-3);
  lr_schedule(s, 25);
  EXPECT_DOUBLE_EQ(s.current_lr, 1e-4);
  lr_schedule(s, 45);
  EXPECT_DOUBLE_EQ(s.current_lr, 1e-5);
  lr_schedule(s, 19);
  EXPECT_DOUBLE_EQ(s.current_lr, 1e-3);
}

TEST(Defaults, OptimizerAndLoss) {
  OptimizerState s;
  EXPECT_EQ(s.base_lr, 1e-3);
  EXPECT_EQ(s.weight_decay, 5e-4);
  EXPECT_EQ(s.sgd_momentum, 0.9);
  EXPECT_EQ(s.milestones, (std::vector<std::size_t>{20, 40}));
  LossConfig l;
  EXPECT_EQ(l.temperature, 0.05);
  EXPECT_EQ(l.triplet_margin, 0.3);
  EXPECT_EQ(l.label_smoothing, 0.0);
}
