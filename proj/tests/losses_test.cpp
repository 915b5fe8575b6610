#include <gtest/gtest.h>

#include <cmath>

#include "rave/losses.hpp"
#include "rave/mock_backend.hpp"
#include "support/gradcheck.hpp"

namespace rave {
namespace {

using testing::check_gradient;
using testing::random_tensor;

Var<double> row(Graph<double>& g, std::initializer_list<double> v) {
  Vector<double> x(static_cast<Index>(v.size()));
  Index i = 0;
  for (double e : v) x(i++) = e;
  return g.constant(Tensor<double>::from_matrix(x.transpose()));
}

Var<double> scalar(Graph<double>& g, double v) { return g.constant(Tensor<double>::scalar(v)); }

TEST(GuidanceSoftmax, ClosedForms) {
  EXPECT_NEAR(guidance_softmax(0.3, 0.3), 0.5, 1e-12);
  EXPECT_NEAR(guidance_softmax(1, -1), std::exp(2.0) / (std::exp(2.0) + 1), 1e-12);
  EXPECT_NEAR(guidance_softmax(1, -1), 0.8808, 1e-4);
  EXPECT_NEAR(guidance_softmax(-1, 1), 0.1192, 1e-4);
  EXPECT_NEAR(guidance_softmax(-1, 1) + guidance_softmax(1, -1), 1.0, 1e-12);
  Graph<double> g;
  EXPECT_NEAR(guidance_softmax(scalar(g, 1), scalar(g, -1)).item(), guidance_softmax(1, -1), 1e-15);
}

TEST(ClassificationLoss, ClosedForms) {
  EXPECT_NEAR(initial_classification_loss(0.5, 1), std::log(2.0), 1e-12);
  EXPECT_NEAR(initial_classification_loss(0.5, 0), std::log(2.0), 1e-12);
  EXPECT_NEAR(initial_classification_loss(0.8808, 1), -std::log(0.8808), 1e-12);
  EXPECT_NEAR(initial_classification_loss(0.8808, 1), 0.1269, 1e-4);
  EXPECT_NEAR(initial_classification_loss(0.0, 1), -std::log(1e-7), 1e-9);
  EXPECT_THROW(initial_classification_loss(1.5, 1), InvalidInputError);
  Graph<double> g;
  auto p = g.constant(Tensor<double>::from_vector(Vector<double>{{0.5, 0.8808}}));
  auto y = g.constant(Tensor<double>::from_vector(Vector<double>{{0.0, 1.0}}));
  EXPECT_NEAR(initial_classification_loss(p, y).item(), 0.5 * (std::log(2.0) - std::log(0.8808)), 1e-12);
}

TEST(ClipGuidanceLoss, ClosedForms) {
  Graph<double> g;
  auto pos = row(g, {1, 0, 0});
  auto neg = row(g, {0, 1, 0});
  EXPECT_NEAR(clip_guidance_loss(row(g, {1, 1, 0}), pos, neg).item(), 0.5, 1e-12);
  const double v = clip_guidance_loss(row(g, {2, 0, 0}), pos, neg).item();
  EXPECT_NEAR(v, 1.0 / (1.0 + std::exp(1.0)), 1e-12);
  EXPECT_NEAR(v, 0.2689, 1e-4);
  EXPECT_NEAR(clip_guidance_loss(row(g, {2, 0, 0}), neg, pos).item(), 1 - v, 1e-12);
  EXPECT_NEAR(negative_similarity_score(row(g, {2, 0, 0}), pos, neg).value().data(0), v, 1e-15);
  EXPECT_THROW(clip_guidance_loss(row(g, {1, 0, 0}), pos, row(g, {0, 0, 0})), DegenerateDirectionError);
}

TEST(ClipGuidanceLoss, SwapSumsToOne) {
  Graph<double> g;
  for (unsigned s = 0; s < 10; ++s) {
    auto e = g.constant(random_tensor({3, 8}, s));
    auto p = g.constant(random_tensor({1, 8}, 100 + s));
    auto n = g.constant(random_tensor({1, 8}, 200 + s));
    const double a = clip_guidance_loss(e, p, n).item(), b = clip_guidance_loss(e, n, p).item();
    EXPECT_NEAR(a + b, 1.0, 1e-12);
    EXPECT_GT(a, 0.0);
    EXPECT_LT(a, 1.0);
  }
}

TEST(MarginLoss, HandEvaluations) {
  Margins m{0.9, 0.2, 0.2};
  EXPECT_NEAR(prompt_refinement_loss(0, 1, 0.1, 0.5, m), 0.5, 1e-12);
  EXPECT_NEAR(prompt_refinement_loss(0, 1, 0.5, 1, Margins{0, 0, 0}), 0.0, 1e-12);
  EXPECT_NEAR(prompt_refinement_loss(0.5, 0.5, 0.5, 0.5, m), 2.2, 1e-12);
  Graph<double> g;
  EXPECT_NEAR(prompt_refinement_loss(scalar(g, 0), scalar(g, 1), scalar(g, 0.1), scalar(g, 0.5), m).item(), 0.5,
              1e-12);
}

TEST(MarginLoss, MonotoneInEachMargin) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const double s[4] = {rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
    Margins lo{rng.uniform(), rng.uniform(), rng.uniform()};
    for (int k = 0; k < 3; ++k) {
      Margins hi = lo;
      double* f = k == 0 ? &hi.m0 : k == 1 ? &hi.m1 : &hi.m2;
      *f = std::min(1.0, *f + rng.uniform() * 0.3);
      EXPECT_GE(prompt_refinement_loss(s[0], s[1], s[2], s[3], hi), prompt_refinement_loss(s[0], s[1], s[2], s[3], lo));
    }
  }
}

LayerActivations<double> acts(Graph<double>& g, std::vector<Tensor<double>> ts) {
  LayerActivations<double> a;
  for (auto& t : ts) {
    a.per_layer.push_back(g.constant(std::move(t)));
    a.layers.push_back(static_cast<Index>(a.layers.size()));
  }
  return a;
}

TEST(IdentityLoss, ClosedForms) {
  Graph<double> g;
  auto a = acts(g, {Tensor<double>::from_matrix(RowMatrix<double>{{0, 0}})});
  auto b = acts(g, {Tensor<double>::from_matrix(RowMatrix<double>{{3, 4}})});
  EXPECT_NEAR(identity_loss(a, b, {2.0}).item(), 10.0, 1e-12);
  EXPECT_EQ(identity_loss(b, b, {2.0}).item(), 0.0);
  EXPECT_THROW(identity_loss(a, b, {1.0, 1.0}), ShapeError);
  auto c = acts(g, {Tensor<double>::from_matrix(RowMatrix<double>{{3, 4, 5}})});
  EXPECT_THROW(identity_loss(a, c, {1.0}), ShapeError);
}

TEST(IdentityLoss, MatchesFlattenAndNormOracle) {
  MockLinearBackend<double> b;
  Graph<double> g;
  auto x1 = g.constant(random_tensor({1, 3, 16, 16}, 1, 0, 1));
  auto x2 = g.constant(random_tensor({1, 3, 16, 16}, 2, 0, 1));
  auto a1 = encode_image_layers(b, g, x1, b.default_layers());
  auto a2 = encode_image_layers(b, g, x2, b.default_layers());
  double oracle = 0.0;
  const std::vector<double> alpha{0.5, 2.0};
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& u = a1.per_layer[l].value().data;
    const auto& v = a2.per_layer[l].value().data;
    double ss = 0.0;
    for (Index i = 0; i < u.size(); ++i) ss += (u(i) - v(i)) * (u(i) - v(i));
    oracle += alpha[l] * std::sqrt(ss);
  }
  EXPECT_NEAR(identity_loss(a1, a2, alpha).item(), oracle, 1e-12);
}

ResidualVector toy_residual() {
  ResidualVector rv;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(8), k = Eigen::VectorXd::Zero(8);
  w(0) = 0.8;
  w(1) = 0.6;
  k(0) = 0.6;
  k(2) = 0.8;
  rv.v_well_lit = w.cast<float>();
  rv.v_backlit = k.cast<float>();
  rv.v_residual = (w - k).normalized().cast<float>();
  return rv;
}

TEST(ResidualLoss, ClosedForms) {
  const ResidualVector rv = toy_residual();
  const Eigen::VectorXd r = rv.v_residual.cast<double>(), w = rv.v_well_lit.cast<double>(),
                        k = rv.v_backlit.cast<double>();
  Graph<double> g;
  auto as_row = [&](const Eigen::VectorXd& v) { return g.constant(Tensor<double>::from_matrix(v.transpose())); };
  EXPECT_NEAR(residual_loss(as_row(w), rv).item(), 0.0, 1e-14);
  const double expect = std::pow(k.normalized().dot(r) - w.dot(r), 2);
  EXPECT_NEAR(residual_loss(as_row(k), rv).item(), expect, 1e-12);
  // Orthogonal to v_residual: projection 0, loss p^2.
  Eigen::VectorXd o = Eigen::VectorXd::Zero(8);
  o(5) = 1.0;
  ASSERT_NEAR(o.dot(r), 0.0, 1e-15);
  EXPECT_NEAR(residual_loss(as_row(o), rv).item(), std::pow(w.dot(r), 2), 1e-12);
  // Scale does not matter with normalisation on.
  EXPECT_NEAR(residual_loss(as_row(7.0 * k), rv).item(), expect, 1e-12);
}

TEST(ResidualLoss, InvariantToOrthogonalComponent) {
  const ResidualVector rv = toy_residual();
  const Eigen::VectorXd r = rv.v_residual.cast<double>();
  Graph<double> g;
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    Eigen::VectorXd e(8), n(8);
    for (int i = 0; i < 8; ++i) {
      e(i) = rng.normal();
      n(i) = rng.normal();
    }
    n -= (n.dot(r) / r.squaredNorm()) * r;  // same projection onto v_residual
    auto lhs = residual_loss(g.constant(Tensor<double>::from_matrix(e.transpose())), rv, false).item();
    auto rhs = residual_loss(g.constant(Tensor<double>::from_matrix((e + n).transpose())), rv, false).item();
    EXPECT_NEAR(lhs, rhs, 1e-12);
  }
}

TEST(CombinedLosses, WeightedSums) {
  EXPECT_NEAR(enhance_loss(0.3, 0.1, 0.9), 0.39, 1e-12);
  EXPECT_NEAR(rave_loss(0.1, 0.05, 6), 0.4, 1e-12);
  EXPECT_EQ(enhance_loss(0.3, 0.1, 0.0), 0.3);
  EXPECT_EQ(rave_loss(0.1, 0.05, 0.0), 0.1);
  Graph<double> g;
  EXPECT_NEAR(enhance_loss(scalar(g, 0.3), scalar(g, 0.1), 0.9).item(), 0.39, 1e-12);
  EXPECT_NEAR(rave_loss(scalar(g, 0.1), scalar(g, 0.05), 6).item(), 0.4, 1e-12);
}

TEST(LossConfig, Validation) {
  LossConfig c;
  c.alpha = {1.0, 1.0};
  EXPECT_NO_THROW(c.validate(2));
  EXPECT_THROW(c.validate(3), ConfigError);
  c.margins.m1 = 1.5;
  EXPECT_THROW(c.validate(2), ConfigError);
  c.margins.m1 = 0.2;
  c.omega = -1;
  EXPECT_THROW(c.validate(2), ConfigError);
}

// Gradient checks w.r.t. input pixels through the mock backend.

class PixelGradients : public ::testing::Test {
 protected:
  MockLinearBackend<double> backend;
  Tensor<double> x = random_tensor({2, 3, 16, 16}, 21, 0.05, 0.95);
  Tensor<double> ref = random_tensor({2, 3, 16, 16}, 22, 0.05, 0.95);
};

TEST_F(PixelGradients, IdentityLoss) {
  auto r = check_gradient(
      [&](Graph<double>& g, const Var<double>& v) {
        auto a = encode_image_layers(backend, g, g.constant(ref), backend.default_layers());
        auto b = encode_image_layers(backend, g, v, backend.default_layers());
        return identity_loss(a, b, {1.0, 0.5});
      },
      x, 100, 1e-4);
  EXPECT_EQ(r.failures, 0) << r.max_rel_error;
}

TEST_F(PixelGradients, ClipGuidanceLoss) {
  auto pos = random_tensor({1, 8}, 23), neg = random_tensor({1, 8}, 24);
  auto r = check_gradient(
      [&](Graph<double>& g, const Var<double>& v) {
        return clip_guidance_loss(encode_image(backend, g, v), g.constant(pos), g.constant(neg));
      },
      x, 100, 1e-4);
  EXPECT_EQ(r.failures, 0) << r.max_rel_error;
}

TEST_F(PixelGradients, ResidualLoss) {
  const ResidualVector rv = toy_residual();
  for (bool normalized : {true, false}) {
    auto r = check_gradient(
        [&](Graph<double>& g, const Var<double>& v) { return residual_loss(encode_image(backend, g, v), rv, normalized); },
        x, 100, 1e-4);
    EXPECT_EQ(r.failures, 0) << r.max_rel_error;
  }
}

TEST(GuidanceGradients, ClassificationAndMarginLoss) {
  MockLinearBackend<double> backend;
  Tensor<double> images = random_tensor({4, 3, 8, 8}, 30, 0, 1);
  Tensor<double> labels = Tensor<double>::from_vector(Vector<double>{{0, 1, 0, 1}});
  Tensor<double> pair = random_tensor({2, 8}, 31);
  auto r = check_gradient(
      [&](Graph<double>& g, const Var<double>& p) {
        auto e = encode_image(backend, g, g.constant(images));
        auto pred = guidance_softmax(cosine_rows(e, slice(p, 0, 0, 1)), cosine_rows(e, slice(p, 0, 1, 1)));
        return initial_classification_loss(pred, g.constant(labels));
      },
      pair, 0, 1e-5);
  EXPECT_EQ(r.failures, 0) << r.max_rel_error;
  auto m = check_gradient(
      [&](Graph<double>& g, const Var<double>& p) {
        auto e = encode_image(backend, g, g.constant(images));
        auto s = negative_similarity_score(e, slice(p, 0, 0, 1), slice(p, 0, 1, 1));
        return prompt_refinement_loss(slice(s, 0, 0, 1), slice(s, 0, 1, 1), slice(s, 0, 2, 1), slice(s, 0, 3, 1),
                                      Margins{0.9, 0.2, 0.2});
      },
      pair, 0, 1e-5);
  EXPECT_EQ(m.failures, 0) << m.max_rel_error;
}

}  // namespace
}  // namespace rave
