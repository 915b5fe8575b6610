#include <gtest/gtest.h>

#include "rave/data_pipeline.hpp"
#include "rave/mock_backend.hpp"
#include "rave/prompt_tuning.hpp"

namespace rave {

namespace {

const MockLinearBackend<float>& image_only() {
  static const MockLinearBackend<float> b;
  return b;
}
const MockTextBackend<float>& with_text() {
  static const MockTextBackend<float> b;
  return b;
}

struct Labeled {
  RowMatrix<float> emb;
  std::vector<int> labels;
};

Labeled toy_set(const EmbeddingBackend<float>& backend, std::size_t count, std::uint64_t seed) {
  const SyntheticCorpus c = synthetic_corpus(count, 32, seed, false);
  std::vector<Image> all = c.dark;
  all.insert(all.end(), c.bright.begin(), c.bright.end());
  Labeled out{encode_image(backend, all), {}};
  out.labels.assign(count, 0);
  out.labels.resize(2 * count, 1);
  return out;
}

TEST(InitGuidance, LatentIsSeededAndScaled) {
  const auto a = init_guidance(GuidanceKind::latent_space, 7, image_only());
  const auto b = init_guidance(GuidanceKind::latent_space, 7, image_only());
  const auto c = init_guidance(GuidanceKind::latent_space, 8, image_only());
  EXPECT_EQ(a.positive().shape, (Shape{8}));
  EXPECT_EQ(a.negative().shape, (Shape{8}));
  EXPECT_TRUE((a.positive().data == b.positive().data).all());
  EXPECT_TRUE((a.negative().data == b.negative().data).all());
  EXPECT_FALSE((a.positive().data == c.positive().data).all());
  EXPECT_FALSE((a.positive().data == a.negative().data).all());
  EXPECT_LT(a.positive().data.abs().maxCoeff(), 0.02f * 5);
}

TEST(InitGuidance, TokenSpaceShapeAndTowerRequirement) {
  const auto p = init_guidance(GuidanceKind::token_space, 7, with_text());
  EXPECT_EQ(p.positive().shape, (Shape{16, 8}));
  EXPECT_EQ(p.token_count(), 16);
  EXPECT_EQ(init_guidance(GuidanceKind::token_space, 7, with_text(), 4).token_count(), 4);
  EXPECT_THROW(init_guidance(GuidanceKind::token_space, 7, image_only()), NoTextTowerError);
  EXPECT_THROW(init_guidance(GuidanceKind::token_space, 7, with_text(), 0), ConfigError);
}

TEST(Project, LatentIsIdentity) {
  const auto p = init_guidance(GuidanceKind::latent_space, 3, image_only());
  const auto [pos, neg] = project(p, image_only());
  EXPECT_TRUE((pos.array() == p.positive().data).all());
  EXPECT_TRUE((neg.array() == p.negative().data).all());
}

TEST(Project, TokenSpaceMatchesMockOracle) {
  const auto p = init_guidance(GuidanceKind::token_space, 3, with_text(), 5);
  const auto [pos, neg] = project(p, with_text());
  const Eigen::VectorXf expect_pos = p.positive().matrix().colwise().mean().transpose();
  const Eigen::VectorXf expect_neg = p.negative().matrix().colwise().mean().transpose();
  EXPECT_LT((pos - expect_pos).cwiseAbs().maxCoeff(), 1e-7f);
  EXPECT_LT((neg - expect_neg).cwiseAbs().maxCoeff(), 1e-7f);
  const auto again = project(p, with_text());
  EXPECT_TRUE((again.first.array() == pos.array()).all());
}

TEST(GuidanceInitStep, ZeroLearningRateLeavesPairUnchanged) {
  auto p = init_guidance(GuidanceKind::latent_space, 1, image_only());
  const auto before = p.params.values();
  const Labeled set = toy_set(image_only(), 4, 2);
  GuidanceOptimizer<float> opt;
  opt.adam.lr = 0.0;
  const double before_loss = guidance_init_loss(p, image_only(), set.emb, set.labels);
  const auto r = guidance_init_step(p, image_only(), set.emb, set.labels, opt);
  EXPECT_NEAR(r.loss, before_loss, 1e-6);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_TRUE((p.params.value(i).data == before[i].data).all());
}

TEST(GuidanceInitStep, FullBatchStepDescends) {
  for (GuidanceKind kind : {GuidanceKind::latent_space, GuidanceKind::token_space}) {
    auto p = init_guidance(kind, 5, with_text());
    const Labeled set = toy_set(with_text(), 6, 9);
    GuidanceOptimizer<float> opt;
    opt.adam.lr = 1e-3;
    const double before = guidance_init_loss(p, with_text(), set.emb, set.labels);
    const auto r = guidance_init_step(p, with_text(), set.emb, set.labels, opt);
    EXPECT_NEAR(r.loss, before, 1e-6);
    EXPECT_LT(guidance_init_loss(p, with_text(), set.emb, set.labels), before);
  }
}

TEST(GuidanceInitStep, SeparatesSyntheticCorpus) {
  for (GuidanceKind kind : {GuidanceKind::latent_space, GuidanceKind::token_space}) {
    auto p = init_guidance(kind, 11, with_text());
    const Labeled set = toy_set(with_text(), 10, 12);
    GuidanceOptimizer<float> opt;
    opt.adam.lr = 1e-2;
    for (int i = 0; i < 300; ++i) guidance_init_step(p, with_text(), set.emb, set.labels, opt);
    EXPECT_EQ(guidance_accuracy(p, with_text(), set.emb, set.labels), 1.0) << to_string(kind);
    const Labeled held_out = toy_set(with_text(), 10, 99);
    EXPECT_GE(guidance_accuracy(p, with_text(), held_out.emb, held_out.labels), 0.85) << to_string(kind);
  }
}

TEST(GuidanceInitStep, RejectsBadBatches) {
  auto p = init_guidance(GuidanceKind::latent_space, 1, image_only());
  GuidanceOptimizer<float> opt;
  EXPECT_THROW(guidance_init_step(p, image_only(), RowMatrix<float>(0, 8), {}, opt), InvalidInputError);
  const Labeled set = toy_set(image_only(), 2, 1);
  EXPECT_THROW(guidance_init_step(p, image_only(), set.emb, {0, 1, 2, 1}, opt), InvalidInputError);
  EXPECT_THROW(guidance_init_step(p, image_only(), set.emb, {0, 1}, opt), InvalidInputError);
}

RefinementEmbeddings<float> refinement_set(const EmbeddingBackend<float>& backend) {
  const SyntheticCorpus c = synthetic_corpus(4, 32, 21, false);
  auto scaled = [](std::vector<Image> v, float f) {
    for (auto& im : v) im.pixels = (im.pixels * f).min(1.0f);
    return v;
  };
  return {encode_image(backend, c.bright), encode_image(backend, c.dark), encode_image(backend, scaled(c.dark, 3.0f)),
          encode_image(backend, scaled(c.dark, 2.0f))};
}

TEST(GuidanceRefineStep, SatisfiedMarginsLeavePairUnchanged) {
  const RefinementEmbeddings<float> e = refinement_set(image_only());
  auto p = init_guidance(GuidanceKind::latent_space, 4, image_only());
  // Orient the pair along the dark-to-bright direction so the ordering holds.
  const Eigen::VectorXf dir = (e.well_lit.colwise().mean() - e.backlit.colwise().mean()).transpose();
  p.params.value(0).data = dir.array();
  p.params.value(1).data = -dir.array();
  const auto s = refinement_scores(p, image_only(), e);
  ASSERT_LT(s[0], s[2]);
  ASSERT_LT(s[2], s[3]);
  ASSERT_LT(s[3], s[1]);
  const Margins zero{0, 0, 0};
  EXPECT_EQ(prompt_refinement_loss(s[0], s[1], s[2], s[3], zero), 0.0);
  const auto before = p.params.values();
  GuidanceOptimizer<float> opt;
  opt.adam.lr = 1e-2;
  const auto r = guidance_refine_step(p, image_only(), e, zero, opt);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_FALSE(r.updated);
  EXPECT_FALSE(opt.state.initialized());
  for (std::size_t i = 0; i < 2; ++i) EXPECT_TRUE((p.params.value(i).data == before[i].data).all());
}

TEST(GuidanceRefineStep, ViolatedOrderingLossDecreases) {
  for (GuidanceKind kind : {GuidanceKind::latent_space, GuidanceKind::token_space}) {
    const RefinementEmbeddings<float> e = refinement_set(with_text());
    auto p = init_guidance(kind, 4, with_text());
    // Start from the reversed orientation.
    GuidanceOptimizer<float> opt;
    opt.adam.lr = 1e-2;
    const Margins m;
    const auto s0 = refinement_scores(p, with_text(), e);
    const double first = prompt_refinement_loss(s0[0], s0[1], s0[2], s0[3], m);
    for (int i = 0; i < 100; ++i) guidance_refine_step(p, with_text(), e, m, opt);
    const auto s1 = refinement_scores(p, with_text(), e);
    EXPECT_LT(prompt_refinement_loss(s1[0], s1[1], s1[2], s1[3], m), first - 0.1) << to_string(kind);
  }
}

TEST(GuidanceRefineStep, LatentNeedsNoTextTower) {
  const RefinementEmbeddings<float> e = refinement_set(image_only());
  auto p = init_guidance(GuidanceKind::latent_space, 4, image_only());
  const std::string sum = image_only().info().weight_checksum;
  GuidanceOptimizer<float> opt;
  const auto r = guidance_refine_step(p, image_only(), e, Margins{}, opt);
  EXPECT_TRUE(r.updated);
  EXPECT_EQ(image_only().info().weight_checksum, sum);
  EXPECT_THROW(guidance_refine_step(p, image_only(), {e.well_lit, e.backlit, e.enhanced, RowMatrix<float>(0, 8)},
                                    Margins{}, opt),
               InvalidInputError);
}

TEST(Guidance, DeterministicTrajectories) {
  auto run = [] {
    auto p = init_guidance(GuidanceKind::token_space, 2, with_text());
    const Labeled set = toy_set(with_text(), 4, 3);
    GuidanceOptimizer<float> opt;
    opt.adam.lr = 1e-3;
    std::vector<double> losses;
    for (int i = 0; i < 5; ++i) losses.push_back(guidance_init_step(p, with_text(), set.emb, set.labels, opt).loss);
    return std::make_pair(losses, checksum(p.params));
  };
  EXPECT_EQ(run(), run());
}

TEST(Guidance, ArchiveRoundTrip) {
  const auto p = init_guidance(GuidanceKind::token_space, 2, with_text(), 3);
  TensorArchive a;
  store_guidance(a, p);
  const auto back = load_guidance(decode_archive(encode_archive(a, kCheckpointMagic), kCheckpointMagic));
  EXPECT_EQ(back.kind, GuidanceKind::token_space);
  EXPECT_EQ(checksum(back.params), checksum(p.params));
}

}  // namespace
}  // namespace rave
