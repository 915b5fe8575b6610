#include <gtest/gtest.h>

#include <filesystem>

#include "rave/enhancement_net.hpp"
#include "rave/image_io.hpp"
#include "rave/parameters.hpp"

namespace rave {
namespace {

namespace fs = std::filesystem;

Image random_image(Index h, Index w, std::uint64_t seed) {
  Rng rng(seed);
  Image im(h, w);
  for (Index i = 0; i < im.pixels.size(); ++i) im.pixels(i) = static_cast<float>(rng.uniform());
  return im;
}

UNetConfig small(Index depth = 2, Index ch = 4) {
  UNetConfig c;
  c.depth = depth;
  c.base_channels = ch;
  return c;
}

TEST(BuildModel, SameSeedSameChecksum) {
  const UNetConfig c = small(3, 8);
  EXPECT_EQ(checksum(build_model(c, 1).params), checksum(build_model(c, 1).params));
  EXPECT_NE(checksum(build_model(c, 1).params), checksum(build_model(c, 2).params));
}

TEST(BuildModel, RejectsInvalidConfig) {
  EXPECT_THROW(build_model(small(0, 8), 1), ConfigError);
  EXPECT_THROW(build_model(small(2, 0), 1), ConfigError);
  UNetConfig c = small();
  c.initial_illumination = 1.0;
  EXPECT_THROW(build_model(c, 1), ConfigError);
}

TEST(BuildModel, InitialIlluminationNearConfigured) {
  const auto m = build_model(small(), 3);
  const EnhancedPair p = enhance(m, random_image(16, 16, 4));
  EXPECT_NEAR(p.illumination.mean(), 0.9, 0.02);
}

TEST(Enhance, ShapePreservedForArbitrarySizes) {
  const auto m = build_model(small(3, 4), 5);
  Rng rng(9);
  for (int trial = 0; trial < 6; ++trial) {
    const Index h = 5 + static_cast<Index>(rng.uniform() * 40), w = 5 + static_cast<Index>(rng.uniform() * 40);
    const EnhancedPair p = enhance(m, random_image(h, w, 100 + trial));
    EXPECT_EQ(p.enhanced.height, h);
    EXPECT_EQ(p.enhanced.width, w);
    EXPECT_EQ(p.illumination.size(), h * w);
  }
}

TEST(Enhance, PixelwiseRelationHolds) {
  const auto m = build_model(small(2, 6), 11);
  const Image in = random_image(20, 28, 12);
  const EnhancedPair p = enhance(m, in);
  const Index hw = in.height * in.width;
  for (Index c = 0; c < 3; ++c) {
    for (Index i = 0; i < hw; ++i) {
      const float illum = p.illumination(i);
      ASSERT_GT(illum, 0.0f);
      ASSERT_LE(illum, 1.0f);
      const float expect = std::clamp(in.pixels(c * hw + i) / std::max(illum, float(kIlluminationFloor)), 0.0f, 1.0f);
      ASSERT_FLOAT_EQ(p.enhanced.pixels(c * hw + i), expect);
    }
  }
}

TEST(Enhance, UnitIlluminationIsIdentity) {
  auto m = build_model(small(), 2);
  const std::size_t head = m.params.size() - 2;
  m.params.value(head).data.setZero();
  m.params.value(head + 1).data.setConstant(40.0f);
  const Image in = random_image(16, 24, 3);
  const EnhancedPair p = enhance(m, in);
  EXPECT_TRUE((p.illumination == 1.0f).all());
  EXPECT_TRUE((p.enhanced.pixels == in.pixels).all());
}

TEST(Enhance, HalfIlluminationDoubles) {
  auto m = build_model(small(), 2);
  const std::size_t head = m.params.size() - 2;
  m.params.value(head).data.setZero();
  m.params.value(head + 1).data.setZero();
  const Image in = random_image(16, 16, 8);
  const EnhancedPair p = enhance(m, in);
  EXPECT_TRUE((p.illumination == 0.5f).all());
  for (Index i = 0; i < in.pixels.size(); ++i)
    ASSERT_FLOAT_EQ(p.enhanced.pixels(i), std::min(1.0f, 2.0f * in.pixels(i)));
}

TEST(Enhance, RejectsNaN) {
  const auto m = build_model(small(), 2);
  Image in = random_image(8, 8, 1);
  in.pixels(5) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(enhance(m, in), InvalidInputError);
}

TEST(Enhance, ReleasedInferenceMatchesTrackedForward) {
  const auto m = build_model(small(2, 4), 21);
  const Image in = random_image(13, 19, 22);
  Graph<float> g;
  const auto params = m.params.bind(g, true);
  const auto out = enhance(m.config, params, g.constant(stack_images<float>(std::vector<Image>{in})));
  const EnhancedPair p = enhance(m, in);
  EXPECT_TRUE((out.enhanced.value().data == p.enhanced.pixels).all());
}

TEST(Enhance, BatchMatchesSingleImages) {
  const auto m = build_model(small(2, 4), 31);
  const std::vector<Image> ins{random_image(16, 16, 1), random_image(16, 16, 2)};
  const auto outs = enhance_images(m, ins);
  ASSERT_EQ(outs.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    const Image single = enhance(m, ins[i]).enhanced;
    EXPECT_LT((outs[i].pixels - single.pixels).abs().maxCoeff(), 1e-6f);
  }
}

TEST(Enhance, MonotoneAmplification) {
  Graph<double> g;
  Tensor<double> x(Shape{1, 3, 1, 5});
  x.data << 0.1, 0.2, 0.3, 0.05, 0.02, 0.1, 0.2, 0.3, 0.05, 0.02, 0.1, 0.2, 0.3, 0.05, 0.02;
  const Var<double> xv = g.constant(x);
  double prev[15];
  bool first = true;
  for (double illum = 1.0; illum > 1e-5; illum *= 0.8) {
    const Var<double> out =
        apply_illumination(xv, g.constant(Tensor<double>::constant(Shape{1, 1, 1, 5}, illum)));
    for (Index i = 0; i < 15; ++i) {
      if (!first) ASSERT_GE(out.value().data(i), prev[i]);
      prev[i] = out.value().data(i);
    }
    first = false;
  }
}

TEST(Enhance, GradientReachesWeights) {
  const auto m = build_model(small(2, 4), 41);
  Graph<float> g;
  const auto params = m.params.bind(g, true);
  const auto out =
      enhance(m.config, params, g.constant(stack_images<float>(std::vector<Image>{random_image(16, 16, 42)})));
  g.backward(mean(out.enhanced));
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_GT(g.grad(params[i]).data.abs().maxCoeff(), 0.0f) << m.params.name(i);
  }
}

TEST(EnhanceFile, ResizesLongSideAndRoundTrips) {
  const fs::path dir = fs::temp_directory_path() / "rave_enhance_file_test";
  fs::create_directories(dir);
  write_image(dir / "in.png", random_image(64, 128, 5));
  const auto m = build_model(small(2, 2), 1);
  const EnhanceFileReport r = enhance_file(m, dir / "in.png", dir / "out.png", 32);
  EXPECT_EQ(r.input_height, 64);
  EXPECT_EQ(r.input_width, 128);
  EXPECT_EQ(r.output_height, 16);
  EXPECT_EQ(r.output_width, 32);
  const Image back = read_image(dir / "out.png");
  EXPECT_EQ(back.height, 16);
  EXPECT_EQ(back.width, 32);
  EXPECT_THROW(enhance_file(m, dir / "in.png", dir / "out2.png", 0), ConfigError);
  EXPECT_THROW(enhance_file(m, dir / "missing.png", dir / "out3.png"), IoError);
  fs::remove_all(dir);
}

TEST(EnhanceFile, InferenceRuleAt2048) {
  const fs::path dir = fs::temp_directory_path() / "rave_enhance_2048_test";
  fs::create_directories(dir);
  write_image(dir / "wide.png", Image(2048, 4096, 0.2f));
  const auto m = build_model(small(1, 1), 1);
  const EnhanceFileReport r = enhance_file(m, dir / "wide.png", dir / "out.jpg");
  EXPECT_EQ(r.output_height, 1024);
  EXPECT_EQ(r.output_width, 2048);
  const Image back = read_image(dir / "out.jpg");
  EXPECT_EQ(back.height, 1024);
  EXPECT_EQ(back.width, 2048);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace rave
