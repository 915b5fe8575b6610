#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rave/eval_metrics.hpp"
#include "rave/mock_backend.hpp"
#include "rave/random.hpp"

namespace rave {
namespace {

Image noise_image(Index h, Index w, std::uint64_t seed) {
  Rng rng(seed);
  Image im(h, w);
  for (Index i = 0; i < im.pixels.size(); ++i) im.pixels(i) = static_cast<float>(rng.uniform());
  return im;
}

Image add_noise(const Image& im, double amp, std::uint64_t seed) {
  Rng rng(seed);
  Image out = im;
  for (Index i = 0; i < out.pixels.size(); ++i)
    out.pixels(i) = std::clamp(out.pixels(i) + static_cast<float>(amp * (2 * rng.uniform() - 1)), 0.0f, 1.0f);
  return out;
}

// Direct window sums at every valid position.
double ssim_oracle(const Image& a, const Image& b) {
  const Index k = 11, h = a.height, w = a.width;
  double g[11], gs = 0;
  for (int i = 0; i < k; ++i) gs += g[i] = std::exp(-(i - 5.0) * (i - 5.0) / (2 * 1.5 * 1.5));
  auto lum = [](const Image& im, Index y, Index x) {
    return 0.299 * im.at(0, y, x) + 0.587 * im.at(1, y, x) + 0.114 * im.at(2, y, x);
  };
  double total = 0;
  for (Index y = 0; y + k <= h; ++y) {
    for (Index x = 0; x + k <= w; ++x) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (Index i = 0; i < k; ++i) {
        for (Index j = 0; j < k; ++j) {
          const double wt = g[i] * g[j] / (gs * gs);
          const double p = lum(a, y + i, x + j), q = lum(b, y + i, x + j);
          mx += wt * p;
          my += wt * q;
          xx += wt * p * p;
          yy += wt * q * q;
          xy += wt * p * q;
        }
      }
      const double c1 = 1e-4, c2 = 9e-4;
      total += (2 * mx * my + c1) * (2 * (xy - mx * my) + c2) /
               ((mx * mx + my * my + c1) * (xx - mx * mx + yy - my * my + c2));
    }
  }
  return total / static_cast<double>((h - k + 1) * (w - k + 1));
}

TEST(Psnr, ClosedForms) {
  const Image a = noise_image(8, 8, 1);
  EXPECT_EQ(psnr(a, a), kPsnrIdentical);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_NEAR(psnr(Image(4, 4, 0.0f), Image(4, 4, 0.1f)), 20.0, 1e-5);
  EXPECT_THROW(psnr(Image(4, 4), Image(4, 5)), ShapeError);
}

TEST(Psnr, MatchesDirectRecomputation) {
  const Image a = noise_image(9, 13, 2), b = noise_image(9, 13, 3);
  double mse = 0;
  for (Index i = 0; i < a.pixels.size(); ++i) {
    const double d = double(a.pixels(i)) - double(b.pixels(i));
    mse += d * d;
  }
  mse /= static_cast<double>(a.pixels.size());
  EXPECT_NEAR(psnr(a, b), -10 * std::log10(mse), 1e-9);
  EXPECT_EQ(psnr(a, b), psnr(b, a));
}

TEST(Psnr, DecreasesAlongNoiseLadder) {
  const Image clean = noise_image(32, 32, 4);
  double prev = kPsnrIdentical;
  for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2, 0.4}) {
    const double v = psnr(clean, add_noise(clean, amp, 5));
    EXPECT_LT(v, prev) << amp;
    prev = v;
  }
}

TEST(Ssim, IdentityAndWindowBound) {
  const Image a = noise_image(16, 20, 6);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_NEAR(ssim(Image(12, 12, 0.3f), Image(12, 12, 0.3f)), 1.0, 1e-12);
  EXPECT_THROW(ssim(Image(8, 8), Image(8, 8)), InvalidInputError);
  EXPECT_THROW(ssim(Image(16, 16), Image(16, 17)), ShapeError);
}

TEST(Ssim, MatchesScalarLoopOracle) {
  const Image c(16, 16, 0.4f);
  const Image cn = add_noise(c, 1e-3, 7);
  EXPECT_NEAR(ssim(c, cn), ssim_oracle(c, cn), 1e-9);
  const Image a = noise_image(16, 16, 8), b = add_noise(a, 0.2, 9);
  EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-9);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  const Image r = noise_image(19, 23, 10), s = noise_image(19, 23, 11);
  EXPECT_NEAR(ssim(r, s), ssim_oracle(r, s), 1e-9);
  EXPECT_LT(ssim(r, s), 0.5);
}

Eigen::MatrixXd gaussian(Index n, Index d, double offset, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd x(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) x(i, j) = rng.normal() + offset;
  return x;
}

TEST(Fid, ZeroForIdenticalSets) {
  const Eigen::MatrixXd x = gaussian(50, 6, 0.0, 1);
  EXPECT_NEAR(fid(x, x), 0.0, 1e-6);
}

TEST(Fid, OneDimensionalClosedForm) {
  const Eigen::MatrixXd a = gaussian(7, 1, 0.3, 2), b = gaussian(9, 1, -0.2, 3);
  auto moments = [](const Eigen::MatrixXd& x) {
    const double m = x.mean();
    return std::pair{m, std::sqrt((x.array() - m).square().sum() / double(x.rows() - 1))};
  };
  const auto [ma, sa] = moments(a);
  const auto [mb, sb] = moments(b);
  EXPECT_NEAR(fid(a, b), (ma - mb) * (ma - mb) + (sa - sb) * (sa - sb), 1e-12);
}

TEST(Fid, MeanOffsetOfUnitGaussians) {
  const Index n = 20000;
  const double delta = 1.5;
  const double v = fid(gaussian(n, 1, 0.0, 4), gaussian(n, 1, delta, 5));
  // Standard error of the squared mean difference dominates: 2 delta sqrt(2/n).
  const double se = 2 * delta * std::sqrt(2.0 / n);
  EXPECT_NEAR(v, delta * delta, 4 * se);
}

TEST(Fid, SymmetricAndRotationInvariant) {
  const Eigen::MatrixXd a = gaussian(40, 5, 0.0, 6), b = gaussian(60, 5, 0.4, 7);
  EXPECT_NEAR(fid(a, b), fid(b, a), 1e-6);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian(5, 5, 0, 8)).householderQ();
  EXPECT_NEAR(fid(a * q, b * q), fid(a, b), 1e-5);
}

TEST(Fid, Errors) {
  EXPECT_THROW(fid(gaussian(1, 3, 0, 1), gaussian(5, 3, 0, 2)), InvalidInputError);
  EXPECT_THROW(fid(gaussian(5, 3, 0, 1), gaussian(5, 4, 0, 2)), ShapeError);
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(2, 2);
  m(1, 1) = -1;
  EXPECT_THROW(sqrt_psd(m), NumericalError);
}

TEST(SqrtPsd, SquaresBack) {
  const Eigen::MatrixXd x = gaussian(30, 4, 0, 9);
  const Eigen::MatrixXd c = x.transpose() * x;
  const Eigen::MatrixXd r = sqrt_psd(c);
  EXPECT_LT((r * r - c).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(MetricSelection, ParsesLists) {
  const auto s = MetricSelection::parse("psnr,ssim");
  EXPECT_TRUE(s.psnr && s.ssim && !s.lpips && !s.fid);
  EXPECT_EQ(s.to_string(), "psnr,ssim");
  EXPECT_FALSE(MetricSelection::parse("").any_paired());
  EXPECT_THROW(MetricSelection::parse("psnr,niqe"), ConfigError);
}

struct ToyPairs {
  std::vector<Image> back, well;
};

ToyPairs toy_pairs() {
  ToyPairs t;
  for (int i = 0; i < 4; ++i) {
    t.well.push_back(noise_image(16, 16, 100 + i));
    Image b = t.well.back();
    b.pixels *= 0.3f + 0.1f * i;
    t.back.push_back(b);
  }
  return t;
}

TEST(Evaluate, MeansEqualHandAveragedValues) {
  const ToyPairs t = toy_pairs();
  const EvalIterator it(memory_corpus(t.back, t.well, true), 0);
  auto brighten = [](const Image& im) {
    Image o = im;
    o.pixels = (o.pixels * 2.0f).min(1.0f);
    return o;
  };
  const MetricsReport r = evaluate(brighten, it, MetricSelection::parse("psnr,ssim"));
  ASSERT_EQ(r.per_image.size(), 4u);
  double ps = 0, ss = 0;
  for (int i = 0; i < 4; ++i) {
    const Image out = brighten(t.back[i]);
    EXPECT_EQ(*r.per_image[i].psnr, psnr(out, t.well[i]));
    EXPECT_EQ(*r.per_image[i].ssim, ssim(out, t.well[i]));
    ps += psnr(out, t.well[i]);
    ss += ssim(out, t.well[i]);
  }
  EXPECT_EQ(*r.psnr, ps / 4);
  EXPECT_EQ(*r.ssim, ss / 4);
  EXPECT_FALSE(r.lpips);
  EXPECT_FALSE(r.fid);
}

TEST(Evaluate, IdentityModelReproducesBaseline) {
  const ToyPairs t = toy_pairs();
  auto m = build_model(UNetConfig{2, 2, 0.9}, 1);
  const std::size_t head = m.params.size() - 2;
  m.params.value(head).data.setZero();
  m.params.value(head + 1).data.setConstant(40.0f);
  const MetricsReport r = evaluate(m, EvalIterator(memory_corpus(t.back, t.well, true), 0), MetricSelection{true});
  double baseline = 0;
  for (int i = 0; i < 4; ++i) baseline += psnr(t.back[i], t.well[i]);
  EXPECT_NEAR(*r.psnr, baseline / 4, 1e-12);
}

TEST(Evaluate, SelectionAndCorpusErrors) {
  const ToyPairs t = toy_pairs();
  auto same = [](const Image& im) { return im; };
  const MetricsReport empty = evaluate(same, EvalIterator(memory_corpus(t.back, t.well, true), 0), {});
  EXPECT_EQ(empty.per_image.size(), 4u);
  EXPECT_FALSE(empty.psnr || empty.ssim || empty.lpips || empty.fid);
  const EvalIterator unpaired(memory_corpus(t.back, t.well, false), 0);
  EXPECT_THROW(evaluate(same, unpaired, MetricSelection::parse("psnr")), ConfigError);
  const EvalIterator paired(memory_corpus(t.back, t.well, true), 0);
  EXPECT_THROW(evaluate(same, paired, MetricSelection::parse("lpips")), ConfigError);
  EXPECT_THROW(evaluate(same, paired, MetricSelection::parse("fid")), ConfigError);
}

TEST(Evaluate, FidThroughEmbeddingFeatures) {
  const ToyPairs t = toy_pairs();
  auto backend = std::make_shared<const MockLinearBackend<float>>();
  MetricAdapters adapters;
  adapters.fid = std::make_shared<EmbeddingFeatures>(backend);
  auto same = [](const Image& im) { return im; };
  const MetricsReport r =
      evaluate(same, EvalIterator(memory_corpus(t.back, t.well, false), 0), MetricSelection::parse("fid"), adapters);
  const EmbeddingFeatures f(backend);
  EXPECT_NEAR(*r.fid, fid(f.features(t.back), f.features(t.well)), 1e-9);
  EXPECT_EQ(r.fid_features, "mock-linear-8");
}

TEST(MetricsReport, TableAndRecordFiles) {
  MetricsReport r;
  r.selection = MetricSelection::parse("psnr,ssim");
  r.per_image = {{"a.png", 20.0, 0.5, std::nullopt}, {"b.png", kPsnrIdentical, 1.0, std::nullopt}};
  r.psnr = kPsnrIdentical;
  r.ssim = 0.75;
  const std::string rec = r.record();
  EXPECT_NE(rec.find("psnr=inf\n"), std::string::npos);
  EXPECT_NE(rec.find("ssim=0.75\n"), std::string::npos);
  EXPECT_NE(rec.find("image.a.png.psnr=20\n"), std::string::npos);
  EXPECT_NE(rec.find("count=2\n"), std::string::npos);
  const std::string table = r.table();
  EXPECT_NE(table.find("mean"), std::string::npos);
  EXPECT_NE(table.find("20.00"), std::string::npos);
  const auto stem = std::filesystem::temp_directory_path() / "rave_metrics_report";
  write_report(r, stem);
  std::ifstream in(stem.string() + ".record");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(text, rec);
  std::filesystem::remove(stem.string() + ".record");
  std::filesystem::remove(stem.string() + ".txt");
}

}  // namespace
}  // namespace rave
