#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "rave/binary_io.hpp"
#include "rave/hash.hpp"
#include "rave/mock_backend.hpp"
#include "rave/residual.hpp"
#include "support/backends.hpp"

namespace rave {
namespace {

namespace fs = std::filesystem;

std::vector<Image> random_images(std::size_t n, Index size, std::uint64_t seed) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, {i}));
    Image im(size, size);
    for (Index k = 0; k < im.pixels.size(); ++k) im.pixels(k) = static_cast<float>(rng.uniform());
    out.push_back(im);
  }
  return out;
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("rave_residual_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

TEST(Normalize, Examples) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(8);
  v(0) = 3;
  v(1) = 4;
  Eigen::VectorXd n = normalize(v);
  EXPECT_NEAR(n(0), 0.6, 1e-15);
  EXPECT_NEAR(n(1), 0.8, 1e-15);
  EXPECT_NEAR(n.norm(), 1.0, 1e-7);
  Eigen::VectorXd u = Eigen::VectorXd::Unit(8, 3);
  EXPECT_EQ(normalize(u), u);
  EXPECT_THROW(normalize(Eigen::VectorXd::Zero(8)), DegenerateDirectionError);
}

TEST(MeanAccumulator, MatchesTwoPassAndMerges) {
  Rng rng(5);
  std::vector<Eigen::VectorXd> xs;
  for (int i = 0; i < 1000; ++i) {
    Eigen::VectorXd v(4);
    for (int k = 0; k < 4; ++k) v(k) = rng.normal() * (k == 0 ? 1e8 : 1.0);
    xs.push_back(v);
  }
  MeanAccumulator a(4), b(4), c(4);
  Eigen::VectorXd two_pass = Eigen::VectorXd::Zero(4);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    a.add(xs[i]);
    (i < 400 ? b : c).add(xs[i]);
    two_pass += xs[i];
  }
  two_pass /= 1000.0;
  b.merge(c);
  EXPECT_TRUE(a.mean().isApprox(two_pass, 1e-12));
  EXPECT_TRUE(b.mean().isApprox(a.mean(), 1e-14));
  EXPECT_EQ(b.count(), 1000u);
  EXPECT_THROW(MeanAccumulator(2).mean(), InvalidInputError);
}

TEST(MeanEmbedding, SingleImageIsNormalisedEmbedding) {
  auto b = load_backend<double>("mock-linear-8");
  auto ims = random_images(1, 16, 1);
  MemorySource src(ims);
  Eigen::VectorXd e = encode_image(*b, ims).row(0).transpose();
  EXPECT_TRUE(mean_embedding(*b, src).isApprox(e.normalized(), 1e-14));
}

TEST(MeanEmbedding, OppositeEmbeddingsAreDegenerate) {
  testing::ChannelMeanBackend<double> b;
  MemorySource src(std::vector<Image>{Image(8, 8, 0.7f), Image(8, 8, 0.3f)});
  EXPECT_THROW(mean_embedding(b, src), DegenerateDirectionError);
  EXPECT_THROW(mean_embedding(b, MemorySource({})), InvalidInputError);
}

TEST(MeanEmbedding, MatchesBruteForce) {
  auto b = load_backend<double>("mock-linear-8");
  auto ims = random_images(5, 12, 2);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(8);
  for (const auto& im : ims) {
    Eigen::VectorXd e = encode_image(*b, std::vector<Image>{im}).row(0).transpose();
    acc += e / e.norm();
  }
  acc /= 5.0;
  EXPECT_TRUE(mean_embedding(*b, MemorySource(ims)).isApprox(acc / acc.norm(), 1e-12));
}

TEST(MeanEmbedding, MixedSizesAndLargeCorpus) {
  auto b = load_backend<float>("mock-linear-8");
  auto ims = random_images(11, 16, 3);
  ims.push_back(random_images(1, 24, 4)[0]);
  Eigen::VectorXd m = mean_embedding(*b, MemorySource(ims));
  EXPECT_NEAR(m.norm(), 1.0, 1e-12);
}

struct Corpora {
  std::vector<Image> dark, bright;
};

Corpora toy(std::size_t n = 6) {
  auto s = synthetic_corpus(n, 16, 9, false);
  return {s.dark, s.bright};
}

TEST(ComputeResidual, InvariantsOnMock) {
  auto b = load_backend<double>("mock-linear-8");
  auto c = toy();
  MemorySource dark(c.dark), bright(c.bright);
  ResidualVector rv = compute_residual(*b, dark, bright);
  EXPECT_NEAR(rv.v_residual.cast<double>().norm(), 1.0, 1e-6);
  EXPECT_NEAR(rv.v_well_lit.cast<double>().norm(), 1.0, 1e-6);
  EXPECT_NEAR(rv.v_backlit.cast<double>().norm(), 1.0, 1e-6);
  Eigen::VectorXd diff = (rv.v_well_lit - rv.v_backlit).cast<double>();
  EXPECT_NEAR(diff.normalized().dot(rv.v_residual.cast<double>()), 1.0, 1e-6);
  EXPECT_EQ(rv.n_back, 6u);
  EXPECT_EQ(rv.n_well, 6u);
  EXPECT_EQ(rv.backend_model_id, "mock-linear-8");
  EXPECT_EQ(rv.dataset_fingerprint, combine_fingerprints(dark.fingerprint(), bright.fingerprint()));
  EXPECT_NO_THROW(validate_residual(rv));

  // Antisymmetry.
  ResidualVector swapped = compute_residual(*b, bright, dark);
  EXPECT_LT((rv.v_residual + swapped.v_residual).cast<double>().norm(), 1e-6);

  // Scale invariance.
  for (double factor : {0.001, 3.0, 1000.0}) {
    testing::ScaledBackend<double> scaled(b, factor);
    ResidualVector r2 = compute_residual(scaled, dark, bright);
    EXPECT_LT((r2.v_residual - rv.v_residual).cast<double>().norm(), 1e-6) << factor;
  }

  // Order invariance.
  std::vector<Image> shuffled = c.dark;
  std::reverse(shuffled.begin(), shuffled.end());
  std::rotate(shuffled.begin(), shuffled.begin() + 2, shuffled.end());
  EXPECT_LT((mean_embedding(*b, MemorySource(shuffled)) - mean_embedding(*b, dark)).norm(), 1e-6);
}

TEST(ComputeResidual, PointsFromDarkToBright) {
  auto b = load_backend<double>("mock-linear-8");
  auto c = toy();
  ResidualVector rv = compute_residual(*b, MemorySource(c.dark), MemorySource(c.bright));
  for (std::size_t i = 0; i < c.dark.size(); ++i) {
    Eigen::VectorXd ed = encode_image(*b, std::vector<Image>{c.dark[i]}).row(0).transpose();
    Eigen::VectorXd eb = encode_image(*b, std::vector<Image>{c.bright[i]}).row(0).transpose();
    EXPECT_GT((eb - ed).dot(rv.v_residual.cast<double>()), 0.0);
  }
}

TEST(ComputeResidual, IdenticalCorporaAreDegenerate) {
  auto b = load_backend<double>("mock-linear-8");
  auto c = toy(3);
  MemorySource dark(c.dark);
  EXPECT_THROW(compute_residual(*b, dark, dark), DegenerateDirectionError);
  EXPECT_THROW(compute_residual(*b, dark, MemorySource({})), InvalidInputError);
}

ResidualVector basis_residual(Index d, Index axis) {
  ResidualVector rv;
  rv.v_residual = Eigen::VectorXf::Unit(d, axis);
  rv.v_well_lit = Eigen::VectorXf::Unit(d, axis);
  rv.v_backlit = -Eigen::VectorXf::Unit(d, axis);
  return rv;
}

TEST(Interpret, BasisVectorScoresAreFirstCoordinates) {
  MockTextBackend<double> b;
  const auto scores = score_vocabulary(b, basis_residual(8, 0));
  const auto& table = b.token_table().matrix();
  ASSERT_EQ(scores.size(), 32u);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const Eigen::VectorXd row = table.row(static_cast<Index>(i)).transpose();
    EXPECT_NEAR(scores[i].score, row(0) / row.norm(), 1e-12);
    EXPECT_EQ(scores[i].token, kMockVocabulary[i].token);
  }
}

TEST(Interpret, SortedListsTiesAndBounds) {
  std::vector<TokenSimilarity> s{{"b", 0.5}, {"a", 0.5}, {"c", -0.2}, {"d", 0.9}, {"e", -0.2}};
  auto r = rank_tokens(s, 3);
  ASSERT_EQ(r.lowest.size(), 3u);
  EXPECT_EQ(r.lowest[0].token, "c");
  EXPECT_EQ(r.lowest[1].token, "e");
  EXPECT_EQ(r.lowest[2].token, "a");
  EXPECT_EQ(r.highest[0].token, "d");
  EXPECT_EQ(r.highest[1].token, "a");
  EXPECT_EQ(r.highest[2].token, "b");

  auto b = load_backend<double>("mock-text-8");
  auto c = toy();
  ResidualVector rv = compute_residual(*b, MemorySource(c.dark), MemorySource(c.bright));
  auto one = interpret_residual(*b, rv, 1);
  EXPECT_EQ(one.lowest.size(), 1u);
  EXPECT_EQ(one.highest.size(), 1u);
  auto all = interpret_residual(*b, rv, 32);
  for (const auto& t : all.lowest) {
    EXPECT_GE(t.score, -1.0);
    EXPECT_LE(t.score, 1.0);
  }
  auto again = interpret_residual(*b, rv, 32);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(all.lowest[i].token, again.lowest[i].token);
  EXPECT_THROW(interpret_residual(*b, rv, 0), ConfigError);
  MockLinearBackend<double> image_only;
  EXPECT_THROW(interpret_residual(image_only, rv, 3), NoTextTowerError);
}

TEST(Interpret, DarkWordsScoreLowOnToyResidual) {
  auto b = load_backend<double>("mock-text-8");
  auto c = toy(8);
  ResidualVector rv = compute_residual(*b, MemorySource(c.dark), MemorySource(c.bright));
  auto r = interpret_residual(*b, rv, 5);
  const std::vector<std::string> dark_words{"dark", "darkness", "silhouette", "night", "backlit", "shadow"};
  for (const auto& t : r.lowest) {
    EXPECT_NE(std::find(dark_words.begin(), dark_words.end(), t.token), dark_words.end()) << t.token;
    EXPECT_LT(t.score, 0.0);
  }
}

TEST(TokenCorpusSimilarity, SingleImageIsOneCosine) {
  auto b = load_backend<double>("mock-text-8");
  auto ims = random_images(1, 16, 11);
  Eigen::VectorXd e = encode_image(*b, ims).row(0).transpose();
  const Index id = find_token(*b, "dark");
  Eigen::VectorXd t = b->token_embedding(id).data.matrix();
  EXPECT_NEAR(token_corpus_similarity(*b, "dark", MemorySource(ims)), e.normalized().dot(t.normalized()), 1e-12);
  EXPECT_THROW(token_corpus_similarity(*b, "zebra", MemorySource(ims)), InvalidInputError);
}

TEST(ResidualFile, RoundTripIsBitExact) {
  auto b = load_backend<float>("mock-linear-8");
  auto c = toy();
  ResidualVector rv = compute_residual(*b, MemorySource(c.dark), MemorySource(c.bright));
  const auto path = temp_dir("roundtrip") / "r.rvr";
  save_residual(rv, path);
  ResidualVector back = load_residual(path);
  EXPECT_EQ(back.v_residual, rv.v_residual);
  EXPECT_EQ(back.v_well_lit, rv.v_well_lit);
  EXPECT_EQ(back.v_backlit, rv.v_backlit);
  EXPECT_EQ(back.n_back, rv.n_back);
  EXPECT_EQ(back.n_well, rv.n_well);
  EXPECT_EQ(back.backend_model_id, rv.backend_model_id);
  EXPECT_EQ(back.backend_checksum, rv.backend_checksum);
  EXPECT_EQ(back.dataset_fingerprint, rv.dataset_fingerprint);
}

std::vector<std::uint8_t> craft(const std::string& magic, std::uint32_t version, float scale) {
  BinaryWriter w;
  w.raw(magic);
  w.u32(version);
  w.string("model_id=x\nbackend_checksum=y\ndataset_fingerprint=z\nn_back=1\nn_well=1\n");
  w.u32(2);
  const float v[6] = {scale, 0, 1, 0, -1, 0};
  w.f32_array(v);
  std::vector<std::uint8_t> out = w.buffer();
  const Digest d = sha256(out);
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

TEST(ResidualFile, RejectsBadInputs) {
  EXPECT_NO_THROW(decode_residual(craft("RAVERESV", 1, 1.0f)));
  EXPECT_THROW(decode_residual(craft("NOTRESID", 1, 1.0f)), FormatError);
  EXPECT_THROW(decode_residual(craft("RAVERESV", 2, 1.0f)), FormatError);
  EXPECT_THROW(decode_residual(craft("RAVERESV", 1, 1.1f)), FormatError);
  auto bytes = craft("RAVERESV", 1, 1.0f);
  bytes[20] ^= 0x01;
  EXPECT_THROW(decode_residual(bytes), ChecksumError);
}

}  // namespace
}  // namespace rave
