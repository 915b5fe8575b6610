#pragma once

// Closed-form test backends.
//
// mock-linear-8: area-downsample to 4x4x3, CLIP channel normalisation,
// flatten, fixed seeded linear map to R^8. Stages: {normalised 48-vector,
// embedding}. No text tower.
//
// mock-text-8: the same image tower plus a text tower that averages token
// rows (token width = embedding width = 8) over a small fixed vocabulary.

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "rave/embedding_backend.hpp"
#include "rave/random.hpp"

namespace rave {

inline constexpr std::array<double, 3> kClipMean{0.48145466, 0.4578275, 0.40821073};
inline constexpr std::array<double, 3> kClipStd{0.26862954, 0.26130258, 0.27577711};

template <typename Scalar>
std::vector<Scalar> clip_norm_scale() {
  return {Scalar(1.0 / kClipStd[0]), Scalar(1.0 / kClipStd[1]), Scalar(1.0 / kClipStd[2])};
}

template <typename Scalar>
std::vector<Scalar> clip_norm_shift() {
  return {Scalar(-kClipMean[0] / kClipStd[0]), Scalar(-kClipMean[1] / kClipStd[1]),
          Scalar(-kClipMean[2] / kClipStd[2])};
}

std::string mock_weight_checksum(const Tensor<double>& projection, const Tensor<double>* tokens);

template <typename Scalar>
class MockLinearBackend : public EmbeddingBackend<Scalar> {
 public:
  static constexpr Index kGrid = 4;
  static constexpr Index kDim = 8;
  static constexpr Index kInputs = 3 * kGrid * kGrid;
  static constexpr std::uint64_t kSeed = 0x6d6f636b;

  explicit MockLinearBackend(std::string model_id = "mock-linear-8") {
    Rng rng(kSeed);
    Tensor<double> w(Shape{kDim, kInputs});
    for (Index i = 0; i < w.size(); ++i) w.data(i) = rng.normal() / std::sqrt(double(kInputs));
    projection_d_ = w;
    projection_ = std::make_shared<const Tensor<Scalar>>(w.template cast<Scalar>());
    info_.model_id = std::move(model_id);
    info_.embed_dim = kDim;
    info_.layer_count = 2;
    info_.device = "cpu";
    info_.weight_checksum = mock_weight_checksum(projection_d_, nullptr);
  }

  const BackendInfo& info() const override { return info_; }

  std::vector<Var<Scalar>> image_stages(Graph<Scalar>& g, const Var<Scalar>& images) const override {
    Var<Scalar> pooled = resize(images, kGrid, kGrid, ResampleFilter::box);
    Var<Scalar> normalised = channel_affine(pooled, clip_norm_scale<Scalar>(), clip_norm_shift<Scalar>());
    Var<Scalar> flat = flatten_rows(normalised);
    Var<Scalar> emb = linear(flat, g.constant(projection_));
    return {flat, emb};
  }

  /// The fixed [8, 48] projection, in double precision.
  const Tensor<double>& projection() const { return projection_d_; }

 protected:
  BackendInfo info_;
  Tensor<double> projection_d_;
  std::shared_ptr<const Tensor<Scalar>> projection_;
};

/// Fixed vocabulary of the mock text tower and the grey level of each
/// anchor word (negative = random embedding).
struct MockWord {
  const char* token;
  double grey;
};

inline constexpr std::array<MockWord, 32> kMockVocabulary{{
    {"backlit", 0.10}, {"beach", -1}, {"beijing", -1}, {"bright", 0.85}, {"building", -1},
    {"busan", -1}, {"car", -1}, {"cat", -1}, {"city", -1}, {"countrylife", -1},
    {"dark", 0.06}, {"darkness", 0.03}, {"daylight", 0.80}, {"exposure", 0.70}, {"flower", -1},
    {"food", -1}, {"mountain", -1}, {"night", 0.12}, {"people", -1}, {"portrait", -1},
    {"shadow", 0.15}, {"silhouette", 0.08}, {"sky", -1}, {"southafrica", -1}, {"street", -1},
    {"sunny", 0.90}, {"tree", -1}, {"water", -1}, {"well-lit", 0.75}, {"wildlife", -1},
    {"wildlifewednesday", -1}, {"white", 0.95},
}};

template <typename Scalar>
class MockTextBackend : public MockLinearBackend<Scalar> {
 public:
  static constexpr std::uint64_t kTokenSeed = 0x746f6b656e;

  MockTextBackend() : MockLinearBackend<Scalar>("mock-text-8") {
    const Index v = static_cast<Index>(kMockVocabulary.size());
    const Index d = MockLinearBackend<Scalar>::kDim;
    Tensor<double> table(Shape{v, d});
    Rng rng(kTokenSeed);
    const auto& w = this->projection_d_.matrix();
    for (Index i = 0; i < v; ++i) {
      const auto& word = kMockVocabulary[static_cast<std::size_t>(i)];
      tokens_.emplace_back(word.token);
      if (word.grey >= 0.0) {
        // Embedding of a constant grey image: every pooled cell equals grey.
        Vector<double> x(MockLinearBackend<Scalar>::kInputs);
        const Index cells = MockLinearBackend<Scalar>::kGrid * MockLinearBackend<Scalar>::kGrid;
        for (Index c = 0; c < 3; ++c)
          x.segment(c * cells, cells).setConstant((word.grey - kClipMean[c]) / kClipStd[c]);
        table.matrix().row(i) = (w * x).transpose();
      } else {
        for (Index k = 0; k < d; ++k) table.matrix()(i, k) = rng.normal();
      }
    }
    table_d_ = table;
    table_ = table.template cast<Scalar>();
    this->info_.has_text_tower = true;
    this->info_.token_width = d;
    this->info_.context_length = 77;
    this->info_.vocab_size = v;
    this->info_.weight_checksum = mock_weight_checksum(this->projection_d_, &table_d_);
  }

  Var<Scalar> text_embedding(Graph<Scalar>& g, const Var<Scalar>& tokens) const override {
    const Index n = tokens.dim(0);
    if (n > this->info_.context_length) throw InvalidInputError("token sequence exceeds context length");
    Var<Scalar> avg = g.constant(Tensor<Scalar>::constant(Shape{1, n}, Scalar(1) / static_cast<Scalar>(n)));
    return matmul(avg, tokens);
  }

  const std::vector<std::string>& vocabulary_tokens() const override { return tokens_; }

  Tensor<Scalar> token_embedding(Index id) const override {
    Tensor<Scalar> row(Shape{1, table_.dim(1)});
    row.matrix() = table_.matrix().row(id);
    return row;
  }

  const Tensor<double>& token_table() const { return table_d_; }

 private:
  std::vector<std::string> tokens_;
  Tensor<double> table_d_;
  Tensor<Scalar> table_;
};

}  // namespace rave
