#pragma once

// Residual guidance direction between well-lit and backlit corpora, its
// file format, and vocabulary interpretation.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "rave/data_pipeline.hpp"
#include "rave/embedding_backend.hpp"

namespace rave {

/// f_norm(v) = v / ||v||; throws DegenerateDirectionError on a zero vector.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> normalize(const Eigen::MatrixBase<Derived>& v) {
  const auto n = v.norm();
  if (!(n > 0) || !std::isfinite(static_cast<double>(n))) {
    throw DegenerateDirectionError("cannot normalise a zero (or non-finite) vector");
  }
  return v / n;
}

/// Streaming mean of D-vectors with Neumaier-compensated sums in double.
class MeanAccumulator {
 public:
  explicit MeanAccumulator(Index dim = 0) : sum_(Eigen::VectorXd::Zero(dim)), comp_(Eigen::VectorXd::Zero(dim)) {}

  template <typename Derived>
  void add(const Eigen::MatrixBase<Derived>& v) {
    if (sum_.size() == 0 && count_ == 0) {
      sum_ = comp_ = Eigen::VectorXd::Zero(v.size());
    }
    if (v.size() != sum_.size()) throw ShapeError("MeanAccumulator: dimension mismatch");
    for (Index i = 0; i < v.size(); ++i) add_component(i, static_cast<double>(v(i)));
    ++count_;
  }

  /// Deterministic merge (fixed order: this, then other).
  void merge(const MeanAccumulator& other) {
    if (other.count_ == 0) return;
    if (count_ == 0) {
      *this = other;
      return;
    }
    for (Index i = 0; i < sum_.size(); ++i) {
      add_component(i, other.sum_(i));
      add_component(i, other.comp_(i));
    }
    count_ += other.count_;
  }

  std::size_t count() const { return count_; }
  Eigen::VectorXd sum() const { return sum_ + comp_; }
  Eigen::VectorXd mean() const {
    if (count_ == 0) throw InvalidInputError("mean of an empty corpus");
    return sum() / static_cast<double>(count_);
  }

 private:
  void add_component(Index i, double x) {
    const double t = sum_(i) + x;
    comp_(i) += std::abs(sum_(i)) >= std::abs(x) ? (sum_(i) - t) + x : (x - t) + sum_(i);
    sum_(i) = t;
  }

  Eigen::VectorXd sum_, comp_;
  std::size_t count_ = 0;
};

struct ResidualVector {
  Eigen::VectorXf v_residual;
  Eigen::VectorXf v_well_lit;
  Eigen::VectorXf v_backlit;
  std::size_t n_well = 0;
  std::size_t n_back = 0;
  std::string backend_model_id;
  std::string backend_checksum;
  std::string dataset_fingerprint;

  Index dim() const { return v_residual.size(); }
};

struct TokenSimilarity {
  std::string token;
  double score = 0.0;
};

struct Interpretation {
  std::vector<TokenSimilarity> lowest;
  std::vector<TokenSimilarity> highest;
};

/// Batch size used when streaming a corpus through the encoder.
inline constexpr std::size_t kEncodeBatch = 8;

/// Calls fn(row) with the normalised embedding of every image, in order.
template <typename Scalar, typename Fn>
void for_each_normalized_embedding(const EmbeddingBackend<Scalar>& backend, const ImageSource& corpus, Fn&& fn) {
  std::vector<Image> batch;
  auto flush = [&] {
    // Images of different sizes are encoded one by one.
    const bool uniform = std::all_of(batch.begin(), batch.end(), [&](const Image& im) { return im.same_size(batch[0]); });
    if (uniform) {
      const RowMatrix<Scalar> e = encode_image(backend, batch);
      for (Index r = 0; r < e.rows(); ++r) fn(normalize(e.row(r).transpose().template cast<double>().eval()));
    } else {
      for (const auto& im : batch) {
        const RowMatrix<Scalar> e = encode_image(backend, std::vector<Image>{im});
        fn(normalize(e.row(0).transpose().template cast<double>().eval()));
      }
    }
    batch.clear();
  };
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    batch.push_back(corpus.load(i));
    if (batch.size() == kEncodeBatch) flush();
  }
  if (!batch.empty()) flush();
}

/// f_norm(mean_i f_norm(Phi_image(I_i))), streamed.
template <typename Scalar>
Eigen::VectorXd mean_embedding(const EmbeddingBackend<Scalar>& backend, const ImageSource& corpus) {
  if (corpus.empty()) throw InvalidInputError("mean_embedding: empty corpus");
  MeanAccumulator acc(backend.info().embed_dim);
  for_each_normalized_embedding(backend, corpus, [&](const Eigen::VectorXd& e) { acc.add(e); });
  try {
    return normalize(acc.mean());
  } catch (const DegenerateDirectionError&) {
    throw DegenerateDirectionError("degenerate corpus: mean of normalised embeddings is the zero vector");
  }
}

/// Builds a ResidualVector from already-normalised corpus means.
ResidualVector make_residual(const Eigen::VectorXd& well_mean, const Eigen::VectorXd& back_mean);

template <typename Scalar>
ResidualVector compute_residual(const EmbeddingBackend<Scalar>& backend, const ImageSource& backlit,
                                const ImageSource& well_lit) {
  if (backlit.empty() || well_lit.empty()) throw InvalidInputError("compute_residual: empty corpus");
  const Eigen::VectorXd back = mean_embedding(backend, backlit);
  const Eigen::VectorXd well = mean_embedding(backend, well_lit);
  ResidualVector rv = make_residual(well, back);
  rv.n_back = backlit.size();
  rv.n_well = well_lit.size();
  rv.backend_model_id = backend.info().model_id;
  rv.backend_checksum = backend.info().weight_checksum;
  rv.dataset_fingerprint = combine_fingerprints(backlit.fingerprint(), well_lit.fingerprint());
  return rv;
}

/// f_norm(Phi_text(e_token)) for a bare single-token sequence.
template <typename Scalar>
Eigen::VectorXd token_direction(const EmbeddingBackend<Scalar>& backend, Index id) {
  const RowMatrix<Scalar> row = backend.token_embedding(id).matrix();
  return normalize(encode_text(backend, row).template cast<double>().eval());
}

/// Scores of every vocabulary token, in vocabulary order.
template <typename Scalar>
std::vector<TokenSimilarity> score_vocabulary(const EmbeddingBackend<Scalar>& backend, const ResidualVector& rv) {
  const auto& tokens = backend.vocabulary_tokens();
  if (rv.dim() != backend.info().embed_dim) throw InvalidInputError("residual dimension does not match backend");
  const Eigen::VectorXd r = rv.v_residual.cast<double>();
  std::vector<TokenSimilarity> out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    out.push_back({display_token(tokens[i]), token_direction(backend, static_cast<Index>(i)).dot(r)});
  }
  return out;
}

Interpretation rank_tokens(std::vector<TokenSimilarity> scores, std::size_t top_k);

template <typename Scalar>
Interpretation interpret_residual(const EmbeddingBackend<Scalar>& backend, const ResidualVector& rv, Index top_k) {
  if (top_k < 1) throw ConfigError("top_k must be at least 1");
  if (!backend.info().has_text_tower) {
    throw NoTextTowerError("backend '" + backend.info().model_id + "' has no text tower; interpretation unavailable");
  }
  return rank_tokens(score_vocabulary(backend, rv), static_cast<std::size_t>(top_k));
}

/// Mean over the corpus of cos(Phi_image(I), Phi_text(e_token)).
template <typename Scalar>
double token_corpus_similarity(const EmbeddingBackend<Scalar>& backend, const std::string& token,
                               const ImageSource& corpus) {
  if (corpus.empty()) throw InvalidInputError("token_corpus_similarity: empty corpus");
  const Eigen::VectorXd t = token_direction(backend, find_token(backend, token));
  MeanAccumulator acc(1);
  for_each_normalized_embedding(backend, corpus, [&](const Eigen::VectorXd& e) {
    Eigen::VectorXd c(1);
    c(0) = e.dot(t);
    acc.add(c);
  });
  return acc.mean()(0);
}

inline constexpr std::string_view kResidualMagic = "RAVERESV";
inline constexpr std::uint32_t kResidualVersion = 1;

/// Checks unit norms (1e-6) and collinearity of the stored vectors.
void validate_residual(const ResidualVector& rv);

std::vector<std::uint8_t> encode_residual(const ResidualVector& rv);
ResidualVector decode_residual(std::span<const std::uint8_t> bytes);
void save_residual(const ResidualVector& rv, const std::filesystem::path& path);
ResidualVector load_residual(const std::filesystem::path& path);

}  // namespace rave
