#pragma once

// Uniform interface to a frozen vision-language encoder.
//
// Backends take raw [0, 1] image batches; resizing and channel normalisation
// happen inside the adapter. Embeddings are returned unnormalised.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rave/errors.hpp"
#include "rave/image.hpp"
#include "rave/ops.hpp"

namespace rave {

struct BackendInfo {
  std::string model_id;
  Index embed_dim = 0;
  /// Number of image-encoder stages exposable as layer activations.
  Index layer_count = 0;
  Index vocab_size = 0;
  std::string device = "cpu";
  Index token_width = 0;
  Index context_length = 0;
  bool has_text_tower = false;
  std::string weight_checksum;
};

template <typename Scalar>
struct VocabEntry {
  std::string token;
  Vector<Scalar> embedding;
};

template <typename Scalar>
class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;

  virtual const BackendInfo& info() const = 0;

  /// Every image-encoder stage for images [N, 3, H, W]; stage l is [N, F_l],
  /// the last stage is the embedding [N, D].
  virtual std::vector<Var<Scalar>> image_stages(Graph<Scalar>& g, const Var<Scalar>& images) const = 0;

  virtual Var<Scalar> image_embedding(Graph<Scalar>& g, const Var<Scalar>& images) const {
    return image_stages(g, images).back();
  }

  /// Projects a token-embedding sequence [N, E_tok] to a [1, D] embedding.
  virtual Var<Scalar> text_embedding(Graph<Scalar>&, const Var<Scalar>&) const {
    throw NoTextTowerError("backend '" + info().model_id + "' has no text tower");
  }

  virtual const std::vector<std::string>& vocabulary_tokens() const {
    throw NoTextTowerError("backend '" + info().model_id + "' has no text tower; interpretation unavailable");
  }

  /// Token-embedding row for vocabulary entry id, shape [1, E_tok].
  virtual Tensor<Scalar> token_embedding(Index) const {
    throw NoTextTowerError("backend '" + info().model_id + "' has no text tower");
  }

  /// Stage indices used for layer activations when nothing is configured.
  virtual std::vector<Index> default_layers() const {
    std::vector<Index> all;
    for (Index i = 0; i < info().layer_count; ++i) all.push_back(i);
    return all;
  }
};

template <typename Scalar>
using BackendHandle = std::shared_ptr<const EmbeddingBackend<Scalar>>;

template <typename Scalar>
struct LayerActivations {
  std::vector<Var<Scalar>> per_layer;
  std::vector<Index> layers;

  std::size_t size() const { return per_layer.size(); }
};

namespace detail {

template <typename Scalar>
void validate_images(const Var<Scalar>& images) {
  if (images.shape().size() != 4 || images.dim(1) != 3) {
    throw InvalidInputError("image batch must be [N, 3, H, W], got " + shape_string(images.shape()));
  }
  if (images.dim(0) == 0) throw InvalidInputError("empty image batch");
  if (images.value().data.isNaN().any()) throw InvalidInputError("image batch contains NaN pixels");
}

}  // namespace detail

/// Embeddings [N, D], differentiable w.r.t. images.
template <typename Scalar>
Var<Scalar> encode_image(const EmbeddingBackend<Scalar>& backend, Graph<Scalar>& g, const Var<Scalar>& images) {
  detail::validate_images(images);
  return backend.image_embedding(g, images);
}

/// Gradient-free convenience: one embedding row per image.
template <typename Scalar>
RowMatrix<Scalar> encode_image(const EmbeddingBackend<Scalar>& backend, std::span<const Image> batch) {
  if (batch.empty()) throw InvalidInputError("empty image batch");
  Graph<Scalar> g;
  Var<Scalar> x = g.constant(stack_images<Scalar>(batch));
  return encode_image(backend, g, x).value().matrix();
}

template <typename Scalar>
RowMatrix<Scalar> encode_image(const EmbeddingBackend<Scalar>& backend, const std::vector<Image>& batch) {
  return encode_image(backend, std::span<const Image>(batch));
}

/// Last k+1 stages, i.e. k = 0 selects only the final embedding.
template <typename Scalar>
std::vector<Index> last_layers(const EmbeddingBackend<Scalar>& backend, Index k) {
  const Index n = backend.info().layer_count;
  if (k < 0 || k + 1 > n) throw ConfigError("layer count k=" + std::to_string(k) + " exceeds backend stages");
  std::vector<Index> out;
  for (Index i = n - k - 1; i < n; ++i) out.push_back(i);
  return out;
}

template <typename Scalar>
LayerActivations<Scalar> select_layers(const std::vector<Var<Scalar>>& stages, const std::vector<Index>& layers) {
  if (layers.empty()) throw ConfigError("layer selection is empty");
  LayerActivations<Scalar> acts;
  acts.layers = layers;
  for (Index l : layers) {
    if (l < 0 || l >= static_cast<Index>(stages.size())) {
      throw ConfigError("layer index " + std::to_string(l) + " out of range (backend has " +
                        std::to_string(stages.size()) + " stages)");
    }
    acts.per_layer.push_back(stages[static_cast<std::size_t>(l)]);
  }
  return acts;
}

template <typename Scalar>
LayerActivations<Scalar> encode_image_layers(const EmbeddingBackend<Scalar>& backend, Graph<Scalar>& g,
                                             const Var<Scalar>& images, const std::vector<Index>& layers) {
  detail::validate_images(images);
  return select_layers(backend.image_stages(g, images), layers);
}

template <typename Scalar>
Var<Scalar> encode_text(const EmbeddingBackend<Scalar>& backend, Graph<Scalar>& g, const Var<Scalar>& tokens) {
  if (!backend.info().has_text_tower) {
    throw NoTextTowerError("backend '" + backend.info().model_id + "' has no text tower");
  }
  if (tokens.shape().size() != 2 || tokens.dim(1) != backend.info().token_width) {
    throw InvalidInputError("token matrix must be [N, " + std::to_string(backend.info().token_width) + "], got " +
                            shape_string(tokens.shape()));
  }
  if (tokens.dim(0) == 0) throw InvalidInputError("empty token sequence");
  return backend.text_embedding(g, tokens);
}

template <typename Scalar>
Vector<Scalar> encode_text(const EmbeddingBackend<Scalar>& backend, const RowMatrix<Scalar>& tokens) {
  Graph<Scalar> g;
  Var<Scalar> t = g.constant(Tensor<Scalar>::from_matrix(tokens));
  return encode_text(backend, g, t).value().data.matrix();
}

template <typename Scalar>
std::vector<VocabEntry<Scalar>> vocabulary(const EmbeddingBackend<Scalar>& backend) {
  const auto& tokens = backend.vocabulary_tokens();
  std::vector<VocabEntry<Scalar>> out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    out.push_back({tokens[i], backend.token_embedding(static_cast<Index>(i)).data.matrix()});
  }
  return out;
}

/// Index of a vocabulary token; accepts the bare word for word-final BPE entries.
template <typename Scalar>
Index find_token(const EmbeddingBackend<Scalar>& backend, const std::string& token) {
  const auto& tokens = backend.vocabulary_tokens();
  Index bare = -1;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == token + "</w>") return static_cast<Index>(i);
    if (tokens[i] == token && bare < 0) bare = static_cast<Index>(i);
  }
  if (bare < 0) throw InvalidInputError("unknown token '" + token + "'");
  return bare;
}

/// Token text without the BPE word-final marker.
inline std::string display_token(const std::string& token) {
  constexpr std::string_view marker = "</w>";
  if (token.size() >= marker.size() && token.compare(token.size() - marker.size(), marker.size(), marker) == 0) {
    return token.substr(0, token.size() - marker.size());
  }
  return token;
}

struct BackendOptions {
  /// Directory searched for "<model_id>.rvw" weight archives. Empty: the
  /// RAVE_WEIGHTS_DIR environment variable, then ./weights.
  std::string weights_dir;
  /// Expected SHA-256 of the weight file; empty skips the comparison.
  std::string expected_checksum;
};

template <typename Scalar>
BackendHandle<Scalar> load_backend(const std::string& model_id, const std::string& device = "cpu",
                                   const BackendOptions& options = {});

std::vector<std::string> registered_backends();

}  // namespace rave
