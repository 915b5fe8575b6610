#pragma once

// Learnable guidance pair: token-space prompts projected by the text tower, or
// latent vectors used directly as embeddings.

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "rave/embedding_backend.hpp"
#include "rave/losses.hpp"
#include "rave/parameters.hpp"
#include "rave/random.hpp"

namespace rave {

enum class GuidanceKind { token_space, latent_space };

std::string to_string(GuidanceKind kind);
GuidanceKind parse_guidance_kind(const std::string& text);

inline constexpr Index kDefaultTokenCount = 16;
inline constexpr double kGuidanceInitScale = 0.02;

/// params holds "positive" then "negative": [N, E_tok] each for token_space,
/// [D] each for latent_space.
template <typename Scalar>
struct GuidancePair {
  GuidanceKind kind = GuidanceKind::latent_space;
  ParameterSet<Scalar> params;

  const Tensor<Scalar>& positive() const { return params.value(0); }
  const Tensor<Scalar>& negative() const { return params.value(1); }
  Index token_count() const { return kind == GuidanceKind::token_space ? positive().dim(0) : 0; }
};

template <typename Scalar>
GuidancePair<Scalar> init_guidance(GuidanceKind kind, std::uint64_t seed, const EmbeddingBackend<Scalar>& backend,
                                   Index token_count = kDefaultTokenCount) {
  const BackendInfo& info = backend.info();
  Shape shape;
  if (kind == GuidanceKind::token_space) {
    if (!info.has_text_tower) {
      throw NoTextTowerError("token-space guidance needs a text tower; backend '" + info.model_id + "' has none");
    }
    if (token_count < 1) throw ConfigError("token count must be at least 1");
    if (token_count + 2 > info.context_length) throw ConfigError("token count exceeds the text context length");
    shape = {token_count, info.token_width};
  } else {
    shape = {info.embed_dim};
  }
  Rng rng(derive_seed(seed, {0x67756964}));
  GuidancePair<Scalar> pair;
  pair.kind = kind;
  for (const char* name : {"positive", "negative"}) {
    Tensor<Scalar> t(shape);
    for (Index i = 0; i < t.size(); ++i) t.data(i) = static_cast<Scalar>(kGuidanceInitScale * rng.normal());
    pair.params.add(name, std::move(t));
  }
  return pair;
}

/// Checks shapes against the backend.
template <typename Scalar>
void validate_guidance(const GuidancePair<Scalar>& pair, const EmbeddingBackend<Scalar>& backend) {
  if (pair.params.size() != 2) throw ConfigError("guidance pair must hold exactly two tensors");
  const BackendInfo& info = backend.info();
  const Shape expect = pair.kind == GuidanceKind::token_space ? Shape{pair.positive().dim(0), info.token_width}
                                                              : Shape{info.embed_dim};
  if (pair.positive().shape != expect || pair.negative().shape != expect) {
    throw ShapeError("guidance pair shape " + shape_string(pair.positive().shape) + " does not fit backend '" +
                     info.model_id + "' (expected " + shape_string(expect) + ")");
  }
}

/// Projected (positive, negative) embeddings for bound guidance vars.
template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> project(GuidanceKind kind, const std::vector<Var<Scalar>>& vars,
                                            const EmbeddingBackend<Scalar>& backend) {
  if (kind == GuidanceKind::latent_space) return {vars.at(0), vars.at(1)};
  Graph<Scalar>& g = vars.at(0).graph();
  return {encode_text(backend, g, vars.at(0)), encode_text(backend, g, vars.at(1))};
}

template <typename Scalar>
std::pair<Vector<Scalar>, Vector<Scalar>> project(const GuidancePair<Scalar>& pair,
                                                  const EmbeddingBackend<Scalar>& backend) {
  validate_guidance(pair, backend);
  Graph<Scalar> g;
  const auto [pos, neg] = project(pair.kind, pair.params.bind(g, false), backend);
  return {pos.value().data.matrix(), neg.value().data.matrix()};
}

template <typename Scalar = float>
struct GuidanceOptimizer {
  AdamConfig adam{5e-6, 0.9, 0.99, 1e-8};
  AdamState<Scalar> state;
};

struct GuidanceStepResult {
  double loss = 0.0;
  bool updated = false;
};

namespace detail {

inline void check_labels(const std::vector<int>& labels, Index n) {
  if (n == 0) throw InvalidInputError("guidance step on an empty batch");
  if (static_cast<Index>(labels.size()) != n) throw InvalidInputError("label count does not match batch size");
  for (int y : labels)
    if (y != 0 && y != 1) throw InvalidInputError("labels must be 0 (backlit) or 1 (well-lit)");
}

}  // namespace detail

/// Predicted well-lit probability per image embedding row.
template <typename Scalar>
Eigen::ArrayXd guidance_predictions(const GuidancePair<Scalar>& pair, const EmbeddingBackend<Scalar>& backend,
                                    const RowMatrix<Scalar>& image_emb) {
  const auto [pos, neg] = project(pair, backend);
  Graph<Scalar> g;
  const Var<Scalar> x = g.constant(Tensor<Scalar>::from_matrix(image_emb));
  const Var<Scalar> p = g.constant(Tensor<Scalar>::from_vector(pos));
  const Var<Scalar> n = g.constant(Tensor<Scalar>::from_vector(neg));
  return guidance_softmax(cosine_rows(x, p), cosine_rows(x, n)).value().data.template cast<double>();
}

/// Fraction of rows with (prediction > 0.5) == label.
template <typename Scalar>
double guidance_accuracy(const GuidancePair<Scalar>& pair, const EmbeddingBackend<Scalar>& backend,
                         const RowMatrix<Scalar>& image_emb, const std::vector<int>& labels) {
  detail::check_labels(labels, image_emb.rows());
  const Eigen::ArrayXd pred = guidance_predictions(pair, backend, image_emb);
  Index correct = 0;
  for (Index i = 0; i < pred.size(); ++i) correct += (pred(i) > 0.5) == (labels[static_cast<std::size_t>(i)] == 1);
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

/// Classification loss of the pair on precomputed image embeddings, no update.
template <typename Scalar>
double guidance_init_loss(const GuidancePair<Scalar>& pair, const EmbeddingBackend<Scalar>& backend,
                          const RowMatrix<Scalar>& image_emb, const std::vector<int>& labels) {
  detail::check_labels(labels, image_emb.rows());
  const Eigen::ArrayXd pred = guidance_predictions(pair, backend, image_emb);
  double total = 0;
  for (Index i = 0; i < pred.size(); ++i) total += initial_classification_loss(
      std::clamp(pred(i), kProbabilityFloor, 1 - kProbabilityFloor), labels[static_cast<std::size_t>(i)]);
  return total / static_cast<double>(pred.size());
}

/// One Adam step on the binary classification loss; returns the pre-step loss.
template <typename Scalar>
GuidanceStepResult guidance_init_step(GuidancePair<Scalar>& pair, const EmbeddingBackend<Scalar>& backend,
                                      const RowMatrix<Scalar>& image_emb, const std::vector<int>& labels,
                                      GuidanceOptimizer<Scalar>& opt) {
  detail::check_labels(labels, image_emb.rows());
  validate_guidance(pair, backend);
  Graph<Scalar> g;
  const auto vars = pair.params.bind(g, true);
  const auto [pos, neg] = project(pair.kind, vars, backend);
  const Var<Scalar> x = g.constant(Tensor<Scalar>::from_matrix(image_emb));
  Tensor<Scalar> y(Shape{image_emb.rows()});
  for (Index i = 0; i < y.size(); ++i) y.data(i) = static_cast<Scalar>(labels[static_cast<std::size_t>(i)]);
  const Var<Scalar> loss = initial_classification_loss(guidance_softmax(cosine_rows(x, pos), cosine_rows(x, neg)),
                                                       g.constant(std::move(y)));
  g.backward(loss);
  adam_update(pair.params, gradients(g, vars), opt.state, opt.adam);
  return {static_cast<double>(loss.item()), true};
}

/// Embedding rows of the four refinement image groups.
template <typename Scalar>
struct RefinementEmbeddings {
  RowMatrix<Scalar> well_lit, backlit, enhanced, previous;
};

/// Batch-mean S for each group under the current pair: (w, b, t, prev).
template <typename Scalar>
std::array<double, 4> refinement_scores(const GuidancePair<Scalar>& pair, const EmbeddingBackend<Scalar>& backend,
                                        const RefinementEmbeddings<Scalar>& e) {
  const auto [pos, neg] = project(pair, backend);
  Graph<Scalar> g;
  const Var<Scalar> p = g.constant(Tensor<Scalar>::from_vector(pos));
  const Var<Scalar> n = g.constant(Tensor<Scalar>::from_vector(neg));
  auto score = [&](const RowMatrix<Scalar>& m) {
    return static_cast<double>(
        mean(negative_similarity_score(g.constant(Tensor<Scalar>::from_matrix(m)), p, n)).item());
  };
  return {score(e.well_lit), score(e.backlit), score(e.enhanced), score(e.previous)};
}

/// One Adam step on the margin ranking loss over batch-mean scores. A loss of
/// exactly zero leaves the pair (and optimizer state) untouched.
template <typename Scalar>
GuidanceStepResult guidance_refine_step(GuidancePair<Scalar>& pair, const EmbeddingBackend<Scalar>& backend,
                                        const RefinementEmbeddings<Scalar>& e, const Margins& margins,
                                        GuidanceOptimizer<Scalar>& opt) {
  for (const RowMatrix<Scalar>* m : {&e.well_lit, &e.backlit, &e.enhanced, &e.previous}) {
    if (m->rows() == 0) throw InvalidInputError("refinement step needs all four image groups");
  }
  validate_guidance(pair, backend);
  Graph<Scalar> g;
  const auto vars = pair.params.bind(g, true);
  const auto [pos, neg] = project(pair.kind, vars, backend);
  auto score = [&](const RowMatrix<Scalar>& m) {
    return mean(negative_similarity_score(g.constant(Tensor<Scalar>::from_matrix(m)), pos, neg));
  };
  const Var<Scalar> loss =
      prompt_refinement_loss(score(e.well_lit), score(e.backlit), score(e.enhanced), score(e.previous), margins);
  if (loss.item() == Scalar(0)) return {0.0, false};
  g.backward(loss);
  adam_update(pair.params, gradients(g, vars), opt.state, opt.adam);
  return {static_cast<double>(loss.item()), true};
}

void store_guidance(TensorArchive& archive, const GuidancePair<float>& pair);
GuidancePair<float> load_guidance(const TensorArchive& archive);

}  // namespace rave
