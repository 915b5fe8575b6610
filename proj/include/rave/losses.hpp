#pragma once

// Training objectives as differentiable functions of embeddings.
//
// Batched inputs are [N, D] embedding rows; every loss returns the mean over
// the batch of the per-image value.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "rave/embedding_backend.hpp"
#include "rave/residual.hpp"

namespace rave {

struct Margins {
  double m0 = 0.9;
  double m1 = 0.2;
  double m2 = 0.2;
};

struct LossConfig {
  double omega = 6.0;
  /// Identity-loss layer weights, one per configured layer (k + 1 entries).
  std::vector<double> alpha;
  Margins margins;
  /// Residual loss projects f_norm(Phi(I)) rather than the raw embedding.
  bool normalize_image_embedding = true;

  void validate(std::size_t layer_count) const;
};

inline constexpr double kProbabilityFloor = 1e-7;

/// Rows of x scaled to unit length.
template <typename Scalar>
Var<Scalar> normalize_rows(const Var<Scalar>& x) {
  const Var<Scalar> n = row_norm(x);
  if ((n.value().data == Scalar(0)).any()) throw DegenerateDirectionError("cannot normalise a zero embedding");
  Graph<Scalar>& g = x.graph();
  return scale_rows(x, div(g.constant(Tensor<Scalar>::constant(n.shape(), Scalar(1))), n));
}

/// cos(x_i, v) for rows x [N, D] and a single vector v ([D] or [1, D]) -> [N].
template <typename Scalar>
Var<Scalar> cosine_rows(const Var<Scalar>& x, const Var<Scalar>& v) {
  const Var<Scalar> u = normalize_rows(reshape(v, Shape{1, v.size()}));
  return row_dot_vector(normalize_rows(x), reshape(u, Shape{v.size()}));
}

/// e^{cos_pos} / (e^{cos_pos} + e^{cos_neg}), elementwise.
template <typename Scalar>
Var<Scalar> guidance_softmax(const Var<Scalar>& cos_pos, const Var<Scalar>& cos_neg) {
  return sigmoid(sub(cos_pos, cos_neg));
}

inline double guidance_softmax(double cos_pos, double cos_neg) {
  return std::exp(cos_pos) / (std::exp(cos_pos) + std::exp(cos_neg));
}

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
template <typename Scalar>
Var<Scalar> initial_classification_loss(const Var<Scalar>& pred, const Var<Scalar>& labels) {
  detail::require_same_shape(pred.shape(), labels.shape(), "initial_classification_loss");
  const Var<Scalar> p = clamp(pred, Scalar(kProbabilityFloor), Scalar(1 - kProbabilityFloor));
  const Var<Scalar> pos = mul(labels, log(p));
  const Var<Scalar> neg = mul(Scalar(1) - labels, log(Scalar(1) - p));
  return -mean(add(pos, neg));
}

double initial_classification_loss(double pred, int label);

/// S(I) per image: softmax weight of the negative guidance side -> [N].
template <typename Scalar>
Var<Scalar> negative_similarity_score(const Var<Scalar>& image_emb, const Var<Scalar>& pos, const Var<Scalar>& neg) {
  return guidance_softmax(cosine_rows(image_emb, neg), cosine_rows(image_emb, pos));
}

/// Mean of S(I) over the batch.
template <typename Scalar>
Var<Scalar> clip_guidance_loss(const Var<Scalar>& image_emb, const Var<Scalar>& pos, const Var<Scalar>& neg) {
  return mean(negative_similarity_score(image_emb, pos, neg));
}

/// sum_l alpha_l ||Phi^l(I_b) - Phi^l(I_t)||_2, averaged over the batch.
template <typename Scalar>
Var<Scalar> identity_loss(const LayerActivations<Scalar>& acts_b, const LayerActivations<Scalar>& acts_t,
                          const std::vector<double>& alpha) {
  if (acts_b.size() != acts_t.size() || acts_b.size() != alpha.size()) {
    throw ShapeError("identity_loss: layer count mismatch (" + std::to_string(acts_b.size()) + ", " +
                     std::to_string(acts_t.size()) + ", alpha " + std::to_string(alpha.size()) + ")");
  }
  if (acts_b.size() == 0) throw ShapeError("identity_loss: no layers");
  Var<Scalar> total;
  for (std::size_t l = 0; l < acts_b.size(); ++l) {
    const Var<Scalar>& b = acts_b.per_layer[l];
    const Var<Scalar>& t = acts_t.per_layer[l];
    detail::require_same_shape(b.shape(), t.shape(), "identity_loss");
    const Var<Scalar> term = scale(mean(row_norm(sub(flatten_rows(b), flatten_rows(t)))), Scalar(alpha[l]));
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

/// Margin ranking objective on the four (scalar) scores.
template <typename Scalar>
Var<Scalar> prompt_refinement_loss(const Var<Scalar>& s_w, const Var<Scalar>& s_b, const Var<Scalar>& s_t,
                                   const Var<Scalar>& s_prev, const Margins& m) {
  const Var<Scalar> a = hinge(add_scalar(sub(s_w, s_b), Scalar(m.m0)));
  const Var<Scalar> b = hinge(add_scalar(sub(s_prev, s_b), Scalar(m.m0)));
  const Var<Scalar> c = hinge(add_scalar(sub(s_w, s_t), Scalar(m.m1)));
  const Var<Scalar> d = hinge(add_scalar(sub(s_t, s_prev), Scalar(m.m2)));
  return add(add(a, b), add(c, d));
}

double prompt_refinement_loss(double s_w, double s_b, double s_t, double s_prev, const Margins& m);

/// (f_norm(Phi(I)) . v_residual - v_well_lit . v_residual)^2, batch mean.
template <typename Scalar>
Var<Scalar> residual_loss(const Var<Scalar>& image_emb, const ResidualVector& rv, bool normalize_embedding = true) {
  if (image_emb.dim(1) != rv.dim()) throw ShapeError("residual_loss: embedding and residual dimensions differ");
  Graph<Scalar>& g = image_emb.graph();
  const Eigen::VectorXd r = rv.v_residual.cast<double>();
  if (!(r.norm() > 0)) throw DegenerateDirectionError("residual_loss: degenerate residual vector");
  const Var<Scalar> e = normalize_embedding ? normalize_rows(image_emb) : image_emb;
  const Var<Scalar> proj = row_dot_vector(e, g.constant(Tensor<Scalar>::from_vector(r.cast<Scalar>().eval())));
  const Scalar target = static_cast<Scalar>(rv.v_well_lit.cast<double>().dot(r));
  return mean(square(add_scalar(proj, -target)));
}

/// L_clip + omega * L_identity.
template <typename Scalar>
Var<Scalar> enhance_loss(const Var<Scalar>& clip_term, const Var<Scalar>& identity_term, double omega) {
  return add(clip_term, scale(identity_term, Scalar(omega)));
}

/// L_identity + omega * L_residual.
template <typename Scalar>
Var<Scalar> rave_loss(const Var<Scalar>& identity_term, const Var<Scalar>& residual_term, double omega) {
  return add(identity_term, scale(residual_term, Scalar(omega)));
}

inline double enhance_loss(double clip_term, double identity_term, double omega) {
  return clip_term + omega * identity_term;
}
inline double rave_loss(double identity_term, double residual_term, double omega) {
  return identity_term + omega * residual_term;
}

}  // namespace rave
