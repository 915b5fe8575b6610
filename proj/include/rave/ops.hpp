#pragma once

// Differentiable operations on Var. Layout conventions: matrices are
// row-major [rows, cols]; image batches are [N, C, H, W].

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "rave/autodiff.hpp"
#include "rave/resample.hpp"

namespace rave {

namespace detail {

template <typename Scalar>
using Arr = typename Tensor<Scalar>::Array;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(s));
  }
}

// Outer/inner extents around one axis.
inline void split_axis(const Shape& s, int axis, Index& outer, Index& len, Index& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  len = s.at(static_cast<std::size_t>(axis));
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

template <typename Scalar, typename F, typename D>
Var<Scalar> unary(const Var<Scalar>& x, F forward, D derivative) {
  Graph<Scalar>& g = x.graph();
  Tensor<Scalar> out(x.shape(), x.value().data.unaryExpr(forward));
  return g.record(std::move(out), {x}, [x, derivative](Graph<Scalar>& gr, const Tensor<Scalar>& go) {
    const auto& xv = gr.value(x).data;
    Arr<Scalar> dx = go.data * xv.unaryExpr(derivative);
    gr.accumulate(x, dx);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<Scalar> out(a.shape(), a.value().data + b.value().data);
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(a, go.data);
    g.accumulate(b, go.data);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<Scalar> out(a.shape(), a.value().data - b.value().data);
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(a, go.data);
    g.accumulate(b, -go.data);
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<Scalar> out(a.shape(), a.value().data * b.value().data);
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    if (g.requires_grad(a)) g.accumulate(a, go.data * g.value(b).data);
    if (g.requires_grad(b)) g.accumulate(b, go.data * g.value(a).data);
  });
}

template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "div");
  Tensor<Scalar> out(a.shape(), a.value().data / b.value().data);
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& bv = g.value(b).data;
    if (g.requires_grad(a)) g.accumulate(a, go.data / bv);
    if (g.requires_grad(b)) g.accumulate(b, -go.data * g.value(a).data / (bv * bv));
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& x, Scalar c) {
  Tensor<Scalar> out(x.shape(), x.value().data + c);
  return x.graph().record(std::move(out), {x}, [x](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(x, go.data);
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar c) {
  Tensor<Scalar> out(x.shape(), x.value().data * c);
  return x.graph().record(std::move(out), {x}, [x, c](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(x, go.data * c);
  });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Var<Scalar> operator/(const Var<Scalar>& a, const Var<Scalar>& b) { return div(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& x) { return scale(x, Scalar(-1)); }
template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& x, Scalar c) { return add_scalar(x, c); }
template <typename Scalar>
Var<Scalar> operator+(Scalar c, const Var<Scalar>& x) { return add_scalar(x, c); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& x, Scalar c) { return add_scalar(x, -c); }
template <typename Scalar>
Var<Scalar> operator-(Scalar c, const Var<Scalar>& x) { return add_scalar(scale(x, Scalar(-1)), c); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& x, Scalar c) { return scale(x, c); }
template <typename Scalar>
Var<Scalar> operator*(Scalar c, const Var<Scalar>& x) { return scale(x, c); }

// ---------------------------------------------------------------------------
// Elementwise functions

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), x.value().data.exp());
  const std::size_t out_id = x.graph().size();
  return x.graph().record(std::move(out), {x}, [x, out_id](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(x, go.data * g.value(Var<Scalar>(&g, out_id)).data);
  });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return std::log(v); }, [](Scalar v) { return Scalar(1) / v; });
}

template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return std::sqrt(v); },
      [](Scalar v) { return v > Scalar(0) ? Scalar(0.5) / std::sqrt(v) : Scalar(0); });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return v * v; }, [](Scalar v) { return Scalar(2) * v; });
}

template <typename Scalar>
Scalar sigmoid_value(Scalar v) {
  if (v >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return sigmoid_value(v); },
      [](Scalar v) {
        const Scalar s = sigmoid_value(v);
        return s * (Scalar(1) - s);
      });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return v > Scalar(0) ? v : Scalar(0); },
      [](Scalar v) { return v > Scalar(0) ? Scalar(1) : Scalar(0); });
}

/// x * sigmoid(1.702 x), the GELU approximation used by CLIP.
template <typename Scalar>
Var<Scalar> quick_gelu(const Var<Scalar>& x) {
  constexpr Scalar k = Scalar(1.702);
  return detail::unary(
      x, [](Scalar v) { return v * sigmoid_value(k * v); },
      [](Scalar v) {
        const Scalar s = sigmoid_value(k * v);
        return s + k * v * s * (Scalar(1) - s);
      });
}

/// Clamp with zero gradient outside [lo, hi].
template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& x, Scalar lo, Scalar hi) {
  return detail::unary(
      x, [lo, hi](Scalar v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](Scalar v) { return (v < lo || v > hi) ? Scalar(0) : Scalar(1); });
}

/// max(x, 0) = hinge.
template <typename Scalar>
Var<Scalar> hinge(const Var<Scalar>& x) {
  return relu(x);
}

// ---------------------------------------------------------------------------
// Reductions and reshapes

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tensor<Scalar> out = Tensor<Scalar>::scalar(x.value().data.sum());
  return x.graph().record(std::move(out), {x}, [x](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(x, detail::Arr<Scalar>::Constant(g.value(x).size(), go.item()));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  Tensor<Scalar> out(std::move(shape), x.value().data);
  return x.graph().record(std::move(out), {x}, [x](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(x, go.data);
  });
}

/// [N, ...] -> [N, prod(...)]
template <typename Scalar>
Var<Scalar> flatten_rows(const Var<Scalar>& x) {
  const Index n = x.dim(0);
  return reshape(x, Shape{n, x.size() / n});
}

/// Slice [begin, begin+count) along one axis.
template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& x, int axis, Index begin, Index count) {
  Index outer, len, inner;
  detail::split_axis(x.shape(), axis, outer, len, inner);
  if (begin < 0 || count < 0 || begin + count > len) throw ShapeError("slice out of range");
  Shape s = x.shape();
  s[static_cast<std::size_t>(axis)] = count;
  Tensor<Scalar> out(s);
  out.matrix(outer, count * inner) = x.value().matrix(outer, len * inner).middleCols(begin * inner, count * inner);
  return x.graph().record(std::move(out), {x},
                          [x, outer, len, inner, begin, count](Graph<Scalar>& g, const Tensor<Scalar>& go) {
                            Tensor<Scalar> gx(g.value(x).shape);
                            gx.matrix(outer, len * inner).middleCols(begin * inner, count * inner) =
                                go.matrix(outer, count * inner);
                            g.accumulate(x, gx.data);
                          });
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape s = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    Shape q = p.shape();
    if (q.size() != s.size()) throw ShapeError("concat: rank mismatch");
    total += q[static_cast<std::size_t>(axis)];
    q[static_cast<std::size_t>(axis)] = s[static_cast<std::size_t>(axis)];
    detail::require_same_shape(q, s, "concat");
  }
  s[static_cast<std::size_t>(axis)] = total;
  Index outer, len, inner;
  detail::split_axis(s, axis, outer, len, inner);
  Tensor<Scalar> out(s);
  auto om = out.matrix(outer, len * inner);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    const Index w = p.shape()[static_cast<std::size_t>(axis)] * inner;
    om.middleCols(off, w) = p.value().matrix(outer, w);
    offsets.push_back(off);
    off += w;
  }
  return parts.front().graph().record(
      std::move(out), parts, [parts, offsets, outer, len, inner, axis](Graph<Scalar>& g, const Tensor<Scalar>& go) {
        auto gm = go.matrix(outer, len * inner);
        for (std::size_t i = 0; i < parts.size(); ++i) {
          if (!g.requires_grad(parts[i])) continue;
          const Index w = g.value(parts[i]).shape[static_cast<std::size_t>(axis)] * inner;
          Tensor<Scalar> gp(g.value(parts[i]).shape);
          gp.matrix(outer, w) = gm.middleCols(offsets[i], w);
          g.accumulate(parts[i], gp.data);
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix ops (rank 2)

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul: inner dimension mismatch");
  Tensor<Scalar> out(Shape{a.dim(0), b.dim(1)});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    if (g.requires_grad(a)) {
      Tensor<Scalar> ga(g.value(a).shape);
      ga.matrix().noalias() = go.matrix() * g.value(b).matrix().transpose();
      g.accumulate(a, ga.data);
    }
    if (g.requires_grad(b)) {
      Tensor<Scalar> gb(g.value(b).shape);
      gb.matrix().noalias() = g.value(a).matrix().transpose() * go.matrix();
      g.accumulate(b, gb.data);
    }
  });
}

/// x [N, in] * w[out, in]^T (+ bias[out]); the torch.nn.Linear convention.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w) {
  detail::require_rank(x.shape(), 2, "linear");
  detail::require_rank(w.shape(), 2, "linear");
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: " + shape_string(x.shape()) + " x " + shape_string(w.shape()) + "^T");
  }
  Tensor<Scalar> out(Shape{x.dim(0), w.dim(0)});
  out.matrix().noalias() = x.value().matrix() * w.value().matrix().transpose();
  return x.graph().record(std::move(out), {x, w}, [x, w](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    if (g.requires_grad(x)) {
      Tensor<Scalar> gx(g.value(x).shape);
      gx.matrix().noalias() = go.matrix() * g.value(w).matrix();
      g.accumulate(x, gx.data);
    }
    if (g.requires_grad(w)) {
      Tensor<Scalar> gw(g.value(w).shape);
      gw.matrix().noalias() = go.matrix().transpose() * g.value(x).matrix();
      g.accumulate(w, gw.data);
    }
  });
}

/// x [N, M] + b[M] broadcast over rows.
template <typename Scalar>
Var<Scalar> add_bias(const Var<Scalar>& x, const Var<Scalar>& b) {
  detail::require_rank(x.shape(), 2, "add_bias");
  if (b.size() != x.dim(1)) throw ShapeError("add_bias: bias length mismatch");
  Tensor<Scalar> out = x.value();
  out.matrix().rowwise() += b.value().data.matrix().transpose();
  return x.graph().record(std::move(out), {x, b}, [x, b](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    g.accumulate(x, go.data);
    if (g.requires_grad(b)) {
      detail::Arr<Scalar> gb = go.matrix().colwise().sum().transpose().array();
      g.accumulate(b, gb);
    }
  });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  return add_bias(linear(x, w), b);
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& x) {
  detail::require_rank(x.shape(), 2, "transpose");
  Tensor<Scalar> out(Shape{x.dim(1), x.dim(0)});
  out.matrix() = x.value().matrix().transpose();
  return x.graph().record(std::move(out), {x}, [x](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    Tensor<Scalar> gx(g.value(x).shape);
    gx.matrix() = go.matrix().transpose();
    g.accumulate(x, gx.data);
  });
}

/// Row-wise softmax of [N, M].
template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& x) {
  detail::require_rank(x.shape(), 2, "softmax_rows");
  Tensor<Scalar> out(x.shape());
  auto xm = x.value().matrix();
  auto om = out.matrix();
  for (Index i = 0; i < xm.rows(); ++i) {
    const Scalar m = xm.row(i).maxCoeff();
    om.row(i) = (xm.row(i).array() - m).exp().matrix();
    om.row(i) /= om.row(i).sum();
  }
  const std::size_t out_id = x.graph().size();
  return x.graph().record(std::move(out), {x}, [x, out_id](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto y = g.value(Var<Scalar>(&g, out_id)).matrix();
    const auto gy = go.matrix();
    Tensor<Scalar> gx(g.value(x).shape);
    auto gm = gx.matrix();
    for (Index i = 0; i < y.rows(); ++i) {
      const Scalar dot = y.row(i).dot(gy.row(i));
      gm.row(i) = (y.row(i).array() * (gy.row(i).array() - dot)).matrix();
    }
    g.accumulate(x, gx.data);
  });
}

/// Row-wise layer normalisation of [N, M] with affine gamma/beta [M].
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Scalar eps = Scalar(1e-5)) {
  detail::require_rank(x.shape(), 2, "layer_norm");
  const Index n = x.dim(0), m = x.dim(1);
  if (gamma.size() != m || beta.size() != m) throw ShapeError("layer_norm: affine size mismatch");
  auto xm = x.value().matrix();
  auto xhat = std::make_shared<RowMatrix<Scalar>>(n, m);
  auto inv_std = std::make_shared<Vector<Scalar>>(n);
  for (Index i = 0; i < n; ++i) {
    const Scalar mu = xm.row(i).mean();
    const Scalar var = (xm.row(i).array() - mu).square().mean();
    (*inv_std)(i) = Scalar(1) / std::sqrt(var + eps);
    xhat->row(i) = (xm.row(i).array() - mu) * (*inv_std)(i);
  }
  Tensor<Scalar> out(x.shape());
  out.matrix() = (xhat->array().rowwise() * gamma.value().data.transpose()).rowwise() +
                 beta.value().data.transpose();
  return x.graph().record(
      std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, m](Graph<Scalar>& g, const Tensor<Scalar>& go) {
        const auto gy = go.matrix();
        if (g.requires_grad(gamma)) {
          detail::Arr<Scalar> gg = (gy.array() * xhat->array()).colwise().sum().transpose();
          g.accumulate(gamma, gg);
        }
        if (g.requires_grad(beta)) {
          detail::Arr<Scalar> gb = gy.colwise().sum().transpose().array();
          g.accumulate(beta, gb);
        }
        if (g.requires_grad(x)) {
          const auto& gam = g.value(gamma).data;
          Tensor<Scalar> gx(g.value(x).shape);
          auto gm = gx.matrix();
          for (Index i = 0; i < gy.rows(); ++i) {
            const auto dxhat = (gy.row(i).array() * gam.transpose()).eval();
            const Scalar mean_d = dxhat.mean();
            const Scalar mean_dx = (dxhat * xhat->row(i).array()).mean();
            gm.row(i) = ((dxhat - mean_d - xhat->row(i).array() * mean_dx) * (*inv_std)(i)).matrix();
          }
          (void)m;
          g.accumulate(x, gx.data);
        }
      });
}

// ---------------------------------------------------------------------------
// Row-vector ops on [N, D]

/// Per-row dot product of two [N, D] inputs -> [N].
template <typename Scalar>
Var<Scalar> row_dot(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_rank(a.shape(), 2, "row_dot");
  detail::require_same_shape(a.shape(), b.shape(), "row_dot");
  Tensor<Scalar> out(Shape{a.dim(0)});
  out.data = (a.value().matrix().array() * b.value().matrix().array()).rowwise().sum();
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const Index d = g.value(a).dim(1);
    if (g.requires_grad(a)) {
      Tensor<Scalar> ga(g.value(a).shape);
      ga.matrix() = g.value(b).matrix().array().colwise() * go.data;
      g.accumulate(a, ga.data);
    }
    if (g.requires_grad(b)) {
      Tensor<Scalar> gb(g.value(b).shape);
      gb.matrix() = g.value(a).matrix().array().colwise() * go.data;
      g.accumulate(b, gb.data);
    }
    (void)d;
  });
}

/// Per-row dot product with a broadcast vector: x [N, D] . v [D] -> [N].
template <typename Scalar>
Var<Scalar> row_dot_vector(const Var<Scalar>& x, const Var<Scalar>& v) {
  detail::require_rank(x.shape(), 2, "row_dot_vector");
  if (v.size() != x.dim(1)) throw ShapeError("row_dot_vector: length mismatch");
  Tensor<Scalar> out(Shape{x.dim(0)});
  out.data = (x.value().matrix() * v.value().data.matrix()).array();
  return x.graph().record(std::move(out), {x, v}, [x, v](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    if (g.requires_grad(x)) {
      Tensor<Scalar> gx(g.value(x).shape);
      gx.matrix().noalias() = go.data.matrix() * g.value(v).data.matrix().transpose();
      g.accumulate(x, gx.data);
    }
    if (g.requires_grad(v)) {
      detail::Arr<Scalar> gv = (g.value(x).matrix().transpose() * go.data.matrix()).array();
      g.accumulate(v, gv);
    }
  });
}

/// Per-row Euclidean norm [N, D] -> [N]; subgradient 0 at a zero row.
template <typename Scalar>
Var<Scalar> row_norm(const Var<Scalar>& x) {
  detail::require_rank(x.shape(), 2, "row_norm");
  Tensor<Scalar> out(Shape{x.dim(0)});
  out.data = x.value().matrix().rowwise().norm().array();
  const std::size_t out_id = x.graph().size();
  return x.graph().record(std::move(out), {x}, [x, out_id](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    const auto& norms = g.value(Var<Scalar>(&g, out_id)).data;
    Tensor<Scalar> gx(g.value(x).shape);
    auto xm = g.value(x).matrix();
    auto gm = gx.matrix();
    for (Index i = 0; i < xm.rows(); ++i) {
      if (norms(i) > Scalar(0)) gm.row(i) = xm.row(i) * (go.data(i) / norms(i));
    }
    g.accumulate(x, gx.data);
  });
}

/// Scales each row of [N, D] by the matching entry of s [N].
template <typename Scalar>
Var<Scalar> scale_rows(const Var<Scalar>& x, const Var<Scalar>& s) {
  detail::require_rank(x.shape(), 2, "scale_rows");
  if (s.size() != x.dim(0)) throw ShapeError("scale_rows: length mismatch");
  Tensor<Scalar> out(x.shape());
  out.matrix() = x.value().matrix().array().colwise() * s.value().data;
  return x.graph().record(std::move(out), {x, s}, [x, s](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    if (g.requires_grad(x)) {
      Tensor<Scalar> gx(g.value(x).shape);
      gx.matrix() = go.matrix().array().colwise() * g.value(s).data;
      g.accumulate(x, gx.data);
    }
    if (g.requires_grad(s)) {
      detail::Arr<Scalar> gs = (go.matrix().array() * g.value(x).matrix().array()).rowwise().sum();
      g.accumulate(s, gs);
    }
  });
}

/// Broadcasts a [D] vector into [N, D].
template <typename Scalar>
Var<Scalar> repeat_rows(const Var<Scalar>& v, Index n) {
  Tensor<Scalar> out(Shape{n, v.size()});
  out.matrix().rowwise() = v.value().data.matrix().transpose();
  return v.graph().record(std::move(out), {v}, [v](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    detail::Arr<Scalar> gv = go.matrix().colwise().sum().transpose().array();
    g.accumulate(v, gv);
  });
}

// ---------------------------------------------------------------------------
// Image ops on [N, C, H, W]

/// Per-channel affine map x*scale[c] + shift[c] with constant coefficients.
template <typename Scalar>
Var<Scalar> channel_affine(const Var<Scalar>& x, const std::vector<Scalar>& scale_c,
                           const std::vector<Scalar>& shift_c) {
  detail::require_rank(x.shape(), 4, "channel_affine");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (static_cast<Index>(scale_c.size()) != c || static_cast<Index>(shift_c.size()) != c) {
    throw ShapeError("channel_affine: coefficient count mismatch");
  }
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < c; ++k)
      out.data.segment((i * c + k) * hw, hw) =
          x.value().data.segment((i * c + k) * hw, hw) * scale_c[static_cast<std::size_t>(k)] +
          shift_c[static_cast<std::size_t>(k)];
  return x.graph().record(std::move(out), {x}, [x, scale_c, n, c, hw](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    detail::Arr<Scalar> gx(go.data.size());
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < c; ++k)
        gx.segment((i * c + k) * hw, hw) =
            go.data.segment((i * c + k) * hw, hw) * scale_c[static_cast<std::size_t>(k)];
    g.accumulate(x, gx);
  });
}

/// Applies out_plane = rows * plane * cols^T to every [H, W] plane.
template <typename Scalar>
Var<Scalar> resample(const Var<Scalar>& x, std::shared_ptr<const SparseRowMatrix<Scalar>> rows,
                     std::shared_ptr<const SparseRowMatrix<Scalar>> cols) {
  detail::require_rank(x.shape(), 4, "resample");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (rows->cols() != h || cols->cols() != w) throw ShapeError("resample: matrix/plane mismatch");
  const Index ho = rows->rows(), wo = cols->rows();
  Tensor<Scalar> out(Shape{n, c, ho, wo});
  const SparseRowMatrix<Scalar> cols_t = cols->transpose();
  RowMatrix<Scalar> tmp;
  for (Index p = 0; p < n * c; ++p) {
    Eigen::Map<const RowMatrix<Scalar>> plane(x.value().data.data() + p * h * w, h, w);
    Eigen::Map<RowMatrix<Scalar>> dst(out.data.data() + p * ho * wo, ho, wo);
    tmp.noalias() = (*rows) * plane;
    dst.noalias() = tmp * cols_t;
  }
  return x.graph().record(std::move(out), {x}, [x, rows, cols, n, c, h, w, ho, wo](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    detail::Arr<Scalar> gx(n * c * h * w);
    const SparseRowMatrix<Scalar> rows_t = rows->transpose();
    RowMatrix<Scalar> t;
    for (Index p = 0; p < n * c; ++p) {
      Eigen::Map<const RowMatrix<Scalar>> gp(go.data.data() + p * ho * wo, ho, wo);
      Eigen::Map<RowMatrix<Scalar>> dst(gx.data() + p * h * w, h, w);
      t.noalias() = rows_t * gp;
      dst.noalias() = t * (*cols);
    }
    g.accumulate(x, gx);
  });
}

/// Resizes every plane to (height, width) with the given filter.
template <typename Scalar>
Var<Scalar> resize(const Var<Scalar>& x, Index height, Index width, ResampleFilter filter) {
  if (x.dim(2) == height && x.dim(3) == width) return x;
  auto rows = std::make_shared<const SparseRowMatrix<Scalar>>(resample_matrix<Scalar>(x.dim(2), height, filter));
  auto cols = std::make_shared<const SparseRowMatrix<Scalar>>(resample_matrix<Scalar>(x.dim(3), width, filter));
  return resample(x, rows, cols);
}

/// 2x2 average pooling (H, W must be even).
template <typename Scalar>
Var<Scalar> avg_pool2(const Var<Scalar>& x) {
  if (x.dim(2) % 2 || x.dim(3) % 2) throw ShapeError("avg_pool2: odd spatial size");
  return resize(x, x.dim(2) / 2, x.dim(3) / 2, ResampleFilter::box);
}

/// [N, 1, H, W] -> [N, C, H, W] by repeating the single channel.
template <typename Scalar>
Var<Scalar> expand_channels(const Var<Scalar>& x, Index channels) {
  detail::require_rank(x.shape(), 4, "expand_channels");
  if (x.dim(1) != 1) throw ShapeError("expand_channels: input must have one channel");
  const Index n = x.dim(0), hw = x.dim(2) * x.dim(3);
  Tensor<Scalar> out(Shape{n, channels, x.dim(2), x.dim(3)});
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < channels; ++k)
      out.data.segment((i * channels + k) * hw, hw) = x.value().data.segment(i * hw, hw);
  return x.graph().record(std::move(out), {x}, [x, n, channels, hw](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    detail::Arr<Scalar> gx = detail::Arr<Scalar>::Zero(n * hw);
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < channels; ++k) gx.segment(i * hw, hw) += go.data.segment((i * channels + k) * hw, hw);
    g.accumulate(x, gx);
  });
}

namespace detail {

// Band of output rows [y0, y1):
// col[(c*k + i)*k + j, (y - y0)*wo + x] = x_padded[c, y + i, x + j]
template <typename Scalar>
void im2col(const Scalar* img, Index c, Index h, Index w, Index k, Index pad, Index y0, Index y1,
            RowMatrix<Scalar>& col) {
  const Index wo = w + 2 * pad - k + 1;
  col.resize(c * k * k, (y1 - y0) * wo);
  for (Index ch = 0; ch < c; ++ch)
    for (Index ki = 0; ki < k; ++ki)
      for (Index kj = 0; kj < k; ++kj) {
        Scalar* dst = col.row((ch * k + ki) * k + kj).data();
        for (Index y = y0; y < y1; ++y) {
          const Index iy = y + ki - pad;
          Scalar* row = dst + (y - y0) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + wo, Scalar(0));
            continue;
          }
          const Scalar* src = img + (ch * h + iy) * w;
          for (Index x = 0; x < wo; ++x) {
            const Index ix = x + kj - pad;
            row[x] = (ix >= 0 && ix < w) ? src[ix] : Scalar(0);
          }
        }
      }
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& col, Index c, Index h, Index w, Index k, Index pad, Index y0, Index y1,
            Scalar* img) {
  const Index wo = w + 2 * pad - k + 1;
  for (Index ch = 0; ch < c; ++ch)
    for (Index ki = 0; ki < k; ++ki)
      for (Index kj = 0; kj < k; ++kj) {
        const Scalar* src = col.row((ch * k + ki) * k + kj).data();
        for (Index y = y0; y < y1; ++y) {
          const Index iy = y + ki - pad;
          if (iy < 0 || iy >= h) continue;
          Scalar* dst = img + (ch * h + iy) * w;
          const Scalar* row = src + (y - y0) * wo;
          for (Index x = 0; x < wo; ++x) {
            const Index ix = x + kj - pad;
            if (ix >= 0 && ix < w) dst[ix] += row[x];
          }
        }
      }
}

/// Output rows per im2col band, keeping the column buffer near 4M entries.
inline Index conv_band_rows(Index patch, Index wo, Index ho) {
  constexpr Index kBudget = Index(1) << 22;
  return std::clamp<Index>(kBudget / std::max<Index>(1, patch * wo), 1, ho);
}

}  // namespace detail

/// Stride-1 square convolution: x [N, C, H, W], w [O, C, k, k], b [O].
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b, Index pad) {
  detail::require_rank(x.shape(), 4, "conv2d");
  detail::require_rank(w.shape(), 4, "conv2d");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index o = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c || w.dim(3) != k) throw ShapeError("conv2d: weight shape mismatch");
  if (b.size() != o) throw ShapeError("conv2d: bias size mismatch");
  const Index ho = h + 2 * pad - k + 1, wo = wd + 2 * pad - k + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  const Index band = detail::conv_band_rows(c * k * k, wo, ho);
  Tensor<Scalar> out(Shape{n, o, ho, wo});
  auto wm = w.value().matrix(o, c * k * k);
  const Vector<Scalar> bias = b.value().data.matrix();
  RowMatrix<Scalar> col, res;
  for (Index i = 0; i < n; ++i) {
    const Scalar* img = x.value().data.data() + i * c * h * wd;
    Scalar* base = out.data.data() + i * o * ho * wo;
    for (Index y0 = 0; y0 < ho; y0 += band) {
      const Index y1 = std::min(ho, y0 + band), cols = (y1 - y0) * wo;
      detail::im2col(img, c, h, wd, k, pad, y0, y1, col);
      res.noalias() = wm * col;
      res.colwise() += bias;
      for (Index ch = 0; ch < o; ++ch) std::copy_n(res.row(ch).data(), cols, base + ch * ho * wo + y0 * wo);
    }
  }
  return x.graph().record(
      std::move(out), {x, w, b},
      [x, w, b, n, c, h, wd, o, k, pad, ho, wo, band](Graph<Scalar>& g, const Tensor<Scalar>& go) {
        const bool need_x = g.requires_grad(x), need_w = g.requires_grad(w);
        auto wm = g.value(w).matrix(o, c * k * k);
        Tensor<Scalar> gw(g.value(w).shape);
        detail::Arr<Scalar> gx;
        if (need_x) gx = detail::Arr<Scalar>::Zero(n * c * h * wd);
        RowMatrix<Scalar> col, gcol, gband;
        for (Index i = 0; i < n; ++i) {
          const Scalar* gbase = go.data.data() + i * o * ho * wo;
          for (Index y0 = 0; y0 < ho; y0 += band) {
            const Index y1 = std::min(ho, y0 + band), cols = (y1 - y0) * wo;
            gband.resize(o, cols);
            for (Index ch = 0; ch < o; ++ch) std::copy_n(gbase + ch * ho * wo + y0 * wo, cols, gband.row(ch).data());
            if (need_w) {
              detail::im2col(g.value(x).data.data() + i * c * h * wd, c, h, wd, k, pad, y0, y1, col);
              gw.matrix(o, c * k * k).noalias() += gband * col.transpose();
            }
            if (need_x) {
              gcol.noalias() = wm.transpose() * gband;
              detail::col2im(gcol, c, h, wd, k, pad, y0, y1, gx.data() + i * c * h * wd);
            }
          }
        }
        if (need_w) g.accumulate(w, gw.data);
        if (need_x) g.accumulate(x, gx);
        if (g.requires_grad(b)) {
          detail::Arr<Scalar> gb = detail::Arr<Scalar>::Zero(o);
          for (Index i = 0; i < n; ++i) {
            Eigen::Map<const RowMatrix<Scalar>> gi(go.data.data() + i * o * ho * wo, o, ho * wo);
            gb += gi.rowwise().sum().array();
          }
          g.accumulate(b, gb);
        }
      });
}

/// Cuts a single image [1, C, H, W] into non-overlapping p x p patches:
/// -> [(H/p)*(W/p), C*p*p], patch features ordered (c, i, j).
template <typename Scalar>
Var<Scalar> patchify(const Var<Scalar>& x, Index p) {
  detail::require_rank(x.shape(), 4, "patchify");
  if (x.dim(0) != 1) throw ShapeError("patchify: expects a single image");
  const Index c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % p || w % p) throw ShapeError("patchify: size not divisible by patch");
  const Index gh = h / p, gw = w / p, f = c * p * p;
  std::vector<Index> map(static_cast<std::size_t>(gh * gw * f));
  for (Index py = 0; py < gh; ++py)
    for (Index px = 0; px < gw; ++px)
      for (Index ch = 0; ch < c; ++ch)
        for (Index i = 0; i < p; ++i)
          for (Index j = 0; j < p; ++j)
            map[static_cast<std::size_t>((py * gw + px) * f + (ch * p + i) * p + j)] =
                (ch * h + py * p + i) * w + px * p + j;
  Tensor<Scalar> out(Shape{gh * gw, f});
  for (std::size_t t = 0; t < map.size(); ++t) out.data(static_cast<Index>(t)) = x.value().data(map[t]);
  return x.graph().record(std::move(out), {x}, [x, map](Graph<Scalar>& g, const Tensor<Scalar>& go) {
    detail::Arr<Scalar> gx = detail::Arr<Scalar>::Zero(g.value(x).size());
    for (std::size_t t = 0; t < map.size(); ++t) gx(map[t]) += go.data(static_cast<Index>(t));
    g.accumulate(x, gx);
  });
}

}  // namespace rave
