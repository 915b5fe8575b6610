#pragma once

// Separable resampling matrices. Every resize in the project (bicubic image
// resize, area pooling, bilinear upsampling, reflect padding, cropping) is a
// pair of sparse row-major matrices applied as  out = Rh * plane * Rw^T.

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "rave/tensor.hpp"

namespace rave {

template <typename Scalar>
using SparseRowMatrix = Eigen::SparseMatrix<Scalar, Eigen::RowMajor>;

enum class ResampleFilter { box, bilinear, bicubic };

namespace detail {

inline double filter_support(ResampleFilter f) {
  switch (f) {
    case ResampleFilter::box: return 0.5;
    case ResampleFilter::bilinear: return 1.0;
    case ResampleFilter::bicubic: return 2.0;
  }
  return 0.0;
}

inline double filter_weight(ResampleFilter f, double x) {
  switch (f) {
    case ResampleFilter::box:
      return (x >= -0.5 && x < 0.5) ? 1.0 : 0.0;
    case ResampleFilter::bilinear:
      x = std::abs(x);
      return x < 1.0 ? 1.0 - x : 0.0;
    case ResampleFilter::bicubic: {
      constexpr double a = -0.5;
      x = std::abs(x);
      if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
      if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
      return 0.0;
    }
  }
  return 0.0;
}

}  // namespace detail

/// Antialiased resampling matrix (out x in) with half-pixel centres; the
/// filter support widens by the scale factor when downsampling, so the box
/// filter becomes exact area averaging.
template <typename Scalar>
SparseRowMatrix<Scalar> resample_matrix(Index in, Index out, ResampleFilter filter) {
  if (in <= 0 || out <= 0) throw std::invalid_argument("resample_matrix: sizes must be positive");
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double filterscale = std::max(scale, 1.0);
  const double support = detail::filter_support(filter) * filterscale;

  std::vector<Eigen::Triplet<Scalar>> triplets;
  std::vector<double> weights;
  for (Index i = 0; i < out; ++i) {
    const double center = (static_cast<double>(i) + 0.5) * scale;
    const Index lo = std::max<Index>(static_cast<Index>(std::floor(center - support + 0.5)), 0);
    const Index hi = std::min<Index>(static_cast<Index>(std::floor(center + support + 0.5)), in);
    weights.assign(static_cast<std::size_t>(std::max<Index>(hi - lo, 0)), 0.0);
    double total = 0.0;
    for (Index x = lo; x < hi; ++x) {
      const double w = detail::filter_weight(
          filter, (static_cast<double>(x) - center + 0.5) / filterscale);
      weights[static_cast<std::size_t>(x - lo)] = w;
      total += w;
    }
    if (total == 0.0) {
      // Degenerate upsampling corner: nearest neighbour.
      const Index nearest = std::clamp<Index>(static_cast<Index>(center), 0, in - 1);
      triplets.emplace_back(i, nearest, Scalar(1));
      continue;
    }
    for (Index x = lo; x < hi; ++x) {
      const double w = weights[static_cast<std::size_t>(x - lo)];
      if (w != 0.0) triplets.emplace_back(i, x, static_cast<Scalar>(w / total));
    }
  }
  SparseRowMatrix<Scalar> m(out, in);
  m.setFromTriplets(triplets.begin(), triplets.end());
  m.makeCompressed();
  return m;
}

/// 0/1 matrix picking source index idx[i] for output row i.
template <typename Scalar>
SparseRowMatrix<Scalar> selection_matrix(const std::vector<Index>& idx, Index in) {
  std::vector<Eigen::Triplet<Scalar>> triplets;
  triplets.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= in) throw std::out_of_range("selection_matrix: index out of range");
    triplets.emplace_back(static_cast<Index>(i), idx[i], Scalar(1));
  }
  SparseRowMatrix<Scalar> m(static_cast<Index>(idx.size()), in);
  m.setFromTriplets(triplets.begin(), triplets.end());
  m.makeCompressed();
  return m;
}

/// Reflect (mirror without edge repeat) index into [0, n).
inline Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// Reflect-pads a length-n axis to `padded` (extra samples appended at the end).
template <typename Scalar>
SparseRowMatrix<Scalar> reflect_pad_matrix(Index n, Index padded) {
  std::vector<Index> idx(static_cast<std::size_t>(padded));
  for (Index i = 0; i < padded; ++i) idx[static_cast<std::size_t>(i)] = reflect_index(i, n);
  return selection_matrix<Scalar>(idx, n);
}

template <typename Scalar>
SparseRowMatrix<Scalar> crop_matrix(Index n, Index begin, Index count) {
  std::vector<Index> idx(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = begin + i;
  return selection_matrix<Scalar>(idx, n);
}

}  // namespace rave
