#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

#include "rave/resample.hpp"
#include "rave/tensor.hpp"

namespace rave {

/// H x W x 3 image with values in [0, 1], stored planar (channel-major).
struct Image {
  static constexpr Index kChannels = 3;

  Index height = 0;
  Index width = 0;
  Eigen::ArrayXf pixels;

  Image() = default;
  Image(Index h, Index w, float fill = 0.0f)
      : height(h), width(w), pixels(Eigen::ArrayXf::Constant(kChannels * h * w, fill)) {}

  float& at(Index c, Index y, Index x) { return pixels((c * height + y) * width + x); }
  float at(Index c, Index y, Index x) const { return pixels((c * height + y) * width + x); }

  Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> plane(Index c) {
    return {pixels.data() + c * height * width, height, width};
  }
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> plane(Index c) const {
    return {pixels.data() + c * height * width, height, width};
  }

  bool empty() const { return pixels.size() == 0; }
  bool has_nan() const { return pixels.isNaN().any(); }
  float mean() const { return pixels.size() ? pixels.mean() : 0.0f; }
  bool same_size(const Image& o) const { return height == o.height && width == o.width; }
};

/// Stacks equally sized images into an [N, 3, H, W] tensor.
template <typename Scalar>
Tensor<Scalar> stack_images(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const Index h = images.front().height, w = images.front().width;
  const Index n = static_cast<Index>(images.size());
  Tensor<Scalar> out(Shape{n, Image::kChannels, h, w});
  const Index per = Image::kChannels * h * w;
  for (Index i = 0; i < n; ++i) {
    const Image& im = images[static_cast<std::size_t>(i)];
    if (im.height != h || im.width != w) throw ShapeError("stack_images: images differ in size");
    out.data.segment(i * per, per) = im.pixels.template cast<Scalar>();
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> stack_images(const std::vector<Image>& images) {
  return stack_images<Scalar>(std::span<const Image>(images));
}

/// Extracts image n from an [N, 3, H, W] tensor.
template <typename Scalar>
Image unstack_image(const Tensor<Scalar>& batch, Index n) {
  if (batch.rank() != 4 || batch.dim(1) != Image::kChannels) throw ShapeError("unstack_image: not an image batch");
  Image im(batch.dim(2), batch.dim(3));
  const Index per = im.pixels.size();
  im.pixels = batch.data.segment(n * per, per).template cast<float>();
  return im;
}

template <typename Scalar>
std::vector<Image> unstack_images(const Tensor<Scalar>& batch) {
  std::vector<Image> out;
  for (Index i = 0; i < batch.dim(0); ++i) out.push_back(unstack_image(batch, i));
  return out;
}

Image resize_image(const Image& in, Index height, Index width,
                   ResampleFilter filter = ResampleFilter::bicubic);

/// Scales so the longer side equals long_side, preserving aspect ratio.
Image resize_long_side(const Image& in, Index long_side);

/// Output size for resize_long_side.
std::pair<Index, Index> long_side_size(Index height, Index width, Index long_side);

Image clamp_unit(Image im);

}  // namespace rave
