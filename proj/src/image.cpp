#include "rave/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rave/errors.hpp"

namespace rave {

Image resize_image(const Image& in, Index height, Index width, ResampleFilter filter) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("resize_image: size must be positive");
  if (in.height == height && in.width == width) return in;
  const auto rows = resample_matrix<float>(in.height, height, filter);
  const SparseRowMatrix<float> cols_t = SparseRowMatrix<float>(resample_matrix<float>(in.width, width, filter)).transpose();
  Image out(height, width);
  RowMatrix<float> tmp;
  for (Index c = 0; c < Image::kChannels; ++c) {
    tmp.noalias() = rows * in.plane(c);
    out.plane(c).noalias() = tmp * cols_t;
  }
  return out;
}

std::pair<Index, Index> long_side_size(Index height, Index width, Index long_side) {
  if (long_side <= 0) throw ConfigError("long side must be positive");
  if (height >= width) {
    const Index w = std::max<Index>(1, static_cast<Index>(std::lround(static_cast<double>(width) * long_side / height)));
    return {long_side, w};
  }
  const Index h = std::max<Index>(1, static_cast<Index>(std::lround(static_cast<double>(height) * long_side / width)));
  return {h, long_side};
}

Image resize_long_side(const Image& in, Index long_side) {
  const auto [h, w] = long_side_size(in.height, in.width, long_side);
  return resize_image(in, h, w, ResampleFilter::bicubic);
}

Image clamp_unit(Image im) {
  im.pixels = im.pixels.max(0.0f).min(1.0f);
  return im;
}

}  // namespace rave
