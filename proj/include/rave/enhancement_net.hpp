#pragma once

// UNet predicting a one-channel illumination map; the enhanced image is the
// input divided by the map.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rave/image.hpp"
#include "rave/ops.hpp"
#include "rave/parameters.hpp"
#include "rave/random.hpp"

namespace rave {

struct UNetConfig {
  Index depth = 3;
  Index base_channels = 32;
  /// Initial (spatially uniform) illumination value, set through the head bias.
  double initial_illumination = 0.9;

  void validate() const;
  bool operator==(const UNetConfig&) const = default;
};

inline constexpr double kIlluminationFloor = 1e-4;

template <typename Scalar>
struct EnhancementModel {
  UNetConfig config;
  ParameterSet<Scalar> params;
};

template <typename Scalar>
struct EnhanceVars {
  Var<Scalar> illumination;  // [N, 1, H, W], in (0, 1]
  Var<Scalar> enhanced;      // [N, 3, H, W], in [0, 1]
};

namespace detail {

template <typename Scalar>
void add_conv(ParameterSet<Scalar>& p, Rng& rng, const std::string& name, Index out, Index in, Index k,
              double gain = 1.0) {
  Tensor<Scalar> w(Shape{out, in, k, k});
  const double stdev = gain * std::sqrt(2.0 / static_cast<double>(in * k * k));
  for (Index i = 0; i < w.size(); ++i) w.data(i) = static_cast<Scalar>(stdev * rng.normal());
  p.add(name + ".weight", std::move(w));
  p.add(name + ".bias", Tensor<Scalar>::zeros(Shape{out}));
}

}  // namespace detail

/// Seeded He-normal initialisation; biases zero except the head.
template <typename Scalar = float>
EnhancementModel<Scalar> build_model(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  EnhancementModel<Scalar> m;
  m.config = config;
  Rng rng(derive_seed(seed, {0x756e6574}));
  const Index c = config.base_channels;
  Index in = 3;
  for (Index l = 0; l <= config.depth; ++l) {
    const Index ch = c << l;
    detail::add_conv(m.params, rng, "enc" + std::to_string(l) + ".conv1", ch, in, 3);
    detail::add_conv(m.params, rng, "enc" + std::to_string(l) + ".conv2", ch, ch, 3);
    in = ch;
  }
  for (Index l = config.depth - 1; l >= 0; --l) {
    const Index ch = c << l;
    detail::add_conv(m.params, rng, "dec" + std::to_string(l) + ".conv1", ch, in + ch, 3);
    detail::add_conv(m.params, rng, "dec" + std::to_string(l) + ".conv2", ch, ch, 3);
    in = ch;
  }
  // Small head so the initial map is close to uniform.
  detail::add_conv(m.params, rng, "head", 1, in, 1, 0.01);
  const double a = config.initial_illumination;
  Tensor<Scalar> bias(Shape{1});
  bias.data(0) = static_cast<Scalar>(std::log(a / (1 - a)));
  m.params.value(m.params.size() - 1) = bias;
  return m;
}

/// Illumination logits for images [N, 3, H, W] with H, W multiples of 2^depth.
/// With `release`, intermediate values are freed as soon as they are consumed
/// (inference only).
template <typename Scalar>
Var<Scalar> unet_logits(const UNetConfig& config, const std::vector<Var<Scalar>>& p, const Var<Scalar>& x,
                        bool release = false) {
  Graph<Scalar>& g = x.graph();
  auto drop = [&](const Var<Scalar>& v) {
    if (release) g.release(v);
  };
  std::size_t next = 0;
  auto conv_relu = [&](const Var<Scalar>& in, Index pad) {
    const Var<Scalar>& w = p.at(next++);
    const Var<Scalar>& b = p.at(next++);
    Var<Scalar> y = conv2d(in, w, b, pad);
    Var<Scalar> r = relu(y);
    drop(y);
    return r;
  };
  auto double_conv = [&](const Var<Scalar>& in) {
    Var<Scalar> a = conv_relu(in, 1);
    Var<Scalar> b = conv_relu(a, 1);
    drop(a);
    return b;
  };
  std::vector<Var<Scalar>> skips;
  Var<Scalar> h = x;
  for (Index l = 0; l <= config.depth; ++l) {
    if (l > 0) {
      Var<Scalar> pooled = avg_pool2(h);
      skips.push_back(h);
      h = pooled;
    }
    Var<Scalar> next_h = double_conv(h);
    if (l > 0) drop(h);
    h = next_h;
  }
  for (Index l = config.depth - 1; l >= 0; --l) {
    Var<Scalar> skip = skips.back();
    skips.pop_back();
    Var<Scalar> up = resize(h, skip.dim(2), skip.dim(3), ResampleFilter::bilinear);
    drop(h);
    Var<Scalar> cat = concat<Scalar>({up, skip}, 1);
    drop(up);
    drop(skip);
    h = double_conv(cat);
    drop(cat);
  }
  const Var<Scalar>& hw = p.at(next++);
  const Var<Scalar>& hb = p.at(next++);
  Var<Scalar> logits = conv2d(h, hw, hb, 0);
  drop(h);
  if (next != p.size()) throw ConfigError("UNet parameter count does not match its configuration");
  return logits;
}

/// I_t = clamp(I_b / max(illumination, eps), 0, 1).
template <typename Scalar>
Var<Scalar> apply_illumination(const Var<Scalar>& images, const Var<Scalar>& illumination) {
  const Var<Scalar> floored = clamp(illumination, Scalar(kIlluminationFloor), std::numeric_limits<Scalar>::max());
  return clamp(div(images, expand_channels(floored, images.dim(1))), Scalar(0), Scalar(1));
}

/// Differentiable enhancement of images [N, 3, H, W] of any size: reflect
/// padding up to a multiple of 2^depth, cropped back after the UNet.
template <typename Scalar>
EnhanceVars<Scalar> enhance(const UNetConfig& config, const std::vector<Var<Scalar>>& params,
                            const Var<Scalar>& images, bool release = false) {
  if (images.shape().size() != 4 || images.dim(1) != 3) {
    throw InvalidInputError("enhance expects [N, 3, H, W], got " + shape_string(images.shape()));
  }
  if (images.value().data.isNaN().any()) throw InvalidInputError("input image contains NaN");
  const Index h = images.dim(2), w = images.dim(3), m = Index(1) << config.depth;
  const Index hp = (h + m - 1) / m * m, wp = (w + m - 1) / m * m;
  Var<Scalar> x = images;
  if (hp != h || wp != w) {
    x = resample(images, std::make_shared<const SparseRowMatrix<Scalar>>(reflect_pad_matrix<Scalar>(h, hp)),
                 std::make_shared<const SparseRowMatrix<Scalar>>(reflect_pad_matrix<Scalar>(w, wp)));
  }
  Var<Scalar> logits = unet_logits(config, params, x, release);
  if (hp != h || wp != w) {
    if (release && x.id() != images.id()) images.graph().release(x);
    Var<Scalar> padded = logits;
    logits = resample(logits, std::make_shared<const SparseRowMatrix<Scalar>>(crop_matrix<Scalar>(hp, 0, h)),
                      std::make_shared<const SparseRowMatrix<Scalar>>(crop_matrix<Scalar>(wp, 0, w)));
    if (release) images.graph().release(padded);
  }
  EnhanceVars<Scalar> out;
  out.illumination = sigmoid(logits);
  out.enhanced = apply_illumination(images, out.illumination);
  return out;
}

struct EnhancedPair {
  Image enhanced;
  /// H x W illumination map, row-major.
  Eigen::ArrayXf illumination;
};

/// Gradient-free enhancement of one image.
EnhancedPair enhance(const EnhancementModel<float>& model, const Image& input);

/// Gradient-free enhancement of equally sized images.
std::vector<Image> enhance_images(const EnhancementModel<float>& model, const std::vector<Image>& inputs);

struct EnhanceFileReport {
  Index input_height = 0, input_width = 0;
  Index output_height = 0, output_width = 0;
};

/// Resizes so the longer side equals long_side, enhances, writes 8-bit sRGB.
EnhanceFileReport enhance_file(const EnhancementModel<float>& model, const std::filesystem::path& input,
                               const std::filesystem::path& output, Index long_side = 2048);

}  // namespace rave
