#include "rave/enhancement_net.hpp"

#include "rave/image_io.hpp"

namespace rave {

void UNetConfig::validate() const {
  if (depth < 1) throw ConfigError("UNet depth must be at least 1");
  if (base_channels < 1) throw ConfigError("UNet base channels must be at least 1");
  if (!(initial_illumination > 0 && initial_illumination < 1)) {
    throw ConfigError("initial illumination must lie in (0, 1)");
  }
}

EnhancedPair enhance(const EnhancementModel<float>& model, const Image& input) {
  if (input.has_nan()) throw InvalidInputError("input image contains NaN");
  Graph<float> g;
  const auto params = model.params.bind(g, false);
  const Var<float> x = g.constant(stack_images<float>(std::vector<Image>{input}));
  const EnhanceVars<float> out = enhance(model.config, params, x, true);
  EnhancedPair pair;
  pair.enhanced = unstack_image(out.enhanced.value(), 0);
  pair.illumination = out.illumination.value().data;
  return pair;
}

std::vector<Image> enhance_images(const EnhancementModel<float>& model, const std::vector<Image>& inputs) {
  if (inputs.empty()) return {};
  Graph<float> g;
  const auto params = model.params.bind(g, false);
  const Var<float> x = g.constant(stack_images<float>(inputs));
  return unstack_images(enhance(model.config, params, x, true).enhanced.value());
}

EnhanceFileReport enhance_file(const EnhancementModel<float>& model, const std::filesystem::path& input,
                               const std::filesystem::path& output, Index long_side) {
  if (long_side <= 0) throw ConfigError("long side must be positive");
  const Image in = read_image(input);
  EnhanceFileReport r;
  r.input_height = in.height;
  r.input_width = in.width;
  const Image resized = clamp_unit(resize_long_side(in, long_side));
  const EnhancedPair out = enhance(model, resized);
  write_image(output, out.enhanced);
  r.output_height = out.enhanced.height;
  r.output_width = out.enhanced.width;
  return r;
}

}  // namespace rave
