#include "rave/losses.hpp"

#include <algorithm>

namespace rave {

void LossConfig::validate(std::size_t layer_count) const {
  if (!(omega >= 0.0)) throw ConfigError("omega must be non-negative");
  for (double m : {margins.m0, margins.m1, margins.m2}) {
    if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("margins must lie in [0, 1]");
  }
  if (alpha.size() != layer_count) {
    throw ConfigError("alpha has " + std::to_string(alpha.size()) + " entries, expected " +
                      std::to_string(layer_count));
  }
}

double initial_classification_loss(double pred, int label) {
  if (label != 0 && label != 1) throw InvalidInputError("label must be 0 or 1");
  if (!(pred >= 0.0 && pred <= 1.0)) throw InvalidInputError("prediction must lie in [0, 1]");
  const double p = std::clamp(pred, kProbabilityFloor, 1 - kProbabilityFloor);
  return label == 1 ? -std::log(p) : -std::log(1 - p);
}

double prompt_refinement_loss(double s_w, double s_b, double s_t, double s_prev, const Margins& m) {
  auto h = [](double x) { return std::max(0.0, x); };
  return h(s_w - s_b + m.m0) + h(s_prev - s_b + m.m0) + h(s_w - s_t + m.m1) + h(s_t - s_prev + m.m2);
}

}  // namespace rave
