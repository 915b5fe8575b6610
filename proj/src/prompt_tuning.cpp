#include "rave/prompt_tuning.hpp"

namespace rave {

std::string to_string(GuidanceKind kind) {
  return kind == GuidanceKind::token_space ? "token_space" : "latent_space";
}

GuidanceKind parse_guidance_kind(const std::string& text) {
  if (text == "token_space") return GuidanceKind::token_space;
  if (text == "latent_space") return GuidanceKind::latent_space;
  throw ConfigError("unknown guidance kind '" + text + "'");
}

void store_guidance(TensorArchive& archive, const GuidancePair<float>& pair) {
  archive.metadata["guidance.kind"] = to_string(pair.kind);
  store_parameters(archive, "guidance", pair.params);
}

GuidancePair<float> load_guidance(const TensorArchive& archive) {
  GuidancePair<float> pair;
  pair.kind = parse_guidance_kind(archive.require_meta("guidance.kind"));
  pair.params = load_parameters(archive, "guidance");
  if (pair.params.size() != 2 || pair.params.name(0) != "positive" || pair.params.name(1) != "negative") {
    throw FormatError("checkpoint guidance state is malformed");
  }
  return pair;
}

}  // namespace rave
