#include <cstdlib>
#include <filesystem>

#include "rave/binary_io.hpp"
#include "rave/clip_backend.hpp"
#include "rave/hash.hpp"
#include "rave/mock_backend.hpp"
#include "rave/random.hpp"

namespace rave {

namespace fs = std::filesystem;

std::string mock_weight_checksum(const Tensor<double>& projection, const Tensor<double>* tokens) {
  BinaryWriter w;
  for (Index i = 0; i < projection.size(); ++i) w.f64(projection.data(i));
  if (tokens)
    for (Index i = 0; i < tokens->size(); ++i) w.f64(tokens->data(i));
  return to_hex(sha256(w.buffer()));
}

namespace {

Index count_blocks(const TensorArchive& a, const std::string& prefix) {
  Index n = 0;
  while (a.find(prefix + std::to_string(n) + ".attn.in_proj_weight")) ++n;
  return n;
}

Index meta_or(const TensorArchive& a, const std::string& key, Index fallback) {
  auto it = a.metadata.find(key);
  return it == a.metadata.end() ? fallback : static_cast<Index>(std::stol(it->second));
}

}  // namespace

ClipArchitecture ClipArchitecture::from_archive(const TensorArchive& a) {
  ClipArchitecture arch;
  const auto& conv = a.require("visual.conv1.weight");
  if (conv.rank() != 4 || conv.dim(1) != 3) throw FormatError("visual.conv1.weight must be [W, 3, p, p]");
  arch.vision_width = conv.dim(0);
  arch.patch_size = conv.dim(3);
  arch.vision_layers = count_blocks(a, "visual.transformer.resblocks.");
  const Index tokens = a.require("visual.positional_embedding").dim(0);
  const auto grid = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(tokens - 1))));
  if (grid * grid + 1 != tokens) throw FormatError("visual positional embedding is not a square grid");
  arch.image_size = grid * arch.patch_size;
  arch.embed_dim = a.require("visual.proj").dim(1);
  arch.vision_heads = meta_or(a, "vision_heads", arch.vision_width / 64);
  if (a.find("token_embedding.weight")) {
    arch.context_length = a.require("positional_embedding").dim(0);
    arch.vocab_size = a.require("token_embedding.weight").dim(0);
    arch.text_width = a.require("ln_final.weight").dim(0);
    arch.text_layers = count_blocks(a, "transformer.resblocks.");
    arch.text_heads = meta_or(a, "text_heads", arch.text_width / 64);
    if (a.require("text_projection").dim(1) != arch.embed_dim) {
      throw FormatError("text and image projections disagree on embedding width");
    }
  } else {
    arch.context_length = arch.vocab_size = arch.text_width = arch.text_layers = arch.text_heads = 0;
  }
  if (arch.vision_layers == 0 || arch.vision_heads <= 0 || arch.vision_width % arch.vision_heads) {
    throw FormatError("inconsistent vision tower configuration");
  }
  return arch;
}

std::vector<std::string> tiny_clip_vocabulary() {
  std::vector<std::string> v;
  for (const auto& w : kMockVocabulary) v.push_back(std::string(w.token) + "</w>");
  v.emplace_back("<|startoftext|>");
  v.emplace_back("<|endoftext|>");
  return v;
}

TensorArchive random_clip_archive(ClipArchitecture arch, std::uint64_t seed, std::vector<std::string> vocab) {
  arch.vocab_size = static_cast<Index>(vocab.size());
  TensorArchive a;
  Rng rng(seed);
  auto normal = [&](Shape s, double stdev) {
    Tensor<float> t(std::move(s));
    for (Index i = 0; i < t.size(); ++i) t.data(i) = static_cast<float>(stdev * rng.normal());
    return t;
  };
  auto ones = [](Index n) { return Tensor<float>::constant(Shape{n}, 1.0f); };
  auto zeros = [](Index n) { return Tensor<float>::zeros(Shape{n}); };
  auto add_block = [&](const std::string& p, Index w) {
    a.add(p + "ln_1.weight", ones(w));
    a.add(p + "ln_1.bias", zeros(w));
    a.add(p + "attn.in_proj_weight", normal({3 * w, w}, 1.0 / std::sqrt(double(w))));
    a.add(p + "attn.in_proj_bias", normal({3 * w}, 0.02));
    a.add(p + "attn.out_proj.weight", normal({w, w}, 1.0 / std::sqrt(double(w))));
    a.add(p + "attn.out_proj.bias", normal({w}, 0.02));
    a.add(p + "ln_2.weight", ones(w));
    a.add(p + "ln_2.bias", zeros(w));
    a.add(p + "mlp.c_fc.weight", normal({4 * w, w}, 1.0 / std::sqrt(double(w))));
    a.add(p + "mlp.c_fc.bias", normal({4 * w}, 0.02));
    a.add(p + "mlp.c_proj.weight", normal({w, 4 * w}, 1.0 / std::sqrt(double(4 * w))));
    a.add(p + "mlp.c_proj.bias", normal({w}, 0.02));
  };
  const Index vw = arch.vision_width, p = arch.patch_size, grid = arch.image_size / arch.patch_size;
  a.add("visual.conv1.weight", normal({vw, 3, p, p}, 1.0 / std::sqrt(double(3 * p * p))));
  a.add("visual.class_embedding", normal({vw}, 1.0 / std::sqrt(double(vw))));
  a.add("visual.positional_embedding", normal({grid * grid + 1, vw}, 1.0 / std::sqrt(double(vw))));
  a.add("visual.ln_pre.weight", ones(vw));
  a.add("visual.ln_pre.bias", zeros(vw));
  for (Index i = 0; i < arch.vision_layers; ++i) add_block("visual.transformer.resblocks." + std::to_string(i) + ".", vw);
  a.add("visual.ln_post.weight", ones(vw));
  a.add("visual.ln_post.bias", zeros(vw));
  a.add("visual.proj", normal({vw, arch.embed_dim}, 1.0 / std::sqrt(double(vw))));
  const Index tw = arch.text_width;
  a.add("token_embedding.weight", normal({arch.vocab_size, tw}, 1.0));
  a.add("positional_embedding", normal({arch.context_length, tw}, 0.1));
  for (Index i = 0; i < arch.text_layers; ++i) add_block("transformer.resblocks." + std::to_string(i) + ".", tw);
  a.add("ln_final.weight", ones(tw));
  a.add("ln_final.bias", zeros(tw));
  a.add("text_projection", normal({tw, arch.embed_dim}, 1.0 / std::sqrt(double(tw))));
  a.metadata["vision_heads"] = std::to_string(arch.vision_heads);
  a.metadata["text_heads"] = std::to_string(arch.text_heads);
  a.string_lists.emplace_back("vocab", std::move(vocab));
  return a;
}

std::vector<std::string> registered_backends() {
  return {"mock-linear-8", "mock-text-8", "mock-clip-tiny", "vit-b-32"};
}

namespace {

fs::path resolve_weights(const std::string& model_id, const BackendOptions& options) {
  if (model_id.find('/') != std::string::npos || fs::path(model_id).has_extension()) {
    if (fs::is_regular_file(model_id)) return model_id;
  }
  std::vector<fs::path> dirs;
  if (!options.weights_dir.empty()) dirs.emplace_back(options.weights_dir);
  if (const char* env = std::getenv("RAVE_WEIGHTS_DIR")) dirs.emplace_back(env);
  dirs.emplace_back("weights");
  for (const auto& d : dirs) {
    const fs::path candidate = d / (model_id + ".rvw");
    if (fs::is_regular_file(candidate)) return candidate;
  }
  if (model_id == "vit-b-32") {
    throw IoError(
        "weights for 'vit-b-32' not found: convert the released ViT-B/32 checkpoint with "
        "tools/convert_clip_weights.py and place it as <dir>/vit-b-32.rvw (dir = --weights-dir, "
        "RAVE_WEIGHTS_DIR, or ./weights)");
  }
  throw UnknownModelError("unknown model_id '" + model_id + "'");
}

}  // namespace

template <typename Scalar>
BackendHandle<Scalar> load_backend(const std::string& model_id, const std::string& device,
                                   const BackendOptions& options) {
  if (device != "cpu") throw ConfigError("unsupported device '" + device + "' (only cpu is available)");
  if (model_id == "mock-linear-8") return std::make_shared<MockLinearBackend<Scalar>>();
  if (model_id == "mock-text-8") return std::make_shared<MockTextBackend<Scalar>>();
  if (model_id == "mock-clip-tiny") {
    static const TensorArchive tiny = random_clip_archive(ClipArchitecture::tiny(), 0x7469, tiny_clip_vocabulary());
    static const std::string sum = to_hex(sha256(encode_archive(tiny, kWeightsMagic)));
    return std::make_shared<ClipBackend<Scalar>>(tiny, model_id, sum);
  }
  const fs::path path = resolve_weights(model_id, options);
  const auto bytes = read_file_bytes(path);
  const std::string sum = to_hex(sha256(bytes));
  if (!options.expected_checksum.empty() && options.expected_checksum != sum) {
    throw ChecksumError("weight checksum mismatch for '" + model_id + "': expected " + options.expected_checksum +
                        ", file has " + sum);
  }
  const TensorArchive archive = decode_archive(bytes, kWeightsMagic);
  std::string id = model_id;
  if (auto it = archive.metadata.find("model_id"); it != archive.metadata.end() && fs::is_regular_file(model_id)) {
    id = it->second;
  }
  return std::make_shared<ClipBackend<Scalar>>(archive, id, sum);
}

template BackendHandle<float> load_backend<float>(const std::string&, const std::string&, const BackendOptions&);
template BackendHandle<double> load_backend<double>(const std::string&, const std::string&, const BackendOptions&);

}  // namespace rave
