#pragma once

// CLIP-style dual encoder (ViT image tower, causal text transformer) read
// from a tensor archive that keeps the original state-dict names
// (visual.conv1.weight, transformer.resblocks.0.attn.in_proj_weight, ...).

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "rave/archive.hpp"
#include "rave/embedding_backend.hpp"
#include "rave/mock_backend.hpp"

namespace rave {

struct ClipArchitecture {
  Index image_size = 224;
  Index patch_size = 32;
  Index vision_width = 768;
  Index vision_layers = 12;
  Index vision_heads = 12;
  Index embed_dim = 512;
  Index context_length = 77;
  Index vocab_size = 49408;
  Index text_width = 512;
  Index text_layers = 12;
  Index text_heads = 8;

  static ClipArchitecture vit_b_32() { return {}; }
  /// Small random configuration exercising the same code path in tests.
  static ClipArchitecture tiny() {
    ClipArchitecture a;
    a.image_size = 32;
    a.patch_size = 8;
    a.vision_width = 32;
    a.vision_layers = 3;
    a.vision_heads = 2;
    a.embed_dim = 16;
    a.context_length = 16;
    a.vocab_size = 0;  // filled from the vocabulary
    a.text_width = 24;
    a.text_layers = 2;
    a.text_heads = 2;
    return a;
  }
  static ClipArchitecture from_archive(const TensorArchive& archive);
};

/// Seeded random weights for an architecture; vocab must include the
/// start/end markers "<|startoftext|>" and "<|endoftext|>".
TensorArchive random_clip_archive(ClipArchitecture arch, std::uint64_t seed, std::vector<std::string> vocab);

/// Vocabulary of the tiny random model: the mock words plus markers.
std::vector<std::string> tiny_clip_vocabulary();

template <typename Scalar>
class ClipBackend : public EmbeddingBackend<Scalar> {
 public:
  using W = std::shared_ptr<const Tensor<Scalar>>;

  ClipBackend(const TensorArchive& archive, std::string model_id, std::string checksum)
      : arch_(ClipArchitecture::from_archive(archive)) {
    auto get = [&](const std::string& name) {
      return std::make_shared<const Tensor<Scalar>>(archive.require(name).template cast<Scalar>());
    };
    auto get_as = [&](const std::string& name, Shape shape) {
      return std::make_shared<const Tensor<Scalar>>(
          Tensor<Scalar>(std::move(shape), archive.require(name).data.template cast<Scalar>()));
    };
    const Index p = arch_.patch_size, vw = arch_.vision_width;
    conv1_ = get_as("visual.conv1.weight", Shape{vw, 3 * p * p});
    class_embedding_ = get_as("visual.class_embedding", Shape{1, vw});
    vis_pos_ = get("visual.positional_embedding");
    ln_pre_ = {get("visual.ln_pre.weight"), get("visual.ln_pre.bias")};
    ln_post_ = {get("visual.ln_post.weight"), get("visual.ln_post.bias")};
    vis_proj_ = get("visual.proj");
    for (Index i = 0; i < arch_.vision_layers; ++i)
      vis_blocks_.push_back(load_block(archive, "visual.transformer.resblocks." + std::to_string(i) + "."));

    const auto* vocab = archive.find_list("vocab");
    if (vocab) {
      tokens_ = *vocab;
      token_table_ = get("token_embedding.weight");
      text_pos_ = get("positional_embedding");
      ln_final_ = {get("ln_final.weight"), get("ln_final.bias")};
      text_proj_ = get("text_projection");
      for (Index i = 0; i < arch_.text_layers; ++i)
        text_blocks_.push_back(load_block(archive, "transformer.resblocks." + std::to_string(i) + "."));
      sot_ = find_marker("<|startoftext|>");
      eot_ = find_marker("<|endoftext|>");
      const Index ctx = arch_.context_length;
      Tensor<Scalar> mask(Shape{ctx, ctx});
      for (Index i = 0; i < ctx; ++i)
        for (Index j = i + 1; j < ctx; ++j) mask.data(i * ctx + j) = -std::numeric_limits<Scalar>::infinity();
      causal_mask_ = mask;
    }

    info_.model_id = std::move(model_id);
    info_.embed_dim = arch_.embed_dim;
    info_.layer_count = arch_.vision_layers + 2;
    info_.device = "cpu";
    info_.has_text_tower = vocab != nullptr;
    info_.token_width = vocab ? arch_.text_width : 0;
    info_.context_length = vocab ? arch_.context_length : 0;
    info_.vocab_size = static_cast<Index>(tokens_.size());
    info_.weight_checksum = std::move(checksum);
  }

  const BackendInfo& info() const override { return info_; }
  const ClipArchitecture& architecture() const { return arch_; }

  /// Stages: 0 = ln_pre tokens, 1..L = transformer block outputs, L+1 = embedding.
  std::vector<Var<Scalar>> image_stages(Graph<Scalar>& g, const Var<Scalar>& images) const override {
    return forward_images(g, images, true);
  }

  Var<Scalar> image_embedding(Graph<Scalar>& g, const Var<Scalar>& images) const override {
    return forward_images(g, images, false).back();
  }

  /// Blocks at one, two and three thirds of the depth plus the embedding.
  std::vector<Index> default_layers() const override {
    std::vector<Index> out;
    const Index l = arch_.vision_layers;
    for (Index i = 1; i <= 3; ++i) {
      const Index b = std::max<Index>(1, i * l / 3);
      if (out.empty() || out.back() != b) out.push_back(b);
    }
    out.push_back(l + 1);
    return out;
  }

  /// Wraps tokens [N, E] as [SOT, tokens, EOT] and returns the projected EOT feature.
  Var<Scalar> text_embedding(Graph<Scalar>& g, const Var<Scalar>& tokens) const override {
    const Index n = tokens.dim(0) + 2;
    if (n > arch_.context_length) {
      throw InvalidInputError("token sequence of " + std::to_string(tokens.dim(0)) +
                              " exceeds context length " + std::to_string(arch_.context_length - 2));
    }
    Var<Scalar> sot = g.constant(token_embedding(sot_));
    Var<Scalar> eot = g.constant(token_embedding(eot_));
    Var<Scalar> x = concat<Scalar>({sot, tokens, eot}, 0);
    x = add(x, slice(g.constant(text_pos_), 0, 0, n));
    Tensor<Scalar> mask(Shape{n, n});
    mask.matrix() = causal_mask_.matrix().topLeftCorner(n, n);
    Var<Scalar> m = g.constant(std::move(mask));
    for (const auto& b : text_blocks_) x = block(g, x, b, arch_.text_heads, &m);
    x = layer_norm(slice(x, 0, n - 1, 1), g.constant(ln_final_.first), g.constant(ln_final_.second));
    return matmul(x, g.constant(text_proj_));
  }

  const std::vector<std::string>& vocabulary_tokens() const override {
    if (!info_.has_text_tower) return EmbeddingBackend<Scalar>::vocabulary_tokens();
    return tokens_;
  }

  Tensor<Scalar> token_embedding(Index id) const override {
    if (!info_.has_text_tower) return EmbeddingBackend<Scalar>::token_embedding(id);
    Tensor<Scalar> row(Shape{1, arch_.text_width});
    row.matrix() = token_table_->matrix().row(id);
    return row;
  }

 private:
  struct Block {
    W ln1_w, ln1_b, in_w, in_b, out_w, out_b, ln2_w, ln2_b, fc_w, fc_b, proj_w, proj_b;
  };

  static Block load_block(const TensorArchive& a, const std::string& prefix) {
    auto get = [&](const std::string& name) {
      return std::make_shared<const Tensor<Scalar>>(a.require(prefix + name).template cast<Scalar>());
    };
    return {get("ln_1.weight"),        get("ln_1.bias"),         get("attn.in_proj_weight"),
            get("attn.in_proj_bias"),  get("attn.out_proj.weight"), get("attn.out_proj.bias"),
            get("ln_2.weight"),        get("ln_2.bias"),         get("mlp.c_fc.weight"),
            get("mlp.c_fc.bias"),      get("mlp.c_proj.weight"), get("mlp.c_proj.bias")};
  }

  Index find_marker(const std::string& marker) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (tokens_[i] == marker) return static_cast<Index>(i);
    throw FormatError("vocabulary lacks " + marker);
  }

  Var<Scalar> attention(Graph<Scalar>& g, const Var<Scalar>& x, const Block& b, Index heads,
                        const Var<Scalar>* mask) const {
    const Index width = x.dim(1), hd = width / heads;
    Var<Scalar> qkv = linear(x, g.constant(b.in_w), g.constant(b.in_b));
    const Scalar s = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
    std::vector<Var<Scalar>> outs;
    for (Index h = 0; h < heads; ++h) {
      Var<Scalar> q = slice(qkv, 1, h * hd, hd);
      Var<Scalar> k = slice(qkv, 1, width + h * hd, hd);
      Var<Scalar> v = slice(qkv, 1, 2 * width + h * hd, hd);
      Var<Scalar> scores = scale(linear(q, k), s);
      if (mask) scores = add(scores, *mask);
      outs.push_back(matmul(softmax_rows(scores), v));
    }
    Var<Scalar> o = heads == 1 ? outs.front() : concat(outs, 1);
    return linear(o, g.constant(b.out_w), g.constant(b.out_b));
  }

  Var<Scalar> block(Graph<Scalar>& g, Var<Scalar> x, const Block& b, Index heads, const Var<Scalar>* mask) const {
    x = add(x, attention(g, layer_norm(x, g.constant(b.ln1_w), g.constant(b.ln1_b)), b, heads, mask));
    Var<Scalar> h = layer_norm(x, g.constant(b.ln2_w), g.constant(b.ln2_b));
    h = linear(quick_gelu(linear(h, g.constant(b.fc_w), g.constant(b.fc_b))), g.constant(b.proj_w),
               g.constant(b.proj_b));
    return add(x, h);
  }

  std::vector<Var<Scalar>> forward_images(Graph<Scalar>& g, const Var<Scalar>& images, bool all_stages) const {
    const Index r = arch_.image_size;
    Var<Scalar> x = resize(images, r, r, ResampleFilter::bicubic);
    x = channel_affine(x, clip_norm_scale<Scalar>(), clip_norm_shift<Scalar>());
    const Index n = images.dim(0);
    std::vector<std::vector<Var<Scalar>>> per_image;
    for (Index i = 0; i < n; ++i) {
      std::vector<Var<Scalar>> stages;
      Var<Scalar> t = linear(patchify(slice(x, 0, i, 1), arch_.patch_size), g.constant(conv1_));
      t = add(concat<Scalar>({g.constant(class_embedding_), t}, 0), g.constant(vis_pos_));
      t = layer_norm(t, g.constant(ln_pre_.first), g.constant(ln_pre_.second));
      if (all_stages) stages.push_back(reshape(t, Shape{1, t.size()}));
      for (const auto& b : vis_blocks_) {
        t = block(g, t, b, arch_.vision_heads, nullptr);
        if (all_stages) stages.push_back(reshape(t, Shape{1, t.size()}));
      }
      Var<Scalar> pooled = layer_norm(slice(t, 0, 0, 1), g.constant(ln_post_.first), g.constant(ln_post_.second));
      stages.push_back(matmul(pooled, g.constant(vis_proj_)));
      per_image.push_back(std::move(stages));
    }
    std::vector<Var<Scalar>> out;
    for (std::size_t s = 0; s < per_image.front().size(); ++s) {
      std::vector<Var<Scalar>> rows;
      for (const auto& st : per_image) rows.push_back(st[s]);
      out.push_back(n == 1 ? rows.front() : concat(rows, 0));
    }
    return out;
  }

  ClipArchitecture arch_;
  BackendInfo info_;
  W conv1_, class_embedding_, vis_pos_, vis_proj_;
  std::pair<W, W> ln_pre_, ln_post_;
  std::vector<Block> vis_blocks_;
  std::vector<std::string> tokens_;
  W token_table_, text_pos_, text_proj_;
  std::pair<W, W> ln_final_;
  std::vector<Block> text_blocks_;
  Index sot_ = 0, eot_ = 0;
  Tensor<Scalar> causal_mask_;
};

}  // namespace rave
