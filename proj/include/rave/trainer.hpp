#pragma once

// Training loops for RAVE (single stage) and CLIP-LIT / CLIP-LIT-Latent
// (guidance initialisation, enhancement training, refinement rounds), with
// resumable checkpoints and a run manifest.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rave/config.hpp"
#include "rave/data_pipeline.hpp"
#include "rave/embedding_backend.hpp"
#include "rave/enhancement_net.hpp"
#include "rave/losses.hpp"
#include "rave/prompt_tuning.hpp"
#include "rave/residual.hpp"

namespace rave {

enum class Method { rave, clip_lit, clip_lit_latent };
enum class Setting { supervised, unsupervised };

std::string to_string(Method m);
std::string to_string(Setting s);
/// Accepts "clip_lit" and "clip-lit" spellings.
Method parse_method(const std::string& text);
Setting parse_setting(const std::string& text);

struct TrainConfig {
  Method method = Method::rave;
  Setting setting = Setting::unsupervised;
  double omega = 6.0;
  double lr_enhance = 2e-5;
  double lr_guidance = 5e-6;
  std::size_t batch_enhance = 8;
  std::size_t batch_guidance = 8;
  /// Enhancement iterations of the main stage. Refinement rounds add one
  /// epoch each on top.
  long total_iters = 10000;
  long warmup_identity_iters = 0;
  Margins margins;
  long refine_rounds = 10;
  std::uint64_t seed = 0;
  long checkpoint_every = 1000;
  double beta1 = 0.9;
  double beta2 = 0.99;
  Index image_size = 512;
  UNetConfig unet;
  AugmentConfig augment;
  /// Backend stage indices for the identity loss; empty uses the backend default.
  std::vector<Index> layers;
  /// One weight per layer; empty means 1.0 each.
  std::vector<double> alpha;
  double guidance_threshold = 0.05;
  long guidance_cap = 5000;
  Index token_count = kDefaultTokenCount;
  bool normalize_residual_embedding = true;

  static TrainConfig defaults(Method m);
  /// Applies "method" first (selecting its defaults), then every other key.
  /// Keys outside the training config must be listed in `passthrough`.
  static TrainConfig from_key_values(const KeyValues& kv, const std::vector<std::string>& passthrough = {});
  KeyValues to_key_values() const;
  void validate() const;

  bool uses_guidance() const { return method != Method::rave; }
  GuidanceKind guidance_kind() const {
    return method == Method::clip_lit ? GuidanceKind::token_space : GuidanceKind::latent_space;
  }
};

/// Keys accepted by TrainConfig::from_key_values.
const std::vector<std::string>& train_config_keys();

struct LossRecord {
  /// Enhancement iteration, or guidance step count for guidance phases.
  long iter = 0;
  /// guidance_init | enhance_warmup | enhance | guidance_refine | enhance_refine
  std::string phase;
  std::vector<std::pair<std::string, double>> terms;
  double total = 0.0;
};

struct CheckpointRecord {
  long iter = 0;
  std::string file;
  std::string sha256;
};

struct RunManifest {
  KeyValues config;
  std::string backend_model_id;
  std::string backend_checksum;
  std::string dataset_fingerprint;
  std::string residual_fingerprint;
  std::vector<LossRecord> log;
  std::vector<CheckpointRecord> checkpoints;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
};

struct TrainingState {
  TrainConfig config;
  EnhancementModel<float> model;
  AdamState<float> enhance_opt;
  std::optional<GuidancePair<float>> guidance;
  GuidanceOptimizer<float> guidance_opt;
  /// Enhancement model before the latest enhancement epoch; source of I_prev.
  std::optional<EnhancementModel<float>> snapshot;
  /// Completed enhancement iterations.
  long iter = 0;
  long guidance_init_steps = 0;
  bool guidance_initialized = false;
  RunManifest manifest;
};

/// Fresh state: seeded model, guidance initialised for CLIP-LIT methods.
TrainingState start_training(const TrainConfig& config, const EmbeddingBackend<float>& backend,
                             const CorpusIndex& corpus, const ResidualVector* rv = nullptr);

/// Atomic write; returns the file's SHA-256.
std::string save_checkpoint(const TrainingState& state, const std::filesystem::path& path);
TrainingState load_checkpoint(const std::filesystem::path& path);
/// Fails unless the stored network matches `expected`.
TrainingState load_checkpoint(const std::filesystem::path& path, const UNetConfig& expected);
/// The enhancement model alone.
EnhancementModel<float> load_model(const std::filesystem::path& path);

struct TrainOptions {
  /// Checkpoints go to <output_dir>/checkpoints, the manifest to
  /// <output_dir>/manifest.json. Empty disables file output.
  std::filesystem::path output_dir;
  std::function<void(const LossRecord&, const TrainingState&)> on_log;
  /// Stop once this many enhancement iterations are done (negative: run to the end).
  long stop_after = -1;
};

struct TrainResult {
  TrainingState state;
  std::filesystem::path final_checkpoint;
};

TrainResult train_rave(TrainingState state, const EmbeddingBackend<float>& backend, const ResidualVector& rv,
                       const CorpusIndex& corpus, const TrainOptions& options = {});
TrainResult train_rave(const TrainConfig& config, const EmbeddingBackend<float>& backend, const ResidualVector& rv,
                       const CorpusIndex& corpus, const TrainOptions& options = {});

TrainResult train_clip_lit(TrainingState state, const EmbeddingBackend<float>& backend, const CorpusIndex& corpus,
                           const TrainOptions& options = {});
TrainResult train_clip_lit(const TrainConfig& config, const EmbeddingBackend<float>& backend,
                           const CorpusIndex& corpus, const TrainOptions& options = {});

struct RefinementBatch {
  std::vector<Image> well_lit, backlit, enhanced, previous;
};

/// I_t from the current model and I_prev from the snapshot, both gradient-free.
RefinementBatch make_refinement_batch(const EnhancementModel<float>& current,
                                      const EnhancementModel<float>* previous_snapshot,
                                      std::vector<Image> well_lit, std::vector<Image> backlit);

/// Resolved identity-loss layers and weights.
std::vector<Index> resolve_layers(const TrainConfig& config, const EmbeddingBackend<float>& backend);
std::vector<double> resolve_alpha(const TrainConfig& config, std::size_t layer_count);

/// Mean residual loss of the model's outputs on images (no gradients).
double residual_loss_on(const EnhancementModel<float>& model, const EmbeddingBackend<float>& backend,
                        const ResidualVector& rv, const std::vector<Image>& images, bool normalize = true);
/// Mean S(I) of images under a guidance pair.
double mean_negative_score(const EmbeddingBackend<float>& backend, const GuidancePair<float>& guidance,
                           const std::vector<Image>& images);

/// Wraps a backend and counts text-tower calls.
template <typename Scalar>
class CountingBackend : public EmbeddingBackend<Scalar> {
 public:
  explicit CountingBackend(const EmbeddingBackend<Scalar>& inner) : inner_(inner) {}
  const BackendInfo& info() const override { return inner_.info(); }
  std::vector<Var<Scalar>> image_stages(Graph<Scalar>& g, const Var<Scalar>& images) const override {
    ++image_calls;
    return inner_.image_stages(g, images);
  }
  Var<Scalar> text_embedding(Graph<Scalar>& g, const Var<Scalar>& tokens) const override {
    ++text_calls;
    return inner_.text_embedding(g, tokens);
  }
  const std::vector<std::string>& vocabulary_tokens() const override {
    ++text_calls;
    return inner_.vocabulary_tokens();
  }
  Tensor<Scalar> token_embedding(Index id) const override {
    ++text_calls;
    return inner_.token_embedding(id);
  }
  std::vector<Index> default_layers() const override { return inner_.default_layers(); }

  mutable long image_calls = 0;
  mutable long text_calls = 0;

 private:
  const EmbeddingBackend<Scalar>& inner_;
};

}  // namespace rave
