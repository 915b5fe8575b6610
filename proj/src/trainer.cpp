#include "rave/trainer.hpp"

#include <cstdio>

#include <json.hpp>

#include "rave/archive.hpp"
#include "rave/binary_io.hpp"
#include "rave/hash.hpp"

namespace rave {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::uint64_t kEnhanceStream = 0x656e68;
constexpr std::uint64_t kInitBacklitStream = 0x676962;
constexpr std::uint64_t kInitWellStream = 0x676977;
constexpr std::uint64_t kRefineBacklitStream = 0x677262;
constexpr std::uint64_t kRefineWellStream = 0x677277;
constexpr std::uint64_t kModelStream = 0x6d6f64;
constexpr int kCheckpointVersion = 1;

std::string join(const std::vector<double>& v) {
  std::string out;
  for (double x : v) out += (out.empty() ? "" : ",") + format_double(x);
  return out;
}

std::string join(const std::vector<Index>& v) {
  std::string out;
  for (Index x : v) out += (out.empty() ? "" : ",") + std::to_string(x);
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  const long v = parse_long(key, value);
  if (v < 0) throw ConfigError("'" + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

long ceil_div(std::size_t a, std::size_t b) { return static_cast<long>((a + b - 1) / b); }

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::rave: return "rave";
    case Method::clip_lit: return "clip_lit";
    case Method::clip_lit_latent: return "clip_lit_latent";
  }
  return "?";
}

std::string to_string(Setting s) { return s == Setting::supervised ? "supervised" : "unsupervised"; }

Method parse_method(const std::string& text) {
  std::string t = text;
  for (char& c : t)
    if (c == '-') c = '_';
  if (t == "rave") return Method::rave;
  if (t == "clip_lit") return Method::clip_lit;
  if (t == "clip_lit_latent") return Method::clip_lit_latent;
  throw ConfigError("unknown method '" + text + "' (expected rave, clip-lit, clip-lit-latent)");
}

Setting parse_setting(const std::string& text) {
  if (text == "supervised") return Setting::supervised;
  if (text == "unsupervised") return Setting::unsupervised;
  throw ConfigError("unknown setting '" + text + "' (expected supervised or unsupervised)");
}

TrainConfig TrainConfig::defaults(Method m) {
  TrainConfig c;
  c.method = m;
  if (m != Method::rave) {
    c.omega = 0.9;
    c.batch_enhance = 16;
    c.total_iters = 50000;
    c.warmup_identity_iters = 1000;
  }
  return c;
}

const std::vector<std::string>& train_config_keys() {
  static const std::vector<std::string> keys{
      "method", "setting", "omega", "lr_enhance", "lr_guidance", "batch_enhance", "batch_guidance", "total_iters",
      "warmup_identity_iters", "margins", "refine_rounds", "seed", "checkpoint_every", "adam_betas", "image_size",
      "unet_depth", "unet_channels", "unet_initial_illumination", "augment", "flip_probability", "zoom_min",
      "zoom_max", "rotation_degrees", "layers", "alpha", "guidance_threshold", "guidance_cap", "token_count",
      "normalize_residual_embedding"};
  return keys;
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv, const std::vector<std::string>& passthrough) {
  TrainConfig c = defaults(parse_method(kv.get("method", "rave")));
  for (const auto& [key, value] : kv.entries()) {
    if (key == "method") continue;
    if (key == "setting") c.setting = parse_setting(value);
    else if (key == "omega") c.omega = parse_double(key, value);
    else if (key == "lr_enhance") c.lr_enhance = parse_double(key, value);
    else if (key == "lr_guidance") c.lr_guidance = parse_double(key, value);
    else if (key == "batch_enhance") c.batch_enhance = parse_size(key, value);
    else if (key == "batch_guidance") c.batch_guidance = parse_size(key, value);
    else if (key == "total_iters") c.total_iters = parse_long(key, value);
    else if (key == "warmup_identity_iters") c.warmup_identity_iters = parse_long(key, value);
    else if (key == "margins") {
      const auto m = parse_double_list(key, value);
      if (m.size() != 3) throw ConfigError("'margins' expects three values m0,m1,m2");
      c.margins = {m[0], m[1], m[2]};
    } else if (key == "refine_rounds") c.refine_rounds = parse_long(key, value);
    else if (key == "seed") c.seed = parse_size(key, value);
    else if (key == "checkpoint_every") c.checkpoint_every = parse_long(key, value);
    else if (key == "adam_betas") {
      const auto b = parse_double_list(key, value);
      if (b.size() != 2) throw ConfigError("'adam_betas' expects two values");
      c.beta1 = b[0];
      c.beta2 = b[1];
    } else if (key == "image_size") c.image_size = parse_long(key, value);
    else if (key == "unet_depth") c.unet.depth = parse_long(key, value);
    else if (key == "unet_channels") c.unet.base_channels = parse_long(key, value);
    else if (key == "unet_initial_illumination") c.unet.initial_illumination = parse_double(key, value);
    else if (key == "augment") c.augment.enabled = parse_bool(key, value);
    else if (key == "flip_probability") c.augment.flip_probability = parse_double(key, value);
    else if (key == "zoom_min") c.augment.zoom_min = parse_double(key, value);
    else if (key == "zoom_max") c.augment.zoom_max = parse_double(key, value);
    else if (key == "rotation_degrees") c.augment.rotation_degrees = parse_double(key, value);
    else if (key == "layers") {
      c.layers.clear();
      for (long l : parse_long_list(key, value)) c.layers.push_back(l);
    } else if (key == "alpha") c.alpha = parse_double_list(key, value);
    else if (key == "guidance_threshold") c.guidance_threshold = parse_double(key, value);
    else if (key == "guidance_cap") c.guidance_cap = parse_long(key, value);
    else if (key == "token_count") c.token_count = parse_long(key, value);
    else if (key == "normalize_residual_embedding") c.normalize_residual_embedding = parse_bool(key, value);
    else if (std::find(passthrough.begin(), passthrough.end(), key) == passthrough.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  return c;
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  kv.set("method", to_string(method));
  kv.set("setting", to_string(setting));
  kv.set("omega", format_double(omega));
  kv.set("lr_enhance", format_double(lr_enhance));
  kv.set("lr_guidance", format_double(lr_guidance));
  kv.set("batch_enhance", std::to_string(batch_enhance));
  kv.set("batch_guidance", std::to_string(batch_guidance));
  kv.set("total_iters", std::to_string(total_iters));
  kv.set("warmup_identity_iters", std::to_string(warmup_identity_iters));
  kv.set("margins", join(std::vector<double>{margins.m0, margins.m1, margins.m2}));
  kv.set("refine_rounds", std::to_string(refine_rounds));
  kv.set("seed", std::to_string(seed));
  kv.set("checkpoint_every", std::to_string(checkpoint_every));
  kv.set("adam_betas", join(std::vector<double>{beta1, beta2}));
  kv.set("image_size", std::to_string(image_size));
  kv.set("unet_depth", std::to_string(unet.depth));
  kv.set("unet_channels", std::to_string(unet.base_channels));
  kv.set("unet_initial_illumination", format_double(unet.initial_illumination));
  kv.set("augment", augment.enabled ? "true" : "false");
  kv.set("flip_probability", format_double(augment.flip_probability));
  kv.set("zoom_min", format_double(augment.zoom_min));
  kv.set("zoom_max", format_double(augment.zoom_max));
  kv.set("rotation_degrees", format_double(augment.rotation_degrees));
  kv.set("layers", join(layers));
  kv.set("alpha", join(alpha));
  kv.set("guidance_threshold", format_double(guidance_threshold));
  kv.set("guidance_cap", std::to_string(guidance_cap));
  kv.set("token_count", std::to_string(token_count));
  kv.set("normalize_residual_embedding", normalize_residual_embedding ? "true" : "false");
  return kv;
}

void TrainConfig::validate() const {
  unet.validate();
  if (!(lr_enhance > 0) || !(lr_guidance > 0)) throw ConfigError("learning rates must be positive");
  if (batch_enhance == 0 || batch_guidance == 0) throw ConfigError("batch sizes must be positive");
  if (uses_guidance() && batch_guidance < 2) throw ConfigError("batch_guidance must be at least 2");
  if (!(omega >= 0)) throw ConfigError("omega must be non-negative");
  for (double m : {margins.m0, margins.m1, margins.m2})
    if (!(m >= 0 && m <= 1)) throw ConfigError("margins must lie in [0, 1]");
  if (total_iters < 0 || warmup_identity_iters < 0 || refine_rounds < 0) {
    throw ConfigError("iteration counts must be non-negative");
  }
  if (checkpoint_every <= 0) throw ConfigError("checkpoint_every must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must lie in [0, 1)");
  if (image_size < 1) throw ConfigError("image_size must be positive");
  if (guidance_cap < 0) throw ConfigError("guidance_cap must be non-negative");
  if (token_count < 1) throw ConfigError("token_count must be positive");
  if (augment.zoom_min < 1 || augment.zoom_max < augment.zoom_min) throw ConfigError("invalid zoom range");
  if (augment.flip_probability < 0 || augment.flip_probability > 1) throw ConfigError("invalid flip probability");
}

std::vector<Index> resolve_layers(const TrainConfig& config, const EmbeddingBackend<float>& backend) {
  const std::vector<Index> layers = config.layers.empty() ? backend.default_layers() : config.layers;
  for (Index l : layers) {
    if (l < 0 || l >= backend.info().layer_count) {
      throw ConfigError("layer index " + std::to_string(l) + " out of range (backend has " +
                        std::to_string(backend.info().layer_count) + " stages)");
    }
  }
  if (layers.empty()) throw ConfigError("identity loss needs at least one layer");
  return layers;
}

std::vector<double> resolve_alpha(const TrainConfig& config, std::size_t layer_count) {
  std::vector<double> alpha = config.alpha.empty() ? std::vector<double>(layer_count, 1.0) : config.alpha;
  LossConfig lc;
  lc.alpha = alpha;
  lc.omega = config.omega;
  lc.margins = config.margins;
  lc.validate(layer_count);
  return alpha;
}

// --- manifest ---------------------------------------------------------------

std::string RunManifest::to_json() const {
  json j;
  j["config"] = config.entries();
  j["backend"] = {{"model_id", backend_model_id}, {"checksum", backend_checksum}};
  j["dataset_fingerprint"] = dataset_fingerprint;
  j["residual_fingerprint"] = residual_fingerprint;
  json log_json = json::array();
  for (const auto& r : log) {
    json terms = json::object();
    for (const auto& [k, v] : r.terms) terms[k] = v;
    log_json.push_back({{"iter", r.iter}, {"phase", r.phase}, {"terms", terms}, {"total", r.total}});
  }
  j["log"] = std::move(log_json);
  json ck = json::array();
  for (const auto& c : checkpoints) ck.push_back({{"iter", c.iter}, {"file", c.file}, {"sha256", c.sha256}});
  j["checkpoints"] = std::move(ck);
  return j.dump(1);
}

RunManifest RunManifest::from_json(const std::string& text) {
  RunManifest m;
  try {
    const json j = json::parse(text);
    for (const auto& [k, v] : j.at("config").items()) m.config.set(k, v.get<std::string>());
    m.backend_model_id = j.at("backend").at("model_id").get<std::string>();
    m.backend_checksum = j.at("backend").at("checksum").get<std::string>();
    m.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    m.residual_fingerprint = j.at("residual_fingerprint").get<std::string>();
    for (const auto& r : j.at("log")) {
      LossRecord rec;
      rec.iter = r.at("iter").get<long>();
      rec.phase = r.at("phase").get<std::string>();
      for (const auto& [k, v] : r.at("terms").items()) rec.terms.emplace_back(k, v.get<double>());
      rec.total = r.at("total").get<double>();
      m.log.push_back(std::move(rec));
    }
    for (const auto& c : j.at("checkpoints")) {
      m.checkpoints.push_back(
          {c.at("iter").get<long>(), c.at("file").get<std::string>(), c.at("sha256").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed run manifest: ") + e.what());
  }
  return m;
}

// --- state and checkpoints --------------------------------------------------

TrainingState start_training(const TrainConfig& config, const EmbeddingBackend<float>& backend,
                             const CorpusIndex& corpus, const ResidualVector* rv) {
  config.validate();
  resolve_alpha(config, resolve_layers(config, backend).size());
  TrainingState s;
  s.config = config;
  s.model = build_model<float>(config.unet, derive_seed(config.seed, {kModelStream}));
  if (config.uses_guidance()) {
    s.guidance = init_guidance(config.guidance_kind(), config.seed, backend, config.token_count);
  }
  s.guidance_opt.adam = {config.lr_guidance, config.beta1, config.beta2, 1e-8};
  s.manifest.config = config.to_key_values();
  s.manifest.backend_model_id = backend.info().model_id;
  s.manifest.backend_checksum = backend.info().weight_checksum;
  s.manifest.dataset_fingerprint = corpus.fingerprint;
  if (rv) s.manifest.residual_fingerprint = to_hex(sha256(encode_residual(*rv)));
  return s;
}

std::string save_checkpoint(const TrainingState& s, const fs::path& path) {
  TensorArchive a;
  a.metadata["version"] = std::to_string(kCheckpointVersion);
  const KeyValues config = s.config.to_key_values();
  for (const auto& [k, v] : config.entries()) a.metadata["config." + k] = v;
  a.metadata["progress.iter"] = std::to_string(s.iter);
  a.metadata["progress.guidance_init_steps"] = std::to_string(s.guidance_init_steps);
  a.metadata["progress.guidance_initialized"] = s.guidance_initialized ? "1" : "0";
  a.metadata["manifest"] = s.manifest.to_json();
  store_parameters(a, "model", s.model.params);
  store_adam(a, "model_adam", s.enhance_opt);
  if (s.guidance) {
    store_guidance(a, *s.guidance);
    store_adam(a, "guidance_adam", s.guidance_opt.state);
  }
  if (s.snapshot) store_parameters(a, "snapshot", s.snapshot->params);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  return write_archive(path, a, kCheckpointMagic);
}

namespace {

EnhancementModel<float> restore_model(const TensorArchive& a, const std::string& prefix, const UNetConfig& config) {
  EnhancementModel<float> m;
  m.config = config;
  m.params = load_parameters(a, prefix);
  if (!m.params.same_layout(build_model<float>(config, 0).params)) {
    throw FormatError("checkpoint network '" + prefix + "' does not match its recorded architecture");
  }
  return m;
}

TrainConfig checkpoint_config(const TensorArchive& a) {
  if (a.require_meta("version") != std::to_string(kCheckpointVersion)) {
    throw FormatError("unsupported checkpoint version " + a.require_meta("version"));
  }
  KeyValues kv;
  for (const auto& [k, v] : a.metadata)
    if (k.rfind("config.", 0) == 0) kv.set(k.substr(7), v);
  return TrainConfig::from_key_values(kv);
}

}  // namespace

TrainingState load_checkpoint(const fs::path& path) {
  const TensorArchive a = read_archive(path, kCheckpointMagic);
  TrainingState s;
  s.config = checkpoint_config(a);
  s.model = restore_model(a, "model", s.config.unet);
  s.enhance_opt = load_adam(a, "model_adam", s.model.params);
  s.guidance_opt.adam = {s.config.lr_guidance, s.config.beta1, s.config.beta2, 1e-8};
  if (a.metadata.count("guidance.kind")) {
    s.guidance = load_guidance(a);
    s.guidance_opt.state = load_adam(a, "guidance_adam", s.guidance->params);
  }
  if (a.metadata.count("snapshot.count")) s.snapshot = restore_model(a, "snapshot", s.config.unet);
  s.iter = parse_long("progress.iter", a.require_meta("progress.iter"));
  s.guidance_init_steps = parse_long("progress.guidance_init_steps", a.require_meta("progress.guidance_init_steps"));
  s.guidance_initialized = a.require_meta("progress.guidance_initialized") == "1";
  s.manifest = RunManifest::from_json(a.require_meta("manifest"));
  return s;
}

TrainingState load_checkpoint(const fs::path& path, const UNetConfig& expected) {
  TrainingState s = load_checkpoint(path);
  if (!(s.config.unet == expected)) {
    throw ConfigError("checkpoint network (depth " + std::to_string(s.config.unet.depth) + ", channels " +
                      std::to_string(s.config.unet.base_channels) + ") differs from the requested (depth " +
                      std::to_string(expected.depth) + ", channels " + std::to_string(expected.base_channels) + ")");
  }
  return s;
}

EnhancementModel<float> load_model(const fs::path& path) {
  const TensorArchive a = read_archive(path, kCheckpointMagic);
  return restore_model(a, "model", checkpoint_config(a).unet);
}

// --- evaluation helpers -----------------------------------------------------

double residual_loss_on(const EnhancementModel<float>& model, const EmbeddingBackend<float>& backend,
                        const ResidualVector& rv, const std::vector<Image>& images, bool normalize) {
  if (images.empty()) throw InvalidInputError("residual_loss_on: no images");
  double total = 0;
  for (std::size_t i = 0; i < images.size(); i += kEncodeBatch) {
    const std::size_t n = std::min(kEncodeBatch, images.size() - i);
    const std::vector<Image> chunk(images.begin() + static_cast<long>(i), images.begin() + static_cast<long>(i + n));
    const RowMatrix<float> emb = encode_image(backend, enhance_images(model, chunk));
    Graph<float> g;
    total += static_cast<double>(n) *
             residual_loss(g.constant(Tensor<float>::from_matrix(emb)), rv, normalize).item();
  }
  return total / static_cast<double>(images.size());
}

double mean_negative_score(const EmbeddingBackend<float>& backend, const GuidancePair<float>& guidance,
                           const std::vector<Image>& images) {
  if (images.empty()) throw InvalidInputError("mean_negative_score: no images");
  const auto [pos, neg] = project(guidance, backend);
  double total = 0;
  for (std::size_t i = 0; i < images.size(); i += kEncodeBatch) {
    const std::size_t n = std::min(kEncodeBatch, images.size() - i);
    const RowMatrix<float> emb = encode_image(backend, std::span<const Image>(images.data() + i, n));
    Graph<float> g;
    const Var<float> s = negative_similarity_score(g.constant(Tensor<float>::from_matrix(emb)),
                                                   g.constant(Tensor<float>::from_vector(pos)),
                                                   g.constant(Tensor<float>::from_vector(neg)));
    total += s.value().data.cast<double>().sum();
  }
  return total / static_cast<double>(images.size());
}

RefinementBatch make_refinement_batch(const EnhancementModel<float>& current,
                                      const EnhancementModel<float>* previous_snapshot,
                                      std::vector<Image> well_lit, std::vector<Image> backlit) {
  if (!previous_snapshot) throw ConfigError("refinement needs the previous enhancement snapshot");
  if (well_lit.empty() || backlit.empty()) throw InvalidInputError("refinement batch needs images");
  RefinementBatch b;
  b.enhanced = enhance_images(current, backlit);
  b.previous = enhance_images(*previous_snapshot, backlit);
  b.well_lit = std::move(well_lit);
  b.backlit = std::move(backlit);
  return b;
}

// --- training loops ---------------------------------------------------------

namespace {

enum class EnhanceMode { identity_only, rave, clip };

class Loop {
 public:
  Loop(TrainingState& s, const EmbeddingBackend<float>& backend, const CorpusIndex& corpus,
       const TrainOptions& options, const ResidualVector* rv)
      : s_(s), backend_(backend), corpus_(corpus), options_(options), rv_(rv) {
    layers_ = resolve_layers(s.config, backend);
    alpha_ = resolve_alpha(s.config, layers_.size());
    if (s.manifest.backend_model_id != backend.info().model_id ||
        s.manifest.backend_checksum != backend.info().weight_checksum) {
      throw ConfigError("training state was created with backend '" + s.manifest.backend_model_id +
                        "', resumed with '" + backend.info().model_id + "'");
    }
    if (s.manifest.dataset_fingerprint != corpus.fingerprint) {
      throw ConfigError("training corpus differs from the one recorded in the run state");
    }
  }

  bool should_stop() const { return options_.stop_after >= 0 && s_.iter >= options_.stop_after; }

  void log(LossRecord r) {
    s_.manifest.log.push_back(r);
    if (options_.on_log) options_.on_log(s_.manifest.log.back(), s_);
  }

  void enhancement_step(EnhanceMode mode, const std::string& phase) {
    const TrainConfig& c = s_.config;
    const TrainingBatch batch = training_batch(*corpus_.backlit, nullptr, c.batch_enhance,
                                               derive_seed(c.seed, {kEnhanceStream}),
                                               static_cast<std::uint64_t>(s_.iter), c.image_size, c.augment);
    Graph<float> g;
    const auto params = s_.model.params.bind(g, true);
    const Var<float> x = g.constant(stack_images<float>(batch.backlit));
    const EnhanceVars<float> out = enhance(c.unet, params, x);
    const LayerActivations<float> acts_b = encode_image_layers(backend_, g, x, layers_);
    const std::vector<Var<float>> stages_t = backend_.image_stages(g, out.enhanced);
    const LayerActivations<float> acts_t = select_layers(stages_t, layers_);
    const Var<float> identity = identity_loss(acts_b, acts_t, alpha_);
    LossRecord r;
    r.iter = s_.iter;
    r.phase = phase;
    r.terms.emplace_back("identity", identity.item());
    Var<float> total = identity;
    if (mode == EnhanceMode::rave) {
      const Var<float> res = residual_loss(stages_t.back(), *rv_, c.normalize_residual_embedding);
      r.terms.emplace_back("residual", res.item());
      total = rave_loss(identity, res, c.omega);
    } else if (mode == EnhanceMode::clip) {
      const auto [pos, neg] = project(*s_.guidance, backend_);
      const Var<float> clip = clip_guidance_loss(stages_t.back(), g.constant(Tensor<float>::from_vector(pos)),
                                                 g.constant(Tensor<float>::from_vector(neg)));
      r.terms.emplace_back("clip", clip.item());
      total = enhance_loss(clip, identity, c.omega);
    }
    r.total = total.item();
    g.backward(total);
    adam_update(s_.model.params, gradients(g, params), s_.enhance_opt, {c.lr_enhance, c.beta1, c.beta2, 1e-8});
    ++s_.iter;
    log(std::move(r));
  }

  void maybe_checkpoint(long final_iter) {
    if (options_.output_dir.empty()) return;
    if (s_.iter % s_.config.checkpoint_every != 0 && s_.iter != final_iter) return;
    char name[64];
    std::snprintf(name, sizeof name, "checkpoints/ckpt_%08ld.rvc", s_.iter);
    const fs::path path = options_.output_dir / name;
    const std::string sha = save_checkpoint(s_, path);
    s_.manifest.checkpoints.push_back({s_.iter, name, sha});
    last_checkpoint_ = path;
    write_manifest();
  }

  void write_manifest() const {
    if (options_.output_dir.empty()) return;
    fs::create_directories(options_.output_dir);
    write_text_atomic(options_.output_dir / "manifest.json", s_.manifest.to_json());
  }

  RowMatrix<float> embed(const std::vector<Image>& images) const {
    RowMatrix<float> out(static_cast<Index>(images.size()), backend_.info().embed_dim);
    for (std::size_t i = 0; i < images.size(); i += kEncodeBatch) {
      const std::size_t n = std::min(kEncodeBatch, images.size() - i);
      out.middleRows(static_cast<Index>(i), static_cast<Index>(n)) =
          encode_image(backend_, std::span<const Image>(images.data() + i, n));
    }
    return out;
  }

  std::vector<Image> sample(const ImageSource& source, std::size_t count, std::uint64_t seed, long step) const {
    return training_batch(source, nullptr, count, seed, static_cast<std::uint64_t>(step), s_.config.image_size,
                          s_.config.augment)
        .backlit;
  }

  void initialise_guidance() {
    const TrainConfig& c = s_.config;
    const std::size_t nb = c.batch_guidance / 2, nw = c.batch_guidance - nb;
    while (!s_.guidance_initialized) {
      if (s_.guidance_init_steps >= c.guidance_cap) {
        s_.guidance_initialized = true;
        break;
      }
      std::vector<Image> images = sample(*corpus_.backlit, nb, derive_seed(c.seed, {kInitBacklitStream}),
                                         s_.guidance_init_steps);
      const std::vector<Image> well =
          sample(*corpus_.well_lit, nw, derive_seed(c.seed, {kInitWellStream}), s_.guidance_init_steps);
      images.insert(images.end(), well.begin(), well.end());
      std::vector<int> labels(nb, 0);
      labels.resize(nb + nw, 1);
      const GuidanceStepResult r = guidance_init_step(*s_.guidance, backend_, embed(images), labels, s_.guidance_opt);
      log({s_.guidance_init_steps, "guidance_init", {{"classification", r.loss}}, r.loss});
      ++s_.guidance_init_steps;
      if (r.loss < c.guidance_threshold) s_.guidance_initialized = true;
    }
  }

  void refine_guidance(long round) {
    const TrainConfig& c = s_.config;
    const long steps = ceil_div(corpus_.backlit->size(), c.batch_guidance);
    const std::size_t nw = std::min(c.batch_guidance, corpus_.well_lit->size());
    for (long j = 0; j < steps; ++j) {
      const RefinementBatch b = make_refinement_batch(
          s_.model, s_.snapshot ? &*s_.snapshot : nullptr,
          sample(*corpus_.well_lit, nw, derive_seed(c.seed, {kRefineWellStream, static_cast<std::uint64_t>(round)}), j),
          sample(*corpus_.backlit, c.batch_guidance,
                 derive_seed(c.seed, {kRefineBacklitStream, static_cast<std::uint64_t>(round)}), j));
      const RefinementEmbeddings<float> e{embed(b.well_lit), embed(b.backlit), embed(b.enhanced), embed(b.previous)};
      const GuidanceStepResult r = guidance_refine_step(*s_.guidance, backend_, e, c.margins, s_.guidance_opt);
      log({round * steps + j, "guidance_refine", {{"margin", r.loss}}, r.loss});
    }
  }

  const fs::path& last_checkpoint() const { return last_checkpoint_; }

 private:
  TrainingState& s_;
  const EmbeddingBackend<float>& backend_;
  const CorpusIndex& corpus_;
  const TrainOptions& options_;
  const ResidualVector* rv_;
  std::vector<Index> layers_;
  std::vector<double> alpha_;
  fs::path last_checkpoint_;
};

}  // namespace

TrainResult train_rave(TrainingState state, const EmbeddingBackend<float>& backend, const ResidualVector& rv,
                       const CorpusIndex& corpus, const TrainOptions& options) {
  if (state.config.method != Method::rave) throw ConfigError("train_rave needs method = rave");
  if (rv.backend_model_id != backend.info().model_id) {
    throw ConfigError("residual was computed with backend '" + rv.backend_model_id + "', training uses '" +
                      backend.info().model_id + "'");
  }
  if (rv.dim() != backend.info().embed_dim) throw ConfigError("residual dimension does not match the backend");
  Loop loop(state, backend, corpus, options, &rv);
  const long final_iter = state.config.total_iters;
  while (state.iter < final_iter && !loop.should_stop()) {
    loop.enhancement_step(EnhanceMode::rave, "enhance");
    loop.maybe_checkpoint(final_iter);
  }
  loop.write_manifest();
  return {std::move(state), loop.last_checkpoint()};
}

TrainResult train_rave(const TrainConfig& config, const EmbeddingBackend<float>& backend, const ResidualVector& rv,
                       const CorpusIndex& corpus, const TrainOptions& options) {
  return train_rave(start_training(config, backend, corpus, &rv), backend, rv, corpus, options);
}

TrainResult train_clip_lit(TrainingState state, const EmbeddingBackend<float>& backend, const CorpusIndex& corpus,
                           const TrainOptions& options) {
  const TrainConfig& c = state.config;
  if (!c.uses_guidance()) throw ConfigError("train_clip_lit needs method clip_lit or clip_lit_latent");
  if (c.method == Method::clip_lit && !backend.info().has_text_tower) {
    throw NoTextTowerError("clip_lit needs a text tower; backend '" + backend.info().model_id + "' has none");
  }
  if (!state.guidance) throw ConfigError("training state has no guidance pair");
  Loop loop(state, backend, corpus, options, nullptr);
  loop.initialise_guidance();
  const long epoch = ceil_div(corpus.backlit->size(), c.batch_enhance);
  const long final_iter = c.total_iters + c.refine_rounds * epoch;
  while (state.iter < final_iter && !loop.should_stop()) {
    if (state.iter < c.total_iters) {
      const bool warmup = state.iter < c.warmup_identity_iters;
      loop.enhancement_step(warmup ? EnhanceMode::identity_only : EnhanceMode::clip,
                            warmup ? "enhance_warmup" : "enhance");
    } else {
      const long k = state.iter - c.total_iters;
      if (k % epoch == 0) {
        const long round = k / epoch;
        if (round == 0) {
          state.snapshot = state.model;
          state.guidance_opt.state = {};
        }
        loop.refine_guidance(round);
        state.snapshot = state.model;
      }
      loop.enhancement_step(EnhanceMode::clip, "enhance_refine");
    }
    loop.maybe_checkpoint(final_iter);
  }
  loop.write_manifest();
  return {std::move(state), loop.last_checkpoint()};
}

TrainResult train_clip_lit(const TrainConfig& config, const EmbeddingBackend<float>& backend,
                           const CorpusIndex& corpus, const TrainOptions& options) {
  return train_clip_lit(start_training(config, backend, corpus), backend, corpus, options);
}

}  // namespace rave
