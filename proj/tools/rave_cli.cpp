// rave: command-line entry point.
//
// Exit codes: 0 success, 1 runtime failure (I/O, bad input, missing text
// tower), 2 degenerate residual direction, 64 usage or configuration error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rave/eval_metrics.hpp"
#include "rave/hash.hpp"
#include "rave/residual.hpp"
#include "rave/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rave;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitDegenerate = 2;
constexpr int kExitUsage = 64;

constexpr const char* kPrecedence =
    "Precedence: command-line flags override values from --config, which override the method defaults.";

// Keys that configure a training run but not the optimisation itself.
const std::vector<std::string>& run_keys() {
  static const std::vector<std::string> keys = {"backend", "weights_dir", "device", "data",      "backlit",
                                                "well_lit", "residual",   "out",    "log_every", "resume"};
  return keys;
}

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(1) << '\n';
    if (!out) throw IoError("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

json backend_json(const BackendInfo& info) {
  return {{"model_id", info.model_id}, {"checksum", info.weight_checksum}};
}

BackendHandle<float> open_backend(const std::string& id, const std::string& weights_dir, const std::string& device) {
  BackendOptions options;
  options.weights_dir = weights_dir;
  return load_backend<float>(id, device, options);
}

fs::path sibling_manifest(fs::path p) {
  if (p.filename().empty()) p = p.parent_path();
  return p.string() + ".manifest.json";
}

// compute-residual

struct ResidualArgs {
  std::string backlit, well_lit, backend, out, weights_dir, device = "cpu";
};

int compute_residual_cmd(const ResidualArgs& a) {
  const auto backend = open_backend(a.backend, a.weights_dir, a.device);
  FileSource back(a.backlit, list_images(a.backlit));
  FileSource well(a.well_lit, list_images(a.well_lit));
  if (back.empty()) throw IoError("no images in " + a.backlit);
  if (well.empty()) throw IoError("no images in " + a.well_lit);
  const ResidualVector rv = compute_residual(*backend, back, well);
  save_residual(rv, a.out);
  std::printf("backlit images:  %zu\nwell-lit images: %zu\ndimension:       %ld\nnorm:            %.6f\n",
              rv.n_back, rv.n_well, static_cast<long>(rv.dim()), rv.v_residual.cast<double>().norm());
  write_json(sibling_manifest(a.out),
             {{"command", "compute-residual"},
              {"backend", backend_json(backend->info())},
              {"inputs", {{"backlit", a.backlit}, {"well_lit", a.well_lit}}},
              {"dataset_fingerprint", rv.dataset_fingerprint},
              {"output", {{"file", a.out}, {"sha256", to_hex(sha256_file(a.out))}}}});
  return 0;
}

// interpret

struct InterpretArgs {
  std::string residual, backend, weights_dir, device = "cpu";
  long top_k = 10;
};

int interpret_cmd(const InterpretArgs& a) {
  const ResidualVector rv = load_residual(a.residual);
  const auto backend = open_backend(a.backend, a.weights_dir, a.device);
  if (backend->info().model_id != rv.backend_model_id) {
    throw ConfigError("residual was computed with '" + rv.backend_model_id + "', not '" +
                      backend->info().model_id + "'");
  }
  const Interpretation in = interpret_residual(*backend, rv, a.top_k);
  std::size_t width = 6;
  for (const auto& t : in.lowest) width = std::max(width, t.token.size());
  std::printf("%-*s %7s    %s\n", static_cast<int>(width), "lowest", "", "highest");
  for (std::size_t i = 0; i < std::max(in.lowest.size(), in.highest.size()); ++i) {
    std::string left(width + 8, ' '), right;
    if (i < in.lowest.size()) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%-*s %7.3f", static_cast<int>(width), in.lowest[i].token.c_str(),
                    in.lowest[i].score);
      left = buf;
    }
    if (i < in.highest.size()) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s %.3f", in.highest[i].token.c_str(), in.highest[i].score);
      right = buf;
    }
    std::printf("%s    %s\n", left.c_str(), right.c_str());
  }
  return 0;
}

// train

struct TrainArgs {
  std::string config;
  std::map<std::string, std::string> flags;  // config key -> flag value
};

void print_log(const LossRecord& r) {
  std::printf("%-15s %8ld", r.phase.c_str(), r.iter);
  for (const auto& [k, v] : r.terms) std::printf("  %s=%.6g", k.c_str(), v);
  std::printf("  total=%.6g\n", r.total);
  std::fflush(stdout);
}

CorpusIndex training_corpus(const KeyValues& kv, Setting setting) {
  const Pairing pairing = setting == Setting::supervised ? Pairing::paired_by_filename : Pairing::unpaired;
  if (const auto* root = kv.find("data")) {
    if (kv.has("backlit") || kv.has("well_lit")) throw ConfigError("give either data or backlit/well_lit, not both");
    return scan_corpus(CorpusSpec::from_root(*root, pairing));
  }
  if (!kv.has("backlit") || !kv.has("well_lit")) throw ConfigError("training needs data or backlit and well_lit");
  CorpusSpec spec;
  spec.backlit_dir = kv.get("backlit", "");
  spec.welllit_dir = kv.get("well_lit", "");
  spec.pairing = pairing;
  return scan_corpus(spec);
}

void reject_conflicts(const KeyValues& kv, const TrainConfig& c) {
  if (c.method == Method::rave) {
    for (const char* key : {"token_count", "guidance_threshold", "guidance_cap", "margins", "refine_rounds",
                            "lr_guidance", "batch_guidance", "warmup_identity_iters"}) {
      if (kv.has(key)) throw ConfigError(std::string("method rave takes no guidance option '") + key + "'");
    }
  } else if (kv.has("residual")) {
    throw ConfigError("a residual file only applies to method rave");
  }
}

int train_cmd(const TrainArgs& a) {
  KeyValues kv;
  if (!a.config.empty()) kv = KeyValues::read(a.config);
  for (const auto& [k, v] : a.flags) kv.set(k, v);
  const TrainConfig config = TrainConfig::from_key_values(kv, run_keys());
  reject_conflicts(kv, config);

  const fs::path out = kv.get("out", "run");
  const long log_every = parse_long("log_every", kv.get("log_every", "1"));
  if (log_every < 1) throw ConfigError("log_every must be at least 1");
  const auto backend = open_backend(kv.get("backend", "vit-b-32"), kv.get("weights_dir", ""), kv.get("device", "cpu"));
  const CorpusIndex corpus = training_corpus(kv, config.setting);
  std::printf("corpus: %zu backlit, %zu well-lit (%s)\n", corpus.backlit->size(), corpus.well_lit->size(),
              corpus.paired ? "paired" : "unpaired");

  TrainOptions options;
  options.output_dir = out;
  options.on_log = [&](const LossRecord& r, const TrainingState&) {
    if (r.iter % log_every == 0) print_log(r);
  };

  std::optional<ResidualVector> rv;
  if (config.method == Method::rave) {
    if (const auto* path = kv.find("residual")) {
      rv = load_residual(*path);
    } else {
      std::printf("computing residual with %s\n", backend->info().model_id.c_str());
      rv = compute_residual(*backend, *corpus.backlit, *corpus.well_lit);
      fs::create_directories(out);
      save_residual(*rv, out / "residual.rvr");
      std::printf("residual written to %s\n", (out / "residual.rvr").string().c_str());
    }
  }

  TrainingState state;
  if (const auto* resume = kv.find("resume")) {
    state = load_checkpoint(*resume, config.unet);
    std::printf("resuming from %s at iteration %ld\n", resume->c_str(), state.iter);
  } else {
    state = start_training(config, *backend, corpus, rv ? &*rv : nullptr);
    for (const auto& key : run_keys()) {
      if (const auto* v = kv.find(key)) state.manifest.config.set(key, *v);
    }
  }

  const TrainResult r = config.method == Method::rave ? train_rave(std::move(state), *backend, *rv, corpus, options)
                                                      : train_clip_lit(std::move(state), *backend, corpus, options);
  std::printf("finished at iteration %ld; checkpoint %s; manifest %s\n", r.state.iter,
              r.final_checkpoint.string().c_str(), (out / "manifest.json").string().c_str());
  return 0;
}

// enhance

struct EnhanceArgs {
  std::string checkpoint, input, output;
  long long_side = 2048;
};

int enhance_cmd(const EnhanceArgs& a) {
  const EnhancementModel<float> model = load_model(a.checkpoint);
  json outputs = json::array();
  auto one = [&](const fs::path& in, const fs::path& out) {
    const EnhanceFileReport rep = enhance_file(model, in, out, a.long_side);
    std::printf("%s -> %s (%ldx%ld -> %ldx%ld)\n", in.string().c_str(), out.string().c_str(),
                static_cast<long>(rep.input_width), static_cast<long>(rep.input_height),
                static_cast<long>(rep.output_width), static_cast<long>(rep.output_height));
    outputs.push_back({{"input", in.string()}, {"output", out.string()}, {"sha256", to_hex(sha256_file(out))}});
  };
  std::string fingerprint;
  if (fs::is_directory(a.input)) {
    const auto files = list_images(a.input);
    if (files.empty()) throw IoError("no images in " + a.input);
    for (const auto& f : files) one(f, fs::path(a.output) / fs::relative(f, a.input));
    fingerprint = directory_fingerprint(a.input);
  } else {
    if (!fs::is_regular_file(a.input)) throw IoError("no such input: " + a.input);
    one(a.input, a.output);
    fingerprint = to_hex(sha256_file(a.input));
  }
  write_json(sibling_manifest(a.output), {{"command", "enhance"},
                                          {"checkpoint", {{"file", a.checkpoint},
                                                          {"sha256", to_hex(sha256_file(a.checkpoint))}}},
                                          {"long_side", a.long_side},
                                          {"input_fingerprint", fingerprint},
                                          {"outputs", outputs}});
  return 0;
}

// evaluate

struct EvaluateArgs {
  std::string checkpoint, test, metrics = "psnr,ssim", report = "evaluation", backend, weights_dir,
                                device = "cpu";
  long long_side = 2048;
};

int evaluate_cmd(const EvaluateArgs& a) {
  const MetricSelection selection = MetricSelection::parse(a.metrics);
  if (!fs::is_regular_file(a.checkpoint)) throw IoError("checkpoint not found: " + a.checkpoint);
  const TrainingState state = load_checkpoint(a.checkpoint);
  const CorpusSpec unpaired = CorpusSpec::from_root(a.test, Pairing::unpaired);
  CorpusIndex corpus = scan_corpus(unpaired);
  if (selection.any_paired()) {
    try {
      corpus = scan_corpus(CorpusSpec::from_root(a.test, Pairing::paired_by_filename));
    } catch (const IoError& e) {
      throw ConfigError(std::string("paired metrics need a test set paired by filename: ") + e.what());
    }
  }
  MetricAdapters adapters;
  std::string backend_id;
  if (selection.fid) {
    backend_id = a.backend.empty() ? state.manifest.backend_model_id : a.backend;
    adapters.fid = std::make_shared<EmbeddingFeatures>(open_backend(backend_id, a.weights_dir, a.device));
  }
  const EvalIterator items(corpus, a.long_side);
  const MetricsReport report = evaluate(state.model, items, selection, adapters);
  std::cout << report.table();
  write_report(report, a.report);
  write_json(a.report + ".manifest.json",
             {{"command", "evaluate"},
              {"checkpoint", {{"file", a.checkpoint}, {"sha256", to_hex(sha256_file(a.checkpoint))}}},
              {"test_fingerprint", corpus.fingerprint},
              {"metrics", selection.to_string()},
              {"fid_backend", backend_id},
              {"long_side", a.long_side},
              {"report", {a.report + ".txt", a.report + ".record"}}});
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"Backlit image enhancement with vision-language guidance (RAVE, CLIP-LIT, CLIP-LIT-Latent)"};
  app.require_subcommand(1);
  app.footer(kPrecedence);

  ResidualArgs ra;
  auto* residual = app.add_subcommand("compute-residual", "Compute the residual direction between two corpora");
  residual->add_option("--backlit", ra.backlit, "Directory of backlit images")->required()->check(CLI::ExistingDirectory);
  residual->add_option("--well-lit", ra.well_lit, "Directory of well-lit images")->required()->check(CLI::ExistingDirectory);
  residual->add_option("--backend", ra.backend, "Embedding backend id")->required();
  residual->add_option("--out", ra.out, "Residual file to write")->required();
  residual->add_option("--weights-dir", ra.weights_dir, "Directory holding <backend>.rvw weights");
  residual->add_option("--device", ra.device, "Compute device")->capture_default_str();

  InterpretArgs ia;
  auto* interpret = app.add_subcommand("interpret", "List vocabulary tokens closest to and farthest from a residual");
  interpret->add_option("--residual", ia.residual, "Residual file")->required()->check(CLI::ExistingFile);
  interpret->add_option("--backend", ia.backend, "Backend with a text tower")->required();
  interpret->add_option("--top-k", ia.top_k, "Tokens per column")->capture_default_str()->check(CLI::PositiveNumber);
  interpret->add_option("--weights-dir", ia.weights_dir, "Directory holding <backend>.rvw weights");
  interpret->add_option("--device", ia.device, "Compute device")->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train an enhancement network");
  train->footer(std::string(kPrecedence) +
                "\nEvery flag mirrors the config-file key with dashes in place of underscores.");
  train->add_option("--config", ta.config, "key = value config file")->check(CLI::ExistingFile);
  std::map<std::string, std::string> storage;
  const std::map<std::string, std::string> run_help = {
      {"backend", "Embedding backend id (default vit-b-32)"},
      {"weights_dir", "Directory holding <backend>.rvw weights"},
      {"device", "Compute device (cpu)"},
      {"data", "Corpus root with backlit/ and well_lit/"},
      {"backlit", "Backlit training directory"},
      {"well_lit", "Well-lit training directory"},
      {"residual", "Residual file (rave; computed from the corpus when absent)"},
      {"out", "Output directory for checkpoints and manifest (default run)"},
      {"log_every", "Print every n-th loss record (default 1)"},
      {"resume", "Checkpoint to resume from"}};
  std::vector<std::string> all_keys = train_config_keys();
  all_keys.insert(all_keys.end(), run_keys().begin(), run_keys().end());
  for (const auto& key : all_keys) {
    const auto help = run_help.count(key) ? run_help.at(key) : "Training config key " + key;
    train->add_option("--" + dashed(key), storage[key], help);
  }

  EnhanceArgs ea;
  auto* enhance = app.add_subcommand("enhance", "Enhance an image or a directory tree");
  enhance->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  enhance->add_option("--input", ea.input, "Input image or directory")->required();
  enhance->add_option("--output", ea.output, "Output image or directory")->required();
  enhance->add_option("--long-side", ea.long_side, "Resize so the longer side has this length")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  EvaluateArgs va;
  auto* evaluate_app = app.add_subcommand("evaluate", "Score a checkpoint on a test set");
  evaluate_app->add_option("--checkpoint", va.checkpoint, "Checkpoint file")->required();
  evaluate_app->add_option("--test", va.test, "Test root with backlit/ and well_lit/")
      ->required()
      ->check(CLI::ExistingDirectory);
  evaluate_app->add_option("--metrics", va.metrics, "Comma-separated subset of psnr,ssim,lpips,fid")
      ->capture_default_str();
  evaluate_app->add_option("--report", va.report, "Report stem: writes <stem>.txt and <stem>.record")
      ->capture_default_str();
  evaluate_app->add_option("--long-side", va.long_side, "Evaluation resolution (longer side)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  evaluate_app->add_option("--backend", va.backend, "FID feature backend (default: the checkpoint's)");
  evaluate_app->add_option("--weights-dir", va.weights_dir, "Directory holding <backend>.rvw weights");
  evaluate_app->add_option("--device", va.device, "Compute device")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*residual) return compute_residual_cmd(ra);
    if (*interpret) return interpret_cmd(ia);
    if (*train) {
      for (const auto& [key, value] : storage) {
        if (train->count("--" + dashed(key))) ta.flags[key] = value;
      }
      return train_cmd(ta);
    }
    if (*enhance) return enhance_cmd(ea);
    if (*evaluate_app) return evaluate_cmd(va);
  } catch (const DegenerateDirectionError& e) {
    std::fprintf(stderr, "error: degenerate residual: %s\n", e.what());
    return kExitDegenerate;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
