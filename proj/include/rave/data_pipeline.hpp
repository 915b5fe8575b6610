#pragma once

// Corpus scanning, image sources, seeded training batches and evaluation
// iteration.
//
// Layout convention: <root>/backlit/*.{png,jpg}, <root>/well_lit/*.{png,jpg},
// paired by identical filename stems.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rave/image.hpp"

namespace rave {

/// Random-access, read-only collection of images.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual std::size_t size() const = 0;
  virtual Image load(std::size_t i) const = 0;
  /// Relative name of item i (used for output naming and ordering).
  virtual std::string name(std::size_t i) const = 0;
  /// Content hash over (name, content) pairs.
  virtual std::string fingerprint() const = 0;
  bool empty() const { return size() == 0; }
};

using SourceHandle = std::shared_ptr<const ImageSource>;

class MemorySource : public ImageSource {
 public:
  explicit MemorySource(std::vector<Image> images, std::vector<std::string> names = {});
  std::size_t size() const override { return images_.size(); }
  Image load(std::size_t i) const override { return images_.at(i); }
  std::string name(std::size_t i) const override { return names_.at(i); }
  std::string fingerprint() const override { return fingerprint_; }

 private:
  std::vector<Image> images_;
  std::vector<std::string> names_;
  std::string fingerprint_;
};

class FileSource : public ImageSource {
 public:
  /// Files must lie below root; names are root-relative generic paths.
  FileSource(std::filesystem::path root, std::vector<std::filesystem::path> files);
  std::size_t size() const override { return files_.size(); }
  Image load(std::size_t i) const override;
  std::string name(std::size_t i) const override;
  std::string fingerprint() const override { return fingerprint_; }
  const std::filesystem::path& path(std::size_t i) const { return files_.at(i); }
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
  std::vector<std::filesystem::path> files_;
  std::string fingerprint_;
};

/// Sorted image files (png/jpg/jpeg) below dir, recursively.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Fingerprint of a directory's image files without building a source.
std::string directory_fingerprint(const std::filesystem::path& dir);

enum class Pairing { paired_by_filename, unpaired };

struct CorpusSpec {
  std::filesystem::path backlit_dir;
  std::filesystem::path welllit_dir;
  Pairing pairing = Pairing::unpaired;
  Index train_size = 512;

  /// <root>/backlit and <root>/well_lit.
  static CorpusSpec from_root(const std::filesystem::path& root, Pairing pairing);
};

struct CorpusIndex {
  SourceHandle backlit;
  SourceHandle well_lit;
  /// paired: well_lit item i is the target of backlit item i.
  bool paired = false;
  std::string fingerprint;
};

CorpusIndex scan_corpus(const CorpusSpec& spec);

/// Index over in-memory images; paired requires equal counts.
CorpusIndex memory_corpus(std::vector<Image> backlit, std::vector<Image> well_lit, bool paired);

std::string combine_fingerprints(const std::string& a, const std::string& b);

struct AugmentConfig {
  bool enabled = true;
  double flip_probability = 0.5;
  double zoom_min = 1.0;
  double zoom_max = 1.2;
  double rotation_degrees = 10.0;
};

struct AugmentParams {
  bool flip = false;
  double zoom = 1.0;
  double rotation_degrees = 0.0;
};

AugmentParams sample_augment(const AugmentConfig& config, std::uint64_t seed);

/// Flip, zoom about the centre (crop back to size) and rotate about the
/// centre with reflect padding; the image keeps its size.
Image apply_augment(const Image& image, const AugmentParams& params);

struct TrainingBatch {
  std::vector<Image> backlit;
  /// Present in paired mode.
  std::vector<Image> targets;
  std::vector<std::size_t> indices;
  std::vector<AugmentParams> augment;
};

/// Item k of the stream of epoch-wise seeded permutations of [0, n).
std::size_t sample_index(std::size_t n, std::uint64_t seed, std::uint64_t position);

/// Batch for a global step: items step*batch_size ... of the permuted stream
/// over source.size(), resized to size x size then augmented with per-item
/// seeds derived from (seed, step, j).
TrainingBatch training_batch(const ImageSource& source, const ImageSource* targets, std::size_t batch_size,
                             std::uint64_t seed, std::uint64_t step, Index size, const AugmentConfig& augment);

TrainingBatch training_batch(const CorpusIndex& index, std::size_t batch_size, std::uint64_t seed,
                             std::uint64_t step, Index size, const AugmentConfig& augment);

struct EvalItem {
  std::string name;
  Image backlit;
  std::optional<Image> ground_truth;
};

/// Test items in sorted name order at inference resolution (longer side =
/// long_side, 0 keeps the original size); ground truth resized to match.
class EvalIterator {
 public:
  EvalIterator(CorpusIndex index, Index long_side = 2048);
  std::size_t size() const { return index_.backlit->size(); }
  EvalItem item(std::size_t i) const;
  bool paired() const { return index_.paired; }
  const CorpusIndex& index() const { return index_; }
  Index long_side() const { return long_side_; }

 private:
  CorpusIndex index_;
  Index long_side_;
};

inline EvalIterator eval_iterator(CorpusIndex index, Index long_side = 2048) {
  return EvalIterator(std::move(index), long_side);
}

}  // namespace rave

namespace rave {

/// Seeded synthetic scenes for toy runs and tests: smooth colour fields.
/// dark[i] is scene i dimmed by a factor in [0.15, 0.35]; bright[i] is a
/// normally exposed scene (scene i itself when paired, an independent scene
/// otherwise).
struct SyntheticCorpus {
  std::vector<Image> dark;
  std::vector<Image> bright;
};

Image synthetic_scene(Index size, std::uint64_t seed);
SyntheticCorpus synthetic_corpus(std::size_t count, Index size, std::uint64_t seed, bool paired);

}  // namespace rave
