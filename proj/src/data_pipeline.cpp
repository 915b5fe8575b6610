#include "rave/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

#include "rave/errors.hpp"
#include "rave/hash.hpp"
#include "rave/image_io.hpp"
#include "rave/random.hpp"

namespace rave {

namespace fs = std::filesystem;

namespace {

std::string hash_named_digests(const std::vector<std::pair<std::string, Digest>>& items) {
  Sha256 h;
  for (const auto& [name, d] : items) {
    h.update(name);
    h.update(std::string_view("\0", 1));
    h.update(d);
  }
  return to_hex(h.finish());
}

Digest image_digest(const Image& im) {
  Sha256 h;
  const std::uint32_t dims[2] = {static_cast<std::uint32_t>(im.height), static_cast<std::uint32_t>(im.width)};
  h.update({reinterpret_cast<const std::uint8_t*>(dims), sizeof dims});
  h.update({reinterpret_cast<const std::uint8_t*>(im.pixels.data()), static_cast<std::size_t>(im.pixels.size()) * 4});
  return h.finish();
}

}  // namespace

MemorySource::MemorySource(std::vector<Image> images, std::vector<std::string> names)
    : images_(std::move(images)), names_(std::move(names)) {
  if (names_.empty()) {
    for (std::size_t i = 0; i < images_.size(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%06zu.png", i);
      names_.emplace_back(buf);
    }
  }
  if (names_.size() != images_.size()) throw ConfigError("MemorySource: names and images differ in count");
  std::vector<std::pair<std::string, Digest>> items;
  for (std::size_t i = 0; i < images_.size(); ++i) items.emplace_back(names_[i], image_digest(images_[i]));
  fingerprint_ = hash_named_digests(items);
}

FileSource::FileSource(fs::path root, std::vector<fs::path> files) : root_(std::move(root)), files_(std::move(files)) {
  std::vector<std::pair<std::string, Digest>> items;
  for (std::size_t i = 0; i < files_.size(); ++i) items.emplace_back(name(i), sha256_file(files_[i]));
  fingerprint_ = hash_named_digests(items);
}

Image FileSource::load(std::size_t i) const { return read_image(files_.at(i)); }

std::string FileSource::name(std::size_t i) const {
  return fs::relative(files_.at(i), root_).generic_string();
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(), [&](const fs::path& a, const fs::path& b) {
    return fs::relative(a, dir).generic_string() < fs::relative(b, dir).generic_string();
  });
  return files;
}

std::string directory_fingerprint(const fs::path& dir) { return FileSource(dir, list_images(dir)).fingerprint(); }

CorpusSpec CorpusSpec::from_root(const fs::path& root, Pairing pairing) {
  CorpusSpec s;
  s.backlit_dir = root / "backlit";
  s.welllit_dir = root / "well_lit";
  s.pairing = pairing;
  return s;
}

std::string combine_fingerprints(const std::string& a, const std::string& b) {
  return to_hex(sha256(a + ":" + b));
}

CorpusIndex scan_corpus(const CorpusSpec& spec) {
  auto back = list_images(spec.backlit_dir);
  auto well = list_images(spec.welllit_dir);
  if (back.empty()) throw IoError("no images in " + spec.backlit_dir.string());
  if (well.empty()) throw IoError("no images in " + spec.welllit_dir.string());
  CorpusIndex idx;
  idx.paired = spec.pairing == Pairing::paired_by_filename;
  if (idx.paired) {
    auto stem_of = [](const fs::path& root, const fs::path& p) {
      fs::path rel = fs::relative(p, root);
      return (rel.parent_path() / rel.stem()).generic_string();
    };
    std::map<std::string, fs::path> well_by_stem;
    for (const auto& p : well) {
      const auto stem = stem_of(spec.welllit_dir, p);
      if (!well_by_stem.emplace(stem, p).second) throw IoError("duplicate well-lit stem '" + stem + "'");
    }
    std::vector<fs::path> matched;
    for (const auto& p : back) {
      const auto stem = stem_of(spec.backlit_dir, p);
      auto it = well_by_stem.find(stem);
      if (it == well_by_stem.end()) throw IoError("unpaired backlit image: stem '" + stem + "' has no well-lit match");
      matched.push_back(it->second);
      well_by_stem.erase(it);
    }
    if (!well_by_stem.empty()) {
      throw IoError("unpaired well-lit image: stem '" + well_by_stem.begin()->first + "' has no backlit match");
    }
    well = std::move(matched);
  }
  idx.backlit = std::make_shared<FileSource>(spec.backlit_dir, std::move(back));
  idx.well_lit = std::make_shared<FileSource>(spec.welllit_dir, std::move(well));
  idx.fingerprint = combine_fingerprints(idx.backlit->fingerprint(), idx.well_lit->fingerprint());
  return idx;
}

CorpusIndex memory_corpus(std::vector<Image> backlit, std::vector<Image> well_lit, bool paired) {
  if (backlit.empty() || well_lit.empty()) throw InvalidInputError("memory corpus must not be empty");
  if (paired && backlit.size() != well_lit.size()) throw InvalidInputError("paired corpus needs equal counts");
  CorpusIndex idx;
  idx.paired = paired;
  idx.backlit = std::make_shared<MemorySource>(std::move(backlit));
  idx.well_lit = std::make_shared<MemorySource>(std::move(well_lit));
  idx.fingerprint = combine_fingerprints(idx.backlit->fingerprint(), idx.well_lit->fingerprint());
  return idx;
}

AugmentParams sample_augment(const AugmentConfig& config, std::uint64_t seed) {
  AugmentParams p;
  if (!config.enabled) return p;
  Rng rng(seed);
  p.flip = rng.bernoulli(config.flip_probability);
  p.zoom = rng.uniform(config.zoom_min, config.zoom_max);
  p.rotation_degrees = rng.uniform(-config.rotation_degrees, config.rotation_degrees);
  return p;
}

namespace {

/// Reflect coordinate into [0, n - 1] (mirror without repeating the edge).
double reflect_coord(double x, Index n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * static_cast<double>(n - 1);
  x = std::fmod(std::abs(x), period);
  return x > static_cast<double>(n - 1) ? period - x : x;
}

}  // namespace

Image apply_augment(const Image& image, const AugmentParams& params) {
  const Index h = image.height, w = image.width;
  Image out = image;
  if (params.flip) {
    for (Index c = 0; c < Image::kChannels; ++c) out.plane(c) = image.plane(c).rowwise().reverse().eval();
  }
  if (params.zoom != 1.0) {
    const Index zh = static_cast<Index>(std::lround(static_cast<double>(h) * params.zoom));
    const Index zw = static_cast<Index>(std::lround(static_cast<double>(w) * params.zoom));
    const Image big = resize_image(out, zh, zw, ResampleFilter::bicubic);
    const Index top = (zh - h) / 2, left = (zw - w) / 2;
    for (Index c = 0; c < Image::kChannels; ++c) out.plane(c) = big.plane(c).block(top, left, h, w);
  }
  if (params.rotation_degrees != 0.0) {
    const Image src = out;
    const double a = params.rotation_degrees * std::numbers::pi / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        // Inverse map: output pixel rotated back into the source frame.
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double sy = reflect_coord(cy + ca * dy - sa * dx, h);
        const double sx = reflect_coord(cx + sa * dy + ca * dx, w);
        const Index y0 = std::min<Index>(static_cast<Index>(sy), h - 1), x0 = std::min<Index>(static_cast<Index>(sx), w - 1);
        const Index y1 = std::min<Index>(y0 + 1, h - 1), x1 = std::min<Index>(x0 + 1, w - 1);
        const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
        for (Index c = 0; c < Image::kChannels; ++c) {
          const double v = (1 - fy) * ((1 - fx) * src.at(c, y0, x0) + fx * src.at(c, y0, x1)) +
                           fy * ((1 - fx) * src.at(c, y1, x0) + fx * src.at(c, y1, x1));
          out.at(c, y, x) = static_cast<float>(v);
        }
      }
    }
  }
  return clamp_unit(std::move(out));
}

std::size_t sample_index(std::size_t n, std::uint64_t seed, std::uint64_t position) {
  const std::uint64_t epoch = position / n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, {0x7065726d, epoch}));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return perm[position % n];
}

TrainingBatch training_batch(const ImageSource& source, const ImageSource* targets, std::size_t batch_size,
                             std::uint64_t seed, std::uint64_t step, Index size, const AugmentConfig& augment) {
  const std::size_t n = source.size();
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (batch_size > n) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds corpus size " + std::to_string(n));
  }
  if (targets && targets->size() != n) throw InvalidInputError("paired sources differ in size");
  TrainingBatch b;
  for (std::size_t j = 0; j < batch_size; ++j) {
    const std::size_t i = sample_index(n, seed, step * batch_size + j);
    const AugmentParams p = sample_augment(augment, derive_seed(seed, {0x61756731, step, j}));
    auto prepare = [&](const Image& im) {
      Image r = im.height == size && im.width == size ? im : resize_image(im, size, size, ResampleFilter::bicubic);
      return augment.enabled ? apply_augment(clamp_unit(std::move(r)), p) : clamp_unit(std::move(r));
    };
    b.backlit.push_back(prepare(source.load(i)));
    if (targets) b.targets.push_back(prepare(targets->load(i)));
    b.indices.push_back(i);
    b.augment.push_back(p);
  }
  return b;
}

TrainingBatch training_batch(const CorpusIndex& index, std::size_t batch_size, std::uint64_t seed,
                             std::uint64_t step, Index size, const AugmentConfig& augment) {
  return training_batch(*index.backlit, index.paired ? index.well_lit.get() : nullptr, batch_size, seed, step, size,
                        augment);
}

EvalIterator::EvalIterator(CorpusIndex index, Index long_side) : index_(std::move(index)), long_side_(long_side) {
  if (long_side < 0) throw ConfigError("long side must be non-negative");
}

EvalItem EvalIterator::item(std::size_t i) const {
  EvalItem it;
  it.name = index_.backlit->name(i);
  Image b = index_.backlit->load(i);
  if (long_side_ > 0) b = clamp_unit(resize_long_side(b, long_side_));
  if (index_.paired) {
    Image g = index_.well_lit->load(i);
    if (!g.same_size(b)) g = clamp_unit(resize_image(g, b.height, b.width, ResampleFilter::bicubic));
    it.ground_truth = std::move(g);
  }
  it.backlit = std::move(b);
  return it;
}

}  // namespace rave

namespace rave {

Image synthetic_scene(Index size, std::uint64_t seed) {
  Rng rng(seed);
  Image im(size, size);
  const double s = static_cast<double>(size);
  double base[3], gy[3], gx[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.45, 0.75);
    gy[c] = rng.uniform(-0.15, 0.15);
    gx[c] = rng.uniform(-0.15, 0.15);
  }
  struct Blob {
    double y, x, r, amp[3];
  };
  std::vector<Blob> blobs(4);
  for (auto& b : blobs) {
    b.y = rng.uniform(0, s);
    b.x = rng.uniform(0, s);
    b.r = rng.uniform(0.08, 0.25) * s;
    for (double& a : b.amp) a = rng.uniform(-0.25, 0.25);
  }
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      const double fy = static_cast<double>(y) / s - 0.5, fx = static_cast<double>(x) / s - 0.5;
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + gy[c] * fy + gx[c] * fx;
        for (const auto& b : blobs) {
          const double d2 = (static_cast<double>(y) - b.y) * (static_cast<double>(y) - b.y) +
                            (static_cast<double>(x) - b.x) * (static_cast<double>(x) - b.x);
          v += b.amp[c] * std::exp(-d2 / (2 * b.r * b.r));
        }
        im.at(c, y, x) = static_cast<float>(std::clamp(v, 0.3, 0.95));
      }
    }
  }
  return im;
}

SyntheticCorpus synthetic_corpus(std::size_t count, Index size, std::uint64_t seed, bool paired) {
  SyntheticCorpus out;
  for (std::size_t i = 0; i < count; ++i) {
    const Image scene = synthetic_scene(size, derive_seed(seed, {1, i}));
    Rng rng(derive_seed(seed, {2, i}));
    Image dark = scene;
    dark.pixels *= static_cast<float>(rng.uniform(0.15, 0.35));
    out.dark.push_back(std::move(dark));
    out.bright.push_back(paired ? scene : synthetic_scene(size, derive_seed(seed, {3, i})));
  }
  return out;
}

}  // namespace rave
