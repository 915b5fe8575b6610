#pragma once

// Full-reference image quality metrics and the Frechet distance between
// feature sets. LPIPS and FID feature networks plug in through adapters.

#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rave/data_pipeline.hpp"
#include "rave/embedding_backend.hpp"
#include "rave/enhancement_net.hpp"
#include "rave/image.hpp"

namespace rave {

/// Returned by psnr() for identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

inline constexpr Index kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

double psnr(const Image& a, const Image& b);

/// Luminance Y = 0.299 R + 0.587 G + 0.114 B as an H x W matrix.
Eigen::MatrixXd luminance(const Image& im);

/// Single-scale SSIM of the luminance channels, mean over valid window positions.
double ssim(const Image& a, const Image& b);

/// Symmetric PSD square root via eigendecomposition, eigenvalues clipped at 0.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m);

/// Frechet distance between Gaussian fits of feature rows (n x d, n >= 2).
double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

class PerceptualAdapter {
 public:
  virtual ~PerceptualAdapter() = default;
  virtual std::string name() const = 0;
  virtual double distance(const Image& a, const Image& b) const = 0;
};

class FeatureAdapter {
 public:
  virtual ~FeatureAdapter() = default;
  virtual std::string name() const = 0;
  virtual Eigen::MatrixXd features(const std::vector<Image>& images) const = 0;
};

/// FID features taken from an embedding backend's image embedding.
class EmbeddingFeatures : public FeatureAdapter {
 public:
  explicit EmbeddingFeatures(BackendHandle<float> backend) : backend_(std::move(backend)) {}
  std::string name() const override { return backend_->info().model_id; }
  Eigen::MatrixXd features(const std::vector<Image>& images) const override;

 private:
  BackendHandle<float> backend_;
};

struct MetricSelection {
  bool psnr = false;
  bool ssim = false;
  bool lpips = false;
  bool fid = false;

  bool any_paired() const { return psnr || ssim || lpips; }
  /// Comma-separated list, e.g. "psnr,ssim"; empty selects nothing.
  static MetricSelection parse(const std::string& text);
  std::string to_string() const;
};

struct MetricAdapters {
  std::shared_ptr<const PerceptualAdapter> lpips;
  std::shared_ptr<const FeatureAdapter> fid;
};

struct PerImageMetrics {
  std::string name;
  std::optional<double> psnr, ssim, lpips;
};

struct MetricsReport {
  MetricSelection selection;
  std::optional<double> psnr, ssim, lpips, fid;
  std::string fid_features;
  std::vector<PerImageMetrics> per_image;

  /// Aligned plain-text table: per-image rows then the mean row.
  std::string table() const;
  /// key=value lines.
  std::string record() const;
};

using Enhancer = std::function<Image(const Image&)>;

/// Enhances every eval item and scores it against its ground truth; FID
/// compares enhanced outputs with the well-lit corpus.
MetricsReport evaluate(const Enhancer& enhancer, const EvalIterator& items, const MetricSelection& selection,
                       const MetricAdapters& adapters = {});

MetricsReport evaluate(const EnhancementModel<float>& model, const EvalIterator& items,
                       const MetricSelection& selection, const MetricAdapters& adapters = {});

/// Writes <stem>.txt (table) and <stem>.record (key=value) atomically.
void write_report(const MetricsReport& report, const std::filesystem::path& stem);

}  // namespace rave
