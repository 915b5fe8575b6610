#include "rave/eval_metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "rave/binary_io.hpp"

namespace rave {

namespace {

void require_same_size(const Image& a, const Image& b, const char* what) {
  if (!a.same_size(b)) {
    throw ShapeError(std::string(what) + ": image sizes differ (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  }
}

Eigen::VectorXd gaussian_window(Index size, double sigma) {
  Eigen::VectorXd w(size);
  const double c = (size - 1) / 2.0;
  for (Index i = 0; i < size; ++i) w(i) = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
  return w / w.sum();
}

// Valid-mode separable filtering.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& x, const Eigen::VectorXd& w) {
  const Index k = w.size(), ho = x.rows() - k + 1, wo = x.cols() - k + 1;
  Eigen::MatrixXd rows(ho, x.cols());
  for (Index i = 0; i < ho; ++i) rows.row(i) = w.transpose() * x.middleRows(i, k);
  Eigen::MatrixXd out(ho, wo);
  for (Index j = 0; j < wo; ++j) out.col(j) = rows.middleCols(j, k) * w;
  return out;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

std::string format_value(const std::optional<double>& v, int precision) {
  if (!v) return "-";
  if (std::isinf(*v)) return *v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, *v);
  return buf;
}

std::string record_value(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::optional<double> column_mean(const std::vector<PerImageMetrics>& rows,
                                  std::optional<double> PerImageMetrics::*field) {
  if (rows.empty() || !(rows.front().*field)) return std::nullopt;
  double sum = 0;
  for (const auto& r : rows) sum += *(r.*field);
  return sum / static_cast<double>(rows.size());
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  require_same_size(a, b, "psnr");
  if (a.empty()) throw InvalidInputError("psnr of empty images");
  const double mse = (a.pixels.cast<double>() - b.pixels.cast<double>()).square().mean();
  if (mse == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(1.0 / mse);
}

Eigen::MatrixXd luminance(const Image& im) {
  return 0.299 * im.plane(0).cast<double>() + 0.587 * im.plane(1).cast<double>() +
         0.114 * im.plane(2).cast<double>();
}

double ssim(const Image& a, const Image& b) {
  require_same_size(a, b, "ssim");
  if (a.height < kSsimWindow || a.width < kSsimWindow) {
    throw InvalidInputError("ssim: image smaller than the 11x11 window");
  }
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Eigen::VectorXd w = gaussian_window(kSsimWindow, kSsimSigma);
  const Eigen::MatrixXd x = luminance(a), y = luminance(b);
  const Eigen::ArrayXXd mx = filter_valid(x, w).array(), my = filter_valid(y, w).array();
  const Eigen::ArrayXXd sxx = filter_valid(x.cwiseProduct(x), w).array() - mx.square();
  const Eigen::ArrayXXd syy = filter_valid(y.cwiseProduct(y), w).array() - my.square();
  const Eigen::ArrayXXd sxy = filter_valid(x.cwiseProduct(y), w).array() - mx * my;
  const Eigen::ArrayXXd map =
      ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx.square() + my.square() + c1) * (sxx + syy + c2));
  return map.mean();
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev.minCoeff() < -1e-8 * scale) throw NumericalError("matrix is not positive semidefinite");
  return es.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw InvalidInputError("fid needs at least two samples per set");
  if (a.cols() != b.cols()) throw ShapeError("fid: feature widths differ");
  const Eigen::VectorXd mu = a.colwise().mean().transpose() - b.colwise().mean().transpose();
  const Eigen::MatrixXd sa = covariance(a), sb = covariance(b);
  // tr((Sa Sb)^1/2) = tr((Sa^1/2 Sb Sa^1/2)^1/2), the inner product being symmetric.
  const Eigen::MatrixXd ra = sqrt_psd(sa);
  const Eigen::MatrixXd inner = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return std::max(0.0, mu.squaredNorm() + sa.trace() + sb.trace() - 2 * tr_sqrt);
}

Eigen::MatrixXd EmbeddingFeatures::features(const std::vector<Image>& images) const {
  Eigen::MatrixXd out(static_cast<Index>(images.size()), backend_->info().embed_dim);
  for (std::size_t i = 0; i < images.size(); i += 8) {
    const std::size_t n = std::min<std::size_t>(8, images.size() - i);
    const RowMatrix<float> e = encode_image(*backend_, std::span<const Image>(images.data() + i, n));
    out.middleRows(static_cast<Index>(i), static_cast<Index>(n)) = e.cast<double>();
  }
  return out;
}

MetricSelection MetricSelection::parse(const std::string& text) {
  MetricSelection s;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    if (item == "psnr") s.psnr = true;
    else if (item == "ssim") s.ssim = true;
    else if (item == "lpips") s.lpips = true;
    else if (item == "fid") s.fid = true;
    else throw ConfigError("unknown metric '" + item + "' (expected psnr, ssim, lpips, fid)");
  }
  return s;
}

std::string MetricSelection::to_string() const {
  std::string out;
  for (auto [on, name] : {std::pair{psnr, "psnr"}, {ssim, "ssim"}, {lpips, "lpips"}, {fid, "fid"}}) {
    if (!on) continue;
    if (!out.empty()) out += ",";
    out += name;
  }
  return out;
}

std::string MetricsReport::table() const {
  std::vector<std::string> header{"image"};
  if (selection.psnr) header.emplace_back("psnr");
  if (selection.ssim) header.emplace_back("ssim");
  if (selection.lpips) header.emplace_back("lpips");
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : per_image) {
    std::vector<std::string> row{r.name};
    if (selection.psnr) row.push_back(format_value(r.psnr, 2));
    if (selection.ssim) row.push_back(format_value(r.ssim, 4));
    if (selection.lpips) row.push_back(format_value(r.lpips, 4));
    rows.push_back(std::move(row));
  }
  std::vector<std::string> mean_row{"mean"};
  if (selection.psnr) mean_row.push_back(format_value(psnr, 2));
  if (selection.ssim) mean_row.push_back(format_value(ssim, 4));
  if (selection.lpips) mean_row.push_back(format_value(lpips, 4));

  std::vector<std::size_t> width(header.size());
  auto widen = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  };
  widen(header);
  widen(mean_row);
  for (const auto& r : rows) widen(r);
  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i == 0) {
        out << r[i] << std::string(width[i] - r[i].size(), ' ');
      } else {
        out << "  " << std::string(width[i] - r[i].size(), ' ') << r[i];
      }
    }
    out << "\n";
  };
  emit(header);
  for (const auto& r : rows) emit(r);
  emit(mean_row);
  out << "images: " << per_image.size() << "\n";
  if (fid) out << "fid: " << format_value(fid, 4) << " (features: " << fid_features << ")\n";
  return out.str();
}

std::string MetricsReport::record() const {
  std::ostringstream out;
  out << "metrics=" << selection.to_string() << "\n";
  out << "count=" << per_image.size() << "\n";
  if (psnr) out << "psnr=" << record_value(*psnr) << "\n";
  if (ssim) out << "ssim=" << record_value(*ssim) << "\n";
  if (lpips) out << "lpips=" << record_value(*lpips) << "\n";
  if (fid) out << "fid=" << record_value(*fid) << "\nfid_features=" << fid_features << "\n";
  for (const auto& r : per_image) {
    if (r.psnr) out << "image." << r.name << ".psnr=" << record_value(*r.psnr) << "\n";
    if (r.ssim) out << "image." << r.name << ".ssim=" << record_value(*r.ssim) << "\n";
    if (r.lpips) out << "image." << r.name << ".lpips=" << record_value(*r.lpips) << "\n";
  }
  return out.str();
}

MetricsReport evaluate(const Enhancer& enhancer, const EvalIterator& items, const MetricSelection& selection,
                       const MetricAdapters& adapters) {
  if (selection.any_paired() && !items.paired()) {
    throw ConfigError("paired metrics (psnr, ssim, lpips) need a paired test corpus");
  }
  if (selection.lpips && !adapters.lpips) throw ConfigError("lpips requested but no perceptual backend is registered");
  if (selection.fid && !adapters.fid) throw ConfigError("fid requested but no feature backend is registered");
  MetricsReport report;
  report.selection = selection;
  std::vector<Image> enhanced_set;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const EvalItem item = items.item(i);
    const Image out = clamp_unit(enhancer(item.backlit));
    PerImageMetrics row;
    row.name = item.name;
    if (selection.any_paired()) {
      const Image& gt = *item.ground_truth;
      if (selection.psnr) row.psnr = psnr(out, gt);
      if (selection.ssim) row.ssim = ssim(out, gt);
      if (selection.lpips) row.lpips = adapters.lpips->distance(out, gt);
    }
    if (selection.fid) enhanced_set.push_back(out);
    report.per_image.push_back(std::move(row));
  }
  report.psnr = column_mean(report.per_image, &PerImageMetrics::psnr);
  report.ssim = column_mean(report.per_image, &PerImageMetrics::ssim);
  report.lpips = column_mean(report.per_image, &PerImageMetrics::lpips);
  if (selection.fid) {
    const ImageSource& well = *items.index().well_lit;
    std::vector<Image> reference;
    for (std::size_t i = 0; i < well.size(); ++i) {
      const Image im = well.load(i);
      reference.push_back(items.long_side() > 0 ? clamp_unit(resize_long_side(im, items.long_side())) : im);
    }
    report.fid = fid(adapters.fid->features(enhanced_set), adapters.fid->features(reference));
    report.fid_features = adapters.fid->name();
  }
  return report;
}

MetricsReport evaluate(const EnhancementModel<float>& model, const EvalIterator& items,
                       const MetricSelection& selection, const MetricAdapters& adapters) {
  return evaluate([&](const Image& im) { return enhance(model, im).enhanced; }, items, selection, adapters);
}

void write_report(const MetricsReport& report, const std::filesystem::path& stem) {
  write_text_atomic(std::filesystem::path(stem.string() + ".txt"), report.table());
  write_text_atomic(std::filesystem::path(stem.string() + ".record"), report.record());
}

}  // namespace rave
