#include "rave/residual.hpp"

#include <map>
#include <sstream>

#include "rave/binary_io.hpp"
#include "rave/hash.hpp"

namespace rave {

ResidualVector make_residual(const Eigen::VectorXd& well_mean, const Eigen::VectorXd& back_mean) {
  if (well_mean.size() != back_mean.size()) throw ShapeError("corpus means differ in dimension");
  ResidualVector rv;
  rv.v_well_lit = well_mean.cast<float>();
  rv.v_backlit = back_mean.cast<float>();
  // Direction taken from the stored (float) means so a loaded file re-validates exactly.
  const Eigen::VectorXd diff = rv.v_well_lit.cast<double>() - rv.v_backlit.cast<double>();
  if (diff.isZero(0.0)) {
    throw DegenerateDirectionError("degenerate residual: well-lit and backlit corpora are indistinguishable");
  }
  rv.v_residual = normalize(diff).cast<float>();
  return rv;
}

Interpretation rank_tokens(std::vector<TokenSimilarity> scores, std::size_t top_k) {
  auto ascending = [](const TokenSimilarity& a, const TokenSimilarity& b) {
    return a.score != b.score ? a.score < b.score : a.token < b.token;
  };
  auto descending = [](const TokenSimilarity& a, const TokenSimilarity& b) {
    return a.score != b.score ? a.score > b.score : a.token < b.token;
  };
  const std::size_t k = std::min(top_k, scores.size());
  Interpretation out;
  std::vector<TokenSimilarity> s = scores;
  std::partial_sort(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k), s.end(), ascending);
  out.lowest.assign(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k));
  std::partial_sort(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(k), scores.end(), descending);
  out.highest.assign(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(k));
  return out;
}

void validate_residual(const ResidualVector& rv) {
  const Index d = rv.v_residual.size();
  if (d == 0 || rv.v_well_lit.size() != d || rv.v_backlit.size() != d) {
    throw FormatError("residual vectors are empty or differ in length");
  }
  auto check_unit = [](const Eigen::VectorXf& v, const char* what) {
    const double n = v.cast<double>().norm();
    if (std::abs(n - 1.0) > 1e-6) {
      std::ostringstream msg;
      msg << what << " has norm " << n << ", expected 1 +- 1e-6";
      throw FormatError(msg.str());
    }
  };
  check_unit(rv.v_residual, "v_residual");
  check_unit(rv.v_well_lit, "v_well_lit");
  check_unit(rv.v_backlit, "v_backlit");
  const Eigen::VectorXd diff = (rv.v_well_lit.cast<double>() - rv.v_backlit.cast<double>());
  if (diff.norm() == 0.0) throw DegenerateDirectionError("degenerate residual: v_well_lit equals v_backlit");
  const double cosine = diff.normalized().dot(rv.v_residual.cast<double>());
  if (std::abs(cosine - 1.0) > 1e-6) throw FormatError("v_residual is not collinear with v_well_lit - v_backlit");
}

namespace {

std::string metadata_text(const ResidualVector& rv) {
  std::ostringstream s;
  s << "model_id=" << rv.backend_model_id << "\n"
    << "backend_checksum=" << rv.backend_checksum << "\n"
    << "dataset_fingerprint=" << rv.dataset_fingerprint << "\n"
    << "n_back=" << rv.n_back << "\n"
    << "n_well=" << rv.n_well << "\n";
  return s.str();
}

std::map<std::string, std::string> parse_metadata(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed residual metadata line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

std::vector<std::uint8_t> encode_residual(const ResidualVector& rv) {
  validate_residual(rv);
  BinaryWriter w;
  w.raw(kResidualMagic);
  w.u32(kResidualVersion);
  w.string(metadata_text(rv));
  w.u32(static_cast<std::uint32_t>(rv.dim()));
  for (const Eigen::VectorXf* v : {&rv.v_residual, &rv.v_well_lit, &rv.v_backlit}) {
    w.f32_array({v->data(), static_cast<std::size_t>(v->size())});
  }
  std::vector<std::uint8_t> out = w.buffer();
  const Digest d = sha256(out);
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

ResidualVector decode_residual(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kResidualMagic.size() + 4 + 32) throw FormatError("residual file too short");
  BinaryReader r(bytes.first(bytes.size() - 32));
  if (r.raw(kResidualMagic.size()) != kResidualMagic) throw FormatError("not a residual file (bad magic header)");
  Digest stored{};
  std::copy(bytes.end() - 32, bytes.end(), stored.begin());
  if (sha256(bytes.first(bytes.size() - 32)) != stored) throw ChecksumError("residual file checksum mismatch");
  const std::uint32_t version = r.u32();
  if (version != kResidualVersion) {
    throw FormatError("unsupported residual file version " + std::to_string(version));
  }
  const auto meta = parse_metadata(r.string());
  const Index d = r.u32();
  ResidualVector rv;
  for (Eigen::VectorXf* v : {&rv.v_residual, &rv.v_well_lit, &rv.v_backlit}) {
    v->resize(d);
    for (Index i = 0; i < d; ++i) (*v)(i) = r.f32();
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in residual file");
  auto get = [&](const std::string& k) {
    auto it = meta.find(k);
    if (it == meta.end()) throw FormatError("residual metadata lacks '" + k + "'");
    return it->second;
  };
  rv.backend_model_id = get("model_id");
  rv.backend_checksum = get("backend_checksum");
  rv.dataset_fingerprint = get("dataset_fingerprint");
  rv.n_back = std::stoull(get("n_back"));
  rv.n_well = std::stoull(get("n_well"));
  validate_residual(rv);
  return rv;
}

void save_residual(const ResidualVector& rv, const std::filesystem::path& path) {
  write_file_atomic(path, encode_residual(rv));
}

ResidualVector load_residual(const std::filesystem::path& path) { return decode_residual(read_file_bytes(path)); }

}  // namespace rave
