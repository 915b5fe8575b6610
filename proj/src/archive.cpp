#include "rave/archive.hpp"

#include <fstream>
#include <random>

#include "rave/binary_io.hpp"
#include "rave/errors.hpp"
#include "rave/hash.hpp"

namespace rave {

namespace {
constexpr std::uint32_t kArchiveVersion = 1;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp" + std::to_string(std::random_device{}());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot rename onto " + path.string() + ": " + ec.message());
  }
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

const Tensor<float>* TensorArchive::find(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

const Tensor<float>& TensorArchive::require(std::string_view name) const {
  if (const auto* t = find(name)) return *t;
  throw FormatError("archive is missing tensor '" + std::string(name) + "'");
}

const std::vector<std::string>* TensorArchive::find_list(std::string_view name) const {
  for (const auto& [n, l] : string_lists)
    if (n == name) return &l;
  return nullptr;
}

const std::string& TensorArchive::require_meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw FormatError("archive is missing metadata key '" + key + "'");
  return it->second;
}

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive, std::string_view magic) {
  BinaryWriter w;
  w.raw(magic);
  w.u32(kArchiveVersion);
  w.u32(static_cast<std::uint32_t>(archive.metadata.size()));
  for (const auto& [k, v] : archive.metadata) {
    w.string(k);
    w.string(v);
  }
  w.u32(static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& [name, t] : archive.tensors) {
    w.string(name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (Index d : t.shape) w.u64(static_cast<std::uint64_t>(d));
    w.f32_array({t.data.data(), static_cast<std::size_t>(t.data.size())});
  }
  w.u32(static_cast<std::uint32_t>(archive.string_lists.size()));
  for (const auto& [name, list] : archive.string_lists) {
    w.string(name);
    w.u32(static_cast<std::uint32_t>(list.size()));
    for (const auto& s : list) w.string(s);
  }
  std::vector<std::uint8_t> out = w.buffer();
  const Digest d = sha256(out);
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

TensorArchive decode_archive(std::span<const std::uint8_t> bytes, std::string_view magic) {
  if (bytes.size() < magic.size() + 4 + 32) throw FormatError("archive too short");
  BinaryReader r(bytes.first(bytes.size() - 32));
  if (r.raw(magic.size()) != magic) throw FormatError("bad magic header (expected " + std::string(magic) + ")");
  const Digest stored = [&] {
    Digest d{};
    std::copy(bytes.end() - 32, bytes.end(), d.begin());
    return d;
  }();
  if (sha256(bytes.first(bytes.size() - 32)) != stored) throw ChecksumError("archive checksum mismatch");
  const std::uint32_t version = r.u32();
  if (version != kArchiveVersion) {
    throw FormatError("unsupported archive version " + std::to_string(version));
  }
  TensorArchive a;
  for (std::uint32_t i = 0, n = r.u32(); i < n; ++i) {
    std::string k = r.string();
    a.metadata[k] = r.string();
  }
  for (std::uint32_t i = 0, n = r.u32(); i < n; ++i) {
    std::string name = r.string();
    Shape shape(r.u32());
    for (auto& d : shape) d = static_cast<Index>(r.u64());
    Tensor<float> t(shape);
    if (static_cast<std::size_t>(t.size()) * 4 > r.remaining()) throw FormatError("truncated tensor " + name);
    for (Index k = 0; k < t.size(); ++k) t.data(k) = r.f32();
    a.tensors.emplace_back(std::move(name), std::move(t));
  }
  for (std::uint32_t i = 0, n = r.u32(); i < n; ++i) {
    std::string name = r.string();
    std::vector<std::string> list(r.u32());
    for (auto& s : list) s = r.string();
    a.string_lists.emplace_back(std::move(name), std::move(list));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in archive");
  return a;
}

std::string write_archive(const std::filesystem::path& path, const TensorArchive& archive,
                          std::string_view magic) {
  const auto bytes = encode_archive(archive, magic);
  write_file_atomic(path, bytes);
  return to_hex(sha256(bytes));
}

TensorArchive read_archive(const std::filesystem::path& path, std::string_view magic) {
  return decode_archive(read_file_bytes(path), magic);
}

}  // namespace rave
