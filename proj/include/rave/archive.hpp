#pragma once

// Versioned tensor archive: key/value metadata, named float32 tensors, named
// string lists, SHA-256 trailer. Used for checkpoints and converted encoder
// weights.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rave/tensor.hpp"

namespace rave {

inline constexpr std::string_view kCheckpointMagic = "RAVECKPT";
inline constexpr std::string_view kWeightsMagic = "RAVEWGHT";

struct TensorArchive {
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::vector<std::pair<std::string, std::vector<std::string>>> string_lists;

  void add(std::string name, Tensor<float> t) { tensors.emplace_back(std::move(name), std::move(t)); }
  const Tensor<float>* find(std::string_view name) const;
  const Tensor<float>& require(std::string_view name) const;
  const std::vector<std::string>* find_list(std::string_view name) const;
  const std::string& require_meta(const std::string& key) const;
};

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive, std::string_view magic);
TensorArchive decode_archive(std::span<const std::uint8_t> bytes, std::string_view magic);

/// Atomic write; returns the SHA-256 hex of the written file.
std::string write_archive(const std::filesystem::path& path, const TensorArchive& archive,
                          std::string_view magic);
TensorArchive read_archive(const std::filesystem::path& path, std::string_view magic);

}  // namespace rave
