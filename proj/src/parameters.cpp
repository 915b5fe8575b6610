#include "rave/parameters.hpp"

#include "rave/binary_io.hpp"
#include "rave/hash.hpp"

namespace rave {

std::string checksum(const ParameterSet<float>& params) {
  BinaryWriter w;
  for (std::size_t i = 0; i < params.size(); ++i) {
    w.string(params.name(i));
    for (Index d : params.value(i).shape) w.u64(static_cast<std::uint64_t>(d));
    const auto& data = params.value(i).data;
    w.f32_array({data.data(), static_cast<std::size_t>(data.size())});
  }
  return to_hex(sha256(w.buffer()));
}

void store_parameters(TensorArchive& archive, const std::string& prefix, const ParameterSet<float>& params) {
  archive.metadata[prefix + ".count"] = std::to_string(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) archive.add(prefix + "/" + params.name(i), params.value(i));
}

ParameterSet<float> load_parameters(const TensorArchive& archive, const std::string& prefix) {
  ParameterSet<float> out;
  const std::string head = prefix + "/";
  for (const auto& [name, t] : archive.tensors) {
    if (name.rfind(head, 0) == 0) out.add(name.substr(head.size()), t);
  }
  auto it = archive.metadata.find(prefix + ".count");
  if (it != archive.metadata.end() && std::stoul(it->second) != out.size()) {
    throw FormatError("parameter group '" + prefix + "' is incomplete");
  }
  return out;
}

void store_adam(TensorArchive& archive, const std::string& prefix, const AdamState<float>& state) {
  archive.metadata[prefix + ".step"] = std::to_string(state.step);
  archive.metadata[prefix + ".slots"] = std::to_string(state.m.size());
  for (std::size_t i = 0; i < state.m.size(); ++i) {
    archive.add(prefix + "/m/" + std::to_string(i), state.m[i]);
    archive.add(prefix + "/v/" + std::to_string(i), state.v[i]);
  }
}

AdamState<float> load_adam(const TensorArchive& archive, const std::string& prefix, const ParameterSet<float>& params) {
  AdamState<float> s;
  s.step = std::stol(archive.require_meta(prefix + ".step"));
  const std::size_t slots = std::stoul(archive.require_meta(prefix + ".slots"));
  if (slots == 0) return s;
  if (slots != params.size()) throw FormatError("optimizer state '" + prefix + "' does not match parameters");
  for (std::size_t i = 0; i < slots; ++i) {
    s.m.push_back(archive.require(prefix + "/m/" + std::to_string(i)));
    s.v.push_back(archive.require(prefix + "/v/" + std::to_string(i)));
    if (s.m.back().shape != params.value(i).shape) throw FormatError("optimizer slot shape mismatch");
  }
  return s;
}

}  // namespace rave
