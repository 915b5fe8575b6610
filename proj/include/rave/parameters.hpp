#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "rave/archive.hpp"
#include "rave/autodiff.hpp"
#include "rave/errors.hpp"

namespace rave {

/// Ordered, named set of trainable tensors.
template <typename Scalar>
class ParameterSet {
 public:
  void add(std::string name, Tensor<Scalar> value) {
    if (find(name)) throw ConfigError("duplicate parameter " + name);
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
  }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Tensor<Scalar>& value(std::size_t i) { return values_.at(i); }
  const Tensor<Scalar>& value(std::size_t i) const { return values_.at(i); }
  const std::vector<Tensor<Scalar>>& values() const { return values_; }

  const Tensor<Scalar>* find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return &values_[i];
    return nullptr;
  }
  const Tensor<Scalar>& at(std::string_view name) const {
    if (const auto* t = find(name)) return *t;
    throw ConfigError("unknown parameter " + std::string(name));
  }

  Index count() const {
    Index n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  /// Creates one leaf per parameter in g.
  std::vector<Var<Scalar>> bind(Graph<Scalar>& g, bool requires_grad) const {
    std::vector<Var<Scalar>> vars;
    vars.reserve(values_.size());
    for (const auto& v : values_) vars.push_back(g.leaf(v, requires_grad));
    return vars;
  }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<Other>());
    return out;
  }

  bool same_layout(const ParameterSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (other.names_[i] != names_[i] || other.values_[i].shape != values_[i].shape) return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<Scalar>> values_;
};

template <typename Scalar>
std::vector<Tensor<Scalar>> gradients(const Graph<Scalar>& g, const std::vector<Var<Scalar>>& vars) {
  std::vector<Tensor<Scalar>> out;
  out.reserve(vars.size());
  for (const auto& v : vars) out.push_back(g.grad(v));
  return out;
}

/// SHA-256 over names, shapes and float32 contents.
std::string checksum(const ParameterSet<float>& params);

template <typename Scalar>
std::string checksum(const ParameterSet<Scalar>& params) {
  return checksum(params.template cast<float>());
}

void store_parameters(TensorArchive& archive, const std::string& prefix, const ParameterSet<float>& params);
ParameterSet<float> load_parameters(const TensorArchive& archive, const std::string& prefix);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  std::vector<Tensor<Scalar>> m;
  std::vector<Tensor<Scalar>> v;
  long step = 0;

  void reset(const ParameterSet<Scalar>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params.values()) {
      m.push_back(Tensor<Scalar>::zeros(p.shape));
      v.push_back(Tensor<Scalar>::zeros(p.shape));
    }
    step = 0;
  }
  bool initialized() const { return !m.empty(); }
};

template <typename Scalar>
void adam_update(ParameterSet<Scalar>& params, const std::vector<Tensor<Scalar>>& grads,
                 AdamState<Scalar>& state, const AdamConfig& cfg) {
  if (!state.initialized()) state.reset(params);
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ConfigError("adam_update: parameter/gradient count mismatch");
  }
  ++state.step;
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta1, static_cast<double>(state.step)));
  const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta2, static_cast<double>(state.step)));
  const Scalar lr = static_cast<Scalar>(cfg.lr), eps = static_cast<Scalar>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    const auto& g = grads[i].data;
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    params.value(i).data -= lr * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

void store_adam(TensorArchive& archive, const std::string& prefix, const AdamState<float>& state);
AdamState<float> load_adam(const TensorArchive& archive, const std::string& prefix, const ParameterSet<float>& params);

}  // namespace rave
