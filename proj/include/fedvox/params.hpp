#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fedvox/tensor.hpp"

namespace fedvox {

enum class ParamKind : uint8_t {
  ConvWeight = 0,
  ConvBias = 1,
  BNGamma = 2,
  BNBeta = 3,
  BNRunningMean = 4,
  BNRunningVar = 5,
};

inline const char* param_kind_name(ParamKind k) {
  switch (k) {
    case ParamKind::ConvWeight: return "conv_weight";
    case ParamKind::ConvBias: return "conv_bias";
    case ParamKind::BNGamma: return "bn_gamma";
    case ParamKind::BNBeta: return "bn_beta";
    case ParamKind::BNRunningMean: return "bn_running_mean";
    case ParamKind::BNRunningVar: return "bn_running_var";
  }
  return "unknown";
}

struct LayerTag {
  ParamKind kind = ParamKind::ConvWeight;
  int32_t layer_index = 0;
};

// Running statistics are exchanged and aggregated but never receive
// optimizer updates.
inline bool is_trainable(ParamKind k) {
  return k != ParamKind::BNRunningMean && k != ParamKind::BNRunningVar;
}

inline bool is_batchnorm(ParamKind k) {
  return k == ParamKind::BNGamma || k == ParamKind::BNBeta ||
         k == ParamKind::BNRunningMean || k == ParamKind::BNRunningVar;
}

template <typename S>
struct Parameter {
  Tensor<S> value;
  Tensor<S> grad;  // same shape as value, accumulated by backward passes
  LayerTag tag;

  explicit Parameter(Tensor<S> v = Tensor<S>(), LayerTag t = LayerTag())
      : value(std::move(v)), grad(value.shape.empty() ? Tensor<S>() : Tensor<S>::zeros(value.shape)), tag(t) {}

  void zero_grad() { grad.flat().setZero(); }
};

// Ordered (name, Parameter) list; ordering is fixed by construction order
// and names are unique.
template <typename S>
struct NamedParameterSet {
  std::vector<std::pair<std::string, Parameter<S>>> items;

  void append(std::string name, Parameter<S> p) {
    for (const auto& it : items) {
      FV_CHECK(it.first != name, "duplicate parameter name: ", name);
    }
    items.emplace_back(std::move(name), std::move(p));
  }

  size_t size() const { return items.size(); }

  const Parameter<S>* find(const std::string& name) const {
    for (const auto& it : items) {
      if (it.first == name) return &it.second;
    }
    return nullptr;
  }
};

template <typename S>
bool bit_equal(const NamedParameterSet<S>& a, const NamedParameterSet<S>& b) {
  if (a.items.size() != b.items.size()) return false;
  for (size_t i = 0; i < a.items.size(); ++i) {
    if (a.items[i].first != b.items[i].first) return false;
    if (!bit_equal(a.items[i].second.value, b.items[i].second.value)) return false;
  }
  return true;
}

}  // namespace fedvox
