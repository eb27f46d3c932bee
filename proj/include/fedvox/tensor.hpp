#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <vector>

#include "fedvox/common.hpp"

namespace fedvox {

template <typename S>
using ArrayMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstArrayMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
// Conv kernels address weights as (filters x patch) row-major blocks.
template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatrixMapRM = Eigen::Map<MatrixRM<S>>;
template <typename S>
using ConstMatrixMapRM = Eigen::Map<const MatrixRM<S>>;

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    FV_CHECK(e > 0, "tensor extent must be positive, got ", e);
    n *= e;
  }
  return n;
}

// Dense row-major tensor. S is float for training, double for gradient checks.
template <typename S>
struct Tensor {
  std::vector<int64_t> shape;
  AlignedVec<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shp, S fill = S(0))
      : shape(std::move(shp)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

  static Tensor zeros(std::vector<int64_t> shp) { return Tensor(std::move(shp)); }
  static Tensor full(std::vector<int64_t> shp, S v) { return Tensor(std::move(shp), v); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t extent(size_t axis) const {
    FV_CHECK(axis < shape.size(), "axis ", axis, " out of range for rank ", shape.size());
    return shape[axis];
  }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  ArrayMap<S> flat() { return ArrayMap<S>(data.data(), numel()); }
  ConstArrayMap<S> flat() const { return ConstArrayMap<S>(data.data(), numel()); }

  bool all_finite() const {
    for (S v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename S>
bool bit_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape) return false;
  return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(S)) == 0;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  FV_CHECK(a.shape == b.shape, "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  }
  return m;
}

}  // namespace fedvox
