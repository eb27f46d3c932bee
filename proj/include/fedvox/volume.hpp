#pragma once

// Dense 3D volume with physical metadata. Storage is x-fastest:
// data[x + dims[0]*(y + dims[1]*z)]. `orientation[k]` names the canonical
// anatomical axis (0 = sagittal L-R, 1 = coronal A-P, 2 = axial I-S) that
// storage axis k runs along; {0,1,2} is the standard order.

#include <array>
#include <cstdint>
#include <cstring>
#include <vector>

#include "fedvox/common.hpp"

namespace fedvox {

enum class Modality : uint8_t { MR = 0, CT = 1, Mask = 2 };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::MR: return "MR";
    case Modality::CT: return "CT";
    case Modality::Mask: return "Mask";
  }
  return "unknown";
}

template <typename S = float>
struct Volume {
  std::array<int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::array<int32_t, 3> orientation{0, 1, 2};
  Modality modality = Modality::MR;
  AlignedVec<S> data;

  Volume() = default;
  Volume(std::array<int64_t, 3> d, std::array<double, 3> sp, Modality m)
      : dims(d), spacing(sp), modality(m) {
    FV_CHECK(d[0] > 0 && d[1] > 0 && d[2] > 0, "volume: dims must be positive");
    FV_CHECK(sp[0] > 0 && sp[1] > 0 && sp[2] > 0, "volume: spacing must be positive");
    data.assign(static_cast<size_t>(d[0] * d[1] * d[2]), S(0));
  }

  int64_t numel() const { return dims[0] * dims[1] * dims[2]; }

  int64_t index(int64_t x, int64_t y, int64_t z) const {
    return x + dims[0] * (y + dims[1] * z);
  }

  S& at(int64_t x, int64_t y, int64_t z) { return data[index(x, y, z)]; }
  const S& at(int64_t x, int64_t y, int64_t z) const { return data[index(x, y, z)]; }

  bool same_grid(const Volume& o) const {
    return dims == o.dims && spacing == o.spacing && orientation == o.orientation;
  }
};

template <typename S>
bool bit_equal(const Volume<S>& a, const Volume<S>& b) {
  if (!a.same_grid(b) || a.modality != b.modality) return false;
  if (a.data.size() != b.data.size()) return false;
  return a.data.empty() ||
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(S)) == 0;
}

inline bool is_permutation3(const std::array<int32_t, 3>& p) {
  bool seen[3] = {false, false, false};
  for (int32_t v : p) {
    if (v < 0 || v > 2 || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

}  // namespace fedvox
