#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "fedvox/common.hpp"
#include "fedvox/volume.hpp"

namespace fedvox {

enum class MaskPolicy : int32_t { kBodyMask = 0, kFullVolume = 1 };

inline const char* mask_policy_name(MaskPolicy p) {
  return p == MaskPolicy::kBodyMask ? "body-mask" : "full-volume";
}

struct MetricConfig {
  double k1 = 0.01;
  double k2 = 0.03;
  double L = 4000.0;      // intensity dynamic range
  int64_t window = 7;     // cubic sliding-window extent
  double max_ct = 4000.0;  // PSNR peak
  MaskPolicy mask_policy = MaskPolicy::kBodyMask;

  void validate() const {
    FV_CHECK(k1 > 0 && k2 > 0, "metrics: k1 and k2 must be positive");
    FV_CHECK(L > 0, "metrics: dynamic range L must be positive");
    FV_CHECK(window >= 1, "metrics: window must be >= 1, got ", window);
    FV_CHECK(max_ct > 0, "metrics: max_ct must be positive");
  }
};

struct PatientMetrics {
  int64_t patient_id = 0;
  double mae = 0.0;
  double ssim = 0.0;
  double psnr = 0.0;
};

// ---------------------------------------------------------------------------
// Intensity scale conversion. The network works on [0,1]; evaluation works in
// HU on the fixed range [-1000, 3000]. Both directions clamp out-of-range
// inputs and report how many voxels were clamped. Arithmetic is double
// throughout; the roundtrip to_hu(from_hu(h)) is exact to well under one
// float ulp of h (bit-exactness is unattainable: the float grid of [0,1] is
// coarser than the float grid of HU around 1000, so some HU values have no
// normalized preimage at all).

inline Volume<float> to_hu(const Volume<float>& normalized, int64_t* clamped = nullptr) {
  Volume<float> out(normalized.dims, normalized.spacing, Modality::CT);
  out.orientation = normalized.orientation;
  int64_t n_clamped = 0;
  for (size_t i = 0; i < normalized.data.size(); ++i) {
    double x = double(normalized.data[i]);
    if (x < 0.0 || x > 1.0) {
      x = std::clamp(x, 0.0, 1.0);
      ++n_clamped;
    }
    out.data[i] = float(4000.0 * x - 1000.0);
  }
  if (clamped) *clamped = n_clamped;
  return out;
}

inline Volume<float> from_hu(const Volume<float>& hu, int64_t* clamped = nullptr) {
  Volume<float> out(hu.dims, hu.spacing, Modality::CT);
  out.orientation = hu.orientation;
  int64_t n_clamped = 0;
  for (size_t i = 0; i < hu.data.size(); ++i) {
    double h = double(hu.data[i]);
    if (h < -1000.0 || h > 3000.0) {
      h = std::clamp(h, -1000.0, 3000.0);
      ++n_clamped;
    }
    out.data[i] = float((h + 1000.0) / 4000.0);
  }
  if (clamped) *clamped = n_clamped;
  return out;
}

namespace detail {

inline void check_region_inputs(const Volume<float>& ct, const Volume<float>& sct,
                                const Volume<float>& mask, MaskPolicy policy) {
  FV_CHECK(ct.dims == sct.dims, "metrics: volume shape mismatch");
  if (policy == MaskPolicy::kBodyMask)
    FV_CHECK(ct.dims == mask.dims, "metrics: mask shape mismatch");
}

}  // namespace detail

// Mean absolute error over the selected region, in the input intensity units.
inline double mae(const Volume<float>& ct, const Volume<float>& sct, const Volume<float>& mask,
                  MaskPolicy policy) {
  detail::check_region_inputs(ct, sct, mask, policy);
  double sum = 0.0;
  int64_t n = 0;
  for (size_t i = 0; i < ct.data.size(); ++i) {
    if (policy == MaskPolicy::kBodyMask && mask.data[i] == 0.0f) continue;
    sum += std::abs(double(ct.data[i]) - double(sct.data[i]));
    ++n;
  }
  FV_CHECK(n > 0, "mae: selected region is empty");
  return sum / double(n);
}

// 10*log10(max^2 / MSE) over the selected region; identical inputs give +inf
// (serialized as null downstream).
inline double psnr(const Volume<float>& ct, const Volume<float>& sct, const Volume<float>& mask,
                   const MetricConfig& cfg) {
  cfg.validate();
  detail::check_region_inputs(ct, sct, mask, cfg.mask_policy);
  double sum = 0.0;
  int64_t n = 0;
  for (size_t i = 0; i < ct.data.size(); ++i) {
    if (cfg.mask_policy == MaskPolicy::kBodyMask && mask.data[i] == 0.0f) continue;
    const double d = double(ct.data[i]) - double(sct.data[i]);
    sum += d * d;
    ++n;
  }
  FV_CHECK(n > 0, "psnr: selected region is empty");
  const double mse = sum / double(n);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(cfg.max_ct * cfg.max_ct / mse);
}

namespace detail {

// Inclusive 3D prefix sums with a zero border; window sums by 8-corner
// inclusion-exclusion.
struct Sat3 {
  std::array<int64_t, 3> n;
  std::vector<double> s;  // (n0+1)*(n1+1)*(n2+1), index x + (n0+1)*(y + (n1+1)*z)

  template <typename F>
  Sat3(const std::array<int64_t, 3>& dims, F&& value) : n(dims) {
    const int64_t px = n[0] + 1, py = n[1] + 1;
    s.assign(size_t(px * py * (n[2] + 1)), 0.0);
    for (int64_t z = 0; z < n[2]; ++z) {
      for (int64_t y = 0; y < n[1]; ++y) {
        for (int64_t x = 0; x < n[0]; ++x) {
          const int64_t i = (x + 1) + px * ((y + 1) + py * (z + 1));
          s[size_t(i)] = value(x, y, z) + s[size_t(i - 1)] + s[size_t(i - px)] +
                         s[size_t(i - px * py)] - s[size_t(i - 1 - px)] -
                         s[size_t(i - 1 - px * py)] - s[size_t(i - px - px * py)] +
                         s[size_t(i - 1 - px - px * py)];
        }
      }
    }
  }

  // Sum over [x0,x0+w) x [y0,y0+w) x [z0,z0+w).
  double window(int64_t x0, int64_t y0, int64_t z0, int64_t w) const {
    const int64_t px = n[0] + 1, py = n[1] + 1;
    auto at = [&](int64_t x, int64_t y, int64_t z) { return s[size_t(x + px * (y + py * z))]; };
    const int64_t x1 = x0 + w, y1 = y0 + w, z1 = z0 + w;
    return at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1) +
           at(x0, y1, z0) + at(x1, y0, z0) - at(x0, y0, z0);
  }
};

}  // namespace detail

// Mean over all dense cubic sliding windows of the local structural
// similarity with C1=(k1*L)^2, C2=(k2*L)^2 and population (biased) local
// variances. Windows are unmasked: structure is compared wherever the
// volumes have it, matching the whole-image convention.
inline double ssim(const Volume<float>& ct, const Volume<float>& sct, const MetricConfig& cfg) {
  cfg.validate();
  FV_CHECK(ct.dims == sct.dims, "ssim: volume shape mismatch");
  const int64_t w = cfg.window;
  FV_CHECK(w <= ct.dims[0] && w <= ct.dims[1] && w <= ct.dims[2], "ssim: window ", w,
           " exceeds volume extent ", ct.dims[0], "x", ct.dims[1], "x", ct.dims[2]);

  const detail::Sat3 sx(ct.dims, [&](int64_t x, int64_t y, int64_t z) {
    return double(ct.at(x, y, z));
  });
  const detail::Sat3 sy(ct.dims, [&](int64_t x, int64_t y, int64_t z) {
    return double(sct.at(x, y, z));
  });
  const detail::Sat3 sxx(ct.dims, [&](int64_t x, int64_t y, int64_t z) {
    const double v = double(ct.at(x, y, z));
    return v * v;
  });
  const detail::Sat3 syy(ct.dims, [&](int64_t x, int64_t y, int64_t z) {
    const double v = double(sct.at(x, y, z));
    return v * v;
  });
  const detail::Sat3 sxy(ct.dims, [&](int64_t x, int64_t y, int64_t z) {
    return double(ct.at(x, y, z)) * double(sct.at(x, y, z));
  });

  const double c1 = (cfg.k1 * cfg.L) * (cfg.k1 * cfg.L);
  const double c2 = (cfg.k2 * cfg.L) * (cfg.k2 * cfg.L);
  const double m = double(w) * double(w) * double(w);

  double acc = 0.0;
  int64_t count = 0;
  for (int64_t z = 0; z + w <= ct.dims[2]; ++z) {
    for (int64_t y = 0; y + w <= ct.dims[1]; ++y) {
      for (int64_t x = 0; x + w <= ct.dims[0]; ++x) {
        const double mx = sx.window(x, y, z, w) / m;
        const double my = sy.window(x, y, z, w) / m;
        const double vx = sxx.window(x, y, z, w) / m - mx * mx;
        const double vy = syy.window(x, y, z, w) / m - my * my;
        const double cov = sxy.window(x, y, z, w) / m - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    }
  }
  return acc / double(count);
}

// ---------------------------------------------------------------------------
// Cohort summaries: median and quartiles with linear interpolation between
// order statistics.

struct MetricSummary {
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
};

struct CohortSummary {
  MetricSummary mae;
  MetricSummary ssim;
  MetricSummary psnr;
};

inline double quantile_linear(std::vector<double> v, double p) {
  FV_CHECK(!v.empty(), "quantile: empty sample");
  FV_CHECK(p >= 0.0 && p <= 1.0, "quantile: p must be in [0,1], got ", p);
  std::sort(v.begin(), v.end());
  const double pos = p * double(v.size() - 1);
  const size_t lo = size_t(pos);
  if (lo + 1 >= v.size()) return v.back();
  const double frac = pos - double(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

inline CohortSummary summarize(const std::vector<PatientMetrics>& cohort) {
  FV_CHECK(!cohort.empty(), "summarize: empty cohort");
  std::vector<double> a, b, c;
  for (const auto& pm : cohort) {
    a.push_back(pm.mae);
    b.push_back(pm.ssim);
    c.push_back(pm.psnr);
  }
  auto sum3 = [](const std::vector<double>& v) {
    return MetricSummary{quantile_linear(v, 0.5), quantile_linear(v, 0.25),
                         quantile_linear(v, 0.75)};
  };
  return {sum3(a), sum3(b), sum3(c)};
}

}  // namespace fedvox
