#pragma once

// Per-patient preprocessing: multiplicative bias-field correction on the MRI,
// storage-axis standardization, isotropic resampling, crop/resize/pad to a
// cubic target, mask re-application, and min-max normalization — in that
// order. All interpolation math runs in double; volumes stay float.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "fedvox/volume.hpp"

namespace fedvox {

struct PreprocessConfig {
  int64_t target_dim = 64;
  std::array<int64_t, 3> crop_dims{82, 64, 82};
  double target_voxel = 1.0;  // mm
  double pad_ct = -1000.0;    // fixed contract constants
  double pad_mri = 0.0;
  int64_t bias_poly_degree = 3;
  int64_t bias_iters = 6;
  // Relative ridge on the non-constant surface terms. Shrinks the fit along
  // weakly-supported directions, taming extrapolation where the dominant
  // tissue has no samples; in the large-ridge limit correction degrades
  // gracefully to the identity.
  double bias_ridge = 3e-2;

  void validate() const {
    FV_CHECK(target_dim >= 8, "preprocess: target_dim must be >= 8, got ", target_dim);
    FV_CHECK(crop_dims[0] > 0 && crop_dims[1] > 0 && crop_dims[2] > 0,
             "preprocess: crop_dims must be positive");
    FV_CHECK(target_voxel > 0, "preprocess: target_voxel must be positive");
    FV_CHECK(pad_ct == -1000.0 && pad_mri == 0.0,
             "preprocess: pad constants are fixed at -1000 HU (CT) and 0 (MRI)");
    FV_CHECK(bias_poly_degree >= 1 && bias_poly_degree <= 4,
             "preprocess: bias_poly_degree must be in [1,4]");
    FV_CHECK(bias_iters >= 1, "preprocess: bias_iters must be >= 1");
    FV_CHECK(bias_ridge >= 0.0 && bias_ridge < 1.0,
             "preprocess: bias_ridge must be in [0,1)");
  }

  // Crop extents scale with the target dimension, rounded to even.
  static PreprocessConfig for_target(int64_t target_dim) {
    auto even = [&](double full) {
      return 2 * int64_t(std::llround(full * double(target_dim) / 256.0 / 2.0));
    };
    PreprocessConfig c;
    c.target_dim = target_dim;
    c.crop_dims = {even(328.0), even(256.0), even(328.0)};
    c.validate();
    return c;
  }
};

namespace detail {

// Affine index maps x_in = a*i + b per axis; nn=true rounds, else trilinear
// via nested lerp (which reproduces constants bit-exactly).
inline Volume<float> resample_grid(const Volume<float>& v, const std::array<int64_t, 3>& nd,
                                   const std::array<double, 3>& a, const std::array<double, 3>& b,
                                   bool nn, const std::array<double, 3>& new_spacing) {
  Volume<float> out(nd, new_spacing, v.modality);
  out.orientation = v.orientation;
  const int64_t nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];

  std::vector<int64_t> x0(nd[0]), x1(nd[0]);
  std::vector<double> tx(nd[0]);
  for (int64_t i = 0; i < nd[0]; ++i) {
    const double c = a[0] * double(i) + b[0];
    if (nn) {
      x0[i] = std::clamp<int64_t>(std::llround(c), 0, nx - 1);
    } else {
      const double f = std::floor(c);
      x0[i] = std::clamp<int64_t>(int64_t(f), 0, nx - 1);
      x1[i] = std::min<int64_t>(x0[i] + 1, nx - 1);
      tx[i] = std::clamp(c - double(x0[i]), 0.0, 1.0);
    }
  }
  auto lerp = [](double p, double q, double t) { return p + t * (q - p); };

  for (int64_t k = 0; k < nd[2]; ++k) {
    const double cz = a[2] * double(k) + b[2];
    int64_t z0, z1 = 0;
    double tz = 0.0;
    if (nn) {
      z0 = std::clamp<int64_t>(std::llround(cz), 0, nz - 1);
    } else {
      z0 = std::clamp<int64_t>(int64_t(std::floor(cz)), 0, nz - 1);
      z1 = std::min<int64_t>(z0 + 1, nz - 1);
      tz = std::clamp(cz - double(z0), 0.0, 1.0);
    }
    for (int64_t j = 0; j < nd[1]; ++j) {
      const double cy = a[1] * double(j) + b[1];
      int64_t y0, y1 = 0;
      double ty = 0.0;
      if (nn) {
        y0 = std::clamp<int64_t>(std::llround(cy), 0, ny - 1);
      } else {
        y0 = std::clamp<int64_t>(int64_t(std::floor(cy)), 0, ny - 1);
        y1 = std::min<int64_t>(y0 + 1, ny - 1);
        ty = std::clamp(cy - double(y0), 0.0, 1.0);
      }
      float* dst = out.data.data() + out.index(0, j, k);
      if (nn) {
        const float* src = v.data.data() + v.index(0, y0, z0);
        for (int64_t i = 0; i < nd[0]; ++i) dst[i] = src[x0[i]];
      } else {
        const float* s00 = v.data.data() + v.index(0, y0, z0);
        const float* s10 = v.data.data() + v.index(0, y1, z0);
        const float* s01 = v.data.data() + v.index(0, y0, z1);
        const float* s11 = v.data.data() + v.index(0, y1, z1);
        for (int64_t i = 0; i < nd[0]; ++i) {
          const int64_t p = x0[i], q = x1[i];
          const double t = tx[i];
          const double v00 = lerp(s00[p], s00[q], t);
          const double v10 = lerp(s10[p], s10[q], t);
          const double v01 = lerp(s01[p], s01[q], t);
          const double v11 = lerp(s11[p], s11[q], t);
          dst[i] = float(lerp(lerp(v00, v10, ty), lerp(v01, v11, ty), tz));
        }
      }
    }
  }
  return out;
}

}  // namespace detail

// Reindex storage so axis k runs along canonical axis k. Pure relabeling —
// voxel values are moved, never interpolated.
inline Volume<float> orient_standardize(const Volume<float>& v) {
  FV_CHECK(is_permutation3(v.orientation), "orient_standardize: invalid orientation tag");
  if (v.orientation == std::array<int32_t, 3>{0, 1, 2}) return v;
  const auto& o = v.orientation;
  std::array<int64_t, 3> nd;
  std::array<double, 3> sp;
  for (int k = 0; k < 3; ++k) {
    nd[o[k]] = v.dims[k];
    sp[o[k]] = v.spacing[k];
  }
  Volume<float> out(nd, sp, v.modality);
  int64_t c[3];
  for (int64_t i2 = 0; i2 < v.dims[2]; ++i2) {
    for (int64_t i1 = 0; i1 < v.dims[1]; ++i1) {
      for (int64_t i0 = 0; i0 < v.dims[0]; ++i0) {
        c[o[0]] = i0;
        c[o[1]] = i1;
        c[o[2]] = i2;
        out.at(c[0], c[1], c[2]) = v.at(i0, i1, i2);
      }
    }
  }
  return out;
}

// Resample to an isotropic grid; intensities trilinear, masks nearest.
// Equal spacing on every axis is an exact passthrough.
inline Volume<float> resample_to_isotropic(const Volume<float>& v, double target_voxel) {
  FV_CHECK(target_voxel > 0, "resample: target voxel size must be positive, got ", target_voxel);
  FV_CHECK(v.spacing[0] > 0 && v.spacing[1] > 0 && v.spacing[2] > 0,
           "resample: degenerate input spacing");
  if (v.spacing[0] == target_voxel && v.spacing[1] == target_voxel &&
      v.spacing[2] == target_voxel) {
    return v;
  }
  std::array<int64_t, 3> nd;
  std::array<double, 3> a, b;
  for (int k = 0; k < 3; ++k) {
    nd[k] = std::max<int64_t>(1, std::llround(double(v.dims[k]) * v.spacing[k] / target_voxel));
    const double r = target_voxel / v.spacing[k];
    a[k] = r;
    b[k] = 0.5 * r - 0.5;
  }
  return detail::resample_grid(v, nd, a, b, v.modality == Modality::Mask,
                               {target_voxel, target_voxel, target_voxel});
}

// Shape policy: any axis above target → centre-crop (bounded by crop_dims)
// then resize every axis to target; otherwise pad symmetrically with the
// modality constant. Target-sized input passes through bit-identically.
inline Volume<float> crop_resize_pad(const Volume<float>& v, const PreprocessConfig& cfg) {
  cfg.validate();
  const int64_t t = cfg.target_dim;
  const bool any_over = v.dims[0] > t || v.dims[1] > t || v.dims[2] > t;
  if (!any_over && v.dims[0] == t && v.dims[1] == t && v.dims[2] == t) return v;

  const double pad_value = v.modality == Modality::CT ? cfg.pad_ct : cfg.pad_mri;

  if (any_over) {
    // centre crop to crop_dims (clamped to actual extents)
    std::array<int64_t, 3> cd;
    std::array<int64_t, 3> start;
    for (int k = 0; k < 3; ++k) {
      cd[k] = std::min(v.dims[k], cfg.crop_dims[k]);
      start[k] = (v.dims[k] - cd[k]) / 2;
    }
    Volume<float> cropped(cd, v.spacing, v.modality);
    cropped.orientation = v.orientation;
    for (int64_t z = 0; z < cd[2]; ++z) {
      for (int64_t y = 0; y < cd[1]; ++y) {
        const float* src = v.data.data() + v.index(start[0], start[1] + y, start[2] + z);
        std::copy_n(src, cd[0], cropped.data.data() + cropped.index(0, y, z));
      }
    }
    std::array<double, 3> a, b, sp;
    for (int k = 0; k < 3; ++k) {
      const double r = double(cd[k]) / double(t);
      a[k] = r;
      b[k] = 0.5 * r - 0.5;
      sp[k] = v.spacing[k] * r;
    }
    return detail::resample_grid(cropped, {t, t, t}, a, b, v.modality == Modality::Mask, sp);
  }

  Volume<float> out({t, t, t}, v.spacing, v.modality);
  out.orientation = v.orientation;
  std::fill(out.data.begin(), out.data.end(), float(pad_value));
  std::array<int64_t, 3> off;
  for (int k = 0; k < 3; ++k) off[k] = (t - v.dims[k]) / 2;
  for (int64_t z = 0; z < v.dims[2]; ++z) {
    for (int64_t y = 0; y < v.dims[1]; ++y) {
      std::copy_n(v.data.data() + v.index(0, y, z), v.dims[0],
                  out.data.data() + out.index(off[0], off[1] + y, off[2] + z));
    }
  }
  return out;
}

// Exterior voxels take the modality constant; interior voxels are untouched.
inline Volume<float> apply_mask(const Volume<float>& v, const Volume<float>& mask) {
  FV_CHECK(v.dims == mask.dims, "apply_mask: volume/mask shape mismatch");
  const float fill = v.modality == Modality::CT ? -1000.0f : 0.0f;
  Volume<float> out = v;
  for (size_t i = 0; i < out.data.size(); ++i) {
    if (mask.data[i] == 0.0f) out.data[i] = fill;
  }
  return out;
}

// Affine rescale to [0,1]. A constant input maps to all-zeros and reports
// through *was_constant instead of throwing.
inline Volume<float> minmax_normalize(const Volume<float>& v, bool* was_constant = nullptr) {
  FV_CHECK(!v.data.empty(), "minmax_normalize: empty volume");
  float lo = v.data[0], hi = v.data[0];
  for (float x : v.data) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  Volume<float> out = v;
  if (was_constant) *was_constant = (hi == lo);
  if (hi == lo) {
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    return out;
  }
  const double span = double(hi) - double(lo);
  for (auto& x : out.data) x = float((double(x) - double(lo)) / span);
  return out;
}

struct BiasCorrection {
  Volume<float> corrected;
  Volume<float> field;  // positive, geometric mean 1 inside the mask
};

// Homomorphic surface fit: iteratively-retrimmed least squares of a
// separable polynomial (tensor-product per-axis degree bias_poly_degree) to
// the masked log-intensity. Each pass keeps voxels within 2 robust scales of
// the shortest-half residual mode (scale floored at 0.05 log-units) and
// refits on the survivors. Two choices here are load-bearing:
//  - The first passes fit only the degree-1 sub-basis. A full-degree surface
//    has enough capacity to follow the radial step between the dominant
//    tissue and its neighbours (a shell is a low-order polynomial in the
//    coordinates), and once a tissue is absorbed into the surface its
//    residuals are small forever, so no later trim can expel it. A trilinear
//    surface cannot represent the shell, so the plateau gap stays visible in
//    the residuals exactly when the trim needs it.
//  - The scale comes from the shortest half rather than median/MAD: MAD is
//    contaminated by the runner-up plateau and stalls with two tissues inside
//    the trim radius, while the densest-half window sits entirely inside the
//    majority plateau. Soft weighting fails the same way — percent-level
//    weight lets rim tissues bend the surface where the dominant plateau has
//    no samples.
// The fitted field is normalized to geometric mean 1 inside the mask, then
// divided out.
inline BiasCorrection bias_correct(const Volume<float>& mri, const Volume<float>& mask,
                                   const PreprocessConfig& cfg) {
  cfg.validate();
  FV_CHECK(mri.dims == mask.dims, "bias_correct: volume/mask shape mismatch");
  const int64_t nx = mri.dims[0], ny = mri.dims[1], nz = mri.dims[2];

  // Collect positive masked voxels on a decimated lattice.
  int64_t masked_total = 0;
  float vmax = 0.0f;
  for (size_t i = 0; i < mri.data.size(); ++i) {
    if (mask.data[i] != 0.0f) {
      FV_CHECK(mri.data[i] >= 0.0f, "bias_correct: negative MRI intensity");
      ++masked_total;
      vmax = std::max(vmax, mri.data[i]);
    }
  }
  FV_CHECK(masked_total > 0, "bias_correct: mask is empty");
  FV_CHECK(vmax > 0.0f, "bias_correct: masked intensities are all zero");

  int64_t stride = 1;
  while (masked_total / (stride * stride * stride) > 40000) ++stride;
  const float floor_v = 1e-6f * vmax;

  const int deg = int(cfg.bias_poly_degree);
  const int nb = deg + 1;           // per-axis basis size
  const int nterms = nb * nb * nb;  // separable tensor product

  std::vector<double> phi_rows;  // sample-major design matrix
  std::vector<double> logi;
  auto axis_basis = [&](double u, double* p) {
    p[0] = 1.0;
    for (int d = 1; d < nb; ++d) p[d] = p[d - 1] * u;
  };
  {
    std::vector<double> px(nb), py(nb), pz(nb);
    for (int64_t z = 0; z < nz; z += stride) {
      axis_basis((z + 0.5) / double(nz) - 0.5, pz.data());
      for (int64_t y = 0; y < ny; y += stride) {
        axis_basis((y + 0.5) / double(ny) - 0.5, py.data());
        for (int64_t x = 0; x < nx; x += stride) {
          const int64_t i = mri.index(x, y, z);
          if (mask.data[i] == 0.0f || mri.data[i] <= floor_v) continue;
          axis_basis((x + 0.5) / double(nx) - 0.5, px.data());
          for (int a = 0; a < nb; ++a) {
            for (int b = 0; b < nb; ++b) {
              const double pab = px[a] * py[b];
              for (int c = 0; c < nb; ++c) phi_rows.push_back(pab * pz[c]);
            }
          }
          logi.push_back(std::log(double(mri.data[i])));
        }
      }
    }
  }
  const int64_t m = int64_t(logi.size());
  FV_CHECK(m >= nterms, "bias_correct: too few usable voxels (", m, ") for ", nterms,
           " basis terms");

  using Mat = Eigen::MatrixXd;
  using Vec = Eigen::VectorXd;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Phi(
      phi_rows.data(), m, nterms);
  Eigen::Map<const Vec> target(logi.data(), m);

  // Degree-1 sub-basis columns (per-axis exponents all <= 1) for the warm-up
  // passes; the last pass is always full-degree so `coef` is always valid.
  std::vector<int> lin_cols;
  for (int a = 0; a < std::min(nb, 2); ++a)
    for (int b = 0; b < std::min(nb, 2); ++b)
      for (int c = 0; c < std::min(nb, 2); ++c) lin_cols.push_back((a * nb + b) * nb + c);
  const int nlin = int(lin_cols.size());
  Mat phi_lin(m, nlin);
  for (int j = 0; j < nlin; ++j) phi_lin.col(j) = Phi.col(lin_cols[size_t(j)]);
  const int64_t warmup = std::min<int64_t>(2, cfg.bias_iters - 1);

  Vec w = Vec::Ones(m), coef(nterms), resid(m);
  std::vector<double> scratch(static_cast<size_t>(m));
  for (int64_t it = 0; it < cfg.bias_iters; ++it) {
    const bool lin = it < warmup;
    if (lin) {
      Mat A = phi_lin.transpose() * w.asDiagonal() * phi_lin;
      A.diagonal().array() += 1e-9 * A.trace() / nlin;  // mild ridge
      Vec rhs = phi_lin.transpose() * (w.array() * target.array()).matrix();
      Vec c = A.ldlt().solve(rhs);
      resid = target - phi_lin * c;
    } else {
      Mat A = Phi.transpose() * w.asDiagonal() * Phi;
      const double tau = A.trace() / nterms;
      A.diagonal().array() += 1e-9 * tau;
      // Keep the constant term free; the mean is normalized out later anyway.
      A.diagonal().tail(nterms - 1).array() += cfg.bias_ridge * tau;
      Vec rhs = Phi.transpose() * (w.array() * target.array()).matrix();
      coef = A.ldlt().solve(rhs);
      resid = target - Phi * coef;
    }

    // Shortest half of the residuals: centre and width of the densest mode.
    std::copy_n(resid.data(), m, scratch.data());
    std::sort(scratch.begin(), scratch.end());
    const int64_t h = m / 2 + 1;
    int64_t best = 0;
    for (int64_t i = 1; i + h <= m; ++i) {
      if (scratch[size_t(i + h - 1)] - scratch[size_t(i)] <
          scratch[size_t(best + h - 1)] - scratch[size_t(best)]) {
        best = i;
      }
    }
    const double centre = 0.5 * (scratch[size_t(best)] + scratch[size_t(best + h - 1)]);
    const double width = scratch[size_t(best + h - 1)] - scratch[size_t(best)];
    const double sigma = std::max(0.7413 * width, 0.05);  // Gaussian-consistent
    // Trim radius covers the shortest half, so >= m/2 samples survive.
    for (int64_t i = 0; i < m; ++i) {
      w[i] = std::abs(resid[i] - centre) <= 2.0 * sigma ? 1.0 : 0.0;
    }
  }

  // Evaluate the fitted log-field everywhere by separable contraction.
  std::vector<double> logf(mri.data.size());
  {
    std::vector<double> px(nb), py(nb), pz(nb);
    std::vector<double> cz(static_cast<size_t>(nb * nb));
    std::vector<double> cy(static_cast<size_t>(nb));
    for (int64_t z = 0; z < nz; ++z) {
      axis_basis((z + 0.5) / double(nz) - 0.5, pz.data());
      for (int a = 0; a < nb; ++a) {
        for (int b = 0; b < nb; ++b) {
          double s = 0.0;
          for (int c = 0; c < nb; ++c) s += coef[(a * nb + b) * nb + c] * pz[c];
          cz[size_t(a * nb + b)] = s;
        }
      }
      for (int64_t y = 0; y < ny; ++y) {
        axis_basis((y + 0.5) / double(ny) - 0.5, py.data());
        for (int a = 0; a < nb; ++a) {
          double s = 0.0;
          for (int b = 0; b < nb; ++b) s += cz[size_t(a * nb + b)] * py[b];
          cy[size_t(a)] = s;
        }
        for (int64_t x = 0; x < nx; ++x) {
          axis_basis((x + 0.5) / double(nx) - 0.5, px.data());
          double s = 0.0;
          for (int a = 0; a < nb; ++a) s += cy[size_t(a)] * px[a];
          logf[size_t(mri.index(x, y, z))] = s;
        }
      }
    }
  }

  // Geometric mean 1 inside the mask preserves mean log-intensity.
  double mean_log = 0.0;
  for (size_t i = 0; i < logf.size(); ++i) {
    if (mask.data[i] != 0.0f) mean_log += logf[i];
  }
  mean_log /= double(masked_total);

  BiasCorrection out;
  out.field = Volume<float>(mri.dims, mri.spacing, Modality::MR);
  out.field.orientation = mri.orientation;
  out.corrected = out.field;
  for (size_t i = 0; i < logf.size(); ++i) {
    const double f = std::exp(logf[i] - mean_log);
    out.field.data[i] = float(f);
    out.corrected.data[i] = float(double(mri.data[i]) / f);
  }
  return out;
}

struct PreprocessedPatient {
  Volume<float> mri;   // [0,1]
  Volume<float> ct;    // HU
  Volume<float> mask;  // binary
  bool mri_was_constant = false;
};

// Full per-patient pipeline. Order: bias correction (MRI, native grid) →
// orientation → isotropic resample → crop/resize/pad → mask re-application →
// min-max normalization (MRI only).
inline PreprocessedPatient preprocess_patient(const Volume<float>& mri_in,
                                              const Volume<float>& ct_in,
                                              const Volume<float>& mask_in,
                                              const PreprocessConfig& cfg) {
  cfg.validate();
  Volume<float> mri = bias_correct(mri_in, mask_in, cfg).corrected;
  mri = orient_standardize(mri);
  Volume<float> ct = orient_standardize(ct_in);
  Volume<float> mask = orient_standardize(mask_in);

  mri = resample_to_isotropic(mri, cfg.target_voxel);
  ct = resample_to_isotropic(ct, cfg.target_voxel);
  mask = resample_to_isotropic(mask, cfg.target_voxel);

  mri = crop_resize_pad(mri, cfg);
  ct = crop_resize_pad(ct, cfg);
  mask = crop_resize_pad(mask, cfg);

  mri = apply_mask(mri, mask);
  ct = apply_mask(ct, mask);

  PreprocessedPatient out;
  out.mri = minmax_normalize(mri, &out.mri_was_constant);
  out.ct = std::move(ct);
  out.mask = std::move(mask);
  return out;
}

}  // namespace fedvox
