#pragma once

// Procedural paired MRI/CT head phantoms. Anatomy is a fixed nesting of
// axis-aligned ellipsoids (scalp > skull shell > brain, with ventricles and
// an air sinus carved inside) jittered per patient. The CT holds integer HU
// per tissue; the MRI is a per-tissue intensity mapping times a smooth
// multiplicative bias field plus Gaussian noise. Degradations applied in
// order: CT slice-thickness averaging, exterior reset, inferior FOV cut,
// storage-axis permutation.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fedvox/rng.hpp"
#include "fedvox/volume.hpp"

namespace fedvox {

struct CentreSpec {
  std::string centre_id;
  int64_t n_patients = 5;
  int64_t grid_dim = 64;
  double voxel_size = 1.0;                  // mm, isotropic at generation
  double noise_sigma = 0.0;                 // fraction of the 1000-unit MRI scale
  double bias_amplitude = 0.0;              // RMS of the log bias field
  double bias_smoothness = 1.0;             // max cycles across the volume
  double fov_cut_fraction = 0.0;            // inferior slices removed
  int64_t ct_slice_thickness_factor = 1;    // partial-volume averaging blocks
  double contrast_gain = 1.0;               // MRI tissue-mapping perturbation
  double contrast_offset = 0.0;
  std::array<int32_t, 3> axis_perm{0, 1, 2};  // storage-axis heterogeneity

  void validate() const {
    FV_CHECK(!centre_id.empty(), "centre spec: centre_id must be non-empty");
    FV_CHECK(n_patients >= 5, "centre spec '", centre_id,
             "': n_patients must be >= 5 (2 val + 2 test + training), got ", n_patients);
    FV_CHECK(grid_dim >= 16, "centre spec '", centre_id, "': grid_dim must be >= 16");
    FV_CHECK(voxel_size > 0, "centre spec '", centre_id, "': voxel_size must be positive");
    FV_CHECK(noise_sigma >= 0, "centre spec '", centre_id, "': noise_sigma must be >= 0");
    FV_CHECK(bias_amplitude >= 0, "centre spec '", centre_id, "': bias_amplitude must be >= 0");
    FV_CHECK(bias_smoothness > 0, "centre spec '", centre_id,
             "': bias_smoothness must be positive");
    FV_CHECK(fov_cut_fraction >= 0 && fov_cut_fraction < 1, "centre spec '", centre_id,
             "': fov_cut_fraction must lie in [0,1)");
    FV_CHECK(ct_slice_thickness_factor >= 1, "centre spec '", centre_id,
             "': ct_slice_thickness_factor must be >= 1");
    FV_CHECK(contrast_gain > 0, "centre spec '", centre_id, "': contrast_gain must be positive");
    FV_CHECK(contrast_offset >= 0, "centre spec '", centre_id,
             "': contrast_offset must be >= 0");
    FV_CHECK(is_permutation3(axis_perm), "centre spec '", centre_id,
             "': axis_perm must be a permutation of {0,1,2}");
  }

  // Presets mimic four heterogeneous acquisition sites plus an unseen one:
  // A = inferior FOV cut, B = thick CT slices + shifted MRI contrast +
  // permuted storage axes, C = strong bias field at finer voxels, D = mild
  // baseline at coarser voxels, E = unseen intermediate mix.
  static CentreSpec preset(char name) {
    CentreSpec s;
    s.centre_id = std::string(1, name);
    switch (name) {
      case 'A':
        s.fov_cut_fraction = 0.22;
        s.noise_sigma = 0.01;
        s.bias_amplitude = 0.05;
        s.bias_smoothness = 1.0;
        break;
      case 'B':
        s.ct_slice_thickness_factor = 3;
        s.contrast_gain = 0.85;
        s.contrast_offset = 0.05;
        s.noise_sigma = 0.02;
        s.bias_amplitude = 0.08;
        s.bias_smoothness = 1.0;
        s.fov_cut_fraction = 0.05;
        s.axis_perm = {2, 0, 1};
        break;
      case 'C':
        s.bias_amplitude = 0.35;
        s.bias_smoothness = 1.4;
        s.noise_sigma = 0.03;
        s.fov_cut_fraction = 0.08;
        s.voxel_size = 0.8;
        s.contrast_gain = 1.05;
        break;
      case 'D':
        s.noise_sigma = 0.01;
        s.bias_amplitude = 0.04;
        s.bias_smoothness = 0.8;
        s.fov_cut_fraction = 0.03;
        s.voxel_size = 1.1;
        s.contrast_offset = 0.01;
        break;
      case 'E':
        s.noise_sigma = 0.015;
        s.bias_amplitude = 0.12;
        s.bias_smoothness = 1.1;
        s.ct_slice_thickness_factor = 2;
        s.contrast_gain = 0.95;
        s.contrast_offset = 0.02;
        s.fov_cut_fraction = 0.10;
        break;
      default:
        fail_config(cat("unknown centre preset '", name, "' (valid: A..E)"));
    }
    s.validate();
    return s;
  }
};

struct PhantomPair {
  Volume<float> mri;        // nonnegative intensities, 0 outside the head
  Volume<float> ct;         // HU in [-1000, 3000], -1000 outside the head
  Volume<float> mask;       // 1 inside the head (air cavities included), else 0
  Volume<float> true_bias;  // the injected multiplicative field
};

namespace detail {

enum Tissue : uint8_t { kBackground = 0, kScalp, kSkull, kBrain, kCSF, kSinus };

struct Ellipsoid {
  double cx, cy, cz, ax, ay, az;
  bool contains(double x, double y, double z) const {
    const double u = (x - cx) / ax, v = (y - cy) / ay, w = (z - cz) / az;
    return u * u + v * v + w * w <= 1.0;
  }
  Ellipsoid scaled(double f) const { return {cx, cy, cz, ax * f, ay * f, az * f}; }
};

}  // namespace detail

// Deterministic in (seed, spec); specs differing only in degradation knobs
// (noise, bias, thickness, FOV, contrast) share all anatomy draws.
inline PhantomPair generate_phantom(uint64_t seed, const CentreSpec& spec) {
  spec.validate();
  using detail::Ellipsoid;
  using detail::Tissue;

  const int64_t n = spec.grid_dim;
  const double half = 0.5 * double(n);
  Rng rng(hash_u64(seed, stream::kPatient));

  // --- anatomy draws (order is part of the format) ---
  const double jx = rng.uniform(-0.02, 0.02) * n;
  const double jy = rng.uniform(-0.02, 0.02) * n;
  const double jz = rng.uniform(-0.02, 0.02) * n;
  Ellipsoid head{half + jx, half + jy, half + jz, 0.0, 0.0, 0.0};
  head.ax = 0.40 * n * (1.0 + rng.uniform(-0.08, 0.08));
  head.ay = 0.38 * n * (1.0 + rng.uniform(-0.08, 0.08));
  head.az = 0.44 * n * (1.0 + rng.uniform(-0.08, 0.08));
  // Thin shell keeps brain the majority tissue (anchors robust bias fits).
  const Ellipsoid skull_outer = head.scaled(rng.uniform(0.90, 0.93));
  const Ellipsoid skull_inner = head.scaled(rng.uniform(0.82, 0.86));

  const double voff = 0.07 * n * (1.0 + rng.uniform(-0.1, 0.1));
  Ellipsoid vent_l{head.cx - voff, head.cy, head.cz + 0.04 * n,
                   0.055 * n * (1.0 + rng.uniform(-0.1, 0.1)),
                   0.10 * n * (1.0 + rng.uniform(-0.1, 0.1)),
                   0.075 * n * (1.0 + rng.uniform(-0.1, 0.1))};
  Ellipsoid vent_r = vent_l;
  vent_r.cx = head.cx + voff;
  Ellipsoid sinus{head.cx, head.cy - 0.18 * n * (1.0 + rng.uniform(-0.1, 0.1)),
                  head.cz - 0.20 * n * (1.0 + rng.uniform(-0.1, 0.1)),
                  0.07 * n * (1.0 + rng.uniform(-0.15, 0.15)),
                  0.055 * n * (1.0 + rng.uniform(-0.15, 0.15)),
                  0.055 * n * (1.0 + rng.uniform(-0.15, 0.15))};

  const double skull_hu = 950.0 + double(rng.below(101));  // integer HU
  double tissue_jitter[6];
  tissue_jitter[Tissue::kBackground] = 0.0;
  for (int t = Tissue::kScalp; t <= Tissue::kSinus; ++t) {
    tissue_jitter[t] = 1.0 + rng.uniform(-0.03, 0.03);
  }

  // --- tissue labels at voxel centres ---
  std::vector<uint8_t> label(static_cast<size_t>(n * n * n), Tissue::kBackground);
  {
    size_t i = 0;
    for (int64_t z = 0; z < n; ++z) {
      for (int64_t y = 0; y < n; ++y) {
        for (int64_t x = 0; x < n; ++x, ++i) {
          const double px = x + 0.5, py = y + 0.5, pz = z + 0.5;
          if (!head.contains(px, py, pz)) continue;
          uint8_t t = Tissue::kScalp;
          if (skull_outer.contains(px, py, pz)) {
            t = Tissue::kSkull;
            if (skull_inner.contains(px, py, pz)) {
              t = Tissue::kBrain;
              if (vent_l.contains(px, py, pz) || vent_r.contains(px, py, pz)) t = Tissue::kCSF;
            }
          }
          if (sinus.contains(px, py, pz) && skull_outer.contains(px, py, pz)) t = Tissue::kSinus;
          label[i] = t;
        }
      }
    }
  }

  // --- per-tissue values: CT integer HU; MRI base intensities in [0,1] ---
  const double ct_hu[6] = {-1000.0, 45.0, skull_hu, 30.0, 10.0, -1000.0};
  const double mri_v[6] = {0.0, 0.80, 0.12, 0.60, 0.25, 0.05};

  const std::array<int64_t, 3> d{n, n, n};
  const std::array<double, 3> sp{spec.voxel_size, spec.voxel_size, spec.voxel_size};
  Volume<float> mri(d, sp, Modality::MR), ct(d, sp, Modality::CT),
      mask(d, sp, Modality::Mask), bias(d, sp, Modality::MR);

  // --- injected bias field: exp of a band-limited cosine sum, RMS-scaled ---
  Rng brng(hash_u64(seed, stream::kBias));
  constexpr int kTerms = 4;
  double fx[kTerms], fy[kTerms], fz[kTerms], ph[kTerms], cf[kTerms];
  for (int t = 0; t < kTerms; ++t) {
    double dx = brng.normal(), dy = brng.normal(), dz = brng.normal();
    const double norm = std::sqrt(dx * dx + dy * dy + dz * dz) + 1e-12;
    const double freq = brng.uniform(0.4, std::max(0.5, spec.bias_smoothness));
    fx[t] = dx / norm * freq;
    fy[t] = dy / norm * freq;
    fz[t] = dz / norm * freq;
    ph[t] = brng.uniform(0.0, 2.0 * M_PI);
    cf[t] = (brng.uniform() < 0.5 ? -1.0 : 1.0) * brng.uniform(0.5, 1.0);
  }
  std::vector<double> logf(static_cast<size_t>(n * n * n), 0.0);
  double sq_sum = 0.0;
  {
    size_t i = 0;
    for (int64_t z = 0; z < n; ++z) {
      for (int64_t y = 0; y < n; ++y) {
        for (int64_t x = 0; x < n; ++x, ++i) {
          const double ux = (x + 0.5) / n, uy = (y + 0.5) / n, uz = (z + 0.5) / n;
          double L = 0.0;
          for (int t = 0; t < kTerms; ++t) {
            L += cf[t] * std::cos(2.0 * M_PI * (fx[t] * ux + fy[t] * uy + fz[t] * uz) + ph[t]);
          }
          logf[i] = L;
          sq_sum += L * L;
        }
      }
    }
  }
  const double rms = std::sqrt(sq_sum / double(n * n * n));
  const double scale = rms > 0 ? spec.bias_amplitude / rms : 0.0;
  for (size_t i = 0; i < logf.size(); ++i) {
    bias.data[i] = float(std::exp(scale * logf[i]));
  }

  // --- compose volumes; contrast perturbation folds into the mapping so
  // mri / true_bias recovers this centre's clean mapping up to noise ---
  Rng nrng(hash_u64(seed, stream::kNoise));
  for (size_t i = 0; i < label.size(); ++i) {
    const uint8_t t = label[i];
    const double noise = nrng.normal();  // consumed for every voxel
    if (t == Tissue::kBackground) {
      mri.data[i] = 0.0f;
      ct.data[i] = -1000.0f;
      mask.data[i] = 0.0f;
      continue;
    }
    mask.data[i] = 1.0f;
    ct.data[i] = float(ct_hu[t]);
    const double clean = 1000.0 * (spec.contrast_gain * mri_v[t] * tissue_jitter[t] +
                                   spec.contrast_offset);
    double v = clean * double(bias.data[i]) + 1000.0 * spec.noise_sigma * noise;
    mri.data[i] = float(std::max(0.0, v));
  }

  // --- CT slice-thickness averaging (z blocks), then exterior reset ---
  if (spec.ct_slice_thickness_factor > 1) {
    const int64_t f = spec.ct_slice_thickness_factor;
    std::vector<double> col(static_cast<size_t>(n));
    for (int64_t y = 0; y < n; ++y) {
      for (int64_t x = 0; x < n; ++x) {
        for (int64_t z = 0; z < n; ++z) col[z] = ct.at(x, y, z);
        for (int64_t z0 = 0; z0 < n; z0 += f) {
          const int64_t z1 = std::min(z0 + f, n);
          double s = 0.0;
          for (int64_t z = z0; z < z1; ++z) s += col[z];
          const float m = float(s / double(z1 - z0));
          for (int64_t z = z0; z < z1; ++z) ct.at(x, y, z) = m;
        }
      }
    }
    for (size_t i = 0; i < label.size(); ++i) {
      if (label[i] == Tissue::kBackground) ct.data[i] = -1000.0f;
    }
  }

  // --- inferior FOV cut (z = 0 side), all four volumes together ---
  const int64_t cut = int64_t(std::floor(spec.fov_cut_fraction * double(n)));
  if (cut > 0) {
    const int64_t nz = n - cut;
    auto chop = [&](Volume<float>& v) {
      AlignedVec<float> out(static_cast<size_t>(n * n * nz));
      std::copy_n(v.data.data() + size_t(cut) * n * n, out.size(), out.data());
      v.data = std::move(out);
      v.dims[2] = nz;
    };
    chop(mri);
    chop(ct);
    chop(mask);
    chop(bias);
  }

  // --- storage-axis permutation ---
  if (spec.axis_perm != std::array<int32_t, 3>{0, 1, 2}) {
    auto permute = [&](const Volume<float>& v) {
      Volume<float> out({v.dims[spec.axis_perm[0]], v.dims[spec.axis_perm[1]],
                         v.dims[spec.axis_perm[2]]},
                        {v.spacing[spec.axis_perm[0]], v.spacing[spec.axis_perm[1]],
                         v.spacing[spec.axis_perm[2]]},
                        v.modality);
      out.orientation = spec.axis_perm;
      int64_t c[3];
      for (int64_t i2 = 0; i2 < out.dims[2]; ++i2) {
        for (int64_t i1 = 0; i1 < out.dims[1]; ++i1) {
          for (int64_t i0 = 0; i0 < out.dims[0]; ++i0) {
            c[spec.axis_perm[0]] = i0;
            c[spec.axis_perm[1]] = i1;
            c[spec.axis_perm[2]] = i2;
            out.at(i0, i1, i2) = v.at(c[0], c[1], c[2]);
          }
        }
      }
      return out;
    };
    mri = permute(mri);
    ct = permute(ct);
    mask = permute(mask);
    bias = permute(bias);
  }

  return PhantomPair{std::move(mri), std::move(ct), std::move(mask), std::move(bias)};
}

struct CentreCohort {
  CentreSpec spec;
  std::vector<PhantomPair> patients;
  std::vector<int64_t> train_idx, val_idx, test_idx;
};

// Validation takes patients {0,1}, test {2,3}, training the rest.
inline CentreCohort generate_centre(const CentreSpec& spec, uint64_t master_seed) {
  spec.validate();
  CentreCohort cohort;
  cohort.spec = spec;
  cohort.patients.reserve(static_cast<size_t>(spec.n_patients));
  for (int64_t i = 0; i < spec.n_patients; ++i) {
    const uint64_t seed =
        hash_u64(master_seed, stream::kPatient, fnv1a64(spec.centre_id), uint64_t(i));
    cohort.patients.push_back(generate_phantom(seed, spec));
  }
  cohort.val_idx = {0, 1};
  cohort.test_idx = {2, 3};
  for (int64_t i = 4; i < spec.n_patients; ++i) cohort.train_idx.push_back(i);
  return cohort;
}

}  // namespace fedvox
