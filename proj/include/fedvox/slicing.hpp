#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fedvox/common.hpp"
#include "fedvox/rng.hpp"
#include "fedvox/tensor.hpp"
#include "fedvox/volume.hpp"

namespace fedvox {

// Planes fix one storage axis of a standardized volume: axial fixes z,
// coronal fixes y, sagittal fixes x. Within a slice the faster-varying
// storage axis is the tensor width.
enum class Plane : int32_t { kAxial = 0, kCoronal = 1, kSagittal = 2 };

inline const char* plane_name(Plane p) {
  switch (p) {
    case Plane::kAxial: return "axial";
    case Plane::kCoronal: return "coronal";
    case Plane::kSagittal: return "sagittal";
  }
  fail_config("invalid plane");
}

inline int fixed_axis(Plane p) { return p == Plane::kAxial ? 2 : p == Plane::kCoronal ? 1 : 0; }

struct SliceShape {
  int64_t count;   // slices along the fixed axis
  int64_t height;  // slower free axis
  int64_t width;   // faster free axis
};

inline SliceShape slice_shape(const std::array<int64_t, 3>& dims, Plane p) {
  switch (p) {
    case Plane::kAxial: return {dims[2], dims[1], dims[0]};
    case Plane::kCoronal: return {dims[1], dims[2], dims[0]};
    case Plane::kSagittal: return {dims[0], dims[2], dims[1]};
  }
  fail_config("invalid plane");
}

// Paired, co-registered 2D training example: one MRI slice and the CT slice
// at the same position, both [1, H, W].
struct SliceRecord {
  int64_t patient_id = 0;
  Plane plane = Plane::kAxial;
  int64_t slice_index = 0;
  Tensor<float> mri;
  Tensor<float> ct;
};

namespace detail {

inline std::array<int64_t, 3> voxel_of(Plane p, int64_t k, int64_t h, int64_t w) {
  switch (p) {
    case Plane::kAxial: return {w, h, k};
    case Plane::kCoronal: return {w, k, h};
    case Plane::kSagittal: return {k, w, h};
  }
  fail_config("invalid plane");
}

}  // namespace detail

inline std::vector<SliceRecord> extract_slices(const Volume<float>& mri, const Volume<float>& ct,
                                               int64_t patient_id, Plane plane) {
  FV_CHECK(mri.dims == ct.dims, "extract_slices: MRI/CT shape mismatch");
  FV_CHECK(mri.orientation == (std::array<int32_t, 3>{0, 1, 2}),
           "extract_slices: volume orientation is not standardized");
  const SliceShape ss = slice_shape(mri.dims, plane);
  std::vector<SliceRecord> out;
  out.reserve(size_t(ss.count));
  for (int64_t k = 0; k < ss.count; ++k) {
    SliceRecord r;
    r.patient_id = patient_id;
    r.plane = plane;
    r.slice_index = k;
    r.mri = Tensor<float>({1, ss.height, ss.width});
    r.ct = Tensor<float>({1, ss.height, ss.width});
    for (int64_t h = 0; h < ss.height; ++h) {
      for (int64_t w = 0; w < ss.width; ++w) {
        const auto v = detail::voxel_of(plane, k, h, w);
        const int64_t i = mri.index(v[0], v[1], v[2]);
        r.mri.data[size_t(h * ss.width + w)] = mri.data[size_t(i)];
        r.ct.data[size_t(h * ss.width + w)] = ct.data[size_t(i)];
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

// Stacks one modality of a complete, duplicate-free slice set back into a
// volume (unit spacing, standardized orientation).
inline Volume<float> reconstruct_volume(const std::vector<SliceRecord>& slices, Plane plane,
                                        Modality which) {
  FV_CHECK(!slices.empty(), "reconstruct_volume: no slices");
  FV_CHECK(which != Modality::Mask, "reconstruct_volume: expected MR or CT");
  const int64_t n = int64_t(slices.size());
  const auto& s0 = (which == Modality::MR ? slices[0].mri : slices[0].ct);
  FV_CHECK(s0.shape.size() == 3 && s0.shape[0] == 1, "reconstruct_volume: slices must be [1,H,W]");
  const int64_t H = s0.shape[1], W = s0.shape[2];

  std::array<int64_t, 3> dims{};
  switch (plane) {
    case Plane::kAxial: dims = {W, H, n}; break;
    case Plane::kCoronal: dims = {W, n, H}; break;
    case Plane::kSagittal: dims = {n, W, H}; break;
  }
  Volume<float> out(dims, {1.0, 1.0, 1.0}, which);

  std::vector<char> seen(size_t(n), 0);
  for (const SliceRecord& r : slices) {
    FV_CHECK(r.plane == plane, "reconstruct_volume: slice plane ", plane_name(r.plane),
             " does not match requested ", plane_name(plane));
    FV_CHECK(r.slice_index >= 0 && r.slice_index < n, "reconstruct_volume: slice index ",
             r.slice_index, " outside [0,", n, ")");
    FV_CHECK(!seen[size_t(r.slice_index)], "reconstruct_volume: duplicate slice index ",
             r.slice_index);
    seen[size_t(r.slice_index)] = 1;
    const Tensor<float>& img = (which == Modality::MR ? r.mri : r.ct);
    FV_CHECK(img.shape == s0.shape, "reconstruct_volume: inconsistent slice shape at index ",
             r.slice_index);
    for (int64_t h = 0; h < H; ++h) {
      for (int64_t w = 0; w < W; ++w) {
        const auto v = detail::voxel_of(plane, r.slice_index, h, w);
        out.at(v[0], v[1], v[2]) = img.data[size_t(h * W + w)];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training paradigms and epoch batching.

struct Paradigm {
  enum class Kind : int32_t { kRandomMulti2D = 0, kMulti2D = 1, kTwoDPlus = 2, kPatches2D = 3 };
  Kind kind = Kind::kRandomMulti2D;
  Plane plane = Plane::kAxial;   // kTwoDPlus: the single trained plane
  int64_t patch_size = 32;       // kPatches2D
  int64_t patches_per_slice = 4;  // kPatches2D

  static Paradigm random_multi_2d() { return {}; }
  static Paradigm multi_2d() { return {Kind::kMulti2D, Plane::kAxial, 32, 4}; }
  static Paradigm two_d_plus(Plane p) { return {Kind::kTwoDPlus, p, 32, 4}; }
  static Paradigm patches_2d(int64_t size, int64_t per_slice) {
    return {Kind::kPatches2D, Plane::kAxial, size, per_slice};
  }

  void validate() const {
    FV_CHECK(patch_size >= 1, "paradigm: patch_size must be >= 1, got ", patch_size);
    FV_CHECK(patches_per_slice >= 1, "paradigm: patches_per_slice must be >= 1, got ",
             patches_per_slice);
  }
};

inline const char* paradigm_name(Paradigm::Kind k) {
  switch (k) {
    case Paradigm::Kind::kRandomMulti2D: return "random_multi_2d";
    case Paradigm::Kind::kMulti2D: return "multi_2d";
    case Paradigm::Kind::kTwoDPlus: return "2d_plus";
    case Paradigm::Kind::kPatches2D: return "patches_2d";
  }
  fail_config("invalid paradigm");
}

// One training example within an epoch: a record, and for patch training the
// top-left (row, col) of the crop.
struct BatchEntry {
  int64_t record = 0;
  std::array<int64_t, 2> origin{0, 0};
};

// Deterministic epoch plan. Every record contributes exactly once (for
// patches: patches_per_slice times); the final short batch is kept.
inline std::vector<std::vector<BatchEntry>> make_epoch_batches(
    const std::vector<SliceRecord>& records, const Paradigm& paradigm, int64_t batch_size,
    uint64_t seed) {
  paradigm.validate();
  FV_CHECK(!records.empty(), "make_epoch_batches: no records");
  FV_CHECK(batch_size >= 1, "make_epoch_batches: batch_size must be >= 1, got ", batch_size);

  std::vector<BatchEntry> entries;
  Rng shuffle_rng(hash_u64(seed, stream::kShuffle));
  switch (paradigm.kind) {
    case Paradigm::Kind::kRandomMulti2D: {
      entries.resize(records.size());
      for (size_t i = 0; i < records.size(); ++i) entries[i].record = int64_t(i);
      shuffle_rng.shuffle(entries);
      break;
    }
    case Paradigm::Kind::kMulti2D: {
      // Plane blocks in fixed order; the shuffle never crosses planes.
      for (Plane p : {Plane::kAxial, Plane::kCoronal, Plane::kSagittal}) {
        std::vector<BatchEntry> block;
        for (size_t i = 0; i < records.size(); ++i)
          if (records[i].plane == p) block.push_back({int64_t(i), {0, 0}});
        shuffle_rng.shuffle(block);
        entries.insert(entries.end(), block.begin(), block.end());
      }
      break;
    }
    case Paradigm::Kind::kTwoDPlus: {
      for (size_t i = 0; i < records.size(); ++i)
        if (records[i].plane == paradigm.plane) entries.push_back({int64_t(i), {0, 0}});
      FV_CHECK(!entries.empty(), "make_epoch_batches: no ", plane_name(paradigm.plane),
               " slices for single-plane training");
      shuffle_rng.shuffle(entries);
      break;
    }
    case Paradigm::Kind::kPatches2D: {
      Rng origin_rng(hash_u64(seed, stream::kPatch));
      for (size_t i = 0; i < records.size(); ++i) {
        const int64_t H = records[i].mri.shape[1], W = records[i].mri.shape[2];
        FV_CHECK(paradigm.patch_size <= H && paradigm.patch_size <= W,
                 "make_epoch_batches: patch_size ", paradigm.patch_size,
                 " exceeds slice extent ", H, "x", W);
        for (int64_t d = 0; d < paradigm.patches_per_slice; ++d) {
          const int64_t oy = int64_t(origin_rng.below(uint64_t(H - paradigm.patch_size + 1)));
          const int64_t ox = int64_t(origin_rng.below(uint64_t(W - paradigm.patch_size + 1)));
          entries.push_back({int64_t(i), {oy, ox}});
        }
      }
      shuffle_rng.shuffle(entries);
      break;
    }
  }

  std::vector<std::vector<BatchEntry>> batches;
  for (size_t i = 0; i < entries.size(); i += size_t(batch_size)) {
    const size_t e = std::min(entries.size(), i + size_t(batch_size));
    batches.emplace_back(entries.begin() + int64_t(i), entries.begin() + int64_t(e));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Paired augmentation.

enum class AugmentPipeline : int32_t { kNone = 0, kMinimal = 1, kExtended = 2 };

inline const char* augment_name(AugmentPipeline p) {
  switch (p) {
    case AugmentPipeline::kNone: return "none";
    case AugmentPipeline::kMinimal: return "minimal";
    case AugmentPipeline::kExtended: return "extended";
  }
  fail_config("invalid augmentation pipeline");
}

namespace detail {

// Inverse-mapped affine warp of a [1,H,W] slice about its centre: mirror the
// width axis, rotate, then shift by (tx, ty) pixels. One bilinear resampling
// pass; samples falling outside the input read `pad`. Zero angle and shift
// without flip reproduce the input bit-exactly.
inline Tensor<float> warp_slice(const Tensor<float>& img, bool flip, double angle_deg, double tx,
                                double ty, float pad) {
  FV_CHECK(img.shape.size() == 3 && img.shape[0] == 1, "warp_slice: expected [1,H,W]");
  const int64_t H = img.shape[1], W = img.shape[2];
  const double cy = 0.5 * double(H - 1), cx = 0.5 * double(W - 1);
  const double rad = angle_deg * (3.14159265358979323846 / 180.0);
  const double c = std::cos(rad), s = std::sin(rad);

  Tensor<float> out({1, H, W});
  auto sample = [&](double yi, double xi) -> double {
    const int64_t y0 = int64_t(std::floor(yi)), x0 = int64_t(std::floor(xi));
    const double fy = yi - double(y0), fx = xi - double(x0);
    auto pix = [&](int64_t y, int64_t x) -> double {
      if (y < 0 || y >= H || x < 0 || x >= W) return double(pad);
      return double(img.data[size_t(y * W + x)]);
    };
    const double top = pix(y0, x0) + fx * (pix(y0, x0 + 1) - pix(y0, x0));
    const double bot = pix(y0 + 1, x0) + fx * (pix(y0 + 1, x0 + 1) - pix(y0 + 1, x0));
    return top + fy * (bot - top);
  };
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x) {
      // Undo the forward chain flip -> rotate -> translate.
      const double u = double(x) - cx - tx;
      const double v = double(y) - cy - ty;
      const double ur = c * u + s * v;
      const double vr = -s * u + c * v;
      const double xi = flip ? double(W - 1) - (ur + cx) : ur + cx;
      out.data[size_t(y * W + x)] = float(sample(vr + cy, xi));
    }
  }
  return out;
}

}  // namespace detail

// Applies one seeded random geometric transform to both slices of a pair.
// Minimal: mirror with probability 1/2 plus an in-plane rotation from
// {-10, 0, +10} degrees. Extended: mirror, a continuous rotation in
// [-10, 10] degrees, and a translation of up to 5% of each extent.
// Exposed pixels read 0 for MRI and `pad_ct` for CT (the lowest value of the
// CT intensity scale in whatever space the slices are in).
inline SliceRecord augment(const SliceRecord& rec, AugmentPipeline pipeline, uint64_t seed,
                           float pad_mri = 0.0f, float pad_ct = 0.0f) {
  if (pipeline == AugmentPipeline::kNone) return rec;
  FV_CHECK(rec.mri.shape == rec.ct.shape, "augment: MRI/CT slice shape mismatch");
  Rng rng(hash_u64(seed, stream::kAugment));
  const bool flip = rng.uniform() < 0.5;
  double angle = 0.0, tx = 0.0, ty = 0.0;
  if (pipeline == AugmentPipeline::kMinimal) {
    constexpr double kAngles[3] = {-10.0, 0.0, 10.0};
    angle = kAngles[rng.below(3)];
  } else {
    angle = rng.uniform(-10.0, 10.0);
    const int64_t H = rec.mri.shape[1], W = rec.mri.shape[2];
    tx = rng.uniform(-0.05, 0.05) * double(W);
    ty = rng.uniform(-0.05, 0.05) * double(H);
  }
  SliceRecord out;
  out.patient_id = rec.patient_id;
  out.plane = rec.plane;
  out.slice_index = rec.slice_index;
  out.mri = detail::warp_slice(rec.mri, flip, angle, tx, ty, pad_mri);
  out.ct = detail::warp_slice(rec.ct, flip, angle, tx, ty, pad_ct);
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction combiners.

// Per-voxel median of the three plane-wise reconstructions.
inline Volume<float> median_vote(const Volume<float>& ax, const Volume<float>& cor,
                                 const Volume<float>& sag) {
  FV_CHECK(ax.dims == cor.dims && ax.dims == sag.dims, "median_vote: shape mismatch");
  Volume<float> out(ax.dims, ax.spacing, Modality::CT);
  out.orientation = ax.orientation;
  for (size_t i = 0; i < out.data.size(); ++i) {
    const float a = ax.data[i], b = cor.data[i], c = sag.data[i];
    out.data[i] = std::max(std::min(a, b), std::min(std::max(a, b), c));
  }
  return out;
}

// Per-pixel arithmetic mean of overlapping [1,h,w] patches placed at
// (row, col) origins on an H x W canvas. Every pixel must be covered.
inline Tensor<float> overlap_average(const std::vector<Tensor<float>>& patches,
                                     const std::vector<std::array<int64_t, 2>>& origins,
                                     int64_t H, int64_t W) {
  FV_CHECK(patches.size() == origins.size(), "overlap_average: ", patches.size(), " patches vs ",
           origins.size(), " origins");
  FV_CHECK(H >= 1 && W >= 1, "overlap_average: empty canvas");
  std::vector<double> sum(size_t(H * W), 0.0);
  std::vector<int32_t> hits(size_t(H * W), 0);
  for (size_t p = 0; p < patches.size(); ++p) {
    const Tensor<float>& t = patches[p];
    FV_CHECK(t.shape.size() == 3 && t.shape[0] == 1, "overlap_average: patches must be [1,h,w]");
    const int64_t h = t.shape[1], w = t.shape[2];
    const int64_t oy = origins[p][0], ox = origins[p][1];
    FV_CHECK(oy >= 0 && ox >= 0 && oy + h <= H && ox + w <= W, "overlap_average: patch ", p,
             " at (", oy, ",", ox, ") of size ", h, "x", w, " leaves the ", H, "x", W, " canvas");
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        sum[size_t((oy + y) * W + ox + x)] += double(t.data[size_t(y * w + x)]);
        hits[size_t((oy + y) * W + ox + x)] += 1;
      }
    }
  }
  Tensor<float> out({1, H, W});
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x) {
      const size_t i = size_t(y * W + x);
      FV_CHECK(hits[i] > 0, "overlap_average: pixel (y=", y, ", x=", x, ") is uncovered");
      out.data[i] = float(sum[i] / double(hits[i]));
    }
  }
  return out;
}

// Regular tiling origins covering a full H x W slice: steps of `stride` with
// the last patch snapped flush to the far edge.
inline std::vector<std::array<int64_t, 2>> patch_grid(int64_t H, int64_t W, int64_t patch,
                                                      int64_t stride) {
  FV_CHECK(patch >= 1 && patch <= H && patch <= W, "patch_grid: patch ", patch,
           " does not fit in ", H, "x", W);
  FV_CHECK(stride >= 1, "patch_grid: stride must be >= 1, got ", stride);
  auto steps = [&](int64_t extent) {
    std::vector<int64_t> v;
    for (int64_t o = 0;; o += stride) {
      if (o + patch >= extent) {
        v.push_back(extent - patch);
        break;
      }
      v.push_back(o);
    }
    return v;
  };
  std::vector<std::array<int64_t, 2>> out;
  for (int64_t oy : steps(H))
    for (int64_t ox : steps(W)) out.push_back({oy, ox});
  return out;
}

}  // namespace fedvox
