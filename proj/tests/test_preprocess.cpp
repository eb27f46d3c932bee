#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedvox/phantom.hpp"
#include "fedvox/preprocess.hpp"

using namespace fedvox;

namespace {

double masked_mae(const Volume<float>& a, const Volume<float>& b, const Volume<float>& mask) {
  double s = 0.0;
  int64_t n = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    if (mask.data[i] != 0.0f) {
      s += std::abs(double(a.data[i]) - double(b.data[i]));
      ++n;
    }
  }
  return s / double(n);
}

CentreSpec base_spec() {
  CentreSpec s;
  s.centre_id = "T";
  return s;
}

}  // namespace

TEST_CASE("bias field of an unbiased phantom is unity within 1e-3") {
  CentreSpec s = base_spec();  // bias_amplitude = 0, noise = 0
  PhantomPair p = generate_phantom(17, s);
  BiasCorrection bc = bias_correct(p.mri, p.mask, PreprocessConfig{});
  for (int64_t i = 0; i < p.mri.numel(); ++i) {
    if (p.mask.data[i] == 0.0f) continue;
    CHECK(std::abs(double(bc.field.data[i]) - 1.0) < 1e-3);
    CHECK(std::abs(double(bc.corrected.data[i]) - double(p.mri.data[i])) <=
          1e-3 * std::max(1.0, double(p.mri.data[i])));
  }
}

TEST_CASE("correction strictly reduces masked error on 20 seeded biased phantoms") {
  CentreSpec clean = base_spec();
  CentreSpec biased = clean;
  biased.bias_amplitude = 0.15;
  biased.bias_smoothness = 1.2;
  biased.noise_sigma = 0.01;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    PhantomPair pc = generate_phantom(seed, clean);
    PhantomPair pb = generate_phantom(seed, biased);
    BiasCorrection bc = bias_correct(pb.mri, pb.mask, PreprocessConfig{});
    const double before = masked_mae(pb.mri, pc.mri, pc.mask);
    const double after = masked_mae(bc.corrected, pc.mri, pc.mask);
    CAPTURE(seed);
    CHECK(after < before);
  }
}

TEST_CASE("repeated correction passes contract") {
  // The ridge makes the corrector a damped estimator rather than a projector,
  // so a second pass removes part of the shrinkage remainder. Stability means
  // successive passes shrink geometrically and stay small, not vanish.
  CentreSpec s = base_spec();
  s.bias_amplitude = 0.2;
  s.noise_sigma = 0.01;
  PhantomPair p = generate_phantom(8, s);
  BiasCorrection c1 = bias_correct(p.mri, p.mask, PreprocessConfig{});
  BiasCorrection c2 = bias_correct(c1.corrected, p.mask, PreprocessConfig{});
  BiasCorrection c3 = bias_correct(c2.corrected, p.mask, PreprocessConfig{});
  auto l2 = [](const Volume<float>& a, const Volume<float>& b) {
    double s2 = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
      const double d = double(a.data[i]) - double(b.data[i]);
      s2 += d * d;
    }
    return std::sqrt(s2);
  };
  double den = 0.0;
  for (float v : c1.corrected.data) den += double(v) * double(v);
  const double step1 = l2(c2.corrected, c1.corrected);
  const double step2 = l2(c3.corrected, c2.corrected);
  CHECK(step1 < 0.05 * std::sqrt(den));  // bounded second-pass perturbation
  CHECK(step2 < step1);                  // no oscillation or divergence
}

TEST_CASE("bias correction rejects degenerate inputs") {
  CentreSpec s = base_spec();
  PhantomPair p = generate_phantom(1, s);
  Volume<float> empty_mask = p.mask;
  std::fill(empty_mask.data.begin(), empty_mask.data.end(), 0.0f);
  CHECK_THROWS_AS(bias_correct(p.mri, empty_mask, PreprocessConfig{}), std::invalid_argument);

  Volume<float> neg = p.mri;
  neg.data[neg.index(32, 32, 32)] = -1.0f;
  Volume<float> full_mask = p.mask;
  std::fill(full_mask.data.begin(), full_mask.data.end(), 1.0f);
  CHECK_THROWS_AS(bias_correct(neg, full_mask, PreprocessConfig{}), std::invalid_argument);
}

TEST_CASE("orientation standardization inverts the generator's permutation exactly") {
  CentreSpec id = base_spec();
  CentreSpec pm = id;
  pm.axis_perm = {2, 0, 1};
  PhantomPair a = generate_phantom(23, id);
  PhantomPair b = generate_phantom(23, pm);
  Volume<float> fixed = orient_standardize(b.mri);
  CHECK(fixed.orientation == std::array<int32_t, 3>{0, 1, 2});
  CHECK(bit_equal(fixed, a.mri));
  // already-standard input is an identity
  CHECK(bit_equal(orient_standardize(a.mri), a.mri));
}

TEST_CASE("isotropic resampling") {
  SUBCASE("equal spacing is a bit-identical passthrough") {
    Volume<float> v({8, 8, 8}, {1.0, 1.0, 1.0}, Modality::MR);
    Rng rng(2);
    for (auto& x : v.data) x = float(rng.uniform());
    CHECK(bit_equal(resample_to_isotropic(v, 1.0), v));
  }
  SUBCASE("2mm to 1mm doubles extents") {
    Volume<float> v({10, 12, 14}, {2.0, 2.0, 2.0}, Modality::MR);
    Volume<float> r = resample_to_isotropic(v, 1.0);
    CHECK(r.dims == std::array<int64_t, 3>{20, 24, 28});
    CHECK(r.spacing == std::array<double, 3>{1.0, 1.0, 1.0});
  }
  SUBCASE("constant volumes stay exactly constant") {
    Volume<float> v({9, 9, 9}, {0.8, 0.8, 0.8}, Modality::CT);
    std::fill(v.data.begin(), v.data.end(), 123.25f);
    Volume<float> r = resample_to_isotropic(v, 1.0);
    for (float x : r.data) CHECK(x == 123.25f);
  }
  SUBCASE("trilinear reproduces an affine ramp in the interior") {
    Volume<float> v({16, 16, 16}, {2.0, 2.0, 2.0}, Modality::MR);
    for (int64_t z = 0; z < 16; ++z)
      for (int64_t y = 0; y < 16; ++y)
        for (int64_t x = 0; x < 16; ++x) v.at(x, y, z) = float(3.0 * x + 5.0 * y + 7.0 * z);
    Volume<float> r = resample_to_isotropic(v, 1.0);
    for (int64_t z = 2; z < r.dims[2] - 2; ++z) {
      for (int64_t y = 2; y < r.dims[1] - 2; ++y) {
        for (int64_t x = 2; x < r.dims[0] - 2; ++x) {
          // output index i sits at input coordinate (i+0.5)/2 - 0.5
          const double fx = (x + 0.5) / 2.0 - 0.5;
          const double fy = (y + 0.5) / 2.0 - 0.5;
          const double fz = (z + 0.5) / 2.0 - 0.5;
          const double want = 3.0 * fx + 5.0 * fy + 7.0 * fz;
          CHECK(std::abs(double(r.at(x, y, z)) - want) < 1e-4);
        }
      }
    }
  }
  SUBCASE("masks resample by nearest neighbour and stay binary") {
    Volume<float> m({11, 11, 11}, {1.3, 1.3, 1.3}, Modality::Mask);
    Rng rng(5);
    for (auto& x : m.data) x = rng.uniform() < 0.5 ? 0.0f : 1.0f;
    Volume<float> r = resample_to_isotropic(m, 1.0);
    for (float x : r.data) CHECK((x == 0.0f || x == 1.0f));
  }
  SUBCASE("invalid target rejected") {
    Volume<float> v({4, 4, 4}, {1.0, 1.0, 1.0}, Modality::MR);
    CHECK_THROWS_AS(resample_to_isotropic(v, 0.0), std::invalid_argument);
  }
}

TEST_CASE("crop/resize/pad branches") {
  PreprocessConfig cfg;  // target 64, crop (82, 64, 82)

  SUBCASE("target-sized input passes through bit-identically") {
    Volume<float> v({64, 64, 64}, {1, 1, 1}, Modality::CT);
    Rng rng(3);
    for (auto& x : v.data) x = float(rng.uniform(-1000.0, 1000.0));
    CHECK(bit_equal(crop_resize_pad(v, cfg), v));
  }

  SUBCASE("small inputs are padded symmetrically with modality constants") {
    for (Modality m : {Modality::CT, Modality::MR}) {
      Volume<float> v({50, 52, 48}, {1, 1, 1}, m);
      std::fill(v.data.begin(), v.data.end(), 500.0f);
      Volume<float> r = crop_resize_pad(v, cfg);
      CHECK(r.dims == std::array<int64_t, 3>{64, 64, 64});
      const float pad = m == Modality::CT ? -1000.0f : 0.0f;
      CHECK(r.at(0, 0, 0) == pad);
      CHECK(r.at(63, 63, 63) == pad);
      // interior block lands at floor((64-n)/2) and is bit-identical
      CHECK(r.at(7, 6, 8) == 500.0f);
      CHECK(r.at(7 + 49, 6 + 51, 8 + 47) == 500.0f);
      CHECK(r.at(6, 6, 8) == pad);
    }
  }

  SUBCASE("oversized inputs are centre-cropped then resized") {
    Volume<float> v({70, 70, 70}, {1, 1, 1}, Modality::CT);
    std::fill(v.data.begin(), v.data.end(), 77.0f);
    Volume<float> r = crop_resize_pad(v, cfg);
    CHECK(r.dims == std::array<int64_t, 3>{64, 64, 64});
    for (float x : r.data) CHECK(x == 77.0f);  // constant survives resize
  }

  SUBCASE("mixed extents take the crop/resize branch") {
    Volume<float> v({70, 60, 70}, {1, 1, 1}, Modality::MR);
    std::fill(v.data.begin(), v.data.end(), 1.0f);
    Volume<float> r = crop_resize_pad(v, cfg);
    CHECK(r.dims == std::array<int64_t, 3>{64, 64, 64});
    for (float x : r.data) CHECK(x == 1.0f);
  }

  SUBCASE("crop keeps the centre") {
    Volume<float> v({70, 64, 64}, {1, 1, 1}, Modality::CT);
    // mark the physical centre; after crop+resize it stays central
    for (int64_t x = 0; x < 70; ++x) v.at(x, 32, 32) = (x >= 33 && x <= 36) ? 900.0f : 0.0f;
    Volume<float> r = crop_resize_pad(v, cfg);
    double left = 0.0, right = 0.0;
    for (int64_t x = 0; x < 32; ++x) left += r.at(x, 32, 32);
    for (int64_t x = 32; x < 64; ++x) right += r.at(x, 32, 32);
    CHECK(left > 0.0);
    CHECK(right > 0.0);
    CHECK(std::abs(left - right) / (left + right) < 0.25);
  }
}

TEST_CASE("mask application") {
  Volume<float> ct({6, 6, 6}, {1, 1, 1}, Modality::CT);
  Rng rng(9);
  for (auto& x : ct.data) x = float(rng.uniform(0.0, 100.0));
  Volume<float> ones({6, 6, 6}, {1, 1, 1}, Modality::Mask);
  std::fill(ones.data.begin(), ones.data.end(), 1.0f);
  CHECK(bit_equal(apply_mask(ct, ones), ct));

  Volume<float> zeros = ones;
  std::fill(zeros.data.begin(), zeros.data.end(), 0.0f);
  Volume<float> blank = apply_mask(ct, zeros);
  for (float x : blank.data) CHECK(x == -1000.0f);

  Volume<float> half = ones;
  for (int64_t i = 0; i < 108; ++i) half.data[i] = 0.0f;
  Volume<float> r = apply_mask(ct, half);
  for (int64_t i = 0; i < 216; ++i) {
    if (i < 108) {
      CHECK(r.data[i] == -1000.0f);
    } else {
      CHECK(r.data[i] == ct.data[i]);  // interior bit-identical
    }
  }

  Volume<float> wrong({5, 6, 6}, {1, 1, 1}, Modality::Mask);
  CHECK_THROWS_AS(apply_mask(ct, wrong), std::invalid_argument);
}

TEST_CASE("min-max normalization") {
  Volume<float> v({3, 1, 1}, {1, 1, 1}, Modality::MR);
  v.data = {10.0f, 35.0f, 60.0f};
  Volume<float> r = minmax_normalize(v);
  CHECK(r.data[0] == 0.0f);
  CHECK(r.data[1] == 0.5f);
  CHECK(r.data[2] == 1.0f);

  // already-[0,1] with exact endpoints present → unchanged
  Volume<float> u({4, 1, 1}, {1, 1, 1}, Modality::MR);
  u.data = {0.0f, 0.25f, 0.75f, 1.0f};
  CHECK(bit_equal(minmax_normalize(u), u));

  // idempotence
  Volume<float> twice = minmax_normalize(minmax_normalize(v));
  CHECK(bit_equal(twice, r));

  // constant input → all zeros, flagged
  Volume<float> c({4, 1, 1}, {1, 1, 1}, Modality::MR);
  std::fill(c.data.begin(), c.data.end(), 3.0f);
  bool flag = false;
  Volume<float> z = minmax_normalize(c, &flag);
  CHECK(flag);
  for (float x : z.data) CHECK(x == 0.0f);
}

TEST_CASE("full pipeline emits target-cubed masked volumes over all presets") {
  PreprocessConfig cfg = PreprocessConfig::for_target(64);
  CHECK(cfg.crop_dims == std::array<int64_t, 3>{82, 64, 82});

  for (char name : {'A', 'B', 'C', 'D', 'E'}) {
    CAPTURE(name);
    CentreSpec s = CentreSpec::preset(name);
    PhantomPair p = generate_phantom(fnv1a64(s.centre_id) ^ 1234, s);
    PreprocessedPatient out = preprocess_patient(p.mri, p.ct, p.mask, cfg);
    CHECK_FALSE(out.mri_was_constant);
    for (const Volume<float>* v : {&out.mri, &out.ct, &out.mask}) {
      CHECK(v->dims == std::array<int64_t, 3>{64, 64, 64});
      CHECK(v->orientation == std::array<int32_t, 3>{0, 1, 2});
    }
    int64_t inside = 0;
    for (int64_t i = 0; i < out.mri.numel(); ++i) {
      const float m = out.mask.data[i];
      CHECK((m == 0.0f || m == 1.0f));
      CHECK(out.mri.data[i] >= 0.0f);
      CHECK(out.mri.data[i] <= 1.0f);
      CHECK(out.ct.data[i] >= -1000.0f);
      CHECK(out.ct.data[i] <= 3000.0f);
      if (m == 0.0f) {
        CHECK(out.mri.data[i] == 0.0f);
        CHECK(out.ct.data[i] == -1000.0f);
      } else {
        ++inside;
      }
    }
    CHECK(inside > 0);

    // determinism
    PreprocessedPatient again = preprocess_patient(p.mri, p.ct, p.mask, cfg);
    CHECK(bit_equal(again.mri, out.mri));
    CHECK(bit_equal(again.ct, out.ct));
    CHECK(bit_equal(again.mask, out.mask));
  }
}

TEST_CASE("preprocess config validation") {
  PreprocessConfig c;
  c.pad_ct = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = PreprocessConfig{};
  c.target_dim = 4;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = PreprocessConfig{};
  c.target_voxel = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(PreprocessConfig::for_target(256).crop_dims == std::array<int64_t, 3>{328, 256, 328});
}
