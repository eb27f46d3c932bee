#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "fedvox/phantom.hpp"

using namespace fedvox;

namespace {

CentreSpec plain_spec() {
  CentreSpec s;
  s.centre_id = "T";
  return s;
}

}  // namespace

TEST_CASE("generation is deterministic in (seed, spec) and seed-sensitive") {
  CentreSpec s = plain_spec();
  s.noise_sigma = 0.02;
  s.bias_amplitude = 0.1;
  PhantomPair a = generate_phantom(99, s);
  PhantomPair b = generate_phantom(99, s);
  CHECK(bit_equal(a.mri, b.mri));
  CHECK(bit_equal(a.ct, b.ct));
  CHECK(bit_equal(a.mask, b.mask));
  CHECK(bit_equal(a.true_bias, b.true_bias));
  PhantomPair c = generate_phantom(100, s);
  CHECK_FALSE(bit_equal(a.mri, c.mri));
}

TEST_CASE("zero bias and zero noise give the clean mapping and a unit field") {
  CentreSpec s = plain_spec();
  PhantomPair p = generate_phantom(7, s);
  for (float v : p.true_bias.data) CHECK(v == 1.0f);
  for (int64_t i = 0; i < p.mri.numel(); ++i) {
    if (p.mask.data[i] == 0.0f) {
      CHECK(p.mri.data[i] == 0.0f);
    } else {
      CHECK(p.mri.data[i] > 0.0f);
    }
  }
}

TEST_CASE("dividing by the injected field recovers the clean mapping") {
  CentreSpec clean = plain_spec();
  CentreSpec biased = clean;
  biased.bias_amplitude = 0.3;
  biased.bias_smoothness = 1.2;

  PhantomPair pc = generate_phantom(55, clean);
  PhantomPair pb = generate_phantom(55, biased);
  CHECK(bit_equal(pc.mask, pb.mask));

  SUBCASE("exactly, when noise is zero") {
    for (int64_t i = 0; i < pc.mri.numel(); ++i) {
      if (pc.mask.data[i] == 0.0f) continue;
      const double rec = double(pb.mri.data[i]) / double(pb.true_bias.data[i]);
      const double ref = pc.mri.data[i];
      CHECK(std::abs(rec - ref) <= 1e-5 * std::max(1.0, ref));
    }
  }

  SUBCASE("within noise_sigma, when noise is present") {
    CentreSpec noisy = biased;
    noisy.noise_sigma = 0.02;
    noisy.bias_amplitude = 0.15;
    PhantomPair pn = generate_phantom(55, noisy);
    double err = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < pc.mri.numel(); ++i) {
      if (pc.mask.data[i] == 0.0f) continue;
      err += std::abs(double(pn.mri.data[i]) / double(pn.true_bias.data[i]) -
                      double(pc.mri.data[i]));
      ++count;
    }
    CHECK(count > 1000);
    CHECK(err / double(count) <= 1000.0 * noisy.noise_sigma);
  }
}

TEST_CASE("background exactness, value ranges, and integer HU at thickness 1") {
  CentreSpec s = plain_spec();
  s.noise_sigma = 0.03;
  s.bias_amplitude = 0.2;
  PhantomPair p = generate_phantom(3, s);
  int64_t inside = 0;
  for (int64_t i = 0; i < p.ct.numel(); ++i) {
    const float m = p.mask.data[i];
    CHECK((m == 0.0f || m == 1.0f));
    CHECK(p.ct.data[i] >= -1000.0f);
    CHECK(p.ct.data[i] <= 3000.0f);
    CHECK(p.true_bias.data[i] > 0.0f);
    if (m == 0.0f) {
      CHECK(p.ct.data[i] == -1000.0f);
      CHECK(p.mri.data[i] == 0.0f);
    } else {
      ++inside;
      CHECK(p.mri.data[i] >= 0.0f);
      CHECK(p.ct.data[i] == std::round(p.ct.data[i]));  // tissue HU are integers
    }
  }
  CHECK(inside > p.ct.numel() / 10);
  CHECK(p.mri.same_grid(p.ct));
  CHECK(p.mri.same_grid(p.mask));
  CHECK(p.mri.same_grid(p.true_bias));
}

TEST_CASE("slice-thickness averaging thins the superior skull peak") {
  CentreSpec s1 = plain_spec();
  CentreSpec s3 = s1;
  s3.ct_slice_thickness_factor = 3;
  for (uint64_t seed : {11u, 12u, 13u}) {
    PhantomPair a = generate_phantom(seed, s1);
    PhantomPair b = generate_phantom(seed, s3);
    const int64_t z_lo = (a.ct.dims[2] * 3) / 4;
    double m1 = 0.0, m3 = 0.0;
    int64_t count = 0;
    for (int64_t z = z_lo; z < a.ct.dims[2]; ++z) {
      for (int64_t y = 0; y < a.ct.dims[1]; ++y) {
        for (int64_t x = 0; x < a.ct.dims[0]; ++x) {
          if (a.ct.at(x, y, z) > 500.0f) {
            m1 += a.ct.at(x, y, z);
            m3 += b.ct.at(x, y, z);
            ++count;
          }
        }
      }
    }
    CHECK(count > 100);
    CHECK(m3 / count < m1 / count);
  }
}

TEST_CASE("noise affects only the MRI") {
  CentreSpec s0 = plain_spec();
  CentreSpec s1 = s0;
  s1.noise_sigma = 0.05;
  PhantomPair a = generate_phantom(21, s0);
  PhantomPair b = generate_phantom(21, s1);
  CHECK(bit_equal(a.ct, b.ct));
  CHECK(bit_equal(a.mask, b.mask));
  CHECK_FALSE(bit_equal(a.mri, b.mri));
}

TEST_CASE("FOV cut removes inferior slices from all volumes") {
  CentreSpec s = plain_spec();
  s.fov_cut_fraction = 0.22;
  PhantomPair p = generate_phantom(5, s);
  const int64_t expect_z = 64 - int64_t(std::floor(0.22 * 64.0));
  CHECK(p.mri.dims[2] == expect_z);
  CHECK(p.ct.dims[2] == expect_z);
  CHECK(p.mask.dims[2] == expect_z);
  CHECK(p.true_bias.dims[2] == expect_z);
  // The cut lands inside the head: the lowest remaining slice has content.
  double head = 0.0;
  for (int64_t y = 0; y < p.mask.dims[1]; ++y) {
    for (int64_t x = 0; x < p.mask.dims[0]; ++x) head += p.mask.at(x, y, 0);
  }
  CHECK(head > 0.0);
}

TEST_CASE("axis permutation relabels storage while preserving content") {
  CentreSpec id = plain_spec();
  id.fov_cut_fraction = 0.10;
  CentreSpec pm = id;
  pm.axis_perm = {2, 0, 1};
  PhantomPair a = generate_phantom(31, id);
  PhantomPair b = generate_phantom(31, pm);
  CHECK(b.mri.orientation == std::array<int32_t, 3>{2, 0, 1});
  CHECK(b.mri.dims[0] == a.mri.dims[2]);
  CHECK(b.mri.dims[1] == a.mri.dims[0]);
  CHECK(b.mri.dims[2] == a.mri.dims[1]);
  for (int64_t i2 = 0; i2 < b.mri.dims[2]; ++i2) {
    for (int64_t i1 = 0; i1 < b.mri.dims[1]; ++i1) {
      for (int64_t i0 = 0; i0 < b.mri.dims[0]; ++i0) {
        // storage axes (0,1,2) of b run along canonical axes (2,0,1)
        CHECK(b.mri.at(i0, i1, i2) == a.mri.at(i1, i2, i0));
      }
    }
  }
}

TEST_CASE("centre generation: split sizes, disjointness, id-sensitivity") {
  CentreSpec s = plain_spec();
  s.grid_dim = 16;
  s.n_patients = 15;
  CentreCohort c = generate_centre(s, 77);
  CHECK(c.patients.size() == 15);
  CHECK(c.train_idx.size() == 11);
  CHECK(c.val_idx.size() == 2);
  CHECK(c.test_idx.size() == 2);
  std::set<int64_t> all;
  for (auto v : {&c.train_idx, &c.val_idx, &c.test_idx}) {
    for (int64_t i : *v) {
      CHECK(all.insert(i).second);  // disjoint
      CHECK(i >= 0);
      CHECK(i < 15);
    }
  }
  CHECK(all.size() == 15);

  CentreSpec other = s;
  other.centre_id = "U";
  CentreCohort d = generate_centre(other, 77);
  CHECK_FALSE(bit_equal(c.patients[0].mri, d.patients[0].mri));

  // Patients within one cohort differ from each other.
  CHECK_FALSE(bit_equal(c.patients[0].mri, c.patients[1].mri));
}

TEST_CASE("presets yield distinct cohort statistics") {
  std::vector<std::array<double, 3>> stats;
  for (char name : {'A', 'B', 'C', 'D', 'E'}) {
    CentreSpec s = CentreSpec::preset(name);
    const uint64_t seed = hash_u64(424242, stream::kPatient, fnv1a64(s.centre_id), 0);
    PhantomPair p = generate_phantom(seed, s);
    double mri_sum = 0.0, ct_sum = 0.0, m_sum = 0.0;
    for (int64_t i = 0; i < p.mri.numel(); ++i) {
      if (p.mask.data[i] != 0.0f) {
        mri_sum += p.mri.data[i];
        ct_sum += p.ct.data[i];
        m_sum += 1.0;
      }
    }
    stats.push_back({mri_sum / m_sum, ct_sum / m_sum, 1000.0 * m_sum / double(p.mri.numel())});
  }
  for (size_t i = 0; i < stats.size(); ++i) {
    for (size_t j = i + 1; j < stats.size(); ++j) {
      double diff = 0.0;
      for (int k = 0; k < 3; ++k) diff = std::max(diff, std::abs(stats[i][k] - stats[j][k]));
      CHECK(diff > 0.5);
    }
  }
}

TEST_CASE("spec validation rejects out-of-range values") {
  CentreSpec s = plain_spec();
  s.n_patients = 4;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = plain_spec();
  s.voxel_size = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = plain_spec();
  s.ct_slice_thickness_factor = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = plain_spec();
  s.fov_cut_fraction = 1.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = plain_spec();
  s.axis_perm = {0, 0, 2};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = plain_spec();
  s.contrast_gain = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  CHECK_THROWS_AS(CentreSpec::preset('Z'), std::invalid_argument);
  CHECK_THROWS_AS(generate_centre(CentreSpec{}, 1), std::invalid_argument);
}
