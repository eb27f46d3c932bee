#pragma once

// Self-contained PRNG so that streams are reproducible byte-for-byte across
// runs and toolchains (std::* distributions are implementation-defined).

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace fedvox {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Order-sensitive combine; used to derive per-centre / per-patient /
// per-client / per-round substreams from one master seed.
inline uint64_t hash_u64(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  return splitmix64(s);
}

template <typename... Rest>
uint64_t hash_u64(uint64_t a, uint64_t b, uint64_t c, Rest... rest) {
  return hash_u64(hash_u64(a, b), c, rest...);
}

// FNV-1a for folding string identifiers (centre ids) into seed derivations.
inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stream tags keep unrelated substreams of one seed statistically disjoint.
namespace stream {
constexpr uint64_t kPatient = 0x70617469656e74ULL;   // phantom anatomy
constexpr uint64_t kNoise = 0x6e6f697365ULL;         // additive MRI noise
constexpr uint64_t kBias = 0x62696173ULL;            // injected bias field
constexpr uint64_t kInit = 0x696e6974ULL;            // model weight init
constexpr uint64_t kClient = 0x636c69656e74ULL;      // per-client per-round
constexpr uint64_t kShuffle = 0x7368756666ULL;       // batch order
constexpr uint64_t kAugment = 0x6175676dULL;         // augmentation draws
constexpr uint64_t kPatch = 0x7061746368ULL;         // patch origins
constexpr uint64_t kRepeat = 0x726570ULL;            // seeded experiment repeats
constexpr uint64_t kPlane = 0x706c616e65ULL;         // per-plane models (2D+)
}  // namespace stream

// xoshiro256++ (Blackman/Vigna), seeded via splitmix64.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  // Box-Muller; pairs are drawn eagerly so the stream advances two words
  // per two normals regardless of caller pattern.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4] = {};
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace fedvox
