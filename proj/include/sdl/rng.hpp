#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace sdl {

// splitmix64; used both as a mixer for stream derivation and as the
// generator core. Deterministic across platforms, unlike the standard
// library distributions.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(std::initializer_list<uint64_t> words) {
  uint64_t s = 0x6a09e667f3bcc908ULL;
  for (uint64_t w : words) {
    s ^= w + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
    uint64_t t = s;
    s = splitmix64(t);
  }
  return s;
}

// RNG stream tags so that independent concerns (data order, init, noise)
// never share a stream and toggling one feature cannot shift another.
enum class Stream : uint64_t {
  DatasetMeta = 1,
  DatasetVisual = 2,
  Shuffle = 3,
  Augment = 4,
  ParamInit = 5,
  DictInit = 6,
};

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // decorrelate trivially related seeds
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next() { return splitmix64(state_); }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(next() % static_cast<uint64_t>(n));
  }

  // standard normal via Box-Muller (no stdlib distribution, keeps streams portable)
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline Rng stream_rng(uint64_t seed, Stream stream, uint64_t a = 0, uint64_t b = 0) {
  return Rng(mix_seed({seed, static_cast<uint64_t>(stream), a, b}));
}

}  // namespace sdl
