#pragma once

#include <cmath>
#include <cstdint>

namespace mfrs {

// Counter-based random streams. Every draw is a pure function of
// (root seed, stream tag, stream ids, counter), so simulations are
// reproducible independently of scheduling and evaluation order.
namespace rng {

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

inline std::uint64_t mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t combine(std::uint64_t key, std::uint64_t v) {
  return mix(key ^ (v + kGolden + (key << 6) + (key >> 2)));
}

// Stream tags keep the independent noise sources of one run disjoint.
enum Tag : std::uint64_t {
  kIdiosyncratic = 0x11,
  kCommon = 0x22,
  kRegime = 0x33,
  kInitial = 0x44,
  kUser = 0x55,
};

struct Key {
  std::uint64_t state;

  explicit Key(std::uint64_t root) : state(mix(root + kGolden)) {}
  Key child(std::uint64_t id) const {
    Key k = *this;
    k.state = combine(state, id);
    return k;
  }
  Key child(std::uint64_t a, std::uint64_t b) const { return child(a).child(b); }
  Key child(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
    return child(a).child(b).child(c);
  }
};

// Uniform on (0, 1); never returns 0 so log() is safe.
inline double uniform(const Key& key, std::uint64_t counter) {
  std::uint64_t bits = combine(key.state, counter);
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

// Standard normal via Box-Muller on counters (2*counter, 2*counter+1).
inline double normal(const Key& key, std::uint64_t counter) {
  double u1 = uniform(key, 2 * counter);
  double u2 = uniform(key, 2 * counter + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

// Stateful view of a stream for sequential sampling (regime paths,
// resampling draws).  Still deterministic: it just tracks the counter.
class Stream {
 public:
  explicit Stream(Key key) : key_(key) {}
  double uniform() { return rng::uniform(key_, counter_++); }
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }
  double exponential(double rate) { return -std::log(uniform()) / rate; }

 private:
  Key key_;
  std::uint64_t counter_ = 0;
};

}  // namespace rng
}  // namespace mfrs
