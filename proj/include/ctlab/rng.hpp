#pragma once

// Seedable, splittable random streams.
//
// Layout: a stream is identified by (seed, id0, id1). State derivation runs
// the ids through splitmix64, so streams with distinct ids are independent
// and a stream can be reconstructed from its identifiers alone. Sweep cells
// and per-step training draws derive their own streams instead of sharing a
// sequential generator; results are therefore invariant to execution order.
//
// Engine: xoshiro256++ seeded via splitmix64. Normals use the Box-Muller
// transform on 53-bit uniforms (no library normal_distribution, whose output
// is implementation-defined). Same seed => bit-identical sequences.

#include <cmath>
#include <cstdint>
#include <Eigen/Dense>

namespace ctlab {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t id0 = 0, std::uint64_t id1 = 0) {
    std::uint64_t s = seed;
    (void)splitmix64(s);
    s ^= 0xd1b54a32d192ed03ULL * (id0 + 1);
    (void)splitmix64(s);
    s ^= 0x8cb92ba72f3d8dd7ULL * (id1 + 1);
    for (auto& w : state_) w = splitmix64(s);
  }

  // Derived stream, independent of this one for distinct ids.
  RngStream split(std::uint64_t id0, std::uint64_t id1 = 0) const {
    RngStream r(0);
    std::uint64_t s = state_[0] ^ (state_[3] * 0x9e3779b97f4a7c15ULL);
    s ^= 0xd1b54a32d192ed03ULL * (id0 + 1);
    (void)splitmix64(s);
    s ^= 0x8cb92ba72f3d8dd7ULL * (id1 + 1);
    for (auto& w : r.state_) w = splitmix64(s);
    return r;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform on [0,1) with 53 bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0,1], safe as a log argument.
  double uniform_pos() { return double((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  Eigen::VectorXd normal_vector(int d) {
    Eigen::VectorXd z(d);
    for (int i = 0; i < d; ++i) z[i] = normal();
    return z;
  }

  // Uniform direction on the unit sphere in R^d.
  Eigen::VectorXd unit_vector(int d) {
    Eigen::VectorXd v = normal_vector(d);
    double n = v.norm();
    while (n < 1e-12) {
      v = normal_vector(d);
      n = v.norm();
    }
    return v / n;
  }

  // Index in [0, n) by inverse scaling (n is tiny here, modulo bias irrelevant
  // would still be avoided).
  std::uint64_t index(std::uint64_t n) {
    return std::uint64_t(uniform() * double(n)) % n;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t state_[4];
};

}  // namespace ctlab
