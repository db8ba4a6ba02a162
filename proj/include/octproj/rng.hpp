#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace octproj {

// Counter-based generator (Philox4x32-10). The key is derived from
// (seed, stream label), so sub-streams are independent of call order in
// other streams and outputs are identical across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::string_view stream = "root");

  // Child stream keyed by this stream's key and `label`; does not advance *this.
  Rng split(std::string_view label) const;

  std::uint64_t seed() const { return seed_; }
  const std::string& stream() const { return stream_; }

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal(double mean = 0.0, double stddev = 1.0);
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  Rng(std::uint64_t seed, std::string stream, std::uint64_t key);
  void refill();

  std::uint64_t seed_;
  std::string stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stable 64-bit hash of (seed, label); used for stream derivation.
std::uint64_t stream_key(std::uint64_t seed, std::string_view label);

}  // namespace octproj
