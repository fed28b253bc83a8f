#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace treegrpo {

// Deterministic, platform-independent random stream (splitmix64 core).
// std:: distributions are implementation-defined, so every sampling helper
// used by the pipeline is hand-rolled on top of next_u64().
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  // Uniform in [0, 1), 53-bit resolution.
  double next_double();

  // Uniform integer in [0, n), rejection-sampled (no modulo bias). n > 0.
  std::size_t below(std::size_t n);

  // Standard normal via Box-Muller; second variate is cached.
  double normal();

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Order-sensitive combine of two 64-bit values.
std::uint64_t mix_u64(std::uint64_t a, std::uint64_t b);

// FNV-1a, used to key streams by prompt ids.
std::uint64_t hash_string(std::string_view s);

// Folds a list of parts into one stream seed. Stream layout contracts
// (who owns which key tuple) are documented at the call sites.
std::uint64_t stream_key(std::initializer_list<std::uint64_t> parts);

}  // namespace treegrpo
