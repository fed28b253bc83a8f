#include "treegrpo/rng.hpp"

#include <cmath>
#include <limits>

namespace treegrpo {

namespace {

constexpr std::uint64_t kSplitMixGamma = 0x9E3779B97F4A7C15ULL;

std::uint64_t splitmix_finalize(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t RngStream::next_u64() {
  state_ += kSplitMixGamma;
  return splitmix_finalize(state_);
}

double RngStream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::size_t RngStream::below(std::size_t n) {
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() -
      std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t draw = next_u64();
  while (draw >= limit) draw = next_u64();
  return static_cast<std::size_t>(draw % bound);
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u = next_double();
  while (u <= 0.0) u = next_double();
  const double v = next_double();
  const double radius = std::sqrt(-2.0 * std::log(u));
  const double angle = 2.0 * M_PI * v;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t mix_u64(std::uint64_t a, std::uint64_t b) {
  return splitmix_finalize(a * 0xC2B2AE3D27D4EB4FULL + b + kSplitMixGamma);
}

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t stream_key(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t key = 0x5851F42D4C957F2DULL;
  for (std::uint64_t p : parts) key = mix_u64(key, p);
  return key;
}

}  // namespace treegrpo
