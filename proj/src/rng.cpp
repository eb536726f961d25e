#include "metamd/rng.hpp"

#include <cmath>
#include <numbers>

namespace metamd {

namespace {
constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed),
      stream_id_(stream_id),
      key0_(mix64(seed ^ mix64(stream_id + kGolden))),
      key1_(mix64(stream_id ^ mix64(seed + 0x632be59bd9b4e019ULL))) {}

std::uint64_t RngStream::next_u64() noexcept {
  const std::uint64_t c = counter_++;
  std::uint64_t x = mix64((c * kGolden) ^ key0_);
  return mix64(x + key1_);
}

double RngStream::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() noexcept {
  // (0, 1] so the log is finite.
  const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t RngStream::uniform_index(std::size_t n) noexcept {
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return static_cast<std::size_t>(x % bound);
}

RngStream RngStream::split(std::uint64_t child_id) const noexcept {
  return RngStream(seed_, mix64(stream_id_ * kGolden + mix64(child_id + 1)));
}

}  // namespace metamd
