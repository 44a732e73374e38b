#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace tmae {

using Rng = std::mt19937_64;

// Stable 64-bit seed for a named subsystem (FNV-1a over the name mixed
// with the root seed through splitmix64).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name, std::uint64_t index);

// Portable draws; std:: distributions are implementation-defined.
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
// Integer in [lo, hi].
std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi);
double normal(Rng& rng);

}  // namespace tmae
