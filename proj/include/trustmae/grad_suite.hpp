#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tmae {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckResult {
    std::string name;
    std::uint64_t seed = 0;
    double error = 0.0;

    bool passed() const { return error <= kGradCheckTolerance; }
};

// Central finite-difference checks of every differentiable primitive, the
// memory losses, SSIM and the total loss of a small model, each at
// `seeds` different random inputs.
std::vector<GradCheckResult> gradient_suite(std::size_t seeds = 3);

}  // namespace tmae
