#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "trustmae/autograd.hpp"

namespace tmae {

// Scalar-valued function of the given inputs.
using ScalarFn = std::function<Var(const std::vector<Var>&)>;

// Compares reverse-mode gradients of `f` at `inputs` with central
// differences. Returns max over coordinates of
// |analytic - numeric| / max(1, |analytic|).
// Requires eps in [1e-7, 1e-4] and a single-element output.
double grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double eps = 1e-6);

// Same check against parameters held elsewhere (e.g. a model). `f` reads
// the parameters' current values; at most `max_coords_per_param`
// coordinates of each parameter are probed (0 = all), chosen with a
// fixed stride so the check is deterministic.
double grad_check_params(const std::function<Var()>& f, const std::vector<Parameter*>& params,
                         double eps = 1e-6, std::size_t max_coords_per_param = 0);

}  // namespace tmae
