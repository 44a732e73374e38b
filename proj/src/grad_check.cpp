#include "trustmae/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "trustmae/error.hpp"

namespace tmae {

namespace {

void check_eps(double eps) {
    if (!(eps >= 1e-7 && eps <= 1e-4)) throw ConfigError("grad_check: eps must lie in [1e-7, 1e-4]");
}

double scalar_of(const Var& v) {
    if (v.value().numel() != 1) {
        throw ShapeError("grad_check: function must be scalar-valued, got " + shape_str(v.shape()));
    }
    return v.value()[0];
}

double rel_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace

double grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double eps) {
    check_eps(eps);
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.emplace_back(t, true);
    Var out = f(vars);
    scalar_of(out);
    out.backward();

    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor analytic = vars[k].grad();
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
            auto eval_at = [&](double delta) {
                NoGradGuard guard;
                std::vector<Var> probe;
                probe.reserve(inputs.size());
                for (std::size_t q = 0; q < inputs.size(); ++q) {
                    Tensor t = inputs[q];
                    if (q == k) t[i] += delta;
                    probe.emplace_back(std::move(t), false);
                }
                return scalar_of(f(probe));
            };
            const double numeric = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
            worst = std::max(worst, rel_error(analytic[i], numeric));
        }
    }
    return worst;
}

double grad_check_params(const std::function<Var()>& f, const std::vector<Parameter*>& params,
                         double eps, std::size_t max_coords_per_param) {
    check_eps(eps);
    for (auto* p : params) p->var.zero_grad();
    Var out = f();
    scalar_of(out);
    out.backward();

    double worst = 0.0;
    for (auto* p : params) {
        const Tensor analytic = p->grad();
        const std::size_t n = p->value().numel();
        const std::size_t stride =
            (max_coords_per_param == 0 || n <= max_coords_per_param) ? 1 : n / max_coords_per_param;
        for (std::size_t i = 0; i < n; i += stride) {
            Tensor& v = p->mutable_value();
            const double orig = v[i];
            double fp, fm;
            {
                NoGradGuard guard;
                v[i] = orig + eps;
                fp = scalar_of(f());
                v[i] = orig - eps;
                fm = scalar_of(f());
                v[i] = orig;
            }
            worst = std::max(worst, rel_error(analytic[i], (fp - fm) / (2.0 * eps)));
        }
    }
    return worst;
}

}  // namespace tmae
