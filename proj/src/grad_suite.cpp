#include "trustmae/grad_suite.hpp"

#include <functional>

#include "trustmae/grad_check.hpp"
#include "trustmae/losses.hpp"
#include "trustmae/memory.hpp"
#include "trustmae/model.hpp"
#include "trustmae/ops.hpp"
#include "trustmae/rng.hpp"

namespace tmae {

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = uniform(rng, lo, hi);
    return t;
}

// A random linear functional so every output coordinate contributes.
Var project(const Var& y, std::uint64_t seed) {
    return ops::sum(ops::mul(y, Var(random_tensor(y.shape(), derive_seed(seed, "projection")))));
}

struct Case {
    std::string name;
    std::function<double(std::uint64_t)> run;
};

Case unary(std::string name, std::function<Var(const Var&)> op, Shape shape, double lo = -1.0, double hi = 1.0) {
    return {name, [op, shape, lo, hi](std::uint64_t s) {
                return grad_check([&](const std::vector<Var>& v) { return project(op(v[0]), s); },
                                  {random_tensor(shape, s, lo, hi)});
            }};
}

Case binary(std::string name, std::function<Var(const Var&, const Var&)> op, Shape a, Shape b, double lo = -1.0,
            double hi = 1.0) {
    return {name, [op, a, b, lo, hi](std::uint64_t s) {
                return grad_check([&](const std::vector<Var>& v) { return project(op(v[0], v[1]), s); },
                                  {random_tensor(a, s, lo, hi), random_tensor(b, s + 1, lo, hi)});
            }};
}

ModelConfig tiny_model() {
    ModelConfig c;
    c.input_height = c.input_width = 12;
    c.downsample_layers = 1;
    c.residual_blocks = 1;
    c.latent_dim = 4;
    c.memory_slots = 5;
    c.base_width = 2;
    c.addressing.k = 2;
    return c;
}

std::vector<Case> cases() {
    std::vector<Case> c;
    c.push_back(binary("add", ops::add, {3, 4}, {3, 4}));
    c.push_back(binary("sub", ops::sub, {3, 4}, {3, 4}));
    c.push_back(binary("mul", ops::mul, {3, 4}, {3, 4}));
    c.push_back(binary("div", ops::div, {3, 4}, {3, 4}, 0.5, 2.0));
    c.push_back(unary("scale", [](const Var& x) { return ops::scale(x, -1.7); }, {3, 4}));
    c.push_back(unary("add_scalar", [](const Var& x) { return ops::add_scalar(x, 0.3); }, {3, 4}));
    c.push_back(unary("square", ops::square, {3, 4}));
    c.push_back(unary("abs", ops::abs, {3, 4}));
    c.push_back(unary("relu", ops::relu, {3, 4}));
    c.push_back(unary("leaky_relu", [](const Var& x) { return ops::leaky_relu(x, 0.2); }, {3, 4}));
    c.push_back(unary("tanh", ops::tanh, {3, 4}));
    c.push_back({"sum", [](std::uint64_t s) {
                     return grad_check([](const std::vector<Var>& v) { return ops::sum(ops::square(v[0])); },
                                       {random_tensor({2, 5}, s)});
                 }});
    c.push_back({"mean", [](std::uint64_t s) {
                     return grad_check([](const std::vector<Var>& v) { return ops::mean(ops::square(v[0])); },
                                       {random_tensor({2, 5}, s)});
                 }});
    c.push_back(binary("matmul", ops::matmul, {3, 4}, {4, 2}));
    c.push_back({"linear", [](std::uint64_t s) {
                     return grad_check(
                         [s](const std::vector<Var>& v) { return project(ops::linear(v[0], v[1], v[2]), s); },
                         {random_tensor({3, 4}, s), random_tensor({4, 2}, s + 1), random_tensor({2}, s + 2)});
                 }});
    for (int stride : {1, 2}) {
        c.push_back({"conv2d_stride" + std::to_string(stride), [stride](std::uint64_t s) {
                         return grad_check(
                             [s, stride](const std::vector<Var>& v) {
                                 return project(ops::conv2d(v[0], v[1], &v[2], stride, 1), s);
                             },
                             {random_tensor({2, 2, 5, 5}, s), random_tensor({3, 2, 3, 3}, s + 1),
                              random_tensor({3}, s + 2)});
                     }});
    }
    c.push_back({"conv_transpose2d", [](std::uint64_t s) {
                     return grad_check(
                         [s](const std::vector<Var>& v) {
                             return project(ops::conv_transpose2d(v[0], v[1], &v[2], 2, 1), s);
                         },
                         {random_tensor({2, 3, 3, 3}, s), random_tensor({3, 2, 4, 4}, s + 1),
                          random_tensor({2}, s + 2)});
                 }});
    for (bool training : {true, false}) {
        c.push_back({training ? "batch_norm_train" : "batch_norm_eval", [training](std::uint64_t s) {
                         Tensor rm = random_tensor({3}, s + 7), rv = random_tensor({3}, s + 8, 0.5, 2.0);
                         return grad_check(
                             [&](const std::vector<Var>& v) {
                                 return project(ops::batch_norm(v[0], v[1], v[2], {&rm, &rv, 0.1, 1e-5}, training), s);
                             },
                             {random_tensor({2, 3, 2, 2}, s), random_tensor({3}, s + 1), random_tensor({3}, s + 2)});
                     }});
    }
    c.push_back(unary("softmax", ops::softmax, {3, 5}, -2.0, 2.0));
    c.push_back(unary("topk_renormalize", [](const Var& x) { return ops::topk_renormalize(ops::softmax(x), 2); },
                      {3, 5}, -2.0, 2.0));
    c.push_back(binary("pairwise_distance", ops::pairwise_distance, {4, 3}, {5, 3}));
    c.push_back(unary("nchw_rows", [](const Var& x) { return ops::rows_to_nchw(ops::square(ops::nchw_to_rows(x)), 2, 2, 3); },
                      {2, 3, 2, 3}));
    c.push_back(unary("bilinear_upsample", [](const Var& x) { return ops::bilinear_upsample(x, 7, 5); }, {2, 3, 2}));
    c.push_back(unary("box_filter", [](const Var& x) { return ops::box_filter(x, 3); }, {1, 1, 5, 6}));
    c.push_back({"margin_loss", [](std::uint64_t s) {
                     return grad_check([](const std::vector<Var>& v) { return margin_loss(v[0], v[1]); },
                                       {random_tensor({7, 4}, s, -0.3, 0.3), random_tensor({5, 4}, s + 5, -0.3, 0.3)});
                 }});
    c.push_back({"trust_loss_batch", [](std::uint64_t s) {
                     TrustConfig t;
                     t.delta2 = 1.5;
                     return grad_check([t](const std::vector<Var>& v) { return trust_loss_batch(v[0], v[1], t); },
                                       {random_tensor({9, 3}, s), random_tensor({3, 3}, s + 7)});
                 }});
    c.push_back({"ssim_loss", [](std::uint64_t s) {
                     LossConfig l;
                     l.ssim_window = 5;
                     return grad_check([l](const std::vector<Var>& v) { return ssim_loss(v[0], v[1], l); },
                                       {random_tensor({1, 1, 7, 8}, s), random_tensor({1, 1, 7, 8}, s + 50)});
                 }});
    c.push_back({"total_loss", [](std::uint64_t s) {
                     const ModelConfig cfg = tiny_model();
                     auto m = TrustMAEModel::build(cfg, s);
                     Var x(random_tensor({2, 1, 12, 12}, s + 3));
                     LossConfig l;
                     l.ssim_window = 5;
                     auto params = m.parameters();
                     std::vector<Parameter*> probe{params[0], params[3], &m.bank().slots, params.back()};
                     auto f = [&] { return total_loss(x, m.forward(x), l, cfg.trust).total; };
                     return grad_check_params(f, probe, 1e-6, 10);
                 }});
    return c;
}

}  // namespace

std::vector<GradCheckResult> gradient_suite(std::size_t seeds) {
    std::vector<GradCheckResult> out;
    for (const auto& c : cases()) {
        for (std::uint64_t s = 1; s <= seeds; ++s) {
            const std::uint64_t seed = derive_seed(s, c.name);
            out.push_back({c.name, seed, c.run(seed)});
        }
    }
    return out;
}

}  // namespace tmae
