#include "trustmae/losses.hpp"

#include "trustmae/error.hpp"
#include "trustmae/memory.hpp"
#include "trustmae/ops.hpp"

namespace tmae {

void LossConfig::validate() const {
    if (lambda_rec < 0 || lambda_sm < 0 || lambda_margin < 0 || lambda_trust < 0) {
        throw ConfigError("loss weights must be non-negative");
    }
    if (ssim_window % 2 == 0 || ssim_window < 1) throw ConfigError("ssim window must be odd");
}

Var l1_recon(const Var& x, const Var& x_hat) {
    if (x.shape() != x_hat.shape()) {
        throw ShapeError("l1_recon: " + shape_str(x.shape()) + " vs " + shape_str(x_hat.shape()));
    }
    return ops::mean(ops::abs(ops::sub(x, x_hat)));
}

double l1_recon(const Tensor& x, const Tensor& x_hat) {
    NoGradGuard guard;
    return l1_recon(Var(x), Var(x_hat)).value().item();
}

Var ssim_map(const Var& p, const Var& q, const LossConfig& cfg) {
    if (p.shape() != q.shape()) throw ShapeError("ssim: " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
    const auto& s = p.shape();
    if (s.size() < 2) throw ShapeError("ssim: expected an image");
    if (s[s.size() - 2] < cfg.ssim_window || s[s.size() - 1] < cfg.ssim_window) {
        throw ShapeError("ssim: image " + shape_str(s) + " is smaller than the " + std::to_string(cfg.ssim_window) +
                         "x" + std::to_string(cfg.ssim_window) + " window");
    }
    const std::size_t win = cfg.ssim_window;
    Var a = ops::scale(ops::add_scalar(p, 1.0), 0.5);
    Var b = ops::scale(ops::add_scalar(q, 1.0), 0.5);
    Var mu_a = ops::box_filter(a, win);
    Var mu_b = ops::box_filter(b, win);
    Var mu_aa = ops::square(mu_a);
    Var mu_bb = ops::square(mu_b);
    Var mu_ab = ops::mul(mu_a, mu_b);
    Var var_a = ops::sub(ops::box_filter(ops::square(a), win), mu_aa);
    Var var_b = ops::sub(ops::box_filter(ops::square(b), win), mu_bb);
    Var cov = ops::sub(ops::box_filter(ops::mul(a, b), win), mu_ab);
    Var num = ops::mul(ops::add_scalar(ops::scale(mu_ab, 2.0), cfg.ssim_c1),
                       ops::add_scalar(ops::scale(cov, 2.0), cfg.ssim_c2));
    Var den = ops::mul(ops::add_scalar(ops::add(mu_aa, mu_bb), cfg.ssim_c1),
                       ops::add_scalar(ops::add(var_a, var_b), cfg.ssim_c2));
    return ops::div(num, den);
}

Tensor ssim_map(const Tensor& p, const Tensor& q, const LossConfig& cfg) {
    NoGradGuard guard;
    return ssim_map(Var(p), Var(q), cfg).value();
}

Var ssim_loss(const Var& p, const Var& q, const LossConfig& cfg) {
    return ops::add_scalar(ops::scale(ops::mean(ssim_map(p, q, cfg)), -1.0), 1.0);
}

double ssim_loss(const Tensor& p, const Tensor& q, const LossConfig& cfg) {
    NoGradGuard guard;
    return ssim_loss(Var(p), Var(q), cfg).value().item();
}

LossTerms total_loss(const Var& x, const ForwardResult& result, const LossConfig& cfg, const TrustConfig& trust) {
    LossTerms out;
    Var xb = x;
    if (x.value().rank() == 3) xb = Var(x.value().reshaped(result.reconstruction.shape()));
    std::vector<std::pair<double, Var>> weighted;

    Var rec = l1_recon(xb, result.reconstruction);
    out.breakdown.rec = rec.value().item();
    weighted.emplace_back(cfg.lambda_rec, rec);

    Var sm = ssim_loss(xb, result.reconstruction, cfg);
    out.breakdown.ssim = sm.value().item();
    weighted.emplace_back(cfg.lambda_sm, sm);

    if (result.distances.defined()) {
        if (result.distances.shape()[1] >= 2) {
            Var margin = ops::margin_loss(result.distances);
            out.breakdown.margin = margin.value().item();
            weighted.emplace_back(cfg.lambda_margin, margin);
        }
        if (trust.enabled) {
            Var tr = ops::trust_loss(result.distances, trust.effective_delta2());
            out.breakdown.trust = tr.value().item();
            weighted.emplace_back(cfg.lambda_trust, tr);
        }
    }

    Var total(Tensor::scalar(0.0));
    double total_value = 0.0;
    for (auto& [lambda, term] : weighted) {
        if (lambda == 0.0) continue;
        total = ops::add(total, ops::scale(term, lambda));
        total_value += lambda * term.value().item();
    }
    out.total = total;
    out.breakdown.total = total_value;
    return out;
}

}  // namespace tmae
