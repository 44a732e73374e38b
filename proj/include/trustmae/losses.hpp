#pragma once

#include <cstddef>

#include "trustmae/autograd.hpp"
#include "trustmae/model.hpp"

namespace tmae {

struct LossConfig {
    double lambda_rec = 10.0;
    double lambda_sm = 10.0;
    double lambda_margin = 0.1;
    double lambda_trust = 1.0;
    std::size_t ssim_window = 11;
    double ssim_c1 = 0.01 * 0.01;
    double ssim_c2 = 0.03 * 0.03;

    void validate() const;
};

struct LossBreakdown {
    double rec = 0.0;
    double ssim = 0.0;
    double margin = 0.0;
    double trust = 0.0;
    double total = 0.0;
};

struct LossTerms {
    Var total;
    LossBreakdown breakdown;
};

// Mean absolute error over all elements.
Var l1_recon(const Var& x, const Var& x_hat);
double l1_recon(const Tensor& x, const Tensor& x_hat);

// Per-pixel SSIM of two images in [-1, 1] (remapped to [0, 1] first),
// box window clipped at the borders. Shapes [C,H,W] or [N,C,H,W].
Var ssim_map(const Var& p, const Var& q, const LossConfig& cfg);
Tensor ssim_map(const Tensor& p, const Tensor& q, const LossConfig& cfg);

// 1 - mean SSIM.
Var ssim_loss(const Var& p, const Var& q, const LossConfig& cfg);
double ssim_loss(const Tensor& p, const Tensor& q, const LossConfig& cfg);

// Weighted sum of the reconstruction, SSIM, margin and trust terms. Margin
// and trust average over every spatial feature position of the batch and
// are skipped when the memory is bypassed. Terms with a zero weight are
// reported but kept out of the graph.
LossTerms total_loss(const Var& x, const ForwardResult& result, const LossConfig& cfg, const TrustConfig& trust);

}  // namespace tmae
