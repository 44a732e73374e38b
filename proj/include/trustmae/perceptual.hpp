#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "trustmae/losses.hpp"
#include "trustmae/model.hpp"
#include "trustmae/tensor.hpp"

namespace tmae {

enum class ExtractorKind { random_conv_pyramid, trained_encoder };

enum class ErrorSource { mse, pd, mse_pd, ssim };

std::string to_string(ErrorSource s);
ErrorSource parse_error_source(const std::string& s);
std::string to_string(ExtractorKind k);
ExtractorKind parse_extractor_kind(const std::string& s);

struct ErrorMap {
    Tensor values;  // [H, W], nonnegative
    ErrorSource source = ErrorSource::mse_pd;
};

// Multi-scale features of a batch [N, C, H, W]; level l is [N, C_l, H_l, W_l].
using FeatureFn = std::function<std::vector<Tensor>(const Tensor& batch)>;

class FeaturePyramidExtractor {
public:
    FeaturePyramidExtractor(FeatureFn layers, std::vector<Tensor> channel_weights, bool normalize_channels);

    // Frozen random 3x3 convolutions with LeakyReLU; every level after the
    // first halves the resolution and doubles the width.
    static FeaturePyramidExtractor random_conv_pyramid(std::size_t channels, std::size_t depth, std::uint64_t seed,
                                                       std::size_t base_width = 16);
    // Intermediate activations of a model's encoder (evaluation mode). The
    // model must outlive the extractor.
    static FeaturePyramidExtractor trained_encoder(TrustMAEModel& model);

    std::vector<Tensor> features(const Tensor& batch) const;
    std::size_t depth() const { return gamma_.size(); }
    const std::vector<Tensor>& channel_weights() const { return gamma_; }
    void set_channel_weights(std::vector<Tensor> gamma);
    bool normalize_channels() const { return normalize_; }

private:
    FeatureFn layers_;
    std::vector<Tensor> gamma_;
    bool normalize_;
};

// Per-image maps for a batch [N, C, H, W] (or a single [C, H, W] image).
std::vector<ErrorMap> perceptual_distance_maps(const Tensor& x, const Tensor& x_hat,
                                               const FeaturePyramidExtractor& extractor);
ErrorMap perceptual_distance_map(const Tensor& x, const Tensor& x_hat, const FeaturePyramidExtractor& extractor);

// Channel-mean squared error per pixel.
std::vector<ErrorMap> mse_maps(const Tensor& x, const Tensor& x_hat);

// mse_map * PD, elementwise.
std::vector<ErrorMap> combined_error_maps(const Tensor& x, const Tensor& x_hat,
                                          const FeaturePyramidExtractor& extractor);
ErrorMap combined_error_map(const Tensor& x, const Tensor& x_hat, const FeaturePyramidExtractor& extractor);

// 1 - SSIM, averaged over channels.
std::vector<ErrorMap> ssim_error_maps(const Tensor& x, const Tensor& x_hat, const LossConfig& cfg);

// Dispatch on the requested source.
std::vector<ErrorMap> error_maps(ErrorSource source, const Tensor& x, const Tensor& x_hat,
                                 const FeaturePyramidExtractor& extractor, const LossConfig& loss_cfg);

}  // namespace tmae
