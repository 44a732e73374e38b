#include "trustmae/perceptual.hpp"

#include <cmath>
#include <memory>

#include "trustmae/error.hpp"
#include "trustmae/ops.hpp"
#include "trustmae/rng.hpp"

namespace tmae {

std::string to_string(ErrorSource s) {
    switch (s) {
        case ErrorSource::mse: return "mse";
        case ErrorSource::pd: return "pd";
        case ErrorSource::mse_pd: return "mse-pd";
        case ErrorSource::ssim: return "ssim";
    }
    return "?";
}

ErrorSource parse_error_source(const std::string& s) {
    if (s == "mse") return ErrorSource::mse;
    if (s == "pd") return ErrorSource::pd;
    if (s == "mse-pd" || s == "mse_pd") return ErrorSource::mse_pd;
    if (s == "ssim") return ErrorSource::ssim;
    throw ConfigError("unknown distance '" + s + "' (expected mse, pd, mse-pd or ssim)");
}

std::string to_string(ExtractorKind k) {
    return k == ExtractorKind::random_conv_pyramid ? "random_conv_pyramid" : "trained_encoder";
}

ExtractorKind parse_extractor_kind(const std::string& s) {
    if (s == "random_conv_pyramid") return ExtractorKind::random_conv_pyramid;
    if (s == "trained_encoder") return ExtractorKind::trained_encoder;
    throw ConfigError("unknown extractor '" + s + "' (expected random_conv_pyramid or trained_encoder)");
}

namespace {

Tensor as_nchw(const Tensor& x) {
    if (x.rank() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
    if (x.rank() != 4) throw ShapeError("expected an image [C,H,W] or batch [N,C,H,W], got " + shape_str(x.shape()));
    return x;
}

void check_pair(const Tensor& x, const Tensor& x_hat) {
    if (x.shape() != x_hat.shape()) {
        throw ShapeError("image " + shape_str(x.shape()) + " and reconstruction " + shape_str(x_hat.shape()) +
                         " differ in shape");
    }
}

std::vector<Tensor> uniform_weights(const std::vector<std::size_t>& widths) {
    std::vector<Tensor> g;
    for (auto c : widths) g.emplace_back(Shape{c}, 1.0 / static_cast<double>(c));
    return g;
}

// Unit-normalizes each spatial feature vector of [N, C, H, W] in place.
void normalize_channels_inplace(Tensor& f) {
    const std::size_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
    for (std::size_t b = 0; b < n; ++b) {
        double* base = f.ptr() + b * c * hw;
        for (std::size_t p = 0; p < hw; ++p) {
            double ss = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) ss += base[ch * hw + p] * base[ch * hw + p];
            const double inv = 1.0 / (std::sqrt(ss) + 1e-10);
            for (std::size_t ch = 0; ch < c; ++ch) base[ch * hw + p] *= inv;
        }
    }
}

}  // namespace

FeaturePyramidExtractor::FeaturePyramidExtractor(FeatureFn layers, std::vector<Tensor> channel_weights,
                                                 bool normalize_channels)
    : layers_(std::move(layers)), normalize_(normalize_channels) {
    set_channel_weights(std::move(channel_weights));
}

void FeaturePyramidExtractor::set_channel_weights(std::vector<Tensor> gamma) {
    if (gamma.empty()) throw ConfigError("feature extractor needs at least one layer");
    for (const auto& g : gamma) {
        if (g.rank() != 1) throw ShapeError("channel weights must be vectors");
        if (!(g.min() >= 0.0)) throw ConfigError("channel weights must be non-negative");
    }
    gamma_ = std::move(gamma);
}

FeaturePyramidExtractor FeaturePyramidExtractor::random_conv_pyramid(std::size_t channels, std::size_t depth,
                                                                     std::uint64_t seed, std::size_t base_width) {
    if (depth < 1) throw ConfigError("extractor depth must be >= 1");
    if (channels < 1 || base_width < 1) throw ConfigError("extractor needs at least one channel");
    Rng rng(derive_seed(seed, "perceptual.random_conv_pyramid"));
    auto kernels = std::make_shared<std::vector<Tensor>>();
    std::vector<std::size_t> widths;
    std::size_t cin = channels;
    for (std::size_t l = 0; l < depth; ++l) {
        const std::size_t cout = base_width << l;
        Tensor k({cout, cin, 3, 3});
        const double sd = std::sqrt(2.0 / (1.0 + 0.2 * 0.2) / static_cast<double>(cin * 9));
        for (auto& v : k.data()) v = sd * normal(rng);
        kernels->push_back(std::move(k));
        widths.push_back(cout);
        cin = cout;
    }
    FeatureFn fn = [kernels](const Tensor& batch) {
        NoGradGuard guard;
        std::vector<Tensor> out;
        Var h(batch);
        for (std::size_t l = 0; l < kernels->size(); ++l) {
            h = ops::leaky_relu(ops::conv2d(h, Var((*kernels)[l]), nullptr, l == 0 ? 1 : 2, 1), 0.2);
            out.push_back(h.value());
        }
        return out;
    };
    return FeaturePyramidExtractor(std::move(fn), uniform_weights(widths), true);
}

FeaturePyramidExtractor FeaturePyramidExtractor::trained_encoder(TrustMAEModel& model) {
    FeatureFn fn = [&model](const Tensor& batch) {
        NoGradGuard guard;
        const bool was_training = model.training();
        model.set_training(false);
        std::vector<Tensor> out;
        for (const auto& v : model.encoder_pyramid(Var(batch))) out.push_back(v.value());
        model.set_training(was_training);
        return out;
    };
    return FeaturePyramidExtractor(std::move(fn), uniform_weights(model.config().encoder_widths()), true);
}

std::vector<Tensor> FeaturePyramidExtractor::features(const Tensor& batch) const {
    auto f = layers_(as_nchw(batch));
    if (f.size() != gamma_.size()) throw ShapeError("extractor returned an unexpected number of levels");
    for (std::size_t l = 0; l < f.size(); ++l) {
        if (f[l].rank() != 4 || f[l].dim(1) != gamma_[l].numel()) {
            throw ShapeError("extractor level " + std::to_string(l) + " has shape " + shape_str(f[l].shape()) +
                             " but " + std::to_string(gamma_[l].numel()) + " channel weights");
        }
        if (normalize_) normalize_channels_inplace(f[l]);
    }
    return f;
}

std::vector<ErrorMap> perceptual_distance_maps(const Tensor& x, const Tensor& x_hat,
                                               const FeaturePyramidExtractor& extractor) {
    check_pair(x, x_hat);
    const Tensor xb = as_nchw(x), yb = as_nchw(x_hat);
    const std::size_t n = xb.dim(0), h = xb.dim(2), w = xb.dim(3);
    const auto fx = extractor.features(xb);
    const auto fy = extractor.features(yb);
    Tensor pd({n, 1, h, w}, 0.0);
    for (std::size_t l = 0; l < fx.size(); ++l) {
        const Tensor& gamma = extractor.channel_weights()[l];
        const std::size_t c = fx[l].dim(1), hl = fx[l].dim(2), wl = fx[l].dim(3), hw = hl * wl;
        // Square, aggregate channels, then resize the per-layer scalar map.
        Tensor agg({n, 1, hl, wl}, 0.0);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double* a = fx[l].ptr() + (b * c + ch) * hw;
                const double* e = fy[l].ptr() + (b * c + ch) * hw;
                double* dst = agg.ptr() + b * hw;
                for (std::size_t p = 0; p < hw; ++p) dst[p] += gamma[ch] * (a[p] - e[p]) * (a[p] - e[p]);
            }
        Tensor up = (hl == h && wl == w) ? agg : [&] {
            NoGradGuard guard;
            return ops::bilinear_upsample(Var(agg), h, w).value();
        }();
        for (std::size_t i = 0; i < pd.numel(); ++i) pd[i] += up[i];
    }
    std::vector<ErrorMap> out;
    for (std::size_t b = 0; b < n; ++b) {
        Tensor m({h, w}, std::vector<double>(pd.ptr() + b * h * w, pd.ptr() + (b + 1) * h * w));
        // Bilinear weights are convex, so negatives can only be rounding.
        for (auto& v : m.data()) v = std::max(v, 0.0);
        out.push_back({std::move(m), ErrorSource::pd});
    }
    return out;
}

ErrorMap perceptual_distance_map(const Tensor& x, const Tensor& x_hat, const FeaturePyramidExtractor& extractor) {
    return perceptual_distance_maps(x, x_hat, extractor).front();
}

std::vector<ErrorMap> mse_maps(const Tensor& x, const Tensor& x_hat) {
    check_pair(x, x_hat);
    const Tensor xb = as_nchw(x), yb = as_nchw(x_hat);
    const std::size_t n = xb.dim(0), c = xb.dim(1), hw = xb.dim(2) * xb.dim(3);
    std::vector<ErrorMap> out;
    for (std::size_t b = 0; b < n; ++b) {
        Tensor m({xb.dim(2), xb.dim(3)}, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* a = xb.ptr() + (b * c + ch) * hw;
            const double* e = yb.ptr() + (b * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) m[p] += (a[p] - e[p]) * (a[p] - e[p]);
        }
        for (auto& v : m.data()) v /= static_cast<double>(c);
        out.push_back({std::move(m), ErrorSource::mse});
    }
    return out;
}

std::vector<ErrorMap> combined_error_maps(const Tensor& x, const Tensor& x_hat,
                                          const FeaturePyramidExtractor& extractor) {
    auto mse = mse_maps(x, x_hat);
    auto pd = perceptual_distance_maps(x, x_hat, extractor);
    for (std::size_t b = 0; b < mse.size(); ++b) {
        for (std::size_t i = 0; i < mse[b].values.numel(); ++i) mse[b].values[i] *= pd[b].values[i];
        mse[b].source = ErrorSource::mse_pd;
    }
    return mse;
}

ErrorMap combined_error_map(const Tensor& x, const Tensor& x_hat, const FeaturePyramidExtractor& extractor) {
    return combined_error_maps(x, x_hat, extractor).front();
}

std::vector<ErrorMap> ssim_error_maps(const Tensor& x, const Tensor& x_hat, const LossConfig& cfg) {
    check_pair(x, x_hat);
    const Tensor xb = as_nchw(x), yb = as_nchw(x_hat);
    const Tensor s = ssim_map(xb, yb, cfg);
    const std::size_t n = xb.dim(0), c = xb.dim(1), hw = xb.dim(2) * xb.dim(3);
    std::vector<ErrorMap> out;
    for (std::size_t b = 0; b < n; ++b) {
        Tensor m({xb.dim(2), xb.dim(3)}, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* src = s.ptr() + (b * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) m[p] += (1.0 - src[p]) / static_cast<double>(c);
        }
        for (auto& v : m.data()) v = std::max(v, 0.0);
        out.push_back({std::move(m), ErrorSource::ssim});
    }
    return out;
}

std::vector<ErrorMap> error_maps(ErrorSource source, const Tensor& x, const Tensor& x_hat,
                                 const FeaturePyramidExtractor& extractor, const LossConfig& loss_cfg) {
    switch (source) {
        case ErrorSource::mse: return mse_maps(x, x_hat);
        case ErrorSource::pd: return perceptual_distance_maps(x, x_hat, extractor);
        case ErrorSource::mse_pd: return combined_error_maps(x, x_hat, extractor);
        case ErrorSource::ssim: return ssim_error_maps(x, x_hat, loss_cfg);
    }
    throw ConfigError("unknown error source");
}

}  // namespace tmae
