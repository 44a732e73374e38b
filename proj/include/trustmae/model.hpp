#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trustmae/autograd.hpp"
#include "trustmae/memory.hpp"
#include "trustmae/ops.hpp"

namespace tmae {

struct ModelConfig {
    std::size_t input_height = 64;
    std::size_t input_width = 64;
    std::size_t channels = 1;
    std::size_t downsample_layers = 2;
    std::size_t residual_blocks = 3;
    std::size_t latent_dim = 64;
    std::size_t memory_slots = 32;
    std::size_t base_width = 16;
    AddressingConfig addressing;
    TrustConfig trust;
    bool memory_enabled = true;

    void validate() const;
    std::size_t grid_height() const { return input_height >> downsample_layers; }
    std::size_t grid_width() const { return input_width >> downsample_layers; }
    // Channel width after the stem (index 0) and after each down-sampling layer.
    std::vector<std::size_t> encoder_widths() const;
};

struct Conv2d {
    Parameter kernel;
    std::optional<Parameter> bias;
    int stride = 1;
    int padding = 0;
    bool transposed = false;

    Var forward(const Var& x) const;
};

struct BatchNorm {
    Parameter gamma;
    Parameter beta;
    Tensor running_mean;
    Tensor running_var;

    Var forward(const Var& x, bool training);
};

struct ConvBnRelu {
    Conv2d conv;
    BatchNorm norm;

    Var forward(const Var& x, bool training);
};

// conv -> norm -> relu -> conv -> norm, plus identity skip.
struct ResidualBlock {
    ConvBnRelu first;
    Conv2d second;
    BatchNorm second_norm;

    Var forward(const Var& x, bool training);
};

struct ForwardResult {
    Var features;         // [N*h*w, Z]; row n*h*w + i*w + j is z at (i, j) of image n
    Var approx_features;  // [N*h*w, Z]; equals features when memory is bypassed
    Var reconstruction;   // [N, C, H, W]
    Var distances;        // [N*h*w, M]; undefined when memory is bypassed
    Tensor weights;       // [N*h*w, M] addressing weights actually used
    std::size_t batch = 0;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;

    std::size_t positions() const { return batch * grid_h * grid_w; }
    AddressingResult addressing(std::size_t row) const;
};

// Named non-trainable state (normalization statistics, memory counters).
struct NamedBuffer {
    std::string name;
    Tensor* tensor;
};

class TrustMAEModel {
public:
    static TrustMAEModel build(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    ModelConfig& mutable_config() { return config_; }
    MemoryBank& bank() { return bank_; }
    const MemoryBank& bank() const { return bank_; }
    void replace_bank(MemoryBank bank);

    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }

    // x: [N, C, H, W] or [C, H, W]. Returns [N, Z, h, w].
    Var encode(const Var& x);
    // Single image [C, H, W] -> feature map [h, w, Z].
    Tensor encode(const Tensor& image);
    Var decode(const Var& latent);
    ForwardResult forward(const Var& x);
    // Activations after the stem and each down-sampling layer.
    std::vector<Var> encoder_pyramid(const Var& x);

    std::vector<Parameter*> parameters();
    std::vector<NamedBuffer> buffers();
    std::size_t parameter_count();

private:
    Var as_batch(const Var& x) const;

    ModelConfig config_;
    bool training_ = true;
    ConvBnRelu stem_;
    std::vector<ConvBnRelu> down_;
    std::vector<ResidualBlock> enc_res_;
    MemoryBank bank_;
    std::vector<ResidualBlock> dec_res_;
    std::vector<ConvBnRelu> up_;
    Conv2d head_;
};

}  // namespace tmae
