#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "trustmae/data.hpp"
#include "trustmae/losses.hpp"
#include "trustmae/model.hpp"

namespace tmae {

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    // Global gradient-norm clip; 0 disables it.
    double clip_norm = 0.0;
    // Derive the trust band scale from the nearest-slot distance histogram:
    // from the first batch, then from each finished epoch's distances.
    bool calibrate_delta2 = true;
    double calibration_quantile = 0.9;
    AugmentPolicy augment;
    std::uint64_t seed = 0;

    void validate() const;
};

// The trust-region distance that the calibration maps onto the chosen
// quantile of observed nearest-slot distances.
inline constexpr double kReferenceDelta2 = 20.0;

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t step = 0;
};

// One bias-corrected Adam update of `params` in place. Throws NumericalError
// naming the tensor when a gradient is not finite; nothing is modified then.
void adam_step(std::vector<Tensor*> params, const std::vector<Tensor>& grads, AdamState& state,
               const TrainConfig& cfg);
// Same, reading gradients from the parameters' tapes.
void adam_step(const std::vector<Parameter*>& params, AdamState& state, const TrainConfig& cfg);

struct TrainState {
    AdamState adam;
    std::uint64_t epoch = 0;
    std::uint64_t step = 0;
};

struct LossLogRow {
    std::uint64_t step = 0;
    LossBreakdown loss;
};

struct TrainResult {
    std::vector<LossLogRow> log;
    TrainState state;
};

// Called after every finished epoch, e.g. to write a checkpoint.
using EpochCallback = std::function<void(const TrustMAEModel&, const TrainState&)>;

// Trains on the sample images only; masks and defect flags are ignored.
// Resumes from `resume` when given. A non-finite loss or gradient throws
// NumericalError before the offending update is applied.
TrainResult train(TrustMAEModel& model, const std::vector<Sample>& samples, const TrainConfig& cfg,
                  const LossConfig& loss_cfg, const TrainState* resume = nullptr, const EpochCallback& on_epoch = {});

// Returns the q-quantile of nearest-slot distances of the given images
// divided by kReferenceDelta2 (eval mode, no tape).
double calibrate_delta2_scale(TrustMAEModel& model, const std::vector<Sample>& samples, double quantile,
                              std::size_t batch_size = 16);

void write_loss_log_csv(const std::vector<LossLogRow>& log, const std::filesystem::path& path);

}  // namespace tmae
