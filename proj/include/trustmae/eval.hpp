#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "trustmae/data.hpp"
#include "trustmae/losses.hpp"
#include "trustmae/model.hpp"
#include "trustmae/perceptual.hpp"
#include "trustmae/training.hpp"

namespace tmae {

enum class Pooling { max, mean };

double defect_score(const ErrorMap& map, Pooling pooling);

// Mann-Whitney U / (n+ * n-) with mid-ranks, so ties count one half.
// Labels are 0/1; both classes must be present.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Pixel-level AUC. Pooled over all pixels of all images by default;
// per_image averages the AUC of every image whose mask has both classes.
double pixel_auc(const std::vector<ErrorMap>& maps, const std::vector<Tensor>& masks, bool per_image = false);

// values > threshold, as a {0,1} tensor.
Tensor segment(const ErrorMap& map, double threshold);

struct EvalConfig {
    ErrorSource distance = ErrorSource::mse_pd;
    ExtractorKind extractor = ExtractorKind::random_conv_pyramid;
    std::size_t extractor_depth = 3;
    bool per_image_pixel_auc = false;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EvalRow {
    std::string source_id;
    double score_max = 0.0;
    double score_mean = 0.0;
    bool is_defective = false;
};

struct EvalReport {
    double image_auc_max = 0.0;   // NaN when the test set has a single class
    double image_auc_mean = 0.0;
    std::optional<double> pixel_auc;
    std::vector<EvalRow> rows;
    std::string fingerprint;
};

// Builds the feature extractor requested by cfg for this model.
FeaturePyramidExtractor make_extractor(TrustMAEModel& model, const EvalConfig& cfg);

// Reconstructs and scores every sample (eval mode). Maps are appended to
// maps_out when given.
EvalReport evaluate(TrustMAEModel& model, const std::vector<Sample>& samples, const EvalConfig& cfg,
                    const LossConfig& loss_cfg, std::vector<ErrorMap>* maps_out = nullptr);

void write_eval_report_csv(const EvalReport& report, const std::filesystem::path& path);

// 16-bit PNG of the min-max normalized map plus <stem>_bounds.csv (min,max)
// next to it.
void write_heatmap(const ErrorMap& map, const std::filesystem::path& png_path);

// An ablation setting for sweeps.
struct Variant {
    std::string name;
    bool memory_enabled = true;
    bool sparse_addressing = true;
    bool trust_region = true;
    ErrorSource distance = ErrorSource::mse_pd;
};

// full, no-trust-region, no-sparse, full-mse, plain-ae-mse.
std::vector<Variant> standard_variants();
Variant find_variant(const std::string& name);

struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    LossConfig loss;
    EvalConfig eval;
    std::uint64_t seed = 0;
};

// cfg with the variant's ablation switches and scoring distance applied.
ExperimentConfig apply_variant(ExperimentConfig cfg, const Variant& v);

// Builds a model from the experiment seed, trains on dataset.train and
// evaluates on dataset.test.
EvalReport train_and_evaluate(const Dataset& dataset, const ExperimentConfig& cfg, TrustMAEModel* trained = nullptr);

struct SweepRow {
    double noise = 0.0;
    std::string variant;
    double image_auc_max = 0.0;
    double image_auc_mean = 0.0;
    std::optional<double> pixel_auc;
};

// Every (level, variant) cell regenerates the dataset at that noise level
// and trains from the same seed. Variants that differ only in the scoring
// distance share one trained model.
std::vector<SweepRow> noise_sweep(const DatasetSpec& base, const std::vector<double>& levels,
                                  const ExperimentConfig& cfg, const std::vector<Variant>& variants);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

struct Delta2Row {
    double delta2 = 0.0;
    double delta2_scale = 1.0;
    double image_auc_max = 0.0;
    double image_auc_mean = 0.0;
};

std::vector<Delta2Row> delta2_sweep(const Dataset& dataset, const std::vector<double>& values,
                                    const ExperimentConfig& cfg);
void write_delta2_csv(const std::vector<Delta2Row>& rows, const std::filesystem::path& path);

struct MemoryAccessReport {
    std::vector<std::uint64_t> counts;
    double entropy = 0.0;
};

// One statistics pass over the images: resets and repopulates the bank's
// access statistics.
MemoryAccessReport memory_access_report(TrustMAEModel& model, const std::vector<Sample>& samples,
                                        std::size_t batch_size = 16);

}  // namespace tmae
