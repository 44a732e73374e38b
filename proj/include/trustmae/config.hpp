#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "trustmae/data.hpp"
#include "trustmae/eval.hpp"
#include "trustmae/losses.hpp"
#include "trustmae/model.hpp"
#include "trustmae/training.hpp"

namespace tmae {

// Everything a CLI run needs. Serialized as a flat JSON object with dotted
// keys ("model.memory_slots", "train.lr", ...). The single seed feeds every
// subsystem through derive_seed.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    LossConfig loss;
    DatasetSpec data;
    EvalConfig eval;
    std::string output_dir = "out";
    std::uint64_t seed = 0;

    RunConfig();
    void validate() const;
    ExperimentConfig experiment() const;
    DatasetSpec dataset_spec() const;
};

// Every accepted key, in serialization order.
std::vector<std::string> config_keys();

nlohmann::ordered_json to_json(const RunConfig& cfg);
// Applies the keys present in j on top of base; unknown keys and values of
// the wrong type raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = RunConfig{});
// key=value override; the value is read as JSON when it parses, else as a string.
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = RunConfig{});
void write_run_config(const RunConfig& cfg, const std::filesystem::path& path);

nlohmann::ordered_json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace tmae
