#pragma once

#include <filesystem>

#include "trustmae/model.hpp"
#include "trustmae/training.hpp"

namespace tmae {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    TrustMAEModel model;
    TrainState state;
};

// Little-endian: "TMAE", u32 version, u32-length-prefixed JSON header (model
// config and training counters), u32 tensor count, then per tensor a
// u32-length-prefixed name, u8 dtype (1 = f64), u32 rank, u64 dims and the
// row-major data; a trailing CRC32 covers every preceding byte. The file is
// written to a temporary name and renamed, so a failed write leaves any
// previous checkpoint intact.
void save_checkpoint(TrustMAEModel& model, const TrainState& state, const std::filesystem::path& path);

// Errors: CorruptFileError (bad magic, truncation, CRC), VersionMismatchError,
// ShapeMismatchError naming the first offending tensor.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Loads into an existing model whose configuration must produce the same
// tensor table. state may be null.
void restore_checkpoint(const std::filesystem::path& path, TrustMAEModel& model, TrainState* state);

}  // namespace tmae
