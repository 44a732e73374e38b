#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "trustmae/autograd.hpp"

namespace tmae {

struct AddressingConfig {
    std::size_t k = 3;
    bool sparse_enabled = true;
};

// delta2 is the trust threshold in the same units as latent distances
// once multiplied by `scale` (see calibrate_trust_scale).
struct TrustConfig {
    double delta2 = 20.0;
    bool enabled = true;
    double scale = 1.0;

    double effective_delta2() const { return delta2 * scale; }
};

// Per-slot statistics collected by record_access.
struct AccessStats {
    std::vector<std::uint64_t> counts;           // top-k selections
    std::vector<std::uint64_t> assigned;         // times the slot was the nearest
    std::vector<double> assigned_distance_sum;   // sum of those nearest distances

    void resize(std::size_t m);
    double mean_assigned_distance(std::size_t slot) const;
};

// M x Z matrix of feature prototypes.
struct MemoryBank {
    Parameter slots;
    AccessStats stats;

    MemoryBank() = default;
    explicit MemoryBank(Tensor slot_values);

    // Slots drawn i.i.d. uniform in [-0.1, 0.1].
    static MemoryBank initialize(std::size_t slots, std::size_t dim, std::uint64_t seed);

    std::size_t size() const { return slots.value().dim(0); }
    std::size_t dim() const { return slots.value().dim(1); }
    const std::vector<std::uint64_t>& access_counts() const { return stats.counts; }
    void reset_stats() { stats.resize(size()); }
};

struct AddressingResult {
    Tensor weights;    // [M], after sparsification when enabled
    Tensor distances;  // [M], euclidean
    std::size_t nearest_index = 0;
    std::size_t second_index = 0;
};

// Softmax over negative euclidean distances (dense weights).
AddressingResult address(const Tensor& z, const MemoryBank& bank);
// As above, then sparsified when cfg.sparse_enabled.
AddressingResult address(const Tensor& z, const MemoryBank& bank, const AddressingConfig& cfg);

// k largest weights kept and renormalized. A zero kept mass yields a
// one-hot at index 0 and a warning.
Tensor sparsify(const Tensor& w, std::size_t k);

// z_hat = w_hat · M
Tensor retrieve(const Tensor& w_hat, const MemoryBank& bank);

// [d1 - d2 + 1]_+ over the two nearest slots.
double margin_loss(const Tensor& z, const MemoryBank& bank);

// +1 inside delta1, -1 in (delta1, delta2], 0 beyond.
int trust_label(double distance, double delta1, double delta2);

// Mean of r * d over the features, with per-slot adaptive delta1.
double trust_loss_batch(const std::vector<Tensor>& features, const MemoryBank& bank, const TrustConfig& cfg);

// Differentiable forms over a feature matrix [P, Z] and slots [M, Z].
Var margin_loss(const Var& features, const Var& slots);
Var trust_loss_batch(const Var& features, const Var& slots, const TrustConfig& cfg);

void record_access(const AddressingResult& result, MemoryBank& bank);

// Drops slots with zero access count, preserving order.
MemoryBank prune(const MemoryBank& bank);

// Shannon entropy (nats) of the normalized access-count histogram.
double access_entropy(const std::vector<std::uint64_t>& counts);

// slot_index,access_count,mean_assigned_distance
void write_memory_stats_csv(const MemoryBank& bank, const std::filesystem::path& path);

// Nearest and second-nearest slot of each row of a distance matrix
// (ties toward the lower index).
struct NearestPair {
    std::size_t first, second;
};
NearestPair nearest_two(const double* row, std::size_t m);

namespace ops {

// Differentiable batched forms over a distance matrix D[P, M].

// mean over rows of [d1 - d2 + 1]_+ ; requires M >= 2.
Var margin_loss(const Var& distances);

// mean over rows of r * d_nearest. delta1 and the labels carry no
// gradient; rows beyond delta2 contribute zero.
Var trust_loss(const Var& distances, double delta2);

}  // namespace ops

}  // namespace tmae
