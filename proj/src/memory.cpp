#include "trustmae/memory.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "trustmae/error.hpp"
#include "trustmae/ops.hpp"
#include "trustmae/rng.hpp"

namespace tmae {

void AccessStats::resize(std::size_t m) {
    counts.assign(m, 0);
    assigned.assign(m, 0);
    assigned_distance_sum.assign(m, 0.0);
}

double AccessStats::mean_assigned_distance(std::size_t slot) const {
    return assigned[slot] ? assigned_distance_sum[slot] / static_cast<double>(assigned[slot]) : 0.0;
}

MemoryBank::MemoryBank(Tensor slot_values) : slots("memory.slots", std::move(slot_values)) {
    if (slots.value().rank() != 2) throw ShapeError("memory bank must be a [M, Z] matrix");
    slots.value().require_finite("memory slots");
    stats.resize(size());
}

MemoryBank MemoryBank::initialize(std::size_t m, std::size_t dim, std::uint64_t seed) {
    if (m < 1 || dim < 1) throw ConfigError("memory bank needs M >= 1 and Z >= 1");
    Rng rng(seed);
    Tensor t({m, dim});
    for (auto& v : t.data()) v = uniform(rng, -0.1, 0.1);
    return MemoryBank(std::move(t));
}

NearestPair nearest_two(const double* row, std::size_t m) {
    std::size_t a = 0, b = m > 1 ? 1 : 0;
    if (m > 1 && row[1] < row[0]) std::swap(a, b);
    for (std::size_t j = 2; j < m; ++j) {
        if (row[j] < row[a]) {
            b = a;
            a = j;
        } else if (row[j] < row[b]) {
            b = j;
        }
    }
    return {a, b};
}

namespace {

void check_feature(const Tensor& z, const MemoryBank& bank) {
    if (z.rank() != 1 || z.dim(0) != bank.dim()) {
        throw ShapeError("feature " + shape_str(z.shape()) + " does not match memory dimension " +
                         std::to_string(bank.dim()));
    }
    z.require_finite("feature vector");
}

Tensor distances_to(const Tensor& z, const MemoryBank& bank) {
    NoGradGuard guard;
    Var d = ops::pairwise_distance(Var(z.reshaped({1, z.numel()})), Var(bank.slots.value()));
    return d.value().reshaped({bank.size()});
}

}  // namespace

AddressingResult address(const Tensor& z, const MemoryBank& bank) {
    check_feature(z, bank);
    AddressingResult r;
    r.distances = distances_to(z, bank);
    Tensor neg = r.distances;
    for (auto& v : neg.data()) v = -v;
    {
        NoGradGuard guard;
        r.weights = ops::softmax(Var(neg)).value();
    }
    const auto nn = nearest_two(r.distances.ptr(), bank.size());
    r.nearest_index = nn.first;
    r.second_index = nn.second;
    return r;
}

AddressingResult address(const Tensor& z, const MemoryBank& bank, const AddressingConfig& cfg) {
    AddressingResult r = address(z, bank);
    if (cfg.sparse_enabled) r.weights = sparsify(r.weights, cfg.k);
    return r;
}

Tensor sparsify(const Tensor& w, std::size_t k) {
    if (w.rank() != 1) throw ShapeError("sparsify expects a weight vector");
    NoGradGuard guard;
    return ops::topk_renormalize(Var(w), k).value();
}

Tensor retrieve(const Tensor& w_hat, const MemoryBank& bank) {
    if (w_hat.rank() != 1 || w_hat.dim(0) != bank.size()) {
        throw ShapeError("addressing weights " + shape_str(w_hat.shape()) + " do not match " +
                         std::to_string(bank.size()) + " memory slots");
    }
    const std::size_t z = bank.dim();
    Tensor out({z}, 0.0);
    const double* m = bank.slots.value().ptr();
    for (std::size_t i = 0; i < bank.size(); ++i) {
        const double w = w_hat[i];
        if (w == 0.0) continue;
        for (std::size_t j = 0; j < z; ++j) out[j] += w * m[i * z + j];
    }
    return out;
}

double margin_loss(const Tensor& z, const MemoryBank& bank) {
    check_feature(z, bank);
    Tensor d = distances_to(z, bank);
    NoGradGuard guard;
    return ops::margin_loss(Var(d.reshaped({1, d.numel()}))).value().item();
}

int trust_label(double distance, double delta1, double delta2) {
    if (distance <= delta1) return 1;
    if (distance <= delta2) return -1;
    return 0;
}

double trust_loss_batch(const std::vector<Tensor>& features, const MemoryBank& bank, const TrustConfig& cfg) {
    if (features.empty()) throw ShapeError("trust_loss_batch: empty batch");
    if (!cfg.enabled) return 0.0;
    Tensor rows({features.size(), bank.dim()});
    for (std::size_t i = 0; i < features.size(); ++i) {
        check_feature(features[i], bank);
        std::copy(features[i].data().begin(), features[i].data().end(), rows.ptr() + i * bank.dim());
    }
    NoGradGuard guard;
    Var d = ops::pairwise_distance(Var(rows), Var(bank.slots.value()));
    return ops::trust_loss(d, cfg.effective_delta2()).value().item();
}

Var margin_loss(const Var& features, const Var& slots) {
    return ops::margin_loss(ops::pairwise_distance(features, slots));
}

Var trust_loss_batch(const Var& features, const Var& slots, const TrustConfig& cfg) {
    if (features.value().rank() != 2 || features.shape()[0] == 0) {
        throw ShapeError("trust_loss_batch: expected a nonempty [P, Z] feature matrix");
    }
    if (!cfg.enabled) return Var(Tensor::scalar(0.0));
    return ops::trust_loss(ops::pairwise_distance(features, slots), cfg.effective_delta2());
}

void record_access(const AddressingResult& result, MemoryBank& bank) {
    if (result.weights.numel() != bank.size()) throw ShapeError("record_access: slot count mismatch");
    if (bank.stats.counts.size() != bank.size()) bank.reset_stats();
    for (std::size_t i = 0; i < bank.size(); ++i) {
        if (result.weights[i] > 0.0) ++bank.stats.counts[i];
    }
    ++bank.stats.assigned[result.nearest_index];
    bank.stats.assigned_distance_sum[result.nearest_index] += result.distances[result.nearest_index];
}

MemoryBank prune(const MemoryBank& bank) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < bank.size(); ++i) {
        if (i < bank.stats.counts.size() && bank.stats.counts[i] > 0) keep.push_back(i);
    }
    if (keep.empty()) throw Error("prune: no memory slot was ever accessed; refusing to empty the bank");
    const std::size_t z = bank.dim();
    Tensor slots({keep.size(), z});
    for (std::size_t r = 0; r < keep.size(); ++r) {
        const double* src = bank.slots.value().ptr() + keep[r] * z;
        std::copy(src, src + z, slots.ptr() + r * z);
    }
    MemoryBank out(std::move(slots));
    for (std::size_t r = 0; r < keep.size(); ++r) {
        out.stats.counts[r] = bank.stats.counts[keep[r]];
        out.stats.assigned[r] = bank.stats.assigned[keep[r]];
        out.stats.assigned_distance_sum[r] = bank.stats.assigned_distance_sum[keep[r]];
    }
    return out;
}

double access_entropy(const std::vector<std::uint64_t>& counts) {
    double total = 0.0;
    for (auto c : counts) total += static_cast<double>(c);
    if (total <= 0.0) return 0.0;
    double h = 0.0;
    for (auto c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / total;
        h -= p * std::log(p);
    }
    return h;
}

void write_memory_stats_csv(const MemoryBank& bank, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "slot_index,access_count,mean_assigned_distance\n";
    out.precision(17);
    for (std::size_t i = 0; i < bank.size(); ++i) {
        const std::uint64_t c = i < bank.stats.counts.size() ? bank.stats.counts[i] : 0;
        out << i << ',' << c << ',';
        // Slots that were never the nearest one have no assigned distance.
        if (i < bank.stats.assigned.size() && bank.stats.assigned[i] > 0) out << bank.stats.mean_assigned_distance(i);
        out << '\n';
    }
}

namespace ops {

Var margin_loss(const Var& distances) {
    if (distances.value().rank() != 2) throw ShapeError("margin_loss: expected a [P, M] distance matrix");
    const std::size_t p = distances.shape()[0], m = distances.shape()[1];
    if (m < 2) throw ShapeError("margin_loss: needs at least two memory slots");
    const Tensor& d = distances.value();
    std::vector<NearestPair> pairs(p);
    std::vector<char> active(p, 0);
    double total = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        pairs[i] = nearest_two(d.ptr() + i * m, m);
        const double h = d.at(i, pairs[i].first) - d.at(i, pairs[i].second) + 1.0;
        if (h > 0.0) {
            total += h;
            active[i] = 1;
        }
    }
    const double np = static_cast<double>(p);
    return Var::make(Tensor::scalar(total / np), {distances},
                     [p, m, np, pairs = std::move(pairs), active = std::move(active)](Node& node) {
        Tensor g({p, m}, 0.0);
        const double s = node.grad[0] / np;
        for (std::size_t i = 0; i < p; ++i) {
            if (!active[i]) continue;
            g.at(i, pairs[i].first) += s;
            g.at(i, pairs[i].second) -= s;
        }
        node.inputs[0]->accumulate(g);
    });
}

Var trust_loss(const Var& distances, double delta2) {
    if (distances.value().rank() != 2) throw ShapeError("trust_loss: expected a [P, M] distance matrix");
    const std::size_t p = distances.shape()[0], m = distances.shape()[1];
    if (p == 0) throw ShapeError("trust_loss: empty batch");
    const Tensor& d = distances.value();
    std::vector<std::size_t> nearest(p);
    std::vector<double> sum(m, 0.0), count(m, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        nearest[i] = nearest_two(d.ptr() + i * m, m).first;
        sum[nearest[i]] += d.at(i, nearest[i]);
        count[nearest[i]] += 1.0;
    }
    std::vector<int> label(p);
    double total = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        const std::size_t j = nearest[i];
        const double delta1 = sum[j] / count[j];
        label[i] = trust_label(d.at(i, j), delta1, delta2);
        total += label[i] * d.at(i, j);
    }
    const double np = static_cast<double>(p);
    return Var::make(Tensor::scalar(total / np), {distances},
                     [p, m, np, nearest = std::move(nearest), label = std::move(label)](Node& node) {
        Tensor g({p, m}, 0.0);
        const double s = node.grad[0] / np;
        for (std::size_t i = 0; i < p; ++i) g.at(i, nearest[i]) = s * label[i];
        node.inputs[0]->accumulate(g);
    });
}

}  // namespace ops

}  // namespace tmae
