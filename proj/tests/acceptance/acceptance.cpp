// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Pass criterion numbers to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "trustmae/checkpoint.hpp"
#include "trustmae/config.hpp"
#include "trustmae/error.hpp"
#include "trustmae/eval.hpp"
#include "trustmae/grad_suite.hpp"
#include "trustmae/log.hpp"
#include "trustmae/memory.hpp"
#include "trustmae/rng.hpp"

using namespace tmae;

namespace {

// Tolerances and bounds.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSuiteSeconds = 120.0;
constexpr std::size_t kAddressingTrials = 10000;
constexpr double kSoftmaxSumTol = 1e-9;
constexpr double kSparseSumTol = 1e-6;
constexpr double kAddressingSeconds = 60.0;
constexpr double kHandExampleTol = 1e-12;
constexpr double kHandExampleLoss = -1.0;
constexpr double kTrustStepEta = 1e-4;
constexpr std::size_t kTrustStepTrials = 200;
constexpr double kAucFloor = 0.85;
constexpr double kAucGapOverPlain = 0.05;
constexpr double kLowNoiseNonInferiority = 0.02;
constexpr double kPruneReconTol = 1e-9;
constexpr double kDelta2Spread = 0.05;
constexpr double kSsimTol = 1e-12;
constexpr std::size_t kSsimPairs = 100;
constexpr double kDeterminismTol = 1e-9;

// Benchmark: the default RunConfig with this seed, at training noise 0.3
// (and 0.05 for the low-noise ablation). Achieved values from the reference
// run are pinned below and reported next to each measurement.
constexpr std::uint64_t kBenchSeed = 7;
constexpr double kHighNoise = 0.3;
constexpr double kLowNoise = 0.05;
constexpr double kPinnedFullAuc = 0.9280;
constexpr double kPinnedPlainAuc = 0.7512;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = true;
    std::string detail;
};

std::string fmt(double v, int digits = 4) {
    std::ostringstream s;
    s.precision(digits);
    s << std::fixed << v;
    return s.str();
}

std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = uniform(rng, lo, hi);
    return t;
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite_check() {
    const auto t0 = Clock::now();
    const auto results = gradient_suite(3);
    const double secs = seconds_since(t0);
    Outcome o;
    double worst = 0.0;
    std::string worst_name;
    std::size_t failed = 0;
    for (const auto& r : results) {
        if (!(r.error <= kGradTolerance)) ++failed;
        if (!(r.error <= worst)) {
            worst = r.error;
            worst_name = r.name;
        }
    }
    o.pass = failed == 0 && !results.empty() && secs <= kGradSuiteSeconds;
    o.detail = std::to_string(results.size()) + " checks, " + std::to_string(failed) + " above " +
               sci(kGradTolerance) + ", worst " + worst_name + " " + sci(worst) + ", " +
               fmt(secs, 1) + "s";
    return o;
}

// ---------------------------------------------------------------- 2

// Indices of the k largest entries, ties toward the lower index.
std::vector<std::size_t> expected_support(const Tensor& w, std::size_t k) {
    std::vector<std::size_t> idx(w.numel());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

Outcome addressing_check() {
    const auto t0 = Clock::now();
    Rng rng(derive_seed(kBenchSeed, "acceptance.addressing"));
    std::size_t bad_softmax = 0, bad_sparse = 0, bad_ties = 0, bad_retrieve = 0;
    for (std::size_t trial = 0; trial < kAddressingTrials; ++trial) {
        const auto m = static_cast<std::size_t>(uniform_int(rng, 1, 24));
        const auto z = static_cast<std::size_t>(uniform_int(rng, 1, 8));
        const auto k = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<std::int64_t>(m)));
        MemoryBank bank(random_tensor({m, z}, rng, -2.0, 2.0));
        const Tensor feat = random_tensor({z}, rng, -2.0, 2.0);

        const AddressingResult dense = address(feat, bank);
        if (std::abs(dense.weights.sum() - 1.0) > kSoftmaxSumTol) ++bad_softmax;

        const Tensor sparse = sparsify(dense.weights, k);
        std::size_t positive = 0;
        for (double v : sparse.data()) positive += v > 0.0;
        if (positive > k || std::abs(sparse.sum() - 1.0) > kSparseSumTol) ++bad_sparse;

        // Coarsely quantized weights produce frequent ties.
        Tensor tied({m});
        for (auto& v : tied.data()) v = static_cast<double>(uniform_int(rng, 1, 4)) / 8.0;
        const Tensor a = sparsify(tied, k), b = sparsify(tied, k);
        std::vector<std::size_t> support;
        for (std::size_t i = 0; i < m; ++i)
            if (a[i] > 0.0) support.push_back(i);
        if (!(a == b) || support != expected_support(tied, k)) ++bad_ties;

        Tensor brute({z}, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            if (sparse[i] <= 0.0) continue;
            for (std::size_t j = 0; j < z; ++j) brute[j] += sparse[i] * bank.slots.value().at(i, j);
        }
        if (!(retrieve(sparse, bank) == brute)) ++bad_retrieve;
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = bad_softmax + bad_sparse + bad_ties + bad_retrieve == 0 && secs <= kAddressingSeconds;
    o.detail = std::to_string(kAddressingTrials) + " trials; violations softmax " + std::to_string(bad_softmax) +
               ", sparsify " + std::to_string(bad_sparse) + ", tie-break " + std::to_string(bad_ties) +
               ", retrieve " + std::to_string(bad_retrieve) + ", " + fmt(secs, 1) + "s";
    return o;
}

// ---------------------------------------------------------------- 3

Outcome trust_region_check() {
    Outcome o;
    std::size_t grid_bad = 0, grid_total = 0;
    for (auto [d1, d2] : std::vector<std::pair<double, double>>{{2.0, 20.0}, {0.5, 15.0}, {7.25, 40.0}}) {
        const double eps = 1e-9;
        const std::vector<std::pair<double, int>> grid{
            {d1 - eps, 1}, {d1, 1}, {d1 + eps, -1}, {d2, -1}, {d2 + eps, 0}};
        for (auto [d, want] : grid) {
            ++grid_total;
            grid_bad += trust_label(d, d1, d2) != want;
        }
    }

    MemoryBank one(Tensor({1, 1}, 0.0));
    const double hand = trust_loss_batch({Tensor::from({1.0}), Tensor::from({3.0})}, one, TrustConfig{20.0, true, 1.0});
    const bool hand_ok = std::abs(hand - kHandExampleLoss) <= kHandExampleTol;

    Rng rng(derive_seed(kBenchSeed, "acceptance.trust"));
    std::size_t pulled = 0, pushed = 0, wrong = 0;
    for (std::size_t trial = 0; trial < kTrustStepTrials; ++trial) {
        const std::size_t p = 12, m = 3, z = 3;
        Tensor feats = random_tensor({p, z}, rng, -3.0, 3.0);
        Tensor slots = random_tensor({m, z}, rng, -3.0, 3.0);
        const double delta2 = uniform(rng, 1.0, 6.0);
        Var f(feats, true);
        trust_loss_batch(f, Var(slots), TrustConfig{delta2, true, 1.0}).backward();

        auto dist = [&](const Tensor& x, std::size_t row, std::size_t slot) {
            double ss = 0.0;
            for (std::size_t j = 0; j < z; ++j) {
                const double d = x.at(row, j) - slots.at(slot, j);
                ss += d * d;
            }
            return std::sqrt(ss);
        };
        std::vector<std::size_t> nearest(p);
        std::vector<double> sum(m, 0.0), cnt(m, 0.0);
        for (std::size_t i = 0; i < p; ++i) {
            std::size_t best = 0;
            for (std::size_t s = 1; s < m; ++s)
                if (dist(feats, i, s) < dist(feats, i, best)) best = s;
            nearest[i] = best;
            sum[best] += dist(feats, i, best);
            cnt[best] += 1.0;
        }
        Tensor stepped = feats;
        for (std::size_t i = 0; i < stepped.numel(); ++i) stepped[i] -= kTrustStepEta * f.grad()[i];
        for (std::size_t i = 0; i < p; ++i) {
            const std::size_t s = nearest[i];
            const double before = dist(feats, i, s), after = dist(stepped, i, s);
            const double delta1 = sum[s] / cnt[s];
            if (before <= delta1) {
                ++pulled;
                wrong += !(after < before);
            } else if (before <= delta2) {
                ++pushed;
                wrong += !(after > before);
            }
        }
    }
    o.pass = grid_bad == 0 && hand_ok && wrong == 0 && pulled > 0 && pushed > 0;
    o.detail = "boundary grid " + std::to_string(grid_total - grid_bad) + "/" + std::to_string(grid_total) +
               ", hand batch loss " + fmt(hand, 12) + ", gradient step: " + std::to_string(pulled) + " pulled, " +
               std::to_string(pushed) + " pushed, " + std::to_string(wrong) + " wrong direction";
    return o;
}

// ------------------------------------------------------- benchmark runs

RunConfig bench_config() {
    RunConfig rc;
    rc.seed = kBenchSeed;
    return rc;
}

struct TrainedRun {
    TrustMAEModel model;
    EvalReport report;
    double seconds = 0.0;
};

class Bench {
public:
    const Dataset& data(double noise) {
        auto it = data_.find(noise);
        if (it == data_.end()) {
            DatasetSpec spec = bench_config().dataset_spec();
            spec.noise_fraction = noise;
            it = data_.emplace(noise, generate_dataset(spec)).first;
        }
        return it->second;
    }

    // Trains once per (noise, ablation switches, delta2); other scoring
    // distances reuse the trained model.
    TrainedRun& run(double noise, const Variant& v, double delta2 = 0.0) {
        ExperimentConfig cfg = apply_variant(bench_config().experiment(), v);
        if (delta2 > 0.0) cfg.model.trust.delta2 = delta2;
        std::ostringstream key;
        key << noise << '/' << v.memory_enabled << v.sparse_addressing << v.trust_region << '/'
            << cfg.model.trust.delta2;
        auto it = runs_.find(key.str());
        if (it == runs_.end()) {
            const auto t0 = Clock::now();
            TrustMAEModel m = TrustMAEModel::build(cfg.model, cfg.seed);
            train(m, data(noise).train, cfg.train, cfg.loss);
            TrainedRun r{std::move(m), {}, seconds_since(t0)};
            it = runs_.emplace(key.str(), std::move(r)).first;
            log_info("trained " + key.str() + " in " + fmt(it->second.seconds, 1) + "s");
        }
        it->second.report = evaluate(it->second.model, data(noise).test, cfg.eval, cfg.loss);
        return it->second;
    }

    double auc(double noise, const std::string& variant, double delta2 = 0.0) {
        return run(noise, find_variant(variant), delta2).report.image_auc_max;
    }

private:
    std::map<double, Dataset> data_;
    std::map<std::string, TrainedRun> runs_;
};

// ---------------------------------------------------------------- 4

Outcome noise_robustness_check(Bench& bench) {
    const auto t0 = Clock::now();
    const double full = bench.auc(kHighNoise, "full");
    const double plain = bench.auc(kHighNoise, "plain-ae-mse");
    Outcome o;
    o.pass = full >= kAucFloor && full - plain >= kAucGapOverPlain;
    o.detail = "p=0.3 AUC(max) full " + fmt(full) + " (pinned " + fmt(kPinnedFullAuc) + ", floor " + fmt(kAucFloor, 2) +
               "), plain-ae-mse " + fmt(plain) + " (pinned " + fmt(kPinnedPlainAuc) + "), gap " + fmt(full - plain) +
               " (need " + fmt(kAucGapOverPlain, 2) + "), " + fmt(seconds_since(t0), 0) + "s";
    return o;
}

// ---------------------------------------------------------------- 5

Outcome ablation_check(Bench& bench) {
    const auto t0 = Clock::now();
    const double full = bench.auc(kHighNoise, "full");
    const double no_tr = bench.auc(kHighNoise, "no-trust-region");
    const double full_mse = bench.auc(kHighNoise, "full-mse");
    const double low_full = bench.auc(kLowNoise, "full");
    const double low_no_tr = bench.auc(kLowNoise, "no-trust-region");
    Outcome o;
    o.pass = full >= no_tr && full >= full_mse && low_full >= low_no_tr - kLowNoiseNonInferiority;
    o.detail = "p=0.3 full " + fmt(full) + " vs no-TR " + fmt(no_tr) + ", mse-pd " + fmt(full) + " vs mse " +
               fmt(full_mse) + "; p=0.05 full " + fmt(low_full) + " vs no-TR " + fmt(low_no_tr) + " (margin " +
               fmt(kLowNoiseNonInferiority, 2) + "), " + fmt(seconds_since(t0), 0) + "s";
    return o;
}

// ---------------------------------------------------------------- 6

Tensor reconstructions(TrustMAEModel& model, const std::vector<Sample>& samples) {
    model.set_training(false);
    NoGradGuard guard;
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    return model.forward(Var(batch_images(samples, idx))).reconstruction.value();
}

Outcome memory_access_check(Bench& bench) {
    Outcome o;
    // An independent copy, so later criteria still see the trained model.
    const auto path = std::filesystem::temp_directory_path() / "tmae_acceptance_memory.tmae";
    save_checkpoint(bench.run(kHighNoise, find_variant("full")).model, TrainState{}, path);
    TrustMAEModel model = load_checkpoint(path).model;
    std::filesystem::remove(path);
    const auto& stats_set = bench.data(kHighNoise).train;

    const std::size_t m = model.config().memory_slots;
    const std::size_t k = model.config().addressing.k;
    const MemoryAccessReport sparse = memory_access_report(model, stats_set);
    model.mutable_config().addressing.k = m;
    const MemoryAccessReport dense = memory_access_report(model, stats_set);
    model.mutable_config().addressing.k = k;

    const MemoryAccessReport again = memory_access_report(model, stats_set);
    const Tensor before = reconstructions(model, stats_set);
    const MemoryBank original = model.bank();
    model.replace_bank(prune(model.bank()));
    const Tensor after = reconstructions(model, stats_set);

    std::vector<std::size_t> used;
    for (std::size_t i = 0; i < m; ++i)
        if (again.counts[i] > 0) used.push_back(i);
    bool rows_ok = model.bank().size() == used.size();
    for (std::size_t r = 0; rows_ok && r < used.size(); ++r)
        for (std::size_t j = 0; j < original.dim(); ++j)
            rows_ok = rows_ok && model.bank().slots.value().at(r, j) == original.slots.value().at(used[r], j);
    const double diff = max_abs_diff(before, after);

    o.pass = sparse.entropy < dense.entropy && rows_ok && diff <= kPruneReconTol;
    o.detail = "entropy k=" + std::to_string(k) + " " + fmt(sparse.entropy) + " < dense k=" + std::to_string(m) + " " +
               fmt(dense.entropy) + "; prune kept " + std::to_string(used.size()) + "/" + std::to_string(m) +
               " slots (only zero-count removed: " + (rows_ok ? "yes" : "no") + "), max reconstruction change " +
               sci(diff);
    return o;
}

// ---------------------------------------------------------------- 7

Outcome delta2_check(Bench& bench) {
    const auto t0 = Clock::now();
    std::vector<double> aucs;
    std::string listing;
    for (double d2 : {15.0, 20.0, 40.0}) {
        aucs.push_back(bench.auc(kHighNoise, "full", d2));
        listing += (listing.empty() ? "" : ", ") + std::string("delta2=") + fmt(d2, 0) + " " + fmt(aucs.back());
    }
    const auto [lo, hi] = std::minmax_element(aucs.begin(), aucs.end());
    Outcome o;
    o.pass = *hi - *lo <= kDelta2Spread;
    o.detail = listing + "; spread " + fmt(*hi - *lo) + " (max " + fmt(kDelta2Spread, 2) + "), " +
               fmt(seconds_since(t0), 0) + "s";
    return o;
}

// ---------------------------------------------------------------- 8

// Fraction of (positive, negative) pairs ranked correctly, ties as one half.
double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j] != 0) continue;
            pairs += 1.0;
            wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    }
    return wins / pairs;
}

Outcome metric_oracle_check() {
    Rng rng(derive_seed(kBenchSeed, "acceptance.metrics"));
    std::size_t auc_cases = 0, auc_bad = 0;
    for (std::size_t n = 2; n <= 8; ++n) {
        for (int rep = 0; rep < 4; ++rep) {
            std::vector<double> scores(n);
            // Small integer scores so ties occur.
            for (auto& s : scores) s = static_cast<double>(uniform_int(rng, 0, 4));
            for (std::uint32_t bits = 1; bits + 1 < (1u << n); ++bits) {
                std::vector<int> labels(n);
                for (std::size_t i = 0; i < n; ++i) labels[i] = (bits >> i) & 1u;
                ++auc_cases;
                auc_bad += roc_auc(scores, labels) != pair_count_auc(scores, labels);
            }
        }
    }

    std::size_t pix_cases = 0, pix_bad = 0;
    while (pix_cases < 200) {
        const auto h = static_cast<std::size_t>(uniform_int(rng, 1, 4));
        const auto w = static_cast<std::size_t>(uniform_int(rng, 1, 4));
        const auto count = static_cast<std::size_t>(uniform_int(rng, 1, 3));
        std::vector<ErrorMap> maps;
        std::vector<Tensor> masks;
        std::vector<double> flat_scores;
        std::vector<int> flat_labels;
        for (std::size_t c = 0; c < count; ++c) {
            ErrorMap em{Tensor({h, w}), ErrorSource::mse_pd};
            Tensor mask({h, w});
            for (std::size_t i = 0; i < h * w; ++i) {
                em.values[i] = static_cast<double>(uniform_int(rng, 0, 5)) / 5.0;
                mask[i] = static_cast<double>(uniform_int(rng, 0, 1));
                flat_scores.push_back(em.values[i]);
                flat_labels.push_back(static_cast<int>(mask[i]));
            }
            maps.push_back(em);
            masks.push_back(mask);
        }
        const auto pos = std::count(flat_labels.begin(), flat_labels.end(), 1);
        if (pos == 0 || pos == static_cast<long>(flat_labels.size())) continue;
        ++pix_cases;
        pix_bad += pixel_auc(maps, masks) != roc_auc(flat_scores, flat_labels);
    }

    const LossConfig lc;
    std::size_t ssim_bad = 0;
    double worst = 0.0;
    for (std::size_t i = 0; i < kSsimPairs; ++i) {
        const Tensor p = random_tensor({1, 16, 16}, rng), q = random_tensor({1, 16, 16}, rng);
        const Tensor self = ssim_map(p, p, lc);
        const Tensor pq = ssim_map(p, q, lc), qp = ssim_map(q, p, lc);
        double e = 0.0;
        for (double v : self.data()) e = std::max(e, std::abs(v - 1.0));
        e = std::max(e, max_abs_diff(pq, qp));
        worst = std::max(worst, e);
        ssim_bad += e > kSsimTol;
    }

    Outcome o;
    o.pass = auc_bad == 0 && pix_bad == 0 && ssim_bad == 0;
    o.detail = "roc_auc vs pair counting " + std::to_string(auc_cases - auc_bad) + "/" + std::to_string(auc_cases) +
               " exact; pixel_auc vs flattened " + std::to_string(pix_cases - pix_bad) + "/" +
               std::to_string(pix_cases) + " exact; SSIM identity/symmetry over " + std::to_string(kSsimPairs) +
               " pairs, worst deviation " + sci(worst);
    return o;
}

// ---------------------------------------------------------------- 9

// Training masks stay in memory only; the folder layout has none to compare.
bool same_samples(const std::vector<Sample>& a, const std::vector<Sample>& b, bool masks) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].source_id != b[i].source_id || a[i].is_defective != b[i].is_defective) return false;
        if (!(a[i].image == b[i].image)) return false;
        if (!masks) continue;
        if (a[i].mask.has_value() != b[i].mask.has_value()) return false;
        if (a[i].mask && !(*a[i].mask == *b[i].mask)) return false;
    }
    return true;
}

Outcome determinism_check() {
    RunConfig rc = bench_config();
    rc.data.n_train = 32;
    rc.data.n_test_normal = rc.data.n_test_defective = 12;
    rc.data.noise_fraction = kHighNoise;
    rc.train.epochs = 3;
    const Dataset data = generate_dataset(rc.dataset_spec());
    const ExperimentConfig cfg = rc.experiment();

    TrustMAEModel m1 = TrustMAEModel::build(cfg.model, cfg.seed);
    const EvalReport r1 = train_and_evaluate(data, cfg, &m1);
    TrustMAEModel m2 = TrustMAEModel::build(cfg.model, cfg.seed);
    const EvalReport r2 = train_and_evaluate(data, cfg, &m2);
    double worst = std::max(std::abs(r1.image_auc_max - r2.image_auc_max), std::abs(r1.image_auc_mean - r2.image_auc_mean));
    worst = std::max(worst, std::abs(r1.pixel_auc.value_or(0.0) - r2.pixel_auc.value_or(0.0)));
    bool rows_match = r1.rows.size() == r2.rows.size();
    for (std::size_t i = 0; rows_match && i < r1.rows.size(); ++i) {
        worst = std::max(worst, std::abs(r1.rows[i].score_max - r2.rows[i].score_max));
        worst = std::max(worst, std::abs(r1.rows[i].score_mean - r2.rows[i].score_mean));
    }
    const bool deterministic = rows_match && worst <= kDeterminismTol;

    const auto dir = std::filesystem::temp_directory_path() / "tmae_acceptance_formats";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    save_checkpoint(m1, TrainState{}, dir / "model.tmae");
    TrustMAEModel loaded = load_checkpoint(dir / "model.tmae").model;
    const Tensor a = reconstructions(m1, data.test), b = reconstructions(loaded, data.test);
    const bool checkpoint_ok = a == b;

    write_folder_dataset(data, dir, "synth");
    const Dataset back = load_folder_dataset(dir, "synth");
    const bool roundtrip_ok = same_samples(data.train, back.train, false) && same_samples(data.test, back.test, true);
    std::filesystem::remove_all(dir);

    Outcome o;
    o.pass = deterministic && checkpoint_ok && roundtrip_ok;
    o.detail = "repeat-run metric difference " + sci(worst) + " (max " + sci(kDeterminismTol) +
               "); checkpoint forward bit-identical: " + (checkpoint_ok ? "yes" : "no") +
               "; folder round-trip sample-for-sample: " + (roundtrip_ok ? "yes" : "no");
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    Bench bench;
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient suite", gradient_suite_check},
        {"addressing invariants", addressing_check},
        {"trust-region behavior", trust_region_check},
        {"noise robustness", [&] { return noise_robustness_check(bench); }},
        {"ablation trends", [&] { return ablation_check(bench); }},
        {"memory access", [&] { return memory_access_check(bench); }},
        {"delta2 robustness", [&] { return delta2_check(bench); }},
        {"metric oracles", metric_oracle_check},
        {"determinism and formats", determinism_check},
    };

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(n)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("criterion %d %s: %s: %s\n", n, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
