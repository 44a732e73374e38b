#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "trustmae/error.hpp"
#include "trustmae/grad_check.hpp"
#include "trustmae/memory.hpp"
#include "trustmae/ops.hpp"
#include "trustmae/rng.hpp"

using namespace tmae;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = uniform(rng, lo, hi);
    return t;
}

// [n, 1] matrix from n scalars.
Tensor column(std::initializer_list<double> values) { return Tensor::from(values).reshaped({values.size(), 1}); }

}  // namespace

TEST(Address, EquidistantSlotsGiveUniformWeights) {
    MemoryBank bank(Tensor::from({{1.0, 0.0}, {-1.0, 0.0}, {0.0, 1.0}, {0.0, -1.0}}));
    auto r = address(Tensor::from({0.0, 0.0}), bank);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r.weights[i], 0.25, 1e-15);
    EXPECT_EQ(r.nearest_index, 0u);
    EXPECT_EQ(r.second_index, 1u);
}

TEST(Address, TwoSlotSoftmax) {
    MemoryBank bank(column({0.0, 2.0}));
    auto r = address(Tensor::from({0.0}), bank);
    // Distances carry the 1e-12 regularizer under the square root.
    const double d0 = std::sqrt(1e-12), d1 = std::sqrt(4.0 + 1e-12);
    const double expected = 1.0 / (1.0 + std::exp(d0 - d1));
    EXPECT_NEAR(r.weights[0], 0.8808, 1e-4);
    EXPECT_NEAR(r.weights[1], 0.1192, 1e-4);
    EXPECT_NEAR(r.weights[0], expected, 1e-12);
    EXPECT_NEAR(r.distances[1], 2.0, 1e-12);
}

TEST(Address, ExactMatchDominates) {
    MemoryBank bank(Tensor::from({{20.0, 0.0}, {0.0, 25.0}, {-30.0, 0.0}, {1.0, 1.0}, {0.0, -21.0}}));
    auto r = address(Tensor::from({1.0, 1.0}), bank);
    EXPECT_GE(r.weights[3], 1.0 - 1e-8);
    EXPECT_EQ(r.nearest_index, 3u);
}

TEST(Address, DimensionMismatchThrows) {
    MemoryBank bank = MemoryBank::initialize(4, 3, 1);
    EXPECT_THROW(address(Tensor({2}), bank), ShapeError);
}

TEST(Address, DecreasingADistanceNeverLowersItsWeight) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        MemoryBank bank(random_tensor({6, 4}, 100 + trial));
        Tensor z = random_tensor({4}, 900 + trial);
        auto before = address(z, bank);
        const std::size_t i = uniform_int(rng, 0, 5);
        // Moving slot i toward z shrinks only its own distance.
        Tensor moved = bank.slots.value();
        for (std::size_t j = 0; j < 4; ++j) moved.at(i, j) = 0.5 * (moved.at(i, j) + z[j]);
        auto after = address(z, MemoryBank(moved));
        EXPECT_LT(after.distances[i], before.distances[i]);
        EXPECT_GE(after.weights[i], before.weights[i]);
    }
}

TEST(Sparsify, KeepsTopTwoAndRenormalizes) {
    Tensor w = sparsify(Tensor::from({0.5, 0.3, 0.1, 0.1}), 2);
    EXPECT_NEAR(w[0], 0.625, 1e-15);
    EXPECT_NEAR(w[1], 0.375, 1e-15);
    EXPECT_EQ(w[2], 0.0);
    EXPECT_EQ(w[3], 0.0);
}

TEST(Sparsify, FullKIsIdentity) {
    Tensor w = Tensor::from({0.4, 0.1, 0.2, 0.3});
    Tensor s = sparsify(w, 4);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(s[i], w[i], 1e-15);
}

TEST(Sparsify, KOneIsArgmaxOneHot) {
    Tensor s = sparsify(Tensor::from({0.2, 0.1, 0.6, 0.1}), 1);
    EXPECT_EQ(s, Tensor::from({0.0, 0.0, 1.0, 0.0}));
}

TEST(Sparsify, TiesBreakTowardLowerIndex) {
    Tensor s = sparsify(Tensor::from({0.1, 0.3, 0.3, 0.3}), 2);
    EXPECT_EQ(s, Tensor::from({0.0, 0.5, 0.5, 0.0}));
}

TEST(Sparsify, ZeroMassFallsBackToSlotZero) {
    Tensor s = sparsify(Tensor::from({0.0, 0.0, 0.0}), 2);
    EXPECT_EQ(s, Tensor::from({1.0, 0.0, 0.0}));
}

TEST(Sparsify, KOutOfRangeThrows) {
    EXPECT_ANY_THROW(sparsify(Tensor::from({0.5, 0.5}), 0));
    EXPECT_ANY_THROW(sparsify(Tensor::from({0.5, 0.5}), 3));
}

TEST(Retrieve, OneHotReturnsSlot) {
    MemoryBank bank(random_tensor({5, 3}, 11));
    Tensor z = retrieve(Tensor::from({0.0, 0.0, 1.0, 0.0, 0.0}), bank);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(z[j], bank.slots.value().at(2, j));
}

TEST(Retrieve, UniformPairIsMidpoint) {
    MemoryBank bank(Tensor::from({{1.0, 4.0}, {3.0, -2.0}}));
    EXPECT_EQ(retrieve(Tensor::from({0.5, 0.5}), bank), Tensor::from({2.0, 1.0}));
}

TEST(Retrieve, GradientWrtSlotsMatchesFiniteDifferences) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        Tensor w = sparsify(address(random_tensor({4}, seed), MemoryBank(random_tensor({6, 4}, seed + 10))).weights, 3);
        Tensor target = random_tensor({1, 4}, seed + 20);
        auto f = [&](const std::vector<Var>& v) {
            Var z = ops::matmul(v[0], v[1]);
            return ops::sum(ops::square(ops::sub(z, Var(target))));
        };
        EXPECT_LE(grad_check(f, {w.reshaped({1, 6}), random_tensor({6, 4}, seed + 10)}), 1e-6);
    }
}

TEST(Retrieve, SparseEqualsSupportRestrictedSum) {
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
        MemoryBank bank(random_tensor({8, 5}, 300 + trial));
        Tensor w = address(random_tensor({5}, 700 + trial), bank, AddressingConfig{3, true}).weights;
        Tensor z = retrieve(w, bank);
        Tensor brute({5}, 0.0);
        for (std::size_t i = 0; i < 8; ++i) {
            if (w[i] <= 0.0) continue;
            for (std::size_t j = 0; j < 5; ++j) brute[j] += w[i] * bank.slots.value().at(i, j);
        }
        EXPECT_EQ(z, brute);
    }
}

TEST(MarginLoss, EqualDistancesGiveOne) {
    MemoryBank bank(column({1.0, -1.0, 5.0}));
    EXPECT_NEAR(margin_loss(Tensor::from({0.0}), bank), 1.0, 1e-12);
}

TEST(MarginLoss, WideGapIsInactive) {
    MemoryBank bank(column({1.0, -2.5}));
    EXPECT_EQ(margin_loss(Tensor::from({0.0}), bank), 0.0);
}

TEST(MarginLoss, ForcedArithmetic) {
    MemoryBank bank(column({2.0, -2.4, 9.0}));
    EXPECT_NEAR(margin_loss(Tensor::from({0.0}), bank), 0.6, 1e-12);
}

TEST(MarginLoss, SingleSlotThrows) {
    MemoryBank bank(column({2.0}));
    EXPECT_THROW(margin_loss(Tensor::from({0.0}), bank), ShapeError);
}

TEST(MarginLoss, StaysInUnitInterval) {
    for (std::uint64_t trial = 0; trial < 200; ++trial) {
        MemoryBank bank(random_tensor({5, 2}, 40 + trial, -2.0, 2.0));
        auto r = address(random_tensor({2}, 80 + trial, -2.0, 2.0), bank);
        const double d1 = r.distances[r.nearest_index], d2 = r.distances[r.second_index];
        const double v = margin_loss(random_tensor({2}, 80 + trial, -2.0, 2.0), bank);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        EXPECT_EQ(v == 0.0, d2 >= d1 + 1.0);
    }
}

TEST(MarginLoss, GradientMatchesFiniteDifferences) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto f = [](const std::vector<Var>& v) { return margin_loss(v[0], v[1]); };
        EXPECT_LE(grad_check(f, {random_tensor({7, 4}, seed, -0.3, 0.3), random_tensor({5, 4}, seed + 5, -0.3, 0.3)}),
                  1e-4);
    }
}

TEST(TrustLabel, BoundaryGrid) {
    const double d1 = 2.0, d2 = 20.0, eps = 1e-9;
    EXPECT_EQ(trust_label(d1 - eps, d1, d2), 1);
    EXPECT_EQ(trust_label(d1, d1, d2), 1);
    EXPECT_EQ(trust_label(d1 + eps, d1, d2), -1);
    EXPECT_EQ(trust_label(d2, d1, d2), -1);
    EXPECT_EQ(trust_label(d2 + eps, d1, d2), 0);
    EXPECT_EQ(trust_label(0.0, 0.0, 0.0), 1);
}

TEST(TrustLabel, InvertedBandIsEmpty) {
    EXPECT_EQ(trust_label(5.0, 10.0, 3.0), 1);
    EXPECT_EQ(trust_label(11.0, 10.0, 3.0), 0);
}

TEST(TrustLoss, HandEvaluatedBatch) {
    MemoryBank bank(column({0.0}));
    const double loss = trust_loss_batch({Tensor::from({1.0}), Tensor::from({3.0})}, bank, TrustConfig{20.0, true, 1.0});
    EXPECT_NEAR(loss, -1.0, 1e-12);
}

TEST(TrustLoss, DegenerateClusterIsZero) {
    MemoryBank bank(Tensor::from({{0.5, -0.5}, {3.0, 3.0}}));
    std::vector<Tensor> features(6, Tensor::from({0.5, -0.5}));
    // The regularized norm leaves sqrt(1e-12) at zero distance.
    EXPECT_NEAR(trust_loss_batch(features, bank, TrustConfig{}), 0.0, 1.0000001e-6);
}

TEST(TrustLoss, BeyondDelta2ContributesNothing) {
    MemoryBank bank(column({0.0}));
    // delta1 = 13, so the far feature falls past delta2 = 20.
    const double loss = trust_loss_batch({Tensor::from({1.0}), Tensor::from({25.0})}, bank, TrustConfig{20.0, true, 1.0});
    EXPECT_NEAR(loss, 0.5, 1e-12);
}

TEST(TrustLoss, SoleAssignedFeatureIsPulled) {
    MemoryBank bank(column({0.0, 100.0}));
    const double loss = trust_loss_batch({Tensor::from({1.0}), Tensor::from({70.0})}, bank, TrustConfig{20.0, true, 1.0});
    EXPECT_NEAR(loss, (1.0 + 30.0) / 2.0, 1e-9);
}

TEST(TrustLoss, ScaleMultipliesDelta2) {
    MemoryBank bank(column({0.0}));
    std::vector<Tensor> f{Tensor::from({1.0}), Tensor::from({3.0})};
    EXPECT_NEAR(trust_loss_batch(f, bank, TrustConfig{20.0, true, 0.1}), 0.5, 1e-12);
}

TEST(TrustLoss, DisabledIsZeroAndEmptyThrows) {
    MemoryBank bank(column({0.0}));
    EXPECT_EQ(trust_loss_batch({Tensor::from({4.0})}, bank, TrustConfig{20.0, false, 1.0}), 0.0);
    EXPECT_THROW(trust_loss_batch({}, bank, TrustConfig{}), ShapeError);
}

TEST(TrustLoss, GradientMatchesFiniteDifferences) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        TrustConfig cfg{1.5, true, 1.0};
        auto f = [&](const std::vector<Var>& v) { return trust_loss_batch(v[0], v[1], cfg); };
        EXPECT_LE(grad_check(f, {random_tensor({9, 3}, seed), random_tensor({3, 3}, seed + 7)}), 1e-4);
    }
}

TEST(TrustLoss, GradientStepPullsInliersAndPushesBand) {
    Tensor slots = Tensor::from({{0.0, 0.0}, {10.0, 10.0}});
    Tensor feats = Tensor::from({{0.3, 0.1}, {0.2, -0.2}, {1.5, 1.0}, {-0.1, 0.2}, {9.5, 10.0}, {11.0, 12.0}});
    Var f(feats, true);
    Var loss = trust_loss_batch(f, Var(slots), TrustConfig{20.0, true, 1.0});
    loss.backward();
    Tensor d_before = ops::pairwise_distance(Var(feats), Var(slots)).value();

    // Labels from the batch-mean radius of each row's nearest slot.
    std::vector<int> label(6);
    std::vector<std::size_t> nearest(6);
    std::vector<double> sum(2, 0.0), cnt(2, 0.0);
    for (std::size_t i = 0; i < 6; ++i) {
        nearest[i] = d_before.at(i, 0) <= d_before.at(i, 1) ? 0 : 1;
        sum[nearest[i]] += d_before.at(i, nearest[i]);
        cnt[nearest[i]] += 1.0;
    }
    for (std::size_t i = 0; i < 6; ++i) label[i] = trust_label(d_before.at(i, nearest[i]), sum[nearest[i]] / cnt[nearest[i]], 20.0);

    const double eta = 1e-3;
    Tensor stepped = feats;
    for (std::size_t i = 0; i < stepped.numel(); ++i) stepped[i] -= eta * f.grad()[i];
    int pulled = 0, pushed = 0;
    for (std::size_t i = 0; i < 6; ++i) {
        const double* s = slots.ptr() + nearest[i] * 2;
        const double db = std::hypot(feats.at(i, 0) - s[0], feats.at(i, 1) - s[1]);
        const double da = std::hypot(stepped.at(i, 0) - s[0], stepped.at(i, 1) - s[1]);
        if (label[i] == 1) {
            EXPECT_LT(da, db) << "row " << i;
            ++pulled;
        } else if (label[i] == -1) {
            EXPECT_GT(da, db) << "row " << i;
            ++pushed;
        }
    }
    EXPECT_GT(pulled, 0);
    EXPECT_GT(pushed, 0);
}

TEST(RecordAccess, OneHotRepeated) {
    MemoryBank bank(column({0.0, 5.0, 10.0}));
    for (int i = 0; i < 7; ++i) record_access(address(Tensor::from({4.9}), bank, AddressingConfig{1, true}), bank);
    EXPECT_EQ(bank.access_counts(), (std::vector<std::uint64_t>{0, 7, 0}));
    EXPECT_NEAR(bank.stats.mean_assigned_distance(1), 0.1, 1e-9);
}

TEST(RecordAccess, DenseTouchesEverySlot) {
    MemoryBank bank(column({0.0, 1.0, 2.0, 3.0}));
    record_access(address(Tensor::from({1.2}), bank, AddressingConfig{4, false}), bank);
    EXPECT_EQ(bank.access_counts(), (std::vector<std::uint64_t>{1, 1, 1, 1}));
}

TEST(Prune, DropsUnusedSlotsInOrder) {
    MemoryBank bank(Tensor::from({{1.0, 1.0}, {2.0, 2.0}, {3.0, 3.0}}));
    bank.stats.counts = {5, 0, 2};
    MemoryBank p = prune(bank);
    EXPECT_EQ(p.size(), 2u);
    EXPECT_EQ(p.slots.value(), Tensor::from({{1.0, 1.0}, {3.0, 3.0}}));
    EXPECT_EQ(p.access_counts(), (std::vector<std::uint64_t>{5, 2}));
}

TEST(Prune, AllUsedIsIdentityAndAllUnusedThrows) {
    MemoryBank bank(column({1.0, 2.0}));
    bank.stats.counts = {1, 3};
    EXPECT_EQ(prune(bank).slots.value(), bank.slots.value());
    bank.stats.counts = {0, 0};
    EXPECT_THROW(prune(bank), Error);
}

TEST(Prune, SparseRetrievalUnchanged) {
    MemoryBank bank(random_tensor({10, 3}, 3));
    std::vector<Tensor> zs;
    for (std::uint64_t i = 0; i < 20; ++i) zs.push_back(random_tensor({3}, 50 + i, -0.3, 0.3));
    const AddressingConfig cfg{2, true};
    for (const auto& z : zs) record_access(address(z, bank, cfg), bank);
    MemoryBank p = prune(bank);
    ASSERT_LT(p.size(), bank.size());
    for (const auto& z : zs) {
        Tensor a = retrieve(address(z, bank, cfg).weights, bank);
        Tensor b = retrieve(address(z, p, cfg).weights, p);
        EXPECT_LE(max_abs_diff(a, b), 1e-9);
    }
}

TEST(AccessEntropy, KnownValues) {
    EXPECT_EQ(access_entropy({0, 0, 0}), 0.0);
    EXPECT_EQ(access_entropy({0, 9, 0}), 0.0);
    EXPECT_NEAR(access_entropy({3, 3, 3, 3}), std::log(4.0), 1e-15);
    EXPECT_NEAR(access_entropy({1, 3}), -(0.25 * std::log(0.25) + 0.75 * std::log(0.75)), 1e-15);
}

TEST(MemoryStats, CsvHasHeaderAndOneRowPerSlot) {
    MemoryBank bank(column({0.0, 5.0}));
    record_access(address(Tensor::from({1.0}), bank, AddressingConfig{1, true}), bank);
    const auto path = std::filesystem::temp_directory_path() / "tmae_memory_stats.csv";
    write_memory_stats_csv(bank, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "slot_index,access_count,mean_assigned_distance");
    std::getline(in, line);
    EXPECT_EQ(line.substr(0, 4), "0,1,");
    std::getline(in, line);
    EXPECT_EQ(line, "1,0,");
    std::filesystem::remove(path);
}

TEST(MemoryBank, InitializationIsSeededAndBounded) {
    MemoryBank a = MemoryBank::initialize(8, 4, 42), b = MemoryBank::initialize(8, 4, 42);
    EXPECT_EQ(a.slots.value(), b.slots.value());
    EXPECT_LE(a.slots.value().max(), 0.1);
    EXPECT_GE(a.slots.value().min(), -0.1);
    EXPECT_THROW(MemoryBank::initialize(0, 4, 1), ConfigError);
}
