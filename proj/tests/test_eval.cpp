#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "trustmae/error.hpp"
#include "trustmae/eval.hpp"
#include "trustmae/rng.hpp"

using namespace tmae;
namespace fs = std::filesystem;

namespace {

// Counts positive-negative pairs directly.
double pair_count_auc(const std::vector<double>& s, const std::vector<int>& l) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (l[i] != 1 || l[j] != 0) continue;
            pairs += 1.0;
            wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    return wins / pairs;
}

ErrorMap map_of(Tensor t) { return ErrorMap{std::move(t), ErrorSource::mse}; }

ModelConfig tiny_model() {
    ModelConfig c;
    c.input_height = c.input_width = 16;
    c.downsample_layers = 1;
    c.residual_blocks = 1;
    c.latent_dim = 4;
    c.memory_slots = 6;
    c.base_width = 2;
    c.addressing.k = 2;
    return c;
}

DatasetSpec tiny_spec() {
    DatasetSpec s;
    s.image_size = 16;
    s.n_train = 6;
    s.n_test_normal = 3;
    s.n_test_defective = 3;
    s.defect.min_size = 2;
    s.defect.max_size = 6;
    s.seed = 2;
    return s;
}

ExperimentConfig tiny_experiment() {
    ExperimentConfig e;
    e.model = tiny_model();
    e.train.epochs = 1;
    e.train.batch_size = 3;
    e.loss.ssim_window = 5;
    e.eval.extractor_depth = 2;
    e.seed = 4;
    return e;
}

}  // namespace

TEST(DefectScore, Examples) {
    EXPECT_EQ(defect_score(map_of(Tensor({4, 4}, 0.0)), Pooling::max), 0.0);
    EXPECT_EQ(defect_score(map_of(Tensor({4, 4}, 0.0)), Pooling::mean), 0.0);
    Tensor spike({4, 5}, 0.0);
    spike[7] = 3.0;
    EXPECT_EQ(defect_score(map_of(spike), Pooling::max), 3.0);
    EXPECT_DOUBLE_EQ(defect_score(map_of(spike), Pooling::mean), 3.0 / 20.0);
    EXPECT_THROW(defect_score(map_of(Tensor(Shape{0, 0})), Pooling::max), ShapeError);
}

TEST(DefectScore, MaxDominatesMean) {
    Rng rng(1);
    for (int t = 0; t < 50; ++t) {
        Tensor m({3, 4});
        for (auto& v : m.data()) v = uniform(rng, 0.0, 5.0);
        EXPECT_GE(defect_score(map_of(m), Pooling::max), defect_score(map_of(m), Pooling::mean));
    }
}

TEST(RocAuc, HandExamples) {
    EXPECT_EQ(roc_auc({1, 2, 3, 4}, {0, 0, 1, 1}), 1.0);
    EXPECT_EQ(roc_auc({1, 2, 3, 4}, {0, 1, 0, 1}), 0.75);
    EXPECT_EQ(roc_auc({1, 1, 1, 1}, {0, 1, 0, 1}), 0.5);
    EXPECT_EQ(roc_auc({4, 3, 2, 1}, {0, 0, 1, 1}), 0.0);
}

TEST(RocAuc, ErrorsOnBadInput) {
    EXPECT_THROW(roc_auc({1, 2}, {1, 1}), Error);
    EXPECT_THROW(roc_auc({1, 2}, {0, 1, 1}), ShapeError);
    EXPECT_THROW(roc_auc({1, 2}, {0, 2}), ConfigError);
}

TEST(RocAuc, MatchesPairCountingOnAllLabelings) {
    Rng rng(2);
    for (std::size_t n = 2; n <= 8; ++n) {
        std::vector<double> s(n);
        for (auto& v : s) v = static_cast<double>(uniform_int(rng, 0, 4));
        for (unsigned mask = 1; mask + 1 < (1u << n); ++mask) {
            std::vector<int> l(n);
            for (std::size_t i = 0; i < n; ++i) l[i] = (mask >> i) & 1u;
            ASSERT_EQ(roc_auc(s, l), pair_count_auc(s, l));
        }
    }
}

TEST(RocAuc, ComplementAndMonotoneInvariance) {
    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> s(12), e(12);
        std::vector<int> l(12), flip(12);
        for (std::size_t i = 0; i < 12; ++i) {
            s[i] = std::floor(uniform(rng, 0.0, 6.0));
            e[i] = std::exp(s[i]) * 3.0 + 1.0;
            l[i] = i % 3 == 0;
            flip[i] = 1 - l[i];
        }
        EXPECT_EQ(roc_auc(s, l) + roc_auc(s, flip), 1.0);
        EXPECT_EQ(roc_auc(s, l), roc_auc(e, l));
    }
}

TEST(RocAuc, RandomLabelsAverageOneHalf) {
    Rng rng(4);
    double sum = 0.0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        std::vector<double> s(20);
        std::vector<int> l(20);
        for (std::size_t i = 0; i < 20; ++i) {
            s[i] = uniform01(rng);
            l[i] = i < 10;
        }
        sum += roc_auc(s, l);
    }
    EXPECT_NEAR(sum / trials, 0.5, 0.05);
}

TEST(PixelAuc, Examples) {
    Tensor mask({4, 4}, 0.0);
    mask[5] = mask[6] = 1.0;
    Tensor inverse = mask;
    for (auto& v : inverse.data()) v = 1.0 - v;
    EXPECT_EQ(pixel_auc({map_of(mask)}, {mask}), 1.0);
    EXPECT_EQ(pixel_auc({map_of(inverse)}, {mask}), 0.0);
    EXPECT_EQ(pixel_auc({map_of(Tensor({4, 4}, 0.3))}, {mask}), 0.5);
    EXPECT_THROW(pixel_auc({map_of(mask)}, {Tensor({4, 4}, 0.0)}), Error);
    EXPECT_THROW(pixel_auc({map_of(mask)}, {Tensor({4, 4}, 1.0)}), Error);
    EXPECT_THROW(pixel_auc({map_of(mask)}, {Tensor({4, 5}, 1.0)}), ShapeError);
}

TEST(PixelAuc, EqualsFlattenedRocAuc) {
    Rng rng(5);
    for (int t = 0; t < 200; ++t) {
        const std::size_t h = 1 + static_cast<std::size_t>(uniform_int(rng, 0, 3));
        const std::size_t w = 1 + static_cast<std::size_t>(uniform_int(rng, 0, 3));
        std::vector<ErrorMap> maps;
        std::vector<Tensor> masks;
        std::vector<double> flat;
        std::vector<int> labels;
        for (int img = 0; img < 3; ++img) {
            Tensor m({h, w}), k({h, w});
            for (std::size_t i = 0; i < h * w; ++i) {
                m[i] = std::floor(uniform(rng, 0.0, 4.0));
                k[i] = uniform01(rng) < 0.4 ? 1.0 : 0.0;
                flat.push_back(m[i]);
                labels.push_back(static_cast<int>(k[i]));
            }
            maps.push_back(map_of(m));
            masks.push_back(k);
        }
        const auto pos = std::accumulate(labels.begin(), labels.end(), 0);
        if (pos == 0 || pos == static_cast<int>(labels.size())) continue;
        EXPECT_EQ(pixel_auc(maps, masks), pair_count_auc(flat, labels));
    }
}

TEST(PixelAuc, PerImageAveragesImagesWithBothClasses) {
    Tensor a_mask({2, 2}, 0.0), b_mask({2, 2}, 0.0);
    a_mask[0] = 1.0;
    b_mask[3] = 1.0;
    Tensor a_map({2, 2}, 0.0), b_map({2, 2}, 1.0);
    a_map[0] = 1.0;
    b_map[3] = 0.0;
    EXPECT_EQ(pixel_auc({map_of(a_map), map_of(b_map)}, {a_mask, b_mask}, true), 0.5);
    EXPECT_EQ(pixel_auc({map_of(a_map), map_of(b_map), map_of(b_map)}, {a_mask, b_mask, Tensor({2, 2}, 0.0)}, true),
              0.5);
}

TEST(Segment, ThresholdContracts) {
    Rng rng(6);
    Tensor v({5, 5});
    for (auto& x : v.data()) x = uniform01(rng);
    ErrorMap m = map_of(v);
    EXPECT_EQ(segment(m, v.max()).sum(), 0.0);
    EXPECT_EQ(segment(m, v.min() - 1.0).sum(), 25.0);
    double prev = 26.0;
    for (double t = -0.1; t < 1.1; t += 0.05) {
        Tensor s = segment(m, t);
        EXPECT_LE(s.sum(), prev);
        prev = s.sum();
    }
    EXPECT_THROW(segment(m, std::nan("")), ConfigError);
}

TEST(Heatmap, SixteenBitWithBounds) {
    const fs::path dir = fs::temp_directory_path() / "trustmae_heatmap";
    fs::remove_all(dir);
    Tensor v({3, 4}, 0.5);
    v[0] = 0.25;
    v[11] = 2.25;
    write_heatmap(map_of(v), dir / "test/defect/x.png");
    std::size_t w = 0, h = 0;
    auto px = read_png16(dir / "test/defect/x.png", w, h);
    EXPECT_EQ(w, 4u);
    EXPECT_EQ(h, 3u);
    EXPECT_EQ(px[0], 0);
    EXPECT_EQ(px[11], 65535);
    EXPECT_EQ(px[1], std::lround(0.25 / 2.0 * 65535.0));
    std::ifstream in(dir / "test/defect/x_bounds.csv");
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    EXPECT_EQ(header, "min,max");
    EXPECT_EQ(row, "0.25,2.25");
    fs::remove_all(dir);
}

TEST(Evaluate, ReportShapeAndDeterminism) {
    auto data = generate_dataset(tiny_spec());
    auto cfg = tiny_experiment();
    auto m = TrustMAEModel::build(cfg.model, 1);
    m.set_training(false);
    std::vector<ErrorMap> maps;
    auto r = evaluate(m, data.test, cfg.eval, cfg.loss, &maps);
    ASSERT_EQ(r.rows.size(), 6u);
    EXPECT_EQ(maps.size(), 6u);
    EXPECT_GE(r.image_auc_max, 0.0);
    EXPECT_LE(r.image_auc_max, 1.0);
    ASSERT_TRUE(r.pixel_auc.has_value());
    EXPECT_EQ(r.rows[4].source_id, "defect_0001");
    EXPECT_TRUE(r.rows[4].is_defective);
    auto again = evaluate(m, data.test, cfg.eval, cfg.loss);
    EXPECT_EQ(again.image_auc_mean, r.image_auc_mean);
    EXPECT_EQ(again.fingerprint, r.fingerprint);
    auto other = cfg.eval;
    other.distance = ErrorSource::ssim;
    EXPECT_NE(evaluate(m, data.test, other, cfg.loss).fingerprint, r.fingerprint);

    const fs::path csv = fs::temp_directory_path() / "trustmae_report.csv";
    write_eval_report_csv(r, csv);
    std::ifstream in(csv);
    std::string comment, header;
    std::getline(in, comment);
    std::getline(in, header);
    EXPECT_EQ(header, "source_id,score_max,score_mean,is_defective,image_auc_max,image_auc_mean,pixel_auc");
    fs::remove(csv);
}

TEST(Evaluate, SingleClassGivesNaN) {
    auto spec = tiny_spec();
    spec.n_test_defective = 0;
    auto data = generate_dataset(spec);
    auto cfg = tiny_experiment();
    auto m = TrustMAEModel::build(cfg.model, 1);
    auto r = evaluate(m, data.test, cfg.eval, cfg.loss);
    EXPECT_TRUE(std::isnan(r.image_auc_max));
    EXPECT_FALSE(r.pixel_auc.has_value());
}

TEST(MemoryAccess, BoundsLinearityAndSparsity) {
    auto data = generate_dataset(tiny_spec());
    auto cfg = tiny_model();
    cfg.addressing.k = 1;
    auto m = TrustMAEModel::build(cfg, 3);
    auto rep = memory_access_report(m, data.train);
    std::size_t nonzero = 0;
    std::uint64_t total = 0;
    for (auto c : rep.counts) {
        nonzero += c > 0;
        total += c;
    }
    EXPECT_LE(nonzero, cfg.memory_slots);
    EXPECT_EQ(total, data.train.size() * 64);
    EXPECT_LE(rep.entropy, std::log(static_cast<double>(cfg.memory_slots)) + 1e-12);

    auto doubled = data.train;
    doubled.insert(doubled.end(), data.train.begin(), data.train.end());
    auto rep2 = memory_access_report(m, doubled);
    for (std::size_t i = 0; i < rep.counts.size(); ++i) EXPECT_EQ(rep2.counts[i], 2 * rep.counts[i]);

    m.mutable_config().addressing.sparse_enabled = false;
    auto dense = memory_access_report(m, data.train);
    EXPECT_NEAR(dense.entropy, std::log(static_cast<double>(cfg.memory_slots)), 1e-12);
    EXPECT_LT(rep.entropy, dense.entropy);
    EXPECT_THROW(memory_access_report(m, {}), Error);
}

TEST(Sweep, CoversCrossProductAndComposes) {
    auto spec = tiny_spec();
    auto cfg = tiny_experiment();
    std::vector<Variant> variants{find_variant("full"), find_variant("plain-ae-mse")};
    auto rows = noise_sweep(spec, {0.0, 0.34}, cfg, variants);
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[1].variant, "plain-ae-mse");
    EXPECT_EQ(rows[2].noise, 0.34);

    auto single = noise_sweep(spec, {0.0}, cfg, {find_variant("full")});
    auto standalone = train_and_evaluate(generate_dataset(spec), cfg);
    EXPECT_EQ(single[0].image_auc_max, standalone.image_auc_max);
    EXPECT_EQ(single[0].image_auc_mean, standalone.image_auc_mean);
    EXPECT_EQ(single[0].image_auc_max, rows[0].image_auc_max);
    EXPECT_THROW(find_variant("nope"), ConfigError);
}

TEST(Sweep, Delta2RowsPerValue) {
    auto data = generate_dataset(tiny_spec());
    auto rows = delta2_sweep(data, {15.0, 40.0}, tiny_experiment());
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[1].delta2, 40.0);
    EXPECT_GT(rows[0].delta2_scale, 0.0);
}
