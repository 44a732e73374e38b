#include "trustmae/eval.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "trustmae/error.hpp"
#include "trustmae/log.hpp"
#include "trustmae/rng.hpp"

namespace tmae {

double defect_score(const ErrorMap& map, Pooling pooling) {
    if (map.values.numel() == 0) throw ShapeError("cannot score an empty error map");
    return pooling == Pooling::max ? map.values.max() : map.values.mean();
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
    std::size_t pos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ConfigError("roc_auc: labels must be 0 or 1");
        pos += static_cast<std::size_t>(l);
    }
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw Error("roc_auc needs both classes");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Twice the rank sum keeps mid-ranks integral.
    double twice_rank_sum = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::size_t group_pos = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) group_pos += labels[order[j++]];
        // Ranks i+1 .. j share the mid-rank (i+1+j)/2.
        twice_rank_sum += static_cast<double>(group_pos) * static_cast<double>(i + 1 + j);
        i = j;
    }
    const double np = static_cast<double>(pos), nn = static_cast<double>(neg);
    const double u = 0.5 * twice_rank_sum - np * (np + 1.0) / 2.0;
    return u / (np * nn);
}

double pixel_auc(const std::vector<ErrorMap>& maps, const std::vector<Tensor>& masks, bool per_image) {
    if (maps.size() != masks.size() || maps.empty()) throw ShapeError("pixel_auc: need one mask per error map");
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (maps[i].values.shape() != masks[i].shape()) {
            throw ShapeError("pixel_auc: map " + std::to_string(i) + " is " + shape_str(maps[i].values.shape()) +
                             " but its mask is " + shape_str(masks[i].shape()));
        }
    }
    auto labels_of = [](const Tensor& m) {
        std::vector<int> l(m.numel());
        for (std::size_t i = 0; i < m.numel(); ++i) l[i] = m[i] > 0.5 ? 1 : 0;
        return l;
    };
    if (per_image) {
        double sum = 0.0;
        std::size_t used = 0;
        for (std::size_t i = 0; i < maps.size(); ++i) {
            auto l = labels_of(masks[i]);
            const auto pos = std::accumulate(l.begin(), l.end(), std::size_t{0});
            if (pos == 0 || pos == l.size()) continue;
            const auto v = maps[i].values.data();
            sum += roc_auc(std::vector<double>(v.begin(), v.end()), l);
            ++used;
        }
        if (used == 0) throw Error("pixel_auc: no mask contains both defect and normal pixels");
        return sum / static_cast<double>(used);
    }
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        scores.insert(scores.end(), maps[i].values.data().begin(), maps[i].values.data().end());
        auto l = labels_of(masks[i]);
        labels.insert(labels.end(), l.begin(), l.end());
    }
    const auto pos = std::accumulate(labels.begin(), labels.end(), std::size_t{0});
    if (pos == 0 || pos == labels.size()) throw Error("pixel_auc: pooled masks are all zero or all one");
    return roc_auc(scores, labels);
}

Tensor segment(const ErrorMap& map, double threshold) {
    if (!std::isfinite(threshold)) throw ConfigError("segmentation threshold must be finite");
    Tensor out(map.values.shape(), 0.0);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = map.values[i] > threshold ? 1.0 : 0.0;
    return out;
}

void EvalConfig::validate() const {
    if (extractor_depth < 1) throw ConfigError("eval.extractor_depth must be at least 1");
    if (batch_size < 1) throw ConfigError("eval.batch_size must be at least 1");
}

FeaturePyramidExtractor make_extractor(TrustMAEModel& model, const EvalConfig& cfg) {
    if (cfg.extractor == ExtractorKind::trained_encoder) return FeaturePyramidExtractor::trained_encoder(model);
    return FeaturePyramidExtractor::random_conv_pyramid(model.config().channels, cfg.extractor_depth, cfg.seed);
}

namespace {

std::string fingerprint(TrustMAEModel& model, const EvalConfig& cfg) {
    uLong crc = crc32(0L, Z_NULL, 0);
    auto feed = [&](const void* p, std::size_t n) {
        crc = crc32(crc, static_cast<const Bytef*>(p), static_cast<uInt>(n));
    };
    for (Parameter* p : model.parameters()) feed(p->value().ptr(), p->value().numel() * sizeof(double));
    for (auto& b : model.buffers()) feed(b.tensor->ptr(), b.tensor->numel() * sizeof(double));
    const std::string desc = to_string(cfg.distance) + "|" + to_string(cfg.extractor) + "|" +
                             std::to_string(cfg.extractor_depth) + "|" + std::to_string(cfg.seed) + "|" +
                             std::to_string(model.config().trust.effective_delta2());
    feed(desc.data(), desc.size());
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
    return buf;
}

}  // namespace

EvalReport evaluate(TrustMAEModel& model, const std::vector<Sample>& samples, const EvalConfig& cfg,
                    const LossConfig& loss_cfg, std::vector<ErrorMap>* maps_out) {
    cfg.validate();
    if (samples.empty()) throw Error("evaluation set is empty");
    const bool was_training = model.training();
    model.set_training(false);
    FeaturePyramidExtractor extractor = make_extractor(model, cfg);
    EvalReport report;
    std::vector<ErrorMap> maps;
    {
        NoGradGuard guard;
        for (std::size_t i = 0; i < samples.size(); i += cfg.batch_size) {
            std::vector<std::size_t> idx(std::min(cfg.batch_size, samples.size() - i));
            std::iota(idx.begin(), idx.end(), i);
            Tensor x = batch_images(samples, idx);
            Tensor x_hat = model.forward(Var(x)).reconstruction.value();
            for (auto& m : error_maps(cfg.distance, x, x_hat, extractor, loss_cfg)) maps.push_back(std::move(m));
        }
    }
    model.set_training(was_training);

    std::vector<double> smax, smean;
    std::vector<int> labels;
    bool all_masks = true;
    std::vector<Tensor> masks;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        EvalRow row{samples[i].source_id, defect_score(maps[i], Pooling::max), defect_score(maps[i], Pooling::mean),
                    samples[i].is_defective};
        smax.push_back(row.score_max);
        smean.push_back(row.score_mean);
        labels.push_back(row.is_defective ? 1 : 0);
        report.rows.push_back(std::move(row));
        if (samples[i].mask) {
            masks.push_back(*samples[i].mask);
        } else {
            all_masks = false;
        }
    }
    const auto pos = std::accumulate(labels.begin(), labels.end(), std::size_t{0});
    if (pos == 0 || pos == labels.size()) {
        log_warning("test set has a single class; image AUC is undefined");
        report.image_auc_max = report.image_auc_mean = std::numeric_limits<double>::quiet_NaN();
    } else {
        report.image_auc_max = roc_auc(smax, labels);
        report.image_auc_mean = roc_auc(smean, labels);
    }
    if (all_masks && pos > 0) {
        try {
            report.pixel_auc = pixel_auc(maps, masks, cfg.per_image_pixel_auc);
        } catch (const ShapeError&) {
            throw;
        } catch (const Error& e) {
            log_warning(std::string("pixel AUC skipped: ") + e.what());
        }
    }
    report.fingerprint = fingerprint(model, cfg);
    if (maps_out) {
        for (auto& m : maps) maps_out->push_back(std::move(m));
    }
    return report;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(17);
    return out;
}

}  // namespace

void write_eval_report_csv(const EvalReport& report, const std::filesystem::path& path) {
    auto out = open_csv(path);
    out << "# image_auc_max=" << report.image_auc_max << " image_auc_mean=" << report.image_auc_mean;
    if (report.pixel_auc) out << " pixel_auc=" << *report.pixel_auc;
    out << " fingerprint=" << report.fingerprint << '\n';
    out << "source_id,score_max,score_mean,is_defective,image_auc_max,image_auc_mean,pixel_auc\n";
    for (const auto& r : report.rows) {
        out << r.source_id << ',' << r.score_max << ',' << r.score_mean << ',' << (r.is_defective ? 1 : 0) << ','
            << report.image_auc_max << ',' << report.image_auc_mean << ',';
        if (report.pixel_auc) out << *report.pixel_auc;
        out << '\n';
    }
}

void write_heatmap(const ErrorMap& map, const std::filesystem::path& png_path) {
    const Tensor& v = map.values;
    if (v.rank() != 2) throw ShapeError("heatmap expects an [H, W] map");
    const double lo = v.min(), hi = v.max();
    std::vector<std::uint16_t> px(v.numel(), 0);
    if (hi > lo) {
        for (std::size_t i = 0; i < v.numel(); ++i) {
            px[i] = static_cast<std::uint16_t>(std::lround((v[i] - lo) / (hi - lo) * 65535.0));
        }
    }
    if (png_path.has_parent_path()) std::filesystem::create_directories(png_path.parent_path());
    write_png16(png_path, v.dim(1), v.dim(0), px);
    std::filesystem::path bounds = png_path;
    bounds.replace_filename(png_path.stem().string() + "_bounds.csv");
    auto out = open_csv(bounds);
    out << "min,max\n" << lo << ',' << hi << '\n';
}

std::vector<Variant> standard_variants() {
    return {
        {"full", true, true, true, ErrorSource::mse_pd},
        {"no-trust-region", true, true, false, ErrorSource::mse_pd},
        {"no-sparse", true, false, true, ErrorSource::mse_pd},
        {"full-mse", true, true, true, ErrorSource::mse},
        {"plain-ae-mse", false, false, false, ErrorSource::mse},
    };
}

Variant find_variant(const std::string& name) {
    for (auto& v : standard_variants()) {
        if (v.name == name) return v;
    }
    throw ConfigError("unknown variant '" + name + "'");
}

EvalReport train_and_evaluate(const Dataset& dataset, const ExperimentConfig& cfg, TrustMAEModel* trained) {
    TrustMAEModel model = TrustMAEModel::build(cfg.model, cfg.seed);
    train(model, dataset.train, cfg.train, cfg.loss);
    EvalReport r = evaluate(model, dataset.test, cfg.eval, cfg.loss);
    if (trained) *trained = std::move(model);
    return r;
}

ExperimentConfig apply_variant(ExperimentConfig cfg, const Variant& v) {
    cfg.model.memory_enabled = v.memory_enabled;
    cfg.model.addressing.sparse_enabled = v.sparse_addressing;
    cfg.model.trust.enabled = v.trust_region;
    cfg.eval.distance = v.distance;
    return cfg;
}

std::vector<SweepRow> noise_sweep(const DatasetSpec& base, const std::vector<double>& levels,
                                  const ExperimentConfig& cfg, const std::vector<Variant>& variants) {
    if (levels.empty() || variants.empty()) throw ConfigError("noise sweep needs at least one level and one variant");
    std::vector<SweepRow> rows;
    for (double level : levels) {
        DatasetSpec spec = base;
        spec.noise_fraction = level;
        const Dataset data = generate_dataset(spec);
        std::map<std::tuple<bool, bool, bool>, TrustMAEModel> trained;
        for (const auto& v : variants) {
            const ExperimentConfig c = apply_variant(cfg, v);
            const auto key = std::make_tuple(v.memory_enabled, v.sparse_addressing, v.trust_region);
            auto it = trained.find(key);
            if (it == trained.end()) {
                TrustMAEModel m = TrustMAEModel::build(c.model, c.seed);
                train(m, data.train, c.train, c.loss);
                it = trained.emplace(key, std::move(m)).first;
            }
            EvalReport r = evaluate(it->second, data.test, c.eval, c.loss);
            rows.push_back({level, v.name, r.image_auc_max, r.image_auc_mean, r.pixel_auc});
            log_info("noise " + std::to_string(level) + " " + v.name + ": auc_max " + std::to_string(r.image_auc_max));
        }
    }
    return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
    auto out = open_csv(path);
    out << "noise_pct,variant,image_auc_max,image_auc_mean,pixel_auc\n";
    for (const auto& r : rows) {
        out << r.noise * 100.0 << ',' << r.variant << ',' << r.image_auc_max << ',' << r.image_auc_mean << ',';
        if (r.pixel_auc) out << *r.pixel_auc;
        out << '\n';
    }
}

std::vector<Delta2Row> delta2_sweep(const Dataset& dataset, const std::vector<double>& values,
                                    const ExperimentConfig& cfg) {
    std::vector<Delta2Row> rows;
    for (double d2 : values) {
        if (!(d2 > 0.0)) throw ConfigError("delta2 values must be positive");
        ExperimentConfig c = cfg;
        c.model.trust.delta2 = d2;
        TrustMAEModel m = TrustMAEModel::build(c.model, c.seed);
        EvalReport r = train_and_evaluate(dataset, c, &m);
        rows.push_back({d2, m.config().trust.scale, r.image_auc_max, r.image_auc_mean});
    }
    return rows;
}

void write_delta2_csv(const std::vector<Delta2Row>& rows, const std::filesystem::path& path) {
    auto out = open_csv(path);
    out << "delta2,delta2_scale,image_auc_max,image_auc_mean\n";
    for (const auto& r : rows) {
        out << r.delta2 << ',' << r.delta2_scale << ',' << r.image_auc_max << ',' << r.image_auc_mean << '\n';
    }
}

MemoryAccessReport memory_access_report(TrustMAEModel& model, const std::vector<Sample>& samples,
                                        std::size_t batch_size) {
    if (samples.empty()) throw Error("memory statistics need at least one image");
    if (!model.config().memory_enabled) throw ConfigError("memory statistics need the memory module");
    const bool was_training = model.training();
    model.set_training(false);
    model.bank().reset_stats();
    {
        NoGradGuard guard;
        for (std::size_t i = 0; i < samples.size(); i += batch_size) {
            std::vector<std::size_t> idx(std::min(batch_size, samples.size() - i));
            std::iota(idx.begin(), idx.end(), i);
            ForwardResult r = model.forward(Var(batch_images(samples, idx)));
            for (std::size_t row = 0; row < r.positions(); ++row) record_access(r.addressing(row), model.bank());
        }
    }
    model.set_training(was_training);
    MemoryAccessReport rep;
    rep.counts = model.bank().access_counts();
    rep.entropy = access_entropy(rep.counts);
    return rep;
}

}  // namespace tmae
