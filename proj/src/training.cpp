#include "trustmae/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "trustmae/error.hpp"
#include "trustmae/log.hpp"
#include "trustmae/rng.hpp"

namespace tmae {

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
    if (clip_norm < 0.0) throw ConfigError("train.clip_norm must be non-negative");
    if (!(calibration_quantile > 0.0 && calibration_quantile <= 1.0)) {
        throw ConfigError("train.calibration_quantile must lie in (0, 1]");
    }
}

void adam_step(std::vector<Tensor*> params, const std::vector<Tensor>& grads, AdamState& state,
               const TrainConfig& cfg) {
    if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
    if (state.m.empty()) {
        for (const Tensor* p : params) {
            state.m.emplace_back(p->shape(), 0.0);
            state.v.emplace_back(p->shape(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].shape() != params[i]->shape() || state.m[i].shape() != params[i]->shape()) {
            throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(i));
        }
        for (double g : grads[i].data()) {
            if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter " + std::to_string(i));
        }
    }
    ++state.step;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* p = params[i]->ptr();
        double* m = state.m[i].ptr();
        double* v = state.v[i].ptr();
        const double* g = grads[i].ptr();
        for (std::size_t j = 0, n = params[i]->numel(); j < n; ++j) {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            p[j] -= cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.adam_eps);
        }
    }
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state, const TrainConfig& cfg) {
    std::vector<Tensor*> values;
    std::vector<Tensor> grads;
    for (Parameter* p : params) {
        values.push_back(&p->mutable_value());
        grads.push_back(p->grad());
    }
    try {
        adam_step(values, grads, state, cfg);
    } catch (const NumericalError&) {
        for (std::size_t i = 0; i < grads.size(); ++i) {
            for (double g : grads[i].data()) {
                if (!std::isfinite(g)) throw NumericalError("non-finite gradient in " + params[i]->name);
            }
        }
        throw;
    }
}

namespace {

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw Error("quantile of an empty sample");
    const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(values.size() - 1)));
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
    return values[k];
}

void nearest_distances(const ForwardResult& r, std::vector<double>& out) {
    const Tensor& d = r.distances.value();
    const std::size_t m = d.dim(1);
    for (std::size_t row = 0; row < d.dim(0); ++row) {
        const double* p = d.ptr() + row * m;
        out.push_back(*std::min_element(p, p + m));
    }
}

bool uses_trust(const ModelConfig& c) { return c.memory_enabled && c.trust.enabled; }

void clip_gradients(const std::vector<Parameter*>& params, double max_norm) {
    double ss = 0.0;
    for (const Parameter* p : params)
        for (double g : p->var.grad().data()) ss += g * g;
    const double norm = std::sqrt(ss);
    if (norm <= max_norm || norm == 0.0) return;
    const double f = max_norm / norm;
    for (const Parameter* p : params) {
        Tensor& g = p->var.node()->ensure_grad();
        for (auto& v : g.data()) v *= f;
    }
}

}  // namespace

double calibrate_delta2_scale(TrustMAEModel& model, const std::vector<Sample>& samples, double quantile_q,
                              std::size_t batch_size) {
    if (!model.config().memory_enabled) throw ConfigError("delta2 calibration needs the memory module");
    if (samples.empty()) throw Error("delta2 calibration needs at least one image");
    const bool was_training = model.training();
    model.set_training(false);
    NoGradGuard guard;
    std::vector<double> nearest;
    for (std::size_t i = 0; i < samples.size(); i += batch_size) {
        std::vector<std::size_t> idx(std::min(batch_size, samples.size() - i));
        std::iota(idx.begin(), idx.end(), i);
        nearest_distances(model.forward(Var(batch_images(samples, idx))), nearest);
    }
    model.set_training(was_training);
    return quantile(std::move(nearest), quantile_q) / kReferenceDelta2;
}

TrainResult train(TrustMAEModel& model, const std::vector<Sample>& samples, const TrainConfig& cfg,
                  const LossConfig& loss_cfg, const TrainState* resume, const EpochCallback& on_epoch) {
    cfg.validate();
    loss_cfg.validate();
    if (samples.empty()) throw Error("training set is empty");
    TrainResult result;
    if (resume) result.state = *resume;
    TrainState& st = result.state;
    auto params = model.parameters();
    std::erase_if(params, [](const Parameter* p) { return !p->trainable; });
    model.set_training(true);

    const bool calibrate = cfg.calibrate_delta2 && uses_trust(model.config());
    bool scale_known = !calibrate || st.epoch > 0;
    std::vector<double> observed;
    // Canonical order by id, so file order never changes the batches.
    std::vector<std::size_t> canonical(samples.size());
    std::iota(canonical.begin(), canonical.end(), 0);
    std::stable_sort(canonical.begin(), canonical.end(),
                     [&](std::size_t a, std::size_t b) { return samples[a].source_id < samples[b].source_id; });

    for (; st.epoch < cfg.epochs; ++st.epoch) {
        std::vector<std::size_t> order = canonical;
        Rng shuffle(derive_seed(cfg.seed, "train.shuffle", st.epoch));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_int(shuffle, 0, static_cast<std::int64_t>(i) - 1))]);
        }
        Rng aug(derive_seed(cfg.seed, "train.augment", st.epoch));
        observed.clear();

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch_size)));
            Tensor batch;
            if (cfg.augment.hflip || cfg.augment.vflip || cfg.augment.rot90) {
                std::vector<Sample> views;
                for (std::size_t i : idx) {
                    Sample s{samples[i].image, false, std::nullopt, samples[i].source_id, samples[i].group};
                    views.push_back(augment(s, cfg.augment, aug));
                }
                std::vector<std::size_t> all(views.size());
                std::iota(all.begin(), all.end(), 0);
                batch = batch_images(views, all);
            } else {
                batch = batch_images(samples, idx);
            }

            for (Parameter* p : params) p->var.zero_grad();
            Var x(batch);
            ForwardResult fwd = model.forward(x);
            if (calibrate) {
                nearest_distances(fwd, observed);
                if (!scale_known) {
                    model.mutable_config().trust.scale = quantile(observed, cfg.calibration_quantile) / kReferenceDelta2;
                    scale_known = true;
                }
            }
            LossTerms terms = total_loss(x, fwd, loss_cfg, model.config().trust);
            if (!std::isfinite(terms.breakdown.total)) {
                throw NumericalError("non-finite loss at step " + std::to_string(st.step));
            }
            terms.total.backward();
            if (cfg.clip_norm > 0.0) clip_gradients(params, cfg.clip_norm);
            adam_step(params, st.adam, cfg);
            result.log.push_back({st.step, terms.breakdown});
            ++st.step;
        }
        if (calibrate && !observed.empty()) {
            model.mutable_config().trust.scale = quantile(observed, cfg.calibration_quantile) / kReferenceDelta2;
        }
        TrainState snapshot = st;
        ++snapshot.epoch;
        if (on_epoch) on_epoch(model, snapshot);
    }
    for (Parameter* p : params) p->var.zero_grad();
    model.set_training(false);
    return result;
}

void write_loss_log_csv(const std::vector<LossLogRow>& log, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(17);
    out << "step,rec,ssim,margin,trust,total\n";
    for (const auto& r : log) {
        out << r.step << ',' << r.loss.rec << ',' << r.loss.ssim << ',' << r.loss.margin << ',' << r.loss.trust << ','
            << r.loss.total << '\n';
    }
}

}  // namespace tmae
