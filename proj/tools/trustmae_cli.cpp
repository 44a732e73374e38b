#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "trustmae/checkpoint.hpp"
#include "trustmae/config.hpp"
#include "trustmae/error.hpp"
#include "trustmae/eval.hpp"
#include "trustmae/grad_suite.hpp"
#include "trustmae/log.hpp"
#include "trustmae/memory.hpp"

using namespace tmae;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kIo = 2, kNumerical = 3 };

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "JSON run configuration (flat dotted keys)");
    app->add_option("--set", c.sets, "Override a config key, e.g. --set train.epochs=5");
    app->add_option("--seed", c.seed, "Run seed (overrides config and TRUSTMAE_SEED)");
    app->add_option("--threads", c.threads, "Worker threads; 1 is the deterministic mode")->check(CLI::PositiveNumber);
    app->add_flag("--quiet", c.quiet, "Suppress progress messages");
}

// Defaults < config file < TRUSTMAE_SEED < flags.
RunConfig resolve(const Common& c) {
    RunConfig cfg;
    if (!c.config.empty()) cfg = load_run_config(c.config);
    if (const char* env = std::getenv("TRUSTMAE_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError(std::string("TRUSTMAE_SEED is not an unsigned integer: ") + env);
        }
    }
    for (const auto& s : c.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        apply_override(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (c.seed) cfg.seed = *c.seed;
    if (c.threads != 1) log_warning("only single-threaded execution is implemented; running with 1 thread");
    set_log_quiet(c.quiet);
    return cfg;
}

// DIR names the category folder itself.
std::pair<fs::path, std::string> split_dataset_dir(const fs::path& dir) {
    fs::path p = fs::absolute(dir).lexically_normal();
    if (p.filename().empty()) p = p.parent_path();
    return {p.parent_path(), p.filename().string()};
}

Dataset load_dataset(const fs::path& dir, std::size_t size) {
    auto [root, category] = split_dataset_dir(dir);
    return load_folder_dataset(root, category, size);
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("not a number in list: '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError("empty list");
    return out;
}

std::vector<std::string> split_names(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(item);
    return out;
}

void check_channels(const Dataset& d, const ModelConfig& m) {
    const auto& any = d.train.empty() ? d.test : d.train;
    if (!any.empty() && any.front().image.dim(0) != m.channels) {
        throw ConfigError("dataset images have " + std::to_string(any.front().image.dim(0)) +
                          " channels but the model expects " + std::to_string(m.channels));
    }
}

void print_report(const EvalReport& r) {
    std::cout << "image_auc_max=" << r.image_auc_max << " image_auc_mean=" << r.image_auc_mean;
    if (r.pixel_auc) std::cout << " pixel_auc=" << *r.pixel_auc;
    std::cout << " fingerprint=" << r.fingerprint << '\n';
}

std::string one_line(std::string s) {
    for (auto& ch : s) {
        if (ch == '\n' || ch == '\r') ch = ' ';
    }
    return s;
}

int fail(const std::string& kind, const std::string& message, int code) {
    std::cerr << "error: " << kind << ": " << one_line(message) << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Memory-augmented autoencoder for texture defect detection"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    // generate-data
    Common gen_c;
    std::string gen_out;
    auto* gen = app.add_subcommand("generate-data", "Write a synthetic texture dataset in the folder layout");
    add_common(gen, gen_c);
    gen->add_option("--spec", gen_c.config, "JSON config; data.* keys describe the dataset");
    gen->add_option("--out", gen_out, "Dataset directory to create")->required();

    // train
    Common train_c;
    std::string train_data, train_out, train_resume;
    bool no_sparse = false, no_trust = false, no_memory = false;
    auto* tr = app.add_subcommand("train", "Train a model on DIR/train/good");
    add_common(tr, train_c);
    tr->add_option("--data", train_data, "Dataset directory")->required();
    tr->add_option("--out", train_out, "Output directory")->required();
    tr->add_option("--resume", train_resume, "Continue from a checkpoint");
    tr->add_flag("--no-sparse-addressing", no_sparse, "Dense memory addressing");
    tr->add_flag("--no-trust-region", no_trust, "Disable the trust-region loss");
    tr->add_flag("--no-memory", no_memory, "Bypass the memory (plain autoencoder)");

    // eval
    Common eval_c;
    std::string eval_ckpt, eval_data, eval_report, eval_distance, eval_heatmaps;
    bool eval_per_image = false;
    auto* ev = app.add_subcommand("eval", "Score the test split and write a report");
    add_common(ev, eval_c);
    ev->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
    ev->add_option("--data", eval_data, "Dataset directory")->required();
    ev->add_option("--report", eval_report, "Report CSV path")->required();
    ev->add_option("--distance", eval_distance, "Error map: mse, pd, mse-pd or ssim");
    ev->add_option("--heatmaps", eval_heatmaps, "Write 16-bit heatmaps under this directory");
    ev->add_flag("--per-image-pixel-auc", eval_per_image, "Average per-image pixel AUCs instead of pooling");

    // score
    Common score_c;
    std::string score_ckpt, score_image, score_heatmap, score_distance;
    auto* sc = app.add_subcommand("score", "Score one image and write its heatmap");
    add_common(sc, score_c);
    sc->add_option("--ckpt", score_ckpt, "Checkpoint file")->required();
    sc->add_option("--image", score_image, "PNG image")->required();
    sc->add_option("--heatmap", score_heatmap, "Heatmap PNG path (default: <image>_heatmap.png)");
    sc->add_option("--distance", score_distance, "Error map: mse, pd, mse-pd or ssim");

    // noise-sweep
    Common sweep_c;
    std::string sweep_levels = "0,0.1,0.2,0.3,0.4", sweep_variants = "full,plain-ae-mse", sweep_out;
    auto* sw = app.add_subcommand("noise-sweep", "Train and evaluate across training-noise levels");
    add_common(sw, sweep_c);
    sw->add_option("--levels", sweep_levels, "Comma-separated noise fractions");
    sw->add_option("--variants", sweep_variants,
                   "Comma-separated variants: full, no-trust-region, no-sparse, full-mse, plain-ae-mse");
    sw->add_option("--out", sweep_out, "Output directory")->required();

    // memory-stats
    Common mem_c;
    std::string mem_ckpt, mem_data, mem_out, mem_prune;
    auto* ms = app.add_subcommand("memory-stats", "Slot access statistics over the training split");
    add_common(ms, mem_c);
    ms->add_option("--ckpt", mem_ckpt, "Checkpoint file")->required();
    ms->add_option("--data", mem_data, "Dataset directory")->required();
    ms->add_option("--out", mem_out, "Statistics CSV path (default: memory_stats.csv next to the checkpoint)");
    ms->add_option("--prune", mem_prune, "Write a checkpoint with never-accessed slots removed");

    // grad-check
    Common gc_c;
    std::size_t gc_seeds = 3;
    auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient suite");
    add_common(gc, gc_c);
    gc->add_option("--seeds", gc_seeds, "Random inputs per check")->check(CLI::PositiveNumber);

    // delta2-sweep
    Common d2_c;
    std::string d2_values = "15,20,40", d2_out, d2_data;
    auto* d2 = app.add_subcommand("delta2-sweep", "Retrain at several trust-region radii");
    add_common(d2, d2_c);
    d2->add_option("--values", d2_values, "Comma-separated delta2 values");
    d2->add_option("--data", d2_data, "Dataset directory (default: generate from the config)");
    d2->add_option("--out", d2_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << '\n';
        std::cerr << app.help();
        return kUsage;
    }

    try {
        if (*gen) {
            RunConfig cfg = resolve(gen_c);
            cfg.validate();
            auto [root, category] = split_dataset_dir(gen_out);
            write_folder_dataset(generate_dataset(cfg.dataset_spec()), root, category);
            write_run_config(cfg, root / category / "config.resolved.json");
            std::cout << "wrote " << (root / category).string() << '\n';
        } else if (*tr) {
            RunConfig cfg = resolve(train_c);
            if (no_sparse) cfg.model.addressing.sparse_enabled = false;
            if (no_trust) cfg.model.trust.enabled = false;
            if (no_memory) cfg.model.memory_enabled = false;
            cfg.output_dir = train_out;
            cfg.validate();
            Dataset data = load_dataset(train_data, cfg.model.input_height);
            check_channels(data, cfg.model);
            const fs::path out = train_out;
            fs::create_directories(out);
            write_run_config(cfg, out / "config.resolved.json");
            const ExperimentConfig e = cfg.experiment();
            TrustMAEModel model = TrustMAEModel::build(cfg.model, e.seed);
            TrainState state;
            const TrainState* resume = nullptr;
            if (!train_resume.empty()) {
                restore_checkpoint(train_resume, model, &state);
                resume = &state;
            }
            const fs::path ckpt = out / "checkpoint.tmae";
            auto result = train(model, data.train, e.train, e.loss, resume,
                                [&](const TrustMAEModel& m, const TrainState& s) {
                                    save_checkpoint(const_cast<TrustMAEModel&>(m), s, ckpt);
                                    log_info("epoch " + std::to_string(s.epoch) + " saved");
                                });
            if (e.train.epochs == 0 || (resume && resume->epoch >= e.train.epochs)) {
                save_checkpoint(model, result.state, ckpt);
            }
            write_loss_log_csv(result.log, out / "loss_log.csv");
            if (!result.log.empty()) std::cout << "final_loss=" << result.log.back().loss.total << '\n';
            std::cout << "checkpoint=" << ckpt.string() << '\n';
        } else if (*ev) {
            RunConfig cfg = resolve(eval_c);
            if (!eval_distance.empty()) cfg.eval.distance = parse_error_source(eval_distance);
            cfg.eval.per_image_pixel_auc = cfg.eval.per_image_pixel_auc || eval_per_image;
            Checkpoint ck = load_checkpoint(eval_ckpt);
            Dataset data = load_dataset(eval_data, ck.model.config().input_height);
            check_channels(data, ck.model.config());
            std::vector<ErrorMap> maps;
            EvalReport r = evaluate(ck.model, data.test, cfg.experiment().eval, cfg.loss, &maps);
            write_eval_report_csv(r, eval_report);
            if (!eval_heatmaps.empty()) {
                for (std::size_t i = 0; i < maps.size(); ++i) {
                    const auto& s = data.test[i];
                    write_heatmap(maps[i], fs::path(eval_heatmaps) / "test" / s.group / (s.source_id + ".png"));
                }
            }
            print_report(r);
        } else if (*sc) {
            RunConfig cfg = resolve(score_c);
            if (!score_distance.empty()) cfg.eval.distance = parse_error_source(score_distance);
            Checkpoint ck = load_checkpoint(score_ckpt);
            Sample s;
            s.source_id = fs::path(score_image).stem().string();
            s.image = preprocess(read_png(score_image), ck.model.config().input_height);
            if (s.image.dim(0) != ck.model.config().channels) {
                throw ConfigError("image has " + std::to_string(s.image.dim(0)) + " channels, model expects " +
                                  std::to_string(ck.model.config().channels));
            }
            std::vector<ErrorMap> maps;
            set_log_quiet(true);
            EvalReport r = evaluate(ck.model, {s}, cfg.experiment().eval, cfg.loss, &maps);
            fs::path heat = score_heatmap;
            if (heat.empty()) {
                heat = fs::path(score_image).parent_path() / (s.source_id + "_heatmap.png");
            }
            write_heatmap(maps.front(), heat);
            std::cout << "score_max=" << r.rows[0].score_max << " score_mean=" << r.rows[0].score_mean << '\n';
        } else if (*sw) {
            RunConfig cfg = resolve(sweep_c);
            cfg.output_dir = sweep_out;
            cfg.validate();
            std::vector<Variant> variants;
            for (const auto& n : split_names(sweep_variants)) variants.push_back(find_variant(n));
            const fs::path out = sweep_out;
            fs::create_directories(out);
            write_run_config(cfg, out / "config.resolved.json");
            auto rows = noise_sweep(cfg.dataset_spec(), parse_list(sweep_levels), cfg.experiment(), variants);
            write_sweep_csv(rows, out / "sweep.csv");
            for (const auto& r : rows) {
                std::cout << "noise=" << r.noise << " variant=" << r.variant << " image_auc_max=" << r.image_auc_max
                          << " image_auc_mean=" << r.image_auc_mean << '\n';
            }
        } else if (*ms) {
            resolve(mem_c);
            Checkpoint ck = load_checkpoint(mem_ckpt);
            Dataset data = load_dataset(mem_data, ck.model.config().input_height);
            check_channels(data, ck.model.config());
            MemoryAccessReport rep = memory_access_report(ck.model, data.train);
            const fs::path csv = mem_out.empty() ? fs::path(mem_ckpt).parent_path() / "memory_stats.csv" : fs::path(mem_out);
            write_memory_stats_csv(ck.model.bank(), csv);
            std::size_t used = 0;
            for (auto c : rep.counts) used += c > 0;
            std::cout << "entropy=" << rep.entropy << " slots_used=" << used << " slots=" << rep.counts.size() << '\n';
            if (!mem_prune.empty()) {
                ck.model.replace_bank(prune(ck.model.bank()));
                // Optimizer moments no longer match the pruned bank.
                TrainState pruned;
                pruned.epoch = ck.state.epoch;
                pruned.step = ck.state.step;
                save_checkpoint(ck.model, pruned, mem_prune);
                std::cout << "pruned_checkpoint=" << mem_prune << '\n';
            }
        } else if (*gc) {
            resolve(gc_c);
            bool ok = true;
            for (const auto& r : gradient_suite(gc_seeds)) {
                std::cout << (r.passed() ? "PASS " : "FAIL ") << r.name << " seed=" << r.seed << " rel_error=" << r.error
                          << '\n';
                ok = ok && r.passed();
            }
            if (!ok) return fail("numerical", "gradient check failed", kNumerical);
        } else if (*d2) {
            RunConfig cfg = resolve(d2_c);
            cfg.output_dir = d2_out;
            cfg.validate();
            Dataset data = d2_data.empty() ? generate_dataset(cfg.dataset_spec())
                                           : load_dataset(d2_data, cfg.model.input_height);
            const fs::path out = d2_out;
            fs::create_directories(out);
            write_run_config(cfg, out / "config.resolved.json");
            auto rows = delta2_sweep(data, parse_list(d2_values), cfg.experiment());
            write_delta2_csv(rows, out / "delta2_sweep.csv");
            double lo = 1.0, hi = 0.0;
            for (const auto& r : rows) {
                std::cout << "delta2=" << r.delta2 << " image_auc_max=" << r.image_auc_max
                          << " image_auc_mean=" << r.image_auc_mean << '\n';
                lo = std::min(lo, r.image_auc_max);
                hi = std::max(hi, r.image_auc_max);
            }
            std::cout << "auc_spread=" << hi - lo << '\n';
        }
    } catch (const NumericalError& e) {
        return fail("numerical", e.what(), kNumerical);
    } catch (const CorruptFileError& e) {
        return fail("corrupt-file", e.what(), kIo);
    } catch (const VersionMismatchError& e) {
        return fail("version-mismatch", e.what(), kIo);
    } catch (const ShapeMismatchError& e) {
        return fail("shape-mismatch", e.what(), kIo);
    } catch (const IoError& e) {
        return fail("io", e.what(), kIo);
    } catch (const fs::filesystem_error& e) {
        return fail("io", e.what(), kIo);
    } catch (const ConfigError& e) {
        return fail("config", e.what(), kUsage);
    } catch (const ShapeError& e) {
        return fail("shape", e.what(), kUsage);
    } catch (const Error& e) {
        return fail("failed", e.what(), kUsage);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), kUsage);
    }
    return kOk;
}
