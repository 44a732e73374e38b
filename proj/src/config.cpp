#include "trustmae/config.hpp"

#include <fstream>
#include <functional>

#include "trustmae/error.hpp"

namespace tmae {

using nlohmann::json;
using nlohmann::ordered_json;

RunConfig::RunConfig() {
    data.image_size = model.input_height;
    data.channels = model.channels;
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    loss.validate();
    eval.validate();
    data.validate();
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

ExperimentConfig RunConfig::experiment() const {
    ExperimentConfig e{model, train, loss, eval, seed};
    e.train.seed = seed;
    e.eval.seed = seed;
    return e;
}

DatasetSpec RunConfig::dataset_spec() const {
    DatasetSpec s = data;
    s.seed = seed;
    return s;
}

namespace {

struct Field {
    std::string key;
    std::function<ordered_json(const RunConfig&)> get;
    std::function<void(RunConfig&, const json&)> set;
};

template <typename T>
T read_value(const std::string& key, const json& j) {
    if constexpr (std::is_same_v<T, bool>) {
        if (!j.is_boolean()) throw ConfigError(key + ": expected true or false");
        return j.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
        if (!j.is_number_unsigned()) throw ConfigError(key + ": expected a non-negative integer");
        return static_cast<T>(j.get<std::uint64_t>());
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!j.is_number()) throw ConfigError(key + ": expected a number");
        return j.get<double>();
    } else {
        if (!j.is_string()) throw ConfigError(key + ": expected a string");
        return j.get<std::string>();
    }
}

template <typename T, typename Access>
Field plain(std::string key, Access access) {
    return {key, [access](const RunConfig& c) { return ordered_json(access(const_cast<RunConfig&>(c))); },
            [access, key](RunConfig& c, const json& j) { access(c) = read_value<T>(key, j); }};
}

template <typename E, typename Access, typename Parse>
Field enumerated(std::string key, Access access, Parse parse) {
    return {key, [access](const RunConfig& c) { return ordered_json(to_string(access(const_cast<RunConfig&>(c)))); },
            [access, parse, key](RunConfig& c, const json& j) { access(c) = parse(read_value<std::string>(key, j)); }};
}

#define TMAE_FIELD(T, key, expr) plain<T>(key, [](RunConfig& c) -> T& { return expr; })

const std::vector<Field>& fields() {
    static const std::vector<Field> all = [] {
        std::vector<Field> f{
            TMAE_FIELD(std::uint64_t, "seed", c.seed),
            TMAE_FIELD(std::string, "output_dir", c.output_dir),
            {"image_size", [](const RunConfig& c) { return ordered_json(c.data.image_size); },
             [](RunConfig& c, const json& j) {
                 const auto v = read_value<std::size_t>("image_size", j);
                 c.data.image_size = c.model.input_height = c.model.input_width = v;
             }},
            {"channels", [](const RunConfig& c) { return ordered_json(c.data.channels); },
             [](RunConfig& c, const json& j) {
                 const auto v = read_value<std::size_t>("channels", j);
                 c.data.channels = c.model.channels = v;
             }},
            TMAE_FIELD(std::size_t, "model.downsample_layers", c.model.downsample_layers),
            TMAE_FIELD(std::size_t, "model.residual_blocks", c.model.residual_blocks),
            TMAE_FIELD(std::size_t, "model.latent_dim", c.model.latent_dim),
            TMAE_FIELD(std::size_t, "model.memory_slots", c.model.memory_slots),
            TMAE_FIELD(std::size_t, "model.base_width", c.model.base_width),
            TMAE_FIELD(std::size_t, "model.top_k", c.model.addressing.k),
            TMAE_FIELD(bool, "model.sparse_addressing", c.model.addressing.sparse_enabled),
            TMAE_FIELD(bool, "model.memory_enabled", c.model.memory_enabled),
            TMAE_FIELD(bool, "model.trust_region", c.model.trust.enabled),
            TMAE_FIELD(double, "model.delta2", c.model.trust.delta2),
            TMAE_FIELD(std::size_t, "train.epochs", c.train.epochs),
            TMAE_FIELD(std::size_t, "train.batch_size", c.train.batch_size),
            TMAE_FIELD(double, "train.lr", c.train.lr),
            TMAE_FIELD(double, "train.adam_beta1", c.train.adam_beta1),
            TMAE_FIELD(double, "train.adam_beta2", c.train.adam_beta2),
            TMAE_FIELD(double, "train.adam_eps", c.train.adam_eps),
            TMAE_FIELD(double, "train.clip_norm", c.train.clip_norm),
            TMAE_FIELD(bool, "train.calibrate_delta2", c.train.calibrate_delta2),
            TMAE_FIELD(double, "train.calibration_quantile", c.train.calibration_quantile),
            TMAE_FIELD(bool, "train.augment_hflip", c.train.augment.hflip),
            TMAE_FIELD(bool, "train.augment_vflip", c.train.augment.vflip),
            TMAE_FIELD(bool, "train.augment_rot90", c.train.augment.rot90),
            TMAE_FIELD(double, "loss.lambda_rec", c.loss.lambda_rec),
            TMAE_FIELD(double, "loss.lambda_sm", c.loss.lambda_sm),
            TMAE_FIELD(double, "loss.lambda_margin", c.loss.lambda_margin),
            TMAE_FIELD(double, "loss.lambda_trust", c.loss.lambda_trust),
            TMAE_FIELD(std::size_t, "loss.ssim_window", c.loss.ssim_window),
            TMAE_FIELD(double, "loss.ssim_c1", c.loss.ssim_c1),
            TMAE_FIELD(double, "loss.ssim_c2", c.loss.ssim_c2),
            enumerated<TextureKind>("data.texture", [](RunConfig& c) -> TextureKind& { return c.data.texture; },
                                    parse_texture_kind),
            TMAE_FIELD(std::size_t, "data.n_train", c.data.n_train),
            TMAE_FIELD(std::size_t, "data.n_test_normal", c.data.n_test_normal),
            TMAE_FIELD(std::size_t, "data.n_test_defective", c.data.n_test_defective),
            TMAE_FIELD(double, "data.noise_fraction", c.data.noise_fraction),
            TMAE_FIELD(std::size_t, "data.defect_min_size", c.data.defect.min_size),
            TMAE_FIELD(std::size_t, "data.defect_max_size", c.data.defect.max_size),
            TMAE_FIELD(double, "data.defect_min_contrast", c.data.defect.min_contrast),
            TMAE_FIELD(double, "data.defect_max_contrast", c.data.defect.max_contrast),
            {"data.defect_shapes",
             [](const RunConfig& c) {
                 ordered_json a = ordered_json::array();
                 for (auto s : c.data.defect.shapes) a.push_back(to_string(s));
                 return a;
             },
             [](RunConfig& c, const json& j) {
                 if (!j.is_array()) throw ConfigError("data.defect_shapes: expected an array of shape names");
                 std::vector<DefectShape> shapes;
                 for (const auto& s : j) shapes.push_back(parse_defect_shape(read_value<std::string>("data.defect_shapes", s)));
                 c.data.defect.shapes = shapes;
             }},
            enumerated<ErrorSource>("eval.distance", [](RunConfig& c) -> ErrorSource& { return c.eval.distance; },
                                    parse_error_source),
            enumerated<ExtractorKind>("eval.extractor", [](RunConfig& c) -> ExtractorKind& { return c.eval.extractor; },
                                      parse_extractor_kind),
            TMAE_FIELD(std::size_t, "eval.extractor_depth", c.eval.extractor_depth),
            TMAE_FIELD(bool, "eval.per_image_pixel_auc", c.eval.per_image_pixel_auc),
            TMAE_FIELD(std::size_t, "eval.batch_size", c.eval.batch_size),
        };
        return f;
    }();
    return all;
}

#undef TMAE_FIELD

const Field& find_field(const std::string& key) {
    for (const auto& f : fields()) {
        if (f.key == key) return f;
    }
    throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : fields()) keys.push_back(f.key);
    return keys;
}

ordered_json to_json(const RunConfig& cfg) {
    ordered_json j = ordered_json::object();
    for (const auto& f : fields()) j[f.key] = f.get(cfg);
    return j;
}

RunConfig run_config_from_json(const json& j, RunConfig base) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, value] : j.items()) find_field(key).set(base, value);
    return base;
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    json v = json::parse(value, nullptr, false);
    if (v.is_discarded()) v = value;
    find_field(key).set(cfg, v);
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
    return run_config_from_json(j, std::move(base));
}

void write_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(cfg).dump(2) << '\n';
}

ordered_json to_json(const ModelConfig& c) {
    return ordered_json{{"input_height", c.input_height},
                        {"input_width", c.input_width},
                        {"channels", c.channels},
                        {"downsample_layers", c.downsample_layers},
                        {"residual_blocks", c.residual_blocks},
                        {"latent_dim", c.latent_dim},
                        {"memory_slots", c.memory_slots},
                        {"base_width", c.base_width},
                        {"top_k", c.addressing.k},
                        {"sparse_addressing", c.addressing.sparse_enabled},
                        {"memory_enabled", c.memory_enabled},
                        {"trust_region", c.trust.enabled},
                        {"delta2", c.trust.delta2},
                        {"delta2_scale", c.trust.scale}};
}

ModelConfig model_config_from_json(const json& j) {
    try {
        ModelConfig c;
        c.input_height = j.at("input_height").get<std::size_t>();
        c.input_width = j.at("input_width").get<std::size_t>();
        c.channels = j.at("channels").get<std::size_t>();
        c.downsample_layers = j.at("downsample_layers").get<std::size_t>();
        c.residual_blocks = j.at("residual_blocks").get<std::size_t>();
        c.latent_dim = j.at("latent_dim").get<std::size_t>();
        c.memory_slots = j.at("memory_slots").get<std::size_t>();
        c.base_width = j.at("base_width").get<std::size_t>();
        c.addressing.k = j.at("top_k").get<std::size_t>();
        c.addressing.sparse_enabled = j.at("sparse_addressing").get<bool>();
        c.memory_enabled = j.at("memory_enabled").get<bool>();
        c.trust.enabled = j.at("trust_region").get<bool>();
        c.trust.delta2 = j.at("delta2").get<double>();
        c.trust.scale = j.at("delta2_scale").get<double>();
        c.validate();
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid model config: ") + e.what());
    }
}

}  // namespace tmae
