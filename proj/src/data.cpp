#include "trustmae/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "trustmae/error.hpp"
#include "trustmae/ops.hpp"

namespace tmae {

namespace fs = std::filesystem;

std::string to_string(TextureKind k) {
    switch (k) {
        case TextureKind::stripes: return "stripes";
        case TextureKind::checker: return "checker";
        case TextureKind::bandlimited_noise: return "bandlimited_noise";
        case TextureKind::blobs: return "blobs";
    }
    return "?";
}

TextureKind parse_texture_kind(const std::string& s) {
    for (auto k : {TextureKind::stripes, TextureKind::checker, TextureKind::bandlimited_noise, TextureKind::blobs}) {
        if (s == to_string(k)) return k;
    }
    throw ConfigError("unknown texture kind '" + s + "'");
}

std::string to_string(DefectShape s) {
    switch (s) {
        case DefectShape::blob: return "blob";
        case DefectShape::scratch: return "scratch";
        case DefectShape::discoloration: return "discoloration";
    }
    return "?";
}

DefectShape parse_defect_shape(const std::string& s) {
    for (auto k : {DefectShape::blob, DefectShape::scratch, DefectShape::discoloration}) {
        if (s == to_string(k)) return k;
    }
    throw ConfigError("unknown defect shape '" + s + "'");
}

void DatasetSpec::validate() const {
    if (image_size < 8) throw ConfigError("dataset image_size must be >= 8");
    if (channels != 1 && channels != 3) throw ConfigError("dataset channels must be 1 or 3");
    if (!(noise_fraction >= 0.0 && noise_fraction < 1.0)) throw ConfigError("noise_fraction must lie in [0, 1)");
    if (defect.min_size == 0) throw ConfigError("defect size must be at least one pixel");
    if (defect.max_size < defect.min_size) throw ConfigError("defect max_size < min_size");
    if (defect.max_size > image_size / 2) throw ConfigError("defect max_size must be at most image_size / 2");
    if (!(defect.min_contrast > 0.0) || defect.max_contrast < defect.min_contrast || defect.max_contrast > 1.0) {
        throw ConfigError("defect contrast range must satisfy 0 < min <= max <= 1");
    }
    if (defect.shapes.empty()) throw ConfigError("at least one defect shape is required");
}

std::size_t DatasetSpec::defective_train_count() const {
    return static_cast<std::size_t>(std::llround(noise_fraction * static_cast<double>(n_train)));
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

int to_level(double v) { return static_cast<int>(std::lround((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5)); }
double from_level(int q) { return q / 127.5 - 1.0; }

// Texture parameters shared by every image of a dataset.
struct TextureStyle {
    double period, angle, cell;
    std::vector<double> gain, offset;
};

TextureStyle texture_style(const DatasetSpec& spec) {
    Rng rng(derive_seed(spec.seed, "texture.style"));
    TextureStyle s;
    s.period = uniform(rng, 7.0, 11.0);
    s.angle = uniform(rng, 0.0, std::numbers::pi);
    s.cell = std::floor(uniform(rng, 6.0, 10.0));
    for (std::size_t c = 0; c < spec.channels; ++c) {
        s.gain.push_back(spec.channels == 1 ? 1.0 : uniform(rng, 0.6, 1.0));
        s.offset.push_back(spec.channels == 1 ? 0.0 : uniform(rng, -0.2, 0.2));
    }
    return s;
}

Tensor base_pattern(const DatasetSpec& spec, const TextureStyle& style, Rng& rng) {
    const std::size_t n = spec.image_size;
    Tensor p({n, n}, 0.0);
    auto at = [&](std::size_t y, std::size_t x) -> double& { return p[y * n + x]; };
    switch (spec.texture) {
        case TextureKind::stripes: {
            const double phase = uniform(rng, 0.0, kTwoPi);
            const double amp = uniform(rng, 0.55, 0.65);
            const double cx = std::cos(style.angle), sy = std::sin(style.angle);
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x)
                    at(y, x) = amp * std::sin(kTwoPi * (x * cx + y * sy) / style.period + phase);
            break;
        }
        case TextureKind::checker: {
            const auto cell = static_cast<long>(style.cell);
            const long ox = uniform_int(rng, 0, 2 * cell - 1), oy = uniform_int(rng, 0, 2 * cell - 1);
            for (std::size_t y = 0; y < n; ++y)
                for (std::size_t x = 0; x < n; ++x) {
                    const long cxi = (static_cast<long>(x) + ox) / cell, cyi = (static_cast<long>(y) + oy) / cell;
                    at(y, x) = ((cxi + cyi) % 2 == 0) ? 0.5 : -0.5;
                }
            break;
        }
        case TextureKind::bandlimited_noise: {
            const int waves = 12;
            for (int k = 0; k < waves; ++k) {
                const double f = uniform(rng, 1.0 / 12.0, 1.0 / 6.0);
                const double th = uniform(rng, 0.0, std::numbers::pi);
                const double ph = uniform(rng, 0.0, kTwoPi);
                const double fx = f * std::cos(th), fy = f * std::sin(th);
                for (std::size_t y = 0; y < n; ++y)
                    for (std::size_t x = 0; x < n; ++x) at(y, x) += std::sin(kTwoPi * (fx * x + fy * y) + ph);
            }
            // Sum of unit sinusoids has standard deviation sqrt(waves / 2).
            const double s = 0.3 / std::sqrt(waves / 2.0);
            for (auto& v : p.data()) v *= s;
            break;
        }
        case TextureKind::blobs: {
            for (auto& v : p.data()) v = -0.4;
            const int count = 10;
            for (int k = 0; k < count; ++k) {
                const double by = uniform(rng, 0.0, n), bx = uniform(rng, 0.0, n);
                const double sd = uniform(rng, 3.0, 6.0);
                const double amp = uniform(rng, 0.4, 0.8);
                for (std::size_t y = 0; y < n; ++y)
                    for (std::size_t x = 0; x < n; ++x) {
                        const double d2 = (y - by) * (y - by) + (x - bx) * (x - bx);
                        at(y, x) += amp * std::exp(-d2 / (2.0 * sd * sd));
                    }
            }
            break;
        }
    }
    return p;
}

// Distance from point to segment.
double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

Tensor defect_footprint(std::size_t h, std::size_t w, const DefectParams& params, Rng& rng) {
    const DefectShape shape = params.shapes[uniform_int(rng, 0, static_cast<std::int64_t>(params.shapes.size()) - 1)];
    const double size = static_cast<double>(
        uniform_int(rng, static_cast<std::int64_t>(params.min_size), static_cast<std::int64_t>(params.max_size)));
    const double cy = std::floor(uniform(rng, 0.0, static_cast<double>(h)));
    const double cx = std::floor(uniform(rng, 0.0, static_cast<double>(w)));
    Tensor mask({h, w}, 0.0);
    switch (shape) {
        case DefectShape::blob: {
            const double a = size / 2.0, b = size / 2.0 * uniform(rng, 0.5, 1.0);
            const double th = uniform(rng, 0.0, std::numbers::pi);
            const double c = std::cos(th), s = std::sin(th);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double dx = x - cx, dy = y - cy;
                    const double u = (dx * c + dy * s) / a, v = (-dx * s + dy * c) / b;
                    if (u * u + v * v <= 1.0) mask[y * w + x] = 1.0;
                }
            break;
        }
        case DefectShape::scratch: {
            const double len = size * uniform(rng, 1.5, 2.5);
            const double th = uniform(rng, 0.0, std::numbers::pi);
            const double half_width = uniform(rng, 0.5, 1.0);
            const double ax = cx - 0.5 * len * std::cos(th), ay = cy - 0.5 * len * std::sin(th);
            const double bx = cx + 0.5 * len * std::cos(th), by = cy + 0.5 * len * std::sin(th);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    if (segment_distance(x, y, ax, ay, bx, by) <= half_width) mask[y * w + x] = 1.0;
            break;
        }
        case DefectShape::discoloration: {
            const double hw = size / 2.0, hh = size / 2.0 * uniform(rng, 0.6, 1.0);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    if (std::abs(x - cx) <= hw && std::abs(y - cy) <= hh) mask[y * w + x] = 1.0;
            break;
        }
    }
    mask[static_cast<std::size_t>(cy) * w + static_cast<std::size_t>(cx)] = 1.0;
    return mask;
}

}  // namespace

Tensor generate_texture(const DatasetSpec& spec, std::uint64_t stream_seed) {
    const TextureStyle style = texture_style(spec);
    Rng rng(stream_seed);
    const Tensor base = base_pattern(spec, style, rng);
    const std::size_t n = spec.image_size;
    Tensor img({spec.channels, n, n});
    for (std::size_t c = 0; c < spec.channels; ++c)
        for (std::size_t i = 0; i < n * n; ++i) {
            const double v = style.gain[c] * base[i] + style.offset[c] + 0.02 * normal(rng);
            img[c * n * n + i] = from_level(to_level(v));
        }
    return img;
}

Tensor inject_defect(Tensor& image, const DefectParams& params, Rng& rng) {
    if (image.rank() != 3) throw ShapeError("inject_defect expects a [C, H, W] image");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (params.min_size == 0) throw ConfigError("defect size must be at least one pixel");
    Tensor mask;
    for (int attempt = 0;; ++attempt) {
        mask = defect_footprint(h, w, params, rng);
        if (mask.sum() <= 0.25 * static_cast<double>(h * w)) break;
        if (attempt > 50) throw Error("could not place a defect covering at most a quarter of the image");
    }
    const double contrast = uniform(rng, params.min_contrast, params.max_contrast);
    const int levels = std::min(128, static_cast<int>(std::ceil(contrast * 127.5 - 1e-9)));
    const int sign = uniform01(rng) < 0.5 ? 1 : -1;
    for (std::size_t i = 0; i < h * w; ++i) {
        if (mask[i] == 0.0) continue;
        for (std::size_t ch = 0; ch < c; ++ch) {
            double& v = image[ch * h * w + i];
            const int q = to_level(v);
            const int moved = (q + sign * levels >= 0 && q + sign * levels <= 255) ? q + sign * levels
                                                                                     : q - sign * levels;
            v = from_level(moved);
        }
    }
    return mask;
}

Dataset generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    Dataset d;
    const std::size_t k = spec.defective_train_count();
    std::vector<std::size_t> order(spec.n_train);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng pick(derive_seed(spec.seed, "train.noise"));
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_int(pick, 0, static_cast<std::int64_t>(i) - 1))]);
    }
    std::vector<char> defective(spec.n_train, 0);
    for (std::size_t i = 0; i < k; ++i) defective[order[i]] = 1;

    char name[64];
    auto make = [&](const char* stream, std::size_t index, bool with_defect, const char* prefix) {
        const std::uint64_t seed = derive_seed(spec.seed, stream, index);
        Sample s;
        s.image = generate_texture(spec, seed);
        if (with_defect) {
            Rng rng(derive_seed(seed, "defect"));
            s.mask = inject_defect(s.image, spec.defect, rng);
            s.is_defective = true;
        }
        std::snprintf(name, sizeof name, "%s_%04zu", prefix, index);
        s.source_id = name;
        // Noisy training images are unlabeled and live under train/good.
        s.group = with_defect && std::string(stream) != "train" ? "defect" : "good";
        return s;
    };
    for (std::size_t i = 0; i < spec.n_train; ++i) d.train.push_back(make("train", i, defective[i], "train"));
    for (std::size_t i = 0; i < spec.n_test_normal; ++i) {
        Sample s = make("test.normal", i, false, "good");
        s.mask = Tensor({spec.image_size, spec.image_size}, 0.0);
        d.test.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < spec.n_test_defective; ++i) d.test.push_back(make("test.defect", i, true, "defect"));
    return d;
}

void write_folder_dataset(const Dataset& data, const fs::path& root, const std::string& category) {
    const fs::path base = root / category;
    for (const char* sub : {"train/good", "test/good", "test/defect", "ground_truth/defect"}) {
        fs::create_directories(base / sub);
    }
    std::ofstream manifest(base / "manifest.csv");
    if (!manifest) throw IoError("cannot write " + (base / "manifest.csv").string());
    manifest << "source_id,split,is_defective\n";
    for (const auto& s : data.train) {
        write_png(base / "train/good" / (s.source_id + ".png"), tensor_to_raster(s.image));
        manifest << s.source_id << ",train," << (s.is_defective ? 1 : 0) << '\n';
    }
    for (const auto& s : data.test) {
        const fs::path dir = base / (s.is_defective ? "test/defect" : "test/good");
        write_png(dir / (s.source_id + ".png"), tensor_to_raster(s.image));
        if (s.is_defective) {
            if (!s.mask) throw Error("defective test sample " + s.source_id + " has no mask");
            write_png(base / "ground_truth/defect" / (s.source_id + "_mask.png"), mask_to_raster(*s.mask));
        }
        manifest << s.source_id << ",test," << (s.is_defective ? 1 : 0) << '\n';
    }
}

namespace {

std::vector<fs::path> sorted_pngs(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

void require_dir(const fs::path& p) {
    if (!fs::is_directory(p)) throw IoError("missing directory " + p.string());
}

Tensor load_image(const fs::path& p, std::size_t target) {
    Raster r = read_png(p);
    return target ? preprocess(r, target) : raster_to_tensor(r);
}

}  // namespace

Dataset load_folder_dataset(const fs::path& root, const std::string& category, std::size_t target_size) {
    const fs::path base = root / category;
    require_dir(base);
    require_dir(base / "train" / "good");
    require_dir(base / "test");

    std::map<std::string, bool> train_flags;
    if (fs::exists(base / "manifest.csv")) {
        std::ifstream in(base / "manifest.csv");
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            std::stringstream ss(line);
            std::string id, split, flag;
            if (std::getline(ss, id, ',') && std::getline(ss, split, ',') && std::getline(ss, flag, ',')) {
                if (split == "train") train_flags[id] = flag == "1";
            }
        }
    }

    Dataset d;
    for (const auto& p : sorted_pngs(base / "train" / "good")) {
        Sample s;
        s.source_id = p.stem().string();
        s.group = "good";
        s.image = load_image(p, target_size);
        auto it = train_flags.find(s.source_id);
        s.is_defective = it != train_flags.end() && it->second;
        d.train.push_back(std::move(s));
    }

    std::vector<std::string> types;
    for (const auto& e : fs::directory_iterator(base / "test")) {
        if (e.is_directory()) types.push_back(e.path().filename().string());
    }
    std::sort(types.begin(), types.end(), [](const std::string& a, const std::string& b) {
        if ((a == "good") != (b == "good")) return a == "good";
        return a < b;
    });
    for (const auto& type : types) {
        const bool good = type == "good";
        for (const auto& p : sorted_pngs(base / "test" / type)) {
            Sample s;
            s.source_id = p.stem().string();
            Raster img = read_png(p);
            s.image = target_size ? preprocess(img, target_size) : raster_to_tensor(img);
            s.is_defective = !good;
            s.group = type;
            const std::size_t h = s.image.dim(1), w = s.image.dim(2);
            if (good) {
                s.mask = Tensor({h, w}, 0.0);
            } else {
                const fs::path mp = base / "ground_truth" / type / (s.source_id + "_mask.png");
                if (!fs::exists(mp)) throw IoError("missing mask " + mp.string() + " for defective image " + p.string());
                Raster m = read_png(mp);
                if (m.width != img.width || m.height != img.height) {
                    throw IoError("mask " + mp.string() + " is " + std::to_string(m.width) + "x" +
                                  std::to_string(m.height) + " but its image is " + std::to_string(img.width) + "x" +
                                  std::to_string(img.height));
                }
                s.mask = target_size ? preprocess_mask(m, target_size) : raster_to_mask(m);
            }
            d.test.push_back(std::move(s));
        }
    }
    return d;
}

Tensor preprocess(const Raster& image, std::size_t target_size) {
    if (image.width == 0 || image.height == 0) throw ShapeError("cannot preprocess an empty image");
    if (target_size == 0) throw ConfigError("target size must be positive");
    Tensor t = raster_to_tensor(image);
    if (image.width == target_size && image.height == target_size) return t;
    NoGradGuard guard;
    return ops::bilinear_upsample(Var(t), target_size, target_size).value();
}

Tensor preprocess_mask(const Raster& mask, std::size_t target_size) {
    if (mask.width == 0 || mask.height == 0) throw ShapeError("cannot preprocess an empty mask");
    Tensor src = raster_to_mask(mask);
    Tensor out({target_size, target_size}, 0.0);
    for (std::size_t y = 0; y < target_size; ++y) {
        const std::size_t sy = std::min(mask.height - 1, (2 * y + 1) * mask.height / (2 * target_size));
        for (std::size_t x = 0; x < target_size; ++x) {
            const std::size_t sx = std::min(mask.width - 1, (2 * x + 1) * mask.width / (2 * target_size));
            out[y * target_size + x] = src[sy * mask.width + sx];
        }
    }
    return out;
}

namespace {

// Applies f(plane, h, w) -> plane to every [H, W] plane of a rank-2 or rank-3 tensor.
template <typename F>
Tensor per_plane(const Tensor& t, F&& f) {
    if (t.rank() != 2 && t.rank() != 3) throw ShapeError("expected [H, W] or [C, H, W], got " + shape_str(t.shape()));
    const std::size_t planes = t.rank() == 3 ? t.dim(0) : 1;
    const std::size_t h = t.dim(t.rank() - 2), w = t.dim(t.rank() - 1);
    Tensor out(t.shape());
    for (std::size_t p = 0; p < planes; ++p) f(t.ptr() + p * h * w, out.ptr() + p * h * w, h, w);
    return out;
}

}  // namespace

Tensor flip_horizontal(const Tensor& t) {
    return per_plane(t, [](const double* in, double* out, std::size_t h, std::size_t w) {
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out[y * w + x] = in[y * w + (w - 1 - x)];
    });
}

Tensor flip_vertical(const Tensor& t) {
    return per_plane(t, [](const double* in, double* out, std::size_t h, std::size_t w) {
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out[y * w + x] = in[(h - 1 - y) * w + x];
    });
}

Tensor rotate90(const Tensor& t, int k) {
    k = ((k % 4) + 4) % 4;
    if (k == 0) return t;
    if (t.dim(t.rank() - 1) != t.dim(t.rank() - 2)) throw ShapeError("rotate90 needs a square image");
    Tensor r = per_plane(t, [](const double* in, double* out, std::size_t n, std::size_t) {
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) out[y * n + x] = in[x * n + (n - 1 - y)];
    });
    return rotate90(r, k - 1);
}

Tensor batch_images(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ShapeError("cannot batch zero images");
    const Shape& first = samples.at(indices[0]).image.shape();
    if (first.size() != 3) throw ShapeError("sample images must be [C, H, W]");
    const std::size_t per = samples[indices[0]].image.numel();
    Tensor out({indices.size(), first[0], first[1], first[2]});
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const Tensor& img = samples.at(indices[b]).image;
        if (img.shape() != first) {
            throw ShapeError("image " + samples[indices[b]].source_id + " is " + shape_str(img.shape()) +
                             ", expected " + shape_str(first));
        }
        std::copy(img.ptr(), img.ptr() + per, out.ptr() + b * per);
    }
    return out;
}

Sample augment(const Sample& sample, const AugmentPolicy& policy, Rng& rng) {
    Sample out = sample;
    auto apply = [&](auto&& fn) {
        out.image = fn(out.image);
        if (out.mask) out.mask = fn(*out.mask);
    };
    if (policy.hflip && uniform01(rng) < 0.5) apply(flip_horizontal);
    if (policy.vflip && uniform01(rng) < 0.5) apply(flip_vertical);
    if (policy.rot90) {
        const int k = static_cast<int>(uniform_int(rng, 0, 3));
        apply([k](const Tensor& t) { return rotate90(t, k); });
    }
    return out;
}

}  // namespace tmae
