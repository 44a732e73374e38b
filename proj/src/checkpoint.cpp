#include "trustmae/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "trustmae/config.hpp"
#include "trustmae/error.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace tmae {

namespace {

constexpr char kMagic[4] = {'T', 'M', 'A', 'E'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeF64 = 1;

class Writer {
public:
    template <typename T>
    void put(T v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void str(const std::string& s) {
        put(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<char>& buffer() { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    Reader(const std::vector<char>& buf, std::size_t end, const std::string& path) : buf_(buf), end_(end), path_(path) {}
    template <typename T>
    T get() {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return v;
    }
    const char* take(std::size_t n) {
        if (n > end_ - pos_) throw CorruptFileError("checkpoint " + path_ + " is truncated");
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::string str() {
        const auto n = get<std::uint32_t>();
        const char* p = take(n);
        return std::string(p, n);
    }
    std::size_t remaining() const { return end_ - pos_; }

private:
    const std::vector<char>& buf_;
    std::size_t end_;
    std::size_t pos_ = 0;
    std::string path_;
};

std::uint32_t crc_of(const char* p, std::size_t n) {
    return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(p), static_cast<uInt>(n)));
}

// Every tensor of the model (and optimizer moments when present), by name.
std::vector<std::pair<std::string, Tensor*>> tensor_table(TrustMAEModel& model, AdamState* adam) {
    std::vector<std::pair<std::string, Tensor*>> t;
    auto params = model.parameters();
    for (Parameter* p : params) t.emplace_back(p->name, &p->mutable_value());
    for (auto& b : model.buffers()) t.emplace_back(b.name, b.tensor);
    if (adam && !adam->m.empty()) {
        if (adam->m.size() != params.size()) throw ShapeError("optimizer state does not match the model");
        for (std::size_t i = 0; i < params.size(); ++i) t.emplace_back("adam.m." + params[i]->name, &adam->m[i]);
        for (std::size_t i = 0; i < params.size(); ++i) t.emplace_back("adam.v." + params[i]->name, &adam->v[i]);
    }
    return t;
}

struct StoredTensor {
    Shape shape;
    const char* data = nullptr;
    std::uint8_t dtype = kDtypeF64;
};

struct ParsedFile {
    std::vector<char> bytes;
    nlohmann::json header;
    std::vector<std::pair<std::string, StoredTensor>> tensors;
};

ParsedFile parse(const std::filesystem::path& path) {
    ParsedFile f;
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read checkpoint " + path.string());
        f.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    const std::string name = path.string();
    if (f.bytes.size() < 8 || std::memcmp(f.bytes.data(), kMagic, 4) != 0) {
        throw CorruptFileError("checkpoint " + name + " does not start with the TMAE magic");
    }
    std::uint32_t version;
    std::memcpy(&version, f.bytes.data() + 4, 4);
    if (version != kCheckpointVersion) {
        throw VersionMismatchError("checkpoint " + name + " has format version " + std::to_string(version) +
                                   ", expected " + std::to_string(kCheckpointVersion));
    }
    if (f.bytes.size() < 12) throw CorruptFileError("checkpoint " + name + " is truncated");
    const std::size_t body = f.bytes.size() - 4;
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, f.bytes.data() + body, 4);
    if (crc_of(f.bytes.data(), body) != stored_crc) {
        throw CorruptFileError("checkpoint " + name + " failed its CRC check (truncated or corrupted)");
    }
    Reader r(f.bytes, body, name);
    r.take(8);
    f.header = nlohmann::json::parse(r.str(), nullptr, false);
    if (f.header.is_discarded() || !f.header.is_object()) throw CorruptFileError("checkpoint " + name + " has an unreadable header");
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string tname = r.str();
        StoredTensor t;
        t.dtype = r.get<std::uint8_t>();
        if (t.dtype != kDtypeF32 && t.dtype != kDtypeF64) {
            throw CorruptFileError("checkpoint " + name + ": tensor " + tname + " has unknown dtype code");
        }
        const auto rank = r.get<std::uint32_t>();
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
            n *= t.shape.back();
        }
        const std::size_t width = t.dtype == kDtypeF64 ? 8 : 4;
        if (n > r.remaining() / width) throw CorruptFileError("checkpoint " + name + " is truncated");
        t.data = r.take(n * width);
        f.tensors.emplace_back(std::move(tname), t);
    }
    if (r.remaining() != 0) throw CorruptFileError("checkpoint " + name + " has trailing bytes");
    return f;
}

void fill(Tensor& dst, const StoredTensor& src) {
    if (src.dtype == kDtypeF64) {
        std::memcpy(dst.ptr(), src.data, dst.numel() * sizeof(double));
    } else {
        for (std::size_t i = 0; i < dst.numel(); ++i) {
            float v;
            std::memcpy(&v, src.data + i * 4, 4);
            dst[i] = v;
        }
    }
}

void apply(const ParsedFile& f, TrustMAEModel& model, TrainState* state, const std::string& name) {
    TrainState loaded;
    const auto& ts = f.header.value("train_state", nlohmann::json::object());
    loaded.epoch = ts.value("epoch", std::uint64_t{0});
    loaded.step = ts.value("step", std::uint64_t{0});
    loaded.adam.step = ts.value("adam_step", std::uint64_t{0});
    std::map<std::string, const StoredTensor*> stored;
    bool has_moments = false;
    for (const auto& [n, t] : f.tensors) {
        stored[n] = &t;
        has_moments = has_moments || n.rfind("adam.", 0) == 0;
    }
    if (has_moments) {
        for (Parameter* p : model.parameters()) {
            loaded.adam.m.emplace_back(p->value().shape(), 0.0);
            loaded.adam.v.emplace_back(p->value().shape(), 0.0);
        }
    }
    auto table = tensor_table(model, &loaded.adam);
    // Validate the complete table before touching the model.
    for (const auto& [n, t] : table) {
        auto it = stored.find(n);
        if (it == stored.end()) throw ShapeMismatchError("checkpoint " + name + " has no tensor " + n);
        if (it->second->shape != t->shape()) {
            throw ShapeMismatchError("checkpoint " + name + ": tensor " + n + " has shape " +
                                     shape_str(it->second->shape) + ", model expects " + shape_str(t->shape()));
        }
    }
    if (stored.size() != table.size()) {
        for (const auto& [n, t] : stored) {
            bool known = false;
            for (const auto& e : table) known = known || e.first == n;
            if (!known) throw ShapeMismatchError("checkpoint " + name + " has unexpected tensor " + n);
        }
    }
    for (auto& [n, t] : table) fill(*t, *stored[n]);
    model.bank().reset_stats();
    if (state) *state = std::move(loaded);
}

}  // namespace

void save_checkpoint(TrustMAEModel& model, const TrainState& state, const std::filesystem::path& path) {
    AdamState adam = state.adam;
    auto table = tensor_table(model, &adam);
    nlohmann::ordered_json header{{"model", to_json(model.config())},
                                  {"train_state",
                                   {{"epoch", state.epoch}, {"step", state.step}, {"adam_step", state.adam.step}}}};
    Writer w;
    w.bytes(kMagic, 4);
    w.put(kCheckpointVersion);
    w.str(header.dump());
    w.put(static_cast<std::uint32_t>(table.size()));
    for (const auto& [name, t] : table) {
        w.str(name);
        w.put(kDtypeF64);
        w.put(static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape()) w.put(static_cast<std::uint64_t>(d));
        w.bytes(t->ptr(), t->numel() * sizeof(double));
    }
    w.put(crc_of(w.buffer().data(), w.buffer().size()));

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + tmp.string());
        out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
        if (!out) throw IoError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    ParsedFile f = parse(path);
    if (!f.header.contains("model")) throw CorruptFileError("checkpoint " + path.string() + " has no model config");
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(f.header["model"]);
    } catch (const ConfigError& e) {
        throw CorruptFileError("checkpoint " + path.string() + ": " + e.what());
    }
    Checkpoint c{TrustMAEModel::build(cfg, 0), {}};
    apply(f, c.model, &c.state, path.string());
    c.model.set_training(false);
    return c;
}

void restore_checkpoint(const std::filesystem::path& path, TrustMAEModel& model, TrainState* state) {
    ParsedFile f = parse(path);
    apply(f, model, state, path.string());
    if (f.header.contains("model")) {
        ModelConfig stored = model_config_from_json(f.header["model"]);
        model.mutable_config().trust.scale = stored.trust.scale;
    }
}

}  // namespace tmae
