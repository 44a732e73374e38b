#include "trustmae/model.hpp"

#include <cmath>

#include "trustmae/error.hpp"
#include "trustmae/rng.hpp"

namespace tmae {

void ModelConfig::validate() const {
    if (input_height < 1 || input_width < 1 || channels < 1 || downsample_layers < 1 ||
        latent_dim < 1 || memory_slots < 1 || base_width < 1) {
        throw ConfigError("model config: all sizes and counts must be >= 1");
    }
    const std::size_t f = std::size_t{1} << downsample_layers;
    if (input_height % f != 0 || input_width % f != 0) {
        throw ConfigError("model config: input " + std::to_string(input_height) + "x" +
                          std::to_string(input_width) + " is not divisible by 2^" +
                          std::to_string(downsample_layers));
    }
    if (addressing.k < 1 || addressing.k > memory_slots) {
        throw ConfigError("model config: top-k must lie in [1, memory_slots]");
    }
    if (!(trust.delta2 >= 0.0) || !(trust.scale > 0.0)) {
        throw ConfigError("model config: delta2 must be >= 0 and its scale > 0");
    }
}

std::vector<std::size_t> ModelConfig::encoder_widths() const {
    std::vector<std::size_t> w{base_width};
    for (std::size_t i = 1; i <= downsample_layers; ++i) {
        w.push_back(i == downsample_layers ? latent_dim : std::min(base_width << i, latent_dim));
    }
    return w;
}

Var Conv2d::forward(const Var& x) const {
    const Var* b = bias ? &bias->var : nullptr;
    return transposed ? ops::conv_transpose2d(x, kernel.var, b, stride, padding)
                      : ops::conv2d(x, kernel.var, b, stride, padding);
}

Var BatchNorm::forward(const Var& x, bool training) {
    return ops::batch_norm(x, gamma.var, beta.var, {&running_mean, &running_var, 0.1, 1e-5}, training);
}

Var ConvBnRelu::forward(const Var& x, bool training) {
    return ops::relu(norm.forward(conv.forward(x), training));
}

Var ResidualBlock::forward(const Var& x, bool training) {
    Var h = first.forward(x, training);
    return ops::add(x, second_norm.forward(second.forward(h), training));
}

namespace {

Tensor he_normal(Shape shape, double fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double sd = std::sqrt(2.0 / fan_in);
    for (auto& v : t.data()) v = sd * normal(rng);
    return t;
}

Conv2d make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, int stride,
                 int padding, bool transposed, bool with_bias, Rng& rng) {
    Conv2d c;
    c.stride = stride;
    c.padding = padding;
    c.transposed = transposed;
    const double fan_in = transposed
        ? static_cast<double>(cin * k * k) / static_cast<double>(stride * stride)
        : static_cast<double>(cin * k * k);
    Shape shape = transposed ? Shape{cin, cout, k, k} : Shape{cout, cin, k, k};
    c.kernel = Parameter(name + ".kernel", he_normal(shape, fan_in, rng));
    if (with_bias) c.bias = Parameter(name + ".bias", Tensor({cout}, 0.0));
    return c;
}

BatchNorm make_norm(const std::string& name, std::size_t c) {
    BatchNorm n;
    n.gamma = Parameter(name + ".gamma", Tensor({c}, 1.0));
    n.beta = Parameter(name + ".beta", Tensor({c}, 0.0));
    n.running_mean = Tensor({c}, 0.0);
    n.running_var = Tensor({c}, 1.0);
    return n;
}

ConvBnRelu make_block(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, int stride,
                      int padding, bool transposed, Rng& rng) {
    return {make_conv(name + ".conv", cin, cout, k, stride, padding, transposed, false, rng),
            make_norm(name + ".norm", cout)};
}

ResidualBlock make_residual(const std::string& name, std::size_t c, Rng& rng) {
    ResidualBlock r;
    r.first = make_block(name + ".a", c, c, 3, 1, 1, false, rng);
    r.second = make_conv(name + ".b.conv", c, c, 3, 1, 1, false, false, rng);
    r.second_norm = make_norm(name + ".b.norm", c);
    return r;
}

void collect(ConvBnRelu& b, std::vector<Parameter*>& out) {
    out.push_back(&b.conv.kernel);
    out.push_back(&b.norm.gamma);
    out.push_back(&b.norm.beta);
}

void collect(ResidualBlock& r, std::vector<Parameter*>& out) {
    collect(r.first, out);
    out.push_back(&r.second.kernel);
    out.push_back(&r.second_norm.gamma);
    out.push_back(&r.second_norm.beta);
}

void collect_buffers(const std::string& name, BatchNorm& n, std::vector<NamedBuffer>& out) {
    out.push_back({name + ".running_mean", &n.running_mean});
    out.push_back({name + ".running_var", &n.running_var});
}

std::string norm_name(const Parameter& gamma) {
    return gamma.name.substr(0, gamma.name.size() - std::string(".gamma").size());
}

}  // namespace

TrustMAEModel TrustMAEModel::build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    TrustMAEModel m;
    m.config_ = config;
    Rng rng(derive_seed(seed, "model.weights"));
    const auto widths = config.encoder_widths();
    const std::size_t z = config.latent_dim;

    m.stem_ = make_block("enc.stem", config.channels, widths[0], 7, 1, 3, false, rng);
    for (std::size_t i = 1; i < widths.size(); ++i) {
        m.down_.push_back(make_block("enc.down" + std::to_string(i), widths[i - 1], widths[i], 3, 2, 1, false, rng));
    }
    for (std::size_t i = 0; i < config.residual_blocks; ++i) {
        m.enc_res_.push_back(make_residual("enc.res" + std::to_string(i), z, rng));
    }
    m.bank_ = MemoryBank::initialize(config.memory_slots, z, derive_seed(seed, "model.memory"));
    for (std::size_t i = 0; i < config.residual_blocks; ++i) {
        m.dec_res_.push_back(make_residual("dec.res" + std::to_string(i), z, rng));
    }
    for (std::size_t i = widths.size() - 1; i >= 1; --i) {
        m.up_.push_back(make_block("dec.up" + std::to_string(widths.size() - i), widths[i], widths[i - 1], 4, 2, 1,
                                   true, rng));
    }
    m.head_ = make_conv("dec.head", widths[0], config.channels, 7, 1, 3, false, true, rng);
    // Small head keeps the initial tanh output away from saturation.
    for (auto& v : m.head_.kernel.mutable_value().data()) v *= 0.5;
    return m;
}

void TrustMAEModel::replace_bank(MemoryBank bank) {
    if (bank.dim() != config_.latent_dim) throw ShapeError("replace_bank: latent dimension mismatch");
    bank_ = std::move(bank);
    config_.memory_slots = bank_.size();
    if (config_.addressing.k > bank_.size()) config_.addressing.k = bank_.size();
}

Var TrustMAEModel::as_batch(const Var& x) const {
    const auto& s = x.shape();
    Var b = x;
    if (s.size() == 3) {
        b = Var::make(x.value().reshaped({1, s[0], s[1], s[2]}), {x},
                      [](Node& n) { n.inputs[0]->accumulate(n.grad.reshaped(n.inputs[0]->value.shape())); });
    }
    const auto& bs = b.shape();
    if (bs.size() != 4 || bs[1] != config_.channels || bs[2] != config_.input_height || bs[3] != config_.input_width) {
        throw ShapeError("input " + shape_str(s) + " does not match model input [" + std::to_string(config_.channels) +
                         "," + std::to_string(config_.input_height) + "," + std::to_string(config_.input_width) + "]");
    }
    return b;
}

Var TrustMAEModel::encode(const Var& x) {
    Var h = stem_.forward(as_batch(x), training_);
    for (auto& d : down_) h = d.forward(h, training_);
    for (auto& r : enc_res_) h = r.forward(h, training_);
    return h;
}

Tensor TrustMAEModel::encode(const Tensor& image) {
    NoGradGuard guard;
    Var rows = ops::nchw_to_rows(encode(Var(image)));
    return rows.value().reshaped({config_.grid_height(), config_.grid_width(), config_.latent_dim});
}

std::vector<Var> TrustMAEModel::encoder_pyramid(const Var& x) {
    std::vector<Var> out;
    Var h = stem_.forward(as_batch(x), training_);
    out.push_back(h);
    for (auto& d : down_) {
        h = d.forward(h, training_);
        out.push_back(h);
    }
    return out;
}

Var TrustMAEModel::decode(const Var& latent) {
    Var h = latent;
    for (auto& r : dec_res_) h = r.forward(h, training_);
    for (auto& u : up_) h = u.forward(h, training_);
    return ops::tanh(head_.forward(h));
}

ForwardResult TrustMAEModel::forward(const Var& x) {
    ForwardResult r;
    Var enc = encode(x);
    r.batch = enc.shape()[0];
    r.grid_h = enc.shape()[2];
    r.grid_w = enc.shape()[3];
    r.features = ops::nchw_to_rows(enc);
    if (!config_.memory_enabled) {
        r.approx_features = r.features;
        r.reconstruction = decode(enc);
        return r;
    }
    r.distances = ops::pairwise_distance(r.features, bank_.slots.var);
    Var w = ops::softmax(ops::scale(r.distances, -1.0));
    if (config_.addressing.sparse_enabled) w = ops::topk_renormalize(w, config_.addressing.k);
    r.weights = w.value();
    r.approx_features = ops::matmul(w, bank_.slots.var);
    r.reconstruction = decode(ops::rows_to_nchw(r.approx_features, r.batch, r.grid_h, r.grid_w));
    return r;
}

AddressingResult ForwardResult::addressing(std::size_t row) const {
    if (!distances.defined()) throw Error("addressing requested from a memory-bypassed forward pass");
    const std::size_t m = weights.dim(1);
    AddressingResult a;
    a.weights = Tensor({m}, std::vector<double>(weights.ptr() + row * m, weights.ptr() + (row + 1) * m));
    const double* d = distances.value().ptr() + row * m;
    a.distances = Tensor({m}, std::vector<double>(d, d + m));
    const auto nn = nearest_two(d, m);
    a.nearest_index = nn.first;
    a.second_index = nn.second;
    return a;
}

std::vector<Parameter*> TrustMAEModel::parameters() {
    std::vector<Parameter*> out;
    collect(stem_, out);
    for (auto& d : down_) collect(d, out);
    for (auto& r : enc_res_) collect(r, out);
    out.push_back(&bank_.slots);
    for (auto& r : dec_res_) collect(r, out);
    for (auto& u : up_) collect(u, out);
    out.push_back(&head_.kernel);
    out.push_back(&*head_.bias);
    return out;
}

std::vector<NamedBuffer> TrustMAEModel::buffers() {
    std::vector<NamedBuffer> out;
    auto add_block = [&](ConvBnRelu& b) { collect_buffers(norm_name(b.norm.gamma), b.norm, out); };
    auto add_res = [&](ResidualBlock& r) {
        add_block(r.first);
        collect_buffers(norm_name(r.second_norm.gamma), r.second_norm, out);
    };
    add_block(stem_);
    for (auto& d : down_) add_block(d);
    for (auto& r : enc_res_) add_res(r);
    for (auto& r : dec_res_) add_res(r);
    for (auto& u : up_) add_block(u);
    return out;
}

std::size_t TrustMAEModel::parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value().numel();
    return n;
}

}  // namespace tmae
