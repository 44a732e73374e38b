#include "trustmae/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/Core>

#include "trustmae/error.hpp"
#include "trustmae/log.hpp"

namespace tmae::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_rank(const Var& a, std::size_t r, const char* op) {
    if (a.value().rank() != r) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(a.shape()));
    }
}

Node& input(Node& n, std::size_t i) { return *n.inputs[i]; }
bool wants(Node& n, std::size_t i) { return n.inputs[i]->requires_grad; }

template <typename F>
Var unary(const Var& a, F&& fwd_and_deriv) {
    const Tensor& x = a.value();
    Tensor y(x.shape());
    Tensor dydx(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        auto [v, d] = fwd_and_deriv(x[i]);
        y[i] = v;
        dydx[i] = d;
    }
    return Var::make(std::move(y), {a}, [dydx = std::move(dydx)](Node& n) {
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= dydx[i];
        input(n, 0).accumulate(g);
    });
}

// x[c,h,w] -> cols[c*kh*kw, oh*ow]; consecutive cols rows are `ld` apart so
// several images can share one wide column matrix.
void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, int stride, int pad, std::size_t oh, std::size_t ow, double* cols,
            std::size_t ld) {
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* xc = x + ch * h * w;
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                double* row = cols + ((ch * kh + ki) * kw + kj) * ld;
                for (std::size_t oi = 0; oi < oh; ++oi) {
                    const long ii = static_cast<long>(oi) * stride - pad + static_cast<long>(ki);
                    double* out = row + oi * ow;
                    if (ii < 0 || ii >= static_cast<long>(h)) {
                        std::fill(out, out + ow, 0.0);
                        continue;
                    }
                    const double* xr = xc + static_cast<std::size_t>(ii) * w;
                    if (stride == 1) {
                        const long off = static_cast<long>(kj) - pad;
                        for (std::size_t oj = 0; oj < ow; ++oj) {
                            const long jj = static_cast<long>(oj) + off;
                            out[oj] = (jj < 0 || jj >= static_cast<long>(w)) ? 0.0 : xr[jj];
                        }
                        continue;
                    }
                    for (std::size_t oj = 0; oj < ow; ++oj) {
                        const long jj = static_cast<long>(oj) * stride - pad + static_cast<long>(kj);
                        out[oj] = (jj < 0 || jj >= static_cast<long>(w)) ? 0.0 : xr[jj];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add cols back into x[c,h,w].
void col2im(const double* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, int stride, int pad, std::size_t oh, std::size_t ow, double* x,
            std::size_t ld) {
    for (std::size_t ch = 0; ch < c; ++ch) {
        double* xc = x + ch * h * w;
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const double* row = cols + ((ch * kh + ki) * kw + kj) * ld;
                for (std::size_t oi = 0; oi < oh; ++oi) {
                    const long ii = static_cast<long>(oi) * stride - pad + static_cast<long>(ki);
                    if (ii < 0 || ii >= static_cast<long>(h)) continue;
                    double* xr = xc + static_cast<std::size_t>(ii) * w;
                    const double* in = row + oi * ow;
                    for (std::size_t oj = 0; oj < ow; ++oj) {
                        const long jj = static_cast<long>(oj) * stride - pad + static_cast<long>(kj);
                        if (jj >= 0 && jj < static_cast<long>(w)) xr[jj] += in[oj];
                    }
                }
            }
        }
    }
}

// x[n,c,p] -> out[c, n*p]
void batch_to_wide(const double* x, std::size_t n, std::size_t c, std::size_t p, double* out) {
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            std::copy(x + (b * c + ch) * p, x + (b * c + ch + 1) * p, out + ch * n * p + b * p);
}

// in[c, n*p] -> x[n,c,p]
void wide_to_batch(const double* in, std::size_t n, std::size_t c, std::size_t p, double* x) {
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            std::copy(in + ch * n * p + b * p, in + ch * n * p + (b + 1) * p, x + (b * c + ch) * p);
}

void check_conv_args(int stride, int padding, const char* op) {
    if (stride < 1) throw ShapeError(std::string(op) + ": stride must be >= 1");
    if (padding < 0) throw ShapeError(std::string(op) + ": padding must be >= 0");
}

// Bilinear source coordinate table for one axis (align_corners = false).
struct Lerp {
    std::size_t i0, i1;
    double f;
};

std::vector<Lerp> lerp_table(std::size_t in, std::size_t out) {
    std::vector<Lerp> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0.0) src = 0.0;
        auto i0 = static_cast<std::size_t>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
}

// Windowed sum along rows and columns of each [h,w] plane, clipped at borders.
void box_sum_planes(const double* x, std::size_t planes, std::size_t h, std::size_t w,
                    std::size_t r, double* out) {
    std::vector<double> tmp(h * w), col(w);
    for (std::size_t p = 0; p < planes; ++p) {
        const double* xp = x + p * h * w;
        double* op = out + p * h * w;
        for (std::size_t i = 0; i < h; ++i) {
            const double* row = xp + i * w;
            for (std::size_t j = 0; j < w; ++j) {
                const std::size_t j0 = j >= r ? j - r : 0;
                const std::size_t j1 = std::min(w - 1, j + r);
                double s = 0.0;
                for (std::size_t q = j0; q <= j1; ++q) s += row[q];
                tmp[i * w + j] = s;
            }
        }
        for (std::size_t i = 0; i < h; ++i) {
            const std::size_t i0 = i >= r ? i - r : 0;
            const std::size_t i1 = std::min(h - 1, i + r);
            std::fill(col.begin(), col.end(), 0.0);
            for (std::size_t q = i0; q <= i1; ++q) {
                const double* t = tmp.data() + q * w;
                for (std::size_t j = 0; j < w; ++j) col[j] += t[j];
            }
            std::copy(col.begin(), col.end(), op + i * w);
        }
    }
}

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b.value()[i];
    return Var::make(std::move(y), {a, b}, [](Node& n) {
        if (wants(n, 0)) input(n, 0).accumulate(n.grad);
        if (wants(n, 1)) input(n, 1).accumulate(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= b.value()[i];
    return Var::make(std::move(y), {a, b}, [](Node& n) {
        if (wants(n, 0)) input(n, 0).accumulate(n.grad);
        if (wants(n, 1)) {
            Tensor g = n.grad;
            for (auto& v : g.data()) v = -v;
            input(n, 1).accumulate(g);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
    return Var::make(std::move(y), {a, b}, [](Node& n) {
        const Tensor& av = input(n, 0).value;
        const Tensor& bv = input(n, 1).value;
        if (wants(n, 0)) {
            Tensor g = n.grad;
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= bv[i];
            input(n, 0).accumulate(g);
        }
        if (wants(n, 1)) {
            Tensor g = n.grad;
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= av[i];
            input(n, 1).accumulate(g);
        }
    });
}

Var div(const Var& a, const Var& b) {
    require_same_shape(a, b, "div");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] /= b.value()[i];
    return Var::make(std::move(y), {a, b}, [](Node& n) {
        const Tensor& av = input(n, 0).value;
        const Tensor& bv = input(n, 1).value;
        if (wants(n, 0)) {
            Tensor g = n.grad;
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] /= bv[i];
            input(n, 0).accumulate(g);
        }
        if (wants(n, 1)) {
            Tensor g = n.grad;
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= -av[i] / (bv[i] * bv[i]);
            input(n, 1).accumulate(g);
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor y = a.value();
    for (auto& v : y.data()) v *= s;
    return Var::make(std::move(y), {a}, [s](Node& n) {
        Tensor g = n.grad;
        for (auto& v : g.data()) v *= s;
        input(n, 0).accumulate(g);
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor y = a.value();
    for (auto& v : y.data()) v += s;
    return Var::make(std::move(y), {a}, [](Node& n) { input(n, 0).accumulate(n.grad); });
}

Var square(const Var& a) {
    return unary(a, [](double x) { return std::pair{x * x, 2.0 * x}; });
}

Var abs(const Var& a) {
    return unary(a, [](double x) {
        return std::pair{std::abs(x), x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0)};
    });
}

Var relu(const Var& a) {
    return unary(a, [](double x) { return x > 0.0 ? std::pair{x, 1.0} : std::pair{0.0, 0.0}; });
}

Var leaky_relu(const Var& a, double slope) {
    return unary(a, [slope](double x) {
        return x > 0.0 ? std::pair{x, 1.0} : std::pair{slope * x, slope};
    });
}

Var tanh(const Var& a) {
    return unary(a, [](double x) {
        const double t = std::tanh(x);
        return std::pair{t, 1.0 - t * t};
    });
}

Var sum(const Var& a) {
    return Var::make(Tensor::scalar(a.value().sum()), {a}, [](Node& n) {
        input(n, 0).accumulate(Tensor(input(n, 0).value.shape(), n.grad[0]));
    });
}

Var mean(const Var& a) {
    const double count = static_cast<double>(a.value().numel());
    return Var::make(Tensor::scalar(a.value().sum() / count), {a}, [count](Node& n) {
        input(n, 0).accumulate(Tensor(input(n, 0).value.shape(), n.grad[0] / count));
    });
}

Var matmul(const Var& a, const Var& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    Tensor y({n, m});
    MapMat(y.ptr(), n, m).noalias() = CMapMat(a.value().ptr(), n, k) * CMapMat(b.value().ptr(), k, m);
    return Var::make(std::move(y), {a, b}, [n, k, m](Node& node) {
        CMapMat g(node.grad.ptr(), n, m);
        if (wants(node, 0)) {
            Tensor ga({n, k});
            MapMat(ga.ptr(), n, k).noalias() = g * CMapMat(input(node, 1).value.ptr(), k, m).transpose();
            input(node, 0).accumulate(ga);
        }
        if (wants(node, 1)) {
            Tensor gb({k, m});
            MapMat(gb.ptr(), k, m).noalias() = CMapMat(input(node, 0).value.ptr(), n, k).transpose() * g;
            input(node, 1).accumulate(gb);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    require_rank(b, 1, "linear");
    Var y = matmul(x, w);
    const std::size_t n = y.shape()[0], m = y.shape()[1];
    if (b.shape()[0] != m) throw ShapeError("linear: bias size mismatch");
    Tensor out = y.value();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.at(i, j) += b.value()[j];
    return Var::make(std::move(out), {y, b}, [n, m](Node& node) {
        if (wants(node, 0)) input(node, 0).accumulate(node.grad);
        if (wants(node, 1)) {
            Tensor gb({m});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) gb[j] += node.grad.at(i, j);
            input(node, 1).accumulate(gb);
        }
    });
}

std::size_t conv_output_size(std::size_t in, std::size_t k, int stride, int padding) {
    // Floor division, as in every strided 3x3/pad-1 layer of the encoder.
    const long span = static_cast<long>(in) + 2L * padding - static_cast<long>(k);
    if (span < 0) {
        throw ShapeError("conv2d: kernel " + std::to_string(k) + " does not fit input " + std::to_string(in) +
                         " with padding " + std::to_string(padding));
    }
    return static_cast<std::size_t>(span / stride + 1);
}

namespace {

// Stride-1 convolution by shifted row axpys. Used when the channel product is
// small (stem and head layers), where im2col would be mostly memory traffic.
struct DirectConv {
    std::size_t n, cin, cout, h, w, kh, kw, oh, ow;
    int pad;

    // Valid output column range [j0, j1) for tap column kj.
    std::pair<std::size_t, std::size_t> cols(std::size_t kj) const {
        const long off = static_cast<long>(kj) - pad;
        const long j0 = std::max(0L, -off);
        const long j1 = std::min(static_cast<long>(ow), static_cast<long>(w) - off);
        return {static_cast<std::size_t>(j0), static_cast<std::size_t>(std::max(j0, j1))};
    }

    template <typename Visit>
    void taps(Visit&& visit) const {
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (std::size_t ki = 0; ki < kh; ++ki)
                        for (std::size_t kj = 0; kj < kw; ++kj) {
                            const auto [j0, j1] = cols(kj);
                            if (j0 >= j1) continue;
                            const std::size_t widx = ((co * cin + ci) * kh + ki) * kw + kj;
                            for (std::size_t i = 0; i < oh; ++i) {
                                const long ii = static_cast<long>(i) - pad + static_cast<long>(ki);
                                if (ii < 0 || ii >= static_cast<long>(h)) continue;
                                const std::size_t xrow = ((b * cin + ci) * h + static_cast<std::size_t>(ii)) * w;
                                const std::size_t yrow = ((b * cout + co) * oh + i) * ow;
                                // x index for output column j is xrow + j + kj - pad.
                                visit(widx, xrow + j0 + kj - static_cast<std::size_t>(pad), yrow + j0, j1 - j0);
                            }
                        }
    }
};

constexpr std::size_t kColumnBudget = std::size_t{1} << 21;  // doubles per im2col chunk

}  // namespace

Var conv2d(const Var& x, const Var& kernel, const Var* bias, int stride, int padding) {
    check_conv_args(stride, padding, "conv2d");
    require_rank(x, 4, "conv2d");
    require_rank(kernel, 4, "conv2d");
    const auto& xs = x.shape();
    const auto& ks = kernel.shape();
    const std::size_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
    const std::size_t cout = ks[0], kh = ks[2], kw = ks[3];
    if (ks[1] != cin) {
        throw ShapeError("conv2d: kernel " + shape_str(ks) + " does not accept " +
                         std::to_string(cin) + " input channels");
    }
    if (bias && bias->shape() != Shape{cout}) throw ShapeError("conv2d: bias shape mismatch");
    const std::size_t oh = conv_output_size(h, kh, stride, padding);
    const std::size_t ow = conv_output_size(w, kw, stride, padding);
    const std::size_t kdim = cin * kh * kw, osz = oh * ow;
    const bool direct = stride == 1 && cin * cout <= 64;
    const DirectConv dc{n, cin, cout, h, w, kh, kw, oh, ow, padding};
    // Images per GEMM so that the column matrix stays within budget.
    const std::size_t chunk = std::clamp<std::size_t>(kColumnBudget / (kdim * osz), 1, n);

    Tensor y({n, cout, oh, ow}, 0.0);
    const double* xp = x.value().ptr();
    const double* kp = kernel.value().ptr();
    if (direct) {
        double* yp = y.ptr();
        dc.taps([&](std::size_t widx, std::size_t xo, std::size_t yo, std::size_t len) {
            const double wv = kp[widx];
            double* __restrict out = yp + yo;
            const double* __restrict in = xp + xo;
            for (std::size_t q = 0; q < len; ++q) out[q] += wv * in[q];
        });
    } else {
        std::vector<double> cols, out;
        for (std::size_t b0 = 0; b0 < n; b0 += chunk) {
            const std::size_t nb = std::min(chunk, n - b0), wide = nb * osz;
            cols.resize(kdim * wide);
            out.resize(cout * wide);
            for (std::size_t b = 0; b < nb; ++b)
                im2col(xp + (b0 + b) * cin * h * w, cin, h, w, kh, kw, stride, padding, oh, ow, cols.data() + b * osz,
                       wide);
            MapMat(out.data(), cout, wide).noalias() = CMapMat(kp, cout, kdim) * CMapMat(cols.data(), kdim, wide);
            wide_to_batch(out.data(), nb, cout, osz, y.ptr() + b0 * cout * osz);
        }
    }
    if (bias) {
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t c = 0; c < cout; ++c) {
                double* p = y.ptr() + (b * cout + c) * osz;
                const double bv = bias->value()[c];
                for (std::size_t q = 0; q < osz; ++q) p[q] += bv;
            }
    }

    std::vector<Var> inputs{x, kernel};
    if (bias) inputs.push_back(*bias);
    return Var::make(std::move(y), std::move(inputs),
                     [=, has_bias = bias != nullptr](Node& node) {
        const Tensor& xv = input(node, 0).value;
        const Tensor& kv = input(node, 1).value;
        const double* gp = node.grad.ptr();
        const bool want_x = wants(node, 0), want_k = wants(node, 1);
        Tensor dx, dk;
        if (want_x) dx = Tensor(xv.shape(), 0.0);
        if (want_k) dk = Tensor(kv.shape(), 0.0);
        if (direct) {
            const double* xq = xv.ptr();
            const double* kq = kv.ptr();
            dc.taps([&](std::size_t widx, std::size_t xo, std::size_t yo, std::size_t len) {
                const double* __restrict gq = gp + yo;
                if (want_k) {
                    const auto n_ = static_cast<Eigen::Index>(len);
                    dk[widx] += Eigen::Map<const Eigen::VectorXd>(gq, n_).dot(Eigen::Map<const Eigen::VectorXd>(xq + xo, n_));
                }
                if (want_x) {
                    const double wv = kq[widx];
                    double* __restrict d = dx.ptr() + xo;
                    for (std::size_t q = 0; q < len; ++q) d[q] += wv * gq[q];
                }
            });
        } else {
            std::vector<double> g, cols;
            for (std::size_t b0 = 0; b0 < n; b0 += chunk) {
                const std::size_t nb = std::min(chunk, n - b0), wide = nb * osz;
                g.resize(cout * wide);
                batch_to_wide(gp + b0 * cout * osz, nb, cout, osz, g.data());
                CMapMat gm(g.data(), cout, wide);
                cols.resize(kdim * wide);
                if (want_k) {
                    for (std::size_t b = 0; b < nb; ++b)
                        im2col(xv.ptr() + (b0 + b) * cin * h * w, cin, h, w, kh, kw, stride, padding, oh, ow,
                               cols.data() + b * osz, wide);
                    MapMat(dk.ptr(), cout, kdim).noalias() += gm * CMapMat(cols.data(), kdim, wide).transpose();
                }
                if (want_x) {
                    MapMat(cols.data(), kdim, wide).noalias() = CMapMat(kv.ptr(), cout, kdim).transpose() * gm;
                    for (std::size_t b = 0; b < nb; ++b)
                        col2im(cols.data() + b * osz, cin, h, w, kh, kw, stride, padding, oh, ow,
                               dx.ptr() + (b0 + b) * cin * h * w, wide);
                }
            }
        }
        if (want_x) input(node, 0).accumulate(dx);
        if (want_k) input(node, 1).accumulate(dk);
        if (has_bias && wants(node, 2)) {
            Tensor db({cout}, 0.0);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t c = 0; c < cout; ++c)
                    for (std::size_t q = 0; q < osz; ++q) db[c] += gp[(b * cout + c) * osz + q];
            input(node, 2).accumulate(db);
        }
    });
}

Var conv_transpose2d(const Var& x, const Var& kernel, const Var* bias, int stride, int padding) {
    check_conv_args(stride, padding, "conv_transpose2d");
    require_rank(x, 4, "conv_transpose2d");
    require_rank(kernel, 4, "conv_transpose2d");
    const auto& xs = x.shape();
    const auto& ks = kernel.shape();
    const std::size_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
    const std::size_t cout = ks[1], kh = ks[2], kw = ks[3];
    if (ks[0] != cin) {
        throw ShapeError("conv_transpose2d: kernel " + shape_str(ks) + " does not accept " +
                         std::to_string(cin) + " input channels");
    }
    if (bias && bias->shape() != Shape{cout}) throw ShapeError("conv_transpose2d: bias shape mismatch");
    const long ohl = (static_cast<long>(h) - 1) * stride - 2L * padding + static_cast<long>(kh);
    const long owl = (static_cast<long>(w) - 1) * stride - 2L * padding + static_cast<long>(kw);
    if (ohl < 1 || owl < 1) throw ShapeError("conv_transpose2d: non-positive output size");
    const auto oh = static_cast<std::size_t>(ohl), ow = static_cast<std::size_t>(owl);
    const std::size_t kdim = cout * kh * kw, isz = h * w, osz = oh * ow;
    const std::size_t chunk = std::clamp<std::size_t>(kColumnBudget / (kdim * isz), 1, n);

    Tensor y({n, cout, oh, ow}, 0.0);
    {
        std::vector<double> xw, cols;
        for (std::size_t b0 = 0; b0 < n; b0 += chunk) {
            const std::size_t nb = std::min(chunk, n - b0), wide = nb * isz;
            xw.resize(cin * wide);
            cols.resize(kdim * wide);
            batch_to_wide(x.value().ptr() + b0 * cin * isz, nb, cin, isz, xw.data());
            MapMat(cols.data(), kdim, wide).noalias() =
                CMapMat(kernel.value().ptr(), cin, kdim).transpose() * CMapMat(xw.data(), cin, wide);
            for (std::size_t b = 0; b < nb; ++b)
                col2im(cols.data() + b * isz, cout, oh, ow, kh, kw, stride, padding, h, w,
                       y.ptr() + (b0 + b) * cout * osz, wide);
        }
    }
    if (bias) {
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t c = 0; c < cout; ++c) {
                double* p = y.ptr() + (b * cout + c) * osz;
                const double bv = bias->value()[c];
                for (std::size_t q = 0; q < osz; ++q) p[q] += bv;
            }
    }

    std::vector<Var> inputs{x, kernel};
    if (bias) inputs.push_back(*bias);
    return Var::make(std::move(y), std::move(inputs),
                     [=, has_bias = bias != nullptr](Node& node) {
        const Tensor& xv = input(node, 0).value;
        const Tensor& kv = input(node, 1).value;
        const bool want_x = wants(node, 0), want_k = wants(node, 1);
        Tensor dx, dk;
        if (want_x) dx = Tensor(xv.shape(), 0.0);
        if (want_k) dk = Tensor(kv.shape(), 0.0);
        std::vector<double> gcols, buf;
        for (std::size_t b0 = 0; b0 < n; b0 += chunk) {
            const std::size_t nb = std::min(chunk, n - b0), wide = nb * isz;
            gcols.resize(kdim * wide);
            buf.resize(cin * wide);
            for (std::size_t b = 0; b < nb; ++b)
                im2col(node.grad.ptr() + (b0 + b) * cout * osz, cout, oh, ow, kh, kw, stride, padding, h, w,
                       gcols.data() + b * isz, wide);
            CMapMat gc(gcols.data(), kdim, wide);
            if (want_x) {
                MapMat(buf.data(), cin, wide).noalias() = CMapMat(kv.ptr(), cin, kdim) * gc;
                wide_to_batch(buf.data(), nb, cin, isz, dx.ptr() + b0 * cin * isz);
            }
            if (want_k) {
                batch_to_wide(xv.ptr() + b0 * cin * isz, nb, cin, isz, buf.data());
                MapMat(dk.ptr(), cin, kdim).noalias() += CMapMat(buf.data(), cin, wide) * gc.transpose();
            }
        }
        if (want_x) input(node, 0).accumulate(dx);
        if (want_k) input(node, 1).accumulate(dk);
        if (has_bias && wants(node, 2)) {
            Tensor db({cout}, 0.0);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t c = 0; c < cout; ++c)
                    for (std::size_t q = 0; q < osz; ++q) db[c] += node.grad[(b * cout + c) * osz + q];
            input(node, 2).accumulate(db);
        }
    });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState state, bool training) {
    require_rank(x, 4, "batch_norm");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
        throw ShapeError("batch_norm: affine parameters must have shape [" + std::to_string(c) + "]");
    }
    const double m = static_cast<double>(n * hw);
    const Tensor& xv = x.value();
    Tensor mu({c}, 0.0), inv_std({c}, 0.0);
    if (training) {
        if (n * hw < 2) throw ShapeError("batch_norm: training needs more than one value per channel");
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const double* p = xv.ptr() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) s += p[i];
            }
            const double mean = s / m;
            double v = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const double* p = xv.ptr() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) v += (p[i] - mean) * (p[i] - mean);
            }
            const double var = v / m;
            mu[ch] = mean;
            inv_std[ch] = 1.0 / std::sqrt(var + state.eps);
            if (state.running_mean && state.running_var) {
                (*state.running_mean)[ch] = (1.0 - state.momentum) * (*state.running_mean)[ch] + state.momentum * mean;
                (*state.running_var)[ch] = (1.0 - state.momentum) * (*state.running_var)[ch] +
                                           state.momentum * v / (m - 1.0);
            }
        }
    } else {
        if (!state.running_mean || !state.running_var) throw ShapeError("batch_norm: no running statistics");
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = (*state.running_mean)[ch];
            inv_std[ch] = 1.0 / std::sqrt((*state.running_var)[ch] + state.eps);
        }
    }

    Tensor xhat(xv.shape()), y(xv.shape());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * hw;
            const double mc = mu[ch], sc = inv_std[ch], gc = gamma.value()[ch], bc = beta.value()[ch];
            const double* xp = xv.ptr() + off;
            double* hp = xhat.ptr() + off;
            double* yp = y.ptr() + off;
            for (std::size_t i = 0; i < hw; ++i) {
                const double xh = (xp[i] - mc) * sc;
                hp[i] = xh;
                yp[i] = gc * xh + bc;
            }
        }
    }

    return Var::make(std::move(y), {x, gamma, beta},
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& node) {
        const Tensor& g = node.grad;
        const Tensor& gam = input(node, 1).value;
        Tensor dgamma({c}, 0.0), dbeta({c}, 0.0);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t off = (b * c + ch) * hw;
                const double* gp = g.ptr() + off;
                const double* hp = xhat.ptr() + off;
                double sb = 0.0, sg = 0.0;
                for (std::size_t i = 0; i < hw; ++i) {
                    sb += gp[i];
                    sg += gp[i] * hp[i];
                }
                dbeta[ch] += sb;
                dgamma[ch] += sg;
            }
        if (wants(node, 0)) {
            Tensor dx(g.shape());
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t off = (b * c + ch) * hw;
                    const double k = gam[ch] * inv_std[ch];
                    const double mb = training ? dbeta[ch] / m : 0.0, mg = training ? dgamma[ch] / m : 0.0;
                    const double* gp = g.ptr() + off;
                    const double* hp = xhat.ptr() + off;
                    double* dp = dx.ptr() + off;
                    for (std::size_t i = 0; i < hw; ++i) dp[i] = k * (gp[i] - mb - hp[i] * mg);
                }
            input(node, 0).accumulate(dx);
        }
        if (wants(node, 1)) input(node, 1).accumulate(dgamma);
        if (wants(node, 2)) input(node, 2).accumulate(dbeta);
    });
}

Var softmax(const Var& x) {
    const std::size_t r = x.value().rank();
    if (r != 1 && r != 2) throw ShapeError("softmax: expected rank 1 or 2");
    const std::size_t rows = r == 1 ? 1 : x.shape()[0];
    const std::size_t cols = r == 1 ? x.shape()[0] : x.shape()[1];
    const Tensor& xv = x.value();
    for (double v : xv.data()) {
        if (std::isnan(v)) throw NumericalError("softmax: NaN input");
    }
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < rows; ++i) {
        const double* in = xv.ptr() + i * cols;
        double* out = y.ptr() + i * cols;
        const double mx = *std::max_element(in, in + cols);
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += (out[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < cols; ++j) out[j] /= s;
    }
    return Var::make(y, {x}, [rows, cols](Node& node) {
        const Tensor& yv = node.value;
        Tensor dx(yv.shape());
        for (std::size_t i = 0; i < rows; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += yv[i * cols + j] * node.grad[i * cols + j];
            for (std::size_t j = 0; j < cols; ++j)
                dx[i * cols + j] = yv[i * cols + j] * (node.grad[i * cols + j] - dot);
        }
        input(node, 0).accumulate(dx);
    });
}

Var topk_renormalize(const Var& w, std::size_t k) {
    const std::size_t r = w.value().rank();
    if (r != 1 && r != 2) throw ShapeError("topk_renormalize: expected rank 1 or 2");
    const std::size_t rows = r == 1 ? 1 : w.shape()[0];
    const std::size_t cols = r == 1 ? w.shape()[0] : w.shape()[1];
    if (k < 1 || k > cols) {
        throw ShapeError("topk_renormalize: k=" + std::to_string(k) + " outside [1, " + std::to_string(cols) + "]");
    }
    const Tensor& wv = w.value();
    Tensor y(wv.shape(), 0.0);
    // Per row: selected indices and the kept mass (0 marks a degenerate row).
    std::vector<std::size_t> support(rows * k);
    std::vector<double> mass(rows);
    std::vector<std::size_t> idx(cols);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* in = wv.ptr() + i * cols;
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(),
                          [in](std::size_t a, std::size_t b) { return in[a] > in[b] || (in[a] == in[b] && a < b); });
        double s = 0.0;
        for (std::size_t q = 0; q < k; ++q) s += in[idx[q]];
        std::copy(idx.begin(), idx.begin() + static_cast<long>(k), support.begin() + static_cast<long>(i * k));
        mass[i] = s;
        double* out = y.ptr() + i * cols;
        if (s > 0.0) {
            for (std::size_t q = 0; q < k; ++q) out[idx[q]] = in[idx[q]] / s;
        } else {
            out[0] = 1.0;
            log_warning("sparse addressing: top-" + std::to_string(k) +
                        " weights carry zero mass; falling back to slot 0");
        }
    }
    return Var::make(y, {w}, [rows, cols, k, support = std::move(support), mass = std::move(mass)](Node& node) {
        Tensor dw(node.value.shape(), 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
            if (mass[i] <= 0.0) continue;
            const std::size_t* sup = support.data() + i * k;
            double dot = 0.0;
            for (std::size_t q = 0; q < k; ++q) dot += node.value[i * cols + sup[q]] * node.grad[i * cols + sup[q]];
            for (std::size_t q = 0; q < k; ++q)
                dw[i * cols + sup[q]] = (node.grad[i * cols + sup[q]] - dot) / mass[i];
        }
        input(node, 0).accumulate(dw);
    });
}

Var pairwise_distance(const Var& z, const Var& m) {
    require_rank(z, 2, "pairwise_distance");
    require_rank(m, 2, "pairwise_distance");
    const std::size_t n = z.shape()[0], slots = m.shape()[0], dim = z.shape()[1];
    if (m.shape()[1] != dim) {
        throw ShapeError("pairwise_distance: feature dimension " + std::to_string(dim) +
                         " != memory dimension " + std::to_string(m.shape()[1]));
    }
    Tensor d({n, slots});
    const double* zp = z.value().ptr();
    const double* mp = m.value().ptr();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < slots; ++j) {
            double s = 0.0;
            for (std::size_t q = 0; q < dim; ++q) {
                const double diff = zp[i * dim + q] - mp[j * dim + q];
                s += diff * diff;
            }
            d.at(i, j) = std::sqrt(s + kDistanceEps);
        }
    return Var::make(d, {z, m}, [n, slots, dim](Node& node) {
        const Tensor& zv = input(node, 0).value;
        const Tensor& mv = input(node, 1).value;
        Tensor dz(zv.shape(), 0.0), dm(mv.shape(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < slots; ++j) {
                const double g = node.grad.at(i, j);
                if (g == 0.0) continue;
                const double s = g / node.value.at(i, j);
                for (std::size_t q = 0; q < dim; ++q) {
                    const double diff = zv[i * dim + q] - mv[j * dim + q];
                    dz[i * dim + q] += s * diff;
                    dm[j * dim + q] -= s * diff;
                }
            }
        if (wants(node, 0)) input(node, 0).accumulate(dz);
        if (wants(node, 1)) input(node, 1).accumulate(dm);
    });
}

Var nchw_to_rows(const Var& x) {
    require_rank(x, 4, "nchw_to_rows");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    Tensor y({n * hw, c});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) y[(b * hw + p) * c + ch] = x.value()[(b * c + ch) * hw + p];
    return Var::make(std::move(y), {x}, [n, c, hw](Node& node) {
        Tensor dx(input(node, 0).value.shape());
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < hw; ++p) dx[(b * c + ch) * hw + p] = node.grad[(b * hw + p) * c + ch];
        input(node, 0).accumulate(dx);
    });
}

Var rows_to_nchw(const Var& rows, std::size_t n, std::size_t h, std::size_t w) {
    require_rank(rows, 2, "rows_to_nchw");
    const std::size_t hw = h * w, c = rows.shape()[1];
    if (rows.shape()[0] != n * hw) throw ShapeError("rows_to_nchw: row count mismatch");
    Tensor y({n, c, h, w});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) y[(b * c + ch) * hw + p] = rows.value()[(b * hw + p) * c + ch];
    return Var::make(std::move(y), {rows}, [n, c, hw](Node& node) {
        Tensor dr(input(node, 0).value.shape());
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < hw; ++p) dr[(b * hw + p) * c + ch] = node.grad[(b * c + ch) * hw + p];
        input(node, 0).accumulate(dr);
    });
}

Var bilinear_upsample(const Var& x, std::size_t out_h, std::size_t out_w) {
    const std::size_t r = x.value().rank();
    if (r != 3 && r != 4) throw ShapeError("bilinear_upsample: expected rank 3 or 4");
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_upsample: target size must be positive");
    const auto& xs = x.shape();
    const std::size_t h = xs[r - 2], w = xs[r - 1];
    const std::size_t planes = x.value().numel() / (h * w);
    Shape ys = xs;
    ys[r - 2] = out_h;
    ys[r - 1] = out_w;
    auto ty = lerp_table(h, out_h);
    auto tx = lerp_table(w, out_w);
    Tensor y(ys);
    for (std::size_t p = 0; p < planes; ++p) {
        const double* in = x.value().ptr() + p * h * w;
        double* out = y.ptr() + p * out_h * out_w;
        for (std::size_t i = 0; i < out_h; ++i) {
            const auto& a = ty[i];
            for (std::size_t j = 0; j < out_w; ++j) {
                const auto& b = tx[j];
                const double top = in[a.i0 * w + b.i0] * (1.0 - b.f) + in[a.i0 * w + b.i1] * b.f;
                const double bot = in[a.i1 * w + b.i0] * (1.0 - b.f) + in[a.i1 * w + b.i1] * b.f;
                out[i * out_w + j] = top * (1.0 - a.f) + bot * a.f;
            }
        }
    }
    return Var::make(std::move(y), {x}, [=, ty = std::move(ty), tx = std::move(tx)](Node& node) {
        Tensor dx(input(node, 0).value.shape(), 0.0);
        for (std::size_t p = 0; p < planes; ++p) {
            const double* g = node.grad.ptr() + p * out_h * out_w;
            double* d = dx.ptr() + p * h * w;
            for (std::size_t i = 0; i < out_h; ++i) {
                const auto& a = ty[i];
                for (std::size_t j = 0; j < out_w; ++j) {
                    const auto& b = tx[j];
                    const double v = g[i * out_w + j];
                    d[a.i0 * w + b.i0] += v * (1.0 - a.f) * (1.0 - b.f);
                    d[a.i0 * w + b.i1] += v * (1.0 - a.f) * b.f;
                    d[a.i1 * w + b.i0] += v * a.f * (1.0 - b.f);
                    d[a.i1 * w + b.i1] += v * a.f * b.f;
                }
            }
        }
        input(node, 0).accumulate(dx);
    });
}

Var box_filter(const Var& x, std::size_t window) {
    const std::size_t r = x.value().rank();
    if (r < 2) throw ShapeError("box_filter: expected at least rank 2");
    if (window % 2 == 0) throw ShapeError("box_filter: window must be odd");
    const std::size_t h = x.shape()[r - 2], w = x.shape()[r - 1];
    const std::size_t planes = x.value().numel() / (h * w);
    const std::size_t rad = window / 2;
    // Clipped window area per pixel.
    Tensor count({h, w});
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const double ch = static_cast<double>(std::min(h - 1, i + rad) - (i >= rad ? i - rad : 0) + 1);
            const double cw = static_cast<double>(std::min(w - 1, j + rad) - (j >= rad ? j - rad : 0) + 1);
            count.at(i, j) = ch * cw;
        }
    Tensor y(x.shape());
    box_sum_planes(x.value().ptr(), planes, h, w, rad, y.ptr());
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t q = 0; q < h * w; ++q) y[p * h * w + q] /= count[q];
    return Var::make(std::move(y), {x}, [=, count = std::move(count)](Node& node) {
        Tensor scaled = node.grad;
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t q = 0; q < h * w; ++q) scaled[p * h * w + q] /= count[q];
        Tensor dx(scaled.shape());
        box_sum_planes(scaled.ptr(), planes, h, w, rad, dx.ptr());
        input(node, 0).accumulate(dx);
    });
}

}  // namespace tmae::ops
