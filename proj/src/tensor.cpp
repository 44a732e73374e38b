#include "trustmae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trustmae/error.hpp"

namespace tmae {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
    }
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
    }
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
    }
}

Tensor Tensor::from(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::from(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t n = rows.size();
    const std::size_t m = n ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(n * m);
    for (const auto& r : rows) {
        if (r.size() != m) throw ShapeError("ragged rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({n, m}, std::move(data));
}

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::require_finite(const std::string& what) const {
    if (!all_finite()) throw NumericalError("non-finite values in " + what);
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
double Tensor::max() const { return *std::max_element(data_.begin(), data_.end()); }
double Tensor::min() const { return *std::min_element(data_.begin(), data_.end()); }
double Tensor::mean() const { return sum() / static_cast<double>(data_.size()); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace tmae
