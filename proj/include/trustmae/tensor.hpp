#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace tmae {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float64 array. Plain value type: copies are deep.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, v); }
    static Tensor from(std::initializer_list<double> values);
    static Tensor from(std::initializer_list<std::initializer_list<double>> rows);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double* ptr() { return data_.data(); }
    const double* ptr() const { return data_.data(); }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    double item() const;

    Tensor reshaped(Shape shape) const;
    void fill(double v);
    bool all_finite() const;

    // Throws NumericalError naming `what` when a NaN/Inf is present.
    void require_finite(const std::string& what) const;

    double sum() const;
    double max() const;
    double min() const;
    double mean() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace tmae
