#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace csm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape & shape);
std::string shape_to_string(const Shape & shape);

// Dense row-major tensor of doubles. A rank-0 shape holds one scalar.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor vector(std::vector<double> v);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor zeros_like(const Tensor & t) { return Tensor(t.shape(), 0.0); }

    const Shape & shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    bool is_scalar() const { return data_.size() == 1; }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    const std::vector<double> & values() const { return data_; }
    std::vector<double> & values() { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double & operator[](std::size_t i) { return data_[i]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_.at(1) + c]; }
    double item() const;

    // Same data under a new shape with equal element count.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const;

    friend bool operator==(const Tensor & a, const Tensor & b) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

// Largest absolute elementwise difference; shapes must have equal element counts.
double max_abs_diff(std::span<const double> a, std::span<const double> b);

} // namespace csm
