#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "divae/rng.hpp"

namespace divae {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

// Dense row-major double tensor. Storage is shared on copy; use clone() for a
// deep copy. All kernels in this codebase assume contiguous layout.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, double fill);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);
    static Tensor from(Shape shape, std::vector<double> values);

    const Shape& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return size_; }
    bool defined() const { return data_ != nullptr; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    double& at(int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    // Same storage, new shape (element count must match).
    Tensor reshaped(Shape shape) const;
    Tensor clone() const;

    void fill(double v);
    void zero() { fill(0.0); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    // in-place helpers used by the optimizer and samplers
    void add_(const Tensor& o, double scale = 1.0);
    void mul_(double s);

    double min() const;
    double max() const;
    double mean() const;
    double abs_max() const;

private:
    std::shared_ptr<std::vector<double>> data_;
    Shape shape_;
    int64_t size_ = 0;
};

}  // namespace divae
