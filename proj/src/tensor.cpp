#include "divae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "divae/errors.hpp"

namespace divae {

std::string shape_str(const Shape& s) {
    std::ostringstream ss;
    ss << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) ss << ",";
        ss << s[i];
    }
    ss << "]";
    return ss.str();
}

static int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    size_ = numel(shape_);
    data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(size_), 0.0);
}

Tensor::Tensor(Shape shape, double fill) : Tensor(std::move(shape)) {
    this->fill(fill);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    double* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = stddev * rng.normal();
    return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    double* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.size_ = numel(t.shape_);
    if (t.size_ != static_cast<int64_t>(values.size()))
        throw ShapeError("from(): value count does not match shape " + shape_str(t.shape_));
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

Tensor Tensor::reshaped(Shape shape) const {
    if (numel(shape) != size_)
        throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor t;
    t.data_ = data_;
    t.shape_ = std::move(shape);
    t.size_ = size_;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.size_ = size_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
}

void Tensor::fill(double v) { std::fill(data_->begin(), data_->end(), v); }

bool Tensor::all_finite() const {
    const double* p = data();
    for (int64_t i = 0; i < size_; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

void Tensor::add_(const Tensor& o, double scale) {
    if (!same_shape(o)) throw ShapeError("add_: shape mismatch");
    double* a = data();
    const double* b = o.data();
    for (int64_t i = 0; i < size_; ++i) a[i] += scale * b[i];
}

void Tensor::mul_(double s) {
    double* a = data();
    for (int64_t i = 0; i < size_; ++i) a[i] *= s;
}

double Tensor::min() const {
    return *std::min_element(data_->begin(), data_->end());
}

double Tensor::max() const {
    return *std::max_element(data_->begin(), data_->end());
}

double Tensor::mean() const {
    double s = 0.0;
    const double* p = data();
    for (int64_t i = 0; i < size_; ++i) s += p[i];
    return size_ ? s / static_cast<double>(size_) : 0.0;
}

double Tensor::abs_max() const {
    double m = 0.0;
    const double* p = data();
    for (int64_t i = 0; i < size_; ++i) m = std::max(m, std::fabs(p[i]));
    return m;
}

}  // namespace divae
