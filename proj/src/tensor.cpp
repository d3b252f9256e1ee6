#include "edmd/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "edmd/errors.hpp"

namespace edmd {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

bool same_shape(const Shape& a, const Shape& b) {
    return a == b;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    for (int64_t d : shape_) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape_));
    }
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
    }
}

Tensor Tensor::scalar(double v) {
    Tensor t;
    t.shape_ = {};
    t.data_ = {v};
    return t;
}

Tensor Tensor::zeros(Shape shape) {
    return Tensor(std::move(shape));
}

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

Tensor Tensor::from(std::initializer_list<double> values) {
    return Tensor({static_cast<int64_t>(values.size())}, std::vector<double>(values));
}

int64_t Tensor::dim(int64_t i) const {
    if (i < 0 || i >= rank()) throw ShapeError("dim index " + std::to_string(i) + " out of range for " + shape_str(shape_));
    return shape_[static_cast<size_t>(i)];
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ShapeError("item() requires a one-element tensor, got shape " + shape_str(shape_));
    }
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != size()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(new_shape));
    }
    return Tensor(std::move(new_shape), data_);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!same_shape(a.shape(), b.shape())) return false;
    if (a.size() == 0) return true;
    return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0;
}

}  // namespace edmd
