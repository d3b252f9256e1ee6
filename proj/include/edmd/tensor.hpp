#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace edmd {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

// Dense row-major array of doubles. Rank 0 (empty shape) is a scalar with one
// element. Tensors are plain values; gradient bookkeeping lives in Var.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from(std::initializer_list<double> values);  // rank-1

    const Shape& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    int64_t dim(int64_t i) const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Single element of a rank-0 or one-element tensor.
    double item() const;

    bool defined() const { return !shape_.empty() || !data_.empty(); }
    bool all_finite() const;

    Tensor reshaped(Shape new_shape) const;

  private:
    Shape shape_;
    std::vector<double> data_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace edmd
