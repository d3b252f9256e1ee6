#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "edmd/tensor.hpp"

namespace edmd {

namespace detail {
struct Node;
}

// Reverse-mode autodiff variable: a shared handle to a graph node holding a
// Tensor value and, after backward(), its gradient.
//
// Supported primitives (any model in this repo composes only these):
//   matmul, bmm, add/sub/mul (broadcasting), neg, scale, shift, silu,
//   sigmoid, softplus, layer_norm, softmax, sum, mean, reshape, permute,
//   slice_last, concat_last, gather_rows, sinusoidal_embedding (constant),
//   stop_gradient.
class Var {
  public:
    Var() = default;

    static Var leaf(Tensor value, bool requires_grad = false, std::string name = {});
    static Var constant(Tensor value);
    static Var constant(double value);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const;
    Tensor& value_mut();  // optimizer use only
    const Tensor& grad() const;
    bool has_grad() const;
    bool requires_grad() const;
    const std::string& name() const;
    const Shape& shape() const { return value().shape(); }

    void zero_grad() const;

    // Reverse pass from this (scalar) variable; accumulates into leaf grads.
    void backward() const;

    std::shared_ptr<detail::Node> node() const { return node_; }

  private:
    explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;

    friend struct OpBuilder;
};

// ---- primitives -----------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var shift(const Var& a, double c);

// x: (..., k) times weight (k, m) -> (..., m)
Var matmul(const Var& x, const Var& w);
// batched: (..., n, k) x (..., k, m) with identical leading dims
Var bmm(const Var& a, const Var& b);

Var transpose_last2(const Var& a);
Var permute(const Var& a, const std::vector<int64_t>& perm);
Var reshape(const Var& a, Shape shape);
Var slice_last(const Var& a, int64_t offset, int64_t length);
Var concat_last(std::span<const Var> parts);

Var silu(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var square(const Var& a);

// Normalizes the last dimension to zero mean / unit variance (no affine).
Var layer_norm(const Var& a, double eps = 1e-6);
Var softmax(const Var& a);  // last dimension

Var sum(const Var& a);   // -> scalar
Var mean(const Var& a);  // -> scalar

// table: (V, W); ids index rows -> (|ids|, W). Backward scatter-adds.
Var gather_rows(const Var& table, std::span<const int> ids);

Var stop_gradient(const Var& a);

// Sinusoidal features of a batch of scalars: (B,) -> (B, dim), dim even.
// Constant with respect to the graph (inputs are noise levels / budgets).
Tensor sinusoidal_embedding(const Tensor& values, int64_t dim, double max_period = 1e4);

// ---- operators -------------------------------------------------------------

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

// Value + gradients of a scalar expression with respect to the given inputs.
std::pair<double, std::vector<Tensor>> forward_backward(const Var& output, std::span<const Var> inputs);

// While alive, ops do not retain parents or backward closures; forwards under
// the guard are plain evaluation. Used by samplers, probes and benchmarks.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

bool grad_enabled();

}  // namespace edmd
