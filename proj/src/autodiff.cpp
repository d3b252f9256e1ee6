#include "edmd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "edmd/errors.hpp"

namespace edmd {

namespace detail {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_defined = false;
    const char* op = "leaf";
    std::string name;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void accumulate(const Tensor& g) {
        if (!grad_defined) {
            grad = Tensor::zeros(value.shape());
            grad_defined = true;
        }
        double* dst = grad.data();
        const double* src = g.data();
        for (int64_t i = 0; i < grad.size(); ++i) dst[i] += src[i];
    }
};

}  // namespace detail

using detail::Node;

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
    g_grad_enabled = previous_;
}

bool grad_enabled() {
    return g_grad_enabled;
}

namespace {

void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) {
        throw NumericError(std::string("non-finite value produced by primitive '") + op + "'");
    }
}

std::shared_ptr<Node> make_node(Tensor value, const char* op, std::vector<std::shared_ptr<Node>> parents,
                                std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    check_finite(value, op);
    n->value = std::move(value);
    n->op = op;
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) {
            if (p && p->requires_grad) needs = true;
        }
    }
    n->requires_grad = needs;
    if (needs) {
        n->parents = std::move(parents);
        n->backward = std::move(backward);
    }
    return n;
}

// Right-aligned broadcast plan: per-output-dimension strides into each
// operand, zero where the operand dimension is 1.
struct BcastPlan {
    Shape out_shape;
    std::vector<int64_t> stride_a;
    std::vector<int64_t> stride_b;
    int64_t out_numel = 0;
    bool same = false;
};

BcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    BcastPlan plan;
    if (a == b) {
        plan.out_shape = a;
        plan.out_numel = shape_numel(a);
        plan.same = true;
        return plan;
    }
    size_t rank = std::max(a.size(), b.size());
    Shape pa(rank, 1), pb(rank, 1);
    std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
    plan.out_shape.resize(rank);
    for (size_t i = 0; i < rank; ++i) {
        if (pa[i] == pb[i] || pa[i] == 1 || pb[i] == 1) {
            plan.out_shape[i] = std::max(pa[i], pb[i]);
        } else {
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
    }
    auto strides_for = [&](const Shape& padded) {
        std::vector<int64_t> s(rank, 0);
        int64_t acc = 1;
        for (size_t i = rank; i-- > 0;) {
            s[i] = (padded[i] == 1) ? 0 : acc;
            acc *= padded[i];
        }
        return s;
    };
    plan.stride_a = strides_for(pa);
    plan.stride_b = strides_for(pb);
    plan.out_numel = shape_numel(plan.out_shape);
    return plan;
}

// Walks output linear indices and the matching operand offsets.
template <typename F>
void bcast_for_each(const BcastPlan& plan, F&& f) {
    size_t rank = plan.out_shape.size();
    std::vector<int64_t> idx(rank, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < plan.out_numel; ++i) {
        f(i, oa, ob);
        for (size_t d = rank; d-- > 0;) {
            ++idx[d];
            oa += plan.stride_a[d];
            ob += plan.stride_b[d];
            if (idx[d] < plan.out_shape[d]) break;
            oa -= plan.stride_a[d] * plan.out_shape[d];
            ob -= plan.stride_b[d] * plan.out_shape[d];
            idx[d] = 0;
        }
    }
}

Var wrap(std::shared_ptr<Node> n);

struct ElementwiseBinary {
    const char* op;
    // f(a, b) and partials
    double (*fwd)(double, double);
    double (*dfa)(double, double);
    double (*dfb)(double, double);
};

}  // namespace

struct OpBuilder {
    static Var wrap(std::shared_ptr<Node> n) { return Var(std::move(n)); }
};

namespace {
Var wrap(std::shared_ptr<Node> n) {
    return OpBuilder::wrap(std::move(n));
}

Var binary_op(const Var& a, const Var& b, const ElementwiseBinary& spec) {
    const Tensor& ta = a.value();
    const Tensor& tb = b.value();
    BcastPlan plan = broadcast_plan(ta.shape(), tb.shape(), spec.op);
    Tensor out(plan.out_shape);
    if (plan.same) {
        const double* pa = ta.data();
        const double* pb = tb.data();
        double* po = out.data();
        for (int64_t i = 0; i < out.size(); ++i) po[i] = spec.fwd(pa[i], pb[i]);
    } else {
        bcast_for_each(plan, [&](int64_t i, int64_t oa, int64_t ob) {
            out[i] = spec.fwd(ta[oa], tb[ob]);
        });
    }
    auto na = a.node();
    auto nb = b.node();
    auto spec_copy = spec;
    auto plan_copy = plan;
    return wrap(make_node(std::move(out), spec.op, {na, nb}, [na, nb, spec_copy, plan_copy](Node& self) {
        const Tensor& ta2 = na->value;
        const Tensor& tb2 = nb->value;
        const Tensor& g = self.grad;
        Tensor ga, gb;
        bool wa = na->requires_grad;
        bool wb = nb->requires_grad;
        if (wa) ga = Tensor::zeros(ta2.shape());
        if (wb) gb = Tensor::zeros(tb2.shape());
        if (plan_copy.same) {
            for (int64_t i = 0; i < g.size(); ++i) {
                if (wa) ga[i] += g[i] * spec_copy.dfa(ta2[i], tb2[i]);
                if (wb) gb[i] += g[i] * spec_copy.dfb(ta2[i], tb2[i]);
            }
        } else {
            bcast_for_each(plan_copy, [&](int64_t i, int64_t oa, int64_t ob) {
                if (wa) ga[oa] += g[i] * spec_copy.dfa(ta2[oa], tb2[ob]);
                if (wb) gb[ob] += g[i] * spec_copy.dfb(ta2[oa], tb2[ob]);
            });
        }
        if (wa) na->accumulate(ga);
        if (wb) nb->accumulate(gb);
    }));
}

struct ElementwiseUnary {
    const char* op;
    double (*fwd)(double);
    double (*dfx)(double);
};

Var unary_op(const Var& a, const ElementwiseUnary& spec) {
    const Tensor& ta = a.value();
    Tensor out(ta.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = spec.fwd(ta[i]);
    auto na = a.node();
    auto spec_copy = spec;
    return wrap(make_node(std::move(out), spec.op, {na}, [na, spec_copy](Node& self) {
        Tensor ga = Tensor::zeros(na->value.shape());
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] = self.grad[i] * spec_copy.dfx(na->value[i]);
        na->accumulate(ga);
    }));
}

double sigmoid_scalar(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

// ---- Var ------------------------------------------------------------------

Var Var::leaf(Tensor value, bool requires_grad, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    return OpBuilder::wrap(std::move(n));
}

Var Var::constant(Tensor value) {
    return leaf(std::move(value), false);
}

Var Var::constant(double value) {
    return leaf(Tensor::scalar(value), false);
}

const Tensor& Var::value() const {
    if (!node_) throw Error("use of undefined Var");
    return node_->value;
}

Tensor& Var::value_mut() {
    if (!node_) throw Error("use of undefined Var");
    return node_->value;
}

const Tensor& Var::grad() const {
    static const Tensor empty;
    if (!node_ || !node_->grad_defined) return empty;
    return node_->grad;
}

bool Var::has_grad() const {
    return node_ && node_->grad_defined;
}

bool Var::requires_grad() const {
    return node_ && node_->requires_grad;
}

const std::string& Var::name() const {
    static const std::string empty;
    return node_ ? node_->name : empty;
}

void Var::zero_grad() const {
    if (node_) {
        node_->grad = Tensor();
        node_->grad_defined = false;
    }
}

void Var::backward() const {
    if (!node_) throw Error("backward() on undefined Var");
    if (node_->value.size() != 1) {
        throw ShapeError("backward() requires a scalar output, got shape " + shape_str(node_->value.shape()));
    }
    // Reverse topological order via iterative post-order DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next_child] = stack.back();
        if (next_child < n->parents.size()) {
            Node* p = n->parents[next_child].get();
            ++next_child;
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->accumulate(Tensor::full(node_->value.shape(), 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad_defined) n->backward(*n);
    }
}

// ---- arithmetic -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    static const ElementwiseBinary spec{"add", [](double x, double y) { return x + y; },
                                        [](double, double) { return 1.0; }, [](double, double) { return 1.0; }};
    return binary_op(a, b, spec);
}

Var sub(const Var& a, const Var& b) {
    static const ElementwiseBinary spec{"sub", [](double x, double y) { return x - y; },
                                        [](double, double) { return 1.0; }, [](double, double) { return -1.0; }};
    return binary_op(a, b, spec);
}

Var mul(const Var& a, const Var& b) {
    static const ElementwiseBinary spec{"mul", [](double x, double y) { return x * y; },
                                        [](double, double y) { return y; }, [](double x, double) { return x; }};
    return binary_op(a, b, spec);
}

Var neg(const Var& a) {
    return scale(a, -1.0);
}

Var scale(const Var& a, double c) {
    const Tensor& ta = a.value();
    Tensor out(ta.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] * c;
    auto na = a.node();
    return wrap(make_node(std::move(out), "scale", {na}, [na, c](Node& self) {
        Tensor ga(na->value.shape());
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] = self.grad[i] * c;
        na->accumulate(ga);
    }));
}

Var shift(const Var& a, double c) {
    const Tensor& ta = a.value();
    Tensor out(ta.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] + c;
    auto na = a.node();
    return wrap(make_node(std::move(out), "shift", {na}, [na](Node& self) { na->accumulate(self.grad); }));
}

// ---- matrix products --------------------------------------------------------

namespace {

// C (n,m) += A (n,k) x B (k,m), row-major
void matmul_accum(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (int64_t l = 0; l < k; ++l) {
            double av = arow[l];
            if (av == 0.0) continue;
            const double* brow = b + l * m;
            for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (n,m) += A (n,k) x B^T where Bt is (m,k)
void matmul_bt_accum(const double* a, const double* bt, double* c, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (int64_t j = 0; j < m; ++j) {
            const double* brow = bt + j * k;
            double acc = 0.0;
            for (int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
            crow[j] += acc;
        }
    }
}

// C (k,m) += A^T x B where A is (n,k), B is (n,m)
void matmul_at_accum(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * m;
        for (int64_t l = 0; l < k; ++l) {
            double av = arow[l];
            if (av == 0.0) continue;
            double* crow = c + l * m;
            for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Var matmul(const Var& x, const Var& w) {
    const Tensor& tx = x.value();
    const Tensor& tw = w.value();
    if (tx.rank() < 1 || tw.rank() != 2) {
        throw ShapeError("matmul: need (..., k) x (k, m), got " + shape_str(tx.shape()) + " x " + shape_str(tw.shape()));
    }
    int64_t k = tx.shape().back();
    if (k != tw.dim(0)) {
        throw ShapeError("matmul: inner dims disagree, " + shape_str(tx.shape()) + " x " + shape_str(tw.shape()));
    }
    int64_t m = tw.dim(1);
    int64_t n = tx.size() / k;
    Shape out_shape(tx.shape().begin(), tx.shape().end() - 1);
    out_shape.push_back(m);
    Tensor out(out_shape);
    matmul_accum(tx.data(), tw.data(), out.data(), n, k, m);
    auto nx = x.node();
    auto nw = w.node();
    return wrap(make_node(std::move(out), "matmul", {nx, nw}, [nx, nw, n, k, m](Node& self) {
        if (nx->requires_grad) {
            Tensor gx = Tensor::zeros(nx->value.shape());
            matmul_bt_accum(self.grad.data(), nw->value.data(), gx.data(), n, m, k);
            nx->accumulate(gx);
        }
        if (nw->requires_grad) {
            Tensor gw = Tensor::zeros(nw->value.shape());
            matmul_at_accum(nx->value.data(), self.grad.data(), gw.data(), n, k, m);
            nw->accumulate(gw);
        }
    }));
}

Var bmm(const Var& a, const Var& b) {
    const Tensor& ta = a.value();
    const Tensor& tb = b.value();
    if (ta.rank() < 2 || tb.rank() != ta.rank()) {
        throw ShapeError("bmm: rank mismatch, " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
    }
    size_t r = ta.shape().size();
    for (size_t i = 0; i + 2 < r; ++i) {
        if (ta.shape()[i] != tb.shape()[i]) {
            throw ShapeError("bmm: batch dims disagree, " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
        }
    }
    int64_t n = ta.shape()[r - 2];
    int64_t k = ta.shape()[r - 1];
    int64_t m = tb.shape()[r - 1];
    if (tb.shape()[r - 2] != k) {
        throw ShapeError("bmm: inner dims disagree, " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
    }
    int64_t batch = ta.size() / (n * k);
    Shape out_shape(ta.shape());
    out_shape[r - 1] = m;
    Tensor out(out_shape);
    for (int64_t s = 0; s < batch; ++s) {
        matmul_accum(ta.data() + s * n * k, tb.data() + s * k * m, out.data() + s * n * m, n, k, m);
    }
    auto na = a.node();
    auto nb = b.node();
    return wrap(make_node(std::move(out), "bmm", {na, nb}, [na, nb, batch, n, k, m](Node& self) {
        if (na->requires_grad) {
            Tensor ga = Tensor::zeros(na->value.shape());
            for (int64_t s = 0; s < batch; ++s) {
                matmul_bt_accum(self.grad.data() + s * n * m, nb->value.data() + s * k * m,
                                ga.data() + s * n * k, n, m, k);
            }
            na->accumulate(ga);
        }
        if (nb->requires_grad) {
            Tensor gb = Tensor::zeros(nb->value.shape());
            for (int64_t s = 0; s < batch; ++s) {
                matmul_at_accum(na->value.data() + s * n * k, self.grad.data() + s * n * m,
                                gb.data() + s * k * m, n, k, m);
            }
            nb->accumulate(gb);
        }
    }));
}

// ---- data movement ----------------------------------------------------------

namespace {

std::vector<int64_t> row_major_strides(const Shape& shape) {
    std::vector<int64_t> s(shape.size(), 1);
    for (size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

void permute_copy(const Tensor& src, Tensor& dst, const std::vector<int64_t>& perm) {
    const Shape& in_shape = src.shape();
    auto in_strides = row_major_strides(in_shape);
    size_t r = in_shape.size();
    std::vector<int64_t> idx(r, 0);
    const Shape& out_shape = dst.shape();
    int64_t src_off = 0;
    for (int64_t i = 0; i < dst.size(); ++i) {
        dst[i] = src[src_off];
        for (size_t d = r; d-- > 0;) {
            ++idx[d];
            src_off += in_strides[static_cast<size_t>(perm[d])];
            if (idx[d] < out_shape[d]) break;
            src_off -= in_strides[static_cast<size_t>(perm[d])] * out_shape[d];
            idx[d] = 0;
        }
    }
}

}  // namespace

Var permute(const Var& a, const std::vector<int64_t>& perm) {
    const Tensor& ta = a.value();
    size_t r = ta.shape().size();
    if (perm.size() != r) throw ShapeError("permute: perm rank mismatch for " + shape_str(ta.shape()));
    Shape out_shape(r);
    std::vector<bool> seen(r, false);
    for (size_t i = 0; i < r; ++i) {
        int64_t p = perm[i];
        if (p < 0 || p >= static_cast<int64_t>(r) || seen[static_cast<size_t>(p)]) {
            throw ShapeError("permute: invalid permutation");
        }
        seen[static_cast<size_t>(p)] = true;
        out_shape[i] = ta.shape()[static_cast<size_t>(p)];
    }
    Tensor out(out_shape);
    permute_copy(ta, out, perm);
    auto na = a.node();
    auto perm_copy = perm;
    return wrap(make_node(std::move(out), "permute", {na}, [na, perm_copy](Node& self) {
        // Inverse permutation routes the gradient back.
        std::vector<int64_t> inv(perm_copy.size());
        for (size_t i = 0; i < perm_copy.size(); ++i) inv[static_cast<size_t>(perm_copy[i])] = static_cast<int64_t>(i);
        Tensor ga(na->value.shape());
        permute_copy(self.grad, ga, inv);
        na->accumulate(ga);
    }));
}

Var transpose_last2(const Var& a) {
    size_t r = a.value().shape().size();
    if (r < 2) throw ShapeError("transpose_last2: rank < 2 for " + shape_str(a.value().shape()));
    std::vector<int64_t> perm(r);
    for (size_t i = 0; i < r; ++i) perm[i] = static_cast<int64_t>(i);
    std::swap(perm[r - 1], perm[r - 2]);
    return permute(a, perm);
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(shape);
    auto na = a.node();
    return wrap(make_node(std::move(out), "reshape", {na}, [na](Node& self) {
        na->accumulate(self.grad.reshaped(na->value.shape()));
    }));
}

Var slice_last(const Var& a, int64_t offset, int64_t length) {
    const Tensor& ta = a.value();
    if (ta.rank() < 1) throw ShapeError("slice_last: rank-0 input");
    int64_t last = ta.shape().back();
    if (offset < 0 || length <= 0 || offset + length > last) {
        throw ShapeError("slice_last: range [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                         ") out of bounds for " + shape_str(ta.shape()));
    }
    int64_t rows = ta.size() / last;
    Shape out_shape(ta.shape());
    out_shape.back() = length;
    Tensor out(out_shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = ta.data() + r * last + offset;
        double* dst = out.data() + r * length;
        std::copy(src, src + length, dst);
    }
    auto na = a.node();
    return wrap(make_node(std::move(out), "slice_last", {na}, [na, offset, length, rows, last](Node& self) {
        Tensor ga = Tensor::zeros(na->value.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const double* src = self.grad.data() + r * length;
            double* dst = ga.data() + r * last + offset;
            for (int64_t j = 0; j < length; ++j) dst[j] += src[j];
        }
        na->accumulate(ga);
    }));
}

Var concat_last(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_last: no inputs");
    const Shape& base = parts[0].value().shape();
    int64_t total = 0;
    for (const Var& p : parts) {
        const Shape& s = p.value().shape();
        if (s.size() != base.size()) throw ShapeError("concat_last: rank mismatch");
        for (size_t i = 0; i + 1 < s.size(); ++i) {
            if (s[i] != base[i]) throw ShapeError("concat_last: leading dims disagree");
        }
        total += s.back();
    }
    Shape out_shape(base);
    out_shape.back() = total;
    Tensor out(out_shape);
    int64_t rows = out.size() / total;
    int64_t col = 0;
    std::vector<std::shared_ptr<Node>> nodes;
    std::vector<int64_t> offsets;
    std::vector<int64_t> widths;
    for (const Var& p : parts) {
        int64_t w = p.value().shape().back();
        for (int64_t r = 0; r < rows; ++r) {
            const double* src = p.value().data() + r * w;
            double* dst = out.data() + r * total + col;
            std::copy(src, src + w, dst);
        }
        nodes.push_back(p.node());
        offsets.push_back(col);
        widths.push_back(w);
        col += w;
    }
    return wrap(make_node(std::move(out), "concat_last", nodes, [nodes, offsets, widths, rows, total](Node& self) {
        for (size_t pi = 0; pi < nodes.size(); ++pi) {
            auto& n = nodes[pi];
            if (!n->requires_grad) continue;
            Tensor ga = Tensor::zeros(n->value.shape());
            int64_t w = widths[pi];
            for (int64_t r = 0; r < rows; ++r) {
                const double* src = self.grad.data() + r * total + offsets[pi];
                double* dst = ga.data() + r * w;
                std::copy(src, src + w, dst);
            }
            n->accumulate(ga);
        }
    }));
}

// ---- nonlinearities ---------------------------------------------------------

Var silu(const Var& a) {
    static const ElementwiseUnary spec{
        "silu", [](double x) { return x * sigmoid_scalar(x); },
        [](double x) {
            double s = sigmoid_scalar(x);
            return s * (1.0 + x * (1.0 - s));
        }};
    return unary_op(a, spec);
}

Var sigmoid(const Var& a) {
    static const ElementwiseUnary spec{"sigmoid", [](double x) { return sigmoid_scalar(x); },
                                       [](double x) {
                                           double s = sigmoid_scalar(x);
                                           return s * (1.0 - s);
                                       }};
    return unary_op(a, spec);
}

Var softplus(const Var& a) {
    static const ElementwiseUnary spec{"softplus",
                                       [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
                                       [](double x) { return sigmoid_scalar(x); }};
    return unary_op(a, spec);
}

Var square(const Var& a) {
    return mul(a, a);
}

// ---- normalization ----------------------------------------------------------

Var layer_norm(const Var& a, double eps) {
    const Tensor& ta = a.value();
    if (ta.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
    int64_t w = ta.shape().back();
    int64_t rows = ta.size() / w;
    Tensor out(ta.shape());
    Tensor inv_std({rows});
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = ta.data() + r * w;
        double mu = 0.0;
        for (int64_t j = 0; j < w; ++j) mu += x[j];
        mu /= static_cast<double>(w);
        double var = 0.0;
        for (int64_t j = 0; j < w; ++j) {
            double d = x[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(w);
        double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        double* y = out.data() + r * w;
        for (int64_t j = 0; j < w; ++j) y[j] = (x[j] - mu) * inv;
    }
    auto na = a.node();
    Tensor y_copy = out;
    return wrap(make_node(std::move(out), "layer_norm", {na},
                          [na, rows, w, inv_std = std::move(inv_std), y = std::move(y_copy)](Node& self) {
                              Tensor ga(na->value.shape());
                              for (int64_t r = 0; r < rows; ++r) {
                                  const double* g = self.grad.data() + r * w;
                                  const double* yr = y.data() + r * w;
                                  double* out_g = ga.data() + r * w;
                                  double gmean = 0.0, gymean = 0.0;
                                  for (int64_t j = 0; j < w; ++j) {
                                      gmean += g[j];
                                      gymean += g[j] * yr[j];
                                  }
                                  gmean /= static_cast<double>(w);
                                  gymean /= static_cast<double>(w);
                                  for (int64_t j = 0; j < w; ++j) {
                                      out_g[j] = inv_std[r] * (g[j] - gmean - yr[j] * gymean);
                                  }
                              }
                              na->accumulate(ga);
                          }));
}

Var softmax(const Var& a) {
    const Tensor& ta = a.value();
    if (ta.rank() < 1) throw ShapeError("softmax: rank-0 input");
    int64_t w = ta.shape().back();
    int64_t rows = ta.size() / w;
    Tensor out(ta.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = ta.data() + r * w;
        double* y = out.data() + r * w;
        double mx = x[0];
        for (int64_t j = 1; j < w; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int64_t j = 0; j < w; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (int64_t j = 0; j < w; ++j) y[j] /= z;
    }
    auto na = a.node();
    Tensor y_copy = out;
    return wrap(make_node(std::move(out), "softmax", {na}, [na, rows, w, y = std::move(y_copy)](Node& self) {
        Tensor ga(na->value.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const double* g = self.grad.data() + r * w;
            const double* yr = y.data() + r * w;
            double* out_g = ga.data() + r * w;
            double dot = 0.0;
            for (int64_t j = 0; j < w; ++j) dot += g[j] * yr[j];
            for (int64_t j = 0; j < w; ++j) out_g[j] = yr[j] * (g[j] - dot);
        }
        na->accumulate(ga);
    }));
}

// ---- reductions ---------------------------------------------------------------

Var sum(const Var& a) {
    const Tensor& ta = a.value();
    double acc = 0.0;
    for (int64_t i = 0; i < ta.size(); ++i) acc += ta[i];
    auto na = a.node();
    return wrap(make_node(Tensor::scalar(acc), "sum", {na}, [na](Node& self) {
        na->accumulate(Tensor::full(na->value.shape(), self.grad[0]));
    }));
}

Var mean(const Var& a) {
    const Tensor& ta = a.value();
    if (ta.size() == 0) throw ShapeError("mean of empty tensor");
    double inv = 1.0 / static_cast<double>(ta.size());
    double acc = 0.0;
    for (int64_t i = 0; i < ta.size(); ++i) acc += ta[i];
    auto na = a.node();
    return wrap(make_node(Tensor::scalar(acc * inv), "mean", {na}, [na, inv](Node& self) {
        na->accumulate(Tensor::full(na->value.shape(), self.grad[0] * inv));
    }));
}

// ---- embeddings ----------------------------------------------------------------

Var gather_rows(const Var& table, std::span<const int> ids) {
    const Tensor& tt = table.value();
    if (tt.rank() != 2) throw ShapeError("gather_rows: table must be rank-2, got " + shape_str(tt.shape()));
    int64_t v = tt.dim(0);
    int64_t w = tt.dim(1);
    int64_t b = static_cast<int64_t>(ids.size());
    Tensor out({b, w});
    std::vector<int> ids_copy(ids.begin(), ids.end());
    for (int64_t i = 0; i < b; ++i) {
        int id = ids_copy[static_cast<size_t>(i)];
        if (id < 0 || id >= v) {
            throw ShapeError("gather_rows: id " + std::to_string(id) + " out of range [0, " + std::to_string(v) + ")");
        }
        std::copy(tt.data() + id * w, tt.data() + (id + 1) * w, out.data() + i * w);
    }
    auto nt = table.node();
    return wrap(make_node(std::move(out), "gather_rows", {nt}, [nt, ids_copy, w](Node& self) {
        Tensor gt = Tensor::zeros(nt->value.shape());
        for (size_t i = 0; i < ids_copy.size(); ++i) {
            const double* src = self.grad.data() + static_cast<int64_t>(i) * w;
            double* dst = gt.data() + ids_copy[i] * w;
            for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
        }
        nt->accumulate(gt);
    }));
}

Var stop_gradient(const Var& a) {
    return Var::constant(a.value());
}

Tensor sinusoidal_embedding(const Tensor& values, int64_t dim, double max_period) {
    if (values.rank() != 1) throw ShapeError("sinusoidal_embedding: values must be rank-1, got " + shape_str(values.shape()));
    if (dim < 2 || dim % 2 != 0) throw ShapeError("sinusoidal_embedding: dim must be even and >= 2");
    int64_t b = values.dim(0);
    int64_t half = dim / 2;
    Tensor out({b, dim});
    for (int64_t i = 0; i < b; ++i) {
        double v = values[i];
        for (int64_t k = 0; k < half; ++k) {
            double freq = std::exp(-std::log(max_period) * static_cast<double>(k) / static_cast<double>(half));
            out[i * dim + k] = std::cos(v * freq);
            out[i * dim + half + k] = std::sin(v * freq);
        }
    }
    return out;
}

std::pair<double, std::vector<Tensor>> forward_backward(const Var& output, std::span<const Var> inputs) {
    for (const Var& in : inputs) in.zero_grad();
    output.backward();
    std::vector<Tensor> grads;
    grads.reserve(inputs.size());
    for (const Var& in : inputs) {
        grads.push_back(in.has_grad() ? in.grad() : Tensor::zeros(in.value().shape()));
    }
    return {output.value().item(), std::move(grads)};
}

}  // namespace edmd
