#include <array>
#include <cmath>

#include "doctest.h"
#include "edmd/adam.hpp"
#include "edmd/autodiff.hpp"
#include "edmd/errors.hpp"
#include "edmd/rng.hpp"
#include "edmd/tensor.hpp"
#include "test_helpers.hpp"

using namespace edmd;

TEST_CASE("tensor shape bookkeeping") {
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.rank() == 2);
    CHECK_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), ShapeError);
    CHECK(Tensor::scalar(4.0).item() == 4.0);
    CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
}

TEST_CASE("square function gradient") {
    Var x = Var::leaf(Tensor::scalar(3.0), true);
    Var y = mul(x, x);
    y.backward();
    CHECK(y.value().item() == doctest::Approx(9.0));
    CHECK(x.grad().item() == doctest::Approx(6.0));
}

TEST_CASE("product rule") {
    Var x = Var::leaf(Tensor::scalar(2.0), true);
    Var y = Var::leaf(Tensor::scalar(5.0), true);
    Var z = mul(x, y);
    z.backward();
    CHECK(x.grad().item() == doctest::Approx(5.0));
    CHECK(y.grad().item() == doctest::Approx(2.0));
}

TEST_CASE("two-layer perceptron matches finite differences") {
    SeededStream rng(42);
    Var w1 = Var::leaf(rng.gaussian(Shape{8, 8}), true, "w1");
    Var b1 = Var::leaf(rng.gaussian(Shape{8}), true, "b1");
    Var w2 = Var::leaf(rng.gaussian(Shape{8, 1}), true, "w2");
    Var b2 = Var::leaf(rng.gaussian(Shape{1}), true, "b2");
    Tensor x = rng.gaussian(Shape{4, 8});

    std::vector<Var> params{w1, b1, w2, b2};
    auto build = [&]() {
        Var h = silu(add(matmul(Var::constant(x), w1), b1));
        Var out = add(matmul(h, w2), b2);
        return mean(out);
    };
    SeededStream pick(7);
    auto res = edmd::testing::grad_check(build, params, pick, 50);
    CHECK(res.checked >= 200);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("primitives match finite differences") {
    SeededStream rng(1234);
    SeededStream pick(99);

    SUBCASE("layer_norm, softmax, bmm, permute") {
        Var a = Var::leaf(rng.gaussian(Shape{2, 3, 4}), true);
        Var b = Var::leaf(rng.gaussian(Shape{2, 4, 3}), true);
        std::vector<Var> params{a, b};
        auto build = [&]() {
            Var x = layer_norm(a);
            Var y = softmax(bmm(x, b));
            Var z = permute(y, {1, 0, 2});
            return mean(mul(z, z));
        };
        auto res = edmd::testing::grad_check(build, params, pick, 12);
        CHECK(res.max_rel_err < 1e-3);
    }

    SUBCASE("broadcasting add/mul") {
        Var a = Var::leaf(rng.gaussian(Shape{2, 3, 4}), true);
        Var b = Var::leaf(rng.gaussian(Shape{4}), true);
        Var c = Var::leaf(rng.gaussian(Shape{2, 1, 4}), true);
        std::vector<Var> params{a, b, c};
        auto build = [&]() { return sum(mul(add(a, b), c)); };
        auto res = edmd::testing::grad_check(build, params, pick, 10);
        CHECK(res.max_rel_err < 1e-3);
    }

    SUBCASE("slice and concat") {
        Var a = Var::leaf(rng.gaussian(Shape{3, 6}), true);
        std::vector<Var> params{a};
        auto build = [&]() {
            Var lo = slice_last(a, 0, 2);
            Var hi = slice_last(a, 2, 4);
            std::array<Var, 2> parts{silu(hi), sigmoid(lo)};
            return mean(concat_last(parts));
        };
        auto res = edmd::testing::grad_check(build, params, pick, 10);
        CHECK(res.max_rel_err < 1e-3);
    }

    SUBCASE("gather and softplus") {
        Var table = Var::leaf(rng.gaussian(Shape{5, 3}), true);
        std::vector<int> ids{0, 4, 2, 2};
        std::vector<Var> params{table};
        auto build = [&]() { return mean(softplus(gather_rows(table, ids))); };
        auto res = edmd::testing::grad_check(build, params, pick, 10);
        CHECK(res.max_rel_err < 1e-3);
    }
}

TEST_CASE("stop_gradient blocks flow") {
    SeededStream rng(5);
    Var x = Var::leaf(rng.gaussian(Shape{4}), true);
    Var y = Var::leaf(rng.gaussian(Shape{4}), true);
    // f = sum(x * sg(y) + sg(x) * x): gradient wrt y must be exactly zero,
    // gradient wrt x nonzero and confirmed by finite differences.
    auto build = [&]() { return sum(add(mul(x, stop_gradient(y)), mul(stop_gradient(x), x))); };
    Var loss = build();
    x.zero_grad();
    y.zero_grad();
    loss.backward();
    CHECK_FALSE(y.has_grad());
    REQUIRE(x.has_grad());
    for (int64_t c = 0; c < 4; ++c) {
        auto eval = [&]() { return build().value().item(); };
        // Autodiff sees y + x (second path enters only through the live x);
        // finite differences see the full derivative y + 2x. Their gap is
        // exactly the blocked contribution.
        CHECK(x.grad()[c] == doctest::Approx(y.value()[c] + x.value()[c]).epsilon(1e-9));
        double fd = edmd::testing::central_diff(eval, x.value_mut(), c);
        CHECK(fd == doctest::Approx(y.value()[c] + 2.0 * x.value()[c]).epsilon(1e-5));
        // y only matters through stop_gradient: autodiff grad is absent while
        // the finite difference through the blocked path is x, nonzero.
        double fdy = edmd::testing::central_diff(eval, y.value_mut(), c);
        CHECK(fdy == doctest::Approx(x.value()[c]).epsilon(1e-5));
    }
}

TEST_CASE("shape errors name both shapes") {
    Var a = Var::constant(Tensor({2, 3}));
    Var b = Var::constant(Tensor({4, 5}));
    try {
        add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("(2, 3)") != std::string::npos);
        CHECK(msg.find("(4, 5)") != std::string::npos);
    }
}

TEST_CASE("non-finite intermediate names the primitive") {
    Var a = Var::constant(Tensor({1}, {1e308}));
    try {
        mul(a, a);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("mul") != std::string::npos);
    }
}

TEST_CASE("adam first step matches hand evaluation") {
    Var p = Var::leaf(Tensor::scalar(1.0), true, "p");
    Var loss = mul(Var::constant(2.0), p);  // grad = 2
    loss.backward();
    AdamState opt(AdamConfig{0.1, 0.9, 0.999, 1e-8});
    std::vector<Var> params{p};
    opt.step(params);
    // m_hat = 2, v_hat = 4, delta = -0.1 * 2 / (2 + 1e-8)
    CHECK(p.value().item() == doctest::Approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8)).epsilon(1e-12));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adam zero gradient leaves params bit-identical") {
    Var p = Var::leaf(Tensor({3}, {1.5, -2.5, 0.25}), true);
    Tensor before = p.value();
    AdamState opt(AdamConfig{});
    std::vector<Var> params{p};
    opt.step(params);  // no grad accumulated at all
    CHECK(bitwise_equal(p.value(), before));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adam updates only parameters with nonzero gradient") {
    Var a = Var::leaf(Tensor::scalar(1.0), true);
    Var b = Var::leaf(Tensor::scalar(2.0), true);
    Tensor b_before = b.value();
    Var loss = mul(a, a);
    loss.backward();
    AdamState opt(AdamConfig{});
    std::vector<Var> params{a, b};
    opt.step(params);
    CHECK(a.value().item() != 1.0);
    CHECK(bitwise_equal(b.value(), b_before));
}

TEST_CASE("adam rejects NaN gradients without mutating state") {
    Var p = Var::leaf(Tensor::scalar(1.0), true);
    // Forge a NaN gradient through a crafted backward: accumulate manually.
    Var loss = mul(p, Var::constant(1.0));
    loss.backward();
    const_cast<Tensor&>(p.grad())[0] = std::nan("");
    AdamState opt(AdamConfig{});
    std::vector<Var> params{p};
    CHECK_THROWS_AS(opt.step(params), NumericError);
    CHECK(opt.step_count() == 0);
    CHECK(p.value().item() == 1.0);
}

TEST_CASE("seeded stream determinism and distinctness") {
    SeededStream s1(123), s2(123), s3(124);
    Tensor a = s1.gaussian(Shape{16});
    Tensor b = s2.gaussian(Shape{16});
    Tensor c = s3.gaussian(Shape{16});
    CHECK(bitwise_equal(a, b));
    bool any_diff = false;
    for (int64_t i = 0; i < a.size(); ++i) any_diff |= (a[i] != c[i]);
    CHECK(any_diff);
    // Streams are pure functions of (seed, counter).
    SeededStream s4(123, s1.counter());
    CHECK(s4.gaussian() == s1.gaussian());
}

TEST_CASE("gaussian sample mean within CLT bound") {
    SeededStream s(777);
    const int64_t n = 100000;
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += s.gaussian();
    double mean = acc / static_cast<double>(n);
    CHECK(std::abs(mean) < 3.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("child streams are independent of parent draws") {
    SeededStream parent(9);
    SeededStream c1 = parent.child(0);
    SeededStream c2 = parent.child(1);
    CHECK(c1.gaussian() != c2.gaussian());
    SeededStream parent2(9);
    SeededStream c1_again = parent2.child(0);
    SeededStream c1_fresh = parent.child(0);
    CHECK(c1_again.uniform() == c1_fresh.uniform());
}
