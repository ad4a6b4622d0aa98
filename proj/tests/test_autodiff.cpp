#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <array>
#include <cmath>
#include <cstring>

#include "safer/errors.hpp"
#include "safer/gradcheck.hpp"
#include "safer/ops.hpp"
#include "safer/rng.hpp"
#include "safer/tape.hpp"
#include "safer/tensor.hpp"

using namespace safer;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.5, double hi = 1.5) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("matmul identity leaves the matrix unchanged") {
    const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    const Tensor out = ops::matmul(a, eye);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.data()[i] == a.data()[i]);
}

TEST_CASE("softmax of equal logits is uniform") {
    const Tensor out = ops::softmax(Tensor::from({2}, {0, 0}), 0);
    CHECK(out.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(out.data()[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("cross entropy of flat logits is log(classes)") {
    const Tensor loss = ops::cross_entropy_with_logits(Tensor::from({3}, {0, 0, 0}), {1});
    CHECK(loss.item() == doctest::Approx(std::log(3.0)).epsilon(1e-14));
}

TEST_CASE("backward of sum of squares") {
    Tensor w = Tensor::from({3}, {1, 2, 3});
    w.set_requires_grad(true);
    Tape tape;
    Tape::Scope scope(tape);
    const Tensor loss = ops::sum(ops::mul(w, w));
    tape.backward(loss);
    CHECK(w.grad()[0] == 2.0);
    CHECK(w.grad()[1] == 4.0);
    CHECK(w.grad()[2] == 6.0);

    // grads accumulate additively until zeroed
    tape.backward(loss);
    CHECK(w.grad()[0] == 4.0);
    CHECK(w.grad()[1] == 8.0);
    CHECK(w.grad()[2] == 12.0);

    w.zero_grad();
    tape.backward(loss);
    CHECK(w.grad()[2] == 6.0);
}

TEST_CASE("backward requires a recorded scalar") {
    Tensor w = Tensor::from({2}, {1, 2});
    w.set_requires_grad(true);
    Tape tape;
    Tape::Scope scope(tape);
    const Tensor y = ops::mul(w, w);
    CHECK_THROWS_AS(tape.backward(y), ContractError);  // not scalar
    CHECK_THROWS_AS(safer::backward(Tensor::scalar(1.0)), ContractError);  // not recorded
}

TEST_CASE("cross entropy gradient on a 2x2 linear layer matches central differences") {
    Rng rng(5);
    const Tensor x = random_tensor({2, 2}, rng);
    const std::vector<std::int64_t> labels{1, 0};
    const Tensor w0 = random_tensor({2, 2}, rng);
    const double err = grad_check(
        [&](const Tensor& w) { return ops::cross_entropy_with_logits(ops::matmul(x, w), labels); }, w0,
        1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("grad_check classics") {
    const double err = grad_check([](const Tensor& x) { return ops::sum(ops::mul(x, x)); },
                                  Tensor::from({2}, {1, 2}), 1e-5);
    CHECK(err < 1e-6);

    const double err_const =
        grad_check([](const Tensor&) { return Tensor::scalar(3.5); }, Tensor::from({2}, {1, 2}), 1e-5);
    CHECK(err_const == 0.0);
}

TEST_CASE("every primitive passes finite-difference checks at 10 random points") {
    Rng rng(77);
    const double h = 1e-5;
    const auto check10 = [&](const char* name, const ScalarFn& f, Shape shape, double lo, double hi) {
        for (int trial = 0; trial < 10; ++trial) {
            const Tensor p = random_tensor(shape, rng, lo, hi);
            const double err = grad_check(f, p, h);
            INFO(name << " trial " << trial);
            CHECK(err < 1e-4);
        }
    };

    Rng aux(78);
    const Tensor other = random_tensor({3, 4}, aux);
    const Tensor bias = random_tensor({4}, aux);
    const Tensor mat = random_tensor({4, 5}, aux);
    const Tensor gain = random_tensor({4}, aux, 0.5, 1.5);
    const Tensor gbias = random_tensor({4}, aux, -0.2, 0.2);
    const std::vector<std::int64_t> labels{2, 0, 3};

    check10("add", [&](const Tensor& x) { return ops::sum(ops::add(x, other)); }, {3, 4}, -1.5, 1.5);
    check10("add-bias", [&](const Tensor& x) { return ops::sum(ops::add(other, x)); }, {4}, -1.5, 1.5);
    check10("sub", [&](const Tensor& x) { return ops::sum(ops::sub(x, other)); }, {3, 4}, -1.5, 1.5);
    check10("mul", [&](const Tensor& x) { return ops::sum(ops::mul(x, other)); }, {3, 4}, -1.5, 1.5);
    check10("div", [&](const Tensor& x) { return ops::sum(ops::div(other, x)); }, {3, 4}, 0.5, 2.0);
    check10("neg", [&](const Tensor& x) { return ops::sum(ops::neg(x)); }, {3, 4}, -1.5, 1.5);
    check10("exp", [&](const Tensor& x) { return ops::sum(ops::exp(x)); }, {3, 4}, -1.0, 1.0);
    check10("log", [&](const Tensor& x) { return ops::sum(ops::log(x)); }, {3, 4}, 0.3, 3.0);
    check10("sqrt", [&](const Tensor& x) { return ops::sum(ops::sqrt(x)); }, {3, 4}, 0.3, 3.0);
    check10("gelu", [&](const Tensor& x) { return ops::sum(ops::gelu(x)); }, {3, 4}, -2.0, 2.0);
    check10("sign", [&](const Tensor& x) { return ops::sum(ops::sign(x)); }, {3, 4}, 0.2, 2.0);
    check10("clamp", [&](const Tensor& x) { return ops::sum(ops::clamp(x, -0.9, 0.9)); }, {3, 4}, -0.8, 0.8);
    check10("matmul", [&](const Tensor& x) { return ops::sum(ops::matmul(x, mat)); }, {3, 4}, -1.5, 1.5);
    check10("matmul-rhs", [&](const Tensor& x) { return ops::sum(ops::matmul(other, x)); }, {4, 5}, -1.5, 1.5);
    check10("softmax", [&](const Tensor& x) { return ops::sum(ops::mul(ops::softmax(x, 1), other)); },
            {3, 4}, -1.5, 1.5);
    check10("layernorm",
            [&](const Tensor& x) { return ops::sum(ops::mul(ops::layernorm(x, gain, gbias, 1), other)); },
            {3, 4}, -1.5, 1.5);
    check10("layernorm-gain",
            [&](const Tensor& g) { return ops::sum(ops::mul(ops::layernorm(other, g, gbias, 1), other)); },
            {4}, 0.5, 1.5);
    check10("reshape", [&](const Tensor& x) { return ops::sum(ops::mul(ops::reshape(x, {4, 3}), ops::reshape(other, {4, 3}))); },
            {3, 4}, -1.5, 1.5);
    check10("transpose",
            [&](const Tensor& x) { return ops::sum(ops::mul(ops::transpose(x, {1, 0}), ops::transpose(other, {1, 0}))); },
            {3, 4}, -1.5, 1.5);
    check10("slice", [&](const Tensor& x) { return ops::sum(ops::slice(x, 1, 1, 2)); }, {3, 4}, -1.5, 1.5);
    check10("concat",
            [&](const Tensor& x) {
                const std::array<Tensor, 2> parts{x, other};
                return ops::sum(ops::concat(std::span<const Tensor>(parts.data(), 2), 0));
            },
            {3, 4}, -1.5, 1.5);
    check10("mean", [&](const Tensor& x) { return ops::mean(x); }, {3, 4}, -1.5, 1.5);
    check10("embedding",
            [&](const Tensor& t) { return ops::sum(ops::embedding_lookup(t, {2, 0, 2})); }, {3, 4}, -1.5,
            1.5);
    check10("cross-entropy",
            [&](const Tensor& x) { return ops::cross_entropy_with_logits(x, labels); }, {3, 4}, -1.5, 1.5);
}

TEST_CASE("softmax slices sum to one along any axis") {
    Rng rng(9);
    for (const Shape& shape : {Shape{7}, Shape{3, 5}, Shape{2, 3, 4}}) {
        for (std::size_t axis = 0; axis < shape.size(); ++axis) {
            const Tensor x = random_tensor(shape, rng, -4.0, 4.0);
            const Tensor s = ops::softmax(x, axis);
            std::size_t outer = 1, inner = 1;
            for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
            for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t c = 0; c < inner; ++c) {
                    double total = 0;
                    for (std::size_t e = 0; e < shape[axis]; ++e)
                        total += s.data()[o * shape[axis] * inner + e * inner + c];
                    CHECK(std::fabs(total - 1.0) <= 1e-12);
                }
            }
        }
    }
}

TEST_CASE("layernorm normalizes each slice before the affine map") {
    Rng rng(10);
    const std::size_t d = 16;
    const Tensor x = random_tensor({5, d}, rng, -3.0, 3.0);
    const Tensor gain = Tensor::full({d}, 1.0);
    const Tensor bias = Tensor::zeros({d});
    const Tensor y = ops::layernorm(x, gain, bias, 1);
    for (std::size_t r = 0; r < 5; ++r) {
        double mu = 0;
        for (std::size_t c = 0; c < d; ++c) mu += y.data()[r * d + c];
        mu /= static_cast<double>(d);
        double var = 0;
        for (std::size_t c = 0; c < d; ++c) {
            const double dv = y.data()[r * d + c] - mu;
            var += dv * dv;
        }
        var /= static_cast<double>(d);
        CHECK(std::fabs(mu) < 1e-10);
        CHECK(std::fabs(var - 1.0) < 1e-8);
    }
}

TEST_CASE("backward is a pure read of saved activations") {
    Rng rng(12);
    Tensor w = random_tensor({4, 4}, rng);
    w.set_requires_grad(true);
    const Tensor x = random_tensor({2, 4}, rng);
    Tape tape;
    Tape::Scope scope(tape);
    const Tensor mid = ops::gelu(ops::matmul(x, w));
    const std::vector<double> before = mid.vec();
    const Tensor loss = ops::mean(ops::mul(mid, mid));
    tape.backward(loss);
    CHECK(std::memcmp(before.data(), mid.data(), before.size() * 8) == 0);
}

TEST_CASE("replaying the same graph yields bit-identical values and grads") {
    const auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor w = random_tensor({6, 6}, rng);
        w.set_requires_grad(true);
        const Tensor x = random_tensor({3, 6}, rng);
        Tape tape;
        Tape::Scope scope(tape);
        const Tensor y = ops::softmax(ops::matmul(x, w), 1);
        const Tensor loss = ops::mean(ops::mul(y, y));
        tape.backward(loss);
        return std::make_pair(y.vec(), w.grad_vec());
    };
    const auto a = run(123);
    const auto b = run(123);
    CHECK(std::memcmp(a.first.data(), b.first.data(), a.first.size() * 8) == 0);
    CHECK(std::memcmp(a.second.data(), b.second.data(), a.second.size() * 8) == 0);
}

TEST_CASE("shape and domain errors") {
    const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor b = Tensor::from({4, 5}, std::vector<double>(20, 0.0));
    CHECK_THROWS_WITH_AS(ops::matmul(a, b), doctest::Contains("matmul"), DimensionError);
    CHECK_THROWS_AS(ops::add(a, b), DimensionError);
    CHECK_THROWS_AS(ops::log(Tensor::from({1}, {-1.0})), DomainError);
    CHECK_THROWS_AS(ops::log(Tensor::from({1}, {0.0})), DomainError);
    CHECK_THROWS_AS(ops::div(a, Tensor::zeros({2, 3})), DomainError);
    CHECK_THROWS_AS(ops::sqrt(Tensor::from({1}, {-0.5})), DomainError);
    CHECK_THROWS_AS(ops::softmax(a, 2), DimensionError);
    CHECK_THROWS_AS(ops::slice(a, 1, 2, 5), DimensionError);
    CHECK_THROWS_AS(ops::reshape(a, {7}), DimensionError);
    CHECK_THROWS_AS(ops::cross_entropy_with_logits(a, {0}), DimensionError);
    CHECK_THROWS_AS(ops::cross_entropy_with_logits(a, {0, 9}), DomainError);
    CHECK_THROWS_AS(ops::embedding_lookup(a, {5}), DomainError);
}

TEST_CASE("debug validator rejects non-finite forward values") {
    set_debug_checks(true);
    CHECK_THROWS_AS(ops::exp(Tensor::from({1}, {1e9})), DomainError);
    set_debug_checks(false);
    CHECK(std::isinf(ops::exp(Tensor::from({1}, {1e9})).item()));
}

TEST_CASE("forward_primitive dispatches every kind") {
    const Tensor x = Tensor::from({2, 2}, {0.5, -0.25, 1.0, 2.0});
    OpAttrs attrs;
    attrs.axis = 1;
    const std::array<Tensor, 1> one{x};
    const Tensor s = forward_primitive(OpKind::softmax, std::span<const Tensor>(one.data(), 1), attrs);
    CHECK(s.shape() == Shape{2, 2});

    attrs.indices = {1, 0};
    const Tensor ce =
        forward_primitive(OpKind::cross_entropy_with_logits, std::span<const Tensor>(one.data(), 1), attrs);
    CHECK(ce.size() == 1);

    const std::array<Tensor, 2> two{x, x};
    CHECK_THROWS_AS(forward_primitive(OpKind::neg, std::span<const Tensor>(two.data(), 2)), DimensionError);

    attrs.new_shape = {4};
    const Tensor r = forward_primitive(OpKind::reshape, std::span<const Tensor>(one.data(), 1), attrs);
    CHECK(r.shape() == Shape{4});
}
