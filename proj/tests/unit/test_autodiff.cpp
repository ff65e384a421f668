#include "csm/autodiff.h"
#include "csm/errors.h"
#include "csm/rng.h"
#include "support/oracles.h"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace csm;

namespace {

// Gradient of a scalar graph built by `build` from a single leaf, by tape and by central differences.
template <typename Build>
double grad_rel_err(const Tensor & x0, Build build) {
    Tape tape;
    const Var x = tape.leaf(x0);
    const Var loss = build(tape, x);
    const Tensor g = tape.backward(loss).of(x);
    const auto f = [&](const std::vector<double> & v) {
        Tape t;
        return build(t, t.constant(Tensor(x0.shape(), v))).value().item();
    };
    return oracle::relative_error(g.values(), oracle::central_gradient(f, x0.values()));
}

Tensor random_tensor(Rng & rng, Shape shape, double scale = 1.0) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), oracle::random_vector(rng, n, scale));
}

} // namespace

TEST_CASE("tensor construction checks sizes") {
    CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<double>(5)), DimensionError);
    const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
    CHECK(m.shape() == Shape{2, 2});
    CHECK(m.at(1, 0) == 3.0);
    CHECK_THROWS_AS(m.item(), ContractError);
    CHECK(Tensor::scalar(2.5).item() == 2.5);
}

TEST_CASE("matmul examples") {
    Tape tape;
    const Var id = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
    const Var b = tape.constant(Tensor::matrix({{3, 4}, {5, 6}}));
    CHECK(matmul(id, b).value() == b.value());
    const Var r = tape.constant(Tensor::matrix({{1, 2}}));
    const Var c = tape.constant(Tensor::matrix({{3}, {4}}));
    CHECK(matmul(r, c).value().item() == 11.0);
    CHECK_THROWS_AS(matmul(r, r), DimensionError);
}

TEST_CASE("matmul gradient against central differences") {
    Rng rng(11);
    const Tensor a = random_tensor(rng, {5, 7});
    const Tensor b = random_tensor(rng, {7, 3});
    const Tensor w = random_tensor(rng, {5, 3});
    CHECK(grad_rel_err(a, [&](Tape & t, const Var & x) { return sum(matmul(x, t.constant(b)) * t.constant(w)); }) <
          1e-6);
    CHECK(grad_rel_err(b, [&](Tape & t, const Var & x) { return sum(matmul(t.constant(a), x) * t.constant(w)); }) <
          1e-6);
}

TEST_CASE("elementwise values") {
    Tape tape;
    CHECK(sigmoid(tape.constant(Tensor::scalar(0.0))).value().item() == 0.5);
    CHECK(log(tape.constant(Tensor::scalar(1.0))).value().item() == 0.0);
    CHECK(sigmoid(tape.constant(Tensor::scalar(std::log(3.0)))).value().item() == doctest::Approx(0.75).epsilon(1e-15));
    CHECK_THROWS_AS(log(tape.constant(Tensor::vector({1.0, 0.0}))), DomainError);
    CHECK_THROWS_AS(log(tape.constant(Tensor::scalar(-1.0))), DomainError);
    CHECK_THROWS_AS(tape.constant(Tensor::scalar(1.0)) / tape.constant(Tensor::scalar(0.0)), DomainError);
}

TEST_CASE("sigmoid stays strictly inside (0, 1)") {
    Tape tape;
    const Tensor s = sigmoid(tape.constant(Tensor::vector({-1000.0, -40.0, -1e-300, 0.0, 1e-300, 40.0, 1000.0}))).value();
    for (double v : s.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    CHECK(s[2] < 0.5);
    CHECK(s[4] > 0.5);
}

TEST_CASE("broadcasting is limited to scalars and equal shapes") {
    Tape tape;
    const Var v = tape.constant(Tensor::vector({1, 2, 3}));
    const Var s = tape.constant(Tensor::scalar(2));
    CHECK((v * s).value() == Tensor::vector({2, 4, 6}));
    CHECK((s - v).value() == Tensor::vector({1, 0, -1}));
    CHECK_THROWS_AS(v + tape.constant(Tensor::vector({1, 2})), DimensionError);
}

TEST_CASE("reductions") {
    Tape tape;
    CHECK(mean(tape.constant(Tensor::vector({1, 0, 1, 0}))).value().item() == 0.5);
    CHECK(sum(tape.constant(Tensor::matrix({{1, 2}, {3, 4}})), 1).value() == Tensor::vector({3, 7}));
    CHECK(sum(tape.constant(Tensor::matrix({{1, 2}, {3, 4}})), 0).value() == Tensor::vector({4, 6}));
    CHECK_THROWS_AS(sum(tape.constant(Tensor::zeros({0}))), DomainError);
    CHECK_THROWS_AS(sum(tape.constant(Tensor::vector({1, 2})), 1), DimensionError);

    Rng rng(5);
    std::vector<double> u(1000);
    for (auto & x : u) x = rng.uniform();
    const double m = mean(tape.constant(Tensor::vector(u))).value().item();
    CHECK(m > 0.45);
    CHECK(m < 0.55);
}

TEST_CASE("softmax examples") {
    Tape tape;
    const Tensor u = softmax(tape.constant(Tensor::vector({0, 0, 0})), 0).value();
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    const Tensor sat = softmax(tape.constant(Tensor::vector({1000, 0})), 0).value();
    CHECK(sat.all_finite());
    CHECK(sat[0] == doctest::Approx(1.0));
    CHECK(sat[1] < 1e-300);
    const Tensor p = softmax(tape.constant(Tensor::vector({1, 2, 3})), 0).value();
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) CHECK(std::fabs(p[i] - std::exp(i + 1.0) / z) < 1e-12);
    CHECK_THROWS_AS(softmax(tape.constant(Tensor::vector({1, NAN})), 0), DomainError);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(3);
    Tape tape;
    const Tensor p = softmax(tape.constant(random_tensor(rng, {20, 9}, 10.0)), 1).value();
    for (std::size_t r = 0; r < 20; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 9; ++c) s += p.at(r, c);
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("backward examples") {
    Tape tape;
    const Var x = tape.leaf(Tensor::vector({1, -2, 3, 4, 5}));
    CHECK(tape.backward(sum(x)).of(x) == Tensor::ones({5}));
    const Var half_sq = scale(sum(x * x), 0.5);
    CHECK(tape.backward(half_sq).of(x) == x.value());
    CHECK_THROWS_AS(tape.backward(x), ContractError);
    Tape empty;
    CHECK_THROWS_AS(empty.backward(Var()), ContractError);
}

TEST_CASE("unreachable leaf gets a zero gradient") {
    Tape tape;
    const Var a = tape.leaf(Tensor::vector({1, 2}));
    const Var b = tape.leaf(Tensor::vector({3, 4}));
    const Gradients g = tape.backward(sum(a));
    CHECK(g.of(b) == Tensor::zeros({2}));
}

TEST_CASE("gradients of every primitive") {
    Rng rng(21);
    const Tensor x = random_tensor(rng, {4, 3});
    Tensor pos = x;
    for (double & v : pos.values()) v = std::fabs(v) + 0.5;
    const Tensor w = random_tensor(rng, {4, 3});

    const auto weighted = [&](Tape & t, const Var & y) { return sum(y * t.constant(w)); };
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) { return weighted(t, sigmoid(v)); }) < 1e-6);
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) { return weighted(t, exp(v)); }) < 1e-6);
    CHECK(grad_rel_err(pos, [&](Tape & t, const Var & v) { return weighted(t, log(v)); }) < 1e-6);
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) { return weighted(t, relu(v)); }) < 1e-6);
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) { return weighted(t, -v); }) < 1e-6);
    CHECK(grad_rel_err(pos, [&](Tape & t, const Var & v) { return weighted(t, t.constant(x) / v); }) < 1e-6);
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) { return weighted(t, v / t.constant(pos)); }) < 1e-6);
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) { return weighted(t, softmax(v, 1)); }) < 1e-6);
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) { return weighted(t, softmax(v, 0)); }) < 1e-6);
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) { return weighted(t, log_softmax(v, 1)); }) < 1e-6);
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) { return sum(mean(v, 0) * t.constant(Tensor::vector({1, 2, 3}))); }) <
          1e-6);
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) {
              return sum(sum(v, 1) * t.constant(Tensor::vector({1, -1, 2, 0.5})));
          }) < 1e-6);
    CHECK(grad_rel_err(x, [&](Tape &, const Var & v) { return mean(v * v); }) < 1e-6);
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) {
              return sum(reshape(slice(reshape(v, {12}), 2, 6), {2, 3}) * t.constant(Tensor::matrix({{1, 2, 3}, {4, 5, 6}})));
          }) < 1e-6);
    const Tensor concat_w(Shape{18}, oracle::random_vector(rng, 18));
    CHECK(grad_rel_err(x, [&](Tape & t, const Var & v) {
              const Var flat = reshape(v, {12});
              const Var parts[] = {slice(flat, 6, 6), flat};
              return sum(concat(parts) * t.constant(concat_w));
          }) < 1e-6);
    const int labels[] = {0, 2, 1, 2};
    CHECK(grad_rel_err(x, [&](Tape &, const Var & v) { return nll_loss(log_softmax(v, 1), labels); }) < 1e-6);
}

TEST_CASE("scale_segments gradient reaches vector and coefficients") {
    Rng rng(8);
    const std::size_t offsets[] = {0, 3, 7};
    const Tensor v = random_tensor(rng, {10});
    const Tensor c = random_tensor(rng, {3});
    const Tensor w = random_tensor(rng, {10});
    CHECK(grad_rel_err(v, [&](Tape & t, const Var & x) {
              return sum(scale_segments(x, t.constant(c), offsets) * t.constant(w));
          }) < 1e-6);
    CHECK(grad_rel_err(c, [&](Tape & t, const Var & x) {
              return sum(scale_segments(t.constant(v), x, offsets) * t.constant(w));
          }) < 1e-6);
    Tape tape;
    const Tensor out = scale_segments(tape.constant(Tensor::vector({1, 1, 1, 1})), tape.constant(Tensor::vector({2, 3})),
                                      std::vector<std::size_t>{0, 1})
                           .value();
    CHECK(out == Tensor::vector({2, 3, 3, 3}));
}

TEST_CASE("backward is deterministic") {
    Rng rng(4);
    const Tensor x0 = random_tensor(rng, {6, 5});
    const Tensor b = random_tensor(rng, {5, 4});
    auto run = [&] {
        Tape tape;
        const Var x = tape.leaf(x0);
        const Var l = sum(log_softmax(matmul(relu(x), tape.constant(b)), 1));
        return tape.backward(l).of(x);
    };
    const Tensor g1 = run();
    const Tensor g2 = run();
    CHECK(g1 == g2);
}
