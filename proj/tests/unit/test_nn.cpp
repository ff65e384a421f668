#include "csm/errors.h"
#include "csm/nn.h"
#include "support/oracles.h"

#include <doctest.h>

#include <cmath>

using namespace csm;

namespace {

Dataset gaussian_blobs(std::size_t n, std::size_t dim, std::size_t classes, double sep, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.num_classes = classes;
    std::vector<double> f(n * dim);
    for (std::size_t r = 0; r < n; ++r) {
        const int y = static_cast<int>(r % classes);
        d.labels.push_back(y);
        for (std::size_t k = 0; k < dim; ++k) f[r * dim + k] = rng.normal() + (k == static_cast<std::size_t>(y) ? sep : 0.0);
    }
    d.features = Tensor::matrix(n, dim, std::move(f));
    return d;
}

} // namespace

TEST_CASE("layout arithmetic") {
    const MlpSpec spec{{4, 8, 3}, 1};
    const Layout l = make_layout(spec);
    CHECK(l.total() == 4 * 8 + 8 + 8 * 3 + 3);
    CHECK(l.total() == 67);
    CHECK(l.num_layers() == 4);
    CHECK(l.slot(0).name == "layer0.weight");
    CHECK(l.slot(3).name == "layer1.bias");
    CHECK(l.slot(2).offset == 40);
    CHECK_THROWS_AS(MlpSpec({{4}, 0}).validate(), ContractError);
    CHECK_THROWS_AS(MlpSpec({{4, 0, 2}, 0}).validate(), ContractError);
}

TEST_CASE("init_pretrained is seeded and bounded") {
    const MlpSpec spec{{6, 10, 4}, 9};
    const ParamVector a = init_pretrained(spec), b = init_pretrained(spec);
    CHECK(a == b);
    CHECK(init_pretrained(MlpSpec{{6, 10, 4}, 10}).data != a.data);
    for (const auto & s : a.layout.slots()) {
        const double bound = s.shape.size() == 2 ? std::sqrt(6.0 / static_cast<double>(s.shape[0])) : 0.0;
        for (std::size_t j = 0; j < s.numel(); ++j) CHECK(std::fabs(a.data[s.offset + j]) <= bound);
    }
}

TEST_CASE("flatten and unflatten round trip") {
    const MlpSpec spec{{3, 5, 2}, 4};
    const ParamVector p = init_pretrained(spec);
    const auto parts = unflatten(p);
    CHECK(parts.size() == 4);
    CHECK(parts[0].shape() == Shape{3, 5});
    CHECK(flatten(spec, parts) == p);
}

TEST_CASE("forward examples") {
    const MlpSpec spec{{3, 4, 2}, 0};
    ParamVector zero = init_pretrained(spec);
    std::fill(zero.data.begin(), zero.data.end(), 0.0);
    const Tensor x = Tensor::matrix({{1, 2, 3}, {-1, 0, 5}});
    const Tensor out = forward(zero, spec, x);
    for (double v : out.data()) CHECK(v == 0.0);

    const MlpSpec single{{3, 3}, 0};
    ParamVector ident = init_pretrained(single);
    std::fill(ident.data.begin(), ident.data.end(), 0.0);
    for (int i = 0; i < 3; ++i) ident.data[static_cast<std::size_t>(i * 3 + i)] = 1.0;
    CHECK(forward(ident, single, x) == x);

    CHECK_THROWS_AS(forward(zero, single, x), ContractError);
    CHECK_THROWS_AS(forward(zero, spec, Tensor::matrix({{1, 2}})), DimensionError);
}

TEST_CASE("forward matches an independent loop implementation") {
    const MlpSpec spec{{5, 7, 6, 3}, 12};
    const ParamVector p = init_pretrained(spec);
    Rng rng(1);
    const Tensor x = Tensor::matrix(4, 5, oracle::random_vector(rng, 20));
    const Tensor fast = forward(p, spec, x);
    Tape tape;
    const Tensor taped = forward(tape.constant(p.as_tensor()), spec, tape.constant(x)).value();
    const auto ref = oracle::mlp_logits(spec.layer_sizes, p.data, x.values(), 4);
    CHECK(max_abs_diff(fast.data(), ref) < 1e-12);
    CHECK(max_abs_diff(taped.data(), ref) < 1e-12);
}

TEST_CASE("gradient of mean logit matches central differences") {
    const MlpSpec spec{{4, 6, 3}, 2};
    ParamVector p = init_pretrained(spec);
    Rng rng(5);
    for (double & v : p.data) v += 0.1 * rng.normal();
    const Tensor x = Tensor::matrix(5, 4, oracle::random_vector(rng, 20));
    Tape tape;
    const Var th = tape.leaf(p.as_tensor());
    const Tensor g = tape.backward(mean(forward(th, spec, tape.constant(x)))).of(th);
    const auto f = [&](const std::vector<double> & v) {
        const auto logits = oracle::mlp_logits(spec.layer_sizes, v, x.values(), 5);
        double s = 0.0;
        for (double l : logits) s += l;
        return s / static_cast<double>(logits.size());
    };
    CHECK(oracle::relative_error(g.values(), oracle::central_gradient(f, p.data)) < 1e-4);
}

TEST_CASE("cross-entropy gradient of a two-layer MLP") {
    const MlpSpec spec{{4, 8, 3}, 3};
    const ParamVector p = init_pretrained(spec);
    Rng rng(6);
    const Tensor x = Tensor::matrix(6, 4, oracle::random_vector(rng, 24));
    const std::vector<int> y = {0, 1, 2, 2, 1, 0};
    Tape tape;
    const Var th = tape.leaf(p.as_tensor());
    const Tensor g = tape.backward(cross_entropy(forward(th, spec, tape.constant(x)), y)).of(th);
    const auto f = [&](const std::vector<double> & v) {
        const auto logits = oracle::mlp_logits(spec.layer_sizes, v, x.values(), 6);
        double loss = 0.0;
        for (std::size_t r = 0; r < 6; ++r) {
            double z = 0.0;
            for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits[r * 3 + c]);
            loss -= logits[r * 3 + static_cast<std::size_t>(y[r])] - std::log(z);
        }
        return loss / 6.0;
    };
    CHECK(oracle::relative_error(g.values(), oracle::central_gradient(f, p.data, 1e-5)) < 1e-4);
}

TEST_CASE("fine_tune") {
    const MlpSpec spec{{2, 8, 2}, 1};
    const ParamVector theta0 = init_pretrained(spec);
    const Dataset toy = gaussian_blobs(200, 2, 2, 6.0, 3);

    SUBCASE("zero epochs returns the base") {
        CHECK(fine_tune(theta0, spec, toy, TrainConfig{0, 16, 1e-2, 1}) == theta0);
    }
    SUBCASE("separable toy set is fit") {
        TrainStats stats;
        const ParamVector t = fine_tune(theta0, spec, toy, TrainConfig{50, 16, 1e-2, 1}, &stats);
        CHECK(evaluate(t, spec, toy) >= 0.99);
        CHECK(stats.final_loss < stats.initial_loss);
        CHECK(stats.steps == 50 * 13);  // 200 rows, batch 16, short last batch kept
        CHECK(t.same_layout(theta0));
    }
    SUBCASE("bit-reproducible") {
        const TrainConfig cfg{5, 16, 1e-2, 7};
        CHECK(fine_tune(theta0, spec, toy, cfg) == fine_tune(theta0, spec, toy, cfg));
    }
    SUBCASE("empty split") {
        Dataset empty = toy.subset(std::vector<std::size_t>{});
        CHECK_THROWS_AS(fine_tune(theta0, spec, empty, TrainConfig{}), ContractError);
    }
}

TEST_CASE("evaluate") {
    const Tensor logits = Tensor::matrix({{0, 5}, {1, 9}, {-3, 2}});
    const std::vector<int> ones = {1, 1, 1};
    CHECK(accuracy_from_logits(logits, ones) == 1.0);

    Tensor scaled = logits;
    for (double & v : scaled.values()) v = 3.7 * v;
    const std::vector<int> mixed = {0, 1, 0};
    CHECK(accuracy_from_logits(scaled, mixed) == accuracy_from_logits(logits, mixed));
    Tensor shifted = logits;
    for (double & v : shifted.values()) v = std::exp(v) + 2.0;
    CHECK(accuracy_from_logits(shifted, mixed) == accuracy_from_logits(logits, mixed));

    Rng rng(9);
    const std::size_t n = 20000, c = 5;
    std::vector<int> labels(n);
    for (std::size_t r = 0; r < n; ++r) labels[r] = static_cast<int>(r % c);
    const double acc = accuracy_from_logits(Tensor::matrix(n, c, oracle::random_vector(rng, n * c)), labels);
    CHECK(std::fabs(acc - 1.0 / c) < 0.05);

    CHECK_THROWS_AS(accuracy_from_logits(Tensor::zeros({0, 2}), std::vector<int>{}), ContractError);
}
