#include "csm/concrete_mask.h"
#include "csm/merge.h"
#include "csm/metalearn.h"
#include "csm/task_vector.h"

#include <benchmark/benchmark.h>

using namespace csm;

namespace {

Tensor random_tensor(Shape shape, Rng & rng) {
    Tensor t(std::move(shape));
    for (double & v : t.values()) v = rng.normal();
    return t;
}

// Acceptance-sized problem: 4 tasks on a [64, 128, 10] MLP (d = 9610), random task vectors.
struct Problem {
    MlpSpec spec{{64, 128, 10}, 1};
    ParamVector theta0 = init_pretrained(spec);
    std::vector<TaskVector> taus;
    std::vector<Dataset> unlabeled;

    explicit Problem(std::size_t rows) {
        Rng rng(9);
        for (int t = 0; t < 4; ++t) {
            ParamVector p = theta0;
            for (double & v : p.data) v += 0.05 * rng.normal();
            taus.push_back(compute_task_vector(p, theta0, t));
            Dataset d;
            d.num_classes = 10;
            d.split = Split::unlabeled;
            d.features = random_tensor({rows, 64}, rng);
            unlabeled.push_back(std::move(d));
        }
    }
};

void BM_Matmul(benchmark::State & state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
    for (auto _ : state) {
        Tape tape;
        benchmark::DoNotOptimize(matmul(tape.constant(a), tape.constant(b)).value());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128);

void BM_MatmulBackward(benchmark::State & state) {
    Rng rng(2);
    const Tensor a = random_tensor({64, 64}, rng), b = random_tensor({64, 128}, rng);
    for (auto _ : state) {
        Tape tape;
        const Var x = tape.leaf(a);
        benchmark::DoNotOptimize(tape.backward(sum(matmul(x, tape.constant(b)))).of(x));
    }
}
BENCHMARK(BM_MatmulBackward);

void BM_ConcreteSample(benchmark::State & state) {
    const auto d = static_cast<std::size_t>(state.range(0));
    Rng rng(3);
    const Tensor logits = random_tensor({d}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(sample_concrete_values(logits, 0.5, draw_uniform_noise(rng, d)));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(d));
}
BENCHMARK(BM_ConcreteSample)->Arg(9610)->Arg(100000);

void BM_TiesMerge(benchmark::State & state) {
    Problem p(8);
    for (auto _ : state) benchmark::DoNotOptimize(ties_merge(p.taus, 0.2));
}
BENCHMARK(BM_TiesMerge);

void BM_TtaStep(benchmark::State & state) {
    Problem p(256);
    const MergeWeights init = MergeWeights::layer_wise(4, p.theta0.layout.num_layers(), 0.3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(tta_optimize_weights(p.theta0, p.taus, p.unlabeled, init, p.spec, TtaConfig{1, 1e-3, 64, 1}));
    }
}
BENCHMARK(BM_TtaStep)->Unit(benchmark::kMillisecond);

void BM_MetaStep(benchmark::State & state) {
    Problem p(256);
    MetaConfig cfg;
    cfg.outer_steps = 1;
    cfg.backend = static_cast<MergeBackend>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(meta_learn_mask(p.theta0, p.taus, p.unlabeled, p.spec, cfg));
    state.SetLabel(to_string(cfg.backend));
}
BENCHMARK(BM_MetaStep)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
