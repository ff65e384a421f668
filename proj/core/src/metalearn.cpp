#include "csm/metalearn.h"

#include "csm/adam.h"
#include "csm/errors.h"

#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace csm {

std::string to_string(MergeBackend b) {
    switch (b) {
    case MergeBackend::task_arithmetic: return "task_arithmetic";
    case MergeBackend::adamerging_task_wise: return "adamerging_task_wise";
    case MergeBackend::adamerging_layer_wise: return "adamerging_layer_wise";
    }
    return "?";
}

MergeBackend merge_backend_from_string(const std::string & s) {
    if (s == "task_arithmetic") return MergeBackend::task_arithmetic;
    if (s == "adamerging_task_wise") return MergeBackend::adamerging_task_wise;
    if (s == "adamerging_layer_wise") return MergeBackend::adamerging_layer_wise;
    throw ConfigError("unknown merge backend '" + s + "'");
}

WeightKind weight_kind_of(MergeBackend b) {
    switch (b) {
    case MergeBackend::task_arithmetic: return WeightKind::scalar;
    case MergeBackend::adamerging_task_wise: return WeightKind::task_wise;
    case MergeBackend::adamerging_layer_wise: return WeightKind::layer_wise;
    }
    return WeightKind::scalar;
}

std::string to_string(MaskMode m) {
    return m == MaskMode::binarized ? "binarized" : "concrete_expected";
}

MaskMode mask_mode_from_string(const std::string & s) {
    if (s == "binarized") return MaskMode::binarized;
    if (s == "concrete_expected") return MaskMode::concrete_expected;
    throw ConfigError("unknown mask mode '" + s + "'");
}

void MetaConfig::validate() const {
    if (outer_steps == 0) throw ConfigError("meta-learning needs at least one outer step");
    if (!(outer_lr >= 0.0) || !(inner_lr >= 0.0)) throw ConfigError("meta-learning rates must be non-negative");
    if (batch_size == 0) throw ConfigError("meta-learning batch size must be positive");
    temperature.validate();
}

MergeWeights initial_weights(MergeBackend backend, double lambda, std::size_t n_tasks, std::size_t n_layers) {
    switch (backend) {
    case MergeBackend::task_arithmetic: return MergeWeights::scalar(lambda);
    case MergeBackend::adamerging_task_wise: return MergeWeights::task_wise(n_tasks, lambda);
    case MergeBackend::adamerging_layer_wise: return MergeWeights::layer_wise(n_tasks, n_layers, lambda);
    }
    return MergeWeights::scalar(lambda);
}

namespace {

Var batch_entropy_sum(const Var & theta, const MlpSpec & spec, std::span<const Dataset> batches,
                      std::vector<double> * per_task) {
    Tape * tape = theta.tape();
    Var total;
    for (std::size_t t = 0; t < batches.size(); ++t) {
        const Var probs = softmax(forward(theta, spec, tape->constant(batches[t].features)), 1);
        const Var l = entropy_loss(probs);
        if (per_task) per_task->push_back(l.value().item());
        total = t == 0 ? l : total + l;
    }
    return total;
}

void check_inputs(const ParamVector & theta0, std::span<const TaskVector> taskvecs, std::span<const Dataset> data) {
    if (taskvecs.empty()) throw ContractError("meta-learning needs at least one task vector");
    if (data.empty()) throw ContractError("meta-learning needs unlabeled data");
    require_shared_layout(taskvecs, "meta_learn_mask");
    if (taskvecs[0].layout != theta0.layout || taskvecs[0].spec_hash != theta0.spec_hash) {
        throw LayoutMismatchError("meta_learn_mask: task vectors do not match the base layout");
    }
}

} // namespace

OuterObjective outer_objective(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                               std::span<const Dataset> batches, const MlpSpec & spec, const MergeWeights & weights,
                               const Tensor & logits, double temperature, const Tensor & noise, double mean_epsilon) {
    check_inputs(theta0, taskvecs, batches);
    Tape tape;
    const Var x = tape.leaf(logits);
    const ConcreteMaskSample m = sample_concrete(x, temperature, noise);
    std::vector<Var> masked;
    for (const auto & tv : taskvecs) masked.push_back(mask_and_rescale(tape.constant(tv.as_tensor()), m.values, mean_epsilon));
    const Var wv = tape.leaf(weights.values);
    const Var theta = merge_var(tape.constant(theta0.as_tensor()), masked, wv, weights.kind, theta0.layout);
    OuterObjective out;
    const Var total = batch_entropy_sum(theta, spec, batches, &out.task_losses);
    out.loss = total.value().item();
    const Gradients g = tape.backward(total);
    out.grad_logits = g.of(x);
    out.grad_weights = g.of(wv);
    return out;
}

MergeWeights inner_weight_step(const ParamVector & theta0, std::span<const TaskVector> masked,
                               std::span<const Dataset> batches, const MlpSpec & spec, const MergeWeights & w,
                               double lr) {
    Tape tape;
    const Var wv = tape.leaf(w.values);
    std::vector<Var> taus;
    for (const auto & tv : masked) taus.push_back(tape.constant(tv.as_tensor()));
    const Var theta = merge_var(tape.constant(theta0.as_tensor()), taus, wv, w.kind, theta0.layout);
    const Var total = batch_entropy_sum(theta, spec, batches, nullptr);
    const Tensor g = tape.backward(total).of(wv);
    MergeWeights out = w;
    for (std::size_t i = 0; i < out.values.numel(); ++i) out.values[i] -= lr * g[i];
    return out;
}

MetaGradient meta_gradient(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                           std::span<const Dataset> inner, std::span<const Dataset> outer, const MlpSpec & spec,
                           const MergeWeights & w, const Tensor & logits, double temperature, const Tensor & noise,
                           double inner_lr, bool unroll, double mean_epsilon) {
    MetaGradient r;
    r.updated = w;
    const bool optimizable = w.kind != WeightKind::scalar;
    if (optimizable) {
        const Tensor m = sample_concrete_values(logits, temperature, noise);
        std::vector<TaskVector> masked;
        masked.reserve(taskvecs.size());
        for (const auto & tv : taskvecs) masked.push_back(mask_and_rescale(tv, m, mean_epsilon));
        r.updated = inner_weight_step(theta0, masked, inner, spec, w, inner_lr);
    }
    OuterObjective obj = outer_objective(theta0, taskvecs, outer, spec, r.updated, logits, temperature, noise, mean_epsilon);
    r.loss = obj.loss;
    r.task_losses = std::move(obj.task_losses);
    r.grad_logits = std::move(obj.grad_logits);
    if (!optimizable || !unroll || inner_lr == 0.0) return r;

    // d w'/dx = -inner_lr * d/dx grad_w L_in(x, w), so the extra term is
    // -inner_lr * d/dx [v . grad_w L_in(x, w)] ~ -inner_lr * (grad_x L_in(x, w + eps v) - grad_x L_in(x, w - eps v)) / 2 eps.
    const Tensor & v = obj.grad_weights;
    double norm = 0.0;
    for (double e : v.data()) norm += e * e;
    norm = std::sqrt(norm);
    if (norm == 0.0) return r;
    const double eps = kUnrollProbe / norm;
    MergeWeights plus = w, minus = w;
    for (std::size_t i = 0; i < v.numel(); ++i) {
        plus.values[i] += eps * v[i];
        minus.values[i] -= eps * v[i];
    }
    const Tensor gp = outer_objective(theta0, taskvecs, inner, spec, plus, logits, temperature, noise, mean_epsilon).grad_logits;
    const Tensor gm = outer_objective(theta0, taskvecs, inner, spec, minus, logits, temperature, noise, mean_epsilon).grad_logits;
    for (std::size_t j = 0; j < r.grad_logits.numel(); ++j) r.grad_logits[j] -= inner_lr * (gp[j] - gm[j]) / (2.0 * eps);
    return r;
}

MetaResult meta_learn_mask(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                           std::span<const Dataset> unlabeled, const MlpSpec & spec, const MetaConfig & cfg) {
    cfg.validate();
    check_inputs(theta0, taskvecs, unlabeled);

    const std::size_t d = theta0.size();
    const std::size_t n = taskvecs.size();
    const std::size_t L = theta0.layout.num_layers();
    const bool optimizable = cfg.backend != MergeBackend::task_arithmetic;

    Rng root(cfg.seed, 0x6d657461);
    Rng noise_rng = root.split(1);
    BatchCycler inner_batches(unlabeled, cfg.batch_size, root.split(2));
    BatchCycler outer_batches(unlabeled, cfg.batch_size, root.split(3));

    MetaResult result;
    result.logits = MaskLogits::zeros(d);
    Tensor & x = result.logits.x;
    AdamState adam(AdamConfig{.lr = cfg.outer_lr}, x.shape());
    MergeWeights w_carry = initial_weights(cfg.backend, cfg.lambda, n, L);

    for (std::size_t step = 0; step < cfg.outer_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        MetaStep rec;
        rec.step = step;
        rec.temperature = cfg.temperature.at(step);

        const Tensor noise = draw_uniform_noise(noise_rng, d);
        std::vector<Dataset> inner, outer;
        if (optimizable) {
            for (std::size_t t = 0; t < unlabeled.size(); ++t) inner.push_back(inner_batches.next(t));
        }
        for (std::size_t t = 0; t < unlabeled.size(); ++t) outer.push_back(outer_batches.next(t));

        try {
            const MergeWeights w = cfg.warm_start ? w_carry : initial_weights(cfg.backend, cfg.lambda, n, L);
            const MetaGradient g = meta_gradient(theta0, taskvecs, inner, outer, spec, w, x, rec.temperature, noise,
                                                 cfg.inner_lr, cfg.unroll_inner, cfg.mean_epsilon);
            if (optimizable) w_carry = g.updated;
            x = adam_step(adam, x, g.grad_logits);
            rec.summed_entropy = g.loss;
            rec.task_entropy = g.task_losses;
        } catch (const DegenerateMaskError &) {
            rec.skipped = true;
            rec.summed_entropy = std::numeric_limits<double>::quiet_NaN();
        }
        rec.keep_fraction = mask_keep_fraction(x);
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.trace.steps.push_back(std::move(rec));
    }
    return result;
}

Tensor finalize_mask(const MaskLogits & logits, MaskMode mode) {
    Tape tape;
    const Tensor probs = sigmoid(tape.constant(logits.x)).value();
    return mode == MaskMode::binarized ? binarize(probs) : probs;
}

std::uint64_t mask_fingerprint(const Tensor & mask) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : mask.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

namespace {

std::vector<TaskVector> mask_all(std::span<const TaskVector> taskvecs, const Tensor & mask, double eps) {
    std::vector<TaskVector> out;
    out.reserve(taskvecs.size());
    for (const auto & tv : taskvecs) out.push_back(mask_and_rescale(tv, mask, eps));
    return out;
}

} // namespace

MergedModel concrete_task_arithmetic(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                                     const Tensor & mask, double lambda, double mean_epsilon) {
    const std::vector<TaskVector> masked = mask_all(taskvecs, mask, mean_epsilon);
    MergedModel out = task_arithmetic_merge(theta0, masked, lambda);
    out.provenance.method = "concrete_task_arithmetic";
    out.provenance.mask_fingerprint = mask_fingerprint(mask);
    return out;
}

ConcreteAdaMergingResult concrete_adamerging(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                                             const Tensor & mask, std::span<const Dataset> unlabeled,
                                             const MlpSpec & spec, const MergeWeights & w_init, const TtaConfig & tta,
                                             double mean_epsilon) {
    const std::vector<TaskVector> masked = mask_all(taskvecs, mask, mean_epsilon);
    ConcreteAdaMergingResult out;
    out.tta = tta_optimize_weights(theta0, masked, unlabeled, w_init, spec, tta);
    out.model = adamerging_merge(theta0, masked, out.tta.weights);
    out.model.provenance.method = "concrete_adamerging_" + to_string(w_init.kind);
    out.model.provenance.mask_fingerprint = mask_fingerprint(mask);
    out.model.provenance.seed = tta.seed;
    return out;
}

} // namespace csm
