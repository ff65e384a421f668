#include "csm/merge.h"

#include "csm/adam.h"
#include "csm/errors.h"

#include <algorithm>
#include <limits>
#include <numeric>

namespace csm {

std::string to_string(WeightKind k) {
    switch (k) {
    case WeightKind::scalar: return "scalar";
    case WeightKind::task_wise: return "task_wise";
    case WeightKind::layer_wise: return "layer_wise";
    }
    return "?";
}

WeightKind weight_kind_from_string(const std::string & s) {
    if (s == "scalar") return WeightKind::scalar;
    if (s == "task_wise") return WeightKind::task_wise;
    if (s == "layer_wise") return WeightKind::layer_wise;
    throw ConfigError("unknown merge weight kind '" + s + "'");
}

MergeWeights MergeWeights::scalar(double lambda) {
    return {WeightKind::scalar, Tensor::scalar(lambda), false};
}

MergeWeights MergeWeights::task_wise(std::size_t n_tasks, double init) {
    return {WeightKind::task_wise, Tensor(Shape{n_tasks}, init), true};
}

MergeWeights MergeWeights::layer_wise(std::size_t n_tasks, std::size_t n_layers, double init) {
    return {WeightKind::layer_wise, Tensor(Shape{n_tasks, n_layers}, init), true};
}

void MergeWeights::validate(std::size_t n_tasks, std::size_t n_layers) const {
    std::size_t expected = 1;
    if (kind == WeightKind::task_wise) expected = n_tasks;
    if (kind == WeightKind::layer_wise) expected = n_tasks * n_layers;
    if (values.numel() != expected) {
        throw DimensionError(to_string(kind) + " merge weights hold " + std::to_string(values.numel()) +
                             " values; expected " + std::to_string(expected));
    }
}

MergedModel task_arithmetic_merge(const ParamVector & theta0, std::span<const TaskVector> taskvecs, double lambda) {
    MergedModel out;
    out.theta = theta0;
    if (!taskvecs.empty()) {
        const TaskVector total = sum_scale(taskvecs, 1.0);
        if (total.layout != theta0.layout || total.spec_hash != theta0.spec_hash) {
            throw LayoutMismatchError("task_arithmetic_merge: task vectors do not match the base layout");
        }
        for (std::size_t j = 0; j < theta0.size(); ++j) out.theta.data[j] = theta0.data[j] + lambda * total.delta[j];
    }
    out.provenance.method = "task_arithmetic";
    out.provenance.weight_kind = to_string(WeightKind::scalar);
    out.provenance.weights = {lambda};
    for (const auto & tv : taskvecs) out.provenance.task_ids.push_back(tv.task_id);
    return out;
}

Var merge_var(const Var & theta0, std::span<const Var> taskvecs, const Var & weights, WeightKind kind,
              const Layout & layout) {
    if (taskvecs.empty()) return theta0;
    const std::size_t n = taskvecs.size();
    const std::size_t L = layout.num_layers();
    const std::size_t expected = kind == WeightKind::scalar ? 1 : kind == WeightKind::task_wise ? n : n * L;
    if (weights.numel() != expected) {
        throw DimensionError("merge: " + to_string(kind) + " weights hold " + std::to_string(weights.numel()) +
                             " values; expected " + std::to_string(expected));
    }
    for (const auto & tv : taskvecs) {
        if (tv.numel() != theta0.numel()) throw LayoutMismatchError("merge: task vector size differs from base");
    }

    if (kind == WeightKind::scalar) {
        Var total = taskvecs[0];
        for (std::size_t i = 1; i < n; ++i) total = total + taskvecs[i];
        return theta0 + weights * total;
    }

    const std::vector<std::size_t> offsets = layout.offsets();
    Var delta;
    for (std::size_t i = 0; i < n; ++i) {
        Var term;
        if (kind == WeightKind::task_wise) {
            term = slice(weights, i, 1) * taskvecs[i];
        } else {
            term = scale_segments(taskvecs[i], slice(weights, i * L, L), offsets);
        }
        delta = i == 0 ? term : delta + term;
    }
    return theta0 + delta;
}

MergedModel adamerging_merge(const ParamVector & theta0, std::span<const TaskVector> taskvecs, const MergeWeights & w) {
    require_shared_layout(taskvecs, "adamerging_merge");
    for (const auto & tv : taskvecs) {
        if (tv.layout != theta0.layout || tv.spec_hash != theta0.spec_hash) {
            throw LayoutMismatchError("adamerging_merge: task vectors do not match the base layout");
        }
    }
    w.validate(taskvecs.size(), theta0.layout.num_layers());

    Tape tape;
    const Var base = tape.constant(theta0.as_tensor());
    std::vector<Var> taus;
    for (const auto & tv : taskvecs) taus.push_back(tape.constant(tv.as_tensor()));
    const Var weights = tape.constant(w.values);
    const Var merged = merge_var(base, taus, weights, w.kind, theta0.layout);

    MergedModel out;
    out.theta = theta0;
    out.theta.data = merged.value().values();
    out.provenance.method = w.kind == WeightKind::scalar ? "task_arithmetic" : "adamerging_" + to_string(w.kind);
    out.provenance.weight_kind = to_string(w.kind);
    out.provenance.weights = w.values.values();
    for (const auto & tv : taskvecs) out.provenance.task_ids.push_back(tv.task_id);
    return out;
}

Var entropy_loss(const Var & probs) {
    const Tensor & p = probs.value();
    if (p.rank() != 2 || p.dim(0) == 0) throw DimensionError("entropy_loss expects a non-empty [N x C] matrix");
    for (double v : p.data()) {
        if (v < 0.0) throw DomainError("entropy_loss: negative probability");
    }
    const double n = static_cast<double>(p.dim(0));
    const Var plogp = probs * log(clamp_min(probs, std::numeric_limits<double>::min()));
    return scale(sum(plogp), -1.0 / n);
}

double entropy_loss(const Tensor & probs) {
    Tape tape;
    return entropy_loss(tape.constant(probs)).value().item();
}

BatchCycler::BatchCycler(std::span<const Dataset> pools, std::size_t batch_size, Rng rng)
    : pools_(pools), batch_size_(batch_size), cursor_(pools.size(), 0), current_(pools.size()) {
    if (batch_size_ == 0) throw ContractError("batch size must be positive");
    for (std::size_t t = 0; t < pools_.size(); ++t) {
        if (pools_[t].rows() == 0) throw ContractError("unlabeled pool for task " + std::to_string(t) + " is empty");
        rngs_.push_back(rng.split(t));
        orders_.emplace_back(pools_[t].rows());
        std::iota(orders_[t].begin(), orders_[t].end(), std::size_t{0});
        rngs_[t].shuffle(std::span<std::size_t>(orders_[t]));
    }
}

const Dataset & BatchCycler::next(std::size_t task) {
    auto & order = orders_.at(task);
    const std::size_t take = std::min(batch_size_, order.size());
    if (cursor_[task] + take > order.size()) {
        rngs_[task].shuffle(std::span<std::size_t>(order));
        cursor_[task] = 0;
    }
    current_[task] = pools_[task].subset(std::span<const std::size_t>(order).subspan(cursor_[task], take));
    cursor_[task] += take;
    return current_[task];
}

TtaResult tta_optimize_weights(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                               std::span<const Dataset> unlabeled, const MergeWeights & w_init, const MlpSpec & spec,
                               const TtaConfig & cfg) {
    if (unlabeled.empty()) throw ContractError("tta_optimize_weights: no unlabeled data");
    if (taskvecs.empty()) throw ContractError("tta_optimize_weights: no task vectors");
    require_shared_layout(taskvecs, "tta_optimize_weights");
    w_init.validate(taskvecs.size(), theta0.layout.num_layers());

    TtaResult result;
    result.weights = w_init;
    if (cfg.steps == 0) return result;

    BatchCycler batches(unlabeled, cfg.batch_size, Rng(cfg.seed, 0x747461));
    AdamState adam(AdamConfig{.lr = cfg.lr}, w_init.values.shape());
    Tensor w = w_init.values;

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Tape tape;
        const Var wv = tape.leaf(w);
        const Var base = tape.constant(theta0.as_tensor());
        std::vector<Var> taus;
        for (const auto & tv : taskvecs) taus.push_back(tape.constant(tv.as_tensor()));
        const Var theta = merge_var(base, taus, wv, w_init.kind, theta0.layout);

        Var total;
        for (std::size_t t = 0; t < unlabeled.size(); ++t) {
            const Dataset & batch = batches.next(t);
            const Var probs = softmax(forward(theta, spec, tape.constant(batch.features)), 1);
            const Var l = entropy_loss(probs);
            total = t == 0 ? l : total + l;
        }
        result.loss_trajectory.push_back(total.value().item());
        const Gradients g = tape.backward(total);
        w = adam_step(adam, w, g.of(wv));
    }
    result.weights.values = w;
    return result;
}

std::vector<double> per_task_entropy(const ParamVector & theta, const MlpSpec & spec, std::span<const Dataset> data) {
    std::vector<double> out;
    for (const auto & d : data) out.push_back(entropy_loss(softmax_values(forward(theta, spec, d.features), 1)));
    return out;
}

double summed_entropy(const ParamVector & theta, const MlpSpec & spec, std::span<const Dataset> data) {
    const auto per = per_task_entropy(theta, spec, data);
    return std::accumulate(per.begin(), per.end(), 0.0);
}

} // namespace csm
