#pragma once

#include "csm/autodiff.h"
#include "csm/nn.h"
#include "csm/rng.h"
#include "csm/task_vector.h"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace csm {

enum class WeightKind { scalar, task_wise, layer_wise };
std::string to_string(WeightKind k);
WeightKind weight_kind_from_string(const std::string & s);

inline constexpr double kDefaultMergeCoefficient = 0.3;

// Merge coefficients: one lambda, one per task, or one per (task, layer) stored row-major [n x L].
struct MergeWeights {
    WeightKind kind = WeightKind::scalar;
    Tensor values;
    bool requires_grad = false;

    static MergeWeights scalar(double lambda);
    static MergeWeights task_wise(std::size_t n_tasks, double init = kDefaultMergeCoefficient);
    static MergeWeights layer_wise(std::size_t n_tasks, std::size_t n_layers, double init = kDefaultMergeCoefficient);

    // Throws DimensionError unless the value count matches n tasks and L layers for this kind.
    void validate(std::size_t n_tasks, std::size_t n_layers) const;
    friend bool operator==(const MergeWeights &, const MergeWeights &) = default;
};

struct Provenance {
    std::string method;
    std::string weight_kind;
    std::vector<double> weights;
    std::uint64_t mask_fingerprint = 0;
    std::uint64_t seed = 0;
    std::vector<int> task_ids;
    std::map<std::string, std::string> extra;

    friend bool operator==(const Provenance &, const Provenance &) = default;
};

struct MergedModel {
    ParamVector theta;
    Provenance provenance;
};

// theta0 + lambda * sum_i tau_i
MergedModel task_arithmetic_merge(const ParamVector & theta0, std::span<const TaskVector> taskvecs, double lambda);

// Task-wise: theta0 + sum_i lambda_i tau_i. Layer-wise: each named layer slice l gets
// theta0^l + sum_i lambda_i^l tau_i^l. A scalar weight behaves like task arithmetic.
MergedModel adamerging_merge(const ParamVector & theta0, std::span<const TaskVector> taskvecs, const MergeWeights & w);

// Differentiable merge over tape values; `weights` holds MergeWeights::values for `kind`.
Var merge_var(const Var & theta0, std::span<const Var> taskvecs, const Var & weights, WeightKind kind,
              const Layout & layout);

// -(1/N) sum_i sum_c p_ic log p_ic over rows of probabilities, natural log, 0 log 0 = 0.
Var entropy_loss(const Var & probs);
double entropy_loss(const Tensor & probs);

// Cycles through a seeded shuffle of each task's unlabeled pool, one batch per task per call.
class BatchCycler {
public:
    BatchCycler(std::span<const Dataset> pools, std::size_t batch_size, Rng rng);

    const Dataset & next(std::size_t task);
    std::size_t num_tasks() const { return pools_.size(); }

private:
    std::span<const Dataset> pools_;
    std::size_t batch_size_;
    std::vector<Rng> rngs_;
    std::vector<std::vector<std::size_t>> orders_;
    std::vector<std::size_t> cursor_;
    std::vector<Dataset> current_;
};

struct TtaConfig {
    std::size_t steps = 100;
    double lr = 1e-3;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

struct TtaResult {
    MergeWeights weights;
    std::vector<double> loss_trajectory;  // summed batch entropy before each update
};

// Adam on the merge weights, minimizing the summed entropy of the merged model's predictions on
// one unlabeled batch per task per step.
TtaResult tta_optimize_weights(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                               std::span<const Dataset> unlabeled, const MergeWeights & w_init, const MlpSpec & spec,
                               const TtaConfig & cfg);

// Summed (over tasks) mean prediction entropy of a model on full datasets.
double summed_entropy(const ParamVector & theta, const MlpSpec & spec, std::span<const Dataset> data);
std::vector<double> per_task_entropy(const ParamVector & theta, const MlpSpec & spec, std::span<const Dataset> data);

} // namespace csm
