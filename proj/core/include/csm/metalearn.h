#pragma once

#include "csm/concrete_mask.h"
#include "csm/merge.h"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace csm {

// Fusion algorithm run inside each meta-step. Task arithmetic has no optimizable weights.
enum class MergeBackend { task_arithmetic, adamerging_task_wise, adamerging_layer_wise };
std::string to_string(MergeBackend b);
MergeBackend merge_backend_from_string(const std::string & s);
WeightKind weight_kind_of(MergeBackend b);

struct MetaConfig {
    std::size_t outer_steps = 2000;
    double outer_lr = 1e-3;  // Adam step size on the mask logits
    double inner_lr = 1.0;   // single gradient step on the merge weights
    Temperature temperature;
    MergeBackend backend = MergeBackend::task_arithmetic;
    double lambda = kDefaultMergeCoefficient;  // task-arithmetic coefficient and AdaMerging init value
    std::size_t batch_size = 64;
    bool warm_start = false;  // carry w' into the next outer step instead of re-initializing
    bool unroll_inner = true; // differentiate through the inner w-update; false drops that term
    double mean_epsilon = kDefaultMeanEpsilon;
    std::uint64_t seed = 0;

    void validate() const;
};

struct MetaStep {
    std::size_t step = 0;
    double summed_entropy = 0.0;
    std::vector<double> task_entropy;
    double keep_fraction = 0.0;  // fraction of sigmoid(x) > 0.5 after the update
    double temperature = 0.0;
    bool skipped = false;        // degenerate mask; no update applied
    double wall_ms = 0.0;

    // Wall time is excluded so replays compare equal.
    friend bool operator==(const MetaStep & a, const MetaStep & b) {
        auto same = [](double x, double y) { return x == y || (x != x && y != y); };
        if (a.task_entropy.size() != b.task_entropy.size()) return false;
        for (std::size_t i = 0; i < a.task_entropy.size(); ++i) {
            if (!same(a.task_entropy[i], b.task_entropy[i])) return false;
        }
        return a.step == b.step && same(a.summed_entropy, b.summed_entropy) && a.keep_fraction == b.keep_fraction &&
               a.temperature == b.temperature && a.skipped == b.skipped;
    }
};

struct MetaTrace {
    std::vector<MetaStep> steps;
    friend bool operator==(const MetaTrace &, const MetaTrace &) = default;
};

struct MetaResult {
    MaskLogits logits;
    MetaTrace trace;
};

// Initial merge weights for a backend (scalar lambda, or all entries = lambda).
MergeWeights initial_weights(MergeBackend backend, double lambda, std::size_t n_tasks, std::size_t n_layers);

// Summed entropy of one outer step and its gradient with respect to the mask logits, for fixed
// noise, fixed batches and fixed (already updated) merge weights.
struct OuterObjective {
    double loss = 0.0;
    std::vector<double> task_losses;
    Tensor grad_logits;
    Tensor grad_weights;
};

OuterObjective outer_objective(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                               std::span<const Dataset> batches, const MlpSpec & spec, const MergeWeights & weights,
                               const Tensor & logits, double temperature, const Tensor & noise,
                               double mean_epsilon = kDefaultMeanEpsilon);

// w' = w - lr * grad_w(sum of batch entropies) for already masked-and-rescaled task vectors.
MergeWeights inner_weight_step(const ParamVector & theta0, std::span<const TaskVector> masked,
                               std::span<const Dataset> batches, const MlpSpec & spec, const MergeWeights & w,
                               double lr);

// One outer step's loss and logit gradient. For an optimizable backend, w' = w - inner_lr * grad_w of the
// inner-batch entropy under the sampled mask, and the outer loss is evaluated at w'. With `unroll` the
// gradient includes the path through w'(x); its mixed second-derivative term is a central difference of
// two logit gradients at w +- eps * v, v = dL/dw'.
struct MetaGradient {
    double loss = 0.0;
    std::vector<double> task_losses;
    Tensor grad_logits;
    MergeWeights updated;
};

inline constexpr double kUnrollProbe = 1e-4;  // norm of the weight perturbation in the Hessian-vector probe

MetaGradient meta_gradient(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                           std::span<const Dataset> inner, std::span<const Dataset> outer, const MlpSpec & spec,
                           const MergeWeights & w, const Tensor & logits, double temperature, const Tensor & noise,
                           double inner_lr, bool unroll, double mean_epsilon = kDefaultMeanEpsilon);

// Meta-learns one shared Concrete mask across tasks: logits start at zero; each outer step samples a
// relaxed mask, masks and rescales every task vector, merges (taking one inner step on the merge
// weights when the backend has any), and takes one Adam step on the logits against the summed
// entropy on fresh unlabeled batches. Degenerate masks skip the step and are flagged in the trace.
MetaResult meta_learn_mask(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                           std::span<const Dataset> unlabeled, const MlpSpec & spec, const MetaConfig & cfg);

enum class MaskMode { concrete_expected, binarized };
std::string to_string(MaskMode m);
MaskMode mask_mode_from_string(const std::string & s);

// Noise-free evaluation mask: sigmoid(x), or 1{sigmoid(x) > 0.5}.
Tensor finalize_mask(const MaskLogits & logits, MaskMode mode);

std::uint64_t mask_fingerprint(const Tensor & mask);

MergedModel concrete_task_arithmetic(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                                     const Tensor & mask, double lambda,
                                     double mean_epsilon = kDefaultMeanEpsilon);

struct ConcreteAdaMergingResult {
    MergedModel model;
    TtaResult tta;
};

ConcreteAdaMergingResult concrete_adamerging(const ParamVector & theta0, std::span<const TaskVector> taskvecs,
                                             const Tensor & mask, std::span<const Dataset> unlabeled,
                                             const MlpSpec & spec, const MergeWeights & w_init, const TtaConfig & tta,
                                             double mean_epsilon = kDefaultMeanEpsilon);

} // namespace csm
