#pragma once

#include "csm/nn.h"

#include <cstdint>
#include <span>
#include <vector>

namespace csm {

// tau_i = theta_i - theta_0, carrying the base layout so it can be added back.
struct TaskVector {
    std::vector<double> delta;
    Layout layout;
    std::uint64_t spec_hash = 0;
    int task_id = -1;

    std::size_t size() const { return delta.size(); }
    Tensor as_tensor() const { return Tensor::vector(delta); }
    friend bool operator==(const TaskVector &, const TaskVector &) = default;
};

TaskVector compute_task_vector(const ParamVector & finetuned, const ParamVector & base, int task_id = -1);

// base + tv, elementwise.
ParamVector apply_task_vector(const ParamVector & base, const TaskVector & tv);

// Elementwise mean of the models.
ParamVector weight_average(std::span<const ParamVector> models);

// coeff * sum of the task vectors.
TaskVector sum_scale(std::span<const TaskVector> taskvecs, double coeff);

// Trim / elect sign / disjoint merge over the whole flat vector:
//  1. keep the ceil(k * d) largest-magnitude entries of each vector (ties go to the lower index);
//  2. elect the sign of the per-coordinate sum of trimmed values (a zero sum elects +);
//  3. average the nonzero trimmed values that agree with the elected sign (0 when none do).
TaskVector ties_merge(std::span<const TaskVector> taskvecs, double trim_fraction);

// Throws LayoutMismatchError unless every vector shares the first one's layout.
void require_shared_layout(std::span<const TaskVector> taskvecs, const char * what);

} // namespace csm
