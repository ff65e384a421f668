#pragma once

#include "csm/tensor.h"

#include <cstddef>

namespace csm {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Moment accumulators for one parameter tensor.
struct AdamState {
    AdamConfig config;
    std::size_t step = 0;
    Tensor m;
    Tensor v;

    AdamState() = default;
    AdamState(AdamConfig cfg, const Shape & param_shape)
        : config(cfg), m(Tensor::zeros(param_shape)), v(Tensor::zeros(param_shape)) {}
};

// One bias-corrected Adam update. Returns the new parameters and advances `state`.
Tensor adam_step(AdamState & state, const Tensor & params, const Tensor & grads);

} // namespace csm
