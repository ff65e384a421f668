#include "csm/adam.h"

#include "csm/errors.h"

#include <cmath>

namespace csm {

Tensor adam_step(AdamState & state, const Tensor & params, const Tensor & grads) {
    if (params.shape() != grads.shape() || state.m.shape() != params.shape() || state.v.shape() != params.shape()) {
        throw DimensionError("adam_step: params " + shape_to_string(params.shape()) + ", grads " +
                             shape_to_string(grads.shape()) + ", state " + shape_to_string(state.m.shape()));
    }
    const AdamConfig & c = state.config;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));

    Tensor out = params;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double g = grads[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        out[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
    return out;
}

} // namespace csm
