#pragma once

#include "csm/autodiff.h"
#include "csm/rng.h"
#include "csm/task_vector.h"
#include "csm/tensor.h"

#include <cstddef>
#include <optional>

namespace csm {

// Uniform noise is clamped to [kNoiseClamp, 1 - kNoiseClamp] before any logit/log transform.
inline constexpr double kNoiseClamp = 1e-12;
inline constexpr double kDefaultTemperature = 0.5;
inline constexpr double kDefaultMeanEpsilon = 1e-6;

// Per-parameter logits of a shared binary Concrete mask; keep probability is sigmoid(x).
struct MaskLogits {
    Tensor x;

    static MaskLogits zeros(std::size_t d) { return {Tensor::zeros({d})}; }
    std::size_t size() const { return x.numel(); }
};

// Relaxation temperature, optionally decayed geometrically from `initial` to `final` over `steps`.
struct Temperature {
    struct Schedule {
        double initial = kDefaultTemperature;
        double final = kDefaultTemperature;
        std::size_t steps = 1;
    };

    double value = kDefaultTemperature;
    std::optional<Schedule> schedule;

    double at(std::size_t step) const;
    void validate() const;
};

struct ConcreteMaskSample {
    Var values;         // in (0, 1), differentiable w.r.t. the logits
    double temperature = kDefaultTemperature;
    Tensor noise;       // clamped uniforms, kept for exact replay
};

Tensor draw_uniform_noise(Rng & rng, std::size_t n);

// m = sigmoid((x + log(u / (1 - u))) / temperature). The logit of sigmoid(x) is x itself, so the
// second log-odds term of the textbook form collapses to the raw logits.
ConcreteMaskSample sample_concrete(const Var & logits, double temperature, Rng & rng);
ConcreteMaskSample sample_concrete(const Var & logits, double temperature, Tensor noise);
Tensor sample_concrete_values(const Tensor & logits, double temperature, const Tensor & noise);

// Hard Bernoulli(sigmoid(x)) draw via the two-class Gumbel-Max event: 1 iff x + log(u / (1 - u)) > 0.
Tensor sample_bernoulli_hard(const Tensor & logits, Rng & rng);
Tensor sample_bernoulli_hard(const Tensor & logits, const Tensor & noise);

// 1 where m > 0.5 (strict), else 0.
Tensor binarize(const Tensor & mask);

// (tau * m) / mean(m). Throws DegenerateMaskError when mean(m) <= eps_mean.
Var mask_and_rescale(const Var & tau, const Var & mask, double eps_mean = kDefaultMeanEpsilon);
TaskVector mask_and_rescale(const TaskVector & tau, const Tensor & mask, double eps_mean = kDefaultMeanEpsilon);

// Standard Gumbel draws g = -log(-log u).
Tensor gumbel_from_uniform(const Tensor & u);
Tensor sample_gumbel(Rng & rng, const Shape & shape);

// softmax((logits + g) / temperature) over a 1-D logit vector.
Var gumbel_softmax_categorical(const Var & logits, double temperature, Rng & rng);
Var gumbel_softmax_categorical(const Var & logits, double temperature, const Tensor & gumbel);

// Fraction of logits with sigmoid(x) > 0.5, i.e. x > 0.
double mask_keep_fraction(const Tensor & logits);

} // namespace csm
