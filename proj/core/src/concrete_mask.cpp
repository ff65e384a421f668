#include "csm/concrete_mask.h"

#include "csm/errors.h"

#include <algorithm>
#include <cmath>

namespace csm {

namespace {

void check_temperature(double t) {
    if (!(t > 0.0) || !std::isfinite(t)) throw DomainError("temperature must be positive, got " + std::to_string(t));
}

double clamp_noise(double u) { return std::clamp(u, kNoiseClamp, 1.0 - kNoiseClamp); }

double noise_logit(double u) {
    u = clamp_noise(u);
    return std::log(u) - std::log1p(-u);
}

Tensor noise_logits(const Tensor & noise) {
    Tensor out(noise.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = noise_logit(noise[i]);
    return out;
}

} // namespace

double Temperature::at(std::size_t step) const {
    if (!schedule) return value;
    const auto & s = *schedule;
    if (s.steps == 0 || step >= s.steps) return s.final;
    const double frac = static_cast<double>(step) / static_cast<double>(s.steps);
    return s.initial * std::pow(s.final / s.initial, frac);
}

void Temperature::validate() const {
    check_temperature(value);
    if (schedule) {
        check_temperature(schedule->initial);
        check_temperature(schedule->final);
    }
}

Tensor draw_uniform_noise(Rng & rng, std::size_t n) {
    Tensor u(Shape{n});
    for (std::size_t i = 0; i < n; ++i) u[i] = clamp_noise(rng.uniform_open());
    return u;
}

ConcreteMaskSample sample_concrete(const Var & logits, double temperature, Rng & rng) {
    return sample_concrete(logits, temperature, draw_uniform_noise(rng, logits.numel()));
}

ConcreteMaskSample sample_concrete(const Var & logits, double temperature, Tensor noise) {
    check_temperature(temperature);
    if (noise.numel() != logits.numel()) throw DimensionError("sample_concrete: noise and logits differ in size");
    for (double & u : noise.values()) u = clamp_noise(u);
    Tape * tape = logits.tape();
    const Var shifted = logits + tape->constant(noise_logits(noise).reshaped(logits.shape()));
    ConcreteMaskSample s;
    s.values = sigmoid(scale(shifted, 1.0 / temperature));
    s.temperature = temperature;
    s.noise = std::move(noise);
    return s;
}

Tensor sample_concrete_values(const Tensor & logits, double temperature, const Tensor & noise) {
    Tape tape;
    return sample_concrete(tape.constant(logits), temperature, noise).values.value();
}

Tensor sample_bernoulli_hard(const Tensor & logits, Rng & rng) {
    return sample_bernoulli_hard(logits, draw_uniform_noise(rng, logits.numel()));
}

Tensor sample_bernoulli_hard(const Tensor & logits, const Tensor & noise) {
    if (noise.numel() != logits.numel()) throw DimensionError("sample_bernoulli_hard: noise and logits differ in size");
    Tensor out(logits.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = logits[i] + noise_logit(noise[i]) > 0.0 ? 1.0 : 0.0;
    return out;
}

Tensor binarize(const Tensor & mask) {
    Tensor out(mask.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = mask[i] > 0.5 ? 1.0 : 0.0;
    return out;
}

Var mask_and_rescale(const Var & tau, const Var & mask, double eps_mean) {
    if (tau.numel() != mask.numel()) throw DimensionError("mask_and_rescale: task vector and mask differ in size");
    const Var m = mask.shape() == tau.shape() ? mask : reshape(mask, tau.shape());
    const Var avg = mean(m);
    if (!(avg.value().item() > eps_mean)) {
        throw DegenerateMaskError("mask mean " + std::to_string(avg.value().item()) + " is at or below " +
                                  std::to_string(eps_mean));
    }
    return (tau * m) / avg;
}

TaskVector mask_and_rescale(const TaskVector & tau, const Tensor & mask, double eps_mean) {
    Tape tape;
    const Var out = mask_and_rescale(tape.constant(tau.as_tensor()), tape.constant(mask), eps_mean);
    TaskVector r = tau;
    r.delta = out.value().values();
    return r;
}

Tensor gumbel_from_uniform(const Tensor & u) {
    Tensor g(u.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = -std::log(-std::log(clamp_noise(u[i])));
    return g;
}

Tensor sample_gumbel(Rng & rng, const Shape & shape) {
    return gumbel_from_uniform(draw_uniform_noise(rng, shape_numel(shape)).reshaped(shape));
}

Var gumbel_softmax_categorical(const Var & logits, double temperature, Rng & rng) {
    return gumbel_softmax_categorical(logits, temperature, sample_gumbel(rng, logits.shape()));
}

Var gumbel_softmax_categorical(const Var & logits, double temperature, const Tensor & gumbel) {
    check_temperature(temperature);
    if (logits.shape().size() != 1) throw DimensionError("gumbel_softmax_categorical expects a 1-D logit vector");
    if (gumbel.numel() != logits.numel()) throw DimensionError("gumbel_softmax_categorical: noise size mismatch");
    const Var perturbed = logits + logits.tape()->constant(gumbel.reshaped(logits.shape()));
    return softmax(scale(perturbed, 1.0 / temperature), 0);
}

double mask_keep_fraction(const Tensor & logits) {
    if (logits.numel() == 0) return 0.0;
    std::size_t kept = 0;
    for (double x : logits.data()) kept += x > 0.0 ? 1 : 0;
    return static_cast<double>(kept) / static_cast<double>(logits.numel());
}

} // namespace csm
