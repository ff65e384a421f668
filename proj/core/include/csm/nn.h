#pragma once

#include "csm/autodiff.h"
#include "csm/tensor.h"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace csm {

// Fully connected ReLU classifier: layer_sizes = {input, hidden..., classes}.
struct MlpSpec {
    std::vector<std::size_t> layer_sizes;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t input_dim() const { return layer_sizes.front(); }
    std::size_t num_classes() const { return layer_sizes.back(); }
    std::size_t num_linear() const { return layer_sizes.size() - 1; }
    // Architecture fingerprint (layer sizes and activation); the seed is not part of it.
    std::uint64_t hash() const;
};

struct LayerSlot {
    std::string name;
    Shape shape;
    std::size_t offset = 0;

    std::size_t numel() const { return shape_numel(shape); }
    friend bool operator==(const LayerSlot &, const LayerSlot &) = default;
};

// Ordered named slices of a flat parameter vector. Offsets are contiguous.
class Layout {
public:
    Layout() = default;
    explicit Layout(std::vector<LayerSlot> slots);

    const std::vector<LayerSlot> & slots() const { return slots_; }
    std::size_t num_layers() const { return slots_.size(); }
    std::size_t total() const { return total_; }
    std::vector<std::size_t> offsets() const;
    const LayerSlot & slot(std::size_t i) const { return slots_.at(i); }

    friend bool operator==(const Layout &, const Layout &) = default;

private:
    std::vector<LayerSlot> slots_;
    std::size_t total_ = 0;
};

// Weights stored [in x out] so a batch maps as X * W + b.
Layout make_layout(const MlpSpec & spec);

struct ParamVector {
    std::vector<double> data;
    Layout layout;
    std::uint64_t spec_hash = 0;

    std::size_t size() const { return data.size(); }
    Tensor as_tensor() const { return Tensor::vector(data); }
    bool same_layout(const ParamVector & other) const {
        return layout == other.layout && spec_hash == other.spec_hash;
    }
    friend bool operator==(const ParamVector &, const ParamVector &) = default;
};

// Throws LayoutMismatchError unless `a` and `b` share layout and fingerprint.
void require_same_layout(const ParamVector & a, const ParamVector & b, const char * what);

std::vector<Tensor> unflatten(const ParamVector & params);
ParamVector flatten(const MlpSpec & spec, std::span<const Tensor> tensors);

enum class Split { train, test, unlabeled };
std::string to_string(Split s);

// Features [N x input] with integer labels in [0, num_classes). Unlabeled splits may carry no labels.
struct Dataset {
    Tensor features;
    std::vector<int> labels;
    std::size_t num_classes = 0;
    Split split = Split::train;

    std::size_t rows() const { return features.rank() == 2 ? features.dim(0) : 0; }
    bool labeled() const { return !labels.empty(); }
    void validate() const;
    Dataset subset(std::span<const std::size_t> rows) const;
    friend bool operator==(const Dataset &, const Dataset &) = default;
};

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainStats {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::size_t steps = 0;
};

// Deterministic fan-in scaled init: weights uniform on +-sqrt(6 / fan_in), biases zero.
ParamVector init_pretrained(const MlpSpec & spec);

// Differentiable forward pass over a flat parameter Var; x is a [N x input] Var on the same tape.
Var forward(const Var & theta, const MlpSpec & spec, const Var & x);
// Tape-free forward pass for evaluation.
Tensor forward(const ParamVector & params, const MlpSpec & spec, const Tensor & x);

// Mean cross-entropy of integer labels, via max-subtracted log-softmax.
Var cross_entropy(const Var & logits, std::span<const int> labels);

// Mini-batch Adam on cross-entropy. Batches come from a seeded reshuffle per epoch; the short
// final batch is kept.
ParamVector fine_tune(const ParamVector & theta0, const MlpSpec & spec, const Dataset & task, const TrainConfig & cfg,
                      TrainStats * stats = nullptr);

// Mean cross-entropy over the whole labeled dataset.
double dataset_loss(const ParamVector & params, const MlpSpec & spec, const Dataset & data);

// Top-1 accuracy; argmax ties resolve to the lowest class index.
double accuracy_from_logits(const Tensor & logits, std::span<const int> labels);
double evaluate(const ParamVector & params, const MlpSpec & spec, const Dataset & data);

} // namespace csm
