#include "csm/nn.h"

#include "csm/adam.h"
#include "csm/errors.h"
#include "csm/rng.h"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace csm {

void MlpSpec::validate() const {
    if (layer_sizes.size() < 2) throw ContractError("MlpSpec needs at least input and output sizes");
    for (std::size_t s : layer_sizes) {
        if (s == 0) throw ContractError("MlpSpec layer sizes must be positive");
    }
}

std::uint64_t MlpSpec::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    mix(0x72656c75);  // activation tag
    for (std::size_t s : layer_sizes) mix(s);
    return h;
}

Layout::Layout(std::vector<LayerSlot> slots) : slots_(std::move(slots)) {
    for (const auto & s : slots_) {
        if (s.offset != total_) throw ContractError("layout offsets must be contiguous; slot " + s.name);
        total_ += s.numel();
    }
}

std::vector<std::size_t> Layout::offsets() const {
    std::vector<std::size_t> out;
    out.reserve(slots_.size());
    for (const auto & s : slots_) out.push_back(s.offset);
    return out;
}

Layout make_layout(const MlpSpec & spec) {
    spec.validate();
    std::vector<LayerSlot> slots;
    std::size_t off = 0;
    for (std::size_t l = 0; l < spec.num_linear(); ++l) {
        const std::size_t in = spec.layer_sizes[l], out = spec.layer_sizes[l + 1];
        slots.push_back({"layer" + std::to_string(l) + ".weight", {in, out}, off});
        off += in * out;
        slots.push_back({"layer" + std::to_string(l) + ".bias", {out}, off});
        off += out;
    }
    return Layout(std::move(slots));
}

void require_same_layout(const ParamVector & a, const ParamVector & b, const char * what) {
    if (!a.same_layout(b) || a.data.size() != b.data.size()) {
        throw LayoutMismatchError(std::string(what) + ": parameter layouts differ");
    }
}

std::vector<Tensor> unflatten(const ParamVector & params) {
    if (params.layout.total() != params.data.size()) throw LayoutMismatchError("unflatten: layout/data size mismatch");
    std::vector<Tensor> out;
    for (const auto & s : params.layout.slots()) {
        auto first = params.data.begin() + static_cast<std::ptrdiff_t>(s.offset);
        out.emplace_back(s.shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(s.numel())));
    }
    return out;
}

ParamVector flatten(const MlpSpec & spec, std::span<const Tensor> tensors) {
    ParamVector p;
    p.layout = make_layout(spec);
    p.spec_hash = spec.hash();
    if (tensors.size() != p.layout.num_layers()) throw LayoutMismatchError("flatten: wrong number of tensors");
    p.data.reserve(p.layout.total());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].shape() != p.layout.slot(i).shape) {
            throw LayoutMismatchError("flatten: tensor " + p.layout.slot(i).name + " has shape " +
                                      shape_to_string(tensors[i].shape()));
        }
        p.data.insert(p.data.end(), tensors[i].values().begin(), tensors[i].values().end());
    }
    return p;
}

std::string to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::unlabeled: return "unlabeled";
    }
    return "?";
}

void Dataset::validate() const {
    if (features.rank() != 2) throw ContractError("dataset features must be a matrix");
    if (split == Split::unlabeled && labels.empty()) return;
    if (labels.size() != rows()) throw ContractError("dataset label count does not match feature rows");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
            throw ContractError("dataset label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
        }
    }
}

Dataset Dataset::subset(std::span<const std::size_t> idx) const {
    const std::size_t cols = features.dim(1);
    Dataset d;
    d.num_classes = num_classes;
    d.split = split;
    std::vector<double> f;
    f.reserve(idx.size() * cols);
    for (std::size_t r : idx) {
        if (r >= rows()) throw ContractError("dataset subset row out of range");
        auto first = features.values().begin() + static_cast<std::ptrdiff_t>(r * cols);
        f.insert(f.end(), first, first + static_cast<std::ptrdiff_t>(cols));
        if (labeled()) d.labels.push_back(labels[r]);
    }
    d.features = Tensor::matrix(idx.size(), cols, std::move(f));
    return d;
}

void TrainConfig::validate() const {
    if (batch_size == 0 || !(lr > 0.0)) throw ContractError("TrainConfig: batch size and learning rate must be positive");
}

ParamVector init_pretrained(const MlpSpec & spec) {
    ParamVector p;
    p.layout = make_layout(spec);
    p.spec_hash = spec.hash();
    p.data.assign(p.layout.total(), 0.0);
    Rng rng(spec.seed, 0x696e6974);
    for (const auto & s : p.layout.slots()) {
        if (s.shape.size() != 2) continue;
        const double bound = std::sqrt(6.0 / static_cast<double>(s.shape[0]));
        for (std::size_t j = 0; j < s.numel(); ++j) p.data[s.offset + j] = (2.0 * rng.uniform() - 1.0) * bound;
    }
    return p;
}

namespace {

void check_forward_inputs(std::size_t theta_size, const MlpSpec & spec, const Shape & x_shape) {
    const std::size_t expected = make_layout(spec).total();
    if (theta_size != expected) {
        throw ContractError("forward: parameter vector has " + std::to_string(theta_size) + " entries, spec needs " +
                            std::to_string(expected));
    }
    if (x_shape.size() != 2 || x_shape[1] != spec.input_dim()) {
        throw DimensionError("forward: input " + shape_to_string(x_shape) + " does not match input size " +
                             std::to_string(spec.input_dim()));
    }
}

} // namespace

Var forward(const Var & theta, const MlpSpec & spec, const Var & x) {
    check_forward_inputs(theta.numel(), spec, x.shape());
    const Layout layout = make_layout(spec);
    Tape * tape = theta.tape();
    const std::size_t n = x.shape()[0];
    const Var ones = tape->constant(Tensor(Shape{n, 1}, 1.0));

    Var h = x;
    for (std::size_t l = 0; l < spec.num_linear(); ++l) {
        const LayerSlot & ws = layout.slot(2 * l);
        const LayerSlot & bs = layout.slot(2 * l + 1);
        const Var w = reshape(slice(theta, ws.offset, ws.numel()), ws.shape);
        const Var b = reshape(slice(theta, bs.offset, bs.numel()), {1, bs.numel()});
        h = matmul(h, w) + matmul(ones, b);
        if (l + 1 < spec.num_linear()) h = relu(h);
    }
    return h;
}

Tensor forward(const ParamVector & params, const MlpSpec & spec, const Tensor & x) {
    if (params.spec_hash != spec.hash()) throw ContractError("forward: parameter fingerprint does not match spec");
    check_forward_inputs(params.size(), spec, x.shape());
    const std::size_t n = x.dim(0);
    std::vector<double> h(x.values());
    std::size_t width = spec.input_dim();
    std::size_t off = 0;
    for (std::size_t l = 0; l < spec.num_linear(); ++l) {
        const std::size_t out = spec.layer_sizes[l + 1];
        const double * w = params.data.data() + off;
        const double * b = w + width * out;
        std::vector<double> next(n * out);
        for (std::size_t r = 0; r < n; ++r) {
            double * dst = next.data() + r * out;
            std::copy(b, b + out, dst);
            for (std::size_t k = 0; k < width; ++k) {
                const double v = h[r * width + k];
                if (v == 0.0) continue;
                const double * wrow = w + k * out;
                for (std::size_t j = 0; j < out; ++j) dst[j] += v * wrow[j];
            }
        }
        if (l + 1 < spec.num_linear()) {
            for (double & v : next) v = v > 0.0 ? v : 0.0;
        }
        off += width * out + out;
        width = out;
        h = std::move(next);
    }
    return Tensor::matrix(n, width, std::move(h));
}

Var cross_entropy(const Var & logits, std::span<const int> labels) {
    return nll_loss(log_softmax(logits, 1), labels);
}

double dataset_loss(const ParamVector & params, const MlpSpec & spec, const Dataset & data) {
    if (!data.labeled() || data.rows() == 0) throw ContractError("dataset_loss: needs a non-empty labeled split");
    Tape tape;
    const Var logits = tape.constant(forward(params, spec, data.features));
    return cross_entropy(logits, data.labels).value().item();
}

ParamVector fine_tune(const ParamVector & theta0, const MlpSpec & spec, const Dataset & task, const TrainConfig & cfg,
                      TrainStats * stats) {
    cfg.validate();
    task.validate();
    if (task.rows() == 0 || !task.labeled()) throw ContractError("fine_tune: empty or unlabeled training split");
    if (theta0.spec_hash != spec.hash()) throw ContractError("fine_tune: parameter fingerprint does not match spec");

    if (stats) {
        stats->initial_loss = dataset_loss(theta0, spec, task);
        stats->steps = 0;
    }

    ParamVector out = theta0;
    Tensor theta = theta0.as_tensor();
    AdamState adam(AdamConfig{.lr = cfg.lr}, theta.shape());
    Rng rng(cfg.seed, 0x66696e65);
    std::vector<std::size_t> order(task.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const Dataset batch = task.subset(std::span<const std::size_t>(order).subspan(start, end - start));
            Tape tape;
            const Var th = tape.leaf(theta);
            const Var x = tape.constant(batch.features);
            const Var loss = cross_entropy(forward(th, spec, x), batch.labels);
            const Gradients grads = tape.backward(loss);
            theta = adam_step(adam, theta, grads.of(th));
            if (stats) stats->steps += 1;
        }
    }
    out.data = theta.values();
    if (stats) stats->final_loss = dataset_loss(out, spec, task);
    return out;
}

double accuracy_from_logits(const Tensor & logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) throw DimensionError("accuracy: logits/labels mismatch");
    if (labels.empty()) throw ContractError("accuracy: empty split");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = logits.data().subspan(r * c, c);
        const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        if (best == labels[r]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

double evaluate(const ParamVector & params, const MlpSpec & spec, const Dataset & data) {
    if (!data.labeled() || data.rows() == 0) throw ContractError("evaluate: needs a non-empty labeled split");
    return accuracy_from_logits(forward(params, spec, data.features), data.labels);
}

} // namespace csm
