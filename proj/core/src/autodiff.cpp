#include "csm/autodiff.h"

#include "csm/errors.h"

#include <algorithm>
#include <cmath>
#include <limits>

namespace csm {

// ---------------------------------------------------------------------------
// Var / Gradients / Tape

const Tensor & Var::value() const {
    if (!tape_) throw ContractError("use of an empty Var");
    return tape_->value_of(id_);
}

bool Var::requires_grad() const {
    return tape_ && tape_->nodes_.at(id_).requires_grad;
}

bool Gradients::has(const Var & v) const {
    return v.id() < grads_.size() && grads_[v.id()].has_value();
}

Tensor Gradients::of(const Var & v) const {
    if (v.id() >= tracked_.size() || !tracked_[v.id()]) {
        throw ContractError("gradient requested for a value that is not a requires-grad leaf");
    }
    if (grads_[v.id()]) return *grads_[v.id()];
    return Tensor::zeros(v.shape());
}

std::vector<std::size_t> Gradients::leaf_ids() const {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < grads_.size(); ++i) {
        if (grads_[i]) ids.push_back(i);
    }
    return ids;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.is_leaf = true;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> parents, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.parents.reserve(parents.size());
    for (const auto & p : parents) {
        if (p.tape() != this) throw ContractError("operands recorded on different tapes");
        n.parents.push_back(p.id());
        n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var & loss) const {
    if (loss.tape() != this) throw ContractError("loss belongs to a different tape");
    if (nodes_.empty()) throw ContractError("backward on an empty tape");
    if (loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_to_string(loss.shape()));
    }

    std::vector<std::optional<Tensor>> grads(nodes_.size());
    grads[loss.id()] = Tensor::ones(loss.shape());

    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        const Node & node = nodes_[i];
        if (!grads[i] || node.is_leaf || !node.backward) continue;
        std::vector<Tensor> parent_grads = node.backward(*grads[i], node.value);
        for (std::size_t k = 0; k < node.parents.size(); ++k) {
            const std::size_t p = node.parents[k];
            if (!nodes_[p].requires_grad || k >= parent_grads.size() || parent_grads[k].numel() == 0) continue;
            Tensor & pg = parent_grads[k];
            if (!grads[p]) {
                grads[p] = std::move(pg).reshaped(nodes_[p].value.shape());
            } else {
                auto dst = grads[p]->data();
                auto src = pg.data();
                for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
            }
        }
        grads[i].reset();
    }

    Gradients out;
    out.grads_.resize(nodes_.size());
    out.tracked_.resize(nodes_.size(), false);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].is_leaf && nodes_[i].requires_grad) {
            out.tracked_[i] = true;
            if (grads[i]) out.grads_[i] = std::move(grads[i]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

Tape * common_tape(const Var & a, const Var & b) {
    if (!a.valid() || !b.valid()) throw ContractError("use of an empty Var");
    if (a.tape() != b.tape()) throw ContractError("operands recorded on different tapes");
    return a.tape();
}

Tape * tape_of(const Var & a) {
    if (!a.valid()) throw ContractError("use of an empty Var");
    return a.tape();
}

struct Broadcast {
    Shape shape;
    bool a_scalar = false;
    bool b_scalar = false;
};

Broadcast broadcast_shapes(const Tensor & a, const Tensor & b, const char * op) {
    Broadcast bc;
    if (a.shape() == b.shape()) {
        bc.shape = a.shape();
    } else if (a.numel() == 1 && b.numel() == 1) {
        bc.shape = a.rank() >= b.rank() ? a.shape() : b.shape();
    } else if (a.numel() == 1) {
        bc.shape = b.shape();
        bc.a_scalar = true;
    } else if (b.numel() == 1) {
        bc.shape = a.shape();
        bc.b_scalar = true;
    } else {
        throw DimensionError(std::string(op) + ": cannot broadcast " + shape_to_string(a.shape()) + " with " +
                             shape_to_string(b.shape()));
    }
    return bc;
}

// Reduces a full-size gradient to the operand's shape (a sum when the operand was broadcast).
Tensor reduce_to(Tensor g, bool was_scalar, const Shape & operand_shape) {
    if (!was_scalar) return g;
    double s = 0.0;
    for (double v : g.data()) s += v;
    return Tensor(operand_shape, std::vector<double>{s});
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t len = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape & shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(shape));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

constexpr double kSigmoidHi = 1.0 - std::numeric_limits<double>::epsilon() / 2;  // largest double below 1
constexpr double kSigmoidLo = std::numeric_limits<double>::min();

double stable_sigmoid(double x) {
    double y;
    if (x >= 0) {
        y = 1.0 / (1.0 + std::exp(-x));
    } else {
        const double e = std::exp(x);
        y = e / (1.0 + e);
    }
    y = std::clamp(y, kSigmoidLo, kSigmoidHi);
    // Keep sigmoid(x) > 0.5 exactly when x > 0, even where 1 + e^-x rounds to 2.
    if (x > 0.0) return std::max(y, std::nextafter(0.5, 1.0));
    if (x < 0.0) return std::min(y, std::nextafter(0.5, 0.0));
    return y;
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise

Var elementwise(BinaryKind kind, const Var & a, const Var & b) {
    Tape * tape = common_tape(a, b);
    const Tensor & A = a.value();
    const Tensor & B = b.value();
    const char * names[] = {"add", "sub", "mul", "div"};
    const Broadcast bc = broadcast_shapes(A, B, names[static_cast<int>(kind)]);
    const std::size_t n = shape_numel(bc.shape);

    Tensor out(bc.shape);
    auto o = out.data();
    auto av = A.data();
    auto bv = B.data();
    const bool as = bc.a_scalar, bs = bc.b_scalar;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[as ? 0 : i];
        const double y = bv[bs ? 0 : i];
        switch (kind) {
        case BinaryKind::add: o[i] = x + y; break;
        case BinaryKind::sub: o[i] = x - y; break;
        case BinaryKind::mul: o[i] = x * y; break;
        case BinaryKind::div:
            if (y == 0.0) throw DomainError("div: division by zero");
            o[i] = x / y;
            break;
        }
    }

    const Tensor * pa = &A;
    const Tensor * pb = &B;
    return tape->record(std::move(out), {a, b}, [kind, pa, pb, as, bs](const Tensor & g, const Tensor &) {
        const std::size_t n = g.numel();
        Tensor ga(g.shape()), gb(g.shape());
        auto gv = g.data();
        auto av = pa->data();
        auto bv = pb->data();
        for (std::size_t i = 0; i < n; ++i) {
            const double x = av[as ? 0 : i];
            const double y = bv[bs ? 0 : i];
            switch (kind) {
            case BinaryKind::add: ga[i] = gv[i]; gb[i] = gv[i]; break;
            case BinaryKind::sub: ga[i] = gv[i]; gb[i] = -gv[i]; break;
            case BinaryKind::mul: ga[i] = gv[i] * y; gb[i] = gv[i] * x; break;
            case BinaryKind::div: ga[i] = gv[i] / y; gb[i] = -gv[i] * x / (y * y); break;
            }
        }
        return std::vector<Tensor>{reduce_to(std::move(ga), as, pa->shape()), reduce_to(std::move(gb), bs, pb->shape())};
    });
}

Var elementwise(UnaryKind kind, const Var & a) {
    Tape * tape = tape_of(a);
    const Tensor & A = a.value();
    Tensor out(A.shape());
    auto o = out.data();
    auto x = A.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        switch (kind) {
        case UnaryKind::neg: o[i] = -x[i]; break;
        case UnaryKind::sigmoid: o[i] = stable_sigmoid(x[i]); break;
        case UnaryKind::log:
            if (!(x[i] > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(x[i]));
            o[i] = std::log(x[i]);
            break;
        case UnaryKind::exp:
            o[i] = std::exp(x[i]);
            if (!std::isfinite(o[i])) throw DomainError("exp: overflow at " + std::to_string(x[i]));
            break;
        case UnaryKind::relu: o[i] = x[i] > 0.0 ? x[i] : 0.0; break;
        }
    }
    const Tensor * pa = &A;
    return tape->record(std::move(out), {a}, [kind, pa](const Tensor & g, const Tensor & y) {
        Tensor ga(g.shape());
        auto gv = g.data();
        auto x = pa->data();
        auto yv = y.data();
        for (std::size_t i = 0; i < gv.size(); ++i) {
            switch (kind) {
            case UnaryKind::neg: ga[i] = -gv[i]; break;
            case UnaryKind::sigmoid: ga[i] = gv[i] * yv[i] * (1.0 - yv[i]); break;
            case UnaryKind::log: ga[i] = gv[i] / x[i]; break;
            case UnaryKind::exp: ga[i] = gv[i] * yv[i]; break;
            case UnaryKind::relu: ga[i] = x[i] > 0.0 ? gv[i] : 0.0; break;
            }
        }
        return std::vector<Tensor>{std::move(ga)};
    });
}

Var add(const Var & a, const Var & b) { return elementwise(BinaryKind::add, a, b); }
Var sub(const Var & a, const Var & b) { return elementwise(BinaryKind::sub, a, b); }
Var mul(const Var & a, const Var & b) { return elementwise(BinaryKind::mul, a, b); }
Var div(const Var & a, const Var & b) { return elementwise(BinaryKind::div, a, b); }
Var neg(const Var & a) { return elementwise(UnaryKind::neg, a); }
Var sigmoid(const Var & a) { return elementwise(UnaryKind::sigmoid, a); }
Var log(const Var & a) { return elementwise(UnaryKind::log, a); }
Var exp(const Var & a) { return elementwise(UnaryKind::exp, a); }
Var relu(const Var & a) { return elementwise(UnaryKind::relu, a); }

Var scale(const Var & a, double c) {
    Tape * tape = tape_of(a);
    Tensor out = a.value();
    for (double & v : out.values()) v *= c;
    return tape->record(std::move(out), {a}, [c](const Tensor & g, const Tensor &) {
        Tensor ga = g;
        for (double & v : ga.values()) v *= c;
        return std::vector<Tensor>{std::move(ga)};
    });
}

Var add_scalar(const Var & a, double c) {
    Tape * tape = tape_of(a);
    Tensor out = a.value();
    for (double & v : out.values()) v += c;
    return tape->record(std::move(out), {a}, [](const Tensor & g, const Tensor &) { return std::vector<Tensor>{g}; });
}

Var clamp_min(const Var & a, double lo) {
    Tape * tape = tape_of(a);
    const Tensor & A = a.value();
    Tensor out = A;
    for (double & v : out.values()) v = std::max(v, lo);
    const Tensor * pa = &A;
    return tape->record(std::move(out), {a}, [pa, lo](const Tensor & g, const Tensor &) {
        Tensor ga(g.shape());
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = (*pa)[i] > lo ? g[i] : 0.0;
        return std::vector<Tensor>{std::move(ga)};
    });
}

Var operator+(const Var & a, const Var & b) { return add(a, b); }
Var operator-(const Var & a, const Var & b) { return sub(a, b); }
Var operator*(const Var & a, const Var & b) { return mul(a, b); }
Var operator/(const Var & a, const Var & b) { return div(a, b); }
Var operator-(const Var & a) { return neg(a); }
Var operator*(double c, const Var & a) { return scale(a, c); }
Var operator*(const Var & a, double c) { return scale(a, c); }
Var operator+(const Var & a, double c) { return add_scalar(a, c); }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul_values(const Tensor & a, const Tensor & b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                             shape_to_string(b.shape()));
    }
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor out(Shape{M, N});
    auto o = out.data();
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < M; ++i) {
        double * orow = o.data() + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double aik = av[i * K + k];
            if (aik == 0.0) continue;
            const double * brow = bv.data() + k * N;
            for (std::size_t j = 0; j < N; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

namespace {

Tensor transpose2d(const Tensor & t) {
    const std::size_t R = t.dim(0), C = t.dim(1);
    Tensor out(Shape{C, R});
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) out[c * R + r] = t[r * C + c];
    return out;
}

} // namespace

Var matmul(const Var & a, const Var & b) {
    Tape * tape = common_tape(a, b);
    const Tensor & A = a.value();
    const Tensor & B = b.value();
    Tensor out = matmul_values(A, B);
    const Tensor * pa = &A;
    const Tensor * pb = &B;
    const bool need_a = a.requires_grad();
    const bool need_b = b.requires_grad();
    return tape->record(std::move(out), {a, b}, [pa, pb, need_a, need_b](const Tensor & g, const Tensor &) {
        Tensor ga, gb;
        if (need_a) ga = matmul_values(g, transpose2d(*pb));
        if (need_b) gb = matmul_values(transpose2d(*pa), g);
        return std::vector<Tensor>{std::move(ga), std::move(gb)};
    });
}

// ---------------------------------------------------------------------------
// Reductions

Var reduce(ReduceKind kind, const Var & a, std::optional<std::size_t> axis) {
    Tape * tape = tape_of(a);
    const Tensor & A = a.value();
    if (A.numel() == 0) throw DomainError("reduce over an empty tensor");

    if (!axis) {
        double s = 0.0;
        for (double v : A.data()) s += v;
        const double n = static_cast<double>(A.numel());
        const double factor = kind == ReduceKind::mean ? 1.0 / n : 1.0;
        if (kind == ReduceKind::mean) s /= n;
        const Shape in_shape = A.shape();
        return tape->record(Tensor::scalar(s), {a}, [factor, in_shape](const Tensor & g, const Tensor &) {
            return std::vector<Tensor>{Tensor(in_shape, g.item() * factor)};
        });
    }

    const AxisSplit s = split_axis(A.shape(), *axis);
    Shape out_shape = A.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(*axis));
    Tensor out(out_shape);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.len; ++k)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += A[(o * s.len + k) * s.inner + i];
    const double factor = kind == ReduceKind::mean ? 1.0 / static_cast<double>(s.len) : 1.0;
    if (kind == ReduceKind::mean) {
        for (double & v : out.values()) v *= factor;
    }
    const Shape in_shape = A.shape();
    return tape->record(std::move(out), {a}, [s, factor, in_shape](const Tensor & g, const Tensor &) {
        Tensor ga(in_shape);
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t k = 0; k < s.len; ++k)
                for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.len + k) * s.inner + i] = g[o * s.inner + i] * factor;
        return std::vector<Tensor>{std::move(ga)};
    });
}

Var sum(const Var & a, std::optional<std::size_t> axis) { return reduce(ReduceKind::sum, a, axis); }
Var mean(const Var & a, std::optional<std::size_t> axis) { return reduce(ReduceKind::mean, a, axis); }

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax_values(const Tensor & t, std::size_t axis) {
    const AxisSplit s = split_axis(t.shape(), axis);
    Tensor out(t.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto idx = [&](std::size_t k) { return (o * s.len + k) * s.inner + i; };
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, t[idx(k)]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.len; ++k) {
                const double e = std::exp(t[idx(k)] - mx);
                out[idx(k)] = e;
                z += e;
            }
            for (std::size_t k = 0; k < s.len; ++k) out[idx(k)] /= z;
        }
    }
    return out;
}

Var softmax(const Var & a, std::size_t axis) {
    Tape * tape = tape_of(a);
    if (!a.value().all_finite()) throw DomainError("softmax: non-finite input");
    Tensor out = softmax_values(a.value(), axis);
    const AxisSplit s = split_axis(a.shape(), axis);
    return tape->record(std::move(out), {a}, [s](const Tensor & g, const Tensor & y) {
        Tensor ga(y.shape());
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                auto idx = [&](std::size_t k) { return (o * s.len + k) * s.inner + i; };
                double dot = 0.0;
                for (std::size_t k = 0; k < s.len; ++k) dot += g[idx(k)] * y[idx(k)];
                for (std::size_t k = 0; k < s.len; ++k) ga[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
            }
        }
        return std::vector<Tensor>{std::move(ga)};
    });
}

Var log_softmax(const Var & a, std::size_t axis) {
    Tape * tape = tape_of(a);
    const Tensor & A = a.value();
    if (!A.all_finite()) throw DomainError("log_softmax: non-finite input");
    const AxisSplit s = split_axis(A.shape(), axis);
    Tensor out(A.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto idx = [&](std::size_t k) { return (o * s.len + k) * s.inner + i; };
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, A[idx(k)]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.len; ++k) z += std::exp(A[idx(k)] - mx);
            const double lz = mx + std::log(z);
            for (std::size_t k = 0; k < s.len; ++k) out[idx(k)] = A[idx(k)] - lz;
        }
    }
    return tape->record(std::move(out), {a}, [s](const Tensor & g, const Tensor & y) {
        Tensor ga(y.shape());
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                auto idx = [&](std::size_t k) { return (o * s.len + k) * s.inner + i; };
                double gs = 0.0;
                for (std::size_t k = 0; k < s.len; ++k) gs += g[idx(k)];
                for (std::size_t k = 0; k < s.len; ++k) ga[idx(k)] = g[idx(k)] - std::exp(y[idx(k)]) * gs;
            }
        }
        return std::vector<Tensor>{std::move(ga)};
    });
}

// ---------------------------------------------------------------------------
// Structural

Var reshape(const Var & a, Shape shape) {
    Tape * tape = tape_of(a);
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: " + shape_to_string(a.shape()) + " to " + shape_to_string(shape));
    }
    const Shape in_shape = a.shape();
    return tape->record(a.value().reshaped(std::move(shape)), {a}, [in_shape](const Tensor & g, const Tensor &) {
        return std::vector<Tensor>{g.reshaped(in_shape)};
    });
}

Var slice(const Var & a, std::size_t offset, std::size_t count) {
    Tape * tape = tape_of(a);
    const Tensor & A = a.value();
    if (offset + count > A.numel()) {
        throw DimensionError("slice [" + std::to_string(offset) + ", " + std::to_string(offset + count) +
                             ") exceeds " + std::to_string(A.numel()) + " elements");
    }
    auto first = A.values().begin() + static_cast<std::ptrdiff_t>(offset);
    Tensor out(Shape{count}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count)));
    const Shape in_shape = A.shape();
    return tape->record(std::move(out), {a}, [in_shape, offset](const Tensor & g, const Tensor &) {
        Tensor ga(in_shape);
        std::copy(g.values().begin(), g.values().end(), ga.values().begin() + static_cast<std::ptrdiff_t>(offset));
        return std::vector<Tensor>{std::move(ga)};
    });
}

Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    Tape * tape = tape_of(parts[0]);
    std::vector<double> data;
    std::vector<std::size_t> sizes;
    std::vector<Var> parents(parts.begin(), parts.end());
    for (const auto & p : parts) {
        if (p.tape() != tape) throw ContractError("operands recorded on different tapes");
        data.insert(data.end(), p.value().values().begin(), p.value().values().end());
        sizes.push_back(p.numel());
    }
    const std::size_t n = data.size();
    return tape->record(Tensor(Shape{n}, std::move(data)), std::move(parents), [sizes](const Tensor & g, const Tensor &) {
        std::vector<Tensor> out;
        std::size_t off = 0;
        for (std::size_t sz : sizes) {
            auto first = g.values().begin() + static_cast<std::ptrdiff_t>(off);
            out.emplace_back(Shape{sz}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(sz)));
            off += sz;
        }
        return out;
    });
}

Var nll_loss(const Var & log_probs, std::span<const int> labels) {
    Tape * tape = tape_of(log_probs);
    const Tensor & L = log_probs.value();
    if (L.rank() != 2 || L.dim(0) != labels.size()) {
        throw DimensionError("nll_loss: log-probs " + shape_to_string(L.shape()) + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t N = L.dim(0), C = L.dim(1);
    if (N == 0) throw DomainError("nll_loss: empty batch");
    double s = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C) {
            throw DomainError("nll_loss: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(C) + ")");
        }
        s -= L[i * C + static_cast<std::size_t>(labels[i])];
    }
    s /= static_cast<double>(N);
    std::vector<int> lab(labels.begin(), labels.end());
    const Shape in_shape = L.shape();
    return tape->record(Tensor::scalar(s), {log_probs}, [lab = std::move(lab), in_shape, N, C](const Tensor & g, const Tensor &) {
        Tensor ga(in_shape);
        const double w = -g.item() / static_cast<double>(N);
        for (std::size_t i = 0; i < N; ++i) ga[i * C + static_cast<std::size_t>(lab[i])] = w;
        return std::vector<Tensor>{std::move(ga)};
    });
}

Var scale_segments(const Var & v, const Var & coeffs, std::span<const std::size_t> offsets) {
    Tape * tape = common_tape(v, coeffs);
    const Tensor & V = v.value();
    const Tensor & Cf = coeffs.value();
    if (offsets.size() != Cf.numel()) {
        throw DimensionError("scale_segments: " + std::to_string(Cf.numel()) + " coefficients for " +
                             std::to_string(offsets.size()) + " segments");
    }
    if (offsets.empty() || offsets[0] != 0) throw ContractError("scale_segments: first segment must start at 0");
    for (std::size_t k = 1; k < offsets.size(); ++k) {
        if (offsets[k] < offsets[k - 1] || offsets[k] > V.numel()) throw ContractError("scale_segments: bad offsets");
    }
    std::vector<std::size_t> bounds(offsets.begin(), offsets.end());
    bounds.push_back(V.numel());

    Tensor out(V.shape());
    for (std::size_t k = 0; k + 1 < bounds.size(); ++k)
        for (std::size_t j = bounds[k]; j < bounds[k + 1]; ++j) out[j] = Cf[k] * V[j];

    const Tensor * pv = &V;
    const Tensor * pc = &Cf;
    return tape->record(std::move(out), {v, coeffs}, [pv, pc, bounds = std::move(bounds)](const Tensor & g, const Tensor &) {
        Tensor gv(pv->shape());
        Tensor gc(pc->shape());
        for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
            double acc = 0.0;
            for (std::size_t j = bounds[k]; j < bounds[k + 1]; ++j) {
                gv[j] = g[j] * (*pc)[k];
                acc += g[j] * (*pv)[j];
            }
            gc[k] = acc;
        }
        return std::vector<Tensor>{std::move(gv), std::move(gc)};
    });
}

} // namespace csm
