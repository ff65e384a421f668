#pragma once

#include "csm/tensor.h"

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <deque>
#include <vector>

namespace csm {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while its tape lives.
class Var {
public:
    Var() = default;

    const Tensor & value() const;
    const Shape & shape() const { return value().shape(); }
    std::size_t numel() const { return value().numel(); }
    bool requires_grad() const;
    std::size_t id() const { return id_; }
    Tape * tape() const { return tape_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape * tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape * tape_ = nullptr;
    std::size_t id_ = 0;
};

// Gradients of a scalar loss with respect to every requires-grad leaf of a tape.
class Gradients {
public:
    bool has(const Var & v) const;
    // Gradient of `v`; a leaf the loss does not depend on gets zeros.
    Tensor of(const Var & v) const;
    std::vector<std::size_t> leaf_ids() const;

private:
    friend class Tape;
    std::vector<std::optional<Tensor>> grads_;
    std::vector<bool> tracked_;
};

// Single-owner record of executed ops in execution order. backward() walks it in reverse.
class Tape {
public:
    // Maps the incoming gradient (and the node's own value) to one gradient per parent.
    // An empty tensor means "no contribution".
    using Backward = std::function<std::vector<Tensor>(const Tensor & grad_out, const Tensor & out)>;

    Tape() = default;
    Tape(const Tape &) = delete;
    Tape & operator=(const Tape &) = delete;
    Tape(Tape &&) = delete;
    Tape & operator=(Tape &&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // Used by primitive ops. The backward closure is dropped when no parent requires grad.
    Var record(Tensor value, std::vector<Var> parents, Backward backward);

    const Tensor & value_of(std::size_t id) const { return nodes_.at(id).value; }

    Gradients backward(const Var & loss) const;

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    friend class Var;

    struct Node {
        Tensor value;
        std::vector<std::size_t> parents;
        Backward backward;
        bool requires_grad = false;
        bool is_leaf = false;
    };

    // deque keeps node addresses stable, so closures may hold pointers to parent values.
    std::deque<Node> nodes_;
};

enum class UnaryKind { neg, sigmoid, log, exp, relu };
enum class BinaryKind { add, sub, mul, div };
enum class ReduceKind { sum, mean };

// Broadcasting is limited to equal shapes or a single-element operand against any shape.
Var elementwise(BinaryKind kind, const Var & a, const Var & b);
Var elementwise(UnaryKind kind, const Var & a);

Var add(const Var & a, const Var & b);
Var sub(const Var & a, const Var & b);
Var mul(const Var & a, const Var & b);
Var div(const Var & a, const Var & b);
Var neg(const Var & a);
Var sigmoid(const Var & a);
Var log(const Var & a);
Var exp(const Var & a);
Var relu(const Var & a);

Var scale(const Var & a, double c);
Var add_scalar(const Var & a, double c);
// max(a, lo) elementwise; gradient passes only where a > lo.
Var clamp_min(const Var & a, double lo);

Var operator+(const Var & a, const Var & b);
Var operator-(const Var & a, const Var & b);
Var operator*(const Var & a, const Var & b);
Var operator/(const Var & a, const Var & b);
Var operator-(const Var & a);
Var operator*(double c, const Var & a);
Var operator*(const Var & a, double c);
Var operator+(const Var & a, double c);

Var matmul(const Var & a, const Var & b);

Var reduce(ReduceKind kind, const Var & a, std::optional<std::size_t> axis = std::nullopt);
Var sum(const Var & a, std::optional<std::size_t> axis = std::nullopt);
Var mean(const Var & a, std::optional<std::size_t> axis = std::nullopt);

// Max-subtracted softmax / log-softmax along `axis`.
Var softmax(const Var & a, std::size_t axis);
Var log_softmax(const Var & a, std::size_t axis);

Var reshape(const Var & a, Shape shape);
// Contiguous run of `count` elements of the flattened input starting at `offset`, as a 1-D tensor.
Var slice(const Var & a, std::size_t offset, std::size_t count);
// Flattened inputs joined end to end.
Var concat(std::span<const Var> parts);

// Mean negative log-likelihood of integer labels under row-wise log-probabilities [N x C].
Var nll_loss(const Var & log_probs, std::span<const int> labels);

// out[j] = coeffs[k] * v[j] for j in segment k; segment k spans [offsets[k], offsets[k+1]) and
// the final segment ends at v.numel(). `v` and `coeffs` are read flat.
Var scale_segments(const Var & v, const Var & coeffs, std::span<const std::size_t> offsets);

// Plain-value helpers shared by ops and callers that do not need a tape.
Tensor softmax_values(const Tensor & t, std::size_t axis);
Tensor matmul_values(const Tensor & a, const Tensor & b);

} // namespace csm
