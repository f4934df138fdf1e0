#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation in execution order, so node ids are a
// topological order by construction. Var is a cheap handle (tape, id).
//
// Broadcasting follows the usual right-aligned rule: two extents are
// compatible when equal or when one of them is 1 (missing leading axes count
// as 1). Gradients flowing into a broadcast operand are summed over the
// broadcast axes.
//
// Non-differentiable points take subgradient 0: relu at 0 and
// maximum(x, c) at x == c.
//
// Debug builds (NDEBUG undefined) check every op output for NaN/Inf and throw
// NumericError; release builds skip the check.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qrvae/tensor.hpp"

namespace qrvae {

/// Trainable tensor owned by a layer; gradients accumulate into `grad`
/// until zero_grad().
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape(), 0.0) {}
    void zero_grad() { grad.fill(0.0); }
};

class Tape;

class Var {
public:
    Var() = default;

    const Tensor& value() const;
    /// Gradient slot of this node after backward(); throws when none was computed.
    const Tensor& grad() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t id() const noexcept { return id_; }
    Tape* tape() const noexcept { return tape_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

struct BackwardContext {
    const Tensor& output;
    const Tensor& output_grad;
    std::span<const Tensor* const> inputs;
    /// nullptr for inputs that do not require a gradient.
    std::span<Tensor* const> input_grads;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf that never receives a gradient.
    Var constant(Tensor value);
    /// Leaf whose gradient is kept on the tape (read through Var::grad()).
    Var variable(Tensor value);
    /// Leaf bound to a Parameter: reads its value in place, accumulates into its grad.
    Var parameter(Parameter& p);

    /// Append an op node. `backward` is dropped when no input requires a gradient.
    Var record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn backward);
    Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
        return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
    }

    /// Propagate d(loss)/d(node) to every node reachable from a scalar loss.
    /// May be called once per recording; reset() clears the tape.
    void backward(const Var& loss);
    void reset();

    std::size_t size() const noexcept { return nodes_.size(); }
    const Tensor& value(std::size_t id) const;
    const Tensor* grad(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    const char* op_name(std::size_t id) const { return nodes_.at(id).op; }

private:
    struct Node {
        const char* op = "";
        Tensor value;
        const Tensor* external = nullptr;
        Tensor grad;
        bool has_grad = false;
        Parameter* param = nullptr;
        bool requires_grad = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
    };

    const Tensor& node_value(const Node& n) const { return n.external ? *n.external : n.value; }
    Tensor* grad_slot(std::size_t id);
    void check_owned(const Var& v) const;

    std::deque<Node> nodes_;  // stable addresses: value() references survive later pushes
    bool backward_done_ = false;
};

// ---- the op set -----------------------------------------------------------

Shape broadcast_shapes(const Shape& a, const Shape& b);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// [m,k] x [k,n] -> [m,n]
Var matmul(const Var& a, const Var& b);
Var exp(const Var& a);
/// Throws NumericError on non-positive entries.
Var log(const Var& a);
Var square(const Var& a);
/// Throws NumericError on non-positive entries.
Var sqrt(const Var& a);
Var neg(const Var& a);
/// Sum of all entries (rank-0 result); sequential reduction order.
Var sum(const Var& a);
/// Sum along one axis (axis removed).
Var sum(const Var& a, std::size_t axis);
Var mean(const Var& a);
Var broadcast_to(const Var& a, const Shape& shape);
Var reshape(const Var& a, const Shape& shape);
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length);
Var concat(std::span<const Var> parts, std::size_t axis);
Var relu(const Var& a);
Var sigmoid(const Var& a);
/// Elementwise max(a, c) for a constant c.
Var maximum(const Var& a, double c);

// Conveniences composed from or equivalent to the set above.
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var clamp(const Var& a, double lo, double hi);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

}  // namespace qrvae
