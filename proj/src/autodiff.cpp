#include "qrvae/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "gemm.hpp"

namespace qrvae {

// ---- Var / Tape -------------------------------------------------------------

const Tensor& Var::value() const {
    if (!tape_) throw std::logic_error("use of an unbound Var");
    return tape_->value(id_);
}

const Tensor& Var::grad() const {
    if (!tape_) throw std::logic_error("use of an unbound Var");
    const Tensor* g = tape_->grad(id_);
    if (!g) throw std::logic_error("no gradient recorded for node " + std::to_string(id_));
    return *g;
}

Var Tape::constant(Tensor value) {
    if (backward_done_) throw std::logic_error("tape already differentiated; call reset() first");
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
    if (backward_done_) throw std::logic_error("tape already differentiated; call reset() first");
    Node n;
    n.op = "variable";
    n.value = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
    if (backward_done_) throw std::logic_error("tape already differentiated; call reset() first");
    Node n;
    n.op = "parameter";
    n.external = &p.value;
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(const Var& v) const {
    if (v.tape() != this) throw std::logic_error("Var belongs to a different tape");
    if (v.id() >= nodes_.size()) throw std::logic_error("Var id past the end of the tape");
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    if (backward_done_) throw std::logic_error("tape already differentiated; call reset() first");
#ifndef NDEBUG
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
#endif
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.inputs.reserve(inputs.size());
    for (const auto& in : inputs) {
        check_owned(in);
        n.inputs.push_back(in.id());
        n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(std::size_t id) const { return node_value(nodes_.at(id)); }

const Tensor* Tape::grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.param) return &n.param->grad;
    return n.has_grad ? &n.grad : nullptr;
}

Tensor* Tape::grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.param) return &n.param->grad;
    if (!n.has_grad) {
        n.grad = Tensor(node_value(n).shape(), 0.0);
        n.has_grad = true;
    }
    return &n.grad;
}

void Tape::backward(const Var& loss) {
    check_owned(loss);
    if (backward_done_) throw std::logic_error("backward() called twice on the same tape without reset()");
    if (value(loss.id()).size() != 1 || value(loss.id()).rank() != 0)
        throw ShapeError("backward() needs a scalar loss, got shape " + shape_string(value(loss.id()).shape()));
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) return;

    Tensor* seed = grad_slot(loss.id());
    (*seed)[0] += 1.0;

    std::vector<const Tensor*> in_values;
    std::vector<Tensor*> in_grads;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backward) continue;
        if (!n.has_grad && !n.param) continue;
        in_values.clear();
        in_grads.clear();
        for (auto id : n.inputs) {
            in_values.push_back(&value(id));
            in_grads.push_back(grad_slot(id));
        }
        const Tensor& g = n.param ? n.param->grad : n.grad;
        n.backward(BackwardContext{node_value(n), g, in_values, in_grads});
    }
}

void Tape::reset() {
    nodes_.clear();
    backward_done_ = false;
}

// ---- broadcasting -------------------------------------------------------------

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
        out[i] = std::max(da, db);
    }
    return out;
}

namespace {

/// Flat offsets into `src` for every element of `out` under broadcasting.
std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
    const std::size_t rank = out.size();
    const std::size_t pad = rank - src.size();
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t i = rank; i-- > pad;) {
        const std::size_t d = src[i - pad];
        stride[i] = d == 1 ? 0 : s;
        s *= d;
    }
    const std::size_t total = shape_size(out);
    std::vector<std::size_t> index(total);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t offset = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
        index[flat] = offset;
        for (std::size_t ax = rank; ax-- > 0;) {
            ++counter[ax];
            offset += stride[ax];
            if (counter[ax] < out[ax]) break;
            offset -= stride[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    return index;
}

struct BinaryPlan {
    Shape out;
    bool same = false;
    std::vector<std::size_t> ia, ib;
};

BinaryPlan plan_binary(const Shape& a, const Shape& b) {
    BinaryPlan p;
    if (a == b) {
        p.out = a;
        p.same = true;
        return p;
    }
    p.out = broadcast_shapes(a, b);
    p.ia = broadcast_index(a, p.out);
    p.ib = broadcast_index(b, p.out);
    return p;
}

template <class F>
Tensor binary_forward(const Tensor& a, const Tensor& b, const BinaryPlan& p, F f) {
    Tensor out(p.out);
    auto o = out.data();
    if (p.same) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(a[i], b[i]);
    } else {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(a[p.ia[i]], b[p.ib[i]]);
    }
    return out;
}

Var unary(const char* name, const Var& a, Tensor out, std::function<double(double x, double y)> dydx) {
    return a.tape()->record(name, std::move(out), {a}, [dydx = std::move(dydx)](const BackwardContext& c) {
        Tensor* ga = c.input_grads[0];
        if (!ga) return;
        const auto& x = *c.inputs[0];
        for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += c.output_grad[i] * dydx(x[i], c.output[i]);
    });
}

template <class F>
Tensor map(const Tensor& a, F f) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

}  // namespace

// ---- elementwise binary -------------------------------------------------------

Var add(const Var& a, const Var& b) {
    auto plan = std::make_shared<BinaryPlan>(plan_binary(a.shape(), b.shape()));
    Tensor out = binary_forward(a.value(), b.value(), *plan, [](double x, double y) { return x + y; });
    return a.tape()->record("add", std::move(out), {a, b}, [plan](const BackwardContext& c) {
        const auto& g = c.output_grad;
        for (int k = 0; k < 2; ++k) {
            Tensor* gi = c.input_grads[k];
            if (!gi) continue;
            const auto& idx = k == 0 ? plan->ia : plan->ib;
            if (plan->same)
                for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
            else
                for (std::size_t i = 0; i < g.size(); ++i) (*gi)[idx[i]] += g[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    auto plan = std::make_shared<BinaryPlan>(plan_binary(a.shape(), b.shape()));
    Tensor out = binary_forward(a.value(), b.value(), *plan, [](double x, double y) { return x - y; });
    return a.tape()->record("sub", std::move(out), {a, b}, [plan](const BackwardContext& c) {
        const auto& g = c.output_grad;
        for (int k = 0; k < 2; ++k) {
            Tensor* gi = c.input_grads[k];
            if (!gi) continue;
            const double sign = k == 0 ? 1.0 : -1.0;
            const auto& idx = k == 0 ? plan->ia : plan->ib;
            if (plan->same)
                for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += sign * g[i];
            else
                for (std::size_t i = 0; i < g.size(); ++i) (*gi)[idx[i]] += sign * g[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    auto plan = std::make_shared<BinaryPlan>(plan_binary(a.shape(), b.shape()));
    Tensor out = binary_forward(a.value(), b.value(), *plan, [](double x, double y) { return x * y; });
    return a.tape()->record("mul", std::move(out), {a, b}, [plan](const BackwardContext& c) {
        const auto& g = c.output_grad;
        const auto& x = *c.inputs[0];
        const auto& y = *c.inputs[1];
        Tensor* gx = c.input_grads[0];
        Tensor* gy = c.input_grads[1];
        if (plan->same) {
            if (gx)
                for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * y[i];
            if (gy)
                for (std::size_t i = 0; i < g.size(); ++i) (*gy)[i] += g[i] * x[i];
        } else {
            if (gx)
                for (std::size_t i = 0; i < g.size(); ++i) (*gx)[plan->ia[i]] += g[i] * y[plan->ib[i]];
            if (gy)
                for (std::size_t i = 0; i < g.size(); ++i) (*gy)[plan->ib[i]] += g[i] * x[plan->ia[i]];
        }
    });
}

Var matmul(const Var& a, const Var& b) {
    const auto& A = a.value();
    const auto& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
        throw ShapeError("matmul shape mismatch: " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor out(Shape{m, n});
    detail::gemm(false, false, m, n, k, A.data().data(), B.data().data(), out.data().data(), false);
    return a.tape()->record("matmul", std::move(out), {a, b}, [m, k, n](const BackwardContext& c) {
        const double* g = c.output_grad.data().data();
        if (Tensor* ga = c.input_grads[0])  // dA = G B^T
            detail::gemm(false, true, m, k, n, g, c.inputs[1]->data().data(), ga->data().data(), true);
        if (Tensor* gb = c.input_grads[1])  // dB = A^T G
            detail::gemm(true, false, k, n, m, c.inputs[0]->data().data(), g, gb->data().data(), true);
    });
}

// ---- elementwise unary ----------------------------------------------------------

Var exp(const Var& a) {
    return unary("exp", a, map(a.value(), [](double x) { return std::exp(x); }),
                 [](double, double y) { return y; });
}

Var log(const Var& a) {
    for (double x : a.value().data())
        if (!(x > 0.0)) throw NumericError("log of non-positive value " + std::to_string(x));
    return unary("log", a, map(a.value(), [](double x) { return std::log(x); }),
                 [](double x, double) { return 1.0 / x; });
}

Var square(const Var& a) {
    return unary("square", a, map(a.value(), [](double x) { return x * x; }),
                 [](double x, double) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
    for (double x : a.value().data())
        if (!(x > 0.0)) throw NumericError("sqrt of non-positive value " + std::to_string(x));
    return unary("sqrt", a, map(a.value(), [](double x) { return std::sqrt(x); }),
                 [](double, double y) { return 0.5 / y; });
}

Var neg(const Var& a) {
    return unary("neg", a, map(a.value(), [](double x) { return -x; }), [](double, double) { return -1.0; });
}

Var relu(const Var& a) {
    return unary("relu", a, map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }),
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
    auto s = [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    };
    return unary("sigmoid", a, map(a.value(), s), [](double, double y) { return y * (1.0 - y); });
}

Var maximum(const Var& a, double c) {
    return unary("maximum", a, map(a.value(), [c](double x) { return x > c ? x : c; }),
                 [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

Var scale(const Var& a, double c) {
    return unary("scale", a, map(a.value(), [c](double x) { return c * x; }), [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
    return unary("add_scalar", a, map(a.value(), [c](double x) { return x + c; }),
                 [](double, double) { return 1.0; });
}

Var clamp(const Var& a, double lo, double hi) {
    if (lo > hi) throw std::invalid_argument("clamp bounds reversed");
    // min(x, hi) = -max(-x, -hi)
    return neg(maximum(neg(maximum(a, lo)), -hi));
}

// ---- reductions and shape ops -----------------------------------------------------

Var sum(const Var& a) {
    double s = 0.0;
    for (double x : a.value().data()) s += x;
    return a.tape()->record("sum", Tensor::scalar(s), {a}, [](const BackwardContext& c) {
        Tensor* ga = c.input_grads[0];
        if (!ga) return;
        const double g = c.output_grad[0];
        for (auto& x : ga->data()) x += g;
    });
}

Var sum(const Var& a, std::size_t axis) {
    const Shape& in = a.shape();
    if (axis >= in.size()) throw ShapeError("sum axis " + std::to_string(axis) + " out of range");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
    for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
    const std::size_t n = in[axis];
    Shape out_shape;
    for (std::size_t i = 0; i < in.size(); ++i)
        if (i != axis) out_shape.push_back(in[i]);
    Tensor out(out_shape, 0.0);
    const auto& x = a.value();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * n + j) * inner + i];
    return a.tape()->record("sum_axis", std::move(out), {a}, [outer, n, inner](const BackwardContext& c) {
        Tensor* ga = c.input_grads[0];
        if (!ga) return;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < inner; ++i) (*ga)[(o * n + j) * inner + i] += c.output_grad[o * inner + i];
    });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var broadcast_to(const Var& a, const Shape& shape) {
    if (broadcast_shapes(a.shape(), shape) != shape)
        throw ShapeError("cannot broadcast " + shape_string(a.shape()) + " to " + shape_string(shape));
    auto index = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.shape(), shape));
    Tensor out(shape);
    const auto& x = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[(*index)[i]];
    return a.tape()->record("broadcast", std::move(out), {a}, [index](const BackwardContext& c) {
        Tensor* ga = c.input_grads[0];
        if (!ga) return;
        for (std::size_t i = 0; i < c.output_grad.size(); ++i) (*ga)[(*index)[i]] += c.output_grad[i];
    });
}

Var reshape(const Var& a, const Shape& shape) {
    Tensor out = a.value().reshaped(shape);
    return a.tape()->record("reshape", std::move(out), {a}, [](const BackwardContext& c) {
        Tensor* ga = c.input_grads[0];
        if (!ga) return;
        for (std::size_t i = 0; i < c.output_grad.size(); ++i) (*ga)[i] += c.output_grad[i];
    });
}

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length) {
    const Shape& in = a.shape();
    if (axis >= in.size()) throw ShapeError("slice axis out of range");
    if (length == 0 || start + length > in[axis])
        throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds extent " + std::to_string(in[axis]));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
    for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
    const std::size_t n = in[axis];
    Shape out_shape = in;
    out_shape[axis] = length;
    Tensor out(out_shape);
    const auto& x = a.value();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((o * n + start) * inner), length * inner,
                    out.data().begin() + static_cast<std::ptrdiff_t>(o * length * inner));
    return a.tape()->record("slice", std::move(out), {a}, [=](const BackwardContext& c) {
        Tensor* ga = c.input_grads[0];
        if (!ga) return;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < length * inner; ++i)
                (*ga)[(o * n + start) * inner + i] += c.output_grad[o * length * inner + i];
    });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw ShapeError("concat axis out of range");
    std::vector<std::size_t> extents;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != first[i])
                throw ShapeError("concat shape mismatch: " + shape_string(first) + " vs " + shape_string(s));
        extents.push_back(s[axis]);
        total += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
    for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
    Shape out_shape = first;
    out_shape[axis] = total;
    Tensor out(out_shape);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& x = parts[p].value();
        const std::size_t len = extents[p];
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < len * inner; ++i) out[(o * total + offset) * inner + i] = x[o * len * inner + i];
        offset += len;
    }
    return parts[0].tape()->record("concat", std::move(out), parts, [=](const BackwardContext& c) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < extents.size(); ++p) {
            const std::size_t len = extents[p];
            if (Tensor* gp = c.input_grads[p])
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < len * inner; ++i)
                        (*gp)[o * len * inner + i] += c.output_grad[(o * total + off) * inner + i];
            off += len;
        }
    });
}

}  // namespace qrvae
