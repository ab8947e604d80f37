#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "fdiff/errors.hpp"
#include "fdiff/rng.hpp"

namespace fdiff {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // sized lazily, accumulates across backward calls
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward; // pulls from this->grad into parents

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

/// RAII guard that suppresses graph recording (inference / finite differences).
class NoGradScope {
public:
    NoGradScope() : prev_(detail::grad_enabled_flag()) {
        detail::grad_enabled_flag() = false;
    }
    ~NoGradScope() { detail::grad_enabled_flag() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Dense N-dimensional double tensor. Copies are shallow (shared storage);
/// arithmetic produces fresh tensors. A tensor participates in the autodiff
/// graph when requires_grad is set on it or on any ancestor.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape) { return filled(shape, 0.0); }
    static Tensor ones(const Shape& shape) { return filled(shape, 1.0); }

    static Tensor constant(const Shape& shape, double v) { return filled(shape, v); }

    static Tensor gaussian(const Shape& shape, SeededRng& rng) {
        Tensor t = alloc(shape);
        for (auto& v : t.node_->value) v = rng.normal();
        return t;
    }

    static Tensor from_data(const Shape& shape, std::vector<double> data) {
        validate_shape(shape);
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw InvalidShape("from_data: " + shape_str(shape) + " does not hold " +
                               std::to_string(data.size()) + " values");
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = shape;
        t.node_->value = std::move(data);
        return t;
    }

    static Tensor scalar(double v) { return filled({1}, v); }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

    double* data() { return node_->value.data(); }
    const double* data() const { return node_->value.data(); }
    const std::vector<double>& values() const { return node_->value; }

    double item() const {
        if (numel() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }

    Tensor& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        return *this;
    }

    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }

    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    /// Deep copy of the values, detached from the graph.
    Tensor detach() const {
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = node_->shape;
        t.node_->value = node_->value;
        return t;
    }

    bool same_shape(const Tensor& o) const { return node_->shape == o.node_->shape; }

    std::shared_ptr<detail::Node> node() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty()) throw InvalidShape("empty shape");
        for (int d : shape)
            if (d < 1) throw InvalidShape("non-positive dimension in " + shape_str(shape));
    }

    static Tensor alloc(const Shape& shape) {
        validate_shape(shape);
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = shape;
        t.node_->value.resize(static_cast<std::size_t>(shape_numel(shape)));
        return t;
    }

    static Tensor filled(const Shape& shape, double v) {
        Tensor t = alloc(shape);
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline std::shared_ptr<Node> make_result(Shape shape, std::size_t n) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value.resize(n);
    return node;
}

// Records parents + backward only when recording is on and some parent needs it.
inline void attach(const std::shared_ptr<Node>& result,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward) {
    bool needs = false;
    if (grad_enabled_flag())
        for (const auto& p : parents)
            if (p->requires_grad) { needs = true; break; }
    if (!needs) return;
    result->requires_grad = true;
    result->parents = std::move(parents);
    result->backward = std::move(backward);
}

} // namespace detail

inline void check_finite(const Tensor& t, const char* what) {
    for (std::int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(t.data()[i]))
            throw NumericalFailure(std::string(what) + ": non-finite value at index " +
                                   std::to_string(i));
}

// ---------------------------------------------------------------------------
// Elementwise binary ops. Shapes must match exactly, or one operand may be a
// per-channel column [C,1,...,1] broadcast over the other's trailing spatial
// dims (the channel-weight pattern; general broadcasting is unsupported).
// ---------------------------------------------------------------------------

enum class BinaryOp { add, sub, mul };

namespace detail {

inline bool channel_column_over(const Shape& big, const Shape& small) {
    if (big.size() != small.size() || big.empty()) return false;
    if (big[0] != small[0]) return false;
    for (std::size_t i = 1; i < small.size(); ++i)
        if (small[i] != 1) return false;
    return true;
}

} // namespace detail

inline Tensor ew_binary(const Tensor& a, const Tensor& b, BinaryOp op) {
    const bool same = a.same_shape(b);
    const bool b_col = !same && detail::channel_column_over(a.shape(), b.shape());
    const bool a_col = !same && !b_col && detail::channel_column_over(b.shape(), a.shape());
    if (!same && !b_col && !a_col)
        throw ShapeMismatch("ew_binary: " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));

    const Shape& out_shape = a_col ? b.shape() : a.shape();
    const std::int64_t n = shape_numel(out_shape);
    auto result = detail::make_result(out_shape, static_cast<std::size_t>(n));

    const double* av = a.data();
    const double* bv = b.data();
    double* ov = result->value.data();

    if (same) {
        switch (op) {
            case BinaryOp::add: for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i]; break;
            case BinaryOp::sub: for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i]; break;
            case BinaryOp::mul: for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i]; break;
        }
    } else {
        const int channels = out_shape[0];
        const std::int64_t spatial = n / channels;
        const double* full = b_col ? av : bv;
        const double* col = b_col ? bv : av;
        for (int c = 0; c < channels; ++c) {
            const double cv = col[c];
            const double* f = full + c * spatial;
            double* o = ov + c * spatial;
            switch (op) {
                case BinaryOp::add: for (std::int64_t i = 0; i < spatial; ++i) o[i] = f[i] + cv; break;
                case BinaryOp::mul: for (std::int64_t i = 0; i < spatial; ++i) o[i] = f[i] * cv; break;
                case BinaryOp::sub:
                    if (b_col) for (std::int64_t i = 0; i < spatial; ++i) o[i] = f[i] - cv;
                    else       for (std::int64_t i = 0; i < spatial; ++i) o[i] = cv - f[i];
                    break;
            }
        }
    }

    detail::attach(result, {a.node(), b.node()}, [op, same, b_col, n](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        const double* g = self.grad.data();
        if (same) {
            switch (op) {
                case BinaryOp::add:
                    for (std::int64_t i = 0; i < n; ++i) { pa.grad[i] += g[i]; pb.grad[i] += g[i]; }
                    break;
                case BinaryOp::sub:
                    for (std::int64_t i = 0; i < n; ++i) { pa.grad[i] += g[i]; pb.grad[i] -= g[i]; }
                    break;
                case BinaryOp::mul:
                    for (std::int64_t i = 0; i < n; ++i) {
                        pa.grad[i] += g[i] * pb.value[i];
                        pb.grad[i] += g[i] * pa.value[i];
                    }
                    break;
            }
            return;
        }
        auto& full = b_col ? pa : pb;
        auto& col = b_col ? pb : pa;
        const int channels = self.shape[0];
        const std::int64_t spatial = n / channels;
        for (int c = 0; c < channels; ++c) {
            const double* gc = g + c * spatial;
            const double* fv = full.value.data() + c * spatial;
            double* gf = full.grad.data() + c * spatial;
            double acc = 0.0;
            switch (op) {
                case BinaryOp::add:
                    for (std::int64_t i = 0; i < spatial; ++i) { gf[i] += gc[i]; acc += gc[i]; }
                    col.grad[c] += acc;
                    break;
                case BinaryOp::mul: {
                    const double cv = col.value[c];
                    for (std::int64_t i = 0; i < spatial; ++i) {
                        gf[i] += gc[i] * cv;
                        acc += gc[i] * fv[i];
                    }
                    col.grad[c] += acc;
                    break;
                }
                case BinaryOp::sub: {
                    const double sf = b_col ? 1.0 : -1.0; // sign on the full operand
                    for (std::int64_t i = 0; i < spatial; ++i) { gf[i] += sf * gc[i]; acc += gc[i]; }
                    col.grad[c] += -sf * acc;
                    break;
                }
            }
        }
    });
    return Tensor::wrap(result);
}

inline Tensor add(const Tensor& a, const Tensor& b) { return ew_binary(a, b, BinaryOp::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return ew_binary(a, b, BinaryOp::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return ew_binary(a, b, BinaryOp::mul); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

enum class UnaryOp { sigmoid, relu, exp, neg };

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor ew_unary(const Tensor& a, UnaryOp op) {
    const std::int64_t n = a.numel();
    auto result = detail::make_result(a.shape(), static_cast<std::size_t>(n));
    const double* av = a.data();
    double* ov = result->value.data();
    switch (op) {
        case UnaryOp::sigmoid: for (std::int64_t i = 0; i < n; ++i) ov[i] = stable_sigmoid(av[i]); break;
        case UnaryOp::relu:    for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0; break;
        case UnaryOp::exp:     for (std::int64_t i = 0; i < n; ++i) ov[i] = std::exp(av[i]); break;
        case UnaryOp::neg:     for (std::int64_t i = 0; i < n; ++i) ov[i] = -av[i]; break;
    }
    if (op == UnaryOp::exp) check_finite(Tensor::wrap(result), "exp");

    detail::attach(result, {a.node()}, [op, n](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.value.data();
        switch (op) {
            case UnaryOp::sigmoid:
                for (std::int64_t i = 0; i < n; ++i) p.grad[i] += g[i] * y[i] * (1.0 - y[i]);
                break;
            case UnaryOp::relu:
                // subgradient at 0 is taken as 0
                for (std::int64_t i = 0; i < n; ++i) p.grad[i] += p.value[i] > 0.0 ? g[i] : 0.0;
                break;
            case UnaryOp::exp:
                for (std::int64_t i = 0; i < n; ++i) p.grad[i] += g[i] * y[i];
                break;
            case UnaryOp::neg:
                for (std::int64_t i = 0; i < n; ++i) p.grad[i] -= g[i];
                break;
        }
    });
    return Tensor::wrap(result);
}

inline Tensor sigmoid(const Tensor& a) { return ew_unary(a, UnaryOp::sigmoid); }
inline Tensor relu(const Tensor& a) { return ew_unary(a, UnaryOp::relu); }
inline Tensor exp(const Tensor& a) { return ew_unary(a, UnaryOp::exp); }
inline Tensor neg(const Tensor& a) { return ew_unary(a, UnaryOp::neg); }

inline Tensor log(const Tensor& a) {
    const std::int64_t n = a.numel();
    auto result = detail::make_result(a.shape(), static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) result->value[i] = std::log(a.data()[i]);
    check_finite(Tensor::wrap(result), "log");
    detail::attach(result, {a.node()}, [n](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) p.grad[i] += self.grad[i] / p.value[i];
    });
    return Tensor::wrap(result);
}

/// Clamp with pass-through gradient strictly inside (lo, hi), zero outside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    const std::int64_t n = a.numel();
    auto result = detail::make_result(a.shape(), static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
        result->value[i] = std::min(hi, std::max(lo, a.data()[i]));
    detail::attach(result, {a.node()}, [lo, hi, n](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) {
            const double v = p.value[i];
            if (v > lo && v < hi) p.grad[i] += self.grad[i];
        }
    });
    return Tensor::wrap(result);
}

inline Tensor scale(const Tensor& a, double c) {
    const std::int64_t n = a.numel();
    auto result = detail::make_result(a.shape(), static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) result->value[i] = c * a.data()[i];
    detail::attach(result, {a.node()}, [c, n](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) p.grad[i] += c * self.grad[i];
    });
    return Tensor::wrap(result);
}

inline Tensor add_scalar(const Tensor& a, double c) {
    const std::int64_t n = a.numel();
    auto result = detail::make_result(a.shape(), static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) result->value[i] = a.data()[i] + c;
    detail::attach(result, {a.node()}, [n](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) p.grad[i] += self.grad[i];
    });
    return Tensor::wrap(result);
}

// ---------------------------------------------------------------------------
// Reductions and scalar algebra.
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    const std::int64_t n = a.numel();
    auto result = detail::make_result({1}, 1);
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += a.data()[i];
    result->value[0] = acc;
    detail::attach(result, {a.node()}, [n](detail::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const double g = self.grad[0];
        for (std::int64_t i = 0; i < n; ++i) p.grad[i] += g;
    });
    return Tensor::wrap(result);
}

inline Tensor mean(const Tensor& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Quotient of two scalar tensors.
inline Tensor scalar_div(const Tensor& a, const Tensor& b) {
    if (a.numel() != 1 || b.numel() != 1)
        throw NotScalar("scalar_div expects scalar tensors");
    auto result = detail::make_result({1}, 1);
    result->value[0] = a.data()[0] / b.data()[0];
    check_finite(Tensor::wrap(result), "scalar_div");
    detail::attach(result, {a.node(), b.node()}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        const double g = self.grad[0];
        const double bv = pb.value[0];
        pa.grad[0] += g / bv;
        pb.grad[0] -= g * pa.value[0] / (bv * bv);
    });
    return Tensor::wrap(result);
}

// ---------------------------------------------------------------------------
// Tape: topological record of the graph below a scalar root. Creation order
// of the ops already is a valid topological order, recovered here by DFS.
// ---------------------------------------------------------------------------

class Tape {
public:
    explicit Tape(const Tensor& root) : root_(root.node()) {
        if (root.numel() != 1)
            throw NotScalar("backprop root must be scalar, got " + shape_str(root.shape()));
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        std::unordered_set<detail::Node*> visited;
        stack.emplace_back(root_.get(), 0);
        visited.insert(root_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::Node* parent = node->parents[next++].get();
                if (visited.insert(parent).second) stack.emplace_back(parent, 0);
            } else {
                order_.push_back(node);
                stack.pop_back();
            }
        }
    }

    /// Runs reverse-mode accumulation. Each node's closure fires exactly once.
    /// Interior gradients are scratch state and reset per call; leaf gradients
    /// add onto whatever is already stored, so repeated calls accumulate.
    void backward() {
        for (auto* n : order_) {
            if (n->backward)
                n->grad.assign(n->value.size(), 0.0);
            else
                n->ensure_grad();
        }
        root_->grad[0] += 1.0;
        for (auto it = order_.rbegin(); it != order_.rend(); ++it)
            if ((*it)->backward) (*it)->backward(**it);
    }

    std::size_t size() const { return order_.size(); }

private:
    std::shared_ptr<detail::Node> root_;
    std::vector<detail::Node*> order_; // parents before children
};

inline void backprop(const Tensor& loss) {
    Tape tape(loss);
    tape.backward();
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeMismatch("max_abs_diff: " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

} // namespace fdiff
