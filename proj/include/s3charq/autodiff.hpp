#pragma once

// Define-by-run reverse-mode differentiation over dense row-major matrices.
// Every value in a graph is a rank-2 (rows x cols) tensor; batches run along rows.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "s3charq/errors.hpp"

namespace s3charq::ad {

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    // Empty when no gradient has been accumulated.
    std::vector<double> grad;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
        : shape(std::move(dims)), data(element_count(shape), fill) {}
    Tensor(std::vector<std::size_t> dims, std::vector<double> values)
        : shape(std::move(dims)), data(std::move(values)) {
        if (data.size() != element_count(shape)) {
            throw ConfigError("tensor data length " + std::to_string(data.size()) +
                              " does not match shape product " +
                              std::to_string(element_count(shape)));
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor({rows, cols}, fill);
    }
    static Tensor row(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }

    static std::size_t element_count(const std::vector<std::size_t>& dims) {
        return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t size() const { return data.size(); }
    std::size_t rows() const {
        if (shape.size() < 2) return 1;
        return element_count(std::vector<std::size_t>(shape.begin(), shape.end() - 1));
    }
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool has_grad() const { return !grad.empty(); }
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline ConstMatrixMap as_matrix(const Tensor& t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
inline MatrixMap as_matrix(Tensor& t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents that require grad.
    std::function<void(Node&)> backward;
    std::string name;

    std::vector<double>& grad() {
        if (value.grad.size() != value.data.size()) value.grad.assign(value.data.size(), 0.0);
        return value.grad;
    }
};

/// Shared handle to a graph node. Copies alias the same node.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    Tensor& value() { return node_->value; }
    const std::vector<double>& grad() const { return node_->value.grad; }
    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }
    double item() const { return node_->value.data.at(0); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }
    const std::string& name() const { return node_->name; }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& shared() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

/// While alive, ops on this thread record no history (inference mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    t.grad.clear();
    n->value = std::move(t);
    return Var(std::move(n));
}

inline Var parameter(Tensor t, std::string name) {
    auto n = std::make_shared<Node>();
    t.grad.clear();
    n->value = std::move(t);
    n->requires_grad = true;
    n->name = std::move(name);
    return Var(std::move(n));
}

namespace detail {

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

inline Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool needs = false;
    if (grad_mode())
        for (const auto& v : inputs) needs = needs || v.requires_grad();
    if (needs) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& v : inputs) n->parents.push_back(v.shared());
        n->backward = std::move(backward);
    }
    return Var(std::move(n));
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ConfigError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()));
    }
}

}  // namespace detail

inline NoGradGuard::NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
inline NoGradGuard::~NoGradGuard() { detail::grad_mode() = previous_; }

namespace detail {

template <class Fwd, class Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
    Tensor out = Tensor::matrix(a.rows(), a.cols());
    const auto& in = a.value().data;
    for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = fwd(in[i]);
    return make_result(std::move(out), {a}, [deriv](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.value.grad[i] * deriv(p.value.data[i], self.value.data[i]);
        }
    });
}

}  // namespace detail

/// (B x n) * (n x m)
inline Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) {
        throw ConfigError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                          std::to_string(b.rows()) + " differ");
    }
    Tensor out = Tensor::matrix(a.rows(), b.cols());
    as_matrix(out).noalias() = as_matrix(a.value()) * as_matrix(b.value());
    return detail::make_result(std::move(out), {a, b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        ConstMatrixMap dout(self.value.grad.data(), static_cast<Eigen::Index>(self.value.rows()),
                            static_cast<Eigen::Index>(self.value.cols()));
        if (pa.requires_grad) {
            pa.grad();
            MatrixMap ga(pa.value.grad.data(), pa.value.rows(), pa.value.cols());
            ga.noalias() += dout * as_matrix(static_cast<const Tensor&>(pb.value)).transpose();
        }
        if (pb.requires_grad) {
            pb.grad();
            MatrixMap gb(pb.value.grad.data(), pb.value.rows(), pb.value.cols());
            gb.noalias() += as_matrix(static_cast<const Tensor&>(pa.value)).transpose() * dout;
        }
    });
}

/// Adds a (1 x m) bias to every row of a (B x m) input.
inline Var add_bias(const Var& a, const Var& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols()) {
        throw ConfigError("add_bias: bias width " + std::to_string(bias.cols()) +
                          " does not match input width " + std::to_string(a.cols()));
    }
    Tensor out = a.value();
    out.grad.clear();
    const std::size_t m = a.cols();
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < m; ++c) out.data[r * m + c] += bias.value().data[c];
    return detail::make_result(std::move(out), {a, bias}, [m](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const auto& g = self.value.grad;
        if (pa.requires_grad) {
            auto& ga = pa.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (pb.requires_grad) {
            auto& gb = pb.grad();
            for (std::size_t i = 0; i < g.size(); i += m)
                for (std::size_t c = 0; c < m; ++c) gb[c] += g[i + c];
        }
    });
}

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = Tensor::matrix(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
    return detail::make_result(std::move(out), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            Node& p = *self.parents[k];
            if (!p.requires_grad) continue;
            auto& g = p.grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.value.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = Tensor::matrix(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
    return detail::make_result(std::move(out), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            Node& p = *self.parents[k];
            if (!p.requires_grad) continue;
            const double sign = k == 0 ? 1.0 : -1.0;
            auto& g = p.grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.value.grad[i];
        }
    });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = Tensor::matrix(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
    return detail::make_result(std::move(out), {a, b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const auto& g = self.value.grad;
        if (pa.requires_grad) {
            auto& ga = pa.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb.value.data[i];
        }
        if (pb.requires_grad) {
            auto& gb = pb.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa.value.data[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& a, double s) {
    return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var relu(const Var& a) {
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
    return detail::unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline double softplus_value(double x) {
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline Var softplus(const Var& a) {
    return detail::unary(a, softplus_value, [](double x, double) { return sigmoid_value(x); });
}

inline Var exp(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(const Var& a) {
    return detail::unary(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Subgradient 1 inside [lo, hi], 0 outside.
inline Var clamp(const Var& a, double lo, double hi) {
    return detail::unary(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

/// Elementwise minimum; ties route the gradient to the first argument.
inline Var minimum(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "minimum");
    Tensor out = Tensor::matrix(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = std::min(a.value().data[i], b.value().data[i]);
    return detail::make_result(std::move(out), {a, b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const auto& g = self.value.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const bool first = pa.value.data[i] <= pb.value.data[i];
            if (first && pa.requires_grad) pa.grad()[i] += g[i];
            if (!first && pb.requires_grad) pb.grad()[i] += g[i];
        }
    });
}

/// Sum of all elements, as a 1x1 value.
inline Var sum(const Var& a) {
    Tensor out = Tensor::matrix(1, 1);
    for (double v : a.value().data) out.data[0] += v;
    return detail::make_result(std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad();
        for (auto& v : g) v += self.value.grad[0];
    });
}

inline Var mean(const Var& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// (B x n) -> (B x 1)
inline Var row_sum(const Var& a) {
    const std::size_t n = a.cols();
    Tensor out = Tensor::matrix(a.rows(), 1);
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) out.data[r] += a.value().data[r * n + c];
    return detail::make_result(std::move(out), {a}, [n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.value.grad[i / n];
    });
}

/// Multiplies each row of a (B x n) input by the matching entry of a (B x 1) column.
inline Var mul_rows(const Var& a, const Var& s) {
    if (s.cols() != 1 || s.rows() != a.rows()) throw ConfigError("mul_rows: expected a B x 1 scale column");
    const std::size_t n = a.cols();
    Tensor out = Tensor::matrix(a.rows(), n);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] * s.value().data[i / n];
    return detail::make_result(std::move(out), {a, s}, [n](Node& self) {
        Node& pa = *self.parents[0];
        Node& ps = *self.parents[1];
        const auto& g = self.value.grad;
        if (pa.requires_grad) {
            auto& ga = pa.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ps.value.data[i / n];
        }
        if (ps.requires_grad) {
            auto& gs = ps.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gs[i / n] += g[i] * pa.value.data[i];
        }
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ConfigError("concat_cols: no inputs");
    const std::size_t rows = parts.front().rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ConfigError("concat_cols: row counts differ");
        total += p.cols();
    }
    Tensor out = Tensor::matrix(rows, total);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t w = p.cols();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(p.value().data.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                        out.data.begin() + static_cast<std::ptrdiff_t>(r * total + off));
        off += w;
    }
    return detail::make_result(std::move(out), parts, [offsets, total, rows](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            Node& p = *self.parents[k];
            if (!p.requires_grad) continue;
            auto& g = p.grad();
            const std::size_t w = p.value.cols();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < w; ++c) g[r * w + c] += self.value.grad[r * total + offsets[k] + c];
        }
    });
}

inline Var slice_cols(const Var& a, std::size_t start, std::size_t len) {
    const std::size_t n = a.cols();
    if (start + len > n) throw ConfigError("slice_cols: range exceeds width");
    Tensor out = Tensor::matrix(a.rows(), len);
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < len; ++c) out.data[r * len + c] = a.value().data[r * n + start + c];
    return detail::make_result(std::move(out), {a}, [start, len, n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad();
        const std::size_t rows = self.value.rows();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < len; ++c) g[r * n + start + c] += self.value.grad[r * len + c];
    });
}

/// Rescales each row so the mean square over its `active[r]` leading symbols is 1.
/// Inactive entries must already be zero; they stay zero.
inline Var normalize_rows(const Var& a, std::vector<std::size_t> active) {
    const std::size_t rows = a.rows();
    const std::size_t n = a.cols();
    if (active.size() != rows) throw ConfigError("normalize_rows: one active count per row required");
    Tensor out = Tensor::matrix(rows, n);
    std::vector<double> gains(rows), norms2(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += a.value().data[r * n + c] * a.value().data[r * n + c];
        // An all-zero row stays zero; the floor only keeps the gain finite.
        norms2[r] = s > 0.0 ? s : 1e-12;
        gains[r] = std::sqrt(static_cast<double>(active[r]) / norms2[r]);
        for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] = gains[r] * a.value().data[r * n + c];
    }
    return detail::make_result(std::move(out), {a}, [gains, norms2, n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad();
        const auto& x = p.value.data;
        const auto& gy = self.value.grad;
        for (std::size_t r = 0; r < gains.size(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < n; ++c) dot += x[r * n + c] * gy[r * n + c];
            for (std::size_t c = 0; c < n; ++c)
                g[r * n + c] += gains[r] * (gy[r * n + c] - x[r * n + c] * dot / norms2[r]);
        }
    });
}

/// Row-wise log-softmax.
inline Var log_softmax(const Var& a) {
    const std::size_t rows = a.rows();
    const std::size_t n = a.cols();
    Tensor out = Tensor::matrix(rows, n);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.value().data.data() + r * n;
        const double m = *std::max_element(x, x + n);
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += std::exp(x[c] - m);
        const double lse = m + std::log(s);
        for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] = x[c] - lse;
    }
    return detail::make_result(std::move(out), {a}, [n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad();
        const auto& y = self.value.data;
        const auto& gy = self.value.grad;
        for (std::size_t r = 0; r < self.value.rows(); ++r) {
            double gs = 0.0;
            for (std::size_t c = 0; c < n; ++c) gs += gy[r * n + c];
            for (std::size_t c = 0; c < n; ++c) g[r * n + c] += gy[r * n + c] - std::exp(y[r * n + c]) * gs;
        }
    });
}

/// Picks column `index[r]` from each row: (B x n) -> (B x 1).
inline Var pick(const Var& a, std::vector<std::size_t> index) {
    const std::size_t n = a.cols();
    if (index.size() != a.rows()) throw ConfigError("pick: one index per row required");
    Tensor out = Tensor::matrix(a.rows(), 1);
    for (std::size_t r = 0; r < a.rows(); ++r) {
        if (index[r] >= n) throw ConfigError("pick: index out of range");
        out.data[r] = a.value().data[r * n + index[r]];
    }
    return detail::make_result(std::move(out), {a}, [index, n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad();
        for (std::size_t r = 0; r < index.size(); ++r) g[r * n + index[r]] += self.value.grad[r];
    });
}

/// Copy of the current value with no history.
inline Var detach(const Var& a) { return constant(a.value()); }

/// Propagates d(loss)/d(node) to every node reachable from `loss` that requires grad.
inline void backward(const Var& loss) {
    if (loss.value().size() != 1) {
        throw UsageError("backward: loss must be a scalar, got " + std::to_string(loss.value().size()) +
                         " elements");
    }
    if (!loss.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* child = node->parents[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->value.grad.empty()) n->backward(*n);
    }
}

inline void zero_grad(std::span<const Var> params) {
    for (const auto& p : params) p.node()->value.grad.clear();
}

}  // namespace s3charq::ad
