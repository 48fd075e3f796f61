#pragma once

// Dense float tensors (1-D / 2-D) with reverse-mode automatic differentiation.
// Values are stored in 32-bit floats; matmul, softmax, layer-norm and the loss
// reductions accumulate in 64-bit intermediates. Graph construction and the
// backward pass are single-threaded; values are immutable once produced.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "prunekit/common.hpp"

namespace prunekit {

enum class PrimitiveKind : std::uint8_t {
    leaf,
    matmul,
    add,
    mul,
    row_scale,   // diag(v) * X
    col_scale,   // X * diag(v)
    gelu,
    softmax,
    layer_norm,
    mse,
    kl_temperature,
    sigmoid,
    log,
    clamp,
    affine,
    sum,
    transpose,
    slice,
    concat,
};

inline const char* to_string(PrimitiveKind k) {
    switch (k) {
        case PrimitiveKind::leaf: return "leaf";
        case PrimitiveKind::matmul: return "matmul";
        case PrimitiveKind::add: return "add";
        case PrimitiveKind::mul: return "mul";
        case PrimitiveKind::row_scale: return "row_scale";
        case PrimitiveKind::col_scale: return "col_scale";
        case PrimitiveKind::gelu: return "gelu";
        case PrimitiveKind::softmax: return "softmax";
        case PrimitiveKind::layer_norm: return "layer_norm";
        case PrimitiveKind::mse: return "mse";
        case PrimitiveKind::kl_temperature: return "kl_temperature";
        case PrimitiveKind::sigmoid: return "sigmoid";
        case PrimitiveKind::log: return "log";
        case PrimitiveKind::clamp: return "clamp";
        case PrimitiveKind::affine: return "affine";
        case PrimitiveKind::sum: return "sum";
        case PrimitiveKind::transpose: return "transpose";
        case PrimitiveKind::slice: return "slice";
        case PrimitiveKind::concat: return "concat";
    }
    return "?";
}

struct TensorNode {
    std::vector<int> shape;
    std::vector<float> value;
    std::vector<float> grad;  // allocated on first accumulation
    bool requires_grad = false;
    PrimitiveKind op = PrimitiveKind::leaf;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::function<void()> backprop;

    long numel() const { return static_cast<long>(value.size()); }
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.size() == 2 ? shape[1] : shape[0]; }

    void accumulate(const double* g, long n) {
        if (!requires_grad) return;
        if (grad.empty()) grad.assign(value.size(), 0.0f);
        for (long i = 0; i < n; ++i) grad[i] += static_cast<float>(g[i]);
    }
    void accumulate_at(long idx, double g) {
        if (!requires_grad) return;
        if (grad.empty()) grad.assign(value.size(), 0.0f);
        grad[idx] += static_cast<float>(g);
    }
};

using NodePtr = std::shared_ptr<TensorNode>;

// While a guard is alive, newly built ops produce constant nodes with no tape.
class NoGradGuard {
  public:
    NoGradGuard() : prev_(flag()) { flag() = true; }
    ~NoGradGuard() { flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    static bool active() { return flag(); }

  private:
    static bool& flag() {
        thread_local bool f = false;
        return f;
    }
    bool prev_;
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor from(std::vector<int> shape, std::vector<float> data, bool requires_grad = false) {
        if (shape.empty() || shape.size() > 2)
            throw ShapeError("tensor rank must be 1 or 2, got " + shape_str(shape));
        if (numel_of(shape) != static_cast<long>(data.size()))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }
    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        std::vector<float> d(static_cast<size_t>(numel_of(shape)), 0.0f);
        return from(std::move(shape), std::move(d), requires_grad);
    }
    static Tensor full(std::vector<int> shape, float v, bool requires_grad = false) {
        std::vector<float> d(static_cast<size_t>(numel_of(shape)), v);
        return from(std::move(shape), std::move(d), requires_grad);
    }
    static Tensor scalar(float v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    long numel() const { return node_->numel(); }
    int rows() const { return node_->rows(); }
    int cols() const { return node_->cols(); }
    bool is_scalar() const { return numel() == 1; }
    bool is_vector() const { return shape().size() == 1; }
    bool is_matrix() const { return shape().size() == 2; }
    bool requires_grad() const { return node_->requires_grad; }

    const float* data() const { return node_->value.data(); }
    float* mutable_data() { return node_->value.data(); }
    const std::vector<float>& values() const { return node_->value; }
    float item() const {
        if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }
    float at(long i) const { return node_->value[static_cast<size_t>(i)]; }
    float at(int r, int c) const { return node_->value[static_cast<size_t>(r) * cols() + c]; }

    const std::vector<float>& grad() const { return node_->grad; }
    float grad_at(long i) const { return node_->grad.empty() ? 0.0f : node_->grad[static_cast<size_t>(i)]; }
    void zero_grad() { node_->grad.clear(); }

    PrimitiveKind op() const { return node_->op; }
    const NodePtr& node() const { return node_; }

  private:
    NodePtr node_;
};

namespace detail {

using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<const RowMatF>;

inline NodePtr make_result(std::vector<int> shape, std::vector<float> value, PrimitiveKind op,
                           std::vector<NodePtr> inputs) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    if (!NoGradGuard::active()) {
        bool rg = false;
        for (const auto& in : inputs) rg = rg || in->requires_grad;
        n->requires_grad = rg;
        if (rg) n->inputs = std::move(inputs);
    }
    return n;
}

inline void require(bool cond, PrimitiveKind op, const std::string& msg) {
    if (!cond) throw ShapeError(std::string(to_string(op)) + ": " + msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(a.is_matrix() && b.is_matrix(), PrimitiveKind::matmul,
                    "expects two matrices, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    detail::require(a.cols() == b.rows(), PrimitiveKind::matmul,
                    "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    detail::MapF A(a.data(), m, k), B(b.data(), k, n);
    detail::RowMatD C = A.cast<double>() * B.cast<double>();
    std::vector<float> out(static_cast<size_t>(m) * n);
    Eigen::Map<detail::RowMatF>(out.data(), m, n) = C.cast<float>();
    auto node = detail::make_result({m, n}, std::move(out), PrimitiveKind::matmul, {a.node(), b.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, m, k, n]() {
            Eigen::Map<const detail::RowMatF> G(np->grad.data(), m, n);
            auto& ain = *np->inputs[0];
            auto& bin = *np->inputs[1];
            detail::MapF A2(ain.value.data(), m, k), B2(bin.value.data(), k, n);
            if (ain.requires_grad) {
                detail::RowMatD dA = G.cast<double>() * B2.cast<double>().transpose();
                ain.accumulate(dA.data(), dA.size());
            }
            if (bin.requires_grad) {
                detail::RowMatD dB = A2.cast<double>().transpose() * G.cast<double>();
                bin.accumulate(dB.data(), dB.size());
            }
        };
    }
    return Tensor(node);
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(), PrimitiveKind::add,
                    "shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const long n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) out[i] = a.data()[i] + b.data()[i];
    auto node = detail::make_result(a.shape(), std::move(out), PrimitiveKind::add, {a.node(), b.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, n]() {
            std::vector<double> g(np->grad.begin(), np->grad.end());
            np->inputs[0]->accumulate(g.data(), n);
            np->inputs[1]->accumulate(g.data(), n);
        };
    }
    return Tensor(node);
}

// Elementwise product; one operand may be a one-element tensor, which scales
// the other (the scalar gates z_MHA / z_FFN need exactly this form).
inline Tensor mul(const Tensor& a, const Tensor& b) {
    const bool a_scalar = a.is_scalar(), b_scalar = b.is_scalar();
    detail::require(a.shape() == b.shape() || a_scalar || b_scalar, PrimitiveKind::mul,
                    "shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (a_scalar && !b_scalar) return mul(b, a);
    const long n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    if (b_scalar) {
        const float s = b.item();
        for (long i = 0; i < n; ++i) out[i] = a.data()[i] * s;
    } else {
        for (long i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
    }
    auto node = detail::make_result(a.shape(), std::move(out), PrimitiveKind::mul, {a.node(), b.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        const bool bs = b_scalar && !a_scalar;
        node->backprop = [np, n, bs]() {
            auto& ain = *np->inputs[0];
            auto& bin = *np->inputs[1];
            if (bs) {
                const double s = bin.value[0];
                if (ain.requires_grad) {
                    std::vector<double> g(static_cast<size_t>(n));
                    for (long i = 0; i < n; ++i) g[i] = np->grad[i] * s;
                    ain.accumulate(g.data(), n);
                }
                if (bin.requires_grad) {
                    double acc = 0.0;
                    for (long i = 0; i < n; ++i) acc += double(np->grad[i]) * ain.value[i];
                    bin.accumulate_at(0, acc);
                }
            } else {
                if (ain.requires_grad) {
                    std::vector<double> g(static_cast<size_t>(n));
                    for (long i = 0; i < n; ++i) g[i] = double(np->grad[i]) * bin.value[i];
                    ain.accumulate(g.data(), n);
                }
                if (bin.requires_grad) {
                    std::vector<double> g(static_cast<size_t>(n));
                    for (long i = 0; i < n; ++i) g[i] = double(np->grad[i]) * ain.value[i];
                    bin.accumulate(g.data(), n);
                }
            }
        };
    }
    return Tensor(node);
}

// diag(v) * X : scales row i of X by v[i].
inline Tensor row_scale(const Tensor& x, const Tensor& v) {
    detail::require(x.is_matrix() && v.is_vector(), PrimitiveKind::row_scale,
                    "expects matrix and vector, got " + shape_str(x.shape()) + " and " + shape_str(v.shape()));
    detail::require(v.numel() == x.rows(), PrimitiveKind::row_scale,
                    "vector length " + shape_str(v.shape()) + " does not match rows of " + shape_str(x.shape()));
    const int r = x.rows(), c = x.cols();
    std::vector<float> out(static_cast<size_t>(r) * c);
    for (int i = 0; i < r; ++i) {
        const float s = v.data()[i];
        for (int j = 0; j < c; ++j) out[size_t(i) * c + j] = x.data()[size_t(i) * c + j] * s;
    }
    auto node = detail::make_result({r, c}, std::move(out), PrimitiveKind::row_scale, {x.node(), v.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, r, c]() {
            auto& xin = *np->inputs[0];
            auto& vin = *np->inputs[1];
            if (xin.requires_grad) {
                std::vector<double> g(size_t(r) * c);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        g[size_t(i) * c + j] = double(np->grad[size_t(i) * c + j]) * vin.value[i];
                xin.accumulate(g.data(), long(r) * c);
            }
            if (vin.requires_grad) {
                for (int i = 0; i < r; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < c; ++j)
                        acc += double(np->grad[size_t(i) * c + j]) * xin.value[size_t(i) * c + j];
                    vin.accumulate_at(i, acc);
                }
            }
        };
    }
    return Tensor(node);
}

// X * diag(v) : scales column j of X by v[j].
inline Tensor col_scale(const Tensor& x, const Tensor& v) {
    detail::require(x.is_matrix() && v.is_vector(), PrimitiveKind::col_scale,
                    "expects matrix and vector, got " + shape_str(x.shape()) + " and " + shape_str(v.shape()));
    detail::require(v.numel() == x.cols(), PrimitiveKind::col_scale,
                    "vector length " + shape_str(v.shape()) + " does not match cols of " + shape_str(x.shape()));
    const int r = x.rows(), c = x.cols();
    std::vector<float> out(static_cast<size_t>(r) * c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[size_t(i) * c + j] = x.data()[size_t(i) * c + j] * v.data()[j];
    auto node = detail::make_result({r, c}, std::move(out), PrimitiveKind::col_scale, {x.node(), v.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, r, c]() {
            auto& xin = *np->inputs[0];
            auto& vin = *np->inputs[1];
            if (xin.requires_grad) {
                std::vector<double> g(size_t(r) * c);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        g[size_t(i) * c + j] = double(np->grad[size_t(i) * c + j]) * vin.value[j];
                xin.accumulate(g.data(), long(r) * c);
            }
            if (vin.requires_grad) {
                for (int j = 0; j < c; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < r; ++i)
                        acc += double(np->grad[size_t(i) * c + j]) * xin.value[size_t(i) * c + j];
                    vin.accumulate_at(j, acc);
                }
            }
        };
    }
    return Tensor(node);
}

namespace detail {
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;
}  // namespace detail

// tanh-approximation gelu; the backward rule is the exact derivative of the
// approximation so analytic and numeric gradients agree.
inline Tensor gelu(const Tensor& x) {
    const long n = x.numel();
    std::vector<float> out(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) {
        const double v = x.data()[i];
        const double u = detail::kGeluK * (v + detail::kGeluC * v * v * v);
        out[i] = static_cast<float>(0.5 * v * (1.0 + std::tanh(u)));
    }
    auto node = detail::make_result(x.shape(), std::move(out), PrimitiveKind::gelu, {x.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, n]() {
            auto& xin = *np->inputs[0];
            std::vector<double> g(static_cast<size_t>(n));
            for (long i = 0; i < n; ++i) {
                const double v = xin.value[i];
                const double u = detail::kGeluK * (v + detail::kGeluC * v * v * v);
                const double t = std::tanh(u);
                const double du = detail::kGeluK * (1.0 + 3.0 * detail::kGeluC * v * v);
                const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                g[i] = double(np->grad[i]) * d;
            }
            xin.accumulate(g.data(), n);
        };
    }
    return Tensor(node);
}

// Row-wise softmax (a 1-D input is treated as a single row).
inline Tensor softmax(const Tensor& x) {
    const int r = x.rows(), c = x.cols();
    detail::require(c >= 1, PrimitiveKind::softmax, "empty row in " + shape_str(x.shape()));
    std::vector<float> out(static_cast<size_t>(r) * c);
    for (int i = 0; i < r; ++i) {
        const float* row = x.data() + size_t(i) * c;
        double m = row[0];
        for (int j = 1; j < c; ++j) m = std::max(m, double(row[j]));
        double s = 0.0;
        std::vector<double> e(static_cast<size_t>(c));
        for (int j = 0; j < c; ++j) {
            e[j] = std::exp(double(row[j]) - m);
            s += e[j];
        }
        for (int j = 0; j < c; ++j) out[size_t(i) * c + j] = static_cast<float>(e[j] / s);
    }
    auto node = detail::make_result(x.shape(), std::move(out), PrimitiveKind::softmax, {x.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, r, c]() {
            auto& xin = *np->inputs[0];
            std::vector<double> g(size_t(r) * c);
            for (int i = 0; i < r; ++i) {
                double dot = 0.0;
                for (int j = 0; j < c; ++j)
                    dot += double(np->grad[size_t(i) * c + j]) * np->value[size_t(i) * c + j];
                for (int j = 0; j < c; ++j) {
                    const double y = np->value[size_t(i) * c + j];
                    g[size_t(i) * c + j] = y * (double(np->grad[size_t(i) * c + j]) - dot);
                }
            }
            xin.accumulate(g.data(), long(r) * c);
        };
    }
    return Tensor(node);
}

// Row-wise layer normalization with learnable scale/shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    detail::require(x.is_matrix(), PrimitiveKind::layer_norm, "input must be a matrix, got " + shape_str(x.shape()));
    detail::require(gamma.is_vector() && gamma.numel() == x.cols(), PrimitiveKind::layer_norm,
                    "scale " + shape_str(gamma.shape()) + " does not match cols of " + shape_str(x.shape()));
    detail::require(beta.is_vector() && beta.numel() == x.cols(), PrimitiveKind::layer_norm,
                    "shift " + shape_str(beta.shape()) + " does not match cols of " + shape_str(x.shape()));
    const int r = x.rows(), c = x.cols();
    std::vector<float> out(static_cast<size_t>(r) * c);
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(r) * c);
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        const float* row = x.data() + size_t(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= c;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = inv;
        for (int j = 0; j < c; ++j) {
            const double h = (row[j] - mean) * inv;
            (*xhat)[size_t(i) * c + j] = h;
            out[size_t(i) * c + j] = static_cast<float>(double(gamma.data()[j]) * h + beta.data()[j]);
        }
    }
    auto node = detail::make_result({r, c}, std::move(out), PrimitiveKind::layer_norm,
                                    {x.node(), gamma.node(), beta.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, r, c, xhat, inv_std]() {
            auto& xin = *np->inputs[0];
            auto& gin = *np->inputs[1];
            auto& bin = *np->inputs[2];
            if (gin.requires_grad) {
                for (int j = 0; j < c; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < r; ++i)
                        acc += double(np->grad[size_t(i) * c + j]) * (*xhat)[size_t(i) * c + j];
                    gin.accumulate_at(j, acc);
                }
            }
            if (bin.requires_grad) {
                for (int j = 0; j < c; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < r; ++i) acc += double(np->grad[size_t(i) * c + j]);
                    bin.accumulate_at(j, acc);
                }
            }
            if (xin.requires_grad) {
                std::vector<double> g(size_t(r) * c);
                for (int i = 0; i < r; ++i) {
                    double mean_gg = 0.0, mean_ggx = 0.0;
                    for (int j = 0; j < c; ++j) {
                        const double gg = double(np->grad[size_t(i) * c + j]) * gin.value[j];
                        mean_gg += gg;
                        mean_ggx += gg * (*xhat)[size_t(i) * c + j];
                    }
                    mean_gg /= c;
                    mean_ggx /= c;
                    for (int j = 0; j < c; ++j) {
                        const double gg = double(np->grad[size_t(i) * c + j]) * gin.value[j];
                        g[size_t(i) * c + j] =
                            (*inv_std)[i] * (gg - mean_gg - (*xhat)[size_t(i) * c + j] * mean_ggx);
                    }
                }
                xin.accumulate(g.data(), long(r) * c);
            }
        };
    }
    return Tensor(node);
}

// Mean squared error over all elements, reduced to a scalar.
inline Tensor mse(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(), PrimitiveKind::mse,
                    "shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const long n = a.numel();
    double acc = 0.0;
    for (long i = 0; i < n; ++i) {
        const double d = double(a.data()[i]) - b.data()[i];
        acc += d * d;
    }
    auto node = detail::make_result({1}, {static_cast<float>(acc / n)}, PrimitiveKind::mse,
                                    {a.node(), b.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, n]() {
            auto& ain = *np->inputs[0];
            auto& bin = *np->inputs[1];
            const double g0 = np->grad[0];
            std::vector<double> g(static_cast<size_t>(n));
            for (long i = 0; i < n; ++i) g[i] = g0 * 2.0 * (double(ain.value[i]) - bin.value[i]) / n;
            if (ain.requires_grad) ain.accumulate(g.data(), n);
            if (bin.requires_grad) {
                for (long i = 0; i < n; ++i) g[i] = -g[i];
                bin.accumulate(g.data(), n);
            }
        };
    }
    return Tensor(node);
}

// Temperature-softened KL divergence D_KL(p_s || p_t), scaled by T^2 and
// averaged over rows. Gradients flow to both logit inputs.
inline Tensor kl_temperature(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
    detail::require(student_logits.shape() == teacher_logits.shape(), PrimitiveKind::kl_temperature,
                    "shape mismatch: " + shape_str(student_logits.shape()) + " vs " +
                        shape_str(teacher_logits.shape()));
    if (temperature <= 0.0) throw NumericError("kl_temperature: temperature must be positive");
    const int r = student_logits.rows(), c = student_logits.cols();
    auto ps = std::make_shared<std::vector<double>>(static_cast<size_t>(r) * c);
    auto pt = std::make_shared<std::vector<double>>(static_cast<size_t>(r) * c);
    auto row_kl = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
    auto softmax_row = [c](const float* row, double T, double* out) {
        double m = row[0] / T;
        for (int j = 1; j < c; ++j) m = std::max(m, double(row[j]) / T);
        double s = 0.0;
        for (int j = 0; j < c; ++j) {
            out[j] = std::exp(double(row[j]) / T - m);
            s += out[j];
        }
        for (int j = 0; j < c; ++j) out[j] /= s;
    };
    double total = 0.0;
    for (int i = 0; i < r; ++i) {
        softmax_row(student_logits.data() + size_t(i) * c, temperature, ps->data() + size_t(i) * c);
        softmax_row(teacher_logits.data() + size_t(i) * c, temperature, pt->data() + size_t(i) * c);
        double kl = 0.0;
        for (int j = 0; j < c; ++j) {
            const double p = (*ps)[size_t(i) * c + j];
            const double q = (*pt)[size_t(i) * c + j];
            if (p > 0.0) kl += p * (std::log(p) - std::log(std::max(q, 1e-300)));
        }
        (*row_kl)[i] = kl;
        total += kl;
    }
    const double scale = temperature * temperature;
    auto node = detail::make_result({1}, {static_cast<float>(scale * total / r)},
                                    PrimitiveKind::kl_temperature,
                                    {student_logits.node(), teacher_logits.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, r, c, temperature, ps, pt, row_kl]() {
            auto& sin = *np->inputs[0];
            auto& tin = *np->inputs[1];
            const double g0 = np->grad[0];
            const double k = g0 * temperature / r;
            if (sin.requires_grad) {
                std::vector<double> g(size_t(r) * c);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) {
                        const double p = (*ps)[size_t(i) * c + j];
                        const double q = std::max((*pt)[size_t(i) * c + j], 1e-300);
                        const double l = p > 0.0 ? std::log(p) - std::log(q) : 0.0;
                        g[size_t(i) * c + j] = k * p * (l - (*row_kl)[i]);
                    }
                sin.accumulate(g.data(), long(r) * c);
            }
            if (tin.requires_grad) {
                std::vector<double> g(size_t(r) * c);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        g[size_t(i) * c + j] =
                            k * ((*pt)[size_t(i) * c + j] - (*ps)[size_t(i) * c + j]);
                tin.accumulate(g.data(), long(r) * c);
            }
        };
    }
    return Tensor(node);
}

inline Tensor sigmoid(const Tensor& x) {
    const long n = x.numel();
    std::vector<float> out(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) out[i] = static_cast<float>(1.0 / (1.0 + std::exp(-double(x.data()[i]))));
    auto node = detail::make_result(x.shape(), std::move(out), PrimitiveKind::sigmoid, {x.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, n]() {
            std::vector<double> g(static_cast<size_t>(n));
            for (long i = 0; i < n; ++i) {
                const double y = np->value[i];
                g[i] = double(np->grad[i]) * y * (1.0 - y);
            }
            np->inputs[0]->accumulate(g.data(), n);
        };
    }
    return Tensor(node);
}

inline Tensor log(const Tensor& x) {
    const long n = x.numel();
    std::vector<float> out(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) {
        if (!(x.data()[i] > 0.0f))
            throw NumericError("log: non-positive input " + std::to_string(x.data()[i]) + " at index " +
                               std::to_string(i));
        out[i] = std::log(x.data()[i]);
    }
    auto node = detail::make_result(x.shape(), std::move(out), PrimitiveKind::log, {x.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, n]() {
            auto& xin = *np->inputs[0];
            std::vector<double> g(static_cast<size_t>(n));
            for (long i = 0; i < n; ++i) g[i] = double(np->grad[i]) / xin.value[i];
            xin.accumulate(g.data(), n);
        };
    }
    return Tensor(node);
}

// Gradient passes through wherever lo <= x <= hi (boundaries count as inside).
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    const long n = x.numel();
    std::vector<float> out(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i)
        out[i] = static_cast<float>(std::min(hi, std::max(lo, double(x.data()[i]))));
    auto node = detail::make_result(x.shape(), std::move(out), PrimitiveKind::clamp, {x.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, n, lo, hi]() {
            auto& xin = *np->inputs[0];
            std::vector<double> g(static_cast<size_t>(n));
            for (long i = 0; i < n; ++i) {
                const double v = xin.value[i];
                g[i] = (v >= lo && v <= hi) ? double(np->grad[i]) : 0.0;
            }
            xin.accumulate(g.data(), n);
        };
    }
    return Tensor(node);
}

inline Tensor affine(const Tensor& x, double a, double b) {
    const long n = x.numel();
    std::vector<float> out(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) out[i] = static_cast<float>(a * double(x.data()[i]) + b);
    auto node = detail::make_result(x.shape(), std::move(out), PrimitiveKind::affine, {x.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, n, a]() {
            std::vector<double> g(static_cast<size_t>(n));
            for (long i = 0; i < n; ++i) g[i] = a * double(np->grad[i]);
            np->inputs[0]->accumulate(g.data(), n);
        };
    }
    return Tensor(node);
}

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (long i = 0; i < x.numel(); ++i) acc += x.data()[i];
    auto node = detail::make_result({1}, {static_cast<float>(acc)}, PrimitiveKind::sum, {x.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        const long n = x.numel();
        node->backprop = [np, n]() {
            std::vector<double> g(static_cast<size_t>(n), double(np->grad[0]));
            np->inputs[0]->accumulate(g.data(), n);
        };
    }
    return Tensor(node);
}

inline Tensor transpose(const Tensor& x) {
    detail::require(x.is_matrix(), PrimitiveKind::transpose, "expects a matrix, got " + shape_str(x.shape()));
    const int r = x.rows(), c = x.cols();
    std::vector<float> out(static_cast<size_t>(r) * c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[size_t(j) * r + i] = x.data()[size_t(i) * c + j];
    auto node = detail::make_result({c, r}, std::move(out), PrimitiveKind::transpose, {x.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, r, c]() {
            std::vector<double> g(size_t(r) * c);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) g[size_t(i) * c + j] = np->grad[size_t(j) * r + i];
            np->inputs[0]->accumulate(g.data(), long(r) * c);
        };
    }
    return Tensor(node);
}

// Half-open [begin, end) slice along `axis` (0 = rows, 1 = cols; a 1-D tensor
// slices along its only axis).
inline Tensor slice(const Tensor& x, int axis, int begin, int end) {
    const bool vec = x.is_vector();
    detail::require(axis == 0 || (axis == 1 && !vec), PrimitiveKind::slice,
                    "bad axis for " + shape_str(x.shape()));
    const int extent = vec ? int(x.numel()) : (axis == 0 ? x.rows() : x.cols());
    detail::require(0 <= begin && begin < end && end <= extent, PrimitiveKind::slice,
                    "range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of bounds for " +
                        shape_str(x.shape()));
    std::vector<int> out_shape;
    std::vector<float> out;
    const int r = x.rows(), c = x.cols();
    if (vec) {
        out_shape = {end - begin};
        out.assign(x.data() + begin, x.data() + end);
    } else if (axis == 0) {
        out_shape = {end - begin, c};
        out.assign(x.data() + size_t(begin) * c, x.data() + size_t(end) * c);
    } else {
        out_shape = {r, end - begin};
        out.resize(size_t(r) * (end - begin));
        for (int i = 0; i < r; ++i)
            for (int j = begin; j < end; ++j) out[size_t(i) * (end - begin) + (j - begin)] = x.at(i, j);
    }
    auto node = detail::make_result(std::move(out_shape), std::move(out), PrimitiveKind::slice, {x.node()});
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, vec, axis, begin, end, r, c]() {
            auto& xin = *np->inputs[0];
            if (!xin.requires_grad) return;
            if (xin.grad.empty()) xin.grad.assign(xin.value.size(), 0.0f);
            if (vec) {
                for (int i = begin; i < end; ++i) xin.grad[i] += np->grad[i - begin];
            } else if (axis == 0) {
                for (int i = begin; i < end; ++i)
                    for (int j = 0; j < c; ++j)
                        xin.grad[size_t(i) * c + j] += np->grad[size_t(i - begin) * c + j];
            } else {
                const int w = end - begin;
                for (int i = 0; i < r; ++i)
                    for (int j = begin; j < end; ++j)
                        xin.grad[size_t(i) * c + j] += np->grad[size_t(i) * w + (j - begin)];
            }
        };
    }
    return Tensor(node);
}

// Concatenate along `axis` (0 = stack rows, 1 = widen; 1-D tensors chain).
inline Tensor concat(const std::vector<Tensor>& parts, int axis = 0) {
    detail::require(!parts.empty(), PrimitiveKind::concat, "no inputs");
    const bool vec = parts[0].is_vector();
    std::vector<int> out_shape;
    std::vector<float> out;
    std::vector<NodePtr> nodes;
    nodes.reserve(parts.size());
    if (vec) {
        long total = 0;
        for (const auto& p : parts) {
            detail::require(p.is_vector(), PrimitiveKind::concat, "rank mismatch");
            total += p.numel();
        }
        out_shape = {int(total)};
        out.reserve(total);
        for (const auto& p : parts) out.insert(out.end(), p.data(), p.data() + p.numel());
    } else if (axis == 0) {
        const int c = parts[0].cols();
        int rtot = 0;
        for (const auto& p : parts) {
            detail::require(p.is_matrix() && p.cols() == c, PrimitiveKind::concat,
                            "column mismatch: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
            rtot += p.rows();
        }
        out_shape = {rtot, c};
        out.reserve(size_t(rtot) * c);
        for (const auto& p : parts) out.insert(out.end(), p.data(), p.data() + p.numel());
    } else {
        const int r = parts[0].rows();
        int ctot = 0;
        for (const auto& p : parts) {
            detail::require(p.is_matrix() && p.rows() == r, PrimitiveKind::concat,
                            "row mismatch: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
            ctot += p.cols();
        }
        out_shape = {r, ctot};
        out.resize(size_t(r) * ctot);
        int off = 0;
        for (const auto& p : parts) {
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < p.cols(); ++j) out[size_t(i) * ctot + off + j] = p.at(i, j);
            off += p.cols();
        }
    }
    for (const auto& p : parts) nodes.push_back(p.node());
    auto node = detail::make_result(std::move(out_shape), std::move(out), PrimitiveKind::concat, std::move(nodes));
    if (node->requires_grad) {
        TensorNode* np = node.get();
        node->backprop = [np, vec, axis]() {
            if (vec || axis == 0) {
                size_t off = 0;
                for (auto& in : np->inputs) {
                    if (in->requires_grad) {
                        if (in->grad.empty()) in->grad.assign(in->value.size(), 0.0f);
                        for (size_t i = 0; i < in->value.size(); ++i) in->grad[i] += np->grad[off + i];
                    }
                    off += in->value.size();
                }
            } else {
                const int r = np->shape[0], ctot = np->shape[1];
                int off = 0;
                for (auto& in : np->inputs) {
                    const int c = in->shape[1];
                    if (in->requires_grad) {
                        if (in->grad.empty()) in->grad.assign(in->value.size(), 0.0f);
                        for (int i = 0; i < r; ++i)
                            for (int j = 0; j < c; ++j)
                                in->grad[size_t(i) * c + j] += np->grad[size_t(i) * ctot + off + j];
                    }
                    off += c;
                }
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Generic dispatch (used by tests that sweep every primitive) and backward.
// ---------------------------------------------------------------------------

struct ForwardAttrs {
    double a = 1.0, b = 0.0;          // affine
    double lo = 0.0, hi = 1.0;        // clamp
    double temperature = 1.0;         // kl_temperature
    double eps = 1e-5;                // layer_norm
    int axis = 0, begin = 0, end = 0; // slice / concat
};

inline Tensor forward(PrimitiveKind kind, const std::vector<Tensor>& in, const ForwardAttrs& attrs = {}) {
    auto want = [&](size_t n) {
        detail::require(in.size() == n, kind,
                        "expects " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
    };
    switch (kind) {
        case PrimitiveKind::matmul: want(2); return matmul(in[0], in[1]);
        case PrimitiveKind::add: want(2); return add(in[0], in[1]);
        case PrimitiveKind::mul: want(2); return mul(in[0], in[1]);
        case PrimitiveKind::row_scale: want(2); return row_scale(in[0], in[1]);
        case PrimitiveKind::col_scale: want(2); return col_scale(in[0], in[1]);
        case PrimitiveKind::gelu: want(1); return gelu(in[0]);
        case PrimitiveKind::softmax: want(1); return softmax(in[0]);
        case PrimitiveKind::layer_norm: want(3); return layer_norm(in[0], in[1], in[2], attrs.eps);
        case PrimitiveKind::mse: want(2); return mse(in[0], in[1]);
        case PrimitiveKind::kl_temperature: want(2); return kl_temperature(in[0], in[1], attrs.temperature);
        case PrimitiveKind::sigmoid: want(1); return sigmoid(in[0]);
        case PrimitiveKind::log: want(1); return log(in[0]);
        case PrimitiveKind::clamp: want(1); return clamp(in[0], attrs.lo, attrs.hi);
        case PrimitiveKind::affine: want(1); return affine(in[0], attrs.a, attrs.b);
        case PrimitiveKind::sum: want(1); return sum(in[0]);
        case PrimitiveKind::transpose: want(1); return transpose(in[0]);
        case PrimitiveKind::slice: want(1); return slice(in[0], attrs.axis, attrs.begin, attrs.end);
        case PrimitiveKind::concat: return concat(in, attrs.axis);
        case PrimitiveKind::leaf: break;
    }
    throw ShapeError("forward: leaf is not a computable primitive");
}

// Reverse-mode sweep from a scalar root. Gradients accumulate additively into
// every requires_grad leaf reachable from the root; call zero_grad between
// independent evaluations.
inline void backward(const Tensor& root) {
    if (!root.is_scalar()) throw ShapeError("backward: root must be a scalar, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    // Iterative post-order DFS; the provenance graph is acyclic by construction.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            TensorNode* child = node->inputs[idx++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad.assign(1, 1.0f);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backprop && !n->grad.empty()) n->backprop();
    }
}

inline Tensor randn(std::vector<int> shape, Rng& rng, double mean, double stddev, bool requires_grad = false) {
    std::normal_distribution<double> dist(mean, stddev);
    std::vector<float> d(static_cast<size_t>(numel_of(shape)));
    for (auto& v : d) v = static_cast<float>(dist(rng));
    return Tensor::from(std::move(shape), std::move(d), requires_grad);
}

inline bool all_finite(const Tensor& t) {
    for (long i = 0; i < t.numel(); ++i)
        if (!std::isfinite(t.data()[i])) return false;
    return true;
}

}  // namespace prunekit
