#pragma once

// Differentiable op registry. Every op validates shapes, guards finiteness
// and registers an exact reverse-mode adjoint. Broadcasting is restricted to
// leading dims: the second operand must be a scalar or a suffix of the first
// operand's shape.

#include "emfuse/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

namespace emfuse {

namespace detail {

using EigenRowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMat>;
using ConstMatMap = Eigen::Map<const EigenRowMat>;

enum class BroadcastKind { Same, Scalar, Suffix };

inline BroadcastKind broadcast_kind(const char* op, const Shape& a, const Shape& b) {
    if (a == b) return BroadcastKind::Same;
    if (shape_numel(b) == 1) return BroadcastKind::Scalar;
    if (b.size() < a.size() && std::equal(b.begin(), b.end(), a.end() - static_cast<long>(b.size()))) {
        return BroadcastKind::Suffix;
    }
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void accumulate_reduced(std::vector<double>& dst, const std::vector<double>& src, BroadcastKind kind) {
    switch (kind) {
        case BroadcastKind::Same:
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
            break;
        case BroadcastKind::Scalar: {
            double total = 0.0;
            for (double v : src) total += v;
            dst[0] += total;
            break;
        }
        case BroadcastKind::Suffix: {
            const std::size_t inner = dst.size();
            for (std::size_t i = 0; i < src.size(); ++i) dst[i % inner] += src[i];
            break;
        }
    }
}

template <typename Fwd, typename DfA, typename DfB>
Tensor elementwise_binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DfA dfa, DfB dfb) {
    const BroadcastKind kind = broadcast_kind(name, a.shape(), b.shape());
    const std::size_t n = static_cast<std::size_t>(a.numel());
    const std::size_t inner = static_cast<std::size_t>(b.numel());
    std::vector<double> out(n);
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i % inner]);
    return make_op_output(
        a.shape(), std::move(out), {a, b},
        [kind, dfa, dfb](TensorNode& self) {
            Tensor pa_t = self.parents[0];
            Tensor pb_t = self.parents[1];
            const std::size_t n2 = self.values.size();
            const std::size_t inner2 = pb_t.values().size();
            const double* av = pa_t.data();
            const double* bv = pb_t.data();
            if (pa_t.requires_grad() || pa_t.node()->backward_fn) {
                auto& ga = pa_t.node()->grad;
                if (!ga.empty()) {
                    for (std::size_t i = 0; i < n2; ++i) ga[i] += self.grad[i] * dfa(av[i], bv[i % inner2]);
                }
            }
            if (pb_t.requires_grad() || pb_t.node()->backward_fn) {
                auto& gb = pb_t.node()->grad;
                if (!gb.empty()) {
                    std::vector<double> contrib(n2);
                    for (std::size_t i = 0; i < n2; ++i) contrib[i] = self.grad[i] * dfb(av[i], bv[i % inner2]);
                    accumulate_reduced(gb, contrib, kind);
                }
            }
        },
        name);
}

template <typename Fwd, typename Df>
Tensor elementwise_unary(const char* name, const Tensor& a, Fwd fwd, Df df) {
    const std::size_t n = static_cast<std::size_t>(a.numel());
    std::vector<double> out(n);
    const double* pa = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
    return make_op_output(
        a.shape(), std::move(out), {a},
        [df](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            const double* av = p.data();
            for (std::size_t i = 0; i < self.values.size(); ++i) g[i] += self.grad[i] * df(av[i]);
        },
        name);
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> strides(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
        strides[static_cast<std::size_t>(i)] =
            strides[static_cast<std::size_t>(i) + 1] * static_cast<std::size_t>(s[static_cast<std::size_t>(i) + 1]);
    }
    return strides;
}

// out[j] = in[perm_map[j]] index mapping for a permutation of axes.
inline std::vector<std::size_t> permutation_index_map(const Shape& in_shape, const std::vector<int>& axes) {
    const std::size_t n = static_cast<std::size_t>(shape_numel(in_shape));
    Shape out_shape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
    const auto in_strides = row_major_strides(in_shape);
    const auto out_strides = row_major_strides(out_shape);
    std::vector<std::size_t> map(n);
    std::vector<int> idx(axes.size(), 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t src = 0;
        for (std::size_t d = 0; d < axes.size(); ++d) {
            src += static_cast<std::size_t>(idx[d]) * in_strides[static_cast<std::size_t>(axes[d])];
        }
        map[flat] = src;
        for (int d = static_cast<int>(axes.size()) - 1; d >= 0; --d) {
            if (++idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
            idx[static_cast<std::size_t>(d)] = 0;
        }
    }
    return map;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Elementwise arithmetic
// --------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& a, double c) {
    return detail::elementwise_unary(
        "scale", a, [c](double x) { return c * x; }, [c](double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    return detail::elementwise_unary(
        "add_scalar", a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor reciprocal(const Tensor& a) {
    return detail::elementwise_unary(
        "reciprocal", a, [](double x) { return 1.0 / x; }, [](double x) { return -1.0 / (x * x); });
}

// --------------------------------------------------------------------------
// Activations
// --------------------------------------------------------------------------

inline Tensor relu(const Tensor& a) {
    return detail::elementwise_unary(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::elementwise_unary(
        "gelu", a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
}

inline Tensor sigmoid(const Tensor& a) {
    auto sig = [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); };
    return detail::elementwise_unary(
        "sigmoid", a, sig, [sig](double x) {
            const double s = sig(x);
            return s * (1.0 - s);
        });
}

// --------------------------------------------------------------------------
// Matrix products (Eigen GEMM kernel behind the op contract)
// --------------------------------------------------------------------------

// a: (..., M, K) contracted with a 2-D weight b: (K, N) -> (..., M, N).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() != 2) {
        throw std::invalid_argument("matmul: need (...,M,K) x (K,N), got " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    const int k = a.shape()[static_cast<std::size_t>(a.rank() - 1)];
    if (k != b.shape()[0]) {
        throw std::invalid_argument("matmul: inner dims disagree " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    const int n = b.shape()[1];
    const std::int64_t rows = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(static_cast<std::size_t>(rows * n));
    {
        detail::ConstMatMap ma(a.data(), rows, k);
        detail::ConstMatMap mb(b.data(), k, n);
        detail::MatMap mo(out.data(), rows, n);
        mo.noalias() = ma * mb;
    }
    return make_op_output(
        std::move(out_shape), std::move(out), {a, b},
        [rows, k, n](TensorNode& self) {
            Tensor pa = self.parents[0];
            Tensor pb = self.parents[1];
            detail::ConstMatMap g(self.grad.data(), rows, n);
            if (!pa.node()->grad.empty()) {
                detail::ConstMatMap mb(pb.data(), k, n);
                detail::MatMap ga(pa.node()->grad.data(), rows, k);
                ga.noalias() += g * mb.transpose();
            }
            if (!pb.node()->grad.empty()) {
                detail::ConstMatMap ma(pa.data(), rows, k);
                detail::MatMap gb(pb.node()->grad.data(), k, n);
                gb.noalias() += ma.transpose() * g;
            }
        },
        "matmul");
}

// Batched product: (B, M, K) x (B, K, N) -> (B, M, N).
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1]) {
        throw std::invalid_argument("bmm: need (B,M,K) x (B,K,N), got " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    const int batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
    std::vector<double> out(static_cast<std::size_t>(batch) * m * n);
    for (int i = 0; i < batch; ++i) {
        detail::ConstMatMap ma(a.data() + static_cast<std::size_t>(i) * m * k, m, k);
        detail::ConstMatMap mb(b.data() + static_cast<std::size_t>(i) * k * n, k, n);
        detail::MatMap mo(out.data() + static_cast<std::size_t>(i) * m * n, m, n);
        mo.noalias() = ma * mb;
    }
    return make_op_output(
        {batch, m, n}, std::move(out), {a, b},
        [batch, m, k, n](TensorNode& self) {
            Tensor pa = self.parents[0];
            Tensor pb = self.parents[1];
            for (int i = 0; i < batch; ++i) {
                detail::ConstMatMap g(self.grad.data() + static_cast<std::size_t>(i) * m * n, m, n);
                if (!pa.node()->grad.empty()) {
                    detail::ConstMatMap mb(pb.data() + static_cast<std::size_t>(i) * k * n, k, n);
                    detail::MatMap ga(pa.node()->grad.data() + static_cast<std::size_t>(i) * m * k, m, k);
                    ga.noalias() += g * mb.transpose();
                }
                if (!pb.node()->grad.empty()) {
                    detail::ConstMatMap ma(pa.data() + static_cast<std::size_t>(i) * m * k, m, k);
                    detail::MatMap gb(pb.node()->grad.data() + static_cast<std::size_t>(i) * k * n, k, n);
                    gb.noalias() += ma.transpose() * g;
                }
            }
        },
        "bmm");
}

// --------------------------------------------------------------------------
// Layout ops
// --------------------------------------------------------------------------

inline Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    if (static_cast<int>(axes.size()) != a.rank()) {
        throw std::invalid_argument("permute: axes rank mismatch for " + shape_str(a.shape()));
    }
    std::vector<bool> used(axes.size(), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= a.rank() || used[static_cast<std::size_t>(ax)]) {
            throw std::invalid_argument("permute: invalid axes permutation");
        }
        used[static_cast<std::size_t>(ax)] = true;
    }
    Shape out_shape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = a.shape()[static_cast<std::size_t>(axes[i])];
    auto map = detail::permutation_index_map(a.shape(), axes);
    std::vector<double> out(map.size());
    const double* src = a.data();
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = src[map[i]];
    return make_op_output(
        std::move(out_shape), std::move(out), {a},
        [map = std::move(map)](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
        },
        "permute");
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: expected 2-D tensor, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

inline Tensor transpose_last2(const Tensor& a) {
    if (a.rank() < 2) throw std::invalid_argument("transpose_last2: rank < 2");
    std::vector<int> axes(static_cast<std::size_t>(a.rank()));
    for (int i = 0; i < a.rank(); ++i) axes[static_cast<std::size_t>(i)] = i;
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(a, axes);
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    check_shape_valid(new_shape);
    if (shape_numel(new_shape) != a.numel()) {
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(new_shape));
    }
    return make_op_output(
        std::move(new_shape), a.values(), {a},
        [](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        },
        "reshape");
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    std::int64_t axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) throw std::invalid_argument("concat: rank mismatch");
        for (int d = 0; d < rank; ++d) {
            if (d != axis && p.shape()[static_cast<std::size_t>(d)] != out_shape[static_cast<std::size_t>(d)]) {
                throw std::invalid_argument("concat: shape mismatch " + shape_str(out_shape) + " vs " +
                                            shape_str(p.shape()));
            }
        }
        axis_total += p.shape()[static_cast<std::size_t>(axis)];
    }
    out_shape[static_cast<std::size_t>(axis)] = static_cast<int>(axis_total);

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

    std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::vector<std::int64_t> part_axis(parts.size());
    std::int64_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const std::int64_t ax = parts[p].shape()[static_cast<std::size_t>(axis)];
        part_axis[p] = ax;
        const double* src = parts[p].data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy(src + o * ax * inner, src + (o + 1) * ax * inner,
                      out.begin() + (o * axis_total + offset) * inner);
        }
        offset += ax;
    }
    return make_op_output(
        std::move(out_shape), std::move(out), parts,
        [outer, inner, axis_total, part_axis](TensorNode& self) {
            std::int64_t off = 0;
            for (std::size_t p = 0; p < self.parents.size(); ++p) {
                Tensor parent = self.parents[p];
                const std::int64_t ax = part_axis[p];
                auto& g = parent.node()->grad;
                if (!g.empty()) {
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* src = self.grad.data() + (o * axis_total + off) * inner;
                        double* dst = g.data() + o * ax * inner;
                        for (std::int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
                    }
                }
                off += ax;
            }
        },
        "concat");
}

// Pick index i along axis 0; adjoint scatters back into that slice.
inline Tensor select(const Tensor& a, int index) {
    if (a.rank() < 1) throw std::invalid_argument("select: scalar input");
    if (index < 0 || index >= a.shape()[0]) throw std::invalid_argument("select: index out of range");
    Shape out_shape(a.shape().begin() + 1, a.shape().end());
    const std::size_t slice = static_cast<std::size_t>(shape_numel(out_shape));
    std::vector<double> out(a.data() + slice * static_cast<std::size_t>(index),
                            a.data() + slice * static_cast<std::size_t>(index + 1));
    return make_op_output(
        std::move(out_shape), std::move(out), {a},
        [index, slice](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            double* dst = g.data() + slice * static_cast<std::size_t>(index);
            for (std::size_t i = 0; i < slice; ++i) dst[i] += self.grad[i];
        },
        "select");
}

// (s...) -> (B, s...): shared tensor repeated across a new leading batch axis.
inline Tensor broadcast_batch(const Tensor& a, int batch) {
    if (batch <= 0) throw std::invalid_argument("broadcast_batch: batch must be positive");
    Shape out_shape;
    out_shape.push_back(batch);
    out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
    const std::size_t n = static_cast<std::size_t>(a.numel());
    std::vector<double> out(static_cast<std::size_t>(batch) * n);
    for (int b = 0; b < batch; ++b) std::copy(a.data(), a.data() + n, out.begin() + static_cast<std::size_t>(b) * n);
    return make_op_output(
        std::move(out_shape), std::move(out), {a},
        [batch, n](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            for (int b = 0; b < batch; ++b) {
                const double* src = self.grad.data() + static_cast<std::size_t>(b) * n;
                for (std::size_t i = 0; i < n; ++i) g[i] += src[i];
            }
        },
        "broadcast_batch");
}

// (B, d) -> (B, N, d): per-batch vector repeated over a token axis.
inline Tensor broadcast_tokens(const Tensor& a, int tokens) {
    if (a.rank() != 2) throw std::invalid_argument("broadcast_tokens: expected (B,d), got " + shape_str(a.shape()));
    if (tokens <= 0) throw std::invalid_argument("broadcast_tokens: tokens must be positive");
    const int batch = a.shape()[0], d = a.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(batch) * tokens * d);
    for (int b = 0; b < batch; ++b) {
        const double* src = a.data() + static_cast<std::size_t>(b) * d;
        for (int t = 0; t < tokens; ++t) {
            std::copy(src, src + d, out.begin() + (static_cast<std::size_t>(b) * tokens + t) * d);
        }
    }
    return make_op_output(
        {batch, tokens, d}, std::move(out), {a},
        [batch, tokens, d](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            for (int b = 0; b < batch; ++b) {
                double* dst = g.data() + static_cast<std::size_t>(b) * d;
                for (int t = 0; t < tokens; ++t) {
                    const double* src = self.grad.data() + (static_cast<std::size_t>(b) * tokens + t) * d;
                    for (int i = 0; i < d; ++i) dst[i] += src[i];
                }
            }
        },
        "broadcast_tokens");
}

// --------------------------------------------------------------------------
// Reductions
// --------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.values()) total += v;
    return make_op_output(
        {}, {total}, {a},
        [](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            for (double& gi : g) gi += self.grad[0];
        },
        "sum");
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double total = 0.0;
    for (double v : a.values()) total += v;
    return make_op_output(
        {}, {total * inv}, {a},
        [inv](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            for (double& gi : g) gi += self.grad[0] * inv;
        },
        "mean");
}

namespace detail {

inline Tensor reduce_axis(const char* name, const Tensor& a, int axis, bool take_mean) {
    if (axis < 0 || axis >= a.rank()) throw std::invalid_argument(std::string(name) + ": axis out of range");
    std::int64_t outer = 1, inner = 1;
    const int n = a.shape()[static_cast<std::size_t>(axis)];
    for (int d = 0; d < axis; ++d) outer *= a.shape()[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < a.rank(); ++d) inner *= a.shape()[static_cast<std::size_t>(d)];
    Shape out_shape;
    for (int d = 0; d < a.rank(); ++d) {
        if (d != axis) out_shape.push_back(a.shape()[static_cast<std::size_t>(d)]);
    }
    const double w = take_mean ? 1.0 / n : 1.0;
    std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
    const double* src = a.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (int j = 0; j < n; ++j) {
            const double* row = src + (o * n + j) * inner;
            double* dst = out.data() + o * inner;
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += row[i];
        }
    }
    if (take_mean) {
        for (double& v : out) v *= w;
    }
    return make_op_output(
        std::move(out_shape), std::move(out), {a},
        [outer, inner, n, w](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            for (std::int64_t o = 0; o < outer; ++o) {
                const double* src = self.grad.data() + o * inner;
                for (int j = 0; j < n; ++j) {
                    double* dst = g.data() + (o * n + j) * inner;
                    for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i] * w;
                }
            }
        },
        name);
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& a, int axis) { return detail::reduce_axis("sum_axis", a, axis, false); }
inline Tensor mean_axis(const Tensor& a, int axis) { return detail::reduce_axis("mean_axis", a, axis, true); }

// out[k, ...] = a[k, ...] * v[k]; the per-row scaling used by the EM M-step.
inline Tensor scale_rows(const Tensor& a, const Tensor& v) {
    if (a.rank() < 1 || v.rank() != 1 || v.shape()[0] != a.shape()[0]) {
        throw std::invalid_argument("scale_rows: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(v.shape()));
    }
    const int rows = a.shape()[0];
    const std::size_t inner = static_cast<std::size_t>(a.numel() / rows);
    std::vector<double> out(static_cast<std::size_t>(a.numel()));
    for (int r = 0; r < rows; ++r) {
        const double s = v.data()[r];
        const double* src = a.data() + static_cast<std::size_t>(r) * inner;
        double* dst = out.data() + static_cast<std::size_t>(r) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i] * s;
    }
    return make_op_output(
        a.shape(), std::move(out), {a, v},
        [rows, inner](TensorNode& self) {
            Tensor pa = self.parents[0];
            Tensor pv = self.parents[1];
            for (int r = 0; r < rows; ++r) {
                const double s = pv.data()[r];
                const double* g = self.grad.data() + static_cast<std::size_t>(r) * inner;
                if (!pa.node()->grad.empty()) {
                    double* dst = pa.node()->grad.data() + static_cast<std::size_t>(r) * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i] * s;
                }
                if (!pv.node()->grad.empty()) {
                    const double* av = pa.data() + static_cast<std::size_t>(r) * inner;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < inner; ++i) acc += g[i] * av[i];
                    pv.node()->grad[static_cast<std::size_t>(r)] += acc;
                }
            }
        },
        "scale_rows");
}

// --------------------------------------------------------------------------
// Normalizers
// --------------------------------------------------------------------------

// Max-subtracted softmax along `axis` with temperature tau.
inline Tensor softmax(const Tensor& a, int axis, double tau = 1.0) {
    if (tau <= 0.0) throw std::invalid_argument("softmax: temperature must be positive");
    if (axis < 0 || axis >= a.rank()) throw std::invalid_argument("softmax: axis out of range");
    std::int64_t outer = 1, inner = 1;
    const int n = a.shape()[static_cast<std::size_t>(axis)];
    for (int d = 0; d < axis; ++d) outer *= a.shape()[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < a.rank(); ++d) inner *= a.shape()[static_cast<std::size_t>(d)];
    std::vector<double> out(static_cast<std::size_t>(a.numel()));
    const double* src = a.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::size_t base = static_cast<std::size_t>(o * n * inner + i);
            double m = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < n; ++j) m = std::max(m, src[base + static_cast<std::size_t>(j) * inner]);
            double denom = 0.0;
            for (int j = 0; j < n; ++j) {
                const double e = std::exp((src[base + static_cast<std::size_t>(j) * inner] - m) / tau);
                out[base + static_cast<std::size_t>(j) * inner] = e;
                denom += e;
            }
            for (int j = 0; j < n; ++j) out[base + static_cast<std::size_t>(j) * inner] /= denom;
        }
    }
    return make_op_output(
        a.shape(), std::move(out), {a},
        [outer, inner, n, tau](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            const double* y = self.values.data();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t i = 0; i < inner; ++i) {
                    const std::size_t base = static_cast<std::size_t>(o * n * inner + i);
                    double dot = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const std::size_t k = base + static_cast<std::size_t>(j) * inner;
                        dot += self.grad[k] * y[k];
                    }
                    for (int j = 0; j < n; ++j) {
                        const std::size_t k = base + static_cast<std::size_t>(j) * inner;
                        g[k] += y[k] * (self.grad[k] - dot) / tau;
                    }
                }
            }
        },
        "softmax");
}

// Layer normalization over the last axis with affine gamma/beta.
inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (a.rank() < 1) throw std::invalid_argument("layer_norm: scalar input");
    const int d = a.shape().back();
    if (gamma.rank() != 1 || gamma.shape()[0] != d || beta.rank() != 1 || beta.shape()[0] != d) {
        throw std::invalid_argument("layer_norm: affine shape mismatch for " + shape_str(a.shape()));
    }
    const std::int64_t rows = a.numel() / d;
    std::vector<double> out(static_cast<std::size_t>(a.numel()));
    std::vector<double> xhat(out.size());
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    const double* src = a.data();
    const double* gm = gamma.data();
    const double* bt = beta.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = src + r * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= d;
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = istd;
        for (int j = 0; j < d; ++j) {
            const double xh = (row[j] - mu) * istd;
            xhat[static_cast<std::size_t>(r * d + j)] = xh;
            out[static_cast<std::size_t>(r * d + j)] = gm[j] * xh + bt[j];
        }
    }
    return make_op_output(
        a.shape(), std::move(out), {a, gamma, beta},
        [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode& self) {
            Tensor pa = self.parents[0];
            Tensor pg = self.parents[1];
            Tensor pb = self.parents[2];
            const double* gm = pg.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* g = self.grad.data() + r * d;
                const double* xh = xhat.data() + r * d;
                const double istd = inv_std[static_cast<std::size_t>(r)];
                if (!pa.node()->grad.empty()) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double dxh = g[j] * gm[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= d;
                    mean_dxhat_xhat /= d;
                    double* dst = pa.node()->grad.data() + r * d;
                    for (int j = 0; j < d; ++j) {
                        const double dxh = g[j] * gm[j];
                        dst[j] += istd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                if (!pg.node()->grad.empty()) {
                    for (int j = 0; j < d; ++j) pg.node()->grad[static_cast<std::size_t>(j)] += g[j] * xh[j];
                }
                if (!pb.node()->grad.empty()) {
                    for (int j = 0; j < d; ++j) pb.node()->grad[static_cast<std::size_t>(j)] += g[j];
                }
            }
        },
        "layer_norm");
}

// logsumexp over the last axis, max-shifted.
inline Tensor logsumexp_last(const Tensor& a) {
    if (a.rank() < 1) throw std::invalid_argument("logsumexp_last: scalar input");
    const int d = a.shape().back();
    const std::int64_t rows = a.numel() / d;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    std::vector<double> out(static_cast<std::size_t>(rows));
    const double* src = a.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = src + r * d;
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < d; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += std::exp(row[j] - m);
        out[static_cast<std::size_t>(r)] = m + std::log(s);
    }
    return make_op_output(
        std::move(out_shape), std::move(out), {a},
        [rows, d](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            const double* src = p.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double lse = self.values[static_cast<std::size_t>(r)];
                const double gr = self.grad[static_cast<std::size_t>(r)];
                for (int j = 0; j < d; ++j) {
                    g[static_cast<std::size_t>(r * d + j)] += gr * std::exp(src[r * d + j] - lse);
                }
            }
        },
        "logsumexp_last");
}

// Diagonal of a square matrix.
inline Tensor take_diag(const Tensor& a) {
    if (a.rank() != 2 || a.shape()[0] != a.shape()[1]) {
        throw std::invalid_argument("take_diag: expected square matrix, got " + shape_str(a.shape()));
    }
    const int n = a.shape()[0];
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = a.data()[static_cast<std::size_t>(i) * n + i];
    return make_op_output(
        {n}, std::move(out), {a},
        [n](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i) * n + i] += self.grad[static_cast<std::size_t>(i)];
        },
        "take_diag");
}

// --------------------------------------------------------------------------
// Loss kernels and resampling
// --------------------------------------------------------------------------

// Elementwise binary cross-entropy on logits in the stable form
// max(x,0) - x*y + log1p(exp(-|x|)). Targets are treated as constants.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape()) {
        throw std::invalid_argument("bce_with_logits: shape mismatch " + shape_str(logits.shape()) + " vs " +
                                    shape_str(targets.shape()));
    }
    if (targets.requires_grad()) throw std::invalid_argument("bce_with_logits: targets must not require grad");
    const std::size_t n = static_cast<std::size_t>(logits.numel());
    std::vector<double> out(n);
    const double* x = logits.data();
    const double* y = targets.data();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::max(x[i], 0.0) - x[i] * y[i] + std::log1p(std::exp(-std::abs(x[i])));
    }
    return make_op_output(
        logits.shape(), std::move(out), {logits, targets},
        [](TensorNode& self) {
            Tensor px = self.parents[0];
            Tensor py = self.parents[1];
            auto& g = px.node()->grad;
            if (g.empty()) return;
            const double* x = px.data();
            const double* y = py.data();
            for (std::size_t i = 0; i < self.values.size(); ++i) {
                const double s = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
                g[i] += self.grad[i] * (s - y[i]);
            }
        },
        "bce_with_logits");
}

namespace detail {

struct ResampleTap {
    std::size_t src;
    double w;
};

// Half-pixel-center bilinear stencil from (h,w) to (out_h,out_w).
inline std::vector<std::array<ResampleTap, 4>> bilinear_stencil(int h, int w, int out_h, int out_w) {
    std::vector<std::array<ResampleTap, 4>> taps(static_cast<std::size_t>(out_h) * out_w);
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (int i = 0; i < out_h; ++i) {
        double fy = (i + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, h - 1);
        const double ty = fy - y0;
        for (int j = 0; j < out_w; ++j) {
            double fx = (j + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, w - 1);
            const double tx = fx - x0;
            auto& t = taps[static_cast<std::size_t>(i) * out_w + j];
            t[0] = {static_cast<std::size_t>(y0) * w + x0, (1 - ty) * (1 - tx)};
            t[1] = {static_cast<std::size_t>(y0) * w + x1, (1 - ty) * tx};
            t[2] = {static_cast<std::size_t>(y1) * w + x0, ty * (1 - tx)};
            t[3] = {static_cast<std::size_t>(y1) * w + x1, ty * tx};
        }
    }
    return taps;
}

}  // namespace detail

// (B, C, h, w) -> (B, C, out_h, out_w), half-pixel-center sampling.
inline Tensor upsample_bilinear(const Tensor& a, int out_h, int out_w) {
    if (a.rank() != 4) throw std::invalid_argument("upsample_bilinear: expected (B,C,h,w), got " + shape_str(a.shape()));
    const int batch = a.shape()[0], ch = a.shape()[1], h = a.shape()[2], w = a.shape()[3];
    auto taps = detail::bilinear_stencil(h, w, out_h, out_w);
    const std::size_t in_plane = static_cast<std::size_t>(h) * w;
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    const std::size_t planes = static_cast<std::size_t>(batch) * ch;
    std::vector<double> out(planes * out_plane);
    const double* src = a.data();
    for (std::size_t p = 0; p < planes; ++p) {
        const double* in = src + p * in_plane;
        double* dst = out.data() + p * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) {
            const auto& t = taps[i];
            dst[i] = t[0].w * in[t[0].src] + t[1].w * in[t[1].src] + t[2].w * in[t[2].src] + t[3].w * in[t[3].src];
        }
    }
    return make_op_output(
        {batch, ch, out_h, out_w}, std::move(out), {a},
        [planes, in_plane, out_plane, taps = std::move(taps)](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            for (std::size_t pl = 0; pl < planes; ++pl) {
                double* dst = g.data() + pl * in_plane;
                const double* src = self.grad.data() + pl * out_plane;
                for (std::size_t i = 0; i < out_plane; ++i) {
                    const auto& t = taps[i];
                    dst[t[0].src] += t[0].w * src[i];
                    dst[t[1].src] += t[1].w * src[i];
                    dst[t[2].src] += t[2].w * src[i];
                    dst[t[3].src] += t[3].w * src[i];
                }
            }
        },
        "upsample_bilinear");
}

// Nearest-neighbour variant kept for exactness tests.
inline Tensor upsample_nearest(const Tensor& a, int out_h, int out_w) {
    if (a.rank() != 4) throw std::invalid_argument("upsample_nearest: expected (B,C,h,w), got " + shape_str(a.shape()));
    const int batch = a.shape()[0], ch = a.shape()[1], h = a.shape()[2], w = a.shape()[3];
    std::vector<std::size_t> map(static_cast<std::size_t>(out_h) * out_w);
    for (int i = 0; i < out_h; ++i) {
        const int y = std::min(static_cast<int>(static_cast<double>(i) * h / out_h), h - 1);
        for (int j = 0; j < out_w; ++j) {
            const int x = std::min(static_cast<int>(static_cast<double>(j) * w / out_w), w - 1);
            map[static_cast<std::size_t>(i) * out_w + j] = static_cast<std::size_t>(y) * w + x;
        }
    }
    const std::size_t in_plane = static_cast<std::size_t>(h) * w;
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    const std::size_t planes = static_cast<std::size_t>(batch) * ch;
    std::vector<double> out(planes * out_plane);
    const double* src = a.data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < out_plane; ++i) out[p * out_plane + i] = src[p * in_plane + map[i]];
    }
    return make_op_output(
        {batch, ch, out_h, out_w}, std::move(out), {a},
        [planes, in_plane, out_plane, map = std::move(map)](TensorNode& self) {
            Tensor p = self.parents[0];
            auto& g = p.node()->grad;
            if (g.empty()) return;
            for (std::size_t pl = 0; pl < planes; ++pl) {
                for (std::size_t i = 0; i < out_plane; ++i) {
                    g[pl * in_plane + map[i]] += self.grad[pl * out_plane + i];
                }
            }
        },
        "upsample_nearest");
}

}  // namespace emfuse
