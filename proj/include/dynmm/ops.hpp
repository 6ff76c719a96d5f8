#pragma once

// Differentiable operations on Tensor. No broadcasting except a
// single-element operand in the elementwise ops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dynmm/tensor.hpp"

namespace dynmm {

enum class Activation { relu, sigmoid, tanh };
enum class ElementwiseOp { add, sub, mul };

namespace detail {

struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size()) {
        throw DimensionError(std::string(op) + ": invalid axis " + std::to_string(axis) + " for shape " +
                             shape_str(shape));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

inline void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

// c[m x n] += a[m x k] * b[k x n]; row i of c depends only on row i of a.
inline void gemm_accumulate(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                            std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Backward of out = a*b given gout: ga += gout*b^T, gb += a^T*gout.
inline void matmul_backward(Node& n, std::size_t m, std::size_t k, std::size_t cols) {
    auto& a = *n.parents[0];
    auto& b = *n.parents[1];
    const double* go = n.grad.data();
    if (a.requires_grad) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                double acc = 0.0;
                const double* brow = b.data.data() + p * cols;
                const double* grow = go + i * cols;
                for (std::size_t j = 0; j < cols; ++j) acc += grow[j] * brow[j];
                ga[i * k + p] += acc;
            }
        }
    }
    if (b.requires_grad) {
        auto& gb = b.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = a.data.data() + i * k;
            const double* grow = go + i * cols;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                double* gbrow = gb.data() + p * cols;
                for (std::size_t j = 0; j < cols; ++j) gbrow[j] += av * grow[j];
            }
        }
    }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    detail::gemm_accumulate(a.data().data(), b.data().data(), out.data(), m, k, n);
    MacCounter::add(m * k * n);
    return detail::make_result({m, n}, std::move(out), {a, b},
                               [m, k, n](detail::Node& node) { detail::matmul_backward(node, m, k, n); });
}

// x[m x k] * w[k x n] + bias[n]; the bias add is not counted as MACs.
inline Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_matrix(x, "affine");
    detail::require_matrix(weight, "affine");
    const auto m = x.dim(0), k = x.dim(1), n = weight.dim(1);
    if (weight.dim(0) != k) {
        throw DimensionError("affine: input " + shape_str(x.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    if (bias.numel() != n) {
        throw DimensionError("affine: bias " + shape_str(bias.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * n);
    detail::gemm_accumulate(x.data().data(), weight.data().data(), out.data(), m, k, n);
    MacCounter::add(m * k * n);
    return detail::make_result({m, n}, std::move(out), {x, weight, bias}, [m, k, n](detail::Node& node) {
        detail::matmul_backward(node, m, k, n);
        auto& b = *node.parents[2];
        if (b.requires_grad) {
            auto& gb = b.grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) gb[j] += node.grad[i * n + j];
            }
        }
    });
}

// Pointwise a (op) b. Shapes must match, or one side has a single element.
inline Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
    const bool a_scalar = a.numel() == 1 && b.numel() != 1;
    const bool b_scalar = b.numel() == 1 && a.numel() != 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
        throw DimensionError("elementwise: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const Shape shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(shape);
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = ad[a_scalar ? 0 : i];
        const double y = bd[b_scalar ? 0 : i];
        switch (op) {
            case ElementwiseOp::add: out[i] = x + y; break;
            case ElementwiseOp::sub: out[i] = x - y; break;
            case ElementwiseOp::mul: out[i] = x * y; break;
        }
    }
    MacCounter::add(n);
    return detail::make_result(shape, std::move(out), {a, b}, [op, a_scalar, b_scalar, n](detail::Node& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const auto& g = node.grad;
        if (pa.requires_grad) {
            auto& ga = pa.grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                double d = g[i];
                if (op == ElementwiseOp::mul) d *= pb.data[b_scalar ? 0 : i];
                ga[a_scalar ? 0 : i] += d;
            }
        }
        if (pb.requires_grad) {
            auto& gb = pb.grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                double d = g[i];
                if (op == ElementwiseOp::sub) d = -d;
                if (op == ElementwiseOp::mul) d *= pa.data[a_scalar ? 0 : i];
                gb[b_scalar ? 0 : i] += d;
            }
        }
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::mul, a, b); }

// Multiplication by a constant; not counted.
inline Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= factor;
    return detail::make_result(x.shape(), std::move(out), {x}, [factor](detail::Node& node) {
        auto& p = *node.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * node.grad[i];
    });
}

inline Tensor activation(Activation kind, const Tensor& x) {
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        switch (kind) {
            case Activation::relu: out[i] = in[i] > 0.0 ? in[i] : 0.0; break;
            case Activation::sigmoid: out[i] = 1.0 / (1.0 + std::exp(-in[i])); break;
            case Activation::tanh: out[i] = std::tanh(in[i]); break;
        }
    }
    return detail::make_result(x.shape(), std::move(out), {x}, [kind](detail::Node& node) {
        auto& p = *node.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            double local = 0.0;
            switch (kind) {
                case Activation::relu: local = p.data[i] > 0.0 ? 1.0 : 0.0; break;
                case Activation::sigmoid: local = node.data[i] * (1.0 - node.data[i]); break;
                case Activation::tanh: local = 1.0 - node.data[i] * node.data[i]; break;
            }
            g[i] += local * node.grad[i];
        }
    });
}

inline Tensor relu(const Tensor& x) { return activation(Activation::relu, x); }
inline Tensor sigmoid(const Tensor& x) { return activation(Activation::sigmoid, x); }
inline Tensor tanh(const Tensor& x) { return activation(Activation::tanh, x); }

namespace detail {

inline void softmax_forward(std::span<const double> in, std::span<double> out, AxisSplit s, double inv_temp) {
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t r = 0; r < s.inner; ++r) {
            const std::size_t base = o * s.len * s.inner + r;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < s.len; ++i) mx = std::max(mx, in[base + i * s.inner] * inv_temp);
            double total = 0.0;
            for (std::size_t i = 0; i < s.len; ++i) {
                const double e = std::exp(in[base + i * s.inner] * inv_temp - mx);
                out[base + i * s.inner] = e;
                total += e;
            }
            for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] /= total;
        }
    }
}

// gin += inv_temp * y * (gout - <gout, y>) along the axis.
inline void softmax_backward(std::span<const double> y, std::span<const double> gout, std::span<double> gin,
                             AxisSplit s, double inv_temp) {
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t r = 0; r < s.inner; ++r) {
            const std::size_t base = o * s.len * s.inner + r;
            double dot = 0.0;
            for (std::size_t i = 0; i < s.len; ++i) dot += gout[base + i * s.inner] * y[base + i * s.inner];
            for (std::size_t i = 0; i < s.len; ++i) {
                const std::size_t idx = base + i * s.inner;
                gin[idx] += inv_temp * y[idx] * (gout[idx] - dot);
            }
        }
    }
}

}  // namespace detail

// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto s = detail::split_axis(x.shape(), axis, "softmax");
    std::vector<double> out(x.numel());
    detail::softmax_forward(x.data(), out, s, 1.0);
    return detail::make_result(x.shape(), std::move(out), {x}, [s](detail::Node& node) {
        auto& p = *node.parents[0];
        detail::softmax_backward(node.data, node.grad, p.grad_buffer(), s, 1.0);
    });
}

inline Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    return detail::make_result({1}, {total}, {x}, [](detail::Node& node) {
        auto& p = *node.parents[0];
        auto& g = p.grad_buffer();
        for (auto& v : g) v += node.grad[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

namespace detail {

inline Shape reduced_shape(const Shape& shape, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != axis) out.push_back(shape[i]);
    }
    if (out.empty()) out.push_back(1);
    return out;
}

inline Tensor sum_axis_scaled(const Tensor& x, std::size_t axis, double factor, const char* op) {
    const auto s = split_axis(x.shape(), axis, op);
    const auto in = x.data();
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.len; ++i) {
            for (std::size_t r = 0; r < s.inner; ++r) {
                out[o * s.inner + r] += in[(o * s.len + i) * s.inner + r];
            }
        }
    }
    for (auto& v : out) v *= factor;
    return make_result(reduced_shape(x.shape(), axis), std::move(out), {x}, [s, factor](Node& node) {
        auto& p = *node.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.len; ++i) {
                for (std::size_t r = 0; r < s.inner; ++r) {
                    g[(o * s.len + i) * s.inner + r] += factor * node.grad[o * s.inner + r];
                }
            }
        }
    });
}

}  // namespace detail

inline Tensor sum(const Tensor& x, std::size_t axis) { return detail::sum_axis_scaled(x, axis, 1.0, "sum"); }

inline Tensor mean(const Tensor& x, std::size_t axis) {
    const auto s = detail::split_axis(x.shape(), axis, "mean");
    return detail::sum_axis_scaled(x, axis, 1.0 / static_cast<double>(s.len), "mean");
}

// Index of the maximum along `axis` (lowest index wins ties). Not differentiable.
inline std::vector<std::size_t> max_index(const Tensor& x, std::size_t axis) {
    const auto s = detail::split_axis(x.shape(), axis, "max_index");
    const auto in = x.data();
    std::vector<std::size_t> out(s.outer * s.inner, 0);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t r = 0; r < s.inner; ++r) {
            std::size_t best = 0;
            double best_v = in[o * s.len * s.inner + r];
            for (std::size_t i = 1; i < s.len; ++i) {
                const double v = in[(o * s.len + i) * s.inner + r];
                if (v > best_v) {
                    best_v = v;
                    best = i;
                }
            }
            out[o * s.inner + r] = best;
        }
    }
    return out;
}

inline std::size_t max_index(const Tensor& x) { return max_index(x, 0).front(); }

inline Tensor concat(const std::vector<Tensor>& tensors, std::size_t axis) {
    if (tensors.empty()) throw DimensionError("concat: no inputs");
    const Shape& first = tensors.front().shape();
    if (axis >= first.size()) throw DimensionError("concat: invalid axis " + std::to_string(axis));
    std::vector<std::size_t> lens;
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& t : tensors) {
        const Shape& sh = t.shape();
        bool ok = sh.size() == first.size();
        for (std::size_t i = 0; ok && i < sh.size(); ++i) ok = i == axis || sh[i] == first[i];
        if (!ok) {
            throw DimensionError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(sh));
        }
        lens.push_back(sh[axis]);
        out_shape[axis] += sh[axis];
    }
    const auto s = detail::split_axis(out_shape, axis, "concat");
    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        const auto in = tensors[t].data();
        const std::size_t chunk = lens[t] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(in.begin() + o * chunk, chunk, out.begin() + o * s.len * s.inner + offset * s.inner);
        }
        offset += lens[t];
    }
    return detail::make_result(out_shape, std::move(out), tensors, [s, lens](detail::Node& node) {
        std::size_t off = 0;
        for (std::size_t t = 0; t < lens.size(); ++t) {
            auto& p = *node.parents[t];
            const std::size_t chunk = lens[t] * s.inner;
            if (p.requires_grad) {
                auto& g = p.grad_buffer();
                for (std::size_t o = 0; o < s.outer; ++o) {
                    for (std::size_t i = 0; i < chunk; ++i) {
                        g[o * chunk + i] += node.grad[o * s.len * s.inner + off * s.inner + i];
                    }
                }
            }
            off += lens[t];
        }
    });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return detail::make_result(std::move(shape), std::move(out), {x}, [](detail::Node& node) {
        auto& g = node.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    });
}

// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    detail::require_matrix(x, "slice_cols");
    const auto rows = x.dim(0), cols = x.dim(1);
    if (begin >= end || end > cols) {
        throw DimensionError("slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") for " + shape_str(x.shape()));
    }
    const auto w = end - begin;
    std::vector<double> out(rows * w);
    for (std::size_t i = 0; i < rows; ++i) {
        std::copy_n(x.data().begin() + i * cols + begin, w, out.begin() + i * w);
    }
    return detail::make_result({rows, w}, std::move(out), {x}, [rows, cols, begin, w](detail::Node& node) {
        auto& g = node.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < w; ++j) g[i * cols + begin + j] += node.grad[i * w + j];
        }
    });
}

// Rows `rows` of a matrix, in the given order.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    detail::require_matrix(x, "gather_rows");
    const auto cols = x.dim(1);
    std::vector<double> out(rows.size() * cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.dim(0)) throw DimensionError("gather_rows: row index out of range");
        std::copy_n(x.data().begin() + rows[i] * cols, cols, out.begin() + i * cols);
    }
    return detail::make_result({rows.size(), cols}, std::move(out), {x}, [rows, cols](detail::Node& node) {
        auto& g = node.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < cols; ++j) g[rows[i] * cols + j] += node.grad[i * cols + j];
        }
    });
}

// Copy of `base` with rows[i] replaced by row i of `values`.
inline Tensor scatter_rows(const Tensor& base, const std::vector<std::size_t>& rows, const Tensor& values) {
    detail::require_matrix(base, "scatter_rows");
    detail::require_matrix(values, "scatter_rows");
    const auto cols = base.dim(1);
    if (values.dim(1) != cols || values.dim(0) != rows.size()) {
        throw DimensionError("scatter_rows: values " + shape_str(values.shape()) + " do not fit " +
                             shape_str(base.shape()));
    }
    std::vector<double> out(base.data().begin(), base.data().end());
    std::vector<char> replaced(base.dim(0), 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= base.dim(0)) throw DimensionError("scatter_rows: row index out of range");
        replaced[rows[i]] = 1;
        std::copy_n(values.data().begin() + i * cols, cols, out.begin() + rows[i] * cols);
    }
    return detail::make_result(base.shape(), std::move(out), {base, values},
                               [rows, cols, replaced](detail::Node& node) {
                                   auto& pb = *node.parents[0];
                                   auto& pv = *node.parents[1];
                                   if (pb.requires_grad) {
                                       auto& g = pb.grad_buffer();
                                       for (std::size_t r = 0; r < replaced.size(); ++r) {
                                           if (replaced[r]) continue;
                                           for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] += node.grad[r * cols + j];
                                       }
                                   }
                                   if (pv.requires_grad) {
                                       auto& g = pv.grad_buffer();
                                       for (std::size_t i = 0; i < rows.size(); ++i) {
                                           for (std::size_t j = 0; j < cols; ++j) {
                                               g[i * cols + j] += node.grad[rows[i] * cols + j];
                                           }
                                       }
                                   }
                               });
}

// out[i] = sum_b weights[i, b] * branches[b][i]. Gate mixing is routing,
// not branch compute, so it is not counted.
inline Tensor mix_rows(const std::vector<Tensor>& branches, const Tensor& weights) {
    detail::require_matrix(weights, "mix_rows");
    if (branches.size() != weights.dim(1)) {
        throw DimensionError("mix_rows: " + std::to_string(branches.size()) + " branches vs weights " +
                             shape_str(weights.shape()));
    }
    const auto rows = weights.dim(0);
    const Shape shape = branches.front().shape();
    for (const auto& b : branches) {
        if (b.shape() != shape || b.rank() != 2 || b.dim(0) != rows) {
            throw DimensionError("mix_rows: branch shape " + shape_str(b.shape()) + " incompatible");
        }
    }
    const auto cols = shape[1];
    const auto nb = branches.size();
    std::vector<double> out(rows * cols, 0.0);
    const auto w = weights.data();
    for (std::size_t b = 0; b < nb; ++b) {
        const auto x = branches[b].data();
        for (std::size_t i = 0; i < rows; ++i) {
            const double wi = w[i * nb + b];
            for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += wi * x[i * cols + j];
        }
    }
    std::vector<Tensor> inputs = branches;
    inputs.push_back(weights);
    return detail::make_result(shape, std::move(out), inputs, [nb, rows, cols](detail::Node& node) {
        auto& pw = *node.parents[nb];
        for (std::size_t b = 0; b < nb; ++b) {
            auto& px = *node.parents[b];
            if (px.requires_grad) {
                auto& g = px.grad_buffer();
                for (std::size_t i = 0; i < rows; ++i) {
                    const double wi = pw.data[i * nb + b];
                    for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += wi * node.grad[i * cols + j];
                }
            }
            if (pw.requires_grad) {
                auto& g = pw.grad_buffer();
                for (std::size_t i = 0; i < rows; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) acc += px.data[i * cols + j] * node.grad[i * cols + j];
                    g[i * nb + b] += acc;
                }
            }
        }
    });
}

// Element `index` of x as a one-element tensor.
inline Tensor pick(const Tensor& x, std::size_t index) {
    if (index >= x.numel()) throw DimensionError("pick: index out of range");
    return detail::make_result({1}, {x[index]}, {x}, [index](detail::Node& node) {
        node.parents[0]->grad_buffer()[index] += node.grad[0];
    });
}

// Row-wise one_hot(argmax(soft)) in the forward pass, identity in the backward pass.
inline Tensor straight_through(const Tensor& soft) {
    const std::size_t cols = soft.shape().back();
    const std::size_t rows = soft.numel() / cols;
    std::vector<double> out(soft.numel(), 0.0);
    const auto idx = max_index(soft, soft.rank() - 1);
    for (std::size_t i = 0; i < rows; ++i) out[i * cols + idx[i]] = 1.0;
    return detail::make_result(soft.shape(), std::move(out), {soft}, [](detail::Node& node) {
        auto& g = node.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    });
}

// Row-wise one_hot(argmax(x)) as a constant.
inline Tensor hard_one_hot(const Tensor& x) { return straight_through(x.detach()); }

// Row-wise softmax((logits + gumbel) / tau) over the last axis.
inline Tensor soft_gate(const Tensor& logits, const Tensor& gumbel, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("soft_gate: temperature must be positive");
    if (logits.shape() != gumbel.shape()) {
        throw DimensionError("soft_gate: logits " + shape_str(logits.shape()) + " vs noise " +
                             shape_str(gumbel.shape()));
    }
    const auto s = detail::split_axis(logits.shape(), logits.rank() - 1, "soft_gate");
    std::vector<double> z(logits.numel());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = logits[i] + gumbel[i];
    std::vector<double> out(z.size());
    detail::softmax_forward(z, out, s, 1.0 / tau);
    return detail::make_result(logits.shape(), std::move(out), {logits}, [s, tau](detail::Node& node) {
        detail::softmax_backward(node.data, node.grad, node.parents[0]->grad_buffer(), s, 1.0 / tau);
    });
}

// Mean softmax cross-entropy of logits[n x k] against class indices.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    detail::require_matrix(logits, "cross_entropy");
    const auto n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n) throw DimensionError("cross_entropy: label count does not match batch");
    std::vector<double> probs(n * k);
    detail::softmax_forward(logits.data(), probs, {n, k, 1}, 1.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k) throw DimensionError("cross_entropy: label out of range");
        const auto row = logits.data().subspan(i * k, k);
        const double mx = *std::max_element(row.begin(), row.end());
        double lse = 0.0;
        for (double v : row) lse += std::exp(v - mx);
        loss += mx + std::log(lse) - row[labels[i]];
    }
    loss /= static_cast<double>(n);
    return detail::make_result({1}, {loss}, {logits}, [probs, labels, n, k](detail::Node& node) {
        auto& g = node.parents[0]->grad_buffer();
        const double scale_factor = node.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                g[i * k + j] += scale_factor * (probs[i * k + j] - (j == labels[i] ? 1.0 : 0.0));
            }
        }
    });
}

// Mean binary cross-entropy with logits; targets in [0,1], same shape.
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
    if (targets.size() != logits.numel()) throw DimensionError("bce_with_logits: target count mismatch");
    const auto n = logits.numel();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = logits[i];
        loss += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= static_cast<double>(n);
    return detail::make_result({1}, {loss}, {logits}, [targets, n](detail::Node& node) {
        auto& p = *node.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-p.data[i]));
            g[i] += node.grad[0] * (sig - targets[i]) / static_cast<double>(n);
        }
    });
}

inline Tensor mse(const Tensor& pred, const std::vector<double>& targets) {
    if (targets.size() != pred.numel()) throw DimensionError("mse: target count mismatch");
    const auto n = pred.numel();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss += (pred[i] - targets[i]) * (pred[i] - targets[i]);
    loss /= static_cast<double>(n);
    return detail::make_result({1}, {loss}, {pred}, [targets, n](detail::Node& node) {
        auto& p = *node.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
            g[i] += node.grad[0] * 2.0 * (p.data[i] - targets[i]) / static_cast<double>(n);
        }
    });
}

inline Tensor mae(const Tensor& pred, const std::vector<double>& targets) {
    if (targets.size() != pred.numel()) throw DimensionError("mae: target count mismatch");
    const auto n = pred.numel();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss += std::abs(pred[i] - targets[i]);
    loss /= static_cast<double>(n);
    return detail::make_result({1}, {loss}, {pred}, [targets, n](detail::Node& node) {
        auto& p = *node.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
            const double d = p.data[i] - targets[i];
            const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            g[i] += node.grad[0] * sgn / static_cast<double>(n);
        }
    });
}

}  // namespace dynmm
