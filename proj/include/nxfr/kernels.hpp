#pragma once

// Forward and backward numerical kernels for the layer set the model uses:
// 3x3 same-padded convolution, 2x2 max pooling, dense products, ELU and
// softmax. Every kernel is a pure function of its arguments and runs
// single-threaded with a fixed summation order, so results are
// bit-reproducible run to run.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "nxfr/tensor.hpp"

namespace nxfr {

/// Convolution geometry. Kernel 3x3, stride 1 and one pixel of zero padding
/// are fixed, so output height and width equal the input's.
struct ConvGeometry {
    static constexpr std::size_t kKernel = 3;
    static constexpr std::size_t kStride = 1;
    static constexpr std::size_t kPadding = 1;

    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

constexpr std::size_t kTaps = ConvGeometry::kKernel * ConvGeometry::kKernel;

/// Unfolds one CHW image into a [C*9, H*W] patch matrix (zero padded).
template <typename T>
void im2col3x3(const T* image, std::size_t channels, std::size_t height, std::size_t width, T* cols) {
    const std::size_t plane = height * width;
    for (std::size_t c = 0; c < channels; ++c) {
        const T* src_plane = image + c * plane;
        for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
                T* row = cols + ((c * 3 + ky) * 3 + kx) * plane;
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - 1;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - 1;
                const std::size_t x_begin = dx < 0 ? 1 : 0;
                const std::size_t x_end = dx > 0 ? width - 1 : width;
                for (std::size_t y = 0; y < height; ++y) {
                    T* dst = row + y * width;
                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) {
                        std::fill(dst, dst + width, T{0});
                        continue;
                    }
                    const T* src = src_plane + static_cast<std::size_t>(sy) * width;
                    if (x_begin > 0) {
                        dst[0] = T{0};
                    }
                    if (x_end < width) {
                        dst[width - 1] = T{0};
                    }
                    for (std::size_t x = x_begin; x < x_end; ++x) {
                        dst[x] = src[static_cast<std::ptrdiff_t>(x) + dx];
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col3x3: scatters a patch matrix back onto a CHW image,
/// accumulating overlapping contributions.
template <typename T>
void col2im3x3(const T* cols, std::size_t channels, std::size_t height, std::size_t width, T* image) {
    const std::size_t plane = height * width;
    for (std::size_t c = 0; c < channels; ++c) {
        T* dst_plane = image + c * plane;
        for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
                const T* row = cols + ((c * 3 + ky) * 3 + kx) * plane;
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - 1;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - 1;
                const std::size_t x_begin = dx < 0 ? 1 : 0;
                const std::size_t x_end = dx > 0 ? width - 1 : width;
                for (std::size_t y = 0; y < height; ++y) {
                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) {
                        continue;
                    }
                    const T* src = row + y * width;
                    T* dst = dst_plane + static_cast<std::size_t>(sy) * width;
                    for (std::size_t x = x_begin; x < x_end; ++x) {
                        dst[static_cast<std::ptrdiff_t>(x) + dx] += src[x];
                    }
                }
            }
        }
    }
}

template <typename T>
void check_conv_shapes(const Shape& input, const Shape& weights, const Shape& bias, const ConvGeometry& geom) {
    require_rank(input, 4, "conv2d input");
    require_rank(weights, 4, "conv2d weights");
    require_rank(bias, 1, "conv2d bias");
    require_extent(input[1], weights[1], "conv2d input channels (dim 1) vs weight channels");
    require_extent(weights[2], 3, "conv2d kernel height (dim 2)");
    require_extent(weights[3], 3, "conv2d kernel width (dim 3)");
    require_extent(bias[0], weights[0], "conv2d bias length vs filter count (dim 0)");
    require_extent(input[1], geom.in_channels, "conv2d geometry in_channels");
    require_extent(weights[0], geom.out_channels, "conv2d geometry out_channels");
}

} // namespace detail

/// out[n,f,y,x] = bias[f] + sum_{c,dy,dx} in[n,c,y+dy-1,x+dx-1] * w[f,c,dy,dx],
/// with zeros outside the image.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                         const ConvGeometry& geom) {
    detail::check_conv_shapes<T>(input.shape(), weights.shape(), bias.shape(), geom);
    const std::size_t n_batch = input.dim(0), channels = input.dim(1);
    const std::size_t height = input.dim(2), width = input.dim(3);
    const std::size_t filters = weights.dim(0);
    const std::size_t plane = height * width;
    const std::size_t depth = channels * detail::kTaps;

    Tensor<T> out(Shape{n_batch, filters, height, width});
    std::vector<T> cols(depth * plane);
    detail::ConstMatrixMap<T> w(weights.data(), static_cast<Eigen::Index>(filters),
                                static_cast<Eigen::Index>(depth));
    detail::ConstMatrixMap<T> patches(cols.data(), static_cast<Eigen::Index>(depth),
                                      static_cast<Eigen::Index>(plane));
    for (std::size_t n = 0; n < n_batch; ++n) {
        detail::im2col3x3(input.data() + n * channels * plane, channels, height, width, cols.data());
        detail::MatrixMap<T> o(out.data() + n * filters * plane, static_cast<Eigen::Index>(filters),
                               static_cast<Eigen::Index>(plane));
        o.noalias() = w * patches;
        for (std::size_t f = 0; f < filters; ++f) {
            o.row(static_cast<Eigen::Index>(f)).array() += bias[f];
        }
    }
    return out;
}

template <typename T>
struct ConvGradients {
    Tensor<T> input;   ///< empty when not requested
    Tensor<T> weights;
    Tensor<T> bias;
};

/// Exact gradients of conv2d_forward. grad_input is a transposed
/// convolution of grad_out; grad_weights correlates the input with grad_out;
/// grad_bias sums grad_out over batch and pixels.
template <typename T>
ConvGradients<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& grad_out,
                                 bool want_input_grad = true) {
    require_rank(input.shape(), 4, "conv2d_backward input");
    require_rank(weights.shape(), 4, "conv2d_backward weights");
    require_rank(grad_out.shape(), 4, "conv2d_backward grad_out");
    require_extent(input.dim(1), weights.dim(1), "conv2d_backward input channels (dim 1)");
    require_extent(grad_out.dim(0), input.dim(0), "conv2d_backward grad_out batch (dim 0)");
    require_extent(grad_out.dim(1), weights.dim(0), "conv2d_backward grad_out channels (dim 1)");
    require_extent(grad_out.dim(2), input.dim(2), "conv2d_backward grad_out height (dim 2)");
    require_extent(grad_out.dim(3), input.dim(3), "conv2d_backward grad_out width (dim 3)");

    const std::size_t n_batch = input.dim(0), channels = input.dim(1);
    const std::size_t height = input.dim(2), width = input.dim(3);
    const std::size_t filters = weights.dim(0);
    const std::size_t plane = height * width;
    const std::size_t depth = channels * detail::kTaps;
    const auto e_filters = static_cast<Eigen::Index>(filters);
    const auto e_depth = static_cast<Eigen::Index>(depth);
    const auto e_plane = static_cast<Eigen::Index>(plane);

    ConvGradients<T> g;
    g.weights = Tensor<T>(weights.shape());
    g.bias = Tensor<T>(Shape{filters});
    if (want_input_grad) {
        g.input = Tensor<T>(input.shape());
    }

    std::vector<T> cols(depth * plane);
    std::vector<T> grad_cols(want_input_grad ? depth * plane : 0);
    detail::MatrixMap<T> gw(g.weights.data(), e_filters, e_depth);
    detail::ConstMatrixMap<T> w(weights.data(), e_filters, e_depth);
    detail::ConstMatrixMap<T> patches(cols.data(), e_depth, e_plane);

    for (std::size_t n = 0; n < n_batch; ++n) {
        detail::ConstMatrixMap<T> go(grad_out.data() + n * filters * plane, e_filters, e_plane);
        for (std::size_t f = 0; f < filters; ++f) {
            const T* row = grad_out.data() + (n * filters + f) * plane;
            T acc{0};
            for (std::size_t i = 0; i < plane; ++i) {
                acc += row[i];
            }
            g.bias[f] += acc;
        }
        detail::im2col3x3(input.data() + n * channels * plane, channels, height, width, cols.data());
        gw.noalias() += go * patches.transpose();
        if (want_input_grad) {
            detail::MatrixMap<T> gc(grad_cols.data(), e_depth, e_plane);
            gc.noalias() = w.transpose() * go;
            detail::col2im3x3(grad_cols.data(), channels, height, width, g.input.data() + n * channels * plane);
        }
    }
    return g;
}

/// Winning position (0..3, row-major within the 2x2 window) for every output
/// cell of a max-pool forward pass.
struct PoolMask {
    Shape input_shape;
    std::vector<std::uint8_t> winner;
};

template <typename T>
struct PoolResult {
    Tensor<T> output;
    PoolMask mask;
};

/// Disjoint 2x2 max pooling with stride 2. Ties go to the first maximum in
/// row-major order within the window.
template <typename T>
PoolResult<T> maxpool2x2_forward(const Tensor<T>& input) {
    require_rank(input.shape(), 4, "maxpool input");
    const std::size_t n_batch = input.dim(0), channels = input.dim(1);
    const std::size_t height = input.dim(2), width = input.dim(3);
    if (height % 2 != 0 || width % 2 != 0) {
        throw ShapeError("maxpool: height and width must be even, got " + input.shape().str());
    }
    const std::size_t oh = height / 2, ow = width / 2;
    PoolResult<T> r{Tensor<T>(Shape{n_batch, channels, oh, ow}), PoolMask{input.shape(), {}}};
    r.mask.winner.resize(r.output.size());
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < n_batch * channels; ++nc) {
        const T* src = input.data() + nc * height * width;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x, ++o) {
                const T* top = src + (2 * y) * width + 2 * x;
                const T candidates[4] = {top[0], top[1], top[width], top[width + 1]};
                std::uint8_t best = 0;
                for (std::uint8_t k = 1; k < 4; ++k) {
                    if (candidates[k] > candidates[best]) {
                        best = k;
                    }
                }
                r.output[o] = candidates[best];
                r.mask.winner[o] = best;
            }
        }
    }
    return r;
}

/// Routes each upstream gradient to its window's argmax; zero elsewhere.
template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& grad_out, const PoolMask& mask) {
    require_rank(mask.input_shape, 4, "maxpool_backward mask");
    const Shape& in = mask.input_shape;
    const Shape expected{in[0], in[1], in[2] / 2, in[3] / 2};
    if (!(grad_out.shape() == expected) || mask.winner.size() != grad_out.size()) {
        throw ShapeError("maxpool_backward: grad_out " + grad_out.shape().str() + " does not match mask for input " +
                         in.str());
    }
    const std::size_t width = in[3], oh = in[2] / 2, ow = in[3] / 2;
    Tensor<T> grad_in(in);
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < in[0] * in[1]; ++nc) {
        T* dst = grad_in.data() + nc * in[2] * width;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x, ++o) {
                const std::uint8_t k = mask.winner[o];
                dst[(2 * y + k / 2) * width + 2 * x + k % 2] = grad_out[o];
            }
        }
    }
    return grad_in;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a.shape(), 2, "matmul lhs");
    require_rank(b.shape(), 2, "matmul rhs");
    require_extent(b.dim(0), a.dim(1), "matmul inner dimension (rhs dim 0 vs lhs dim 1)");
    Tensor<T> c(Shape{a.dim(0), b.dim(1)});
    detail::ConstMatrixMap<T> ma(a.data(), static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1)));
    detail::ConstMatrixMap<T> mb(b.data(), static_cast<Eigen::Index>(b.dim(0)), static_cast<Eigen::Index>(b.dim(1)));
    detail::MatrixMap<T> mc(c.data(), static_cast<Eigen::Index>(c.dim(0)), static_cast<Eigen::Index>(c.dim(1)));
    mc.noalias() = ma * mb;
    return c;
}

/// y = x * W^T + b for x [N, in], W [out, in], b [out].
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
    require_rank(x.shape(), 2, "dense input");
    require_rank(weights.shape(), 2, "dense weights");
    require_extent(x.dim(1), weights.dim(1), "dense input features (dim 1) vs weight columns");
    require_extent(bias.size(), weights.dim(0), "dense bias length vs weight rows");
    const auto n = static_cast<Eigen::Index>(x.dim(0));
    const auto in = static_cast<Eigen::Index>(x.dim(1));
    const auto out = static_cast<Eigen::Index>(weights.dim(0));
    Tensor<T> y(Shape{x.dim(0), weights.dim(0)});
    detail::ConstMatrixMap<T> mx(x.data(), n, in);
    detail::ConstMatrixMap<T> mw(weights.data(), out, in);
    detail::MatrixMap<T> my(y.data(), n, out);
    my.noalias() = mx * mw.transpose();
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> mb(bias.data(), out);
    my.rowwise() += mb;
    return y;
}

template <typename T>
struct DenseGradients {
    Tensor<T> input;  ///< empty when not requested
    Tensor<T> weights;
    Tensor<T> bias;
};

template <typename T>
DenseGradients<T> dense_backward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& grad_out,
                                 bool want_input_grad = true) {
    require_rank(grad_out.shape(), 2, "dense_backward grad_out");
    require_extent(grad_out.dim(0), x.dim(0), "dense_backward batch (dim 0)");
    require_extent(grad_out.dim(1), weights.dim(0), "dense_backward grad_out features (dim 1)");
    require_extent(x.dim(1), weights.dim(1), "dense_backward input features (dim 1)");
    const auto n = static_cast<Eigen::Index>(x.dim(0));
    const auto in = static_cast<Eigen::Index>(x.dim(1));
    const auto out = static_cast<Eigen::Index>(weights.dim(0));
    detail::ConstMatrixMap<T> mx(x.data(), n, in);
    detail::ConstMatrixMap<T> mw(weights.data(), out, in);
    detail::ConstMatrixMap<T> mg(grad_out.data(), n, out);

    DenseGradients<T> g;
    g.weights = Tensor<T>(weights.shape());
    g.bias = Tensor<T>(Shape{weights.dim(0)});
    detail::MatrixMap<T>(g.weights.data(), out, in).noalias() = mg.transpose() * mx;
    for (Eigen::Index j = 0; j < out; ++j) {
        T acc{0};
        for (Eigen::Index i = 0; i < n; ++i) {
            acc += mg(i, j);
        }
        g.bias[static_cast<std::size_t>(j)] = acc;
    }
    if (want_input_grad) {
        g.input = Tensor<T>(x.shape());
        detail::MatrixMap<T>(g.input.data(), n, in).noalias() = mg * mw;
    }
    return g;
}

/// f(x) = x for x > 0, alpha * (e^x - 1) otherwise.
template <typename T>
Tensor<T> elu(const Tensor<T>& x, T alpha = T{1}) {
    if (!(alpha > T{0})) {
        throw ConfigError("elu: alpha must be positive");
    }
    Tensor<T> y = x;
    for (auto& v : y.values()) {
        v = v > T{0} ? v : alpha * std::expm1(v);
    }
    return y;
}

/// df/dx: 1 for x > 0, alpha * e^x otherwise.
template <typename T>
Tensor<T> elu_grad(const Tensor<T>& x, T alpha = T{1}) {
    if (!(alpha > T{0})) {
        throw ConfigError("elu_grad: alpha must be positive");
    }
    Tensor<T> g = x;
    for (auto& v : g.values()) {
        v = v > T{0} ? T{1} : alpha * std::exp(v);
    }
    return g;
}

namespace detail {

/// Multiplies grad by ELU'(z) given the activation a = elu(z), using
/// ELU'(z) = a + alpha on the non-positive branch.
template <typename T>
void elu_backward_inplace(std::span<T> grad, std::span<const T> activation, T alpha) {
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const T a = activation[i];
        grad[i] *= a > T{0} ? T{1} : a + alpha;
    }
}

} // namespace detail

/// Row-wise softmax over [N, K] with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    require_rank(logits.shape(), 2, "softmax logits");
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    Tensor<T> p(logits.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* z = logits.data() + r * cols;
        T* out = p.data() + r * cols;
        const T peak = *std::max_element(z, z + cols);
        T sum{0};
        for (std::size_t c = 0; c < cols; ++c) {
            out[c] = std::exp(z[c] - peak);
            sum += out[c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            out[c] /= sum;
        }
    }
    return p;
}

} // namespace nxfr
