#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "gafm/runtime.hpp"
#include "gafm/tensor.hpp"

namespace gafm {

enum class Mode { Train, Eval };

enum class Precision { Single, Double };

template <typename T>
constexpr Precision precision_of = std::is_same_v<T, double> ? Precision::Double : Precision::Single;

struct Conv2dSpec {
    int64_t stride_h = 1;
    int64_t stride_w = 1;
    int64_t pad_h = 0;
    int64_t pad_w = 0;
};

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;

    explicit BatchNormState(int64_t channels = 0)
        : running_mean(static_cast<size_t>(channels), T(0)),
          running_var(static_cast<size_t>(channels), T(1)) {}
};

namespace detail {

template <typename T>
inline void axpy(T a, const T* x, T* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// C[M x N] += A[M x K] * B[K x N], row-major. The k-ascending accumulation
// order is fixed, so results do not depend on the thread count.
template <typename T>
inline void gemm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    parallel_for(m, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
            T* crow = c + r * n;
            const T* arow = a + r * k;
            for (int64_t j = 0; j < k; ++j) {
                axpy(arow[j], b + j * n, crow, n);
            }
        }
    });
}

struct ConvDims {
    int64_t batch, in_ch, in_h, in_w;
    int64_t out_ch, k_h, k_w;
    int64_t out_h, out_w;
    int64_t patch;  // in_ch * k_h * k_w
    int64_t cells;  // out_h * out_w
};

template <typename T>
inline ConvDims conv_dims(const Tensor<T>& input, const Tensor<T>& weight, const Conv2dSpec& s) {
    if (input.rank() != 4) {
        throw ShapeError("conv2d: input must be NCHW, got " + shape_str(input.shape()));
    }
    if (weight.rank() != 4) {
        throw ShapeError("conv2d: weight must be OutCxInCxkHxkW, got " + shape_str(weight.shape()));
    }
    ConvDims d;
    d.batch = input.dim(0);
    d.in_ch = input.dim(1);
    d.in_h = input.dim(2);
    d.in_w = input.dim(3);
    d.out_ch = weight.dim(0);
    d.k_h = weight.dim(2);
    d.k_w = weight.dim(3);
    if (weight.dim(1) != d.in_ch) {
        throw ShapeError("conv2d: input has " + std::to_string(d.in_ch) + " channels but weight " +
                         shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
    }
    if (s.stride_h < 1 || s.stride_w < 1) throw ConfigError("conv2d: stride must be positive");
    if (s.pad_h < 0 || s.pad_w < 0) throw ConfigError("conv2d: padding must be non-negative");
    const int64_t span_h = d.in_h + 2 * s.pad_h - d.k_h;
    const int64_t span_w = d.in_w + 2 * s.pad_w - d.k_w;
    if (span_h < 0 || span_w < 0) {
        throw ConfigError("conv2d: kernel " + std::to_string(d.k_h) + "x" + std::to_string(d.k_w) +
                          " does not fit input " + shape_str(input.shape()) + " with padding " +
                          std::to_string(s.pad_h) + "," + std::to_string(s.pad_w));
    }
    d.out_h = span_h / s.stride_h + 1;
    d.out_w = span_w / s.stride_w + 1;
    d.patch = d.in_ch * d.k_h * d.k_w;
    d.cells = d.out_h * d.out_w;
    return d;
}

// Unfolds one sample into patch-major layout: col[patch][cells].
template <typename T>
inline void im2col(const T* x, const ConvDims& d, const Conv2dSpec& s, T* col) {
    for (int64_t c = 0; c < d.in_ch; ++c) {
        for (int64_t r = 0; r < d.k_h; ++r) {
            for (int64_t q = 0; q < d.k_w; ++q) {
                T* row = col + ((c * d.k_h + r) * d.k_w + q) * d.cells;
                for (int64_t oh = 0; oh < d.out_h; ++oh) {
                    const int64_t ih = oh * s.stride_h - s.pad_h + r;
                    if (ih < 0 || ih >= d.in_h) {
                        std::fill(row + oh * d.out_w, row + (oh + 1) * d.out_w, T(0));
                        continue;
                    }
                    const T* src = x + (c * d.in_h + ih) * d.in_w;
                    for (int64_t ow = 0; ow < d.out_w; ++ow) {
                        const int64_t iw = ow * s.stride_w - s.pad_w + q;
                        row[oh * d.out_w + ow] = (iw >= 0 && iw < d.in_w) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

// Scatters col gradients back onto the input sample (accumulating overlaps).
template <typename T>
inline void col2im_acc(const T* col, const ConvDims& d, const Conv2dSpec& s, T* dx) {
    for (int64_t c = 0; c < d.in_ch; ++c) {
        for (int64_t r = 0; r < d.k_h; ++r) {
            for (int64_t q = 0; q < d.k_w; ++q) {
                const T* row = col + ((c * d.k_h + r) * d.k_w + q) * d.cells;
                for (int64_t oh = 0; oh < d.out_h; ++oh) {
                    const int64_t ih = oh * s.stride_h - s.pad_h + r;
                    if (ih < 0 || ih >= d.in_h) continue;
                    T* dst = dx + (c * d.in_h + ih) * d.in_w;
                    for (int64_t ow = 0; ow < d.out_w; ++ow) {
                        const int64_t iw = ow * s.stride_w - s.pad_w + q;
                        if (iw >= 0 && iw < d.in_w) dst[iw] += row[oh * d.out_w + ow];
                    }
                }
            }
        }
    }
}

template <typename T>
inline bool is_pointwise(const ConvDims& d, const Conv2dSpec& s) {
    return d.k_h == 1 && d.k_w == 1 && s.stride_h == 1 && s.stride_w == 1 && s.pad_h == 0 &&
           s.pad_w == 0;
}

// Strides for stretching `b` over `a` (extent-1 dims get stride 0).
template <typename T>
inline std::vector<int64_t> broadcast_strides(const Tensor<T>& a, const Tensor<T>& b,
                                              const char* op) {
    if (a.rank() != b.rank()) {
        throw ShapeError(std::string(op) + ": rank mismatch between " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const size_t r = a.rank();
    std::vector<int64_t> strides(r, 0);
    int64_t acc = 1;
    for (size_t i = r; i-- > 0;) {
        strides[i] = acc;
        acc *= b.dim(i);
    }
    for (size_t i = 0; i < r; ++i) {
        if (b.dim(i) == a.dim(i)) continue;
        if (b.dim(i) == 1) {
            strides[i] = 0;
            continue;
        }
        throw ShapeError(std::string(op) + ": shape " + shape_str(b.shape()) +
                         " is not broadcastable to " + shape_str(a.shape()));
    }
    return strides;
}

// Walks the flat indices of a broadcast operand alongside a's row-major order.
template <typename T, typename Fn>
inline void for_each_broadcast(const Tensor<T>& a, const std::vector<int64_t>& b_strides, Fn&& fn) {
    const size_t r = a.rank();
    const int64_t n = a.numel();
    if (r == 0 || n == 0) {
        if (n == 1) fn(int64_t{0}, int64_t{0});
        return;
    }
    std::vector<int64_t> idx(r, 0);
    int64_t bflat = 0;
    for (int64_t af = 0; af < n; ++af) {
        fn(af, bflat);
        for (size_t i = r; i-- > 0;) {
            ++idx[i];
            bflat += b_strides[i];
            if (idx[i] < a.dim(i)) break;
            bflat -= idx[i] * b_strides[i];
            idx[i] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation over NCHW input (no kernel flip).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias = std::nullopt, Conv2dSpec spec = {}) {
    using namespace detail;
    const ConvDims d = conv_dims(input, weight, spec);
    if (bias && (bias->rank() != 1 || bias->dim(0) != d.out_ch)) {
        throw ShapeError("conv2d: bias must have shape [" + std::to_string(d.out_ch) + "], got " +
                         shape_str(bias->shape()));
    }

    std::vector<T> out(static_cast<size_t>(d.batch * d.out_ch * d.cells), T(0));
    const T* x = input.data().data();
    const T* w = weight.data().data();
    const bool pointwise = is_pointwise<T>(d, spec);

    if (bias) {
        const T* b = bias->data().data();
        for (int64_t n = 0; n < d.batch; ++n) {
            for (int64_t o = 0; o < d.out_ch; ++o) {
                T* row = out.data() + (n * d.out_ch + o) * d.cells;
                std::fill(row, row + d.cells, b[o]);
            }
        }
    }

    std::vector<T> col_buf;
    if (!pointwise) col_buf.resize(static_cast<size_t>(d.patch * d.cells));
    for (int64_t n = 0; n < d.batch; ++n) {
        const T* sample = x + n * d.in_ch * d.in_h * d.in_w;
        const T* col = sample;
        if (!pointwise) {
            im2col(sample, d, spec, col_buf.data());
            col = col_buf.data();
        }
        gemm_acc(w, col, out.data() + n * d.out_ch * d.cells, d.out_ch, d.patch, d.cells);
    }

    Tensor<T> result({d.batch, d.out_ch, d.out_h, d.out_w}, std::move(out));

    detail::GradCtx<T> ctx{&input, &weight, bias ? &*bias : &input};
    const bool bias_grad = bias && ctx.in_nodes[2] >= 0 && bias.has_value();
    if (!bias) ctx.in_nodes[2] = -1;
    if (ctx.recording) {
        const int in_node = ctx.in_nodes[0];
        const int w_node = ctx.in_nodes[1];
        const int b_node = bias ? ctx.in_nodes[2] : -1;
        Tensor<T> in_copy = input;
        Tensor<T> w_copy = weight;
        const int out_node = ctx.finish("conv2d", result, nullptr);
        ctx.tape->grad_buf(out_node);  // ensure allocated
        auto backward = [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            const T* xv = in_copy.data().data();
            const T* wv = w_copy.data().data();
            const bool pw = is_pointwise<T>(d, spec);
            std::vector<T> colt(static_cast<size_t>(d.cells * d.patch));
            std::vector<T> col_store;
            if (!pw) col_store.resize(static_cast<size_t>(d.patch * d.cells));
            std::vector<T> dcol;
            if (in_node >= 0 && !pw) dcol.resize(static_cast<size_t>(d.patch * d.cells));

            for (int64_t n = 0; n < d.batch; ++n) {
                const T* sample = xv + n * d.in_ch * d.in_h * d.in_w;
                const T* col = sample;
                if (!pw) {
                    im2col(sample, d, spec, col_store.data());
                    col = col_store.data();
                }
                const T* go = gout.data() + n * d.out_ch * d.cells;

                if (w_node >= 0) {
                    // colT[p][k] so dW rows accumulate over contiguous memory.
                    parallel_for(d.patch, [&](int64_t k0, int64_t k1) {
                        for (int64_t k = k0; k < k1; ++k)
                            for (int64_t p = 0; p < d.cells; ++p)
                                colt[p * d.patch + k] = col[k * d.cells + p];
                    });
                    std::vector<T>& gw = tape.grad_buf(w_node);
                    parallel_for(d.out_ch, [&](int64_t o0, int64_t o1) {
                        for (int64_t o = o0; o < o1; ++o) {
                            T* gwrow = gw.data() + o * d.patch;
                            const T* gorow = go + o * d.cells;
                            for (int64_t p = 0; p < d.cells; ++p)
                                axpy(gorow[p], colt.data() + p * d.patch, gwrow, d.patch);
                        }
                    });
                }
                if (b_node >= 0) {
                    std::vector<T>& gb = tape.grad_buf(b_node);
                    for (int64_t o = 0; o < d.out_ch; ++o) {
                        T s = T(0);
                        const T* gorow = go + o * d.cells;
                        for (int64_t p = 0; p < d.cells; ++p) s += gorow[p];
                        gb[static_cast<size_t>(o)] += s;
                    }
                }
                if (in_node >= 0) {
                    std::vector<T>& gx = tape.grad_buf(in_node);
                    T* gxs = gx.data() + n * d.in_ch * d.in_h * d.in_w;
                    if (pw) {
                        // dX[k][p] += sum_o W[o][k] * gO[o][p], written directly.
                        parallel_for(d.patch, [&](int64_t k0, int64_t k1) {
                            for (int64_t k = k0; k < k1; ++k) {
                                T* row = gxs + k * d.cells;
                                for (int64_t o = 0; o < d.out_ch; ++o)
                                    axpy(wv[o * d.patch + k], go + o * d.cells, row, d.cells);
                            }
                        });
                    } else {
                        std::fill(dcol.begin(), dcol.end(), T(0));
                        parallel_for(d.patch, [&](int64_t k0, int64_t k1) {
                            for (int64_t k = k0; k < k1; ++k) {
                                T* row = dcol.data() + k * d.cells;
                                for (int64_t o = 0; o < d.out_ch; ++o)
                                    axpy(wv[o * d.patch + k], go + o * d.cells, row, d.cells);
                            }
                        });
                        col2im_acc(dcol.data(), d, spec, gxs);
                    }
                }
            }
            (void)tape;
        };
        ctx.tape->record("conv2d", {in_node, w_node, b_node}, out_node, std::move(backward));
    }
    return result;
}

// ---------------------------------------------------------------------------
// batchnorm2d: per-channel normalization. Train mode uses biased batch
// variance and updates the running stats (unbiased variance, EMA); eval mode
// normalizes with the running stats and leaves them untouched.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode, T eps = T(1e-5), T momentum = T(0.1)) {
    if (input.rank() != 4) {
        throw ShapeError("batchnorm2d: input must be NCHW, got " + shape_str(input.shape()));
    }
    const int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int64_t hw = h * w;
    const int64_t m = n * hw;
    if (gamma.numel() != c || beta.numel() != c ||
        static_cast<int64_t>(state.running_mean.size()) != c ||
        static_cast<int64_t>(state.running_var.size()) != c) {
        throw ShapeError("batchnorm2d: gamma/beta/state must have length " + std::to_string(c));
    }
    if (m == 0) throw ConfigError("batchnorm2d: zero spatial-batch extent");
    if (mode == Mode::Train && m < 2) {
        throw ConfigError("batchnorm2d: train mode needs N*H*W >= 2 per channel, got " +
                          std::to_string(m));
    }

    const T* x = input.data().data();
    std::vector<T> mean(static_cast<size_t>(c)), invstd(static_cast<size_t>(c));
    if (mode == Mode::Train) {
        for (int64_t ch = 0; ch < c; ++ch) {
            T s = T(0);
            for (int64_t i = 0; i < n; ++i) {
                const T* base = x + (i * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) s += base[j];
            }
            const T mu = s / static_cast<T>(m);
            T v = T(0);
            for (int64_t i = 0; i < n; ++i) {
                const T* base = x + (i * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) {
                    const T dlt = base[j] - mu;
                    v += dlt * dlt;
                }
            }
            const T var_biased = v / static_cast<T>(m);
            mean[static_cast<size_t>(ch)] = mu;
            invstd[static_cast<size_t>(ch)] = T(1) / std::sqrt(var_biased + eps);
            const T var_unbiased = (m > 1) ? v / static_cast<T>(m - 1) : var_biased;
            state.running_mean[static_cast<size_t>(ch)] =
                (T(1) - momentum) * state.running_mean[static_cast<size_t>(ch)] + momentum * mu;
            state.running_var[static_cast<size_t>(ch)] =
                (T(1) - momentum) * state.running_var[static_cast<size_t>(ch)] +
                momentum * var_unbiased;
        }
    } else {
        for (int64_t ch = 0; ch < c; ++ch) {
            mean[static_cast<size_t>(ch)] = state.running_mean[static_cast<size_t>(ch)];
            invstd[static_cast<size_t>(ch)] =
                T(1) / std::sqrt(state.running_var[static_cast<size_t>(ch)] + eps);
        }
    }

    const T* g = gamma.data().data();
    const T* b = beta.data().data();
    std::vector<T> out(static_cast<size_t>(input.numel()));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const T mu = mean[static_cast<size_t>(ch)];
            const T is = invstd[static_cast<size_t>(ch)];
            const T gc = g[ch], bc = b[ch];
            const T* src = x + (i * c + ch) * hw;
            T* dst = out.data() + (i * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) dst[j] = gc * (src[j] - mu) * is + bc;
        }
    }
    Tensor<T> result(input.shape(), std::move(out));

    detail::GradCtx<T> ctx{&input, &gamma, &beta};
    if (ctx.recording) {
        const int in_node = ctx.in_nodes[0];
        const int g_node = ctx.in_nodes[1];
        const int b_node = ctx.in_nodes[2];
        Tensor<T> in_copy = input;
        Tensor<T> gamma_copy = gamma;
        const bool train = mode == Mode::Train;
        auto mean_c = mean;    // captured by value
        auto invstd_c = invstd;
        const int out_node = ctx.tape->add_interior(result.numel());
        ctx.tape->attach(result, out_node);
        auto backward = [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            const T* xv = in_copy.data().data();
            const T* gv = gamma_copy.data().data();
            for (int64_t ch = 0; ch < c; ++ch) {
                const T mu = mean_c[static_cast<size_t>(ch)];
                const T is = invstd_c[static_cast<size_t>(ch)];
                T sum_dy = T(0), sum_dy_xhat = T(0);
                for (int64_t i = 0; i < n; ++i) {
                    const T* go = gout.data() + (i * c + ch) * hw;
                    const T* src = xv + (i * c + ch) * hw;
                    for (int64_t j = 0; j < hw; ++j) {
                        sum_dy += go[j];
                        sum_dy_xhat += go[j] * (src[j] - mu) * is;
                    }
                }
                if (g_node >= 0) tape.grad_buf(g_node)[static_cast<size_t>(ch)] += sum_dy_xhat;
                if (b_node >= 0) tape.grad_buf(b_node)[static_cast<size_t>(ch)] += sum_dy;
                if (in_node >= 0) {
                    std::vector<T>& gx = tape.grad_buf(in_node);
                    const T gc = gv[ch];
                    if (train) {
                        const T inv_m = T(1) / static_cast<T>(m);
                        for (int64_t i = 0; i < n; ++i) {
                            const T* go = gout.data() + (i * c + ch) * hw;
                            const T* src = xv + (i * c + ch) * hw;
                            T* dst = gx.data() + (i * c + ch) * hw;
                            for (int64_t j = 0; j < hw; ++j) {
                                const T xhat = (src[j] - mu) * is;
                                dst[j] += gc * is *
                                          (go[j] - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
                            }
                        }
                    } else {
                        for (int64_t i = 0; i < n; ++i) {
                            const T* go = gout.data() + (i * c + ch) * hw;
                            T* dst = gx.data() + (i * c + ch) * hw;
                            for (int64_t j = 0; j < hw; ++j) dst[j] += gc * is * go[j];
                        }
                    }
                }
            }
        };
        ctx.tape->record("batchnorm2d", {in_node, g_node, b_node}, out_node, std::move(backward));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Elementwise activations.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
    std::vector<T> out(static_cast<size_t>(input.numel()));
    const auto x = input.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    Tensor<T> result(input.shape(), std::move(out));

    detail::GradCtx<T> ctx{&input};
    if (ctx.recording) {
        const int in_node = ctx.in_nodes[0];
        Tensor<T> in_copy = input;
        const int out_node = ctx.tape->add_interior(result.numel());
        ctx.tape->attach(result, out_node);
        ctx.tape->record("relu", {in_node}, out_node, [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            std::vector<T>& gin = tape.grad_buf(in_node);
            const auto xv = in_copy.data();
            // subgradient at 0 is 0
            for (size_t i = 0; i < gin.size(); ++i)
                if (xv[i] > T(0)) gin[i] += gout[i];
        });
    }
    return result;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
    // Clamped to the open interval so saturated outputs never round to 0 or 1.
    static const T hi = std::nextafter(T(1), T(0));
    static const T lo = std::numeric_limits<T>::denorm_min();
    std::vector<T> out(static_cast<size_t>(input.numel()));
    const auto x = input.data();
    for (size_t i = 0; i < out.size(); ++i) {
        T v;
        if (x[i] >= T(0)) {
            v = T(1) / (T(1) + std::exp(-x[i]));
        } else {
            const T e = std::exp(x[i]);
            v = e / (T(1) + e);
        }
        out[i] = std::min(hi, std::max(lo, v));
    }
    Tensor<T> result(input.shape(), std::move(out));

    detail::GradCtx<T> ctx{&input};
    if (ctx.recording) {
        const int in_node = ctx.in_nodes[0];
        Tensor<T> out_copy = result;
        const int out_node = ctx.tape->add_interior(result.numel());
        ctx.tape->attach(result, out_node);
        ctx.tape->record("sigmoid", {in_node}, out_node, [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            std::vector<T>& gin = tape.grad_buf(in_node);
            const auto s = out_copy.data();
            for (size_t i = 0; i < gin.size(); ++i) gin[i] += gout[i] * s[i] * (T(1) - s[i]);
        });
    }
    return result;
}

template <typename T>
Tensor<T> abs(const Tensor<T>& input) {
    std::vector<T> out(static_cast<size_t>(input.numel()));
    const auto x = input.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] < T(0) ? -x[i] : x[i];
    Tensor<T> result(input.shape(), std::move(out));

    detail::GradCtx<T> ctx{&input};
    if (ctx.recording) {
        const int in_node = ctx.in_nodes[0];
        Tensor<T> in_copy = input;
        const int out_node = ctx.tape->add_interior(result.numel());
        ctx.tape->attach(result, out_node);
        ctx.tape->record("abs", {in_node}, out_node, [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            std::vector<T>& gin = tape.grad_buf(in_node);
            const auto xv = in_copy.data();
            // subgradient at 0 is 0
            for (size_t i = 0; i < gin.size(); ++i) {
                if (xv[i] > T(0)) gin[i] += gout[i];
                else if (xv[i] < T(0)) gin[i] -= gout[i];
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Pooling.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
    if (input.rank() != 4) {
        throw ShapeError("global_avg_pool: input must be NCHW, got " + shape_str(input.shape()));
    }
    const int64_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    if (hw < 1) throw ShapeError("global_avg_pool: empty spatial extent");
    const T* x = input.data().data();
    std::vector<T> out(static_cast<size_t>(n * c));
    for (int64_t i = 0; i < n * c; ++i) {
        T s = T(0);
        const T* base = x + i * hw;
        for (int64_t j = 0; j < hw; ++j) s += base[j];
        out[static_cast<size_t>(i)] = s / static_cast<T>(hw);
    }
    Tensor<T> result({n, c}, std::move(out));

    detail::GradCtx<T> ctx{&input};
    if (ctx.recording) {
        const int in_node = ctx.in_nodes[0];
        const int out_node = ctx.tape->add_interior(result.numel());
        ctx.tape->attach(result, out_node);
        ctx.tape->record("global_avg_pool", {in_node}, out_node, [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            std::vector<T>& gin = tape.grad_buf(in_node);
            const T scale = T(1) / static_cast<T>(hw);
            for (int64_t i = 0; i < n * c; ++i) {
                const T g = gout[static_cast<size_t>(i)] * scale;
                T* base = gin.data() + i * hw;
                for (int64_t j = 0; j < hw; ++j) base[j] += g;
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, int64_t kernel, int64_t stride, int64_t pad) {
    if (input.rank() != 4) {
        throw ShapeError("max_pool2d: input must be NCHW, got " + shape_str(input.shape()));
    }
    if (kernel < 1 || stride < 1) throw ConfigError("max_pool2d: kernel and stride must be positive");
    if (pad < 0 || pad >= kernel) throw ConfigError("max_pool2d: require 0 <= pad < kernel");
    const int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int64_t span_h = h + 2 * pad - kernel, span_w = w + 2 * pad - kernel;
    if (span_h < 0 || span_w < 0) {
        throw ConfigError("max_pool2d: kernel does not fit input " + shape_str(input.shape()));
    }
    const int64_t oh = span_h / stride + 1, ow = span_w / stride + 1;
    const T* x = input.data().data();
    std::vector<T> out(static_cast<size_t>(n * c * oh * ow));
    std::vector<int64_t> arg(out.size());
    for (int64_t i = 0; i < n * c; ++i) {
        const T* plane = x + i * h * w;
        for (int64_t r = 0; r < oh; ++r) {
            for (int64_t q = 0; q < ow; ++q) {
                const int64_t h0 = std::max<int64_t>(0, r * stride - pad);
                const int64_t w0 = std::max<int64_t>(0, q * stride - pad);
                const int64_t h1 = std::min<int64_t>(h, r * stride - pad + kernel);
                const int64_t w1 = std::min<int64_t>(w, q * stride - pad + kernel);
                T best = plane[h0 * w + w0];
                int64_t best_at = h0 * w + w0;
                for (int64_t ih = h0; ih < h1; ++ih) {
                    for (int64_t iw = w0; iw < w1; ++iw) {
                        const T v = plane[ih * w + iw];
                        if (v > best) {  // first maximum wins on ties
                            best = v;
                            best_at = ih * w + iw;
                        }
                    }
                }
                const size_t at = static_cast<size_t>((i * oh + r) * ow + q);
                out[at] = best;
                arg[at] = i * h * w + best_at;
            }
        }
    }
    Tensor<T> result({n, c, oh, ow}, std::move(out));

    detail::GradCtx<T> ctx{&input};
    if (ctx.recording) {
        const int in_node = ctx.in_nodes[0];
        auto arg_c = std::make_shared<std::vector<int64_t>>(std::move(arg));
        const int out_node = ctx.tape->add_interior(result.numel());
        ctx.tape->attach(result, out_node);
        ctx.tape->record("max_pool2d", {in_node}, out_node, [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            std::vector<T>& gin = tape.grad_buf(in_node);
            for (size_t i = 0; i < gout.size(); ++i) {
                gin[static_cast<size_t>((*arg_c)[i])] += gout[i];
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// fully_connected: input[N x F] * weight[Out x F]^T + bias.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weight,
                          const std::optional<Tensor<T>>& bias = std::nullopt) {
    if (input.rank() != 2 || weight.rank() != 2) {
        throw ShapeError("fully_connected: need input [NxF] and weight [OutxF], got " +
                         shape_str(input.shape()) + " and " + shape_str(weight.shape()));
    }
    const int64_t n = input.dim(0), f = input.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != f) {
        throw ShapeError("fully_connected: input feature dim " + std::to_string(f) +
                         " does not match weight " + shape_str(weight.shape()));
    }
    if (bias && bias->numel() != out_dim) {
        throw ShapeError("fully_connected: bias must have length " + std::to_string(out_dim));
    }
    const T* x = input.data().data();
    const T* w = weight.data().data();
    std::vector<T> out(static_cast<size_t>(n * out_dim), T(0));
    if (bias) {
        const T* b = bias->data().data();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t o = 0; o < out_dim; ++o) out[static_cast<size_t>(i * out_dim + o)] = b[o];
    }
    for (int64_t i = 0; i < n; ++i) {
        T* orow = out.data() + i * out_dim;
        const T* xrow = x + i * f;
        for (int64_t o = 0; o < out_dim; ++o) {
            const T* wrow = w + o * f;
            T s = T(0);
            for (int64_t j = 0; j < f; ++j) s += xrow[j] * wrow[j];
            orow[o] += s;
        }
    }
    Tensor<T> result({n, out_dim}, std::move(out));

    detail::GradCtx<T> ctx{&input, &weight, bias ? &*bias : &input};
    if (!bias) ctx.in_nodes[2] = -1;
    if (ctx.recording) {
        const int in_node = ctx.in_nodes[0];
        const int w_node = ctx.in_nodes[1];
        const int b_node = bias ? ctx.in_nodes[2] : -1;
        Tensor<T> in_copy = input;
        Tensor<T> w_copy = weight;
        const int out_node = ctx.tape->add_interior(result.numel());
        ctx.tape->attach(result, out_node);
        ctx.tape->record("fully_connected", {in_node, w_node, b_node}, out_node,
                         [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            const T* xv = in_copy.data().data();
            const T* wv = w_copy.data().data();
            for (int64_t i = 0; i < n; ++i) {
                const T* grow = gout.data() + i * out_dim;
                if (in_node >= 0) {
                    T* gx = tape.grad_buf(in_node).data() + i * f;
                    for (int64_t o = 0; o < out_dim; ++o)
                        detail::axpy(grow[o], wv + o * f, gx, f);
                }
                if (w_node >= 0) {
                    std::vector<T>& gw = tape.grad_buf(w_node);
                    for (int64_t o = 0; o < out_dim; ++o)
                        detail::axpy(grow[o], xv + i * f, gw.data() + o * f, f);
                }
                if (b_node >= 0) {
                    std::vector<T>& gb = tape.grad_buf(b_node);
                    for (int64_t o = 0; o < out_dim; ++o) gb[static_cast<size_t>(o)] += grow[o];
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// concat_channels: [N x Ca x H x W] ++ [N x Cb x H x W] along channels.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 4 || b.rank() != 4) {
        throw ShapeError("concat_channels: inputs must be NCHW, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw ShapeError("concat_channels: batch/spatial mismatch between " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    std::vector<T> out(static_cast<size_t>(n * (ca + cb) * hw));
    const T* av = a.data().data();
    const T* bv = b.data().data();
    for (int64_t i = 0; i < n; ++i) {
        std::copy(av + i * ca * hw, av + (i + 1) * ca * hw, out.data() + i * (ca + cb) * hw);
        std::copy(bv + i * cb * hw, bv + (i + 1) * cb * hw,
                  out.data() + (i * (ca + cb) + ca) * hw);
    }
    Tensor<T> result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out));

    detail::GradCtx<T> ctx{&a, &b};
    if (ctx.recording) {
        const int a_node = ctx.in_nodes[0];
        const int b_node = ctx.in_nodes[1];
        const int out_node = ctx.tape->add_interior(result.numel());
        ctx.tape->attach(result, out_node);
        ctx.tape->record("concat_channels", {a_node, b_node}, out_node, [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            for (int64_t i = 0; i < n; ++i) {
                if (a_node >= 0) {
                    T* ga = tape.grad_buf(a_node).data() + i * ca * hw;
                    const T* src = gout.data() + i * (ca + cb) * hw;
                    for (int64_t j = 0; j < ca * hw; ++j) ga[j] += src[j];
                }
                if (b_node >= 0) {
                    T* gb = tape.grad_buf(b_node).data() + i * cb * hw;
                    const T* src = gout.data() + (i * (ca + cb) + ca) * hw;
                    for (int64_t j = 0; j < cb * hw; ++j) gb[j] += src[j];
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops. `b` may broadcast: any extent-1 dim of b stretches
// to a's extent (same rank).
// ---------------------------------------------------------------------------
namespace detail {

enum class EwKind { Add, Sub, Mul };

template <typename T>
Tensor<T> elementwise_binary(const Tensor<T>& a, const Tensor<T>& b, EwKind kind,
                             const char* name) {
    const bool same = a.shape() == b.shape();
    std::vector<int64_t> bstr;
    if (!same) bstr = broadcast_strides(a, b, name);

    const auto av = a.data();
    const auto bv = b.data();
    std::vector<T> out(static_cast<size_t>(a.numel()));
    auto apply = [kind](T x, T y) {
        switch (kind) {
            case EwKind::Add: return x + y;
            case EwKind::Sub: return x - y;
            default: return x * y;
        }
    };
    if (same) {
        for (size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
    } else {
        for_each_broadcast(a, bstr, [&](int64_t ai, int64_t bi) {
            out[static_cast<size_t>(ai)] = apply(av[ai], bv[bi]);
        });
    }
    Tensor<T> result(a.shape(), std::move(out));

    GradCtx<T> ctx{&a, &b};
    if (ctx.recording) {
        const int a_node = ctx.in_nodes[0];
        const int b_node = ctx.in_nodes[1];
        Tensor<T> a_copy = a;
        Tensor<T> b_copy = b;
        const int out_node = ctx.tape->add_interior(result.numel());
        ctx.tape->attach(result, out_node);
        ctx.tape->record(name, {a_node, b_node}, out_node, [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            const auto axv = a_copy.data();
            const auto bxv = b_copy.data();
            const bool eq = a_copy.shape() == b_copy.shape();
            std::vector<int64_t> strides;
            if (!eq) strides = broadcast_strides(a_copy, b_copy, name);
            auto each = [&](auto&& fn) {
                if (eq) {
                    for (int64_t i = 0; i < a_copy.numel(); ++i) fn(i, i);
                } else {
                    for_each_broadcast(a_copy, strides, fn);
                }
            };
            switch (kind) {
                case EwKind::Add:
                    if (a_node >= 0) {
                        std::vector<T>& ga = tape.grad_buf(a_node);
                        for (size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
                    }
                    if (b_node >= 0) {
                        std::vector<T>& gb = tape.grad_buf(b_node);
                        each([&](int64_t ai, int64_t bi) { gb[static_cast<size_t>(bi)] += gout[static_cast<size_t>(ai)]; });
                    }
                    break;
                case EwKind::Sub:
                    if (a_node >= 0) {
                        std::vector<T>& ga = tape.grad_buf(a_node);
                        for (size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
                    }
                    if (b_node >= 0) {
                        std::vector<T>& gb = tape.grad_buf(b_node);
                        each([&](int64_t ai, int64_t bi) { gb[static_cast<size_t>(bi)] -= gout[static_cast<size_t>(ai)]; });
                    }
                    break;
                case EwKind::Mul:
                    if (a_node >= 0) {
                        std::vector<T>& ga = tape.grad_buf(a_node);
                        each([&](int64_t ai, int64_t bi) { ga[static_cast<size_t>(ai)] += gout[static_cast<size_t>(ai)] * bxv[bi]; });
                    }
                    if (b_node >= 0) {
                        std::vector<T>& gb = tape.grad_buf(b_node);
                        each([&](int64_t ai, int64_t bi) { gb[static_cast<size_t>(bi)] += gout[static_cast<size_t>(ai)] * axv[ai]; });
                    }
                    break;
            }
        });
    }
    return result;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise_binary(a, b, detail::EwKind::Add, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise_binary(a, b, detail::EwKind::Sub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise_binary(a, b, detail::EwKind::Mul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(static_cast<size_t>(a.numel()));
    const auto av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    Tensor<T> result(a.shape(), std::move(out));

    detail::GradCtx<T> ctx{&a};
    if (ctx.recording) {
        const int a_node = ctx.in_nodes[0];
        const int out_node = ctx.tape->add_interior(result.numel());
        ctx.tape->attach(result, out_node);
        ctx.tape->record("scale", {a_node}, out_node, [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            std::vector<T>& ga = tape.grad_buf(a_node);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += s * gout[i];
        });
    }
    return result;
}

// (1 - x), used for the gate complement.
template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) {
    return sub(Tensor<T>::ones(x.shape()), x);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    Tensor<T> result(std::move(shape), std::move(out));

    detail::GradCtx<T> ctx{&x};
    if (ctx.recording) {
        const int in_node = ctx.in_nodes[0];
        const int out_node = ctx.tape->add_interior(result.numel());
        ctx.tape->attach(result, out_node);
        ctx.tape->record("reshape", {in_node}, out_node, [=](Tape<T>& tape) {
            const std::vector<T>& gout = tape.grad_buf(out_node);
            std::vector<T>& gin = tape.grad_buf(in_node);
            for (size_t i = 0; i < gin.size(); ++i) gin[i] += gout[i];
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Reductions to a scalar.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.data()) s += v;
    Tensor<T> result = Tensor<T>::scalar(s);

    detail::GradCtx<T> ctx{&x};
    if (ctx.recording) {
        const int in_node = ctx.in_nodes[0];
        const int out_node = ctx.tape->add_interior(1);
        ctx.tape->attach(result, out_node);
        ctx.tape->record("sum_all", {in_node}, out_node, [=](Tape<T>& tape) {
            const T g = tape.grad_buf(out_node)[0];
            std::vector<T>& gin = tape.grad_buf(in_node);
            for (T& v : gin) v += g;
        });
    }
    return result;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
    T s = T(0);
    for (T v : x.data()) s += v;
    const T inv = T(1) / static_cast<T>(x.numel());
    Tensor<T> result = Tensor<T>::scalar(s * inv);

    detail::GradCtx<T> ctx{&x};
    if (ctx.recording) {
        const int in_node = ctx.in_nodes[0];
        const int out_node = ctx.tape->add_interior(1);
        ctx.tape->attach(result, out_node);
        ctx.tape->record("mean_all", {in_node}, out_node, [=](Tape<T>& tape) {
            const T g = tape.grad_buf(out_node)[0] * inv;
            std::vector<T>& gin = tape.grad_buf(in_node);
            for (T& v : gin) v += g;
        });
    }
    return result;
}

}  // namespace gafm
