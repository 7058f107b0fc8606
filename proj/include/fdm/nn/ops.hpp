#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fdm/nn/autograd.hpp"
#include "fdm/nn/kernels.hpp"

// Differentiable operations on Tape values. Image tensors are NCHW.
namespace fdm::nn {

namespace detail {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
}

template <class T>
void require_rank(const Var<T>& a, std::size_t rank, const char* op, const char* name) {
    if (a.shape().size() != rank) {
        throw ShapeError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) + ", got " +
                         to_string(a.shape()));
    }
}

template <class T>
T sigmoid(T x) {
    return x >= 0 ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
}

} // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "add");
    Tape<T>& tp = *a.tape;
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return tp.push(std::move(out), tp.requires_grad(a) || tp.requires_grad(b),
                   [a, b](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       for (const Var<T>& in : {a, b}) {
                           if (!t.requires_grad(in)) continue;
                           auto& gi = t.grad_buffer(in.id);
                           for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                       }
                   });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "sub");
    Tape<T>& tp = *a.tape;
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    return tp.push(std::move(out), tp.requires_grad(a) || tp.requires_grad(b),
                   [a, b](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       if (t.requires_grad(a)) {
                           auto& ga = t.grad_buffer(a.id);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       }
                       if (t.requires_grad(b)) {
                           auto& gb = t.grad_buffer(b.id);
                           for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                       }
                   });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "mul");
    Tape<T>& tp = *a.tape;
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return tp.push(std::move(out), tp.requires_grad(a) || tp.requires_grad(b),
                   [a, b](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       const auto& av = t.value(a.id).data;
                       const auto& bv = t.value(b.id).data;
                       if (t.requires_grad(a)) {
                           auto& ga = t.grad_buffer(a.id);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                       }
                       if (t.requires_grad(b)) {
                           auto& gb = t.grad_buffer(b.id);
                           for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                       }
                   });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = a.value();
    for (T& v : out.data) v *= factor;
    return tp.push(std::move(out), tp.requires_grad(a), [a, factor](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_buffer(self);
        auto& ga = t.grad_buffer(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    });
}

template <class T>
Var<T> sum(Var<T> a) {
    Tape<T>& tp = *a.tape;
    T s = 0;
    for (T v : a.value().data) s += v;
    return tp.push(Tensor<T>({1}, {s}), tp.requires_grad(a), [a](Tape<T>& t, std::size_t self) {
        const T g = t.grad_buffer(self)[0];
        for (T& gi : t.grad_buffer(a.id)) gi += g;
    });
}

template <class T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), T{1} / static_cast<T>(a.value().numel()));
}

template <class T>
Var<T> silu(Var<T> a) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = a.value();
    for (T& v : out.data) v = v * detail::sigmoid(v);
    return tp.push(std::move(out), tp.requires_grad(a), [a](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_buffer(self);
        const auto& x = t.value(a.id).data;
        auto& ga = t.grad_buffer(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = detail::sigmoid(x[i]);
            ga[i] += g[i] * s * (T{1} + x[i] * (T{1} - s));
        }
    });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = a.value();
    for (T& v : out.data) v = detail::sigmoid(v);
    return tp.push(std::move(out), tp.requires_grad(a), [a](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_buffer(self);
        const auto& y = t.value(self).data;
        auto& ga = t.grad_buffer(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T{1} - y[i]);
    });
}

// Cross-correlation with square zero padding. input [N,Cin,H,W],
// kernel [Cout,Cin,kH,kW], bias [Cout].
template <class T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, std::size_t stride, std::size_t padding) {
    detail::require_rank(input, 4, "conv2d", "input");
    detail::require_rank(kernel, 4, "conv2d", "kernel");
    detail::require_rank(bias, 1, "conv2d", "bias");
    const Shape& xs = input.shape();
    const Shape& ks = kernel.shape();
    if (ks[1] != xs[1]) {
        throw ShapeError("conv2d: input channels (dim 1) = " + std::to_string(xs[1]) + " but kernel expects " +
                         std::to_string(ks[1]));
    }
    if (bias.shape()[0] != ks[0]) {
        throw ShapeError("conv2d: bias length " + std::to_string(bias.shape()[0]) + " != output channels " +
                         std::to_string(ks[0]));
    }
    if (ks[2] % 2 == 0 || ks[3] % 2 == 0) {
        throw ShapeError("conv2d: kernel height/width must be odd, got " + to_string(ks));
    }
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (xs[2] + 2 * padding < ks[2] || xs[3] + 2 * padding < ks[3]) {
        throw ShapeError("conv2d: kernel " + to_string(ks) + " larger than padded input " + to_string(xs));
    }
    kernels::ConvGeometry g{xs[1],
                            xs[2],
                            xs[3],
                            ks[2],
                            ks[3],
                            stride,
                            padding,
                            (xs[2] + 2 * padding - ks[2]) / stride + 1,
                            (xs[3] + 2 * padding - ks[3]) / stride + 1};
    const std::size_t N = xs[0], Cout = ks[0];
    Tensor<T> out({N, Cout, g.out_h, g.out_w});
    const std::size_t panels = kernels::panel_count(g.cols());
    const std::size_t ldc = kernels::padded_ld<T>(g.cols());
    T* col = kernels::scratch<T, 0>(g.rows() * ldc);
    T* acc = kernels::scratch<T, 1>(Cout * ldc);
    // Padding columns past cols() must read as zero.
    std::fill_n(col, g.rows() * ldc, T{0});
    const auto& x = input.value().data;
    const auto& w = kernel.value().data;
    const auto& b = bias.value().data;
    const std::size_t in_stride = g.channels * g.height * g.width;
    const std::size_t out_stride = Cout * g.cols();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Cout; ++co) std::fill_n(acc + co * ldc, ldc, b[co]);
        kernels::im2col(g, x.data() + n * in_stride, col, ldc);
        kernels::gemm_panels(Cout, panels, g.rows(), w.data(), g.rows(), 1, col, ldc, acc, ldc);
        T* o = out.data.data() + n * out_stride;
        for (std::size_t co = 0; co < Cout; ++co) std::copy_n(acc + co * ldc, g.cols(), o + co * g.cols());
    }
    Tape<T>& tp = *input.tape;
    const bool rg = tp.requires_grad(input) || tp.requires_grad(kernel) || tp.requires_grad(bias);
    return tp.push(std::move(out), rg, [input, kernel, bias, g, N, Cout](Tape<T>& t, std::size_t self) {
        const auto& gout = t.grad_buffer(self);
        const auto& x = t.value(input.id).data;
        const auto& w = t.value(kernel.id).data;
        const std::size_t in_stride = g.channels * g.height * g.width;
        const std::size_t out_stride = Cout * g.cols();
        const bool need_x = t.requires_grad(input);
        const bool need_w = t.requires_grad(kernel);
        if (t.requires_grad(bias)) {
            auto& gb = t.grad_buffer(bias.id);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t co = 0; co < Cout; ++co) {
                    const T* go = gout.data() + n * out_stride + co * g.cols();
                    T s = 0;
                    for (std::size_t j = 0; j < g.cols(); ++j) s += go[j];
                    gb[co] += s;
                }
            }
        }
        if (!need_x && !need_w) return;
        const std::size_t panels = kernels::panel_count(g.rows());
        const std::size_t ldw = kernels::padded_ld<T>(g.rows());
        T* colT = nullptr;
        T* dw = nullptr;
        T* dcol = nullptr;
        if (need_w) {
            colT = kernels::scratch<T, 0>(g.cols() * ldw);
            dw = kernels::scratch<T, 1>(Cout * ldw);
            std::fill_n(colT, g.cols() * ldw, T{0});
            std::fill_n(dw, Cout * ldw, T{0});
        }
        if (need_x) dcol = kernels::scratch<T, 2>(g.rows() * g.cols());
        for (std::size_t n = 0; n < N; ++n) {
            const T* go = gout.data() + n * out_stride;
            if (need_w) {
                // dW[Cout,rows] += dout[Cout,cols] * colT[cols,rows]
                kernels::im2col_t(g, x.data() + n * in_stride, colT, ldw);
                kernels::gemm_panels(Cout, panels, g.cols(), go, g.cols(), 1, colT, ldw, dw, ldw);
            }
            if (need_x) {
                std::fill_n(dcol, g.rows() * g.cols(), T{0});
                kernels::gemm_tn(g.rows(), g.cols(), Cout, w.data(), go, dcol);
                kernels::col2im(g, dcol, t.grad_buffer(input.id).data() + n * in_stride);
            }
        }
        if (need_w) {
            auto& gw = t.grad_buffer(kernel.id);
            for (std::size_t co = 0; co < Cout; ++co) {
                for (std::size_t r = 0; r < g.rows(); ++r) gw[co * g.rows() + r] += dw[co * ldw + r];
            }
        }
    });
}

// Group normalisation over groups of `channels_per_group` channels, with a
// per-channel affine (gamma, beta).
template <class T>
Var<T> group_norm(Var<T> input, Var<T> gamma, Var<T> beta, std::size_t channels_per_group, T eps = T(1e-5)) {
    detail::require_rank(input, 4, "group_norm", "input");
    const Shape& xs = input.shape();
    const std::size_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
    if (channels_per_group == 0 || C % channels_per_group != 0) {
        throw ShapeError("group_norm: channel count (dim 1) = " + std::to_string(C) +
                         " is not a multiple of group size " + std::to_string(channels_per_group));
    }
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
        throw ShapeError("group_norm: gamma/beta must have shape [" + std::to_string(C) + "]");
    }
    const std::size_t G = C / channels_per_group;
    const std::size_t group_len = channels_per_group * HW;
    const auto& x = input.value().data;
    const auto& ga = gamma.value().data;
    const auto& be = beta.value().data;
    Tensor<T> out(xs);
    std::vector<T> xhat(x.size());
    std::vector<T> inv_std(N * G);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t gi = 0; gi < G; ++gi) {
            const std::size_t base = (n * C + gi * channels_per_group) * HW;
            double s = 0;
            for (std::size_t i = 0; i < group_len; ++i) s += x[base + i];
            const double mu = s / static_cast<double>(group_len);
            double v = 0;
            for (std::size_t i = 0; i < group_len; ++i) {
                const double d = x[base + i] - mu;
                v += d * d;
            }
            const T is = static_cast<T>(1.0 / std::sqrt(v / static_cast<double>(group_len) + eps));
            inv_std[n * G + gi] = is;
            for (std::size_t i = 0; i < group_len; ++i) {
                const std::size_t c = gi * channels_per_group + i / HW;
                const T xh = static_cast<T>(x[base + i] - mu) * is;
                xhat[base + i] = xh;
                out[base + i] = ga[c] * xh + be[c];
            }
        }
    }
    Tape<T>& tp = *input.tape;
    const bool rg = tp.requires_grad(input) || tp.requires_grad(gamma) || tp.requires_grad(beta);
    return tp.push(std::move(out), rg,
                   [input, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), N, C, HW, G,
                    channels_per_group](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       const auto& ga = t.value(gamma.id).data;
                       const std::size_t group_len = channels_per_group * HW;
                       if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                           std::vector<T> dg(C, T{0}), db(C, T{0});
                           for (std::size_t n = 0; n < N; ++n) {
                               for (std::size_t c = 0; c < C; ++c) {
                                   const std::size_t base = (n * C + c) * HW;
                                   T sg = 0, sb = 0;
                                   for (std::size_t i = 0; i < HW; ++i) {
                                       sg += g[base + i] * xhat[base + i];
                                       sb += g[base + i];
                                   }
                                   dg[c] += sg;
                                   db[c] += sb;
                               }
                           }
                           if (t.requires_grad(gamma)) {
                               auto& gg = t.grad_buffer(gamma.id);
                               for (std::size_t c = 0; c < C; ++c) gg[c] += dg[c];
                           }
                           if (t.requires_grad(beta)) {
                               auto& gb = t.grad_buffer(beta.id);
                               for (std::size_t c = 0; c < C; ++c) gb[c] += db[c];
                           }
                       }
                       if (!t.requires_grad(input)) return;
                       auto& gx = t.grad_buffer(input.id);
                       const T inv_len = T{1} / static_cast<T>(group_len);
                       for (std::size_t n = 0; n < N; ++n) {
                           for (std::size_t gi = 0; gi < G; ++gi) {
                               const std::size_t base = (n * C + gi * channels_per_group) * HW;
                               T mean_d = 0, mean_dx = 0;
                               for (std::size_t i = 0; i < group_len; ++i) {
                                   const T d = g[base + i] * ga[gi * channels_per_group + i / HW];
                                   mean_d += d;
                                   mean_dx += d * xhat[base + i];
                               }
                               mean_d *= inv_len;
                               mean_dx *= inv_len;
                               const T is = inv_std[n * G + gi];
                               for (std::size_t i = 0; i < group_len; ++i) {
                                   const T d = g[base + i] * ga[gi * channels_per_group + i / HW];
                                   gx[base + i] += is * (d - mean_d - xhat[base + i] * mean_dx);
                               }
                           }
                       }
                   });
}

// x [N,C,H,W] + bias [N,C] broadcast over H,W.
template <class T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
    detail::require_rank(x, 4, "add_channel_bias", "input");
    const Shape& xs = x.shape();
    if (bias.shape() != Shape{xs[0], xs[1]}) {
        throw ShapeError("add_channel_bias: bias shape " + to_string(bias.shape()) + " does not match [N,C] of " +
                         to_string(xs));
    }
    const std::size_t NC = xs[0] * xs[1], HW = xs[2] * xs[3];
    Tensor<T> out = x.value();
    for (std::size_t nc = 0; nc < NC; ++nc) {
        const T b = bias.value()[nc];
        for (std::size_t i = 0; i < HW; ++i) out[nc * HW + i] += b;
    }
    Tape<T>& tp = *x.tape;
    return tp.push(std::move(out), tp.requires_grad(x) || tp.requires_grad(bias),
                   [x, bias, NC, HW](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       if (t.requires_grad(x)) {
                           auto& gx = t.grad_buffer(x.id);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                       }
                       if (t.requires_grad(bias)) {
                           auto& gb = t.grad_buffer(bias.id);
                           for (std::size_t nc = 0; nc < NC; ++nc) {
                               T s = 0;
                               for (std::size_t i = 0; i < HW; ++i) s += g[nc * HW + i];
                               gb[nc] += s;
                           }
                       }
                   });
}

// x [N,in] * weight[out,in]^T + bias[out]
template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
    detail::require_rank(x, 2, "linear", "input");
    detail::require_rank(weight, 2, "linear", "weight");
    const std::size_t N = x.dim(0), I = x.dim(1), O = weight.dim(0);
    if (weight.dim(1) != I) {
        throw ShapeError("linear: input features (dim 1) = " + std::to_string(I) + " but weight expects " +
                         std::to_string(weight.dim(1)));
    }
    if (bias.shape() != Shape{O}) throw ShapeError("linear: bias must have shape [" + std::to_string(O) + "]");
    Tensor<T> out({N, O});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t o = 0; o < O; ++o) out[n * O + o] = bias.value()[o];
    }
    kernels::gemm_nt(N, O, I, x.value().data.data(), weight.value().data.data(), out.data.data());
    Tape<T>& tp = *x.tape;
    const bool rg = tp.requires_grad(x) || tp.requires_grad(weight) || tp.requires_grad(bias);
    return tp.push(std::move(out), rg, [x, weight, bias, N, I, O](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_buffer(self);
        if (t.requires_grad(bias)) {
            auto& gb = t.grad_buffer(bias.id);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t o = 0; o < O; ++o) gb[o] += g[n * O + o];
            }
        }
        if (t.requires_grad(weight)) {
            // dW[O,I] += g^T[O,N] x[N,I]
            kernels::gemm_tn(O, I, N, g.data(), t.value(x.id).data.data(), t.grad_buffer(weight.id).data());
        }
        if (t.requires_grad(x)) {
            // dx[N,I] += g[N,O] W[O,I]
            kernels::gemm_nn(N, I, O, g.data(), t.value(weight.id).data.data(), t.grad_buffer(x.id).data());
        }
    });
}

template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    detail::require_rank(a, 4, "concat_channels", "first input");
    detail::require_rank(b, 4, "concat_channels", "second input");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
        throw ShapeError("concat_channels: " + to_string(as) + " and " + to_string(bs) +
                         " differ outside the channel dimension");
    }
    const std::size_t N = as[0], Ca = as[1], Cb = bs[1], HW = as[2] * as[3];
    Tensor<T> out({N, Ca + Cb, as[2], as[3]});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(a.value().data.begin() + n * Ca * HW, Ca * HW, out.data.begin() + n * (Ca + Cb) * HW);
        std::copy_n(b.value().data.begin() + n * Cb * HW, Cb * HW,
                    out.data.begin() + n * (Ca + Cb) * HW + Ca * HW);
    }
    Tape<T>& tp = *a.tape;
    return tp.push(std::move(out), tp.requires_grad(a) || tp.requires_grad(b),
                   [a, b, N, Ca, Cb, HW](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       for (std::size_t n = 0; n < N; ++n) {
                           const T* src = g.data() + n * (Ca + Cb) * HW;
                           if (t.requires_grad(a)) {
                               T* dst = t.grad_buffer(a.id).data() + n * Ca * HW;
                               for (std::size_t i = 0; i < Ca * HW; ++i) dst[i] += src[i];
                           }
                           if (t.requires_grad(b)) {
                               T* dst = t.grad_buffer(b.id).data() + n * Cb * HW;
                               for (std::size_t i = 0; i < Cb * HW; ++i) dst[i] += src[Ca * HW + i];
                           }
                       }
                   });
}

template <class T>
Var<T> upsample_nearest2x(Var<T> x) {
    detail::require_rank(x, 4, "upsample_nearest2x", "input");
    const Shape& xs = x.shape();
    const std::size_t NC = xs[0] * xs[1], H = xs[2], W = xs[3];
    Tensor<T> out({xs[0], xs[1], 2 * H, 2 * W});
    for (std::size_t nc = 0; nc < NC; ++nc) {
        for (std::size_t y = 0; y < 2 * H; ++y) {
            for (std::size_t xx = 0; xx < 2 * W; ++xx) {
                out[(nc * 2 * H + y) * 2 * W + xx] = x.value()[(nc * H + y / 2) * W + xx / 2];
            }
        }
    }
    Tape<T>& tp = *x.tape;
    return tp.push(std::move(out), tp.requires_grad(x), [x, NC, H, W](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_buffer(self);
        auto& gx = t.grad_buffer(x.id);
        for (std::size_t nc = 0; nc < NC; ++nc) {
            for (std::size_t y = 0; y < 2 * H; ++y) {
                for (std::size_t xx = 0; xx < 2 * W; ++xx) {
                    gx[(nc * H + y / 2) * W + xx / 2] += g[(nc * 2 * H + y) * 2 * W + xx];
                }
            }
        }
    });
}

// Mean squared error over all elements.
template <class T>
Var<T> mse_loss(Var<T> pred, Var<T> target) {
    detail::require_same_shape(pred, target, "mse_loss");
    const auto& p = pred.value().data;
    const auto& q = target.value().data;
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = static_cast<double>(p[i]) - q[i];
        s += d * d;
    }
    const std::size_t n = p.size();
    Tape<T>& tp = *pred.tape;
    return tp.push(Tensor<T>({1}, {static_cast<T>(s / static_cast<double>(n))}),
                   tp.requires_grad(pred) || tp.requires_grad(target),
                   [pred, target, n](Tape<T>& t, std::size_t self) {
                       const T g = t.grad_buffer(self)[0] * T{2} / static_cast<T>(n);
                       const auto& p = t.value(pred.id).data;
                       const auto& q = t.value(target.id).data;
                       if (t.requires_grad(pred)) {
                           auto& gp = t.grad_buffer(pred.id);
                           for (std::size_t i = 0; i < n; ++i) gp[i] += g * (p[i] - q[i]);
                       }
                       if (t.requires_grad(target)) {
                           auto& gq = t.grad_buffer(target.id);
                           for (std::size_t i = 0; i < n; ++i) gq[i] -= g * (p[i] - q[i]);
                       }
                   });
}

// Batch mean of 1 - (2*sum(p*m) + s) / (sum(p) + sum(m) + s), each sample
// reduced over every non-batch dimension.
template <class T>
Var<T> soft_dice_loss(Var<T> probs, Var<T> mask, T smooth = T{1}) {
    detail::require_same_shape(probs, mask, "soft_dice_loss");
    const std::size_t N = probs.dim(0);
    const std::size_t len = probs.value().numel() / N;
    const auto& p = probs.value().data;
    const auto& m = mask.value().data;
    std::vector<T> inter(N), denom(N);
    double loss = 0;
    for (std::size_t n = 0; n < N; ++n) {
        double I = 0, P = 0, M = 0;
        for (std::size_t i = n * len; i < (n + 1) * len; ++i) {
            I += static_cast<double>(p[i]) * m[i];
            P += p[i];
            M += m[i];
        }
        inter[n] = static_cast<T>(I);
        denom[n] = static_cast<T>(P + M + smooth);
        loss += 1.0 - (2.0 * I + smooth) / (P + M + smooth);
    }
    Tape<T>& tp = *probs.tape;
    return tp.push(Tensor<T>({1}, {static_cast<T>(loss / static_cast<double>(N))}), tp.requires_grad(probs),
                   [probs, mask, N, len, smooth, inter = std::move(inter), denom = std::move(denom)](
                       Tape<T>& t, std::size_t self) {
                       const T g = t.grad_buffer(self)[0] / static_cast<T>(N);
                       const auto& m = t.value(mask.id).data;
                       auto& gp = t.grad_buffer(probs.id);
                       for (std::size_t n = 0; n < N; ++n) {
                           const T num = T{2} * inter[n] + smooth;
                           const T d = denom[n];
                           for (std::size_t i = n * len; i < (n + 1) * len; ++i) {
                               gp[i] -= g * (T{2} * m[i] * d - num) / (d * d);
                           }
                       }
                   });
}

} // namespace fdm::nn
