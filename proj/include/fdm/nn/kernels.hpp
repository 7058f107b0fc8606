#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

// Dense loops behind conv2d and linear. All loops run in a fixed order so
// results are reproducible for a given build.
namespace fdm::nn::kernels {

namespace detail {

template <class T>
struct Vec64;
template <>
struct Vec64<float> {
    typedef float type __attribute__((vector_size(64)));
    typedef float unaligned __attribute__((vector_size(64), aligned(4), __may_alias__));
};
template <>
struct Vec64<double> {
    typedef double type __attribute__((vector_size(64)));
    typedef double unaligned __attribute__((vector_size(64), aligned(8), __may_alias__));
};
template <class T>
using vec64 = typename Vec64<T>::type;
template <class T>
using vec64u = typename Vec64<T>::unaligned;

template <class T>
inline constexpr std::size_t kLanes = 64 / sizeof(T);

// Accumulates an MR x (NV*lanes) tile: C[r][j] += sum_k A(r,k) * B[k][j],
// where A(r,k) = A[r*a_rs + k*a_ks]. Accumulators stay in registers.
template <class T, std::size_t MR, std::size_t NV>
inline void micro_tile(std::size_t K, const T* A, std::size_t a_rs, std::size_t a_ks, const T* B,
                       std::size_t ldb, T* C, std::size_t ldc) {
    using V = vec64<T>;
    using U = vec64u<T>;
    constexpr std::size_t W = kLanes<T>;
    V acc[MR][NV];
    for (std::size_t r = 0; r < MR; ++r) {
        for (std::size_t v = 0; v < NV; ++v) acc[r][v] = *reinterpret_cast<const U*>(C + r * ldc + v * W);
    }
    for (std::size_t k = 0; k < K; ++k) {
        V b[NV];
        for (std::size_t v = 0; v < NV; ++v) b[v] = *reinterpret_cast<const U*>(B + k * ldb + v * W);
        for (std::size_t r = 0; r < MR; ++r) {
            const T a = A[r * a_rs + k * a_ks];
            for (std::size_t v = 0; v < NV; ++v) acc[r][v] += a * b[v];
        }
    }
    for (std::size_t r = 0; r < MR; ++r) {
        for (std::size_t v = 0; v < NV; ++v) *reinterpret_cast<U*>(C + r * ldc + v * W) = acc[r][v];
    }
}

// Copies the K x (NV*lanes) panel of B into contiguous storage first; with
// large row strides the unpacked panel thrashes L1 sets and the TLB.
template <class T, std::size_t NV>
inline void column_panel(std::size_t M, std::size_t K, const T* A, std::size_t a_rs, std::size_t a_ks,
                         const T* B_in, std::size_t ldb_in, T* C, std::size_t ldc) {
    constexpr std::size_t MR = 4;
    constexpr std::size_t PW = NV * kLanes<T>;
    thread_local std::vector<T> pack;
    const T* B = B_in;
    std::size_t ldb = ldb_in;
    if (M > 1 && ldb_in != PW) {
        pack.resize(K * PW);
        for (std::size_t k = 0; k < K; ++k) std::copy_n(B_in + k * ldb_in, PW, pack.data() + k * PW);
        B = pack.data();
        ldb = PW;
    }
    std::size_t i = 0;
    for (; i + MR <= M; i += MR) micro_tile<T, MR, NV>(K, A + i * a_rs, a_rs, a_ks, B, ldb, C + i * ldc, ldc);
    for (; i < M; ++i) micro_tile<T, 1, NV>(K, A + i * a_rs, a_rs, a_ks, B, ldb, C + i * ldc, ldc);
}

// C[M,N] += A[M,K] * B[K,N] with A given by row/inner strides.
template <class T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t a_rs, std::size_t a_ks,
          const T* B, std::size_t ldb, T* C, std::size_t ldc) {
    constexpr std::size_t W = kLanes<T>;
    std::size_t j = 0;
    for (; j + 4 * W <= N; j += 4 * W) column_panel<T, 4>(M, K, A, a_rs, a_ks, B + j, ldb, C + j, ldc);
    for (; j + W <= N; j += W) column_panel<T, 1>(M, K, A, a_rs, a_ks, B + j, ldb, C + j, ldc);
    if (j == N) return;
    for (std::size_t i = 0; i < M; ++i) {
        T* c = C + i * ldc;
        for (std::size_t k = 0; k < K; ++k) {
            const T a = A[i * a_rs + k * a_ks];
            const T* b = B + k * ldb;
            for (std::size_t jj = j; jj < N; ++jj) c[jj] += a * b[jj];
        }
    }
}

} // namespace detail

inline constexpr std::size_t kPanelWidth = 64;

// Per-thread reusable buffer; avoids page-faulting fresh multi-megabyte
// allocations on every convolution call. Contents are unspecified.
template <class T, int Slot>
T* scratch(std::size_t n) {
    thread_local std::vector<T> buf;
    if (buf.size() < n) buf.resize(n);
    return buf.data();
}

inline std::size_t panel_count(std::size_t n) { return (n + kPanelWidth - 1) / kPanelWidth; }

// Leading dimension for a K x n operand: whole panels plus a skew so rows
// do not land 4 KiB apart.
template <class T>
std::size_t padded_ld(std::size_t n) {
    return panel_count(n) * kPanelWidth + 64 / sizeof(T);
}

// C[M, P*64] += A[M,K] * B[K, P*64] with B rows `ldb` apart. Columns past
// the logical width must be zero-filled by the caller.
template <class T>
void gemm_panels(std::size_t M, std::size_t P, std::size_t K, const T* A, std::size_t a_rs, std::size_t a_ks,
                 const T* Bm, std::size_t ldb, T* C, std::size_t ldc) {
    constexpr std::size_t NV = kPanelWidth / detail::kLanes<T>;
    for (std::size_t p = 0; p < P; ++p) {
        const T* B = Bm + p * kPanelWidth;
        T* Cp = C + p * kPanelWidth;
        std::size_t i = 0;
        for (; i + 4 <= M; i += 4) {
            detail::micro_tile<T, 4, NV>(K, A + i * a_rs, a_rs, a_ks, B, ldb, Cp + i * ldc, ldc);
        }
        for (; i < M; ++i) {
            detail::micro_tile<T, 1, NV>(K, A + i * a_rs, a_rs, a_ks, B, ldb, Cp + i * ldc, ldc);
        }
    }
}

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    detail::gemm(M, N, K, A, K, 1, B, N, C, N);
}

// C[K,N] += A[M,K]^T * B[M,N]
template <class T>
void gemm_tn(std::size_t K, std::size_t N, std::size_t M, const T* A, const T* B, T* C) {
    detail::gemm(K, N, M, A, 1, K, B, N, C, N);
}

// C[M,K] += A[M,N] * B[K,N]^T as row-by-row dot products. Used only for the
// small matrices of linear layers; convolutions transpose their columns
// instead and call gemm_nn.
template <class T>
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* a = A + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T* b = B + k * N;
            T s = 0;
            for (std::size_t j = 0; j < N; ++j) s += a[j] * b[j];
            C[i * K + k] += s;
        }
    }
}

struct ConvGeometry {
    std::size_t channels, height, width;
    std::size_t kernel_h, kernel_w;
    std::size_t stride, padding;
    std::size_t out_h, out_w;

    std::size_t rows() const { return channels * kernel_h * kernel_w; }
    std::size_t cols() const { return out_h * out_w; }
};

// col[(c*kh+ky)*kw+kx][oy*ow+ox] = x[c][oy*s+ky-p][ox*s+kx-p], zero outside.
// Rows are `ld` apart (ld >= cols).
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col, std::size_t ld) {
    const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
    const long pad = static_cast<long>(g.padding), s = static_cast<long>(g.stride);
    std::size_t r = 0;
    for (std::size_t c = 0; c < g.channels; ++c) {
        const T* xc = x + c * g.height * g.width;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx, ++r) {
                T* row = col + r * ld;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy) * s + static_cast<long>(ky) - pad;
                    T* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + g.out_w, T{0});
                        continue;
                    }
                    const T* src = xc + iy * W;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox) * s + static_cast<long>(kx) - pad;
                        dst[ox] = (ix < 0 || ix >= W) ? T{0} : src[ix];
                    }
                }
            }
        }
    }
}

// Transposed im2col: colT[oy*ow+ox][(c*kh+ky)*kw+kx], rows `ld` apart.
template <class T>
void im2col_t(const ConvGeometry& g, const T* x, T* colT, std::size_t ld) {
    const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
    const long pad = static_cast<long>(g.padding), s = static_cast<long>(g.stride);
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            T* dst = colT + (oy * g.out_w + ox) * ld;
            std::size_t r = 0;
            for (std::size_t c = 0; c < g.channels; ++c) {
                const T* xc = x + c * g.height * g.width;
                for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                    const long iy = static_cast<long>(oy) * s + static_cast<long>(ky) - pad;
                    for (std::size_t kx = 0; kx < g.kernel_w; ++kx, ++r) {
                        const long ix = static_cast<long>(ox) * s + static_cast<long>(kx) - pad;
                        dst[r] = (iy < 0 || iy >= H || ix < 0 || ix >= W) ? T{0} : xc[iy * W + ix];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters column gradients back into dx (accumulating).
template <class T>
void col2im(const ConvGeometry& g, const T* col, T* dx) {
    const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
    const long pad = static_cast<long>(g.padding), s = static_cast<long>(g.stride);
    std::size_t r = 0;
    for (std::size_t c = 0; c < g.channels; ++c) {
        T* xc = dx + c * g.height * g.width;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx, ++r) {
                const T* row = col + r * g.cols();
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy) * s + static_cast<long>(ky) - pad;
                    if (iy < 0 || iy >= H) continue;
                    const T* src = row + oy * g.out_w;
                    T* dst = xc + iy * W;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox) * s + static_cast<long>(kx) - pad;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

} // namespace fdm::nn::kernels
