#pragma once

#include <cstring>
#include <stdexcept>

#include "flowbench/nn/gemm.hpp"
#include "flowbench/nn/tensor.hpp"

namespace flowbench::nn {

// Geometry of a 2-d convolution over NHWC data with weights [kh, kw, Cin, Cout].
// zero_pad uses p = (k-1)/2 per side (odd kernels), so output extents are
// ceil(H/stride); without padding they are floor((H-k)/stride)+1.
struct ConvDims {
    int H = 0, W = 0, C = 0;
    int kh = 0, kw = 0, Cout = 0;
    int stride = 1;
    int pad = 0;
    int OH = 0, OW = 0;

    static ConvDims make(int H, int W, int C, int kh, int kw, int Cout, int stride, bool zero_pad) {
        ConvDims d;
        d.H = H;
        d.W = W;
        d.C = C;
        d.kh = kh;
        d.kw = kw;
        d.Cout = Cout;
        d.stride = stride;
        d.pad = zero_pad ? (kh - 1) / 2 : 0;
        d.OH = (H + 2 * d.pad - kh) / stride + 1;
        d.OW = (W + 2 * d.pad - kw) / stride + 1;
        if (d.OH < 1 || d.OW < 1) throw std::invalid_argument("conv2d: output extent < 1");
        return d;
    }

    int patch_len() const { return kh * kw * C; }
    int out_pixels() const { return OH * OW; }
};

// Gathers one sample into patches [OH*OW x kh*kw*C]; channel spans are
// contiguous so each (ky,kx) tap is a single memcpy.
template <typename T>
inline void im2col(const T* x, const ConvDims& d, T* patches) {
    const int K = d.patch_len();
    for (int oy = 0; oy < d.OH; ++oy) {
        const int iy0 = oy * d.stride - d.pad;
        for (int ox = 0; ox < d.OW; ++ox) {
            const int ix0 = ox * d.stride - d.pad;
            T* row = patches + (static_cast<std::int64_t>(oy) * d.OW + ox) * K;
            for (int ky = 0; ky < d.kh; ++ky) {
                const int iy = iy0 + ky;
                T* dst = row + static_cast<std::int64_t>(ky) * d.kw * d.C;
                if (iy < 0 || iy >= d.H) {
                    std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(d.kw) * d.C);
                    continue;
                }
                for (int kx = 0; kx < d.kw; ++kx) {
                    const int ix = ix0 + kx;
                    if (ix < 0 || ix >= d.W) {
                        std::memset(dst + kx * d.C, 0, sizeof(T) * static_cast<std::size_t>(d.C));
                    } else {
                        std::memcpy(dst + kx * d.C,
                                    x + (static_cast<std::int64_t>(iy) * d.W + ix) * d.C,
                                    sizeof(T) * static_cast<std::size_t>(d.C));
                    }
                }
            }
        }
    }
}

// Scatter-adds patch gradients back to the input layout (adjoint of im2col).
template <typename T>
inline void col2im_add(const T* patches, const ConvDims& d, T* dx) {
    const int K = d.patch_len();
    for (int oy = 0; oy < d.OH; ++oy) {
        const int iy0 = oy * d.stride - d.pad;
        for (int ox = 0; ox < d.OW; ++ox) {
            const int ix0 = ox * d.stride - d.pad;
            const T* row = patches + (static_cast<std::int64_t>(oy) * d.OW + ox) * K;
            for (int ky = 0; ky < d.kh; ++ky) {
                const int iy = iy0 + ky;
                if (iy < 0 || iy >= d.H) continue;
                for (int kx = 0; kx < d.kw; ++kx) {
                    const int ix = ix0 + kx;
                    if (ix < 0 || ix >= d.W) continue;
                    const T* src = row + (static_cast<std::int64_t>(ky) * d.kw + kx) * d.C;
                    T* dst = dx + (static_cast<std::int64_t>(iy) * d.W + ix) * d.C;
                    for (int c = 0; c < d.C; ++c) dst[c] += src[c];
                }
            }
        }
    }
}

// Geometry of the 4x4/stride-2 transposed convolution; padding is fixed so
// output extents are exactly 2H x 2W (input pixel (iy,ix) with tap (ky,kx)
// lands on output (2*iy+ky-1, 2*ix+kx-1)).
struct TConvDims {
    int H = 0, W = 0, Cin = 0, Cout = 0;
    static constexpr int kK = 4;
    static constexpr int kStride = 2;
    int OH = 0, OW = 0;

    static TConvDims make(int H, int W, int Cin, int Cout) {
        TConvDims d;
        d.H = H;
        d.W = W;
        d.Cin = Cin;
        d.Cout = Cout;
        d.OH = 2 * H;
        d.OW = 2 * W;
        return d;
    }
};

// Scatter-adds per-input-pixel contributions G [H*W x 16*Cout] into y.
template <typename T>
inline void tconv_scatter_add(const T* g, const TConvDims& d, T* y) {
    for (int iy = 0; iy < d.H; ++iy) {
        for (int ix = 0; ix < d.W; ++ix) {
            const T* row = g + (static_cast<std::int64_t>(iy) * d.W + ix) * (16 * d.Cout);
            for (int ky = 0; ky < 4; ++ky) {
                const int oy = 2 * iy + ky - 1;
                if (oy < 0 || oy >= d.OH) continue;
                for (int kx = 0; kx < 4; ++kx) {
                    const int ox = 2 * ix + kx - 1;
                    if (ox < 0 || ox >= d.OW) continue;
                    const T* src = row + (ky * 4 + kx) * d.Cout;
                    T* dst = y + (static_cast<std::int64_t>(oy) * d.OW + ox) * d.Cout;
                    for (int c = 0; c < d.Cout; ++c) dst[c] += src[c];
                }
            }
        }
    }
}

// Gathers dY into the G layout (adjoint of tconv_scatter_add).
template <typename T>
inline void tconv_gather(const T* dy, const TConvDims& d, T* g) {
    for (int iy = 0; iy < d.H; ++iy) {
        for (int ix = 0; ix < d.W; ++ix) {
            T* row = g + (static_cast<std::int64_t>(iy) * d.W + ix) * (16 * d.Cout);
            for (int ky = 0; ky < 4; ++ky) {
                const int oy = 2 * iy + ky - 1;
                for (int kx = 0; kx < 4; ++kx) {
                    const int ox = 2 * ix + kx - 1;
                    T* dst = row + (ky * 4 + kx) * d.Cout;
                    if (oy < 0 || oy >= d.OH || ox < 0 || ox >= d.OW) {
                        std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(d.Cout));
                    } else {
                        std::memcpy(dst, dy + (static_cast<std::int64_t>(oy) * d.OW + ox) * d.Cout,
                                    sizeof(T) * static_cast<std::size_t>(d.Cout));
                    }
                }
            }
        }
    }
}

}  // namespace flowbench::nn
