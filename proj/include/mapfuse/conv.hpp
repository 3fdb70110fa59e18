#pragma once

#include <cblas.h>

#include <cstring>
#include <vector>

#include "mapfuse/common.hpp"
#include "mapfuse/tensor.hpp"

namespace mapfuse {

namespace detail {

// Parallelism lives in the sample-level pool; BLAS itself stays serial so
// reduction order inside each GEMM is fixed.
inline void pin_blas_single_thread() {
    static const bool done = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)done;
}

// cols is (C*k*k) x (OH*OW), row-major. Out-of-image taps are zero.
inline void im2col(const float* x, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
                   float* cols) {
    const int64_t out_plane = static_cast<int64_t>(oh) * ow;
    for (int ci = 0; ci < c; ++ci) {
        const float* plane = x + static_cast<int64_t>(ci) * h * w;
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                float* row = cols + ((static_cast<int64_t>(ci) * k + kh) * k + kw) * out_plane;
                for (int y = 0; y < oh; ++y) {
                    const int iy = y * stride - pad + kh;
                    float* dst = row + static_cast<int64_t>(y) * ow;
                    if (iy < 0 || iy >= h) {
                        std::memset(dst, 0, sizeof(float) * static_cast<size_t>(ow));
                        continue;
                    }
                    const float* src = plane + static_cast<int64_t>(iy) * w;
                    if (stride == 1) {
                        // Contiguous run with zero fill at the borders.
                        int x0 = -pad + kw;
                        int lead = x0 < 0 ? -x0 : 0;
                        int valid = ow - lead;
                        int tail = 0;
                        if (x0 + ow > w) {
                            tail = x0 + ow - w;
                            valid -= tail;
                        }
                        if (valid < 0) valid = 0, tail = ow - lead;
                        if (lead) std::memset(dst, 0, sizeof(float) * static_cast<size_t>(lead));
                        if (valid)
                            std::memcpy(dst + lead, src + x0 + lead, sizeof(float) * static_cast<size_t>(valid));
                        if (tail)
                            std::memset(dst + lead + valid, 0, sizeof(float) * static_cast<size_t>(tail));
                    } else {
                        for (int xo = 0; xo < ow; ++xo) {
                            const int ix = xo * stride - pad + kw;
                            dst[xo] = (ix < 0 || ix >= w) ? 0.0f : src[ix];
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_add(const float* cols, int c, int h, int w, int k, int stride, int pad, int oh,
                       int ow, float* gx) {
    const int64_t out_plane = static_cast<int64_t>(oh) * ow;
    for (int ci = 0; ci < c; ++ci) {
        float* plane = gx + static_cast<int64_t>(ci) * h * w;
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const float* row = cols + ((static_cast<int64_t>(ci) * k + kh) * k + kw) * out_plane;
                for (int y = 0; y < oh; ++y) {
                    const int iy = y * stride - pad + kh;
                    if (iy < 0 || iy >= h) continue;
                    float* dst = plane + static_cast<int64_t>(iy) * w;
                    const float* src = row + static_cast<int64_t>(y) * ow;
                    for (int xo = 0; xo < ow; ++xo) {
                        const int ix = xo * stride - pad + kw;
                        if (ix >= 0 && ix < w) dst[ix] += src[xo];
                    }
                }
            }
        }
    }
}

inline void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                  int lda, const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace detail

// 2-D convolution, NCHW input, OIkk weight, O bias. Same-size output when
// stride=1 and padding=k/2. Backward accumulates into input, weight and bias
// gradients; the per-sample weight contributions are reduced in sample order
// so results do not depend on the thread count.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride = 1,
                     int padding = 0) {
    if (input.ndim() != 4 || weight.ndim() != 4)
        throw DimensionError("conv2d expects NCHW input and OIkk weight");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int o = weight.dim(0), wi = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    if (kh != kw) throw DimensionError("conv2d: kernel must be square");
    if (kh % 2 == 0) throw DimensionError("conv2d: kernel must be odd-sized");
    if (wi != c)
        throw DimensionError("conv2d: input channels " + std::to_string(c) +
                             " do not match weight channels " + std::to_string(wi));
    if (bias.numel() != o) throw DimensionError("conv2d: bias size does not match output channels");
    if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
    const int k = kh;
    const int oh = (h + 2 * padding - k) / stride + 1;
    const int ow = (w + 2 * padding - k) / stride + 1;
    if (oh < 1 || ow < 1) throw DimensionError("conv2d: output would be empty");
    detail::pin_blas_single_thread();

    const int ckk = c * k * k;
    const int64_t out_plane = static_cast<int64_t>(oh) * ow;
    Tensor out = Tensor::make_op({n, o, oh, ow}, {input, weight, bias});
    float* ov = out.data();
    const float* xv = input.data();
    const float* wv = weight.data();
    const float* bv = bias.data();

    parallel_for(n, [&](int64_t i) {
        std::vector<float> cols(static_cast<size_t>(ckk) * out_plane);
        detail::im2col(xv + static_cast<int64_t>(i) * c * h * w, c, h, w, k, stride, padding, oh, ow,
                       cols.data());
        float* y = ov + static_cast<int64_t>(i) * o * out_plane;
        detail::sgemm(false, false, o, static_cast<int>(out_plane), ckk, 1.0f, wv, ckk, cols.data(),
                      static_cast<int>(out_plane), 0.0f, y, static_cast<int>(out_plane));
        for (int oc = 0; oc < o; ++oc) {
            const float b = bv[oc];
            float* row = y + static_cast<int64_t>(oc) * out_plane;
            for (int64_t px = 0; px < out_plane; ++px) row[px] += b;
        }
    });

    detail::Node* on = out.node();
    Tensor x = input, wt = weight, bs = bias;
    out.set_backward([x, wt, bs, on, n, c, h, w, o, k, stride, padding, oh, ow, ckk, out_plane]() mutable {
        const float* gy = on->grad.data();
        const float* xv2 = x.data();
        const float* wv2 = wt.data();

        if (bs.requires_grad()) {
            float* gb = bs.grad();
            for (int oc = 0; oc < o; ++oc) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) {
                    const float* row = gy + (static_cast<int64_t>(i) * o + oc) * out_plane;
                    for (int64_t px = 0; px < out_plane; ++px) s += row[px];
                }
                gb[oc] += static_cast<float>(s);
            }
        }

        const bool need_gw = wt.requires_grad();
        const bool need_gx = x.requires_grad();
        if (!need_gw && !need_gx) return;

        std::vector<std::vector<float>> gw_per_sample;
        if (need_gw) gw_per_sample.assign(static_cast<size_t>(n), {});
        float* gx = need_gx ? x.grad() : nullptr;

        parallel_for(n, [&](int64_t i) {
            std::vector<float> cols(static_cast<size_t>(ckk) * out_plane);
            detail::im2col(xv2 + static_cast<int64_t>(i) * c * h * w, c, h, w, k, stride, padding, oh,
                           ow, cols.data());
            const float* gyi = gy + static_cast<int64_t>(i) * o * out_plane;
            if (need_gw) {
                auto& buf = gw_per_sample[static_cast<size_t>(i)];
                buf.assign(static_cast<size_t>(o) * ckk, 0.0f);
                detail::sgemm(false, true, o, ckk, static_cast<int>(out_plane), 1.0f, gyi,
                              static_cast<int>(out_plane), cols.data(), static_cast<int>(out_plane),
                              0.0f, buf.data(), ckk);
            }
            if (need_gx) {
                std::vector<float> gcols(static_cast<size_t>(ckk) * out_plane);
                detail::sgemm(true, false, ckk, static_cast<int>(out_plane), o, 1.0f, wv2, ckk, gyi,
                              static_cast<int>(out_plane), 0.0f, gcols.data(),
                              static_cast<int>(out_plane));
                detail::col2im_add(gcols.data(), c, h, w, k, stride, padding, oh, ow,
                                   gx + static_cast<int64_t>(i) * c * h * w);
            }
        });

        if (need_gw) {
            float* gw = wt.grad();
            const int64_t wn = static_cast<int64_t>(o) * ckk;
            for (int i = 0; i < n; ++i) {
                const float* buf = gw_per_sample[static_cast<size_t>(i)].data();
                for (int64_t j = 0; j < wn; ++j) gw[j] += buf[j];
            }
        }
    });
    return out;
}

}  // namespace mapfuse
