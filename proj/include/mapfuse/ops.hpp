#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mapfuse/tensor.hpp"

namespace mapfuse {

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
    Tensor out = Tensor::make_op(x.shape(), {x});
    const float* xv = x.data();
    float* ov = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
    detail::Node* on = out.node();
    Tensor xin = x;
    out.set_backward([xin, on]() mutable {
        if (!xin.requires_grad()) return;
        const float* gy = on->grad.data();
        const float* xv2 = xin.data();
        float* gx = xin.grad();
        int64_t m = xin.numel();
        for (int64_t i = 0; i < m; ++i)
            if (xv2[i] > 0.0f) gx[i] += gy[i];
    });
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::make_op(a.shape(), {a, b});
    const float* av = a.data();
    const float* bv = b.data();
    float* ov = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
    detail::Node* on = out.node();
    Tensor ain = a, bin = b;
    out.set_backward([ain, bin, on]() mutable {
        const float* gy = on->grad.data();
        int64_t m = static_cast<int64_t>(on->value.size());
        if (ain.requires_grad()) {
            float* ga = ain.grad();
            for (int64_t i = 0; i < m; ++i) ga[i] += gy[i];
        }
        if (bin.requires_grad()) {
            float* gb = bin.grad();
            for (int64_t i = 0; i < m; ++i) gb[i] += gy[i];
        }
    });
    return out;
}

inline Tensor scale(const Tensor& x, float s) {
    Tensor out = Tensor::make_op(x.shape(), {x});
    const float* xv = x.data();
    float* ov = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] * s;
    detail::Node* on = out.node();
    Tensor xin = x;
    out.set_backward([xin, s, on]() mutable {
        if (!xin.requires_grad()) return;
        const float* gy = on->grad.data();
        float* gx = xin.grad();
        int64_t m = xin.numel();
        for (int64_t i = 0; i < m; ++i) gx[i] += gy[i] * s;
    });
    return out;
}

// Concatenation along the channel axis of NCHW tensors.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 4 || b.ndim() != 4)
        throw DimensionError("concat_channels expects NCHW tensors");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw DimensionError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    const int64_t plane = static_cast<int64_t>(h) * w;
    Tensor out = Tensor::make_op({n, ca + cb, h, w}, {a, b});
    float* ov = out.data();
    const float* av = a.data();
    const float* bv = b.data();
    for (int i = 0; i < n; ++i) {
        std::copy(av + i * ca * plane, av + (i + 1) * ca * plane, ov + i * (ca + cb) * plane);
        std::copy(bv + i * cb * plane, bv + (i + 1) * cb * plane, ov + (i * (ca + cb) + ca) * plane);
    }
    detail::Node* on = out.node();
    Tensor ain = a, bin = b;
    out.set_backward([ain, bin, on, n, ca, cb, plane]() mutable {
        const float* gy = on->grad.data();
        if (ain.requires_grad()) {
            float* ga = ain.grad();
            for (int i = 0; i < n; ++i) {
                const float* src = gy + i * (ca + cb) * plane;
                float* dst = ga + i * ca * plane;
                for (int64_t k = 0; k < ca * plane; ++k) dst[k] += src[k];
            }
        }
        if (bin.requires_grad()) {
            float* gb = bin.grad();
            for (int i = 0; i < n; ++i) {
                const float* src = gy + (i * (ca + cb) + ca) * plane;
                float* dst = gb + i * cb * plane;
                for (int64_t k = 0; k < cb * plane; ++k) dst[k] += src[k];
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling with argmax indices (SegNet-style) and its inverse
// ---------------------------------------------------------------------------

// Argmax positions as flat h*W+w offsets into the input plane, one per output
// element, laid out like the output tensor.
struct PoolIndices {
    Shape out_shape;  // N,C,H/2,W/2
    int in_h = 0, in_w = 0;
    std::vector<int32_t> idx;
};

struct PoolResult {
    Tensor output;
    PoolIndices indices;
};

inline PoolResult maxpool2x2_with_indices(const Tensor& x) {
    if (x.ndim() != 4) throw DimensionError("maxpool2x2 expects NCHW input");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0)
        throw DimensionError("maxpool2x2 requires even spatial dims, got " + shape_str(x.shape()));
    const int oh = h / 2, ow = w / 2;
    Tensor out = Tensor::make_op({n, c, oh, ow}, {x});
    PoolIndices ind;
    ind.out_shape = {n, c, oh, ow};
    ind.in_h = h;
    ind.in_w = w;
    ind.idx.resize(static_cast<size_t>(n) * c * oh * ow);

    const float* xv = x.data();
    float* ov = out.data();
    int32_t* iv = ind.idx.data();
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const float* plane = xv + (static_cast<int64_t>(i) * c + ch) * h * w;
            float* oplane = ov + (static_cast<int64_t>(i) * c + ch) * oh * ow;
            int32_t* iplane = iv + (static_cast<int64_t>(i) * c + ch) * oh * ow;
            for (int y = 0; y < oh; ++y) {
                for (int xo = 0; xo < ow; ++xo) {
                    // Fixed scan order; ties keep the lowest flat index.
                    int32_t best_idx = (2 * y) * w + 2 * xo;
                    float best = plane[best_idx];
                    const int32_t cand[3] = {(2 * y) * w + 2 * xo + 1, (2 * y + 1) * w + 2 * xo,
                                             (2 * y + 1) * w + 2 * xo + 1};
                    for (int32_t ci : cand) {
                        if (plane[ci] > best) {
                            best = plane[ci];
                            best_idx = ci;
                        }
                    }
                    oplane[y * ow + xo] = best;
                    iplane[y * ow + xo] = best_idx;
                }
            }
        }
    }
    detail::Node* on = out.node();
    std::vector<int32_t> idx_copy = ind.idx;
    Tensor xin = x;
    out.set_backward([xin, on, idx_copy, n, c, oh, ow, h, w]() mutable {
        if (!xin.requires_grad()) return;
        const float* gy = on->grad.data();
        float* gx = xin.grad();
        const int64_t planes = static_cast<int64_t>(n) * c;
        for (int64_t p = 0; p < planes; ++p) {
            const float* gyp = gy + p * oh * ow;
            const int32_t* ip = idx_copy.data() + p * oh * ow;
            float* gxp = gx + p * h * w;
            for (int64_t k = 0; k < static_cast<int64_t>(oh) * ow; ++k) gxp[ip[k]] += gyp[k];
        }
    });
    return {out, std::move(ind)};
}

inline Tensor unpool_with_indices(const Tensor& x, const PoolIndices& ind, int out_h, int out_w) {
    if (x.ndim() != 4) throw DimensionError("unpool expects NCHW input");
    if (x.shape() != ind.out_shape)
        throw DimensionError("unpool: input shape " + shape_str(x.shape()) +
                             " does not match index map shape " + shape_str(ind.out_shape));
    const int n = x.dim(0), c = x.dim(1), ih = x.dim(2), iw = x.dim(3);
    const int64_t out_plane = static_cast<int64_t>(out_h) * out_w;
    for (int32_t v : ind.idx) {
        if (v < 0 || v >= out_plane)
            throw CorruptionError("unpool: index " + std::to_string(v) + " out of bounds for plane " +
                                  std::to_string(out_plane));
    }
    Tensor out = Tensor::make_op({n, c, out_h, out_w}, {x});
    const float* xv = x.data();
    float* ov = out.data();
    const int64_t planes = static_cast<int64_t>(n) * c;
    const int64_t in_plane = static_cast<int64_t>(ih) * iw;
    for (int64_t p = 0; p < planes; ++p) {
        const float* xp = xv + p * in_plane;
        const int32_t* ip = ind.idx.data() + p * in_plane;
        float* op = ov + p * out_plane;
        for (int64_t k = 0; k < in_plane; ++k) op[ip[k]] = xp[k];
    }
    detail::Node* on = out.node();
    std::vector<int32_t> idx_copy = ind.idx;
    Tensor xin = x;
    out.set_backward([xin, on, idx_copy, planes, in_plane, out_plane]() mutable {
        if (!xin.requires_grad()) return;
        const float* gy = on->grad.data();
        float* gx = xin.grad();
        for (int64_t p = 0; p < planes; ++p) {
            const float* gyp = gy + p * out_plane;
            const int32_t* ip = idx_copy.data() + p * in_plane;
            float* gxp = gx + p * in_plane;
            for (int64_t k = 0; k < in_plane; ++k) gxp[k] += gyp[ip[k]];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization (2d, per channel)
// ---------------------------------------------------------------------------

// Training mode normalizes by batch statistics (computed in double, fixed
// order) and updates the running buffers in place; eval mode uses the running
// buffers. gamma/beta/running_* have shape {C}.
inline Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          Tensor& running_mean, Tensor& running_var, bool train,
                          float momentum = 0.1f, float eps = 1e-5f) {
    if (x.ndim() != 4) throw DimensionError("batchnorm2d expects NCHW input");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c)
        throw DimensionError("batchnorm2d: parameter size does not match channel count " + std::to_string(c));

    const int64_t plane = static_cast<int64_t>(h) * w;
    const int64_t cnt = static_cast<int64_t>(n) * plane;
    std::vector<float> mean(c), inv_std(c);
    const float* xv = x.data();

    if (train) {
        for (int ch = 0; ch < c; ++ch) {
            double sum = 0.0;
            for (int i = 0; i < n; ++i) {
                const float* p = xv + (static_cast<int64_t>(i) * c + ch) * plane;
                for (int64_t k = 0; k < plane; ++k) sum += p[k];
            }
            double m = sum / static_cast<double>(cnt);
            double sq = 0.0;
            for (int i = 0; i < n; ++i) {
                const float* p = xv + (static_cast<int64_t>(i) * c + ch) * plane;
                for (int64_t k = 0; k < plane; ++k) {
                    double d = p[k] - m;
                    sq += d * d;
                }
            }
            double var = sq / static_cast<double>(cnt);
            mean[ch] = static_cast<float>(m);
            inv_std[ch] = static_cast<float>(1.0 / std::sqrt(var + eps));
            running_mean.data()[ch] =
                (1.0f - momentum) * running_mean.data()[ch] + momentum * static_cast<float>(m);
            running_var.data()[ch] =
                (1.0f - momentum) * running_var.data()[ch] + momentum * static_cast<float>(var);
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            mean[ch] = running_mean.data()[ch];
            inv_std[ch] = 1.0f / std::sqrt(running_var.data()[ch] + eps);
        }
    }

    Tensor out = Tensor::make_op(x.shape(), {x, gamma, beta});
    float* ov = out.data();
    const float* gv = gamma.data();
    const float* bv = beta.data();
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const float* p = xv + (static_cast<int64_t>(i) * c + ch) * plane;
            float* o = ov + (static_cast<int64_t>(i) * c + ch) * plane;
            const float mu = mean[ch], is = inv_std[ch], g = gv[ch], b = bv[ch];
            for (int64_t k = 0; k < plane; ++k) o[k] = (p[k] - mu) * is * g + b;
        }
    }

    detail::Node* on = out.node();
    Tensor gam = gamma, bet = beta, xin = x;
    std::vector<float> mean_c = mean, inv_c = inv_std;
    out.set_backward([xin, gam, bet, on, mean_c, inv_c, n, c, plane, cnt, train]() mutable {
        const float* gy = on->grad.data();
        const float* xv2 = xin.data();
        const float* gv2 = gam.data();
        float* ggamma = gam.requires_grad() ? gam.grad() : nullptr;
        float* gbeta = bet.requires_grad() ? bet.grad() : nullptr;
        float* gx = xin.requires_grad() ? xin.grad() : nullptr;

        for (int ch = 0; ch < c; ++ch) {
            const float mu = mean_c[ch], is = inv_c[ch], g = gv2[ch];
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (int i = 0; i < n; ++i) {
                const int64_t base = (static_cast<int64_t>(i) * c + ch) * plane;
                for (int64_t k = 0; k < plane; ++k) {
                    const float xhat = (xv2[base + k] - mu) * is;
                    sum_gy += gy[base + k];
                    sum_gy_xhat += static_cast<double>(gy[base + k]) * xhat;
                }
            }
            if (ggamma) ggamma[ch] += static_cast<float>(sum_gy_xhat);
            if (gbeta) gbeta[ch] += static_cast<float>(sum_gy);
            if (gx) {
                if (train) {
                    const double inv_cnt = 1.0 / static_cast<double>(cnt);
                    for (int i = 0; i < n; ++i) {
                        const int64_t base = (static_cast<int64_t>(i) * c + ch) * plane;
                        for (int64_t k = 0; k < plane; ++k) {
                            const double xhat = (xv2[base + k] - mu) * is;
                            const double t = gy[base + k] - sum_gy * inv_cnt - xhat * sum_gy_xhat * inv_cnt;
                            gx[base + k] += static_cast<float>(g * is * t);
                        }
                    }
                } else {
                    for (int i = 0; i < n; ++i) {
                        const int64_t base = (static_cast<int64_t>(i) * c + ch) * plane;
                        for (int64_t k = 0; k < plane; ++k) gx[base + k] += gy[base + k] * g * is;
                    }
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Bilinear resize (align_corners = false, border-clamped)
// ---------------------------------------------------------------------------

inline Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    if (x.ndim() != 4) throw DimensionError("bilinear_resize expects NCHW input");
    if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize: output dims must be >= 1");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (out_h == h && out_w == w) {
        // Exact value reproduction on identity resize.
        Tensor out = Tensor::make_op(x.shape(), {x});
        std::copy(x.data(), x.data() + x.numel(), out.data());
        detail::Node* on = out.node();
        Tensor xin = x;
        out.set_backward([xin, on]() mutable {
            if (!xin.requires_grad()) return;
            const float* gy = on->grad.data();
            float* gx = xin.grad();
            int64_t m = xin.numel();
            for (int64_t i = 0; i < m; ++i) gx[i] += gy[i];
        });
        return out;
    }

    struct Tap {
        int lo, hi;
        float t;
    };
    auto make_taps = [](int in_dim, int out_dim) {
        std::vector<Tap> taps(static_cast<size_t>(out_dim));
        const double scale = static_cast<double>(in_dim) / out_dim;
        for (int o = 0; o < out_dim; ++o) {
            double src = (o + 0.5) * scale - 0.5;
            double fl = std::floor(src);
            int lo = static_cast<int>(fl);
            float t = static_cast<float>(src - fl);
            int hi = lo + 1;
            lo = std::clamp(lo, 0, in_dim - 1);
            hi = std::clamp(hi, 0, in_dim - 1);
            taps[static_cast<size_t>(o)] = {lo, hi, t};
        }
        return taps;
    };
    const auto ty = make_taps(h, out_h);
    const auto tx = make_taps(w, out_w);

    Tensor out = Tensor::make_op({n, c, out_h, out_w}, {x});
    const float* xv = x.data();
    float* ov = out.data();
    const int64_t planes = static_cast<int64_t>(n) * c;
    for (int64_t p = 0; p < planes; ++p) {
        const float* xp = xv + p * h * w;
        float* op = ov + p * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
            const Tap& a = ty[static_cast<size_t>(y)];
            for (int xo = 0; xo < out_w; ++xo) {
                const Tap& b = tx[static_cast<size_t>(xo)];
                const float v00 = xp[a.lo * w + b.lo], v01 = xp[a.lo * w + b.hi];
                const float v10 = xp[a.hi * w + b.lo], v11 = xp[a.hi * w + b.hi];
                const float top = v00 + (v01 - v00) * b.t;
                const float bot = v10 + (v11 - v10) * b.t;
                op[y * out_w + xo] = top + (bot - top) * a.t;
            }
        }
    }
    detail::Node* on = out.node();
    Tensor xin = x;
    out.set_backward([xin, on, ty, tx, planes, h, w, out_h, out_w]() mutable {
        if (!xin.requires_grad()) return;
        const float* gy = on->grad.data();
        float* gx = xin.grad();
        for (int64_t p = 0; p < planes; ++p) {
            const float* gyp = gy + p * out_h * out_w;
            float* gxp = gx + p * h * w;
            for (int y = 0; y < out_h; ++y) {
                const Tap& a = ty[static_cast<size_t>(y)];
                for (int xo = 0; xo < out_w; ++xo) {
                    const Tap& b = tx[static_cast<size_t>(xo)];
                    const float g = gyp[y * out_w + xo];
                    gxp[a.lo * w + b.lo] += g * (1 - a.t) * (1 - b.t);
                    gxp[a.lo * w + b.hi] += g * (1 - a.t) * b.t;
                    gxp[a.hi * w + b.lo] += g * a.t * (1 - b.t);
                    gxp[a.hi * w + b.hi] += g * a.t * b.t;
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Masked softmax cross-entropy
// ---------------------------------------------------------------------------

// Dense class-id grid accompanying a logit batch.
struct LabelBatch {
    int n = 0, h = 0, w = 0;
    std::vector<uint8_t> ids;
};

constexpr uint8_t kUndefinedLabel = 255;

// Mean negative log-softmax over pixels whose label is not `ignore_value`.
// An all-ignored batch yields loss 0 with zero gradients.
inline Tensor masked_softmax_cross_entropy(const Tensor& logits, const LabelBatch& labels,
                                           uint8_t ignore_value = kUndefinedLabel) {
    if (logits.ndim() != 4) throw DimensionError("cross-entropy expects NKHW logits");
    const int n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    if (labels.n != n || labels.h != h || labels.w != w)
        throw DimensionError("cross-entropy: label grid " + std::to_string(labels.n) + "x" +
                             std::to_string(labels.h) + "x" + std::to_string(labels.w) +
                             " does not match logits " + shape_str(logits.shape()));
    if (k >= ignore_value)
        throw LabelError("class count must be below the ignore value");
    const int64_t plane = static_cast<int64_t>(h) * w;
    const float* zv = logits.data();

    int64_t counted = 0;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const uint8_t* lab = labels.ids.data() + i * plane;
        const float* zbase = zv + static_cast<int64_t>(i) * k * plane;
        for (int64_t px = 0; px < plane; ++px) {
            const uint8_t y = lab[px];
            if (y == ignore_value) continue;
            if (y >= k)
                throw LabelError("label " + std::to_string(y) + " out of range for " + std::to_string(k) +
                                 " classes");
            float mx = zbase[px];
            for (int cc = 1; cc < k; ++cc) mx = std::max(mx, zbase[cc * plane + px]);
            double se = 0.0;
            for (int cc = 0; cc < k; ++cc) se += std::exp(static_cast<double>(zbase[cc * plane + px]) - mx);
            const double lse = mx + std::log(se);
            total += lse - zbase[y * plane + px];
            ++counted;
        }
    }

    Tensor out = Tensor::make_op({1}, {logits});
    out.data()[0] = counted > 0 ? static_cast<float>(total / static_cast<double>(counted)) : 0.0f;
    detail::Node* on = out.node();
    LabelBatch labs = labels;
    Tensor zin = logits;
    out.set_backward([zin, on, labs, n, k, plane, counted, ignore_value]() mutable {
        if (!zin.requires_grad() || counted == 0) return;
        const float g = on->grad[0] / static_cast<float>(counted);
        const float* zv2 = zin.data();
        float* gz = zin.grad();
        for (int i = 0; i < n; ++i) {
            const uint8_t* lab = labs.ids.data() + i * plane;
            const float* zbase = zv2 + static_cast<int64_t>(i) * k * plane;
            float* gbase = gz + static_cast<int64_t>(i) * k * plane;
            for (int64_t px = 0; px < plane; ++px) {
                const uint8_t y = lab[px];
                if (y == ignore_value) continue;
                float mx = zbase[px];
                for (int cc = 1; cc < k; ++cc) mx = std::max(mx, zbase[cc * plane + px]);
                double se = 0.0;
                for (int cc = 0; cc < k; ++cc)
                    se += std::exp(static_cast<double>(zbase[cc * plane + px]) - mx);
                for (int cc = 0; cc < k; ++cc) {
                    const double p = std::exp(static_cast<double>(zbase[cc * plane + px]) - mx) / se;
                    gbase[cc * plane + px] += g * static_cast<float>(p - (cc == y ? 1.0 : 0.0));
                }
            }
        }
    });
    return out;
}

}  // namespace mapfuse
