#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mapfuse/raster.hpp"

namespace mapfuse {

namespace detail {

// Large finite stand-in for "no seed anywhere"; keeps the lower-envelope
// arithmetic NaN-free.
constexpr double kEdtInf = 1e20;

// 1-D squared-distance transform (lower envelope of parabolas).
inline void edt_1d(const double* f, int n, double* d, int* v, double* z) {
    int k = 0;
    v[0] = 0;
    z[0] = -kEdtInf;
    z[1] = kEdtInf;
    for (int q = 1; q < n; ++q) {
        double s;
        for (;;) {
            const int vk = v[k];
            s = ((f[q] + static_cast<double>(q) * q) - (f[vk] + static_cast<double>(vk) * vk)) /
                (2.0 * q - 2.0 * vk);
            if (s <= z[k] && k > 0) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kEdtInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const int vk = v[k];
        d[q] = static_cast<double>(q - vk) * (q - vk) + f[vk];
    }
}

// Exact squared Euclidean distance to the nearest seed pixel. Two 1-D passes:
// columns then rows.
inline std::vector<double> edt_squared(const std::vector<uint8_t>& seed, int h, int w) {
    std::vector<double> g(static_cast<size_t>(h) * w);
    for (int64_t i = 0; i < static_cast<int64_t>(g.size()); ++i)
        g[static_cast<size_t>(i)] = seed[static_cast<size_t>(i)] ? 0.0 : kEdtInf;

    const int m = std::max(h, w);
    std::vector<double> f(static_cast<size_t>(m)), d(static_cast<size_t>(m));
    std::vector<int> v(static_cast<size_t>(m));
    std::vector<double> z(static_cast<size_t>(m) + 1);

    for (int x = 0; x < w; ++x) {
        for (int y = 0; y < h; ++y) f[static_cast<size_t>(y)] = g[static_cast<size_t>(y) * w + x];
        edt_1d(f.data(), h, d.data(), v.data(), z.data());
        for (int y = 0; y < h; ++y) g[static_cast<size_t>(y) * w + x] = d[static_cast<size_t>(y)];
    }
    for (int y = 0; y < h; ++y) {
        double* row = g.data() + static_cast<size_t>(y) * w;
        std::copy(row, row + w, f.data());
        edt_1d(f.data(), w, d.data(), v.data(), z.data());
        std::copy(d.data(), d.data() + w, row);
    }
    return g;
}

}  // namespace detail

// Exact signed Euclidean distance to the mask boundary, positive inside,
// negative outside, clamped to [-tau, tau] and normalized into [-1, 1].
// The region beyond the grid border counts as outside.
inline std::vector<float> signed_distance_transform(const std::vector<uint8_t>& mask, int h, int w,
                                                    float tau) {
    if (tau <= 0.0f) throw UsageError("signed_distance_transform: tau must be positive");
    std::vector<uint8_t> inv(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) inv[i] = mask[i] ? 0 : 1;
    const auto dist_to_set = detail::edt_squared(mask, h, w);
    const auto dist_to_unset = detail::edt_squared(inv, h, w);

    std::vector<float> out(mask.size());
    const double taud = tau;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const size_t i = static_cast<size_t>(y) * w + x;
            double d;
            if (mask[i]) {
                d = std::sqrt(dist_to_unset[i]);
                const double border = 1.0 + std::min(std::min(y, h - 1 - y), std::min(x, w - 1 - x));
                d = std::min(d, border);
                d = std::min(d, taud);
            } else {
                d = -std::min(std::sqrt(dist_to_set[i]), taud);
            }
            out[i] = static_cast<float>(d / taud);
        }
    }
    return out;
}

// One 0/1 channel per layer, in layer_names order.
inline MultiChannelRaster encode_binary(const MapLayerSet& layers) {
    if (layers.encoding != Encoding::Binary)
        throw UsageError("encode_binary requires a Binary-encoded layer set");
    MultiChannelRaster out(layers.layer_count(), layers.height, layers.width);
    for (int c = 0; c < layers.layer_count(); ++c) {
        const auto& mask = layers.masks[static_cast<size_t>(c)];
        float* ch = out.channel(c);
        for (size_t i = 0; i < mask.size(); ++i) ch[i] = mask[i] ? 1.0f : 0.0f;
    }
    return out;
}

inline MultiChannelRaster encode_sdt(const MapLayerSet& layers, float tau = 32.0f) {
    if (layers.encoding != Encoding::Sdt)
        throw UsageError("encode_sdt requires an Sdt-encoded layer set");
    MultiChannelRaster out(layers.layer_count(), layers.height, layers.width);
    for (int c = 0; c < layers.layer_count(); ++c) {
        const auto sdt =
            signed_distance_transform(layers.masks[static_cast<size_t>(c)], layers.height,
                                      layers.width, tau);
        std::copy(sdt.begin(), sdt.end(), out.channel(c));
    }
    return out;
}

inline MultiChannelRaster encode_layers(const MapLayerSet& layers, float sdt_tau = 32.0f) {
    return layers.encoding == Encoding::Binary ? encode_binary(layers) : encode_sdt(layers, sdt_tau);
}

// Per channel, values above the (1-fraction) quantile are capped at it.
// Quantile by linear interpolation between order statistics.
inline MultiChannelRaster clip_high_percentile(const MultiChannelRaster& raster,
                                               double fraction = 0.02) {
    if (fraction <= 0.0 || fraction >= 1.0)
        throw UsageError("clip_high_percentile: fraction must be in (0, 1)");
    MultiChannelRaster out = raster;
    const int64_t n = raster.plane_size();
    std::vector<float> sorted(static_cast<size_t>(n));
    for (int c = 0; c < raster.channels; ++c) {
        const float* src = raster.channel(c);
        std::copy(src, src + n, sorted.begin());
        std::sort(sorted.begin(), sorted.end());
        const double pos = (1.0 - fraction) * static_cast<double>(n - 1);
        const int64_t lo = static_cast<int64_t>(pos);
        const int64_t hi = std::min(lo + 1, n - 1);
        const double frac = pos - static_cast<double>(lo);
        const float cap = static_cast<float>(sorted[static_cast<size_t>(lo)] +
                                             frac * (sorted[static_cast<size_t>(hi)] -
                                                     sorted[static_cast<size_t>(lo)]));
        float* dst = out.channel(c);
        for (int64_t i = 0; i < n; ++i)
            if (dst[i] > cap) dst[i] = cap;
    }
    return out;
}

// Pixels within Euclidean distance <= radius of a differently-classed,
// defined pixel become undefined. Radius 0 is the identity.
inline LabelMap erode_labels(const LabelMap& labels, int radius = 3) {
    if (radius < 0) throw UsageError("erode_labels: radius must be >= 0");
    LabelMap out = labels;
    if (radius == 0) return out;

    const int h = labels.height, w = labels.width;
    std::vector<bool> present(256, false);
    for (uint8_t v : labels.values)
        if (v != LabelMap::kUndefined) present[v] = true;

    const double r2 = static_cast<double>(radius) * radius;
    std::vector<uint8_t> seed(labels.values.size());
    for (int cls = 0; cls < 255; ++cls) {
        if (!present[static_cast<size_t>(cls)]) continue;
        for (size_t i = 0; i < seed.size(); ++i)
            seed[i] = labels.values[i] == cls ? 1 : 0;
        const auto dist = detail::edt_squared(seed, h, w);
        for (size_t i = 0; i < seed.size(); ++i) {
            const uint8_t own = labels.values[i];
            if (own == LabelMap::kUndefined || own == cls) continue;
            if (dist[i] <= r2) out.values[i] = LabelMap::kUndefined;
        }
    }
    return out;
}

}  // namespace mapfuse
