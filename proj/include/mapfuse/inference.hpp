#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <utility>
#include <vector>

#include "mapfuse/models.hpp"
#include "mapfuse/raster.hpp"

namespace mapfuse {

// Sliding-window coverage of a tile. Origins advance by `stride`; the last
// window per axis is clamped so it ends exactly at the tile edge.
struct TilingPlan {
    int window = 128, stride = 64;
    int tile_h = 0, tile_w = 0;
    std::vector<std::pair<int, int>> origins;  // (y, x), row-major order
};

inline std::vector<int> tiling_axis_origins(int extent, int window, int stride) {
    std::vector<int> origins;
    for (int o = 0;; o += stride) {
        if (o + window >= extent) {
            origins.push_back(extent - window);
            break;
        }
        origins.push_back(o);
    }
    return origins;
}

inline TilingPlan plan_tiling(int tile_h, int tile_w, int window, int stride) {
    if (window > tile_h || window > tile_w)
        throw DimensionError("plan_tiling: window " + std::to_string(window) +
                             " exceeds tile " + std::to_string(tile_h) + "x" + std::to_string(tile_w));
    if (stride < 1 || stride > window)
        throw DimensionError("plan_tiling: stride must be in [1, window]");
    TilingPlan plan;
    plan.window = window;
    plan.stride = stride;
    plan.tile_h = tile_h;
    plan.tile_w = tile_w;
    const auto ys = tiling_axis_origins(tile_h, window, stride);
    const auto xs = tiling_axis_origins(tile_w, window, stride);
    for (int y : ys)
        for (int x : xs) plan.origins.emplace_back(y, x);
    return plan;
}

// Per-pixel softmax across channels, accumulated in double.
inline MultiChannelRaster softmax_channels(const MultiChannelRaster& scores) {
    MultiChannelRaster out(scores.channels, scores.height, scores.width);
    const int64_t plane = scores.plane_size();
    for (int64_t px = 0; px < plane; ++px) {
        float mx = scores.data[static_cast<size_t>(px)];
        for (int c = 1; c < scores.channels; ++c)
            mx = std::max(mx, scores.data[static_cast<size_t>(c * plane + px)]);
        double sum = 0.0;
        for (int c = 0; c < scores.channels; ++c)
            sum += std::exp(static_cast<double>(scores.data[static_cast<size_t>(c * plane + px)]) - mx);
        for (int c = 0; c < scores.channels; ++c)
            out.data[static_cast<size_t>(c * plane + px)] = static_cast<float>(
                std::exp(static_cast<double>(scores.data[static_cast<size_t>(c * plane + px)]) - mx) /
                sum);
    }
    return out;
}

// Bilinear upsampling of a score raster (channel-wise).
inline MultiChannelRaster upsample_coarse(const MultiChannelRaster& scores, int out_h, int out_w) {
    if (out_h < scores.height || out_w < scores.width)
        throw DimensionError("upsample_coarse: target must not shrink the raster");
    NoGradGuard ng;
    Tensor t = Tensor::from_data({1, scores.channels, scores.height, scores.width}, scores.data);
    Tensor up = bilinear_resize(t, out_h, out_w);
    MultiChannelRaster out(scores.channels, out_h, out_w);
    std::copy(up.data(), up.data() + up.numel(), out.data.begin());
    return out;
}

struct TilePrediction {
    MultiChannelRaster probabilities;  // K x H x W, overlap-averaged
    LabelMap labels;                   // argmax, ties to the lowest class id
};

// Runs the model over every window of the plan in eval mode, averages softmax
// probabilities over overlapping coverage, and takes the per-pixel argmax.
// Window results are accumulated strictly in plan order.
inline TilePrediction predict_tile(Model& model, const MultiChannelRaster& optical,
                                   const MultiChannelRaster& osm, const TilingPlan& plan,
                                   int num_classes) {
    const int h = plan.tile_h, w = plan.tile_w, win = plan.window;
    if (optical.height != h || optical.width != w)
        throw DimensionError("predict_tile: optical raster does not match the plan");
    if (osm.channels > 0 && (osm.height != h || osm.width != w))
        throw DimensionError("predict_tile: map raster does not match the plan");

    MultiChannelRaster accum(num_classes, h, w, 0.0f);
    std::vector<int32_t> cover(static_cast<size_t>(h) * w, 0);

    NoGradGuard ng;
    const size_t batch_cap = 8;
    for (size_t start = 0; start < plan.origins.size(); start += batch_cap) {
        const size_t count = std::min(batch_cap, plan.origins.size() - start);
        Tensor opt_batch = Tensor::zeros({static_cast<int>(count), optical.channels, win, win});
        Tensor osm_batch;
        if (osm.channels > 0)
            osm_batch = Tensor::zeros({static_cast<int>(count), osm.channels, win, win});
        for (size_t bi = 0; bi < count; ++bi) {
            const auto [oy, ox] = plan.origins[start + bi];
            for (int c = 0; c < optical.channels; ++c) {
                const float* src = optical.channel(c);
                float* dst = opt_batch.data() +
                             ((static_cast<int64_t>(bi) * optical.channels + c) * win) * win;
                for (int y = 0; y < win; ++y)
                    std::copy(src + (static_cast<int64_t>(oy + y)) * w + ox,
                              src + (static_cast<int64_t>(oy + y)) * w + ox + win,
                              dst + static_cast<int64_t>(y) * win);
            }
            for (int c = 0; c < osm.channels; ++c) {
                const float* src = osm.channel(c);
                float* dst = osm_batch.data() +
                             ((static_cast<int64_t>(bi) * osm.channels + c) * win) * win;
                for (int y = 0; y < win; ++y)
                    std::copy(src + (static_cast<int64_t>(oy + y)) * w + ox,
                              src + (static_cast<int64_t>(oy + y)) * w + ox + win,
                              dst + static_cast<int64_t>(y) * win);
            }
        }
        Tensor scores = model.forward(opt_batch, osm_batch, false);
        if (scores.dim(1) != num_classes)
            throw DimensionError("predict_tile: model emits " + std::to_string(scores.dim(1)) +
                                 " classes, expected " + std::to_string(num_classes));
        if (scores.dim(2) != win || scores.dim(3) != win)
            scores = bilinear_resize(scores, win, win);

        const int64_t wplane = static_cast<int64_t>(win) * win;
        for (size_t bi = 0; bi < count; ++bi) {
            const auto [oy, ox] = plan.origins[start + bi];
            // Softmax per pixel of this window, then accumulate.
            const float* sbase = scores.data() + static_cast<int64_t>(bi) * num_classes * wplane;
            for (int y = 0; y < win; ++y) {
                for (int x = 0; x < win; ++x) {
                    const int64_t px = static_cast<int64_t>(y) * win + x;
                    float mx = sbase[px];
                    for (int c = 1; c < num_classes; ++c)
                        mx = std::max(mx, sbase[c * wplane + px]);
                    double sum = 0.0;
                    for (int c = 0; c < num_classes; ++c)
                        sum += std::exp(static_cast<double>(sbase[c * wplane + px]) - mx);
                    const int64_t tpx = static_cast<int64_t>(oy + y) * w + (ox + x);
                    for (int c = 0; c < num_classes; ++c) {
                        const double p =
                            std::exp(static_cast<double>(sbase[c * wplane + px]) - mx) / sum;
                        accum.data[static_cast<size_t>(c * accum.plane_size() + tpx)] +=
                            static_cast<float>(p);
                    }
                    cover[static_cast<size_t>(tpx)] += 1;
                }
            }
        }
    }

    TilePrediction pred;
    pred.probabilities = MultiChannelRaster(num_classes, h, w);
    pred.labels = LabelMap(h, w);
    const int64_t plane = static_cast<int64_t>(h) * w;
    for (int64_t px = 0; px < plane; ++px) {
        const int32_t n = cover[static_cast<size_t>(px)];
        int best = 0;
        float best_p = -1.0f;
        for (int c = 0; c < num_classes; ++c) {
            const float p = accum.data[static_cast<size_t>(c * plane + px)] / static_cast<float>(n);
            pred.probabilities.data[static_cast<size_t>(c * plane + px)] = p;
            if (p > best_p) {
                best_p = p;
                best = c;
            }
        }
        pred.labels.values[static_cast<size_t>(px)] = static_cast<uint8_t>(best);
    }
    return pred;
}

// ---------------------------------------------------------------------------
// Color composites (PPM P6, fixed class palette)
// ---------------------------------------------------------------------------

// Palette for the default six classes: white impervious, blue buildings,
// cyan low vegetation, green trees, yellow vehicles, red clutter.
inline std::array<uint8_t, 3> class_color(uint8_t cls) {
    switch (cls) {
        case 0: return {255, 255, 255};
        case 1: return {0, 0, 255};
        case 2: return {0, 255, 255};
        case 3: return {0, 255, 0};
        case 4: return {255, 255, 0};
        case 5: return {255, 0, 0};
        case LabelMap::kUndefined: return {0, 0, 0};
        default: {
            // Deterministic fallback hues for extended class tables.
            const uint8_t r = static_cast<uint8_t>(37 * cls + 71);
            const uint8_t g = static_cast<uint8_t>(101 * cls + 13);
            const uint8_t b = static_cast<uint8_t>(197 * cls + 29);
            return {r, g, b};
        }
    }
}

inline void write_ppm(const std::filesystem::path& path, int width, int height,
                      const std::vector<uint8_t>& rgb) {
    if (rgb.size() != static_cast<size_t>(width) * height * 3)
        throw UsageError("write_ppm: buffer size mismatch");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path.string());
    out << "P6\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!out) throw FormatError("write failed: " + path.string());
}

inline void write_label_composite(const LabelMap& labels, const std::filesystem::path& path) {
    std::vector<uint8_t> rgb(static_cast<size_t>(labels.height) * labels.width * 3);
    for (int64_t i = 0; i < labels.size(); ++i) {
        const auto c = class_color(labels.values[static_cast<size_t>(i)]);
        rgb[static_cast<size_t>(3 * i)] = c[0];
        rgb[static_cast<size_t>(3 * i) + 1] = c[1];
        rgb[static_cast<size_t>(3 * i) + 2] = c[2];
    }
    write_ppm(path, labels.width, labels.height, rgb);
}

}  // namespace mapfuse
