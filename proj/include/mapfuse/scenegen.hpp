#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mapfuse/raster.hpp"
#include "mapfuse/raster_ops.hpp"
#include "mapfuse/rng.hpp"

namespace mapfuse {

// Class ids used by the default synthetic scenes.
enum DefaultClass : uint8_t {
    kImpervious = 0,
    kBuilding = 1,
    kLowVegetation = 2,
    kTree = 3,
    kCar = 4,
    kClutter = 5,
};

inline std::vector<std::string> default_class_names() {
    return {"impervious", "building", "low_vegetation", "tree", "car", "clutter"};
}

struct Degradation {
    float p_drop = 0.15f;
    int jitter_px = 2;
    int dilate_erode_px = 0;  // >0 dilates, <0 erodes
};

struct CountRange {
    int lo = 0, hi = 0;
};

struct SceneSpec {
    uint64_t seed = 0;
    int size = 256;
    int optical_channels = 3;
    std::vector<std::string> classes = default_class_names();
    CountRange buildings{6, 10};
    CountRange roads{2, 4};
    CountRange vegetation_blobs{3, 5};
    CountRange trees{8, 14};
    CountRange cars{6, 10};
    CountRange water{1, 2};
    float noise_sigma = 0.08f;
    Degradation degradation{};
    float keep_fraction = 1.0f;  // label sparsity; 1.0 = dense
};

struct SceneStats {
    std::map<std::string, int> requested;
    std::map<std::string, int> placed;
};

struct Scene {
    MultiChannelRaster optical;
    MapLayerSet layers;
    LabelMap labels;
    SceneSpec spec;
    SceneStats stats;
};

namespace detail {

// 8-connected components in scan order; component order (and therefore any
// per-component random decision) is independent of how the mask was built.
inline std::vector<std::vector<int64_t>> connected_components(const std::vector<uint8_t>& mask,
                                                              int h, int w) {
    std::vector<std::vector<int64_t>> comps;
    std::vector<uint8_t> seen(mask.size(), 0);
    std::vector<int64_t> stack;
    for (int64_t start = 0; start < static_cast<int64_t>(mask.size()); ++start) {
        if (!mask[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) continue;
        comps.emplace_back();
        auto& comp = comps.back();
        stack.clear();
        stack.push_back(start);
        seen[static_cast<size_t>(start)] = 1;
        while (!stack.empty()) {
            const int64_t p = stack.back();
            stack.pop_back();
            comp.push_back(p);
            const int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    const int64_t q = static_cast<int64_t>(ny) * w + nx;
                    if (mask[static_cast<size_t>(q)] && !seen[static_cast<size_t>(q)]) {
                        seen[static_cast<size_t>(q)] = 1;
                        stack.push_back(q);
                    }
                }
            }
        }
        std::sort(comp.begin(), comp.end());
    }
    return comps;
}

inline void paint_ellipse(std::vector<uint8_t>& mask, int h, int w, double cy, double cx, double ry,
                          double rx) {
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + ry)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + rx)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double dy = (y - cy) / ry, dx = (x - cx) / rx;
            if (dy * dy + dx * dx <= 1.0) mask[static_cast<size_t>(y) * w + x] = 1;
        }
    }
}

inline void paint_rect(std::vector<uint8_t>& mask, int h, int w, int y0, int x0, int rh, int rw) {
    const int y1 = std::min(h, y0 + rh), x1 = std::min(w, x0 + rw);
    for (int y = std::max(0, y0); y < y1; ++y)
        for (int x = std::max(0, x0); x < x1; ++x) mask[static_cast<size_t>(y) * w + x] = 1;
}

inline void paint_disk(std::vector<uint8_t>& mask, int h, int w, int cy, int cx, int r) {
    for (int y = std::max(0, cy - r); y <= std::min(h - 1, cy + r); ++y)
        for (int x = std::max(0, cx - r); x <= std::min(w - 1, cx + r); ++x) {
            const int dy = y - cy, dx = x - cx;
            if (dy * dy + dx * dx <= r * r) mask[static_cast<size_t>(y) * w + x] = 1;
        }
}

// Thick polyline crossing the scene; a road body mask.
inline void paint_road(std::vector<uint8_t>& mask, int h, int w, Rng& rng) {
    const bool horizontal = rng.next_double() < 0.5;
    const int half_width = static_cast<int>(rng.uniform_int(2, 4));
    const int n_knots = 3;
    std::vector<double> ys(n_knots), xs(n_knots);
    for (int i = 0; i < n_knots; ++i) {
        const double t = static_cast<double>(i) / (n_knots - 1);
        const double along = t * (horizontal ? w - 1 : h - 1);
        const double cross0 = rng.uniform(0.15, 0.85) * (horizontal ? h - 1 : w - 1);
        if (horizontal) {
            xs[static_cast<size_t>(i)] = along;
            ys[static_cast<size_t>(i)] = cross0;
        } else {
            ys[static_cast<size_t>(i)] = along;
            xs[static_cast<size_t>(i)] = cross0;
        }
    }
    for (int i = 0; i + 1 < n_knots; ++i) {
        const double dy = ys[static_cast<size_t>(i) + 1] - ys[static_cast<size_t>(i)];
        const double dx = xs[static_cast<size_t>(i) + 1] - xs[static_cast<size_t>(i)];
        const double len = std::sqrt(dy * dy + dx * dx);
        const int steps = std::max(1, static_cast<int>(len * 2));
        for (int s = 0; s <= steps; ++s) {
            const double t = static_cast<double>(s) / steps;
            const int cy = static_cast<int>(std::lround(ys[static_cast<size_t>(i)] + t * dy));
            const int cx = static_cast<int>(std::lround(xs[static_cast<size_t>(i)] + t * dx));
            paint_disk(mask, h, w, cy, cx, half_width);
        }
    }
}

}  // namespace detail

// Per-object drop, integer jitter, then a global dilation/erosion, applied
// layer by layer. Objects are the 8-connected components of each mask.
inline MapLayerSet degrade_layers(const MapLayerSet& layers, float p_drop, int jitter_px,
                                  int dilate_erode_px, uint64_t seed) {
    if (p_drop < 0.0f || p_drop > 1.0f) throw UsageError("degrade_layers: p_drop must be in [0,1]");
    if (jitter_px < 0) throw UsageError("degrade_layers: jitter_px must be >= 0");
    MapLayerSet out = layers;
    const int h = layers.height, w = layers.width;
    Rng base(seed);
    for (int li = 0; li < layers.layer_count(); ++li) {
        Rng rng = base.child(static_cast<uint64_t>(li));
        const auto comps = detail::connected_components(layers.masks[static_cast<size_t>(li)], h, w);
        std::vector<uint8_t> mask(static_cast<size_t>(h) * w, 0);
        for (const auto& comp : comps) {
            if (rng.next_double() < p_drop) continue;
            int dy = 0, dx = 0;
            if (jitter_px > 0) {
                dy = static_cast<int>(rng.uniform_int(-jitter_px, jitter_px));
                dx = static_cast<int>(rng.uniform_int(-jitter_px, jitter_px));
            }
            for (const int64_t p : comp) {
                const int y = static_cast<int>(p / w) + dy;
                const int x = static_cast<int>(p % w) + dx;
                if (y >= 0 && y < h && x >= 0 && x < w) mask[static_cast<size_t>(y) * w + x] = 1;
            }
        }
        if (dilate_erode_px > 0) {
            const auto dist = detail::edt_squared(mask, h, w);
            const double r2 = static_cast<double>(dilate_erode_px) * dilate_erode_px;
            for (size_t i = 0; i < mask.size(); ++i)
                if (dist[i] <= r2) mask[i] = 1;
        } else if (dilate_erode_px < 0) {
            std::vector<uint8_t> inv(mask.size());
            for (size_t i = 0; i < mask.size(); ++i) inv[i] = mask[i] ? 0 : 1;
            const auto dist = detail::edt_squared(inv, h, w);
            const double r2 = static_cast<double>(dilate_erode_px) * dilate_erode_px;
            for (size_t i = 0; i < mask.size(); ++i)
                if (dist[i] <= r2) mask[i] = 0;
        }
        out.masks[static_cast<size_t>(li)] = std::move(mask);
    }
    return out;
}

// Random rectangular windows are retained until roughly keep_fraction of the
// originally-labeled pixels survive; everything else becomes undefined.
inline LabelMap sparsify_labels(const LabelMap& labels, float keep_fraction, uint64_t seed) {
    if (keep_fraction <= 0.0f || keep_fraction > 1.0f)
        throw UsageError("sparsify_labels: keep_fraction must be in (0, 1]");
    if (keep_fraction == 1.0f) return labels;
    const int h = labels.height, w = labels.width;
    int64_t defined = 0;
    for (uint8_t v : labels.values)
        if (v != LabelMap::kUndefined) ++defined;
    const int64_t target = static_cast<int64_t>(std::llround(keep_fraction * static_cast<double>(defined)));

    LabelMap out(h, w, LabelMap::kUndefined);
    Rng rng(seed);
    int64_t kept = 0;
    const int lo = std::max(4, std::min(h, w) / 10);
    const int hi = std::max(lo + 1, std::min(h, w) / 5);
    int guard = 0;
    while (kept < target && ++guard < 100000) {
        const int rh = static_cast<int>(rng.uniform_int(lo, hi));
        const int rw = static_cast<int>(rng.uniform_int(lo, hi));
        const int y0 = static_cast<int>(rng.uniform_int(0, std::max(0, h - rh)));
        const int x0 = static_cast<int>(rng.uniform_int(0, std::max(0, w - rw)));
        for (int y = y0; y < std::min(h, y0 + rh); ++y) {
            for (int x = x0; x < std::min(w, x0 + rw); ++x) {
                const size_t i = static_cast<size_t>(y) * w + x;
                if (out.values[i] == LabelMap::kUndefined &&
                    labels.values[i] != LabelMap::kUndefined) {
                    out.values[i] = labels.values[i];
                    ++kept;
                }
            }
        }
    }
    return out;
}

// Deterministic synthetic scene: background impervious, elliptical vegetation
// and trees, water bodies, thick road polylines (labeled impervious but
// present in the road layer), non-overlapping building rectangles, and cars
// on impervious ground only. The optical rendering uses per-class base
// colors with building and road tones nearly identical, a per-object
// brightness offset, a low-frequency illumination ramp and Gaussian noise.
inline Scene generate_scene(const SceneSpec& spec) {
    if (spec.size < 64) throw UsageError("generate_scene: size must be >= 64");
    if (spec.optical_channels < 1) throw UsageError("generate_scene: need >= 1 optical channel");
    if (spec.classes.size() < 6) throw UsageError("generate_scene: class table must cover the 6 defaults");

    const int s = spec.size;
    Scene scene;
    scene.spec = spec;
    scene.labels = LabelMap(s, s, kImpervious);
    scene.layers.layer_names = MapLayerSet::default_layer_names();
    scene.layers.height = s;
    scene.layers.width = s;
    scene.layers.masks.assign(4, std::vector<uint8_t>(static_cast<size_t>(s) * s, 0));
    auto& roads_mask = scene.layers.masks[0];
    auto& buildings_mask = scene.layers.masks[1];
    auto& vegetation_mask = scene.layers.masks[2];
    auto& water_mask = scene.layers.masks[3];

    Rng layout = Rng(spec.seed).child(1);
    Rng texture = Rng(spec.seed).child(2);
    const uint64_t degrade_seed = Rng(spec.seed).child(3).next_u64();
    const uint64_t sparsify_seed = Rng(spec.seed).child(4).next_u64();

    // Object ownership for per-object texture offsets; -1 is background.
    std::vector<int32_t> owner(static_cast<size_t>(s) * s, -1);
    std::vector<float> object_offsets;
    auto stamp = [&](const std::vector<uint8_t>& mask, uint8_t cls, float offset) {
        object_offsets.push_back(offset);
        const int32_t id = static_cast<int32_t>(object_offsets.size()) - 1;
        for (size_t i = 0; i < mask.size(); ++i) {
            if (!mask[i]) continue;
            scene.labels.values[i] = cls;
            owner[i] = id;
        }
    };
    auto draw_count = [&](const CountRange& r, const char* name) {
        const int n = static_cast<int>(layout.uniform_int(r.lo, r.hi));
        scene.stats.requested[name] = n;
        scene.stats.placed[name] = 0;
        return n;
    };
    auto offset_draw = [&]() { return static_cast<float>(layout.uniform(-0.07, 0.07)); };

    std::vector<uint8_t> tmp(static_cast<size_t>(s) * s);

    // Vegetation blobs.
    {
        const int n = draw_count(spec.vegetation_blobs, "vegetation_blobs");
        for (int i = 0; i < n; ++i) {
            std::fill(tmp.begin(), tmp.end(), 0);
            const double ry = layout.uniform(18, 45), rx = layout.uniform(18, 45);
            detail::paint_ellipse(tmp, s, s, layout.uniform(0, s - 1), layout.uniform(0, s - 1), ry, rx);
            stamp(tmp, kLowVegetation, offset_draw());
            for (size_t j = 0; j < tmp.size(); ++j) vegetation_mask[j] |= tmp[j];
            scene.stats.placed["vegetation_blobs"] += 1;
        }
    }
    // Trees (small ellipses, share the vegetation layer).
    {
        const int n = draw_count(spec.trees, "trees");
        for (int i = 0; i < n; ++i) {
            std::fill(tmp.begin(), tmp.end(), 0);
            const double r = layout.uniform(4, 10);
            detail::paint_ellipse(tmp, s, s, layout.uniform(0, s - 1), layout.uniform(0, s - 1), r,
                                  r * layout.uniform(0.7, 1.3));
            stamp(tmp, kTree, offset_draw());
            for (size_t j = 0; j < tmp.size(); ++j) vegetation_mask[j] |= tmp[j];
            scene.stats.placed["trees"] += 1;
        }
    }
    // Water bodies, labeled clutter.
    {
        const int n = draw_count(spec.water, "water");
        for (int i = 0; i < n; ++i) {
            std::fill(tmp.begin(), tmp.end(), 0);
            detail::paint_ellipse(tmp, s, s, layout.uniform(0, s - 1), layout.uniform(0, s - 1),
                                  layout.uniform(12, 32), layout.uniform(12, 32));
            stamp(tmp, kClutter, offset_draw());
            for (size_t j = 0; j < tmp.size(); ++j) water_mask[j] |= tmp[j];
            scene.stats.placed["water"] += 1;
        }
    }
    // Roads: impervious class, own map layer.
    {
        const int n = draw_count(spec.roads, "roads");
        for (int i = 0; i < n; ++i) {
            std::fill(tmp.begin(), tmp.end(), 0);
            detail::paint_road(tmp, s, s, layout);
            stamp(tmp, kImpervious, offset_draw());
            for (size_t j = 0; j < tmp.size(); ++j) roads_mask[j] |= tmp[j];
            scene.stats.placed["roads"] += 1;
        }
    }
    // Buildings: rectangles, mutually non-overlapping (1 px separation).
    {
        const int n = draw_count(spec.buildings, "buildings");
        for (int i = 0; i < n; ++i) {
            bool placed = false;
            for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
                const int bh = static_cast<int>(layout.uniform_int(14, 38));
                const int bw = static_cast<int>(layout.uniform_int(14, 38));
                const int y0 = static_cast<int>(layout.uniform_int(0, s - bh));
                const int x0 = static_cast<int>(layout.uniform_int(0, s - bw));
                bool clear = true;
                for (int y = std::max(0, y0 - 1); y < std::min(s, y0 + bh + 1) && clear; ++y)
                    for (int x = std::max(0, x0 - 1); x < std::min(s, x0 + bw + 1); ++x)
                        if (buildings_mask[static_cast<size_t>(y) * s + x]) {
                            clear = false;
                            break;
                        }
                if (!clear) continue;
                std::fill(tmp.begin(), tmp.end(), 0);
                detail::paint_rect(tmp, s, s, y0, x0, bh, bw);
                stamp(tmp, kBuilding, offset_draw());
                for (size_t j = 0; j < tmp.size(); ++j) buildings_mask[j] |= tmp[j];
                placed = true;
            }
            if (placed) scene.stats.placed["buildings"] += 1;
        }
    }
    // Cars: small rectangles on impervious ground only; no map layer.
    {
        const int n = draw_count(spec.cars, "cars");
        for (int i = 0; i < n; ++i) {
            bool placed = false;
            for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
                const bool horiz = layout.next_double() < 0.5;
                const int cw = static_cast<int>(layout.uniform_int(4, 7));
                const int ch = static_cast<int>(layout.uniform_int(3, 5));
                const int rh = horiz ? ch : cw, rw = horiz ? cw : ch;
                const int y0 = static_cast<int>(layout.uniform_int(0, s - rh));
                const int x0 = static_cast<int>(layout.uniform_int(0, s - rw));
                bool clear = true;
                for (int y = y0; y < y0 + rh && clear; ++y)
                    for (int x = x0; x < x0 + rw; ++x)
                        if (scene.labels.values[static_cast<size_t>(y) * s + x] != kImpervious) {
                            clear = false;
                            break;
                        }
                if (!clear) continue;
                std::fill(tmp.begin(), tmp.end(), 0);
                detail::paint_rect(tmp, s, s, y0, x0, rh, rw);
                stamp(tmp, kCar, offset_draw());
                placed = true;
            }
            if (placed) scene.stats.placed["cars"] += 1;
        }
    }

    // Optical rendering.
    static const float kBaseColors[6][3] = {
        {0.48f, 0.50f, 0.52f},  // impervious
        {0.52f, 0.50f, 0.48f},  // building: texture-confusable with impervious
        {0.30f, 0.62f, 0.30f},  // low vegetation
        {0.13f, 0.40f, 0.16f},  // tree
        {0.72f, 0.16f, 0.16f},  // car
        {0.18f, 0.30f, 0.62f},  // clutter (water bodies)
    };
    const int ch_count = spec.optical_channels;
    scene.optical = MultiChannelRaster(ch_count, s, s);
    const double ga = texture.uniform(-0.12, 0.12);
    const double gb = texture.uniform(-0.12, 0.12);
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            const size_t i = static_cast<size_t>(y) * s + x;
            const uint8_t cls = scene.labels.values[i];
            const float obj = owner[i] >= 0 ? object_offsets[static_cast<size_t>(owner[i])] : 0.0f;
            const float illum = static_cast<float>(ga * (static_cast<double>(x) / s - 0.5) +
                                                   gb * (static_cast<double>(y) / s - 0.5));
            for (int c = 0; c < ch_count; ++c) {
                const float base = kBaseColors[cls][c % 3];
                float v = base + obj + illum + static_cast<float>(texture.normal(0.0, spec.noise_sigma));
                scene.optical.at(c, y, x) = std::clamp(v, 0.0f, 1.0f);
            }
        }
    }

    // Imperfect map layers and (optionally) sparse labels.
    scene.layers = degrade_layers(scene.layers, spec.degradation.p_drop, spec.degradation.jitter_px,
                                  spec.degradation.dilate_erode_px, degrade_seed);
    if (spec.keep_fraction < 1.0f)
        scene.labels = sparsify_labels(scene.labels, spec.keep_fraction, sparsify_seed);
    return scene;
}

}  // namespace mapfuse
