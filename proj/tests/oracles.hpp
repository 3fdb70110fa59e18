#pragma once

// Test-only reference implementations and checkers. Everything here is
// independent of the library's production code paths: brute-force scans,
// central finite differences, and direct per-pixel counting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "mapfuse/rng.hpp"
#include "mapfuse/tensor.hpp"

namespace oracles {

inline mapfuse::Tensor random_tensor(mapfuse::Rng& rng, mapfuse::Shape shape, float lo = -1.0f,
                                     float hi = 1.0f, bool requires_grad = false) {
    int64_t n = mapfuse::shape_numel(shape);
    std::vector<float> data(static_cast<size_t>(n));
    for (auto& v : data) v = static_cast<float>(rng.uniform(lo, hi));
    return mapfuse::Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// Central finite-difference gradient check of a scalar-valued function with
// respect to leaf x. Returns the max relative error over probed coordinates.
// make_loss must rebuild the graph from x's current values on every call.
inline double finite_diff_check(const std::function<mapfuse::Tensor()>& make_loss, mapfuse::Tensor x,
                                double h = 1e-3, int max_probes = 48, uint64_t probe_seed = 7) {
    x.zero_grad();
    {
        mapfuse::Tensor loss = make_loss();
        loss.backward();
    }
    std::vector<float> analytic = x.grad_vector();

    const int64_t n = x.numel();
    std::vector<int64_t> probes;
    if (max_probes < 0 || n <= max_probes) {
        probes.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) probes[static_cast<size_t>(i)] = i;
    } else {
        mapfuse::Rng prng(probe_seed);
        for (int i = 0; i < max_probes; ++i) probes.push_back(prng.uniform_int(0, n - 1));
        std::sort(probes.begin(), probes.end());
        probes.erase(std::unique(probes.begin(), probes.end()), probes.end());
    }

    double max_rel = 0.0;
    float* xv = x.data();
    for (int64_t i : probes) {
        const float saved = xv[i];
        xv[i] = saved + static_cast<float>(h);
        const double lp = make_loss().item();
        xv[i] = saved - static_cast<float>(h);
        const double lm = make_loss().item();
        xv[i] = saved;
        const double numeric = (lp - lm) / (2.0 * h);
        const double a = analytic[static_cast<size_t>(i)];
        // The 5e-2 floor is the absolute/relative crossover: forward passes
        // run in f32, so central differences at h=1e-3 carry ~2e-4 absolute
        // noise and coordinates with tiny gradients must be judged absolutely.
        const double rel = std::abs(a - numeric) / std::max({5e-2, std::abs(a), std::abs(numeric)});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

// Random projection turning a tensor-valued op into a scalar loss, so the
// whole output participates in the check.
inline mapfuse::Tensor project_to_scalar(const mapfuse::Tensor& y, const std::vector<float>& proj) {
    using namespace mapfuse;
    Tensor out = Tensor::make_op({1}, {y});
    const float* yv = y.data();
    double s = 0.0;
    for (int64_t i = 0; i < y.numel(); ++i) s += static_cast<double>(yv[i]) * proj[static_cast<size_t>(i)];
    out.data()[0] = static_cast<float>(s);
    detail::Node* on = out.node();
    Tensor yc = y;
    std::vector<float> pc = proj;
    out.set_backward([yc, on, pc]() mutable {
        if (!yc.requires_grad()) return;
        const float g = on->grad[0];
        float* gy = yc.grad();
        for (int64_t i = 0; i < yc.numel(); ++i) gy[i] += g * pc[static_cast<size_t>(i)];
    });
    return out;
}

inline std::vector<float> random_projection(mapfuse::Rng& rng, int64_t n) {
    std::vector<float> p(static_cast<size_t>(n));
    for (auto& v : p) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return p;
}

// ---------------------------------------------------------------------------
// Brute-force signed Euclidean distance transform. Pixels beyond the grid
// border count as outside. O(N^2) per pixel pair scan; only for small grids.
// ---------------------------------------------------------------------------
inline std::vector<float> brute_force_sdt(const std::vector<uint8_t>& mask, int h, int w, float tau) {
    std::vector<float> out(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const bool inside = mask[static_cast<size_t>(y) * w + x] != 0;
            double best_sq = std::numeric_limits<double>::infinity();
            for (int yy = 0; yy < h; ++yy) {
                for (int xx = 0; xx < w; ++xx) {
                    const bool other = mask[static_cast<size_t>(yy) * w + xx] != 0;
                    if (other == inside) continue;
                    const double dy = yy - y, dx = xx - x;
                    best_sq = std::min(best_sq, dy * dy + dx * dx);
                }
            }
            if (inside) {
                // Virtual outside ring one step beyond every border.
                const double border = 1.0 + std::min(std::min(y, h - 1 - y), std::min(x, w - 1 - x));
                best_sq = std::min(best_sq, border * border);
            }
            double d = std::isinf(best_sq) ? static_cast<double>(tau) : std::sqrt(best_sq);
            d = std::min(d, static_cast<double>(tau));
            out[static_cast<size_t>(y) * w + x] = static_cast<float>((inside ? d : -d) / tau);
        }
    }
    return out;
}

// Brute-force label erosion: any pixel within Euclidean distance <= radius of
// a differently-classed, defined pixel becomes undefined.
inline std::vector<uint8_t> brute_force_erode(const std::vector<uint8_t>& labels, int h, int w,
                                              int radius, uint8_t undefined = 255) {
    std::vector<uint8_t> out = labels;
    const int r2 = radius * radius;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const uint8_t own = labels[static_cast<size_t>(y) * w + x];
            if (own == undefined) continue;
            bool near_other = false;
            for (int yy = std::max(0, y - radius); yy <= std::min(h - 1, y + radius) && !near_other; ++yy) {
                for (int xx = std::max(0, x - radius); xx <= std::min(w - 1, x + radius); ++xx) {
                    const uint8_t lab = labels[static_cast<size_t>(yy) * w + xx];
                    if (lab == undefined || lab == own) continue;
                    const int dy = yy - y, dx = xx - x;
                    if (dy * dy + dx * dx <= r2) {
                        near_other = true;
                        break;
                    }
                }
            }
            if (near_other) out[static_cast<size_t>(y) * w + x] = undefined;
        }
    }
    return out;
}

// Per-pixel confusion counting without the library's accumulation path.
struct BruteForceScores {
    std::vector<uint64_t> cm;  // K x K, rows = reference
    uint64_t total = 0, correct = 0;
};

inline BruteForceScores brute_force_confusion(const std::vector<uint8_t>& predicted,
                                              const std::vector<uint8_t>& reference, size_t k,
                                              uint8_t undefined = 255) {
    BruteForceScores s;
    s.cm.assign(k * k, 0);
    for (size_t i = 0; i < reference.size(); ++i) {
        if (reference[i] == undefined) continue;
        s.cm[reference[i] * k + predicted[i]] += 1;
        s.total += 1;
        if (reference[i] == predicted[i]) s.correct += 1;
    }
    return s;
}

inline double brute_force_f1(const BruteForceScores& s, size_t k, size_t cls) {
    uint64_t tp = s.cm[cls * k + cls], row = 0, col = 0;
    for (size_t j = 0; j < k; ++j) {
        row += s.cm[cls * k + j];
        col += s.cm[j * k + cls];
    }
    if (row + col == 0) return -1.0;  // undefined
    if (tp == 0) return 0.0;
    const double recall = static_cast<double>(tp) / static_cast<double>(row);
    const double precision = static_cast<double>(tp) / static_cast<double>(col);
    return 2.0 * precision * recall / (precision + recall);
}

}  // namespace oracles
