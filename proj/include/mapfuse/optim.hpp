#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mapfuse/rng.hpp"
#include "mapfuse/tensor.hpp"

namespace mapfuse {

// Zero-mean Gaussian with std sqrt(2/fan_in); bit-identical for a given seed.
inline void msra_init(Parameter& param, int fan_in, uint64_t rng_seed) {
    if (fan_in <= 0) throw UsageError("msra_init: fan_in must be positive");
    Rng rng(rng_seed);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    float* d = param.tensor.data();
    const int64_t n = param.tensor.numel();
    for (int64_t i = 0; i < n; ++i) d[i] = static_cast<float>(rng.normal(0.0, stddev));
}

inline void sgd_step(Tensor& param, float lr) {
    if (!param.has_grad()) throw UsageError("sgd_step: parameter has no gradient");
    float* w = param.data();
    const std::vector<float>& g = param.grad_vector();
    const int64_t n = param.numel();
    for (int64_t i = 0; i < n; ++i) w[i] -= lr * g[i];
}

struct AdamState {
    std::vector<float> m, v;
};

inline void adam_step(Tensor& param, float lr, AdamState& state, int64_t step, float beta1 = 0.9f,
                      float beta2 = 0.999f, float eps = 1e-8f) {
    if (!param.has_grad()) throw UsageError("adam_step: parameter has no gradient");
    const int64_t n = param.numel();
    if (state.m.empty()) {
        state.m.assign(static_cast<size_t>(n), 0.0f);
        state.v.assign(static_cast<size_t>(n), 0.0f);
    }
    const std::vector<float>& g = param.grad_vector();
    float* w = param.data();
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(step));
    for (int64_t i = 0; i < n; ++i) {
        state.m[i] = beta1 * state.m[i] + (1.0f - beta1) * g[i];
        state.v[i] = beta2 * state.v[i] + (1.0f - beta2) * g[i] * g[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
    }
}

// Applies one of the update rules across a parameter set, with a per-entry
// learning-rate multiplier (used for the encoder half-rate rule).
class Optimizer {
  public:
    struct Entry {
        Tensor tensor;
        float lr_mult;
    };

    virtual ~Optimizer() = default;

    void add(Tensor t, float lr_mult = 1.0f) { entries_.push_back({std::move(t), lr_mult}); }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    virtual void step(float lr) = 0;

  protected:
    std::vector<Entry> entries_;
};

class SgdOptimizer : public Optimizer {
  public:
    void step(float lr) override {
        for (auto& e : entries_) sgd_step(e.tensor, lr * e.lr_mult);
    }
};

class AdamOptimizer : public Optimizer {
  public:
    explicit AdamOptimizer(float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(float lr) override {
        if (states_.size() != entries_.size()) states_.resize(entries_.size());
        ++step_count_;
        for (size_t i = 0; i < entries_.size(); ++i)
            adam_step(entries_[i].tensor, lr * entries_[i].lr_mult, states_[i], step_count_, beta1_,
                      beta2_, eps_);
    }

  private:
    std::vector<AdamState> states_;
    int64_t step_count_ = 0;
    float beta1_, beta2_, eps_;
};

}  // namespace mapfuse
