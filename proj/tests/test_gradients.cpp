#include <catch2/catch_amalgamated.hpp>

#include "grad_suite.hpp"

TEST_CASE("finite-difference gradient checks across all differentiable ops") {
    auto results = grad_suite::run(5);
    for (const auto& [op, res] : results) {
        INFO(op << " max relative error " << res.max_rel_err);
        CHECK(res.max_rel_err < 1e-2);
    }
    CHECK(results.size() >= 12);
}

TEST_CASE("end-to-end gradient through a conv-bn-relu-pool-unpool stack") {
    using namespace mapfuse;
    Rng rng(404);
    Tensor x = oracles::random_tensor(rng, {1, 2, 4, 4}, -1, 1, false);
    Tensor w = oracles::random_tensor(rng, {3, 2, 3, 3}, -0.5, 0.5, true);
    Tensor b = oracles::random_tensor(rng, {3}, -0.1, 0.1, true);
    Tensor gamma = Tensor::full({3}, 1.0f);
    gamma.set_requires_grad(true);
    Tensor beta = Tensor::zeros({3});
    beta.set_requires_grad(true);
    LabelBatch labels{1, 4, 4, std::vector<uint8_t>(16)};
    for (size_t i = 0; i < 16; ++i) labels.ids[i] = static_cast<uint8_t>(i % 3);

    auto loss = [&]() {
        Tensor rm = Tensor::zeros({3});
        Tensor rv = Tensor::full({3}, 1.0f);
        Tensor h1 = relu(batchnorm2d(conv2d(x, w, b, 1, 1), gamma, beta, rm, rv, true));
        auto pooled = maxpool2x2_with_indices(h1);
        Tensor up = unpool_with_indices(pooled.output, pooled.indices, 4, 4);
        return masked_softmax_cross_entropy(up, labels);
    };
    CHECK(oracles::finite_diff_check(loss, w) < 1e-2);
    CHECK(oracles::finite_diff_check(loss, gamma) < 1e-2);
}
