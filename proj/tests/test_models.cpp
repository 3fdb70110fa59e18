#include <catch2/catch_amalgamated.hpp>
#include <cstring>
#include <filesystem>

#include "mapfuse/models.hpp"
#include "oracles.hpp"

using namespace mapfuse;

namespace {

// Copies parameters and buffers whose names match; returns how many did.
int copy_matching_state(Model& src, Model& dst) {
    int copied = 0;
    for (auto& d : dst.parameters()) {
        for (auto& s : src.parameters()) {
            if (s.name == d.name && s.tensor.shape() == d.tensor.shape()) {
                std::copy(s.tensor.data(), s.tensor.data() + s.tensor.numel(), d.tensor.data());
                ++copied;
            }
        }
    }
    for (auto& d : dst.buffers()) {
        for (auto& s : src.buffers()) {
            if (s.name == d.name && s.tensor.shape() == d.tensor.shape()) {
                std::copy(s.tensor.data(), s.tensor.data() + s.tensor.numel(), d.tensor.data());
                ++copied;
            }
        }
    }
    return copied;
}

void zero_params_with_prefix(Model& m, const std::string& prefix) {
    for (auto& p : m.parameters()) {
        if (p.name.rfind(prefix, 0) == 0)
            std::fill(p.tensor.data(), p.tensor.data() + p.tensor.numel(), 0.0f);
    }
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<size_t>(a.numel())) == 0;
}

}  // namespace

TEST_CASE("segnet output shapes follow the truncation rule") {
    ModelOptions opt;
    opt.init_seed = 3;
    MiniSegNet seg(3, 6, opt);
    Rng rng(1);
    Tensor x = oracles::random_tensor(rng, {1, 3, 64, 64});
    NoGradGuard ng;
    Tensor y = seg.forward(x, {}, false);
    CHECK(y.shape() == Shape{1, 6, 64, 64});

    ModelOptions t2 = opt;
    t2.decoder_trunc = 2;
    MiniSegNet seg2(3, 6, t2);
    Tensor x2 = oracles::random_tensor(rng, {1, 3, 160, 160});
    Tensor y2 = seg2.forward(x2, {}, false);
    CHECK(y2.shape() == Shape{1, 6, 40, 40});  // 1:4 of the input
}

TEST_CASE("segnet rejects non-divisible spatial dims") {
    ModelOptions opt;
    MiniSegNet seg(3, 6, opt);
    Tensor x = Tensor::zeros({1, 3, 60, 60});  // not divisible by 8
    CHECK_THROWS_AS(seg.forward(x, {}, false), DimensionError);
}

TEST_CASE("all-zero weights give all-zero scores") {
    ModelOptions opt;
    MiniSegNet seg(3, 4, opt);
    for (auto& p : seg.parameters())
        std::fill(p.tensor.data(), p.tensor.data() + p.tensor.numel(), 0.0f);
    Rng rng(2);
    Tensor x = oracles::random_tensor(rng, {1, 3, 32, 32});
    NoGradGuard ng;
    Tensor y = seg.forward(x, {}, false);
    for (int64_t i = 0; i < y.numel(); ++i) REQUIRE(y.data()[i] == 0.0f);

    OsmNet osm(4, 4, opt);
    for (auto& p : osm.parameters())
        std::fill(p.tensor.data(), p.tensor.data() + p.tensor.numel(), 0.0f);
    Tensor o = oracles::random_tensor(rng, {1, 4, 32, 32});
    Tensor yo = osm.forward({}, o, false);
    for (int64_t i = 0; i < yo.numel(); ++i) REQUIRE(yo.data()[i] == 0.0f);
}

TEST_CASE("osmnet preserves spatial dims and checks channels") {
    ModelOptions opt;
    opt.init_seed = 9;
    OsmNet osm(4, 6, opt);
    Rng rng(3);
    Tensor o = oracles::random_tensor(rng, {2, 4, 40, 56});
    NoGradGuard ng;
    Tensor y = osm.forward({}, o, false);
    CHECK(y.shape() == Shape{2, 6, 40, 56});
    CHECK(osm.last_features().shape() == Shape{2, 32, 40, 56});
    CHECK_THROWS_AS(osm.forward({}, Tensor::zeros({1, 3, 8, 8}), false), DimensionError);
}

TEST_CASE("fuse_average properties") {
    Rng rng(4);
    Tensor s = oracles::random_tensor(rng, {1, 6, 8, 8});
    Tensor neg = scale(s, -1.0f);
    Tensor same = fuse_average(s, s);
    for (int64_t i = 0; i < s.numel(); ++i) REQUIRE(same.data()[i] == s.data()[i]);
    Tensor zero = fuse_average(s, neg);
    for (int64_t i = 0; i < s.numel(); ++i) REQUIRE(zero.data()[i] == 0.0f);
    Tensor t = oracles::random_tensor(rng, {1, 6, 8, 8});
    Tensor ab = fuse_average(s, t), ba = fuse_average(t, s);
    for (int64_t i = 0; i < s.numel(); ++i) REQUIRE(ab.data()[i] == ba.data()[i]);
    CHECK_THROWS_AS(fuse_average(s, Tensor::zeros({1, 6, 4, 4})), DimensionError);
}

TEST_CASE("zero corrector reduces residual correction to plain averaging") {
    ModelOptions opt;
    opt.init_seed = 11;
    FusionPipeline rescorr(true, 3, 4, 6, opt);
    FusionPipeline average(false, 3, 4, 6, opt);
    REQUIRE(copy_matching_state(rescorr, average) > 0);
    zero_params_with_prefix(rescorr, "corrector.");

    Rng rng(5);
    Tensor x = oracles::random_tensor(rng, {1, 3, 32, 32});
    Tensor o = oracles::random_tensor(rng, {1, 4, 32, 32}, 0, 1);
    NoGradGuard ng;
    Tensor yr = rescorr.forward(x, o, false);
    Tensor ya = average.forward(x, o, false);
    REQUIRE(bitwise_equal(yr, ya));

    // And it equals fuse_average of the branch scores bit for bit.
    Tensor direct = fuse_average(rescorr.branch_scores_opt(), rescorr.branch_scores_osm());
    REQUIRE(bitwise_equal(yr, direct));
}

TEST_CASE("fuse_residual is linear in the averaged scores") {
    ModelOptions opt;
    opt.init_seed = 13;
    FusionPipeline rescorr(true, 3, 4, 6, opt);
    Rng rng(6);
    Tensor avg = oracles::random_tensor(rng, {1, 6, 16, 16});
    Tensor z_opt = oracles::random_tensor(rng, {1, 16, 16, 16});
    Tensor z_osm = oracles::random_tensor(rng, {1, 32, 16, 16});
    NoGradGuard ng;
    Tensor base = rescorr.fuse_residual(avg, z_opt, z_osm);
    const float delta = 0.625f;  // exactly representable
    Tensor shifted_in = Tensor::zeros(avg.shape());
    for (int64_t i = 0; i < avg.numel(); ++i) shifted_in.data()[i] = avg.data()[i] + delta;
    Tensor shifted_out = rescorr.fuse_residual(shifted_in, z_opt, z_osm);
    // One extra f32 rounding on each side of the comparison.
    for (int64_t i = 0; i < base.numel(); ++i)
        REQUIRE(shifted_out.data()[i] == Catch::Approx(base.data()[i] + delta).margin(1e-5));
}

TEST_CASE("gradients reach both branches of the residual pipeline") {
    ModelOptions opt;
    opt.init_seed = 17;
    FusionPipeline rescorr(true, 3, 4, 6, opt);
    Rng rng(7);
    Tensor x = oracles::random_tensor(rng, {2, 3, 32, 32});
    Tensor o = oracles::random_tensor(rng, {2, 4, 32, 32}, 0, 1);
    LabelBatch labels{2, 32, 32, {}};
    labels.ids.resize(2 * 32 * 32);
    for (auto& v : labels.ids) v = static_cast<uint8_t>(rng.uniform_int(0, 5));

    Tensor scores = rescorr.forward(x, o, true);
    Tensor loss = masked_softmax_cross_entropy(scores, labels);
    loss.backward();

    auto grad_norm_with_prefix = [&](const std::string& prefix) {
        double s = 0;
        for (auto& p : rescorr.parameters()) {
            if (p.name.rfind(prefix, 0) != 0) continue;
            for (float g : p.tensor.grad_vector()) s += std::abs(g);
        }
        return s;
    };
    CHECK(grad_norm_with_prefix("segnet.") > 0.0);
    CHECK(grad_norm_with_prefix("osmnet.") > 0.0);
    CHECK(grad_norm_with_prefix("corrector.") > 0.0);
}

TEST_CASE("fusenet with zero ancillary weights equals segnet bit for bit") {
    ModelOptions opt;
    opt.init_seed = 23;
    MiniSegNet seg(3, 6, opt);
    ModelOptions fopt = opt;
    fopt.init_seed = 99;  // different init; main weights overwritten below
    FuseNetMini fuse(3, 4, 6, fopt);
    REQUIRE(copy_matching_state(seg, fuse) > 0);
    zero_params_with_prefix(fuse, "ancillary_encoder.");

    Rng rng(8);
    Tensor x = oracles::random_tensor(rng, {2, 3, 32, 32});
    Tensor o = oracles::random_tensor(rng, {2, 4, 32, 32}, 0, 1);
    NoGradGuard ng;
    SECTION("eval mode") {
        Tensor ys = seg.forward(x, {}, false);
        Tensor yf = fuse.forward(x, o, false);
        REQUIRE(bitwise_equal(ys, yf));
    }
    SECTION("train mode") {
        Tensor ys = seg.forward(x, {}, true);
        Tensor yf = fuse.forward(x, o, true);
        REQUIRE(bitwise_equal(ys, yf));
    }
}

TEST_CASE("fusenet responds to both modalities") {
    ModelOptions opt;
    opt.init_seed = 29;
    FuseNetMini fuse(3, 4, 6, opt);
    Rng rng(9);
    Tensor x = oracles::random_tensor(rng, {1, 3, 32, 32});
    Tensor o = oracles::random_tensor(rng, {1, 4, 32, 32}, 0, 1);
    Tensor zx = Tensor::zeros({1, 3, 32, 32});
    Tensor zo = Tensor::zeros({1, 4, 32, 32});
    NoGradGuard ng;
    Tensor both = fuse.forward(x, o, false);
    Tensor no_optical = fuse.forward(zx, o, false);
    Tensor no_osm = fuse.forward(x, zo, false);
    CHECK_FALSE(bitwise_equal(both, no_optical));
    CHECK_FALSE(bitwise_equal(both, no_osm));
    CHECK(both.shape() == Shape{1, 6, 32, 32});
}

TEST_CASE("fusenet parameter count is segnet plus one ancillary encoder") {
    ModelOptions opt;
    MiniSegNet seg(3, 6, opt);
    FuseNetMini fuse(3, 4, 6, opt);
    // Closed form for the extra encoder: conv-bn-relu x2 per block, first
    // block fed by the 4 map channels.
    int64_t expected_extra = 0;
    int in = 4;
    for (int w : opt.widths) {
        expected_extra += static_cast<int64_t>(w) * in * 9 + w;  // conv1
        expected_extra += 2 * w;                                 // bn1 affine
        expected_extra += static_cast<int64_t>(w) * w * 9 + w;   // conv2
        expected_extra += 2 * w;                                 // bn2 affine
        in = w;
    }
    CHECK(fuse.parameter_count() - seg.parameter_count() == expected_extra);
}

TEST_CASE("one joint optimizer step moves every subnetwork") {
    ModelOptions opt;
    opt.init_seed = 31;
    FusionPipeline rescorr(true, 3, 4, 6, opt);
    Rng rng(10);
    Tensor x = oracles::random_tensor(rng, {2, 3, 16, 16});
    Tensor o = oracles::random_tensor(rng, {2, 4, 16, 16}, 0, 1);
    LabelBatch labels{2, 16, 16, {}};
    labels.ids.resize(512);
    for (auto& v : labels.ids) v = static_cast<uint8_t>(rng.uniform_int(0, 5));

    std::vector<std::vector<float>> before;
    for (auto& p : rescorr.parameters())
        before.emplace_back(p.tensor.data(), p.tensor.data() + p.tensor.numel());

    Tensor loss = masked_softmax_cross_entropy(rescorr.forward(x, o, true), labels);
    loss.backward();
    SgdOptimizer sgd;
    for (auto& p : rescorr.parameters()) sgd.add(p.tensor);
    sgd.step(0.05f);

    size_t moved_groups = 0;
    for (const std::string& prefix : {"segnet.encoder", "segnet.decoder", "segnet.classifier",
                                      "osmnet.", "corrector."}) {
        bool moved = false;
        for (size_t i = 0; i < rescorr.parameters().size(); ++i) {
            auto& p = rescorr.parameters()[i];
            if (p.name.rfind(prefix, 0) != 0) continue;
            for (int64_t j = 0; j < p.tensor.numel(); ++j) {
                if (p.tensor.data()[j] != before[i][static_cast<size_t>(j)]) {
                    moved = true;
                    break;
                }
            }
            if (moved) break;
        }
        moved_groups += moved ? 1 : 0;
    }
    CHECK(moved_groups == 5);
}

TEST_CASE("model directory save/load round trip preserves behavior") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "mapfuse_model_test";
    fs::remove_all(dir);
    ModelOptions opt;
    opt.init_seed = 37;
    FuseNetMini fuse(3, 4, 6, opt);
    save_model_dir(dir, fuse, {{"encoding", "binary"}});

    LoadedModel loaded = load_model_dir(dir);
    REQUIRE(loaded.descriptor.at("kind") == "fusenet");
    REQUIRE(loaded.descriptor.at("metadata").at("encoding") == "binary");

    Rng rng(11);
    Tensor x = oracles::random_tensor(rng, {1, 3, 32, 32});
    Tensor o = oracles::random_tensor(rng, {1, 4, 32, 32}, 0, 1);
    NoGradGuard ng;
    Tensor y1 = fuse.forward(x, o, false);
    Tensor y2 = loaded.model->forward(x, o, false);
    REQUIRE(bitwise_equal(y1, y2));
    fs::remove_all(dir);
}
