#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>

#include "mapfuse/training.hpp"
#include "oracles.hpp"

using namespace mapfuse;
using Catch::Approx;

namespace {

Dataset tiny_dataset(int scenes, int size, uint64_t seed, float keep_fraction = 1.0f) {
    Dataset ds;
    ds.classes = default_class_names();
    ds.layer_names = MapLayerSet::default_layer_names();
    for (int i = 0; i < scenes; ++i) {
        SceneSpec spec;
        spec.seed = Rng(seed).child(static_cast<uint64_t>(i)).next_u64();
        spec.size = size;
        spec.degradation = {0.1f, 1, 0};
        spec.keep_fraction = keep_fraction;
        Scene scene = generate_scene(spec);
        DatasetScene d;
        d.id = std::to_string(i);
        d.seed = spec.seed;
        d.optical = std::move(scene.optical);
        d.layers = std::move(scene.layers);
        d.labels = std::move(scene.labels);
        if (i + 1 < scenes)
            ds.train.push_back(std::move(d));
        else
            ds.test.push_back(std::move(d));
    }
    return ds;
}

TrainConfig tiny_config(uint64_t seed) {
    TrainConfig cfg;
    cfg.patch_size = 32;
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.widths = {8, 16};
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("lr schedule divides by 10 every 2 epochs in sgd mode") {
    TrainConfig cfg;
    cfg.optimizer = "sgd";
    cfg.base_lr = 0.01f;
    CHECK(lr_at(0, cfg) == Approx(0.01f));
    CHECK(lr_at(1, cfg) == Approx(0.01f));
    CHECK(lr_at(2, cfg) == Approx(0.001f));
    CHECK(lr_at(3, cfg) == Approx(0.001f));
    CHECK(lr_at(4, cfg) == Approx(0.0001f));
    cfg.optimizer = "adam";
    CHECK(lr_at(7, cfg) == Approx(0.01f));
    CHECK_THROWS_AS(lr_at(-1, cfg), UsageError);
}

TEST_CASE("patch sampler accepts any position on dense labels") {
    Dataset ds = tiny_dataset(2, 64, 5);
    TrainConfig cfg = tiny_config(1);
    EncodedScene scene = encode_scene(ds.train[0], Encoding::Binary, cfg);
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        Patch p = sample_patch(scene, 32, 0.0f, rng);
        REQUIRE(p.optical.height == 32);
        REQUIRE(p.osm.channels == 4);
    }
}

TEST_CASE("patch sampler rejects patches below the annotation threshold") {
    // A patch-sized scene with exactly 4% annotated pixels.
    DatasetScene d;
    d.optical = MultiChannelRaster(3, 32, 32, 0.5f);
    d.layers.layer_names = MapLayerSet::default_layer_names();
    d.layers.height = d.layers.width = 32;
    d.layers.masks.assign(4, std::vector<uint8_t>(1024, 0));
    d.labels = LabelMap(32, 32, LabelMap::kUndefined);
    const int annotated = 41;  // just above 4% of 1024 pixels
    for (int i = 0; i < annotated; ++i) d.labels.values[static_cast<size_t>(i)] = 0;

    TrainConfig cfg = tiny_config(1);
    EncodedScene scene = encode_scene(d, Encoding::Binary, cfg);
    Rng rng(4);
    CHECK_THROWS_AS(sample_patch(scene, 32, 0.05f, rng), SamplingError);
    // At 4% the patch qualifies.
    Rng rng2(4);
    CHECK_NOTHROW(sample_patch(scene, 32, 0.04f, rng2));
}

TEST_CASE("patch crops are congruent across modalities") {
    // Encode pixel coordinates into both optical and labels, then verify the
    // crop offsets agree.
    DatasetScene d;
    d.optical = MultiChannelRaster(1, 64, 64);
    d.labels = LabelMap(64, 64);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            d.optical.at(0, y, x) = static_cast<float>(y * 64 + x);
            d.labels.at(y, x) = static_cast<uint8_t>((y * 64 + x) % 7);
        }
    d.layers.layer_names = {"roads"};
    d.layers.height = d.layers.width = 64;
    d.layers.masks.assign(1, std::vector<uint8_t>(4096, 0));

    TrainConfig cfg = tiny_config(1);
    EncodedScene scene = encode_scene(d, Encoding::Binary, cfg);
    Rng rng(5);
    Patch p = sample_patch(scene, 16, 0.0f, rng);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            const int flat = static_cast<int>(p.optical.at(0, y, x));
            REQUIRE(flat == (p.y0 + y) * 64 + (p.x0 + x));
            REQUIRE(p.labels.at(y, x) == static_cast<uint8_t>(flat % 7));
        }
}

TEST_CASE("double flip is the identity and flips stay congruent") {
    Rng rng(6);
    MultiChannelRaster r(2, 6, 5);
    for (auto& v : r.data) v = static_cast<float>(rng.uniform(0, 1));
    MultiChannelRaster orig = r;
    flip_raster(r, true, false);
    flip_raster(r, true, false);
    REQUIRE(r.data == orig.data);

    LabelMap m(6, 5);
    for (auto& v : m.values) v = static_cast<uint8_t>(rng.uniform_int(0, 5));
    LabelMap morig = m;
    flip_labels(m, false, true);
    flip_labels(m, false, true);
    REQUIRE(m.values == morig.values);

    // Congruence: the same flip applied to raster and labels keeps pixel
    // correspondence.
    MultiChannelRaster r2(1, 4, 4);
    LabelMap m2(4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            r2.at(0, y, x) = static_cast<float>(y * 4 + x);
            m2.at(y, x) = static_cast<uint8_t>(y * 4 + x);
        }
    flip_raster(r2, true, true);
    flip_labels(m2, true, true);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            REQUIRE(static_cast<int>(r2.at(0, y, x)) == m2.at(y, x));
}

TEST_CASE("augmentation outcomes are uniform over the four choices") {
    // Marker patch: distinct corner values identify the applied flip.
    int counts[4] = {0, 0, 0, 0};
    Rng rng(7);
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        Patch p;
        p.optical = MultiChannelRaster(1, 2, 2);
        p.optical.at(0, 0, 0) = 1.0f;  // marker
        p.osm = MultiChannelRaster(1, 2, 2);
        p.labels = LabelMap(2, 2);
        augment_patch(p, rng);
        int outcome;
        if (p.optical.at(0, 0, 0) == 1.0f)
            outcome = 0;  // none
        else if (p.optical.at(0, 0, 1) == 1.0f)
            outcome = 1;  // horizontal
        else if (p.optical.at(0, 1, 0) == 1.0f)
            outcome = 2;  // vertical
        else
            outcome = 3;  // both
        counts[outcome] += 1;
    }
    for (int c = 0; c < 4; ++c) {
        const double freq = static_cast<double>(counts[c]) / n;
        CHECK(freq == Approx(0.25).margin(0.02));
    }
}

TEST_CASE("adding undefined pixels to a batch never changes the loss") {
    Rng rng(8);
    const int k = 3;
    Tensor small = oracles::random_tensor(rng, {1, k, 2, 2});
    LabelBatch small_labels{1, 2, 2, {0, 1, 2, 1}};
    Tensor wide = Tensor::zeros({1, k, 2, 4});
    // Left half copies the small logits; right half is arbitrary but ignored.
    for (int c = 0; c < k; ++c)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) {
                wide.data()[(c * 2 + y) * 4 + x] = small.data()[(c * 2 + y) * 2 + x];
                wide.data()[(c * 2 + y) * 4 + x + 2] = static_cast<float>(rng.uniform(-3, 3));
            }
    LabelBatch wide_labels{1, 2, 4, {0, 1, 255, 255, 2, 1, 255, 255}};
    Tensor l1 = masked_softmax_cross_entropy(small, small_labels);
    Tensor l2 = masked_softmax_cross_entropy(wide, wide_labels);
    REQUIRE(l1.item() == Approx(l2.item()).margin(1e-7));
}

TEST_CASE("training with lr=0 leaves parameters at their initialization") {
    Dataset ds = tiny_dataset(3, 64, 11);
    TrainConfig cfg = tiny_config(21);
    cfg.base_lr = 0.0f;
    cfg.epochs = 1;
    TrainResult res = train_model(ModelKind::SegNetOnly, ds, cfg, Encoding::Binary);

    ModelOptions mopt;
    mopt.widths = cfg.widths;
    mopt.init_seed = Rng(cfg.seed).child(102).next_u64();
    MiniSegNet fresh(3, 6, mopt);
    REQUIRE(res.model->parameters().size() == fresh.parameters().size());
    for (size_t i = 0; i < fresh.parameters().size(); ++i) {
        auto& a = res.model->parameters()[i].tensor;
        auto& b = fresh.parameters()[i].tensor;
        for (int64_t j = 0; j < a.numel(); ++j) REQUIRE(a.data()[j] == b.data()[j]);
    }
}

TEST_CASE("training is deterministic in the seed") {
    Dataset ds = tiny_dataset(3, 64, 13);
    TrainConfig cfg = tiny_config(33);
    TrainResult a = train_model(ModelKind::OsmNetOnly, ds, cfg, Encoding::Binary);
    TrainResult b = train_model(ModelKind::OsmNetOnly, ds, cfg, Encoding::Binary);
    REQUIRE(a.log.loss == b.log.loss);
    REQUIRE(a.log.epoch_val_oa == b.log.epoch_val_oa);
    for (size_t i = 0; i < a.model->parameters().size(); ++i) {
        auto& pa = a.model->parameters()[i].tensor;
        auto& pb = b.model->parameters()[i].tensor;
        for (int64_t j = 0; j < pa.numel(); ++j) REQUIRE(pa.data()[j] == pb.data()[j]);
    }
}

TEST_CASE("short training beats the uniform-prediction loss") {
    Dataset ds = tiny_dataset(4, 64, 17);
    TrainConfig cfg = tiny_config(44);
    cfg.epochs = 8;
    cfg.optimizer = "adam";  // converges within the tiny budget of this test
    TrainResult res = train_model(ModelKind::SegNetOnly, ds, cfg, Encoding::Binary);
    const double uniform = std::log(6.0);
    // Mean of the last epoch's losses sits clearly below ln(6).
    double tail = 0;
    int tail_n = res.log.iters_per_epoch;
    for (int i = 0; i < tail_n; ++i)
        tail += res.log.loss[res.log.loss.size() - 1 - static_cast<size_t>(i)];
    tail /= tail_n;
    CHECK(tail < uniform);
}

TEST_CASE("iterations_to_target is monotone in the target") {
    TrainLog log;
    log.iters_per_epoch = 10;
    log.epoch_val_oa = {0.3, 0.5, 0.45, 0.7};
    CHECK(log.iterations_to_target(0.2).value() == 10);
    CHECK(log.iterations_to_target(0.4).value() == 20);
    CHECK(log.iterations_to_target(0.5).value() == 20);
    CHECK(log.iterations_to_target(0.6).value() == 40);
    CHECK_FALSE(log.iterations_to_target(0.9).has_value());
    std::optional<int64_t> prev = 0;
    for (double t = 0.0; t <= 1.0; t += 0.05) {
        auto it = log.iterations_to_target(t);
        if (!it.has_value()) break;
        REQUIRE(it.value() >= prev.value());
        prev = it;
    }
}

TEST_CASE("train log csv is stable") {
    namespace fs = std::filesystem;
    TrainLog log;
    log.iters_per_epoch = 2;
    log.loss = {1.5f, 1.25f};
    log.lr = {0.01f, 0.01f};
    const fs::path p = fs::temp_directory_path() / "mapfuse_log.csv";
    write_train_log_csv(log, p);
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    REQUIRE(line == "iteration,loss,lr");
    std::getline(in, line);
    REQUIRE(line == "0,1.5,0.00999999978");
    fs::remove(p);
}
