#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "mapfuse/dataset.hpp"
#include "mapfuse/scenegen.hpp"
#include "oracles.hpp"

using namespace mapfuse;

namespace {

SceneSpec clean_spec(uint64_t seed, int size = 128) {
    SceneSpec spec;
    spec.seed = seed;
    spec.size = size;
    spec.degradation = {0.0f, 0, 0};
    return spec;
}

}  // namespace

TEST_CASE("scene generation is a pure function of the spec") {
    SceneSpec spec = clean_spec(42, 128);
    spec.degradation = {0.3f, 2, 1};
    Scene a = generate_scene(spec);
    Scene b = generate_scene(spec);
    REQUIRE(a.optical.data == b.optical.data);
    REQUIRE(a.labels.values == b.labels.values);
    for (int li = 0; li < 4; ++li)
        REQUIRE(a.layers.masks[static_cast<size_t>(li)] == b.layers.masks[static_cast<size_t>(li)]);
}

TEST_CASE("without degradation the building layer equals the building labels") {
    Scene s = generate_scene(clean_spec(7, 192));
    const auto& building_layer = s.layers.masks[1];
    for (size_t i = 0; i < building_layer.size(); ++i) {
        REQUIRE((building_layer[i] != 0) == (s.labels.values[i] == kBuilding));
    }
}

TEST_CASE("p_drop=1 empties every layer") {
    SceneSpec spec = clean_spec(3, 128);
    spec.degradation = {1.0f, 0, 0};
    Scene s = generate_scene(spec);
    for (const auto& mask : s.layers.masks)
        for (uint8_t v : mask) REQUIRE(v == 0);
}

TEST_CASE("object counts in the building mask match the placement stats") {
    SceneSpec spec = clean_spec(11, 256);
    spec.buildings = {4, 4};
    Scene s = generate_scene(spec);
    REQUIRE(s.stats.requested.at("buildings") == 4);
    // Buildings are placed with 1px separation, so connected components
    // count them exactly when placement succeeded.
    auto comps = detail::connected_components(s.layers.masks[1], 256, 256);
    CHECK(static_cast<int>(comps.size()) == s.stats.placed.at("buildings"));
    CHECK(s.stats.placed.at("buildings") == 4);
}

TEST_CASE("degrade_layers with nil parameters is the identity") {
    Scene s = generate_scene(clean_spec(5, 128));
    MapLayerSet d = degrade_layers(s.layers, 0.0f, 0, 0, 123);
    for (int li = 0; li < 4; ++li)
        REQUIRE(d.masks[static_cast<size_t>(li)] == s.layers.masks[static_cast<size_t>(li)]);
}

TEST_CASE("degrade_layers drops about half the objects at p_drop=0.5") {
    // A grid of isolated dots: 200 objects in one layer.
    MapLayerSet layers;
    layers.layer_names = {"dots"};
    layers.height = 100;
    layers.width = 80;
    layers.masks.assign(1, std::vector<uint8_t>(8000, 0));
    int total = 0;
    for (int y = 2; y < 100 && total < 200; y += 5)
        for (int x = 2; x < 80 && total < 200; x += 4) {
            layers.masks[0][static_cast<size_t>(y) * 80 + x] = 1;
            ++total;
        }
    REQUIRE(total == 200);
    double kept_sum = 0;
    const int n_seeds = 10;
    for (int seed = 0; seed < n_seeds; ++seed) {
        MapLayerSet d = degrade_layers(layers, 0.5f, 0, 0, static_cast<uint64_t>(seed) + 1);
        int kept = 0;
        for (uint8_t v : d.masks[0]) kept += v;
        kept_sum += static_cast<double>(kept) / total;
    }
    const double kept_avg = kept_sum / n_seeds;
    CHECK(kept_avg > 0.4);
    CHECK(kept_avg < 0.6);
}

TEST_CASE("degraded layers never invent pixels far from a source object") {
    SceneSpec spec = clean_spec(21, 160);
    Scene s = generate_scene(spec);
    const int jitter = 3, dilate = 2;
    MapLayerSet d = degrade_layers(s.layers, 0.2f, jitter, dilate, 99);
    // Jitter draws from the [-j,j]^2 square, so its Euclidean reach is j*sqrt(2).
    const double bound = jitter * std::sqrt(2.0) + dilate;
    for (int li = 0; li < 4; ++li) {
        const auto& orig = s.layers.masks[static_cast<size_t>(li)];
        const auto& got = d.masks[static_cast<size_t>(li)];
        // Distance from every degraded pixel to the original mask.
        auto dist = detail::edt_squared(orig, 160, 160);
        for (size_t i = 0; i < got.size(); ++i) {
            if (got[i]) REQUIRE(dist[i] <= bound * bound + 1e-9);
        }
    }
}

TEST_CASE("sparsify keeps roughly the requested fraction with original values") {
    Scene s = generate_scene(clean_spec(13, 256));
    LabelMap sparse = sparsify_labels(s.labels, 0.3f, 77);
    int64_t kept = 0;
    for (size_t i = 0; i < sparse.values.size(); ++i) {
        if (sparse.values[i] != LabelMap::kUndefined) {
            ++kept;
            REQUIRE(sparse.values[i] == s.labels.values[i]);
        }
    }
    const double fraction = static_cast<double>(kept) / static_cast<double>(sparse.size());
    CHECK(fraction > 0.25);
    CHECK(fraction < 0.35);

    SECTION("keep_fraction 1 is the identity") {
        LabelMap same = sparsify_labels(s.labels, 1.0f, 77);
        REQUIRE(same.values == s.labels.values);
    }
}

TEST_CASE("every default class appears in nearly all dense 256px scenes") {
    int scenes_with_all = 0;
    const int n = 20;
    for (int i = 0; i < n; ++i) {
        Scene s = generate_scene(clean_spec(1000 + static_cast<uint64_t>(i) * 17, 256));
        std::vector<bool> seen(6, false);
        for (uint8_t v : s.labels.values)
            if (v < 6) seen[v] = true;
        bool all = true;
        for (int c = 0; c < 6; ++c) all = all && seen[static_cast<size_t>(c)];
        scenes_with_all += all ? 1 : 0;
    }
    CHECK(scenes_with_all >= 18);  // >= 90%
}

TEST_CASE("dataset directories round-trip through the manifest format") {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "mapfuse_ds_test";
    fs::remove_all(root);
    GenerateDatasetOptions opt;
    opt.seed = 5;
    opt.scenes = 3;
    opt.test_scenes = 1;
    opt.base = clean_spec(0, 64);
    generate_dataset(root, opt);

    REQUIRE(fs::exists(root / "dataset.json"));
    REQUIRE(fs::exists(root / "scenes" / "0000" / "manifest.json"));
    Dataset ds = load_dataset(root);
    REQUIRE(ds.train.size() == 2);
    REQUIRE(ds.test.size() == 1);
    REQUIRE(ds.classes == default_class_names());
    REQUIRE(ds.layer_names == MapLayerSet::default_layer_names());
    CHECK(ds.train[0].optical.channels == 3);
    CHECK(ds.train[0].optical.height == 64);
    CHECK(ds.train[0].labels.height == 64);
    CHECK(ds.train[0].layers.masks.size() == 4);

    // Regenerating produces identical scene payloads.
    const fs::path root2 = fs::temp_directory_path() / "mapfuse_ds_test2";
    fs::remove_all(root2);
    generate_dataset(root2, opt);
    Dataset ds2 = load_dataset(root2);
    REQUIRE(ds2.train[0].optical.data == ds.train[0].optical.data);
    REQUIRE(ds2.test[0].labels.values == ds.test[0].labels.values);
    fs::remove_all(root);
    fs::remove_all(root2);
}
