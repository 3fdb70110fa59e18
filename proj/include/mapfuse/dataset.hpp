#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mapfuse/raster.hpp"
#include "mapfuse/scenegen.hpp"

namespace mapfuse {

inline constexpr const char* kMapfuseVersion = "0.1.0";

struct DatasetScene {
    std::string id;
    uint64_t seed = 0;
    MultiChannelRaster optical;
    MapLayerSet layers;
    LabelMap labels;
};

struct Dataset {
    std::vector<std::string> classes;
    std::vector<std::string> layer_names;
    std::vector<DatasetScene> train, test;
    nlohmann::json generator;  // echo of the generation parameters

    int num_classes() const { return static_cast<int>(classes.size()); }
};

namespace detail {

inline nlohmann::json load_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("invalid JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace detail

// Scene directory layout: optical.mfr, layer_<name>.mfr, labels.mfr,
// manifest.json with relative paths, the seed and the class table.
inline void write_scene_dir(const std::filesystem::path& dir, const std::string& id,
                            const Scene& scene) {
    std::filesystem::create_directories(dir);
    write_raster(scene.optical, dir / "optical.mfr");
    write_labels(scene.labels, dir / "labels.mfr");
    nlohmann::json layers_json = nlohmann::json::object();
    for (int li = 0; li < scene.layers.layer_count(); ++li) {
        const std::string& name = scene.layers.layer_names[static_cast<size_t>(li)];
        const std::string file = "layer_" + name + ".mfr";
        write_mask(scene.layers.masks[static_cast<size_t>(li)], scene.layers.height,
                   scene.layers.width, dir / file);
        layers_json[name] = file;
    }
    nlohmann::json manifest = {
        {"id", id},
        {"seed", scene.spec.seed},
        {"optical", "optical.mfr"},
        {"labels", "labels.mfr"},
        {"layers", layers_json},
        {"classes", scene.spec.classes},
        {"objects", {{"requested", scene.stats.requested}, {"placed", scene.stats.placed}}},
    };
    detail::write_json_file(dir / "manifest.json", manifest);
}

inline DatasetScene load_scene_dir(const std::filesystem::path& dir,
                                   const std::vector<std::string>& layer_order) {
    const nlohmann::json manifest = detail::load_json_file(dir / "manifest.json");
    DatasetScene s;
    s.id = manifest.at("id").get<std::string>();
    s.seed = manifest.value("seed", uint64_t{0});
    s.optical = read_raster(dir / manifest.at("optical").get<std::string>());
    s.labels = read_labels(dir / manifest.at("labels").get<std::string>());
    s.layers.layer_names = layer_order;
    s.layers.height = s.labels.height;
    s.layers.width = s.labels.width;
    const auto& layers_json = manifest.at("layers");
    for (const auto& name : layer_order) {
        int h = 0, w = 0;
        auto mask = read_mask(dir / layers_json.at(name).get<std::string>(), h, w);
        if (h != s.layers.height || w != s.layers.width)
            throw FormatError("layer grid mismatch in " + dir.string());
        s.layers.masks.push_back(std::move(mask));
    }
    return s;
}

struct DatasetWriteSpec {
    std::vector<std::string> classes;
    std::vector<std::string> layer_names;
    std::vector<std::string> train_ids, test_ids;
    nlohmann::json generator;
};

inline void write_dataset_index(const std::filesystem::path& root, const DatasetWriteSpec& spec) {
    nlohmann::json j = {
        {"version", kMapfuseVersion}, {"classes", spec.classes},
        {"layer_names", spec.layer_names}, {"train", spec.train_ids},
        {"test", spec.test_ids},       {"generator", spec.generator},
    };
    detail::write_json_file(root / "dataset.json", j);
}

inline Dataset load_dataset(const std::filesystem::path& root) {
    const nlohmann::json j = detail::load_json_file(root / "dataset.json");
    Dataset ds;
    ds.classes = j.at("classes").get<std::vector<std::string>>();
    ds.layer_names = j.at("layer_names").get<std::vector<std::string>>();
    ds.generator = j.value("generator", nlohmann::json::object());
    for (const auto& id : j.at("train").get<std::vector<std::string>>())
        ds.train.push_back(load_scene_dir(root / "scenes" / id, ds.layer_names));
    for (const auto& id : j.at("test").get<std::vector<std::string>>())
        ds.test.push_back(load_scene_dir(root / "scenes" / id, ds.layer_names));
    return ds;
}

// Generates and writes a complete synthetic dataset; scene i derives its seed
// from stream i of the dataset seed, so any subset is reproducible.
struct GenerateDatasetOptions {
    uint64_t seed = 7;
    int scenes = 26;
    int test_scenes = 6;
    SceneSpec base;  // size, counts, degradation, sparsity
};

inline void generate_dataset(const std::filesystem::path& root, const GenerateDatasetOptions& opt) {
    if (opt.scenes < 2 || opt.test_scenes < 1 || opt.test_scenes >= opt.scenes)
        throw UsageError("generate_dataset: need at least one train and one test scene");
    std::filesystem::create_directories(root / "scenes");
    DatasetWriteSpec index;
    index.classes = opt.base.classes;
    index.layer_names = MapLayerSet::default_layer_names();
    Rng seeder(opt.seed);
    for (int i = 0; i < opt.scenes; ++i) {
        SceneSpec spec = opt.base;
        spec.seed = seeder.child(static_cast<uint64_t>(i)).next_u64();
        const Scene scene = generate_scene(spec);
        char id[16];
        std::snprintf(id, sizeof(id), "%04d", i);
        write_scene_dir(root / "scenes" / id, id, scene);
        if (i < opt.scenes - opt.test_scenes)
            index.train_ids.push_back(id);
        else
            index.test_ids.push_back(id);
    }
    index.generator = {
        {"version", kMapfuseVersion},
        {"seed", opt.seed},
        {"scenes", opt.scenes},
        {"test_scenes", opt.test_scenes},
        {"size", opt.base.size},
        {"optical_channels", opt.base.optical_channels},
        {"noise_sigma", opt.base.noise_sigma},
        {"p_drop", opt.base.degradation.p_drop},
        {"jitter_px", opt.base.degradation.jitter_px},
        {"dilate_erode_px", opt.base.degradation.dilate_erode_px},
        {"keep_fraction", opt.base.keep_fraction},
    };
    write_dataset_index(root, index);
}

}  // namespace mapfuse
