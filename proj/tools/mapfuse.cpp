// mapfuse: synthetic map+optical fusion pipeline.
// Subcommands: gen, train, predict, eval, ablate.
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "mapfuse/dataset.hpp"
#include "mapfuse/experiments.hpp"
#include "mapfuse/inference.hpp"
#include "mapfuse/metrics.hpp"
#include "mapfuse/models.hpp"
#include "mapfuse/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GenArgs {
    std::string out;
    int scenes = 26;
    int test_scenes = 6;
    int size = 256;
    uint64_t seed = 7;
    double p_drop = 0.15;
    int jitter = 2;
    int dilate_erode = 0;
    double sparsify = 1.0;
    int optical_channels = 3;
    double noise_sigma = 0.08;
};

int run_gen(const GenArgs& a) {
    mapfuse::GenerateDatasetOptions opt;
    opt.seed = a.seed;
    opt.scenes = a.scenes;
    opt.test_scenes = a.test_scenes;
    opt.base.size = a.size;
    opt.base.optical_channels = a.optical_channels;
    opt.base.noise_sigma = static_cast<float>(a.noise_sigma);
    opt.base.degradation.p_drop = static_cast<float>(a.p_drop);
    opt.base.degradation.jitter_px = a.jitter;
    opt.base.degradation.dilate_erode_px = a.dilate_erode;
    opt.base.keep_fraction = static_cast<float>(a.sparsify);
    mapfuse::generate_dataset(a.out, opt);
    std::cout << "wrote dataset with " << a.scenes << " scenes (" << a.scenes - a.test_scenes
              << " train / " << a.test_scenes << " test) to " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string data, out, model = "segnet", encoding = "binary", config;
    std::optional<uint64_t> seed;
    std::optional<int> epochs;
};

int run_train(const TrainArgs& a) {
    mapfuse::TrainConfig cfg;
    if (!a.config.empty()) {
        std::ifstream in(a.config);
        if (!in) throw mapfuse::FormatError("cannot open config: " + a.config);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw mapfuse::FormatError("invalid JSON config: " + std::string(e.what()));
        }
        cfg = mapfuse::train_config_from_json(j);
    }
    // Command-line values win over the config file.
    if (a.seed.has_value()) cfg.seed = *a.seed;
    if (a.epochs.has_value()) cfg.epochs = *a.epochs;

    const mapfuse::ModelKind kind = mapfuse::model_kind_from_name(a.model);
    const mapfuse::Encoding enc = mapfuse::encoding_from_name(a.encoding);
    const mapfuse::Dataset dataset = mapfuse::load_dataset(a.data);
    mapfuse::TrainResult res = mapfuse::train_model(kind, dataset, cfg, enc);

    fs::create_directories(a.out);
    json metadata = {{"encoding", a.encoding},
                     {"sdt_tau", cfg.sdt_tau},
                     {"clip_fraction", cfg.clip_fraction},
                     {"dataset", a.data},
                     {"train_config", to_json(cfg)}};
    mapfuse::save_model_dir(a.out, *res.model, metadata);
    mapfuse::write_train_log_csv(res.log, fs::path(a.out) / "trainlog.csv");
    json summary = {{"model", mapfuse::model_kind_name(kind)},
                    {"encoding", a.encoding},
                    {"iters_per_epoch", res.log.iters_per_epoch},
                    {"iterations", res.log.loss.size()},
                    {"final_loss", res.log.loss.empty() ? nullptr : json(res.log.loss.back())},
                    {"epoch_val_oa", res.log.epoch_val_oa},
                    {"wall_seconds", res.log.wall_seconds},
                    {"train_config", to_json(cfg)}};
    std::ofstream out(fs::path(a.out) / "summary.json", std::ios::trunc);
    out << summary.dump(2) << "\n";
    std::cout << "trained " << mapfuse::model_kind_name(kind) << " (" << a.encoding << "), "
              << res.log.loss.size() << " iterations";
    if (auto oa = res.log.final_val_oa(); oa.has_value()) std::cout << ", final val OA " << *oa;
    std::cout << "\n";
    return 0;
}

struct PredictArgs {
    std::string model_dir, data, scene, out;
    int window = 128, stride = 64;
};

int run_predict(const PredictArgs& a) {
    mapfuse::LoadedModel loaded = mapfuse::load_model_dir(a.model_dir);
    const json& meta = loaded.descriptor.value("metadata", json::object());
    const mapfuse::Encoding enc =
        mapfuse::encoding_from_name(meta.value("encoding", std::string("binary")));

    const mapfuse::Dataset dataset = mapfuse::load_dataset(a.data);
    const mapfuse::DatasetScene* scene = nullptr;
    for (const auto& list : {&dataset.train, &dataset.test})
        for (const auto& s : *list)
            if (s.id == a.scene) scene = &s;
    if (!scene) throw mapfuse::UsageError("scene id not found in dataset: " + a.scene);

    mapfuse::TrainConfig prep;
    prep.sdt_tau = meta.value("sdt_tau", 32.0f);
    prep.clip_fraction = meta.value("clip_fraction", 0.0f);
    const mapfuse::EncodedScene es = mapfuse::encode_scene(*scene, enc, prep);

    const mapfuse::TilingPlan plan =
        mapfuse::plan_tiling(scene->labels.height, scene->labels.width, a.window, a.stride);
    const int num_classes = loaded.descriptor.at("num_classes").get<int>();
    const mapfuse::TilePrediction pred =
        mapfuse::predict_tile(*loaded.model, es.optical, es.osm, plan, num_classes);

    fs::create_directories(a.out);
    mapfuse::write_raster(pred.probabilities, fs::path(a.out) / "scores.mfr");
    mapfuse::write_labels(pred.labels, fs::path(a.out) / "labels.mfr");
    mapfuse::write_label_composite(pred.labels, fs::path(a.out) / "composite.ppm");
    std::cout << "predicted scene " << a.scene << " -> " << a.out << " (" << plan.origins.size()
              << " windows)\n";
    return 0;
}

struct EvalArgs {
    std::string pred, ref, out, classes;
    int erode = 3;
};

int run_eval(const EvalArgs& a) {
    const mapfuse::LabelMap pred = mapfuse::read_labels(a.pred);
    const mapfuse::LabelMap ref = mapfuse::read_labels(a.ref);

    std::vector<std::string> class_names;
    if (!a.classes.empty()) {
        std::stringstream ss(a.classes);
        std::string item;
        while (std::getline(ss, item, ',')) class_names.push_back(item);
    } else {
        int max_id = -1;
        for (uint8_t v : ref.values)
            if (v != mapfuse::LabelMap::kUndefined) max_id = std::max(max_id, static_cast<int>(v));
        for (uint8_t v : pred.values)
            if (v != mapfuse::LabelMap::kUndefined) max_id = std::max(max_id, static_cast<int>(v));
        const auto defaults = mapfuse::default_class_names();
        for (int i = 0; i <= max_id; ++i)
            class_names.push_back(i < static_cast<int>(defaults.size())
                                      ? defaults[static_cast<size_t>(i)]
                                      : "class" + std::to_string(i));
    }

    const mapfuse::EvalReport rep = mapfuse::evaluate(
        pred, ref, a.erode, class_names, {{"predicted", a.pred}, {"reference", a.ref}});
    std::cout << to_json(rep).dump(2) << "\n";
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        std::ofstream jout(fs::path(a.out) / "report.json", std::ios::trunc);
        jout << to_json(rep).dump(2) << "\n";
        std::ofstream tout(fs::path(a.out) / "report.txt", std::ios::trunc);
        tout << mapfuse::format_report_table(rep);
        mapfuse::write_confusion_ppm(rep.cm, fs::path(a.out) / "confusion.ppm");
    }
    return 0;
}

struct AblateArgs {
    std::string data, spec, out;
};

int run_ablate(const AblateArgs& a) {
    mapfuse::AblationSpec spec;
    if (!a.spec.empty()) {
        std::ifstream in(a.spec);
        if (!in) throw mapfuse::FormatError("cannot open spec: " + a.spec);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw mapfuse::FormatError("invalid JSON spec: " + std::string(e.what()));
        }
        spec = mapfuse::ablation_spec_from_json(j);
    }
    const mapfuse::Dataset dataset = mapfuse::load_dataset(a.data);
    const mapfuse::AblationReport report = mapfuse::run_ablation(spec, dataset);

    fs::create_directories(a.out);
    std::ofstream jout(fs::path(a.out) / "report.json", std::ios::trunc);
    jout << to_json(report).dump(2) << "\n";
    const std::string md = mapfuse::format_markdown(report, dataset.classes);
    std::ofstream mout(fs::path(a.out) / "report.md", std::ios::trunc);
    mout << md;
    std::cout << md;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mapfuse: optical + map-layer fusion for semantic labeling"};
    app.require_subcommand(1);

    int threads = 0;
    app.add_option("--threads", threads, "worker threads (default: MAPFUSE_THREADS or hardware)");

    GenArgs gen;
    auto* cgen = app.add_subcommand("gen", "generate a synthetic dataset");
    cgen->add_option("--out", gen.out, "output dataset directory")->required();
    cgen->add_option("--scenes", gen.scenes, "total scene count");
    cgen->add_option("--test-scenes", gen.test_scenes, "scenes reserved for the test split");
    cgen->add_option("--size", gen.size, "scene edge length in pixels");
    cgen->add_option("--seed", gen.seed, "dataset seed");
    cgen->add_option("--p-drop", gen.p_drop, "probability of dropping a map object");
    cgen->add_option("--jitter", gen.jitter, "map object translation jitter (px)");
    cgen->add_option("--dilate-erode", gen.dilate_erode, "map dilation (>0) or erosion (<0) px");
    cgen->add_option("--sparsify", gen.sparsify, "fraction of labels kept (1 = dense)");
    cgen->add_option("--optical-channels", gen.optical_channels, "optical channel count");
    cgen->add_option("--noise-sigma", gen.noise_sigma, "optical noise sigma");

    TrainArgs train;
    auto* ctrain = app.add_subcommand("train", "train a model on a dataset");
    ctrain->add_option("--data", train.data, "dataset directory")->required();
    ctrain->add_option("--out", train.out, "run output directory")->required();
    ctrain->add_option("--model", train.model, "segnet|osmnet|average|rescorr|fusenet");
    ctrain->add_option("--encoding", train.encoding, "binary|sdt");
    ctrain->add_option("--config", train.config, "TrainConfig JSON file");
    uint64_t seed_opt = 0;
    auto* seed_flag = ctrain->add_option("--seed", seed_opt, "seed override (wins over config)");
    int epochs_opt = 0;
    auto* epochs_flag = ctrain->add_option("--epochs", epochs_opt, "epoch override");

    PredictArgs predict;
    auto* cpredict = app.add_subcommand("predict", "tiled prediction for one scene");
    cpredict->add_option("--model-dir", predict.model_dir, "trained run directory")->required();
    cpredict->add_option("--data", predict.data, "dataset directory")->required();
    cpredict->add_option("--scene", predict.scene, "scene id (e.g. 0021)")->required();
    cpredict->add_option("--out", predict.out, "prediction output directory")->required();
    cpredict->add_option("--window", predict.window, "sliding window size");
    cpredict->add_option("--stride", predict.stride, "sliding window stride");

    EvalArgs eval;
    auto* ceval = app.add_subcommand("eval", "compare predicted and reference label maps");
    ceval->add_option("--pred", eval.pred, "predicted label map (.mfr)")->required();
    ceval->add_option("--ref", eval.ref, "reference label map (.mfr)")->required();
    ceval->add_option("--erode", eval.erode, "boundary erosion radius");
    ceval->add_option("--classes", eval.classes, "comma-separated class names");
    ceval->add_option("--out", eval.out, "optional report directory");

    AblateArgs ablate;
    auto* cablate = app.add_subcommand("ablate", "run an ablation grid");
    cablate->add_option("--data", ablate.data, "dataset directory")->required();
    cablate->add_option("--spec", ablate.spec, "AblationSpec JSON file");
    cablate->add_option("--out", ablate.out, "report output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (threads > 0) mapfuse::set_threads(threads);
        if (*cgen) return run_gen(gen);
        if (*ctrain) {
            if (*seed_flag) train.seed = seed_opt;
            if (*epochs_flag) train.epochs = epochs_opt;
            return run_train(train);
        }
        if (*cpredict) return run_predict(predict);
        if (*ceval) return run_eval(eval);
        if (*cablate) return run_ablate(ablate);
        std::cerr << "no subcommand given\n";
        return 1;
    } catch (const mapfuse::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const mapfuse::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const mapfuse::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
