#pragma once

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mapfuse/dataset.hpp"
#include "mapfuse/inference.hpp"
#include "mapfuse/metrics.hpp"
#include "mapfuse/models.hpp"
#include "mapfuse/optim.hpp"

namespace mapfuse {

struct TrainConfig {
    int patch_size = 128;
    int batch_size = 10;
    std::string optimizer = "sgd";  // sgd | adam
    float base_lr = 0.01f;
    int lr_decay_every = 2;         // epochs between /10 steps (sgd mode)
    float lr_decay_factor = 10.0f;
    int epochs = 8;
    float min_annotated_fraction = 0.0f;  // patch rejection threshold
    bool augment = true;
    uint64_t seed = 1;
    float encoder_lr_ratio = 0.5f;
    // Architecture and preprocessing knobs carried through a run.
    std::vector<int> widths = {16, 32, 64};
    int decoder_trunc = 0;
    bool use_batchnorm = true;
    float clip_fraction = 0.0f;  // percentile clipping of optical input; 0 disables
    float sdt_tau = 32.0f;
};

inline void validate(const TrainConfig& cfg) {
    const int div = 1 << cfg.widths.size();
    if (cfg.patch_size % div != 0)
        throw UsageError("patch_size must be divisible by 2^blocks = " + std::to_string(div));
    if (cfg.min_annotated_fraction < 0.0f || cfg.min_annotated_fraction > 1.0f)
        throw UsageError("min_annotated_fraction must be in [0,1]");
    if (cfg.batch_size < 1 || cfg.epochs < 1) throw UsageError("batch_size and epochs must be >= 1");
    if (cfg.optimizer != "sgd" && cfg.optimizer != "adam")
        throw UsageError("optimizer must be sgd or adam");
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"patch_size", c.patch_size},
            {"batch_size", c.batch_size},
            {"optimizer", c.optimizer},
            {"base_lr", c.base_lr},
            {"lr_decay_every", c.lr_decay_every},
            {"lr_decay_factor", c.lr_decay_factor},
            {"epochs", c.epochs},
            {"min_annotated_fraction", c.min_annotated_fraction},
            {"augment", c.augment},
            {"seed", c.seed},
            {"encoder_lr_ratio", c.encoder_lr_ratio},
            {"widths", c.widths},
            {"decoder_trunc", c.decoder_trunc},
            {"use_batchnorm", c.use_batchnorm},
            {"clip_fraction", c.clip_fraction},
            {"sdt_tau", c.sdt_tau}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.patch_size = j.value("patch_size", c.patch_size);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.optimizer = j.value("optimizer", c.optimizer);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
    c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
    c.epochs = j.value("epochs", c.epochs);
    c.min_annotated_fraction = j.value("min_annotated_fraction", c.min_annotated_fraction);
    c.augment = j.value("augment", c.augment);
    c.seed = j.value("seed", c.seed);
    c.encoder_lr_ratio = j.value("encoder_lr_ratio", c.encoder_lr_ratio);
    c.widths = j.value("widths", c.widths);
    c.decoder_trunc = j.value("decoder_trunc", c.decoder_trunc);
    c.use_batchnorm = j.value("use_batchnorm", c.use_batchnorm);
    c.clip_fraction = j.value("clip_fraction", c.clip_fraction);
    c.sdt_tau = j.value("sdt_tau", c.sdt_tau);
    return c;
}

// Step schedule: SGD divides the base rate by lr_decay_factor every
// lr_decay_every epochs; Adam runs at a constant rate.
inline float lr_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw UsageError("lr_at: epoch must be >= 0");
    if (cfg.optimizer == "adam") return cfg.base_lr;
    const int steps = cfg.lr_decay_every > 0 ? epoch / cfg.lr_decay_every : 0;
    return cfg.base_lr / static_cast<float>(std::pow(cfg.lr_decay_factor, steps));
}

// A scene with its network-ready input rasters.
struct EncodedScene {
    MultiChannelRaster optical;  // clipped when the recipe asks for it
    MultiChannelRaster osm;      // encoded map layers
    const LabelMap* labels = nullptr;
};

inline EncodedScene encode_scene(const DatasetScene& scene, Encoding enc, const TrainConfig& cfg) {
    EncodedScene out;
    out.optical = cfg.clip_fraction > 0.0f ? clip_high_percentile(scene.optical, cfg.clip_fraction)
                                           : scene.optical;
    MapLayerSet layers = scene.layers;
    layers.encoding = enc;
    out.osm = encode_layers(layers, cfg.sdt_tau);
    out.labels = &scene.labels;
    return out;
}

struct Patch {
    MultiChannelRaster optical, osm;
    LabelMap labels;
    int y0 = 0, x0 = 0;
};

namespace detail {

inline void crop_raster(const MultiChannelRaster& src, int y0, int x0, int size,
                        MultiChannelRaster& dst) {
    dst = MultiChannelRaster(src.channels, size, size);
    for (int c = 0; c < src.channels; ++c) {
        const float* sp = src.channel(c);
        float* dp = dst.channel(c);
        for (int y = 0; y < size; ++y)
            std::copy(sp + static_cast<int64_t>(y0 + y) * src.width + x0,
                      sp + static_cast<int64_t>(y0 + y) * src.width + x0 + size,
                      dp + static_cast<int64_t>(y) * size);
    }
}

}  // namespace detail

// Uniformly random congruent crop of all three modalities, rejection-sampled
// until the labeled fraction reaches the threshold (at most 100 attempts).
inline Patch sample_patch(const EncodedScene& scene, int patch_size, float min_annotated_fraction,
                          Rng& rng) {
    const int h = scene.labels->height, w = scene.labels->width;
    if (patch_size > h || patch_size > w)
        throw SamplingError("patch size " + std::to_string(patch_size) + " exceeds scene " +
                            std::to_string(h) + "x" + std::to_string(w));
    const int64_t area = static_cast<int64_t>(patch_size) * patch_size;
    for (int attempt = 0; attempt < 100; ++attempt) {
        const int y0 = static_cast<int>(rng.uniform_int(0, h - patch_size));
        const int x0 = static_cast<int>(rng.uniform_int(0, w - patch_size));
        int64_t annotated = 0;
        for (int y = 0; y < patch_size; ++y) {
            const uint8_t* row = scene.labels->values.data() +
                                 static_cast<int64_t>(y0 + y) * w + x0;
            for (int x = 0; x < patch_size; ++x)
                if (row[x] != LabelMap::kUndefined) ++annotated;
        }
        if (static_cast<double>(annotated) <
            static_cast<double>(min_annotated_fraction) * static_cast<double>(area))
            continue;
        Patch patch;
        patch.y0 = y0;
        patch.x0 = x0;
        detail::crop_raster(scene.optical, y0, x0, patch_size, patch.optical);
        detail::crop_raster(scene.osm, y0, x0, patch_size, patch.osm);
        patch.labels = LabelMap(patch_size, patch_size);
        for (int y = 0; y < patch_size; ++y)
            std::copy(scene.labels->values.data() + static_cast<int64_t>(y0 + y) * w + x0,
                      scene.labels->values.data() + static_cast<int64_t>(y0 + y) * w + x0 + patch_size,
                      patch.labels.values.data() + static_cast<int64_t>(y) * patch_size);
        return patch;
    }
    throw SamplingError("no patch with >= " + std::to_string(min_annotated_fraction * 100.0f) +
                        "% annotated pixels found in 100 attempts");
}

inline void flip_raster(MultiChannelRaster& r, bool horizontal, bool vertical) {
    if (!horizontal && !vertical) return;
    MultiChannelRaster out(r.channels, r.height, r.width);
    for (int c = 0; c < r.channels; ++c)
        for (int y = 0; y < r.height; ++y)
            for (int x = 0; x < r.width; ++x)
                out.at(c, y, x) = r.at(c, vertical ? r.height - 1 - y : y,
                                       horizontal ? r.width - 1 - x : x);
    r = std::move(out);
}

inline void flip_labels(LabelMap& m, bool horizontal, bool vertical) {
    if (!horizontal && !vertical) return;
    LabelMap out(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            out.at(y, x) = m.at(vertical ? m.height - 1 - y : y, horizontal ? m.width - 1 - x : x);
    m = std::move(out);
}

// One of {none, horizontal flip, vertical flip, both}, drawn uniformly and
// applied congruently to every modality of the sample.
inline void augment_patch(Patch& patch, Rng& rng) {
    const int choice = static_cast<int>(rng.uniform_int(0, 3));
    const bool horizontal = (choice & 1) != 0;
    const bool vertical = (choice & 2) != 0;
    flip_raster(patch.optical, horizontal, vertical);
    flip_raster(patch.osm, horizontal, vertical);
    flip_labels(patch.labels, horizontal, vertical);
}

struct TrainLog {
    std::vector<float> loss, lr;       // per iteration
    std::vector<double> epoch_val_oa;  // per epoch (validation on the test split)
    int iters_per_epoch = 0;
    double wall_seconds = 0.0;

    // Cumulative iterations consumed up to the end of the first epoch whose
    // validation OA reaches the target; monotone in the target.
    std::optional<int64_t> iterations_to_target(double target_oa) const {
        for (size_t e = 0; e < epoch_val_oa.size(); ++e)
            if (epoch_val_oa[e] >= target_oa)
                return static_cast<int64_t>(e + 1) * iters_per_epoch;
        return std::nullopt;
    }

    std::optional<double> final_val_oa() const {
        if (epoch_val_oa.empty()) return std::nullopt;
        return epoch_val_oa.back();
    }
};

inline void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << "iteration,loss,lr\n";
    char buf[96];
    for (size_t i = 0; i < log.loss.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g\n", i, static_cast<double>(log.loss[i]),
                      static_cast<double>(log.lr[i]));
        out << buf;
    }
}

struct TrainResult {
    std::unique_ptr<Model> model;
    TrainLog log;
};

// Overall accuracy of tiled predictions over the given scenes, against
// boundary-eroded references. Stride equals the window (no overlap); the
// final evaluation protocol with 50% overlap lives in the experiments layer.
inline double validation_oa(Model& model, const std::vector<EncodedScene>& scenes, int num_classes,
                            int window, int erode_radius = 3) {
    ConfusionMatrix cm(static_cast<size_t>(num_classes));
    for (const auto& scene : scenes) {
        const TilingPlan plan =
            plan_tiling(scene.labels->height, scene.labels->width, window, window);
        const TilePrediction pred =
            predict_tile(model, scene.optical, scene.osm, plan, num_classes);
        const LabelMap ref = erode_radius > 0 ? erode_labels(*scene.labels, erode_radius)
                                              : *scene.labels;
        accumulate(cm, pred.labels, ref);
    }
    const uint64_t total = cm.total();
    return total == 0 ? 0.0 : static_cast<double>(cm.trace()) / static_cast<double>(total);
}

// End-to-end recipe: random congruent patches, optional flip augmentation,
// masked cross-entropy, SGD with the step schedule or Adam, encoder at half
// rate. Deterministic in cfg.seed. Emits the per-iteration loss curve and
// per-epoch validation OA.
inline TrainResult train_model(ModelKind kind, const Dataset& dataset, const TrainConfig& cfg,
                               Encoding encoding) {
    validate(cfg);
    if (dataset.train.empty()) throw UsageError("train_model: dataset has no train split");
    const auto t_start = std::chrono::steady_clock::now();

    const int num_classes = dataset.num_classes();
    const int map_channels = static_cast<int>(dataset.layer_names.size());
    const int optical_channels = dataset.train.front().optical.channels;

    std::vector<EncodedScene> train_scenes, test_scenes;
    for (const auto& s : dataset.train) train_scenes.push_back(encode_scene(s, encoding, cfg));
    for (const auto& s : dataset.test) test_scenes.push_back(encode_scene(s, encoding, cfg));

    int64_t labeled = 0;
    for (const auto& s : dataset.train)
        for (uint8_t v : s.labels.values)
            if (v != LabelMap::kUndefined) ++labeled;
    const int64_t patch_area = static_cast<int64_t>(cfg.patch_size) * cfg.patch_size;
    const int iters_per_epoch = static_cast<int>(
        std::max<int64_t>(1, (labeled + patch_area * cfg.batch_size - 1) /
                                 (patch_area * cfg.batch_size)));

    ModelOptions mopt;
    mopt.widths = cfg.widths;
    mopt.decoder_trunc = cfg.decoder_trunc;
    mopt.use_batchnorm = cfg.use_batchnorm;
    mopt.init_seed = Rng(cfg.seed).child(102).next_u64();
    auto model = make_model(kind, optical_channels, map_channels, num_classes, mopt);

    std::unique_ptr<Optimizer> opt;
    if (cfg.optimizer == "adam")
        opt = std::make_unique<AdamOptimizer>();
    else
        opt = std::make_unique<SgdOptimizer>();
    for (auto& p : model->parameters()) {
        const bool is_encoder = p.name.find("encoder") != std::string::npos;
        opt->add(p.tensor, is_encoder ? cfg.encoder_lr_ratio : 1.0f);
    }

    Rng rng = Rng(cfg.seed).child(101);
    TrainLog log;
    log.iters_per_epoch = iters_per_epoch;

    const int p = cfg.patch_size;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const float lr = lr_at(epoch, cfg);
        for (int iter = 0; iter < iters_per_epoch; ++iter) {
            Tensor opt_batch = Tensor::zeros({cfg.batch_size, optical_channels, p, p});
            Tensor osm_batch = Tensor::zeros({cfg.batch_size, map_channels, p, p});
            LabelBatch labels{cfg.batch_size, p, p,
                              std::vector<uint8_t>(static_cast<size_t>(cfg.batch_size) * p * p)};
            for (int b = 0; b < cfg.batch_size; ++b) {
                const auto& scene =
                    train_scenes[static_cast<size_t>(rng.uniform_int(
                        0, static_cast<int64_t>(train_scenes.size()) - 1))];
                Patch patch = sample_patch(scene, p, cfg.min_annotated_fraction, rng);
                if (cfg.augment) augment_patch(patch, rng);
                std::copy(patch.optical.data.begin(), patch.optical.data.end(),
                          opt_batch.data() + static_cast<int64_t>(b) * optical_channels * p * p);
                std::copy(patch.osm.data.begin(), patch.osm.data.end(),
                          osm_batch.data() + static_cast<int64_t>(b) * map_channels * p * p);
                std::copy(patch.labels.values.begin(), patch.labels.values.end(),
                          labels.ids.begin() + static_cast<int64_t>(b) * p * p);
            }

            Tensor scores = model->forward(opt_batch, osm_batch, true);
            if (scores.dim(2) != p || scores.dim(3) != p) scores = bilinear_resize(scores, p, p);
            Tensor loss = masked_softmax_cross_entropy(scores, labels);
            const float loss_value = loss.item();
            if (!std::isfinite(loss_value))
                throw NumericError("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch) + " iteration " + std::to_string(iter));
            loss.backward();
            opt->step(lr);
            opt->zero_grad();
            log.loss.push_back(loss_value);
            log.lr.push_back(lr);
        }
        if (!test_scenes.empty())
            log.epoch_val_oa.push_back(
                validation_oa(*model, test_scenes, num_classes, cfg.patch_size));
    }

    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return {std::move(model), std::move(log)};
}

}  // namespace mapfuse
