#pragma once

#include <json.hpp>

#include <algorithm>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mapfuse/metrics.hpp"
#include "mapfuse/training.hpp"

namespace mapfuse {

// One training+evaluation grid: models x encodings x seeds under a shared
// TrainConfig, scored on the test split with boundary erosion.
struct AblationSpec {
    std::vector<ModelKind> models = {ModelKind::SegNetOnly, ModelKind::FuseNet};
    std::vector<Encoding> encodings = {Encoding::Binary};
    std::vector<uint64_t> seeds = {1, 2, 3};
    TrainConfig train;
    int erode_radius = 3;
    int eval_window = 128;
    int eval_stride = 64;
    // The single-stream baseline for the convergence comparison.
    ModelKind convergence_baseline = ModelKind::SegNetOnly;
};

inline nlohmann::json to_json(const AblationSpec& s) {
    std::vector<std::string> models, encodings;
    for (auto m : s.models) models.push_back(model_kind_name(m));
    for (auto e : s.encodings) encodings.push_back(encoding_name(e));
    return {{"models", models},
            {"encodings", encodings},
            {"seeds", s.seeds},
            {"train", to_json(s.train)},
            {"erode_radius", s.erode_radius},
            {"eval_window", s.eval_window},
            {"eval_stride", s.eval_stride},
            {"convergence_baseline", model_kind_name(s.convergence_baseline)}};
}

inline AblationSpec ablation_spec_from_json(const nlohmann::json& j) {
    AblationSpec s;
    if (j.contains("models")) {
        s.models.clear();
        for (const auto& m : j.at("models")) s.models.push_back(model_kind_from_name(m));
    }
    if (j.contains("encodings")) {
        s.encodings.clear();
        for (const auto& e : j.at("encodings")) s.encodings.push_back(encoding_from_name(e));
    }
    if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    if (j.contains("train")) s.train = train_config_from_json(j.at("train"));
    s.erode_radius = j.value("erode_radius", 3);
    s.eval_window = j.value("eval_window", 128);
    s.eval_stride = j.value("eval_stride", 64);
    if (j.contains("convergence_baseline"))
        s.convergence_baseline = model_kind_from_name(j.at("convergence_baseline"));
    if (s.models.empty() || s.seeds.empty())
        throw UsageError("ablation spec needs at least one model and one seed");
    return s;
}

struct AblationCell {
    ModelKind model = ModelKind::SegNetOnly;
    std::string encoding;  // "binary", "sdt", or "none" for map-free models
    uint64_t seed = 0;
    std::string status;  // ok | diverged
    std::string error;
    EvalReport report;
    TrainLog log;
};

// iterations_to_target(fused) / iterations_to_target(single); empty when the
// fused run never reaches the target.
inline std::optional<double> convergence_ratio(const TrainLog& fused, const TrainLog& single,
                                               double target_oa) {
    const auto fi = fused.iterations_to_target(target_oa);
    const auto si = single.iterations_to_target(target_oa);
    if (!fi.has_value() || !si.has_value() || *si == 0) return std::nullopt;
    return static_cast<double>(*fi) / static_cast<double>(*si);
}

struct ConvergenceEntry {
    std::string fused_model;
    uint64_t seed = 0;
    double target_oa = 0.0;
    std::string status;  // ok | unreachable | missing
    std::optional<double> ratio;
    std::optional<int64_t> fused_iterations, single_iterations;
};

struct AblationReport {
    nlohmann::json spec;
    std::vector<AblationCell> cells;
    std::vector<ConvergenceEntry> convergence;
    double wall_seconds = 0.0;
};

namespace detail {

inline bool model_uses_map(ModelKind m) { return m != ModelKind::SegNetOnly; }

inline std::optional<double> median(std::vector<double> v) {
    if (v.empty()) return std::nullopt;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Evaluates a trained model over the dataset's test split with the paper-style
// overlapped sliding window, aggregating one confusion matrix.
inline EvalReport evaluate_on_test_split(Model& model, const Dataset& dataset, Encoding encoding,
                                         const TrainConfig& cfg, int erode_radius, int window,
                                         int stride, nlohmann::json metadata) {
    ConfusionMatrix cm(static_cast<size_t>(dataset.num_classes()));
    for (const auto& scene : dataset.test) {
        EncodedScene enc = encode_scene(scene, encoding, cfg);
        const TilingPlan plan = plan_tiling(scene.labels.height, scene.labels.width, window, stride);
        const TilePrediction pred =
            predict_tile(model, enc.optical, enc.osm, plan, dataset.num_classes());
        const LabelMap ref =
            erode_radius > 0 ? erode_labels(scene.labels, erode_radius) : scene.labels;
        accumulate(cm, pred.labels, ref);
    }
    return report_from_confusion(std::move(cm), dataset.classes, erode_radius > 0, erode_radius,
                                 std::move(metadata));
}

// Trains and scores every requested (model, encoding, seed) cell, then builds
// the convergence comparison of each fused kind against the single-stream
// baseline at the baseline's own final validation OA. Divergence marks the
// cell and the run continues.
inline AblationReport run_ablation(const AblationSpec& spec, const Dataset& dataset) {
    const auto t0 = std::chrono::steady_clock::now();
    AblationReport report;
    report.spec = to_json(spec);

    for (ModelKind model : spec.models) {
        const bool uses_map = detail::model_uses_map(model);
        std::vector<Encoding> encodings = uses_map ? spec.encodings
                                                   : std::vector<Encoding>{Encoding::Binary};
        for (Encoding enc : encodings) {
            for (uint64_t seed : spec.seeds) {
                AblationCell cell;
                cell.model = model;
                cell.encoding = uses_map ? encoding_name(enc) : "none";
                cell.seed = seed;
                TrainConfig cfg = spec.train;
                cfg.seed = seed;
                try {
                    TrainResult res = train_model(model, dataset, cfg, enc);
                    cell.log = std::move(res.log);
                    cell.report = evaluate_on_test_split(
                        *res.model, dataset, enc, cfg, spec.erode_radius, spec.eval_window,
                        spec.eval_stride,
                        {{"model", model_kind_name(model)},
                         {"encoding", cell.encoding},
                         {"seed", seed}});
                    cell.status = "ok";
                } catch (const NumericError& e) {
                    cell.status = "diverged";
                    cell.error = e.what();
                }
                report.cells.push_back(std::move(cell));
            }
        }
    }

    // Convergence: fused kinds against the single-stream baseline, per seed.
    auto find_cell = [&](ModelKind m, uint64_t seed) -> const AblationCell* {
        const std::string preferred = detail::model_uses_map(m)
                                          ? encoding_name(spec.encodings.empty()
                                                              ? Encoding::Binary
                                                              : spec.encodings.front())
                                          : "none";
        for (const auto& c : report.cells)
            if (c.model == m && c.seed == seed && c.encoding == preferred) return &c;
        return nullptr;
    };
    const bool have_baseline =
        std::find(spec.models.begin(), spec.models.end(), spec.convergence_baseline) !=
        spec.models.end();
    for (ModelKind fused :
         {ModelKind::Average, ModelKind::ResidualCorrection, ModelKind::FuseNet}) {
        if (std::find(spec.models.begin(), spec.models.end(), fused) == spec.models.end()) continue;
        if (!have_baseline) continue;
        for (uint64_t seed : spec.seeds) {
            ConvergenceEntry entry;
            entry.fused_model = model_kind_name(fused);
            entry.seed = seed;
            const AblationCell* single = find_cell(spec.convergence_baseline, seed);
            const AblationCell* fused_cell = find_cell(fused, seed);
            if (!single || !fused_cell || single->status != "ok" || fused_cell->status != "ok" ||
                !single->log.final_val_oa().has_value()) {
                entry.status = "missing";
                report.convergence.push_back(std::move(entry));
                continue;
            }
            entry.target_oa = *single->log.final_val_oa();
            entry.single_iterations = single->log.iterations_to_target(entry.target_oa);
            entry.fused_iterations = fused_cell->log.iterations_to_target(entry.target_oa);
            entry.ratio = convergence_ratio(fused_cell->log, single->log, entry.target_oa);
            entry.status = entry.ratio.has_value() ? "ok" : "unreachable";
            report.convergence.push_back(std::move(entry));
        }
    }

    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

inline nlohmann::json to_json(const AblationReport& r) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : r.cells) {
        nlohmann::json jc = {{"model", model_kind_name(c.model)},
                             {"encoding", c.encoding},
                             {"seed", c.seed},
                             {"status", c.status}};
        if (!c.error.empty()) jc["error"] = c.error;
        if (c.status == "ok") {
            jc["report"] = to_json(c.report);
            jc["train"] = {{"iters_per_epoch", c.log.iters_per_epoch},
                           {"epoch_val_oa", c.log.epoch_val_oa},
                           {"final_loss", c.log.loss.empty() ? nullptr
                                                             : nlohmann::json(c.log.loss.back())},
                           {"wall_seconds", c.log.wall_seconds}};
        }
        cells.push_back(std::move(jc));
    }
    nlohmann::json conv = nlohmann::json::array();
    for (const auto& e : r.convergence) {
        nlohmann::json je = {{"fused_model", e.fused_model},
                             {"seed", e.seed},
                             {"target_oa", e.target_oa},
                             {"status", e.status}};
        je["ratio"] = e.ratio.has_value() ? nlohmann::json(*e.ratio) : nullptr;
        je["fused_iterations"] =
            e.fused_iterations.has_value() ? nlohmann::json(*e.fused_iterations) : nullptr;
        je["single_iterations"] =
            e.single_iterations.has_value() ? nlohmann::json(*e.single_iterations) : nullptr;
        conv.push_back(std::move(je));
    }
    return {{"spec", r.spec},
            {"cells", cells},
            {"convergence", conv},
            {"wall_seconds", r.wall_seconds}};
}

// Median OA per (model, encoding) row across seeds; empty for rows whose
// cells all failed.
inline std::optional<double> median_oa(const AblationReport& r, ModelKind model,
                                       const std::string& encoding) {
    std::vector<double> oas;
    for (const auto& c : r.cells)
        if (c.model == model && c.encoding == encoding && c.status == "ok" &&
            c.report.overall_accuracy.has_value())
            oas.push_back(*c.report.overall_accuracy);
    return detail::median(std::move(oas));
}

inline std::optional<double> median_f1(const AblationReport& r, ModelKind model,
                                       const std::string& encoding, size_t cls) {
    std::vector<double> f1;
    for (const auto& c : r.cells)
        if (c.model == model && c.encoding == encoding && c.status == "ok" &&
            cls < c.report.per_class.size() && c.report.per_class[cls].f1.has_value())
            f1.push_back(*c.report.per_class[cls].f1);
    return detail::median(std::move(f1));
}

inline std::optional<double> median_convergence_ratio(const AblationReport& r,
                                                      const std::string& fused_model) {
    std::vector<double> ratios;
    for (const auto& e : r.convergence)
        if (e.fused_model == fused_model && e.ratio.has_value()) ratios.push_back(*e.ratio);
    return detail::median(std::move(ratios));
}

// Markdown summary shaped like a per-class F1 + OA results table.
inline std::string format_markdown(const AblationReport& r,
                                   const std::vector<std::string>& classes) {
    std::ostringstream os;
    os << "| Encoding | Method |";
    for (const auto& c : classes) os << " " << c << " |";
    os << " OA |\n|---|---|";
    for (size_t i = 0; i < classes.size(); ++i) os << "---|";
    os << "---|\n";

    std::vector<std::pair<ModelKind, std::string>> rows;
    for (const auto& c : r.cells) {
        const auto row = std::make_pair(c.model, c.encoding);
        if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
    }
    auto fmt = [](std::optional<double> v) {
        if (!v.has_value()) return std::string("--");
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.1f", *v * 100.0);
        return std::string(buf);
    };
    for (const auto& [model, encoding] : rows) {
        os << "| " << encoding << " | " << model_kind_name(model) << " |";
        for (size_t cls = 0; cls < classes.size(); ++cls)
            os << " " << fmt(median_f1(r, model, encoding, cls)) << " |";
        os << " " << fmt(median_oa(r, model, encoding)) << " |\n";
    }

    if (!r.convergence.empty()) {
        os << "\nConvergence to the single-stream baseline's final validation OA "
              "(iterations ratio, fused/single; seed median):\n\n";
        std::vector<std::string> fused_models;
        for (const auto& e : r.convergence)
            if (std::find(fused_models.begin(), fused_models.end(), e.fused_model) ==
                fused_models.end())
                fused_models.push_back(e.fused_model);
        auto fmt_ratio = [](std::optional<double> v) {
            if (!v.has_value()) return std::string("--");
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%.2f", *v);
            return std::string(buf);
        };
        for (const auto& fm : fused_models) {
            os << "- " << fm << ": " << fmt_ratio(median_convergence_ratio(r, fm)) << "\n";
        }
    }
    return os.str();
}

}  // namespace mapfuse
