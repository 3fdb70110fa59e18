#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mapfuse/inference.hpp"
#include "mapfuse/raster.hpp"
#include "mapfuse/raster_ops.hpp"

namespace mapfuse {

// Rows are the reference class, columns the predicted class.
struct ConfusionMatrix {
    size_t k = 0;
    std::vector<uint64_t> counts;

    explicit ConfusionMatrix(size_t classes = 0) : k(classes), counts(classes * classes, 0) {}

    uint64_t& at(size_t ref, size_t pred) { return counts[ref * k + pred]; }
    uint64_t at(size_t ref, size_t pred) const { return counts[ref * k + pred]; }

    uint64_t total() const {
        uint64_t t = 0;
        for (uint64_t c : counts) t += c;
        return t;
    }
    uint64_t trace() const {
        uint64_t t = 0;
        for (size_t i = 0; i < k; ++i) t += at(i, i);
        return t;
    }
    uint64_t row_sum(size_t i) const {
        uint64_t t = 0;
        for (size_t j = 0; j < k; ++j) t += at(i, j);
        return t;
    }
    uint64_t col_sum(size_t j) const {
        uint64_t t = 0;
        for (size_t i = 0; i < k; ++i) t += at(i, j);
        return t;
    }
};

// Adds pixel pairs to the matrix; reference pixels marked undefined are
// skipped entirely.
inline void accumulate(ConfusionMatrix& cm, const LabelMap& predicted, const LabelMap& reference) {
    if (predicted.height != reference.height || predicted.width != reference.width)
        throw DimensionError("accumulate: label map dims differ");
    for (size_t i = 0; i < reference.values.size(); ++i) {
        const uint8_t ref = reference.values[i];
        if (ref == LabelMap::kUndefined) continue;
        const uint8_t pred = predicted.values[i];
        if (ref >= cm.k)
            throw LabelError("reference class " + std::to_string(ref) + " out of range");
        if (pred >= cm.k)
            throw LabelError("predicted class " + std::to_string(pred) + " out of range");
        cm.at(ref, pred) += 1;
    }
}

// F1 per class: null when the class is absent from both reference and
// prediction; 0 when it appears but has no true positives.
inline std::vector<std::optional<double>> f1_scores(const ConfusionMatrix& cm) {
    std::vector<std::optional<double>> out(cm.k);
    for (size_t i = 0; i < cm.k; ++i) {
        const uint64_t tp = cm.at(i, i), c = cm.row_sum(i), p = cm.col_sum(i);
        if (c == 0 && p == 0) continue;  // undefined
        if (tp == 0) {
            out[i] = 0.0;
            continue;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(c);
        const double precision = static_cast<double>(tp) / static_cast<double>(p);
        out[i] = 2.0 * precision * recall / (precision + recall);
    }
    return out;
}

struct ClassStats {
    std::string name;
    uint64_t support = 0;    // reference pixels of the class
    uint64_t predicted = 0;  // pixels attributed to the class
    uint64_t tp = 0;
    std::optional<double> precision, recall, f1;
};

struct EvalReport {
    std::vector<std::string> classes;
    ConfusionMatrix cm;
    std::vector<ClassStats> per_class;
    std::optional<double> overall_accuracy;
    uint64_t evaluated_pixels = 0;
    bool eroded = false;
    int erode_radius = 0;
    std::optional<double> mean_f1, weighted_mean_f1;
    nlohmann::json metadata = nlohmann::json::object();
};

inline EvalReport report_from_confusion(ConfusionMatrix cm, const std::vector<std::string>& classes,
                                        bool eroded, int erode_radius,
                                        nlohmann::json metadata = nlohmann::json::object()) {
    EvalReport rep;
    rep.classes = classes;
    rep.cm = std::move(cm);
    rep.eroded = eroded;
    rep.erode_radius = erode_radius;
    rep.metadata = std::move(metadata);
    rep.evaluated_pixels = rep.cm.total();
    if (rep.evaluated_pixels > 0)
        rep.overall_accuracy = static_cast<double>(rep.cm.trace()) /
                               static_cast<double>(rep.evaluated_pixels);
    const auto f1 = f1_scores(rep.cm);
    double f1_sum = 0.0, f1_weighted = 0.0;
    uint64_t f1_classes = 0, f1_support = 0;
    for (size_t i = 0; i < rep.cm.k; ++i) {
        ClassStats st;
        st.name = i < classes.size() ? classes[i] : "class" + std::to_string(i);
        st.support = rep.cm.row_sum(i);
        st.predicted = rep.cm.col_sum(i);
        st.tp = rep.cm.at(i, i);
        if (st.support > 0)
            st.recall = static_cast<double>(st.tp) / static_cast<double>(st.support);
        if (st.predicted > 0)
            st.precision = static_cast<double>(st.tp) / static_cast<double>(st.predicted);
        st.f1 = f1[i];
        if (st.f1.has_value()) {
            f1_sum += *st.f1;
            f1_classes += 1;
            f1_weighted += *st.f1 * static_cast<double>(st.support);
            f1_support += st.support;
        }
        rep.per_class.push_back(std::move(st));
    }
    if (f1_classes > 0) rep.mean_f1 = f1_sum / static_cast<double>(f1_classes);
    if (f1_support > 0) rep.weighted_mean_f1 = f1_weighted / static_cast<double>(f1_support);
    return rep;
}

// Full protocol: erode the reference boundaries, accumulate, score.
inline EvalReport evaluate(const LabelMap& predicted, const LabelMap& reference, int erode_radius,
                           const std::vector<std::string>& classes,
                           nlohmann::json metadata = nlohmann::json::object()) {
    if (predicted.height != reference.height || predicted.width != reference.width)
        throw DimensionError("evaluate: label map dims differ");
    const LabelMap ref = erode_radius > 0 ? erode_labels(reference, erode_radius) : reference;
    ConfusionMatrix cm(classes.size());
    accumulate(cm, predicted, ref);
    return report_from_confusion(std::move(cm), classes, erode_radius > 0, erode_radius,
                                 std::move(metadata));
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const EvalReport& rep) {
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& st : rep.per_class) {
        nlohmann::json j = {{"name", st.name},
                            {"support", st.support},
                            {"predicted", st.predicted},
                            {"tp", st.tp}};
        j["precision"] = st.precision.has_value() ? nlohmann::json(*st.precision) : nullptr;
        j["recall"] = st.recall.has_value() ? nlohmann::json(*st.recall) : nullptr;
        j["f1"] = st.f1.has_value() ? nlohmann::json(*st.f1) : nullptr;
        per_class.push_back(std::move(j));
    }
    std::vector<std::vector<uint64_t>> cm_rows;
    for (size_t i = 0; i < rep.cm.k; ++i)
        cm_rows.emplace_back(rep.cm.counts.begin() + static_cast<ptrdiff_t>(i * rep.cm.k),
                             rep.cm.counts.begin() + static_cast<ptrdiff_t>((i + 1) * rep.cm.k));
    nlohmann::json j = {{"classes", rep.classes},
                        {"confusion", cm_rows},
                        {"per_class", per_class},
                        {"evaluated_pixels", rep.evaluated_pixels},
                        {"eroded", rep.eroded},
                        {"erode_radius", rep.erode_radius},
                        {"metadata", rep.metadata}};
    j["overall_accuracy"] =
        rep.overall_accuracy.has_value() ? nlohmann::json(*rep.overall_accuracy) : nullptr;
    j["mean_f1"] = rep.mean_f1.has_value() ? nlohmann::json(*rep.mean_f1) : nullptr;
    j["weighted_mean_f1"] =
        rep.weighted_mean_f1.has_value() ? nlohmann::json(*rep.weighted_mean_f1) : nullptr;
    return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
    EvalReport rep;
    rep.classes = j.at("classes").get<std::vector<std::string>>();
    const auto cm_rows = j.at("confusion").get<std::vector<std::vector<uint64_t>>>();
    rep.cm = ConfusionMatrix(cm_rows.size());
    for (size_t i = 0; i < cm_rows.size(); ++i)
        for (size_t jx = 0; jx < cm_rows.size(); ++jx) rep.cm.at(i, jx) = cm_rows[i][jx];
    for (const auto& pj : j.at("per_class")) {
        ClassStats st;
        st.name = pj.at("name").get<std::string>();
        st.support = pj.at("support").get<uint64_t>();
        st.predicted = pj.at("predicted").get<uint64_t>();
        st.tp = pj.at("tp").get<uint64_t>();
        if (!pj.at("precision").is_null()) st.precision = pj.at("precision").get<double>();
        if (!pj.at("recall").is_null()) st.recall = pj.at("recall").get<double>();
        if (!pj.at("f1").is_null()) st.f1 = pj.at("f1").get<double>();
        rep.per_class.push_back(std::move(st));
    }
    rep.evaluated_pixels = j.at("evaluated_pixels").get<uint64_t>();
    rep.eroded = j.at("eroded").get<bool>();
    rep.erode_radius = j.at("erode_radius").get<int>();
    rep.metadata = j.at("metadata");
    if (!j.at("overall_accuracy").is_null())
        rep.overall_accuracy = j.at("overall_accuracy").get<double>();
    if (!j.at("mean_f1").is_null()) rep.mean_f1 = j.at("mean_f1").get<double>();
    if (!j.at("weighted_mean_f1").is_null())
        rep.weighted_mean_f1 = j.at("weighted_mean_f1").get<double>();
    return rep;
}

inline std::string format_report_table(const EvalReport& rep) {
    std::ostringstream os;
    auto fmt = [](const std::optional<double>& v) {
        if (!v.has_value()) return std::string("   --");
        std::ostringstream o;
        o << std::fixed << std::setprecision(1) << (*v * 100.0);
        std::string s = o.str();
        return s.size() < 5 ? std::string(5 - s.size(), ' ') + s : s;
    };
    os << std::left << std::setw(16) << "class" << std::right << std::setw(10) << "precision"
       << std::setw(8) << "recall" << std::setw(8) << "f1" << std::setw(12) << "support"
       << "\n";
    for (const auto& st : rep.per_class) {
        os << std::left << std::setw(16) << st.name << std::right << std::setw(10)
           << fmt(st.precision) << std::setw(8) << fmt(st.recall) << std::setw(8) << fmt(st.f1)
           << std::setw(12) << st.support << "\n";
    }
    os << std::left << std::setw(16) << "overall" << std::right << std::setw(10) << ""
       << std::setw(8) << "" << std::setw(8) << fmt(rep.overall_accuracy) << std::setw(12)
       << rep.evaluated_pixels << "\n";
    return os.str();
}

// Row-normalized confusion heat map, black-to-orange linear ramp.
inline void write_confusion_ppm(const ConfusionMatrix& cm, const std::filesystem::path& path,
                                int cell_px = 24) {
    const int k = static_cast<int>(cm.k);
    const int dim = k * cell_px;
    std::vector<uint8_t> rgb(static_cast<size_t>(dim) * dim * 3, 0);
    for (int i = 0; i < k; ++i) {
        const uint64_t row = cm.row_sum(static_cast<size_t>(i));
        for (int j = 0; j < k; ++j) {
            const double v = row == 0 ? 0.0
                                      : static_cast<double>(cm.at(static_cast<size_t>(i),
                                                                  static_cast<size_t>(j))) /
                                            static_cast<double>(row);
            const uint8_t r = static_cast<uint8_t>(255.0 * v);
            const uint8_t g = static_cast<uint8_t>(140.0 * v);
            for (int y = i * cell_px; y < (i + 1) * cell_px; ++y) {
                for (int x = j * cell_px; x < (j + 1) * cell_px; ++x) {
                    const size_t px = (static_cast<size_t>(y) * dim + x) * 3;
                    rgb[px] = r;
                    rgb[px + 1] = g;
                    rgb[px + 2] = 0;
                }
            }
        }
    }
    write_ppm(path, dim, dim, rgb);
}

}  // namespace mapfuse
