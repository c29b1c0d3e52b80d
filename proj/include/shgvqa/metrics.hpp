#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "shgvqa/dataset.hpp"
#include "shgvqa/model.hpp"

namespace shgvqa {

enum class MapVariant { all_point, interpolated, eleven_point };

struct CategoryAccuracy {
    std::int64_t correct = 0;
    std::int64_t total = 0;
    double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

struct VqaEvaluation {
    CategoryAccuracy overall;
    std::map<std::string, CategoryAccuracy> per_category;  // "all" only when untagged
};

VqaEvaluation evaluate_vqa(const ShgVqaModel& model, const Dataset& dataset);

// Ranked per-class average precision of per-frame set membership. Classes
// without any ground-truth instance are skipped; an entirely empty ground
// truth is a reporting error.
struct MapEvaluation {
    double map = 0.0;
    std::map<std::int64_t, double> per_class_ap;  // classes with >= 1 gt instance
};

MapEvaluation evaluate_map(const ShgVqaModel& model, const Dataset& dataset, QueryKind kind,
                           MapVariant variant = MapVariant::all_point);

// Average over frames of pre-collapse duplicate emissions (raw non-phi
// argmaxes minus distinct classes), the diagnostic behind the frame-wise vs
// video-wise matching comparison.
struct DuplicateStats {
    double mean_duplicates_per_frame = 0.0;
    std::int64_t frames = 0;
    std::int64_t duplicates = 0;
};

DuplicateStats duplicate_statistics(const ShgVqaModel& model, const Dataset& dataset,
                                    QueryKind kind);

struct MetricsReport {
    double overall_accuracy = 0.0;
    std::map<std::string, double> per_category;
    double action_map = 0.0;
    double relation_map = 0.0;
    std::vector<double> loss_curve;
    std::string config_echo;  // canonical key=value lines
    std::uint64_t seed = 0;

    std::string to_json() const;
    static MetricsReport from_json(const std::string& text);
};

void write_text_atomic(const std::string& path, const std::string& text);

}  // namespace shgvqa
