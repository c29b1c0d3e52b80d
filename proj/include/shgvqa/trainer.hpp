#pragma once

#include <cstdint>
#include <string>

#include "shgvqa/dataset.hpp"
#include "shgvqa/metrics.hpp"
#include "shgvqa/model.hpp"

namespace shgvqa {

// Full run configuration. Parses either flat key=value text (# comments) or
// a JSON object with the same keys.
struct RunConfig {
    std::string train_data;
    std::string val_data;
    std::string out_dir = ".";
    std::uint64_t seed = 0;

    ModelConfig model;

    double lr = 1e-4;
    double warmup_frac = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 0.0;

    std::int64_t batch_size = 8;
    std::int64_t max_steps = 0;  // 0: bounded by max_epochs only
    std::int64_t max_epochs = 100;
    std::int64_t eval_interval = 200;
    std::int64_t patience = 10;
    MapVariant map_variant = MapVariant::all_point;

    static RunConfig parse_file(const std::string& path);
    static RunConfig parse_text(const std::string& text);
    std::string canonical_echo() const;  // deterministic key=value form
    void validate() const;
};

struct TrainResult {
    MetricsReport report;
    std::string checkpoint_path;
    std::string report_path;
    TruncationStats truncation;
};

TrainResult train(const RunConfig& cfg);

// Builds the model for an existing checkpoint and evaluates it on a dataset.
MetricsReport evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path,
                                  const std::string& data_path);

// Per-frame emitted sets with scores and pre-collapse duplicate counts.
std::string dump_hypergraph(const ShgVqaModel& model, const Dataset& dataset,
                            const std::string& clip_id);

ShgVqaModel build_model(const RunConfig& cfg, const VocabularySet& vocab);

}  // namespace shgvqa
