#include "shgvqa/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "shgvqa/errors.hpp"

namespace shgvqa {

using nlohmann::json;

namespace {

std::int64_t argmax_index(std::span<const double> values) {
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < static_cast<std::int64_t>(values.size()); ++i) {
        if (values[static_cast<std::size_t>(i)] > values[static_cast<std::size_t>(best)]) {
            best = i;
        }
    }
    return best;
}

struct RankedPrediction {
    double score;
    std::size_t clip;
    std::int64_t frame;
    bool hit;
};

double average_precision(std::vector<RankedPrediction> ranked, std::int64_t n_positive,
                         MapVariant variant) {
    std::sort(ranked.begin(), ranked.end(), [](const RankedPrediction& a, const RankedPrediction& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.clip != b.clip) return a.clip < b.clip;
        return a.frame < b.frame;
    });
    std::vector<double> precision, recall;
    std::int64_t tp = 0, fp = 0;
    precision.reserve(ranked.size());
    recall.reserve(ranked.size());
    for (const RankedPrediction& p : ranked) {
        if (p.hit) tp++; else fp++;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_positive));
    }
    if (variant == MapVariant::all_point) {
        double ap = 0.0;
        for (std::size_t k = 0; k < ranked.size(); ++k) {
            if (ranked[k].hit) {
                ap += precision[k];
            }
        }
        return ap / static_cast<double>(n_positive);
    }
    // precision envelope for the interpolated variants
    std::vector<double> envelope = precision;
    for (std::size_t k = envelope.size(); k-- > 1;) {
        envelope[k - 1] = std::max(envelope[k - 1], envelope[k]);
    }
    if (variant == MapVariant::interpolated) {
        double ap = 0.0;
        double prev_recall = 0.0;
        for (std::size_t k = 0; k < ranked.size(); ++k) {
            if (ranked[k].hit) {
                ap += (recall[k] - prev_recall) * envelope[k];
                prev_recall = recall[k];
            }
        }
        return ap;
    }
    // eleven_point
    double ap = 0.0;
    for (int i = 0; i <= 10; ++i) {
        const double r = static_cast<double>(i) / 10.0;
        double best = 0.0;
        for (std::size_t k = 0; k < ranked.size(); ++k) {
            if (recall[k] >= r) {
                best = envelope[k];
                break;
            }
        }
        ap += best / 11.0;
    }
    return ap;
}

}  // namespace

VqaEvaluation evaluate_vqa(const ShgVqaModel& model, const Dataset& dataset) {
    if (dataset.qa.empty()) {
        throw ValidationError("evaluate_vqa: dataset has no QA samples");
    }
    const auto index = dataset.clip_index();
    VqaEvaluation eval;
    for (const QASample& qa : dataset.qa) {
        const Clip& clip = dataset.clips[index.at(qa.clip_id)];
        Tensor features = materialize_features(clip, dataset.vocab);
        Sample sample{features, &clip.annotation, &qa};
        ForwardResult r = model.forward(sample, RunMode::eval);
        const bool correct = argmax_index(r.answer_logits.data()) == qa.answer;
        eval.overall.total++;
        if (correct) eval.overall.correct++;
        const std::string tag = qa.category.empty() ? "all" : qa.category;
        auto& slot = eval.per_category[tag];
        slot.total++;
        if (correct) slot.correct++;
    }
    return eval;
}

MapEvaluation evaluate_map(const ShgVqaModel& model, const Dataset& dataset, QueryKind kind,
                           MapVariant variant) {
    const ModelConfig& cfg = model.config();
    const std::int64_t n_classes =
        kind == QueryKind::action ? cfg.n_actions : cfg.n_predicates;

    std::map<std::int64_t, std::vector<RankedPrediction>> per_class;
    std::map<std::int64_t, std::int64_t> positives;

    autograd::NoGradGuard ng;
    for (std::size_t ci = 0; ci < dataset.clips.size(); ++ci) {
        const Clip& clip = dataset.clips[ci];
        Tensor features = materialize_features(clip, dataset.vocab);
        Tensor memory = model.encode_video(model.adapt_features(features));
        const HypergraphDecoder& dec =
            kind == QueryKind::action ? model.action_decoder() : model.relation_decoder();
        DecodedQueries decoded = dec.decode(memory);
        const std::int64_t per_frame =
            kind == QueryKind::action ? cfg.n_action_queries : cfg.m_relation_queries;
        SetPrediction sets = predict_sets(decoded.logits, per_frame, n_classes);
        const auto& gt_frames =
            kind == QueryKind::action ? clip.annotation.actions : clip.annotation.relations;
        for (std::int64_t t = 0; t < clip.annotation.t_frames; ++t) {
            const auto& gt = gt_frames[static_cast<std::size_t>(t)];
            for (std::int64_t cls : gt) {
                positives[cls]++;
            }
            for (const PredictedItem& item : sets.frames[static_cast<std::size_t>(t)]) {
                const bool hit = std::binary_search(gt.begin(), gt.end(), item.cls);
                per_class[item.cls].push_back(RankedPrediction{item.score, ci, t, hit});
            }
        }
    }
    if (positives.empty()) {
        throw ValidationError("evaluate_map: no ground-truth instances in the dataset");
    }
    MapEvaluation out;
    double sum = 0.0;
    for (const auto& [cls, n_pos] : positives) {
        std::vector<RankedPrediction> ranked;
        if (auto it = per_class.find(cls); it != per_class.end()) {
            ranked = it->second;
        }
        const double ap = ranked.empty() ? 0.0 : average_precision(std::move(ranked), n_pos, variant);
        out.per_class_ap[cls] = ap;
        sum += ap;
    }
    out.map = sum / static_cast<double>(positives.size());
    return out;
}

DuplicateStats duplicate_statistics(const ShgVqaModel& model, const Dataset& dataset,
                                    QueryKind kind) {
    const ModelConfig& cfg = model.config();
    DuplicateStats stats;
    autograd::NoGradGuard ng;
    for (const Clip& clip : dataset.clips) {
        Tensor features = materialize_features(clip, dataset.vocab);
        Tensor memory = model.encode_video(model.adapt_features(features));
        const HypergraphDecoder& dec =
            kind == QueryKind::action ? model.action_decoder() : model.relation_decoder();
        DecodedQueries decoded = dec.decode(memory);
        const std::int64_t per_frame =
            kind == QueryKind::action ? cfg.n_action_queries : cfg.m_relation_queries;
        const std::int64_t n_classes =
            kind == QueryKind::action ? cfg.n_actions : cfg.n_predicates;
        SetPrediction sets = predict_sets(decoded.logits, per_frame, n_classes);
        stats.duplicates += sets.duplicate_count;
        stats.frames += clip.annotation.t_frames;
    }
    if (stats.frames > 0) {
        stats.mean_duplicates_per_frame =
            static_cast<double>(stats.duplicates) / static_cast<double>(stats.frames);
    }
    return stats;
}

std::string MetricsReport::to_json() const {
    json root;
    root["overall_accuracy"] = overall_accuracy;
    root["per_category"] = per_category;
    root["action_map"] = action_map;
    root["relation_map"] = relation_map;
    root["loss_curve"] = loss_curve;
    root["config"] = config_echo;
    root["seed"] = seed;
    return root.dump(2) + "\n";
}

MetricsReport MetricsReport::from_json(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw SchemaError(std::string("metrics report is not valid JSON: ") + e.what());
    }
    MetricsReport report;
    report.overall_accuracy = root.at("overall_accuracy").get<double>();
    report.per_category = root.at("per_category").get<std::map<std::string, double>>();
    report.action_map = root.at("action_map").get<double>();
    report.relation_map = root.at("relation_map").get<double>();
    report.loss_curve = root.at("loss_curve").get<std::vector<double>>();
    report.config_echo = root.at("config").get<std::string>();
    report.seed = root.at("seed").get<std::uint64_t>();
    return report;
}

void write_text_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw ValidationError("cannot write file '" + path + "'");
        }
        out << text;
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw ValidationError("cannot move temporary file onto '" + path + "'");
    }
}

}  // namespace shgvqa
