#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "shgvqa/tensor.hpp"
#include "shgvqa/vocab.hpp"

namespace shgvqa {

struct VocabularySet {
    Vocabulary actions;
    Vocabulary predicates;
    Vocabulary answers;
    Vocabulary words;
};

// Per-frame ground-truth sets for one clip. phi is never stored; sets hold
// class indices into the respective vocabulary, sorted, without duplicates.
struct SituationAnnotation {
    std::string clip_id;
    std::int64_t t_frames = 0;
    std::vector<std::vector<std::int64_t>> actions;    // [T][<=N]
    std::vector<std::vector<std::int64_t>> relations;  // [T][<=M]
};

enum class QaMode { multiple_choice, open_ended };

struct QASample {
    std::string clip_id;
    std::string question;
    QaMode mode = QaMode::multiple_choice;
    std::vector<std::string> choices;  // multiple_choice only
    std::int64_t answer = 0;           // index into choices, or into the answer vocabulary
    std::string category;              // optional template / question-type tag
};

// Features are either stored inline ([T][h*w][d_x]) or regenerated from a
// seeded codebook over action+predicate classes.
struct ClipFeatures {
    bool is_inline = false;
    Tensor inline_features;  // [T, h*w, d_x] when is_inline
    std::uint64_t codebook_seed = 0;
    std::int64_t grid_h = 0;
    std::int64_t grid_w = 0;
    std::int64_t d_x = 0;
    double sigma = 0.0;
};

struct Clip {
    SituationAnnotation annotation;
    ClipFeatures features;
};

struct Dataset {
    VocabularySet vocab;
    std::vector<Clip> clips;
    std::vector<QASample> qa;

    const Clip& clip_by_id(const std::string& clip_id) const;
    std::map<std::string, std::size_t> clip_index() const;
};

// Strict JSON ingestion: unknown fields are rejected, indices are validated
// against the vocabularies, every QA clip_id must have a clip, and feature
// frame counts must match the annotation.
Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& dataset, const std::string& path);
Dataset parse_dataset_json(const std::string& text);
std::string dataset_to_json(const Dataset& dataset);

// Deterministic class codebook: row c is the d_x-vector of action class c;
// predicate class p lives at row |actions| + p.
Tensor build_codebook(std::uint64_t codebook_seed, std::int64_t n_classes, std::int64_t d_x);

// Frame feature grid: the sum of codebook vectors of the frame's labels,
// broadcast over h*w cells, plus per-cell Gaussian noise(sigma). Inline
// features are returned as stored.
Tensor materialize_features(const Clip& clip, const VocabularySet& vocab);

// Drops lowest-global-frequency classes from frames whose sets exceed the
// query budget. Returns how many labels were dropped.
struct TruncationStats {
    std::int64_t actions_dropped = 0;
    std::int64_t relations_dropped = 0;
};
TruncationStats truncate_to_query_budget(Dataset& dataset, std::int64_t n_action_queries,
                                         std::int64_t m_relation_queries);

// Builds the four vocabularies from observed labels of a generated corpus.
VocabularySet build_vocabularies(const std::vector<std::string>& action_labels,
                                 const std::vector<PredicateTriplet>& observed_triplets,
                                 const std::vector<std::string>& answer_labels,
                                 const std::vector<std::string>& question_texts);

}  // namespace shgvqa
