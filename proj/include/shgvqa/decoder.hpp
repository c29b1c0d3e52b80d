#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shgvqa/transformer.hpp"

namespace shgvqa {

enum class QueryKind { action, relation };

// Learnable query slots: row (t*Q + q) is the q-th query of frame t.
struct QuerySet {
    QueryKind kind = QueryKind::action;
    std::int64_t count_per_frame = 0;
    std::int64_t frames = 0;
    Tensor table;  // [Q*T, d]
};

QuerySet init_queries(QueryKind kind, std::int64_t count_per_frame, std::int64_t frames,
                      std::int64_t width, Rng& rng);

// LayerNorm -> linear(d,d) -> GELU -> linear(d, classes+1), per query slot.
struct PredictionHead {
    LayerNormParams ln;
    Linear fc1;
    Linear fc2;

    static PredictionHead init(std::int64_t width, std::int64_t classes_with_phi, Rng& rng);
    Tensor apply(const Tensor& embeddings) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

struct DecodedQueries {
    QueryKind kind = QueryKind::action;
    Tensor embeddings;  // [Q*T, d]
    Tensor logits;      // [Q*T, classes+1]
};

// Query table decoded over encoded video memory under the block-causal frame
// mask, then classified.
struct HypergraphDecoder {
    QuerySet queries;
    DecoderStack decoder;
    PredictionHead head;

    static HypergraphDecoder init(QueryKind kind, std::int64_t count_per_frame, std::int64_t frames,
                                  std::int64_t width, std::int64_t layers, std::int64_t heads,
                                  std::int64_t ff_hidden, std::int64_t n_classes, Rng& rng);
    DecodedQueries decode(const Tensor& memory, const DropoutCtx& drop = {}) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

// One emitted (class, score) with its pre-collapse duplicate count.
struct PredictedItem {
    std::int64_t cls = 0;
    double score = 0.0;
    std::int64_t raw_count = 1;
};

struct SetPrediction {
    std::vector<std::vector<PredictedItem>> frames;  // deduplicated, per frame
    std::int64_t raw_emissions = 0;                  // non-phi argmaxes before collapse
    std::int64_t duplicate_count = 0;                // raw emissions minus unique classes
};

// Per-query argmax; phi emits nothing; duplicates within a frame collapse to
// the max-score entry.
SetPrediction predict_sets(const Tensor& logits, std::int64_t queries_per_frame,
                           std::int64_t phi_index);

}  // namespace shgvqa
