#include "shgvqa/decoder.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace shgvqa {

QuerySet init_queries(QueryKind kind, std::int64_t count_per_frame, std::int64_t frames,
                      std::int64_t width, Rng& rng) {
    if (count_per_frame < 1 || frames < 1 || width < 1) {
        throw std::invalid_argument("init_queries: Q, T and d must all be >= 1");
    }
    QuerySet qs;
    qs.kind = kind;
    qs.count_per_frame = count_per_frame;
    qs.frames = frames;
    qs.table = Tensor::randn({count_per_frame * frames, width}, rng, 0.02, true);
    return qs;
}

PredictionHead PredictionHead::init(std::int64_t width, std::int64_t classes_with_phi, Rng& rng) {
    if (classes_with_phi < 2) {
        throw std::invalid_argument("PredictionHead: needs at least one real class plus phi");
    }
    return PredictionHead{LayerNormParams::init(width), Linear::init(width, width, rng),
                          Linear::init(width, classes_with_phi, rng)};
}

Tensor PredictionHead::apply(const Tensor& embeddings) const {
    return fc2.apply(gelu(fc1.apply(ln.apply(embeddings))));
}

void PredictionHead::collect(const std::string& prefix, NamedParams& out) const {
    ln.collect(prefix + ".ln", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

HypergraphDecoder HypergraphDecoder::init(QueryKind kind, std::int64_t count_per_frame,
                                          std::int64_t frames, std::int64_t width,
                                          std::int64_t layers, std::int64_t heads,
                                          std::int64_t ff_hidden, std::int64_t n_classes, Rng& rng) {
    HypergraphDecoder d;
    d.queries = init_queries(kind, count_per_frame, frames, width, rng);
    d.decoder = DecoderStack::init(layers, width, heads, ff_hidden, rng);
    d.head = PredictionHead::init(width, n_classes + 1, rng);
    return d;
}

DecodedQueries HypergraphDecoder::decode(const Tensor& memory, const DropoutCtx& drop) const {
    const AttentionMask mask = AttentionMask::block_causal(queries.frames, queries.count_per_frame);
    DecodedQueries out;
    out.kind = queries.kind;
    out.embeddings = decoder.apply(queries.table, memory, &mask, drop);
    out.logits = head.apply(out.embeddings);
    return out;
}

void HypergraphDecoder::collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".queries", queries.table);
    decoder.collect(prefix + ".decoder", out);
    head.collect(prefix + ".head", out);
}

SetPrediction predict_sets(const Tensor& logits, std::int64_t queries_per_frame,
                           std::int64_t phi_index) {
    if (logits.rank() != 2) {
        throw std::invalid_argument("predict_sets: expected rank-2 logits, got " +
                                    shape_str(logits.shape()));
    }
    const std::int64_t rows_n = logits.dim(0);
    const std::int64_t classes = logits.dim(1);
    if (phi_index != classes - 1) {
        throw std::invalid_argument("predict_sets: phi must be the last logit column");
    }
    if (rows_n % queries_per_frame != 0) {
        throw std::invalid_argument("predict_sets: rows not divisible by queries_per_frame");
    }
    const std::int64_t frames_n = rows_n / queries_per_frame;
    const auto ld = logits.data();

    SetPrediction out;
    out.frames.resize(static_cast<std::size_t>(frames_n));
    for (std::int64_t t = 0; t < frames_n; ++t) {
        std::map<std::int64_t, PredictedItem> collapsed;
        for (std::int64_t qi = 0; qi < queries_per_frame; ++qi) {
            const double* row = ld.data() + (t * queries_per_frame + qi) * classes;
            std::int64_t best = 0;
            for (std::int64_t c = 1; c < classes; ++c) {
                if (row[c] > row[best]) best = c;
            }
            if (best == phi_index) {
                continue;  // the slot emits nothing
            }
            double mx = row[best];
            double z = 0.0;
            for (std::int64_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
            const double score = 1.0 / z;  // softmax probability of the argmax class
            out.raw_emissions++;
            auto it = collapsed.find(best);
            if (it == collapsed.end()) {
                collapsed.emplace(best, PredictedItem{best, score, 1});
            } else {
                out.duplicate_count++;
                it->second.raw_count++;
                it->second.score = std::max(it->second.score, score);
            }
        }
        auto& frame = out.frames[static_cast<std::size_t>(t)];
        frame.reserve(collapsed.size());
        for (const auto& [cls, item] : collapsed) {
            (void)cls;
            frame.push_back(item);
        }
    }
    return out;
}

}  // namespace shgvqa
