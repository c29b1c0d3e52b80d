#include "shgvqa/embedding.hpp"

#include <stdexcept>

namespace shgvqa {

std::int64_t token_index(std::int64_t frame, QueryKind kind, std::int64_t slot, std::int64_t n,
                         std::int64_t m) {
    const std::int64_t per_kind = kind == QueryKind::action ? n : m;
    if (slot < 0 || slot >= per_kind || frame < 0) {
        throw std::out_of_range("token_index: slot " + std::to_string(slot) + " or frame " +
                                std::to_string(frame) + " out of range");
    }
    return 1 + frame * (n + m) + (kind == QueryKind::action ? slot : n + slot);
}

HypergraphAssembler HypergraphAssembler::init(std::int64_t width, std::int64_t frames, Rng& rng) {
    HypergraphAssembler a;
    a.hg_token = Tensor::randn({1, width}, rng, 0.02, true);
    a.type_table = Tensor::randn({2, width}, rng, 0.02, true);
    a.situation_table = Tensor::randn({frames, width}, rng, 0.02, true);
    return a;
}

HyperGraphSequence HypergraphAssembler::assemble(
    const Tensor* action_emb, const Tensor* relation_emb, std::int64_t n_per_frame,
    std::int64_t m_per_frame, std::int64_t frames, MaskPolicy policy,
    const std::vector<std::uint8_t>* action_real_bits,
    const std::vector<std::uint8_t>* relation_real_bits) const {
    if (action_emb == nullptr && relation_emb == nullptr) {
        throw std::invalid_argument("assemble: need at least one of action/relation embeddings");
    }
    const std::int64_t n = action_emb != nullptr ? n_per_frame : 0;
    const std::int64_t m = relation_emb != nullptr ? m_per_frame : 0;
    if (action_emb != nullptr &&
        (action_emb->rank() != 2 || action_emb->dim(0) != n * frames)) {
        throw std::invalid_argument("assemble: action embeddings " + shape_str(action_emb->shape()) +
                                    " do not match N*T = " + std::to_string(n * frames));
    }
    if (relation_emb != nullptr &&
        (relation_emb->rank() != 2 || relation_emb->dim(0) != m * frames)) {
        throw std::invalid_argument("assemble: relation embeddings " +
                                    shape_str(relation_emb->shape()) +
                                    " do not match M*T = " + std::to_string(m * frames));
    }
    if (frames > situation_table.dim(0)) {
        throw std::invalid_argument("assemble: situation table covers " +
                                    std::to_string(situation_table.dim(0)) + " frames, got " +
                                    std::to_string(frames));
    }
    if (policy == MaskPolicy::train) {
        if (action_emb != nullptr &&
            (action_real_bits == nullptr ||
             static_cast<std::int64_t>(action_real_bits->size()) != n * frames)) {
            throw std::invalid_argument("assemble: train policy needs per-slot action bits");
        }
        if (relation_emb != nullptr &&
            (relation_real_bits == nullptr ||
             static_cast<std::int64_t>(relation_real_bits->size()) != m * frames)) {
            throw std::invalid_argument("assemble: train policy needs per-slot relation bits");
        }
    }

    // frame-major interleave: [HG], then per frame N action rows + M relation rows
    std::vector<Tensor> parts;
    parts.push_back(hg_token);
    std::vector<std::int64_t> type_idx, situation_idx;
    HyperGraphSequence seq;
    seq.n_per_frame = n;
    seq.m_per_frame = m;
    seq.frames = frames;
    seq.mask.assign(1, 1);  // [HG] is always visible
    for (std::int64_t t = 0; t < frames; ++t) {
        if (action_emb != nullptr) {
            parts.push_back(slice_rows(*action_emb, t * n, n));
            for (std::int64_t qi = 0; qi < n; ++qi) {
                type_idx.push_back(0);
                situation_idx.push_back(t);
                const bool real = policy == MaskPolicy::inference ||
                                  (*action_real_bits)[static_cast<std::size_t>(t * n + qi)] != 0;
                seq.mask.push_back(real ? 1 : 0);
            }
        }
        if (relation_emb != nullptr) {
            parts.push_back(slice_rows(*relation_emb, t * m, m));
            for (std::int64_t qi = 0; qi < m; ++qi) {
                type_idx.push_back(1);
                situation_idx.push_back(t);
                const bool real = policy == MaskPolicy::inference ||
                                  (*relation_real_bits)[static_cast<std::size_t>(t * m + qi)] != 0;
                seq.mask.push_back(real ? 1 : 0);
            }
        }
    }
    Tensor body;
    {
        std::vector<Tensor> body_parts(parts.begin() + 1, parts.end());
        body = concat_rows(body_parts);
    }
    body = add(body, rows(type_table, type_idx));
    body = add(body, rows(situation_table, situation_idx));
    std::vector<Tensor> full = {hg_token, body};
    seq.tokens = concat_rows(full);
    return seq;
}

void HypergraphAssembler::collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".hg_token", hg_token);
    out.emplace_back(prefix + ".type_table", type_table);
    out.emplace_back(prefix + ".situation_table", situation_table);
}

}  // namespace shgvqa
