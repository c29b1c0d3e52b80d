#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "shgvqa/decoder.hpp"
#include "shgvqa/transformer.hpp"

namespace shgvqa {

// Assembled hyper-graph token sequence: position 0 is [HG]; then, frame by
// frame, N action tokens followed by M relation tokens. The attention mask
// marks real tokens (1) vs padded ones (0); the [HG] bit is always 1.
struct HyperGraphSequence {
    Tensor tokens;                    // [1 + (N+M)*T, d]
    std::vector<std::uint8_t> mask;   // same length
    std::int64_t n_per_frame = 0;
    std::int64_t m_per_frame = 0;
    std::int64_t frames = 0;
};

// Position of a hyper-graph token in the assembled sequence (excluding [HG]
// at 0): 1 + t*(N+M) + (q | N+q).
std::int64_t token_index(std::int64_t frame, QueryKind kind, std::int64_t slot, std::int64_t n,
                         std::int64_t m);

enum class MaskPolicy { train, inference };

struct HypergraphAssembler {
    Tensor hg_token;         // [1, d]
    Tensor type_table;       // [2, d]: row 0 = [ACT], row 1 = [REL]
    Tensor situation_table;  // [T, d]

    static HypergraphAssembler init(std::int64_t width, std::int64_t frames, Rng& rng);

    // Either stream may be absent (component ablations). With the train
    // policy, a slot matched to phi gets mask bit 0; real bits come from the
    // per-slot matched classes. The inference policy sets every bit to 1.
    HyperGraphSequence assemble(const Tensor* action_emb, const Tensor* relation_emb,
                                std::int64_t n_per_frame, std::int64_t m_per_frame,
                                std::int64_t frames, MaskPolicy policy,
                                const std::vector<std::uint8_t>* action_real_bits = nullptr,
                                const std::vector<std::uint8_t>* relation_real_bits = nullptr) const;

    void collect(const std::string& prefix, NamedParams& out) const;
};

}  // namespace shgvqa
