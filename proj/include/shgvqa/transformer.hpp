#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "shgvqa/optimizer.hpp"
#include "shgvqa/rng.hpp"
#include "shgvqa/tensor.hpp"

namespace shgvqa {

// Additive attention mask: 0 where a query may attend a key, -1e9 where it
// may not. With max-subtracted softmax the blocked weights underflow to an
// exact 0, so no gradient leaks through blocked pairs.
class AttentionMask {
public:
    static constexpr double kBlocked = -1e9;

    static AttentionMask all_allowed(std::int64_t q_len, std::int64_t k_len);
    // allowed is row-major q_len x k_len; a fully blocked row is rejected.
    static AttentionMask from_allowed(std::vector<std::uint8_t> allowed, std::int64_t q_len,
                                      std::int64_t k_len);
    // Key-padding form: key j is visible to every query iff key_bits[j] != 0.
    static AttentionMask from_key_bits(const std::vector<std::uint8_t>& key_bits, std::int64_t q_len);
    // Block-causal mask over frames * queries_per_frame rows: query i of frame
    // f may attend key j iff frame(j) <= f. Within-frame attention is fully
    // bidirectional.
    static AttentionMask block_causal(std::int64_t frames, std::int64_t queries_per_frame);

    std::int64_t q_len() const { return q_len_; }
    std::int64_t k_len() const { return k_len_; }
    bool allowed(std::int64_t i, std::int64_t j) const;
    const Tensor& additive() const { return additive_; }

private:
    AttentionMask(std::vector<std::uint8_t> allowed, std::int64_t q_len, std::int64_t k_len);

    std::vector<std::uint8_t> allowed_;
    std::int64_t q_len_ = 0;
    std::int64_t k_len_ = 0;
    Tensor additive_;
};

enum class PositionalKind { learned, sinusoidal };

// Learned table when kind==learned (requires rng); closed-form sinususoidal
// constant otherwise.
Tensor position_encoding(std::int64_t length, std::int64_t width, PositionalKind kind,
                         Rng* rng = nullptr);

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]

    static Linear init(std::int64_t in, std::int64_t out, Rng& rng, double stddev = 0.02);
    Tensor apply(const Tensor& x) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
    double eps = 1e-5;

    static LayerNormParams init(std::int64_t width);
    Tensor apply(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
    void collect(const std::string& prefix, NamedParams& out) const;
};

struct FeedForward {
    Linear fc1;
    Linear fc2;

    static FeedForward init(std::int64_t width, std::int64_t hidden, Rng& rng);
    Tensor apply(const Tensor& x) const { return fc2.apply(gelu(fc1.apply(x))); }
    void collect(const std::string& prefix, NamedParams& out) const;
};

// Per-layer dropout context; nullptr rng or rate 0 means no dropout.
struct DropoutCtx {
    double rate = 0.0;
    Rng* rng = nullptr;

    Tensor apply(const Tensor& x) const {
        if (rate <= 0.0 || rng == nullptr) return x;
        return dropout(x, rate, *rng);
    }
};

struct MultiHeadAttention {
    std::int64_t heads = 1;
    Linear wq, wk, wv, wo;

    static MultiHeadAttention init(std::int64_t width, std::int64_t heads, Rng& rng);
    Tensor apply(const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionMask* mask = nullptr) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

struct EncoderLayer {
    LayerNormParams ln_attn, ln_ff;
    MultiHeadAttention attn;
    FeedForward ff;

    static EncoderLayer init(std::int64_t width, std::int64_t heads, std::int64_t ff_hidden, Rng& rng);
    Tensor apply(const Tensor& x, const AttentionMask* mask, const DropoutCtx& drop) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

struct DecoderLayer {
    LayerNormParams ln_self, ln_cross, ln_ff;
    MultiHeadAttention self_attn, cross_attn;
    FeedForward ff;

    static DecoderLayer init(std::int64_t width, std::int64_t heads, std::int64_t ff_hidden, Rng& rng);
    Tensor apply(const Tensor& x, const Tensor& memory, const AttentionMask* target_mask,
                 const DropoutCtx& drop) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

// Pre-norm stacks. An empty stack is the identity.
struct EncoderStack {
    std::vector<EncoderLayer> layers;

    static EncoderStack init(std::int64_t n_layers, std::int64_t width, std::int64_t heads,
                             std::int64_t ff_hidden, Rng& rng);
    Tensor apply(const Tensor& x, const AttentionMask* mask = nullptr,
                 const DropoutCtx& drop = {}) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

struct DecoderStack {
    std::vector<DecoderLayer> layers;

    static DecoderStack init(std::int64_t n_layers, std::int64_t width, std::int64_t heads,
                             std::int64_t ff_hidden, Rng& rng);
    Tensor apply(const Tensor& targets, const Tensor& memory, const AttentionMask* target_mask,
                 const DropoutCtx& drop = {}) const;
    void collect(const std::string& prefix, NamedParams& out) const;
};

}  // namespace shgvqa
