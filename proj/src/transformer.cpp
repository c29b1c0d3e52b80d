#include "shgvqa/transformer.hpp"

#include <cmath>
#include <stdexcept>

namespace shgvqa {

// ---- AttentionMask ---------------------------------------------------------

AttentionMask::AttentionMask(std::vector<std::uint8_t> allowed, std::int64_t q_len,
                             std::int64_t k_len)
    : allowed_(std::move(allowed)), q_len_(q_len), k_len_(k_len) {
    std::vector<double> add(allowed_.size());
    for (std::int64_t i = 0; i < q_len_; ++i) {
        bool any = false;
        for (std::int64_t j = 0; j < k_len_; ++j) {
            const bool ok = allowed_[static_cast<std::size_t>(i * k_len_ + j)] != 0;
            any = any || ok;
            add[static_cast<std::size_t>(i * k_len_ + j)] = ok ? 0.0 : kBlocked;
        }
        if (!any) {
            throw std::invalid_argument("AttentionMask: query row " + std::to_string(i) +
                                        " is fully blocked");
        }
    }
    additive_ = Tensor::from_data({q_len_, k_len_}, std::move(add), false);
}

AttentionMask AttentionMask::all_allowed(std::int64_t q_len, std::int64_t k_len) {
    return AttentionMask(std::vector<std::uint8_t>(static_cast<std::size_t>(q_len * k_len), 1),
                         q_len, k_len);
}

AttentionMask AttentionMask::from_allowed(std::vector<std::uint8_t> allowed, std::int64_t q_len,
                                          std::int64_t k_len) {
    if (static_cast<std::int64_t>(allowed.size()) != q_len * k_len) {
        throw std::invalid_argument("AttentionMask: allowed grid size does not match " +
                                    std::to_string(q_len) + "x" + std::to_string(k_len));
    }
    return AttentionMask(std::move(allowed), q_len, k_len);
}

AttentionMask AttentionMask::from_key_bits(const std::vector<std::uint8_t>& key_bits,
                                           std::int64_t q_len) {
    const std::int64_t k_len = static_cast<std::int64_t>(key_bits.size());
    std::vector<std::uint8_t> allowed(static_cast<std::size_t>(q_len * k_len));
    for (std::int64_t i = 0; i < q_len; ++i) {
        for (std::int64_t j = 0; j < k_len; ++j) {
            allowed[static_cast<std::size_t>(i * k_len + j)] = key_bits[static_cast<std::size_t>(j)];
        }
    }
    return AttentionMask(std::move(allowed), q_len, k_len);
}

AttentionMask AttentionMask::block_causal(std::int64_t frames, std::int64_t queries_per_frame) {
    if (frames < 1 || queries_per_frame < 1) {
        throw std::invalid_argument("block_causal: frames and queries_per_frame must be >= 1");
    }
    const std::int64_t n = frames * queries_per_frame;
    std::vector<std::uint8_t> allowed(static_cast<std::size_t>(n * n), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t fi = i / queries_per_frame;
        for (std::int64_t j = 0; j < n; ++j) {
            const std::int64_t fj = j / queries_per_frame;
            allowed[static_cast<std::size_t>(i * n + j)] = fj <= fi ? 1 : 0;
        }
    }
    return AttentionMask(std::move(allowed), n, n);
}

bool AttentionMask::allowed(std::int64_t i, std::int64_t j) const {
    if (i < 0 || i >= q_len_ || j < 0 || j >= k_len_) {
        throw std::out_of_range("AttentionMask::allowed: index out of range");
    }
    return allowed_[static_cast<std::size_t>(i * k_len_ + j)] != 0;
}

// ---- positional encodings --------------------------------------------------

Tensor position_encoding(std::int64_t length, std::int64_t width, PositionalKind kind, Rng* rng) {
    if (length < 1 || width < 1) {
        throw std::invalid_argument("position_encoding: length and width must be >= 1");
    }
    if (kind == PositionalKind::learned) {
        if (rng == nullptr) {
            throw std::invalid_argument("position_encoding: learned table needs an rng");
        }
        return Tensor::randn({length, width}, *rng, 0.02, true);
    }
    std::vector<double> data(static_cast<std::size_t>(length * width));
    for (std::int64_t pos = 0; pos < length; ++pos) {
        for (std::int64_t i = 0; i < width; ++i) {
            const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(width);
            const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
            data[static_cast<std::size_t>(pos * width + i)] = (i % 2 == 0) ? std::sin(angle)
                                                                           : std::cos(angle);
        }
    }
    return Tensor::from_data({length, width}, std::move(data), false);
}

// ---- layers -----------------------------------------------------------------

Linear Linear::init(std::int64_t in, std::int64_t out, Rng& rng, double stddev) {
    return Linear{Tensor::randn({in, out}, rng, stddev, true), Tensor::zeros({out}, true)};
}

Tensor Linear::apply(const Tensor& x) const { return add(matmul(x, weight), bias); }

void Linear::collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
}

LayerNormParams LayerNormParams::init(std::int64_t width) {
    return LayerNormParams{Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true)};
}

void LayerNormParams::collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
}

FeedForward FeedForward::init(std::int64_t width, std::int64_t hidden, Rng& rng) {
    return FeedForward{Linear::init(width, hidden, rng), Linear::init(hidden, width, rng)};
}

void FeedForward::collect(const std::string& prefix, NamedParams& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

MultiHeadAttention MultiHeadAttention::init(std::int64_t width, std::int64_t heads, Rng& rng) {
    if (heads < 1 || width % heads != 0) {
        throw std::invalid_argument("MultiHeadAttention: width " + std::to_string(width) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    return MultiHeadAttention{heads, Linear::init(width, width, rng), Linear::init(width, width, rng),
                              Linear::init(width, width, rng), Linear::init(width, width, rng)};
}

Tensor MultiHeadAttention::apply(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const AttentionMask* mask) const {
    const std::int64_t lq = q.dim(0), lk = k.dim(0);
    if (k.dim(0) != v.dim(0)) {
        throw std::invalid_argument("attention: key/value lengths disagree: " +
                                    shape_str(k.shape()) + " vs " + shape_str(v.shape()));
    }
    if (mask != nullptr && (mask->q_len() != lq || mask->k_len() != lk)) {
        throw std::invalid_argument("attention: mask shape " + std::to_string(mask->q_len()) + "x" +
                                    std::to_string(mask->k_len()) + " does not match " +
                                    std::to_string(lq) + "x" + std::to_string(lk));
    }
    const std::int64_t width = wq.weight.dim(0);
    const std::int64_t head_dim = width / heads;
    Tensor qp = wq.apply(q);
    Tensor kp = wk.apply(k);
    Tensor vp = wv.apply(v);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(heads));
    for (std::int64_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(qp, h * head_dim, head_dim);
        Tensor kh = slice_cols(kp, h * head_dim, head_dim);
        Tensor vh = slice_cols(vp, h * head_dim, head_dim);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        if (mask != nullptr) {
            scores = add(scores, mask->additive());
        }
        Tensor weights = softmax(scores, -1);
        head_outputs.push_back(matmul(weights, vh));
    }
    return wo.apply(concat_cols(head_outputs));
}

void MultiHeadAttention::collect(const std::string& prefix, NamedParams& out) const {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
}

EncoderLayer EncoderLayer::init(std::int64_t width, std::int64_t heads, std::int64_t ff_hidden,
                                Rng& rng) {
    return EncoderLayer{LayerNormParams::init(width), LayerNormParams::init(width),
                        MultiHeadAttention::init(width, heads, rng),
                        FeedForward::init(width, ff_hidden, rng)};
}

Tensor EncoderLayer::apply(const Tensor& x, const AttentionMask* mask, const DropoutCtx& drop) const {
    Tensor n1 = ln_attn.apply(x);
    Tensor h = add(x, drop.apply(attn.apply(n1, n1, n1, mask)));
    return add(h, drop.apply(ff.apply(ln_ff.apply(h))));
}

void EncoderLayer::collect(const std::string& prefix, NamedParams& out) const {
    ln_attn.collect(prefix + ".ln_attn", out);
    attn.collect(prefix + ".attn", out);
    ln_ff.collect(prefix + ".ln_ff", out);
    ff.collect(prefix + ".ff", out);
}

DecoderLayer DecoderLayer::init(std::int64_t width, std::int64_t heads, std::int64_t ff_hidden,
                                Rng& rng) {
    return DecoderLayer{LayerNormParams::init(width), LayerNormParams::init(width),
                        LayerNormParams::init(width), MultiHeadAttention::init(width, heads, rng),
                        MultiHeadAttention::init(width, heads, rng),
                        FeedForward::init(width, ff_hidden, rng)};
}

Tensor DecoderLayer::apply(const Tensor& x, const Tensor& memory, const AttentionMask* target_mask,
                           const DropoutCtx& drop) const {
    Tensor n1 = ln_self.apply(x);
    Tensor h = add(x, drop.apply(self_attn.apply(n1, n1, n1, target_mask)));
    Tensor n2 = ln_cross.apply(h);
    h = add(h, drop.apply(cross_attn.apply(n2, memory, memory, nullptr)));
    return add(h, drop.apply(ff.apply(ln_ff.apply(h))));
}

void DecoderLayer::collect(const std::string& prefix, NamedParams& out) const {
    ln_self.collect(prefix + ".ln_self", out);
    self_attn.collect(prefix + ".self_attn", out);
    ln_cross.collect(prefix + ".ln_cross", out);
    cross_attn.collect(prefix + ".cross_attn", out);
    ln_ff.collect(prefix + ".ln_ff", out);
    ff.collect(prefix + ".ff", out);
}

EncoderStack EncoderStack::init(std::int64_t n_layers, std::int64_t width, std::int64_t heads,
                                std::int64_t ff_hidden, Rng& rng) {
    EncoderStack stack;
    for (std::int64_t i = 0; i < n_layers; ++i) {
        stack.layers.push_back(EncoderLayer::init(width, heads, ff_hidden, rng));
    }
    return stack;
}

Tensor EncoderStack::apply(const Tensor& x, const AttentionMask* mask, const DropoutCtx& drop) const {
    Tensor h = x;
    for (const EncoderLayer& layer : layers) {
        h = layer.apply(h, mask, drop);
    }
    return h;
}

void EncoderStack::collect(const std::string& prefix, NamedParams& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].collect(prefix + ".layer" + std::to_string(i), out);
    }
}

DecoderStack DecoderStack::init(std::int64_t n_layers, std::int64_t width, std::int64_t heads,
                                std::int64_t ff_hidden, Rng& rng) {
    DecoderStack stack;
    for (std::int64_t i = 0; i < n_layers; ++i) {
        stack.layers.push_back(DecoderLayer::init(width, heads, ff_hidden, rng));
    }
    return stack;
}

Tensor DecoderStack::apply(const Tensor& targets, const Tensor& memory,
                           const AttentionMask* target_mask, const DropoutCtx& drop) const {
    Tensor h = targets;
    for (const DecoderLayer& layer : layers) {
        h = layer.apply(h, memory, target_mask, drop);
    }
    return h;
}

void DecoderStack::collect(const std::string& prefix, NamedParams& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].collect(prefix + ".layer" + std::to_string(i), out);
    }
}

}  // namespace shgvqa
