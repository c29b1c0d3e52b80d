#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "shgvqa/rng.hpp"
#include "shgvqa/tensor.hpp"
#include "shgvqa/transformer.hpp"
#include "test_util.hpp"

using namespace shgvqa;
using testutil::check_gradients;

namespace {

// Reference single-head attention math used to cross-check MultiHeadAttention.
std::vector<std::vector<double>> reference_weights(const MultiHeadAttention& mha, const Tensor& q,
                                                   const Tensor& k, std::int64_t head,
                                                   const AttentionMask* mask) {
    autograd::NoGradGuard ng;
    const std::int64_t width = mha.wq.weight.dim(0);
    const std::int64_t hd = width / mha.heads;
    Tensor qp = slice_cols(mha.wq.apply(q), head * hd, hd);
    Tensor kp = slice_cols(mha.wk.apply(k), head * hd, hd);
    const std::int64_t lq = q.dim(0), lk = k.dim(0);
    std::vector<std::vector<double>> weights(static_cast<std::size_t>(lq));
    for (std::int64_t i = 0; i < lq; ++i) {
        std::vector<double> row(static_cast<std::size_t>(lk));
        double mx = -HUGE_VAL;
        for (std::int64_t j = 0; j < lk; ++j) {
            double s = 0.0;
            for (std::int64_t c = 0; c < hd; ++c) {
                s += qp.at({i, c}) * kp.at({j, c});
            }
            s /= std::sqrt(static_cast<double>(hd));
            if (mask != nullptr && !mask->allowed(i, j)) {
                s += AttentionMask::kBlocked;
            }
            row[static_cast<std::size_t>(j)] = s;
            mx = std::max(mx, s);
        }
        double z = 0.0;
        for (auto& v : row) {
            v = std::exp(v - mx);
            z += v;
        }
        for (auto& v : row) v /= z;
        weights[static_cast<std::size_t>(i)] = row;
    }
    return weights;
}

}  // namespace

TEST_CASE("block-causal mask shapes and patterns") {
    AttentionMask one = AttentionMask::block_causal(1, 3);
    for (std::int64_t i = 0; i < 3; ++i) {
        for (std::int64_t j = 0; j < 3; ++j) {
            CHECK(one.allowed(i, j));
        }
    }

    AttentionMask m = AttentionMask::block_causal(2, 2);
    // rows 0-1 (frame 0) block columns 2-3 (frame 1); rows 2-3 all allowed
    for (std::int64_t i = 0; i < 2; ++i) {
        CHECK(m.allowed(i, 0));
        CHECK(m.allowed(i, 1));
        CHECK(!m.allowed(i, 2));
        CHECK(!m.allowed(i, 3));
    }
    for (std::int64_t i = 2; i < 4; ++i) {
        for (std::int64_t j = 0; j < 4; ++j) {
            CHECK(m.allowed(i, j));
        }
    }

    // Q=1 degenerates to the standard lower-triangular causal mask
    AttentionMask c = AttentionMask::block_causal(3, 1);
    for (std::int64_t i = 0; i < 3; ++i) {
        for (std::int64_t j = 0; j < 3; ++j) {
            CHECK(c.allowed(i, j) == (j <= i));
        }
    }
}

TEST_CASE("fully blocked rows are rejected at construction") {
    std::vector<std::uint8_t> allowed = {1, 1, 0, 0};
    CHECK_THROWS_AS(AttentionMask::from_allowed(allowed, 2, 2), std::invalid_argument);
    std::vector<std::uint8_t> none(3, 0);
    CHECK_THROWS_AS(AttentionMask::from_key_bits(none, 2), std::invalid_argument);
}

TEST_CASE("single-key attention ignores the query") {
    Rng rng(3);
    MultiHeadAttention mha = MultiHeadAttention::init(8, 2, rng);
    Tensor k = Tensor::randn({1, 8}, rng);
    Tensor v = Tensor::randn({1, 8}, rng);
    Tensor q1 = Tensor::randn({1, 8}, rng);
    Tensor q2 = Tensor::randn({1, 8}, rng);
    Tensor o1 = mha.apply(q1, k, v, nullptr);
    Tensor o2 = mha.apply(q2, k, v, nullptr);
    for (std::int64_t i = 0; i < 8; ++i) {
        CHECK(o1.at({0, i}) == doctest::Approx(o2.at({0, i})).epsilon(1e-12));
    }
    // equals value row pushed through wv then wo
    autograd::NoGradGuard ng;
    Tensor expected = mha.wo.apply(mha.wv.apply(v));
    for (std::int64_t i = 0; i < 8; ++i) {
        CHECK(o1.at({0, i}) == doctest::Approx(expected.at({0, i})).epsilon(1e-9));
    }
}

TEST_CASE("mask forcing one key yields one-hot attention") {
    Rng rng(5);
    MultiHeadAttention mha = MultiHeadAttention::init(8, 2, rng);
    Tensor q = Tensor::randn({2, 8}, rng);
    Tensor k = Tensor::randn({4, 8}, rng);
    Tensor v = Tensor::randn({4, 8}, rng);
    std::vector<std::uint8_t> key_bits = {0, 0, 1, 0};
    AttentionMask mask = AttentionMask::from_key_bits(key_bits, 2);
    for (std::int64_t h = 0; h < 2; ++h) {
        auto w = reference_weights(mha, q, k, h, &mask);
        for (const auto& row : w) {
            CHECK(row[0] == 0.0);
            CHECK(row[1] == 0.0);
            CHECK(row[2] == 1.0);
            CHECK(row[3] == 0.0);
        }
    }
    // output equals attention restricted to key/value row 2
    Tensor out = mha.apply(q, k, v, &mask);
    Tensor k2 = Tensor::from_data({1, 8}, std::vector<double>(k.data().begin() + 16,
                                                              k.data().begin() + 24));
    Tensor v2 = Tensor::from_data({1, 8}, std::vector<double>(v.data().begin() + 16,
                                                              v.data().begin() + 24));
    std::vector<Tensor> qs = {slice_rows(q, 0, 1), slice_rows(q, 1, 1)};
    for (std::int64_t i = 0; i < 2; ++i) {
        Tensor oi = mha.apply(qs[static_cast<std::size_t>(i)], k2, v2, nullptr);
        for (std::int64_t c = 0; c < 8; ++c) {
            CHECK(out.at({i, c}) == doctest::Approx(oi.at({0, c})).epsilon(1e-12));
        }
    }
    autograd::clear_tape();
}

TEST_CASE("attention rows sum to one and gradients check out") {
    Rng rng(7);
    MultiHeadAttention mha = MultiHeadAttention::init(8, 2, rng);
    Tensor q = Tensor::randn({3, 8}, rng, 1.0, true);
    Tensor k = Tensor::randn({3, 8}, rng, 1.0, true);
    Tensor v = Tensor::randn({3, 8}, rng, 1.0, true);
    for (std::int64_t h = 0; h < 2; ++h) {
        auto w = reference_weights(mha, q, k, h, nullptr);
        for (const auto& row : w) {
            double s = 0.0;
            for (double x : row) s += x;
            CHECK(std::fabs(s - 1.0) < 1e-9);
        }
    }
    auto res = check_gradients({{"q", q}, {"k", k}, {"v", v}},
                               [&] { return sum(mha.apply(q, k, v, nullptr)); });
    CHECK(res.max_rel_error < 1e-4);

    NamedParams params;
    mha.collect("mha", params);
    res = check_gradients(params, [&] { return sum(mha.apply(q, k, v, nullptr)); });
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("masked attention leaks no gradient, exactly") {
    Rng rng(11);
    MultiHeadAttention mha = MultiHeadAttention::init(8, 2, rng);
    const std::int64_t lq = 3, lk = 4;
    std::vector<std::uint8_t> allowed(static_cast<std::size_t>(lq * lk));
    for (auto& a : allowed) a = rng.uniform() < 0.6 ? 1 : 0;
    for (std::int64_t i = 0; i < lq; ++i) {
        allowed[static_cast<std::size_t>(i * lk + (i % lk))] = 1;  // keep rows satisfiable
    }
    AttentionMask mask = AttentionMask::from_allowed(allowed, lq, lk);
    Tensor q = Tensor::randn({lq, 8}, rng, 1.0, false);
    Tensor k = Tensor::randn({lk, 8}, rng, 1.0, false);
    Tensor v = Tensor::randn({lk, 8}, rng, 1.0, true);
    for (std::int64_t i = 0; i < lq; ++i) {
        v.zero_grad();
        Tensor out = mha.apply(q, k, v, &mask);
        autograd::backward(sum(slice_rows(out, i, 1)));
        for (std::int64_t j = 0; j < lk; ++j) {
            if (mask.allowed(i, j)) continue;
            for (std::int64_t c = 0; c < 8; ++c) {
                CHECK(v.grad()[static_cast<std::size_t>(j * 8 + c)] == 0.0);
            }
        }
    }
}

TEST_CASE("empty encoder stack is the identity") {
    Rng rng(13);
    EncoderStack stack;  // zero layers
    Tensor x = Tensor::randn({5, 8}, rng);
    Tensor y = stack.apply(x);
    CHECK(y.id() == x.id());
}

TEST_CASE("encoder preserves shape and passes gradient check") {
    Rng rng(17);
    EncoderStack stack = EncoderStack::init(2, 16, 2, 32, rng);
    Tensor x = Tensor::randn({5, 16}, rng, 1.0, true);
    Tensor y = stack.apply(x);
    REQUIRE(y.shape() == Shape{5, 16});
    for (double v : y.data()) CHECK(std::isfinite(v));
    autograd::clear_tape();

    Tensor probe = Tensor::randn({5, 16}, rng, 1.0, false);
    auto loss = [&] { return sum(mul(stack.apply(x), probe)); };
    auto res = check_gradients({{"x", x}}, loss);
    CHECK(res.max_rel_error < 1e-4);

    NamedParams params;
    stack.collect("enc", params);
    res = check_gradients(params, loss);
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("encoder without positions is permutation equivariant") {
    Rng rng(19);
    EncoderStack stack = EncoderStack::init(2, 8, 2, 16, rng);
    Tensor x = Tensor::randn({4, 8}, rng);
    Tensor y = stack.apply(x);
    std::vector<std::int64_t> perm = {2, 0, 3, 1};
    std::vector<double> px(4 * 8);
    for (std::int64_t i = 0; i < 4; ++i) {
        for (std::int64_t c = 0; c < 8; ++c) {
            px[static_cast<std::size_t>(i * 8 + c)] = x.at({perm[static_cast<std::size_t>(i)], c});
        }
    }
    Tensor yp = stack.apply(Tensor::from_data({4, 8}, px));
    for (std::int64_t i = 0; i < 4; ++i) {
        for (std::int64_t c = 0; c < 8; ++c) {
            CHECK(yp.at({i, c}) ==
                  doctest::Approx(y.at({perm[static_cast<std::size_t>(i)], c})).epsilon(1e-9));
        }
    }
}

TEST_CASE("decoder with zeroed cross value projection ignores memory") {
    Rng rng(23);
    DecoderStack stack = DecoderStack::init(2, 8, 2, 16, rng);
    for (auto& layer : stack.layers) {
        std::fill(layer.cross_attn.wv.weight.raw_data().begin(),
                  layer.cross_attn.wv.weight.raw_data().end(), 0.0);
        std::fill(layer.cross_attn.wv.bias.raw_data().begin(),
                  layer.cross_attn.wv.bias.raw_data().end(), 0.0);
    }
    Tensor targets = Tensor::randn({4, 8}, rng);
    Tensor mem1 = Tensor::randn({3, 8}, rng);
    Tensor mem2 = Tensor::randn({3, 8}, rng);
    AttentionMask mask = AttentionMask::all_allowed(4, 4);
    Tensor y1 = stack.apply(targets, mem1, &mask);
    Tensor y2 = stack.apply(targets, mem2, &mask);
    for (std::int64_t i = 0; i < y1.size(); ++i) {
        CHECK(y1.data()[static_cast<std::size_t>(i)] == y2.data()[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("block-causal decoding: frame 0 sees no future queries") {
    Rng rng(29);
    DecoderStack stack = DecoderStack::init(2, 8, 2, 16, rng);
    const std::int64_t frames = 3, per_frame = 2;
    AttentionMask mask = AttentionMask::block_causal(frames, per_frame);
    Tensor targets = Tensor::randn({frames * per_frame, 8}, rng, 1.0, true);
    Tensor memory = Tensor::randn({4, 8}, rng);
    targets.zero_grad();
    Tensor out = stack.apply(targets, memory, &mask);
    autograd::backward(sum(slice_rows(out, 0, per_frame)));
    for (std::int64_t row = per_frame; row < frames * per_frame; ++row) {
        for (std::int64_t c = 0; c < 8; ++c) {
            CHECK(targets.grad()[static_cast<std::size_t>(row * 8 + c)] == 0.0);
        }
    }
}

TEST_CASE("decoder gradient check on toy sizes") {
    Rng rng(31);
    DecoderStack stack = DecoderStack::init(2, 16, 2, 32, rng);
    AttentionMask mask = AttentionMask::block_causal(3, 2);
    Tensor targets = Tensor::randn({6, 16}, rng, 1.0, true);
    Tensor memory = Tensor::randn({4, 16}, rng, 1.0, true);
    Tensor probe = Tensor::randn({6, 16}, rng, 1.0, false);
    auto loss = [&] { return sum(mul(stack.apply(targets, memory, &mask), probe)); };
    auto res = check_gradients({{"targets", targets}, {"memory", memory}}, loss);
    CHECK(res.max_rel_error < 1e-4);

    NamedParams params;
    stack.collect("dec", params);
    res = check_gradients(params, loss);
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("sinusoidal position 0 alternates sin0/cos0") {
    Tensor pe = position_encoding(4, 6, PositionalKind::sinusoidal);
    for (std::int64_t i = 0; i < 6; ++i) {
        CHECK(pe.at({0, i}) == (i % 2 == 0 ? 0.0 : 1.0));
    }
}

TEST_CASE("learned positional table has distinct rows") {
    Rng rng(37);
    Tensor pe = position_encoding(392, 768, PositionalKind::learned, &rng);
    REQUIRE(pe.shape() == Shape{392, 768});
    for (std::int64_t a = 0; a < 8; ++a) {
        for (std::int64_t b = a + 1; b < 8; ++b) {
            bool differ = false;
            for (std::int64_t c = 0; c < 768 && !differ; ++c) {
                differ = pe.at({a, c}) != pe.at({b, c});
            }
            CHECK(differ);
        }
    }
}

TEST_CASE("dropout in stacks keeps eval deterministic") {
    Rng rng(41);
    EncoderStack stack = EncoderStack::init(1, 8, 2, 16, rng);
    Tensor x = Tensor::randn({3, 8}, rng);
    Tensor a = stack.apply(x);
    Tensor b = stack.apply(x);
    for (std::int64_t i = 0; i < a.size(); ++i) {
        CHECK(a.data()[static_cast<std::size_t>(i)] == b.data()[static_cast<std::size_t>(i)]);
    }
    Rng drop_rng(7);
    DropoutCtx drop{0.5, &drop_rng};
    Tensor c = stack.apply(x, nullptr, drop);
    bool any_diff = false;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        any_diff = any_diff || a.data()[static_cast<std::size_t>(i)] !=
                                   c.data()[static_cast<std::size_t>(i)];
    }
    CHECK(any_diff);
}
