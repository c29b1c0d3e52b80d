#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "shgvqa/optimizer.hpp"
#include "shgvqa/rng.hpp"
#include "shgvqa/tensor.hpp"
#include "test_util.hpp"

using namespace shgvqa;
using testutil::check_gradients;

TEST_CASE("matmul identity and projection") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor r = matmul(eye, a);
    CHECK(r.data()[0] == 1);
    CHECK(r.data()[1] == 2);
    CHECK(r.data()[2] == 3);
    CHECK(r.data()[3] == 4);

    Tensor proj = Tensor::from_data({2, 2}, {1, 0, 0, 0});
    Tensor v = Tensor::from_data({2, 1}, {5, 7});
    Tensor p = matmul(proj, v);
    CHECK(p.data()[0] == 5);
    CHECK(p.data()[1] == 0);
}

TEST_CASE("matmul shape errors name both shapes") {
    Tensor a = Tensor::zeros({3, 4});
    Tensor b = Tensor::zeros({5, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[3,4]"), std::invalid_argument);
}

TEST_CASE("matmul gradient vs finite differences") {
    Rng rng(17);
    Tensor a = testutil::random_tensor({3, 4}, rng);
    Tensor b = testutil::random_tensor({4, 2}, rng);
    auto res = check_gradients({{"a", a}, {"b", b}}, [&] { return sum(matmul(a, b)); });
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("matmul broadcasts batch dimensions") {
    Rng rng(5);
    Tensor a = testutil::random_tensor({2, 3, 4}, rng);
    Tensor b = testutil::random_tensor({4, 2}, rng);
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{2, 3, 2});
    // compare against per-slice 2-D products
    for (std::int64_t s = 0; s < 2; ++s) {
        autograd::NoGradGuard ng;
        std::vector<double> slice(a.data().begin() + s * 12, a.data().begin() + (s + 1) * 12);
        Tensor as = Tensor::from_data({3, 4}, slice);
        Tensor cs = matmul(as, b);
        for (std::int64_t i = 0; i < 6; ++i) {
            CHECK(c.data()[static_cast<std::size_t>(s * 6 + i)] ==
                  doctest::Approx(cs.data()[static_cast<std::size_t>(i)]).epsilon(1e-12));
        }
    }
    auto res = check_gradients({{"a", a}, {"b", b}}, [&] { return sum(matmul(a, b)); });
    CHECK(res.max_rel_error < 1e-6);
    autograd::clear_tape();
}

TEST_CASE("softmax symmetry, stability and frozen values") {
    Tensor x = Tensor::from_data({3}, {0, 0, 0});
    Tensor y = softmax(x, 0);
    for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    Tensor big = Tensor::from_data({2}, {1000, 0});
    Tensor yb = softmax(big, 0);
    CHECK(yb.data()[0] == 1.0);
    CHECK(yb.data()[1] == 0.0);

    Tensor z = softmax(Tensor::from_data({3}, {1, 2, 3}), 0);
    CHECK(z.data()[0] == doctest::Approx(0.09003057317038046).epsilon(1e-12));
    CHECK(z.data()[1] == doctest::Approx(0.24472847105479767).epsilon(1e-12));
    CHECK(z.data()[2] == doctest::Approx(0.6652409557748219).epsilon(1e-12));
}

TEST_CASE("softmax rows form a probability simplex") {
    Rng rng(23);
    for (int it = 0; it < 20; ++it) {
        Tensor x = testutil::random_tensor({4, 7}, rng, false, 5.0);
        const int axis = static_cast<int>(rng.uniform_int(2));
        Tensor y = softmax(x, axis);
        const std::int64_t n = y.dim(axis);
        const std::int64_t other = y.size() / n;
        for (std::int64_t o = 0; o < other; ++o) {
            double s = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                const std::int64_t flat = axis == 0 ? i * other + o : o * n + i;
                const double v = y.data()[static_cast<std::size_t>(flat)];
                CHECK(v >= 0.0);
                s += v;
            }
            CHECK(std::fabs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("softmax gradient") {
    Rng rng(31);
    Tensor x = testutil::random_tensor({3, 5}, rng);
    Tensor w = testutil::random_tensor({3, 5}, rng, false);
    auto res = check_gradients({{"x", x}}, [&] { return sum(mul(softmax(x, 1), w)); });
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("layer_norm basics") {
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor bias = Tensor::zeros({4});
    Tensor c = Tensor::full({4}, 3.25);
    Tensor out = layer_norm(c, gain, bias, 1e-5);
    for (double v : out.data()) CHECK(std::fabs(v) < 1e-9);

    Tensor g2 = Tensor::full({2}, 1.0);
    Tensor b2 = Tensor::zeros({2});
    Tensor two = Tensor::from_data({2}, {1, 3});
    Tensor o2 = layer_norm(two, g2, b2, 0.0);
    CHECK(o2.data()[0] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(o2.data()[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("layer_norm output statistics") {
    Rng rng(7);
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor bias = Tensor::zeros({4});
    Tensor x = testutil::random_tensor({4}, rng, false, 2.0);
    Tensor y = layer_norm(x, gain, bias, 1e-5);
    double mu = 0.0;
    for (double v : y.data()) mu += v;
    mu /= 4.0;
    CHECK(std::fabs(mu) < 1e-9);
    double var = 0.0;
    for (double v : y.data()) var += (v - mu) * (v - mu);
    var /= 4.0;
    CHECK(std::fabs(var - 1.0) < 1e-4);  // eps=1e-5 shifts variance slightly below 1
}

TEST_CASE("layer_norm gradient incl gain and bias") {
    Rng rng(11);
    Tensor x = testutil::random_tensor({3, 6}, rng);
    Tensor gain = testutil::random_tensor({6}, rng);
    Tensor bias = testutil::random_tensor({6}, rng);
    Tensor w = testutil::random_tensor({3, 6}, rng, false);
    auto res = check_gradients({{"x", x}, {"gain", gain}, {"bias", bias}},
                               [&] { return sum(mul(layer_norm(x, gain, bias, 1e-5), w)); });
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gelu fixed points and frozen value") {
    Tensor z = gelu(Tensor::scalar(0.0));
    CHECK(z.item() == 0.0);
    CHECK(gelu(Tensor::scalar(20.0)).item() == doctest::Approx(20.0).epsilon(1e-9));
    CHECK(std::fabs(gelu(Tensor::scalar(-20.0)).item()) < 1e-8);
    CHECK(gelu(Tensor::scalar(1.0)).item() == doctest::Approx(0.8411919906082768).epsilon(1e-12));
    // monotone above the dip at x ~ -0.75
    double prev = -HUGE_VAL;
    for (double v = -0.7; v <= 5.0; v += 0.125) {
        const double y = gelu(Tensor::scalar(v)).item();
        CHECK(y >= prev - 1e-12);
        prev = y;
    }
}

TEST_CASE("gelu gradient") {
    Rng rng(13);
    Tensor x = testutil::random_tensor({10}, rng);
    auto res = check_gradients({{"x", x}}, [&] { return sum(gelu(x)); });
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("cross_entropy frozen values and errors") {
    Tensor sharp = Tensor::from_data({3}, {20, 0, 0});
    CHECK(cross_entropy(sharp, 0).item() == doctest::Approx(4.1223072363804075e-09).epsilon(1e-6));

    Tensor two = Tensor::from_data({2}, {0, 0});
    CHECK(cross_entropy(two, 0).item() == doctest::Approx(0.6931471805599453).epsilon(1e-12));

    Tensor five = Tensor::zeros({5});
    CHECK(cross_entropy(five, 3).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));

    CHECK_THROWS_AS(cross_entropy(two, 2), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy(two, -1), std::out_of_range);
}

TEST_CASE("cross_entropy gradient") {
    Rng rng(19);
    Tensor logits = testutil::random_tensor({4, 6}, rng);
    std::vector<std::int64_t> targets = {1, 0, 5, 3};
    auto res = check_gradients({{"logits", logits}},
                               [&] { return cross_entropy_rows(logits, targets); });
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("backward populates adjoints") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor loss = sum(x);
    autograd::backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);

    Tensor a = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor b = Tensor::from_data({3}, {4, 5, 6}, true);
    Tensor dot = sum(mul(a, b));
    autograd::backward(dot);
    for (int i = 0; i < 3; ++i) {
        CHECK(a.grad()[static_cast<std::size_t>(i)] == b.data()[static_cast<std::size_t>(i)]);
        CHECK(b.grad()[static_cast<std::size_t>(i)] == a.data()[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("backward rejects non-scalar loss and double backward") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(autograd::backward(y), std::invalid_argument);
    autograd::clear_tape();

    Tensor z = sum(mul(x, x));
    autograd::backward(z);
    CHECK_THROWS_AS(autograd::backward(z), std::logic_error);
}

TEST_CASE("gradients accumulate across backward calls") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    autograd::backward(sum(x));
    autograd::backward(sum(x));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("structural ops gradients") {
    Rng rng(37);
    Tensor x = testutil::random_tensor({4, 6}, rng);
    Tensor table = testutil::random_tensor({5, 3}, rng);
    Tensor w = testutil::random_tensor({4, 2}, rng, false);
    std::vector<std::int64_t> idx = {0, 3, 3, 1};

    auto res = check_gradients({{"x", x}}, [&] { return sum(mul(slice_cols(x, 1, 2), w)); });
    CHECK(res.max_rel_error < 1e-6);

    res = check_gradients({{"x", x}}, [&] { return sum(slice_rows(x, 1, 2)); });
    CHECK(res.max_rel_error < 1e-6);

    res = check_gradients({{"table", table}}, [&] { return sum(rows(table, idx)); });
    CHECK(res.max_rel_error < 1e-6);

    res = check_gradients({{"x", x}}, [&] {
        std::vector<Tensor> parts = {slice_cols(x, 0, 3), slice_cols(x, 3, 3)};
        return sum(concat_cols(parts));
    });
    CHECK(res.max_rel_error < 1e-6);

    res = check_gradients({{"x", x}}, [&] {
        std::vector<Tensor> parts = {slice_rows(x, 0, 2), slice_rows(x, 2, 2)};
        return sum(concat_rows(parts));
    });
    CHECK(res.max_rel_error < 1e-6);

    res = check_gradients({{"x", x}}, [&] { return sum(reshape(transpose(x), {4, 6})); });
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("add broadcasts a suffix bias") {
    Rng rng(41);
    Tensor x = testutil::random_tensor({3, 4}, rng);
    Tensor b = testutil::random_tensor({4}, rng);
    Tensor y = add(x, b);
    CHECK(y.at({2, 1}) == doctest::Approx(x.at({2, 1}) + b.at({1})).epsilon(1e-12));
    auto res = check_gradients({{"x", x}, {"b", b}}, [&] { return sum(mul(add(x, b), add(x, b))); });
    CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("dropout scales and masks deterministically") {
    Rng rng(2024);
    Tensor x = Tensor::full({1000}, 1.0, true);
    Tensor y = dropout(x, 0.25, rng);
    int kept = 0;
    for (double v : y.data()) {
        CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75).epsilon(1e-12)));
        if (v != 0.0) ++kept;
    }
    CHECK(kept > 650);
    CHECK(kept < 850);
    autograd::clear_tape();

    Rng r2(99);
    Tensor same = dropout(x, 0.0, r2);
    CHECK(same.id() == x.id());
    autograd::clear_tape();
}

TEST_CASE("optimizer: zero gradient is a fixed point") {
    Tensor p = Tensor::from_data({3}, {1, 2, 3}, true);
    AdamOptimizer opt({{"p", p}}, LrSchedule{0.1, 0.0, 0});
    for (int i = 0; i < 5; ++i) {
        opt.step();
    }
    CHECK(p.data()[0] == 1.0);
    CHECK(p.data()[1] == 2.0);
    CHECK(p.data()[2] == 3.0);
}

TEST_CASE("optimizer: first step magnitude is ~lr under bias correction") {
    Tensor p = Tensor::scalar(0.0, true);
    AdamOptimizer opt({{"p", p}}, LrSchedule{0.1, 0.0, 0});
    p.zero_grad();
    p.raw_grad()[0] = 1.0;
    opt.step();
    CHECK(p.item() == doctest::Approx(-0.09999999900000009).epsilon(1e-12));
    // grads zeroed after the step
    CHECK(p.grad()[0] == 0.0);
}

TEST_CASE("optimizer: warmup schedule") {
    LrSchedule sched{1.0, 0.1, 100};
    CHECK(sched.lr_at(5) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(sched.lr_at(10) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sched.lr_at(55) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(sched.lr_at(100) == 0.0);
    for (std::int64_t t = 1; t <= 120; ++t) {
        CHECK(sched.lr_at(t) >= 0.0);
    }
}

TEST_CASE("optimizer: missing grad names the parameter") {
    Tensor p = Tensor::scalar(0.0, true);
    AdamOptimizer opt({{"embedding.weight", p}}, LrSchedule{0.1, 0.0, 0});
    p.drop_grad();
    CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("embedding.weight"), std::logic_error);
}

TEST_CASE("deterministic trajectories over 100 steps") {
    auto run = [] {
        Rng rng(4242);
        Tensor w = Tensor::randn({4, 4}, rng, 0.5, true);
        Tensor x = Tensor::randn({4, 4}, rng, 1.0, false);
        AdamOptimizer opt({{"w", w}}, LrSchedule{1e-2, 0.1, 100});
        for (int step = 0; step < 100; ++step) {
            Tensor diff = sub(matmul(x, w), x);
            Tensor loss = sum(mul(diff, diff));
            autograd::backward(loss);
            opt.step();
        }
        return std::vector<double>(w.data().begin(), w.data().end());
    };
    auto a = run();
    auto b = run();
    CHECK(a == b);
}
