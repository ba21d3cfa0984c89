#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "css/rng.hpp"
#include "css/tensor.hpp"
#include "gradcheck.hpp"

using namespace css;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (int i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

std::vector<double> random_weights(int n, Rng& rng) {
    std::vector<double> w(static_cast<std::size_t>(n));
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    return w;
}

}  // namespace

TEST_CASE("matmul basics") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor v({2, 1}, {5, 6});
    Tensor r = matmul(nullptr, eye, v);
    CHECK(r.data()[0] == 5);
    CHECK(r.data()[1] == 6);

    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor ones({2, 1}, {1, 1});
    Tensor p = matmul(nullptr, a, ones);
    CHECK(p.data()[0] == 3);
    CHECK(p.data()[1] == 7);

    Tensor z = Tensor::zeros({2, 3});
    Tensor any({3, 1}, {4, -1, 2});
    Tensor zz = matmul(nullptr, z, any);
    CHECK(zz.data()[0] == 0);
    CHECK(zz.data()[1] == 0);

    CHECK_THROWS_AS(matmul(nullptr, a, Tensor::zeros({3, 1})), std::invalid_argument);
}

TEST_CASE("relu basics and gradient") {
    Tensor x({3}, {-1, 0, 2});
    Tensor y = relu(nullptr, x);
    CHECK(y.data()[0] == 0);
    CHECK(y.data()[1] == 0);
    CHECK(y.data()[2] == 2);

    Tape tape;
    Tensor a({2}, {-3, 3});
    tape.watch(a);
    Tensor loss = reduce_sum_all(&tape, relu(&tape, a));
    tape.backward(loss);
    CHECK(tape.grad(a.node)[0] == 0.0);
    CHECK(tape.grad(a.node)[1] == 1.0);
}

TEST_CASE("softmax values") {
    Tensor u({1, 4}, {3, 3, 3, 3});
    Tensor s = softmax(nullptr, u, 1);
    for (int i = 0; i < 4; ++i) CHECK(s.data()[i] == doctest::Approx(0.25).epsilon(1e-12));

    Tensor l({1, 3}, {2, 0, 0});
    Tensor p = softmax(nullptr, l, 1);
    const double e2 = std::exp(2.0);
    CHECK(p.data()[0] == doctest::Approx(e2 / (e2 + 2)).epsilon(1e-12));

    // additive shift invariance
    Rng rng(11);
    Tensor x = random_tensor({2, 5}, rng);
    Tensor xs = Tensor::zeros({2, 5});
    for (int i = 0; i < x.size(); ++i) xs.data()[i] = x.data()[i] + 100.0;
    Tensor s1 = softmax(nullptr, x, 1);
    Tensor s2 = softmax(nullptr, xs, 1);
    for (int i = 0; i < x.size(); ++i)
        CHECK(std::abs(s1.data()[i] - s2.data()[i]) < 1e-12);

    // rows sum to 1
    for (int r = 0; r < 2; ++r) {
        double sum = 0;
        for (int c = 0; c < 5; ++c) sum += s1.data()[r * 5 + c];
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("l2_normalize values") {
    Tensor v({1, 2}, {3, 4});
    Tensor n = l2_normalize(nullptr, v, 1);
    CHECK(n.data()[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(n.data()[1] == doctest::Approx(0.8).epsilon(1e-12));

    Tensor u({1, 2}, {1, 0});
    Tensor nu = l2_normalize(nullptr, u, 1);
    CHECK(nu.data()[0] == 1.0);
    CHECK(nu.data()[1] == 0.0);

    Tensor z({1, 2}, {0, 0});
    Tensor nz = l2_normalize(nullptr, z, 1);
    CHECK(nz.data()[0] == 0.0);
    CHECK(nz.data()[1] == 0.0);
}

TEST_CASE("reductions, log, exp") {
    Tensor x({3}, {1, 2, 3});
    CHECK(reduce_sum_all(nullptr, x).item() == 6.0);
    Tensor c = Tensor::full({4}, 2.5);
    CHECK(reduce_mean_all(nullptr, c).item() == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(exp_t(nullptr, Tensor::scalar(0)).item() == 1.0);
    CHECK(log_t(nullptr, Tensor::scalar(1)).item() == 0.0);
}

TEST_CASE("im2col shapes and values") {
    CHECK_THROWS_AS(im2col(nullptr, Tensor::zeros({1, 1}), 1, 1, 1, 2), std::invalid_argument);

    Tensor single({1, 1}, {7});
    Tensor col = im2col(nullptr, single, 1, 1, 1, 3);
    CHECK(col.shape[0] == 1);
    CHECK(col.shape[1] == 9);
    int nonzero = 0;
    for (int i = 0; i < 9; ++i)
        if (col.data()[i] != 0) ++nonzero;
    CHECK(nonzero == 1);
    CHECK(col.data()[4] == 7);  // center of the 3x3 window

    Tensor nine = Tensor::zeros({9, 1});
    for (int i = 0; i < 9; ++i) nine.data()[i] = i + 1;
    Tensor c9 = im2col(nullptr, nine, 3, 3, 1, 3);
    CHECK(c9.shape[0] == 9);
    CHECK(c9.shape[1] == 9);

    // interior pixel of a constant image gathers the full window
    Tensor big = Tensor::full({25, 1}, 1.0);
    Tensor cb = im2col(nullptr, big, 5, 5, 1, 3);
    double s = 0;
    const int center = 2 * 5 + 2;
    for (int j = 0; j < 9; ++j) s += cb.data()[center * 9 + j];
    CHECK(s == 9.0);
}

TEST_CASE("im2col + matmul equals brute-force convolution") {
    Rng rng(42);
    for (int trial = 0; trial < 5; ++trial) {
        const int H = 5, W = 5, Cin = 2, Cout = 3, K = 3;
        Tensor x = random_tensor({H * W, Cin}, rng);
        Tensor w = random_tensor({Cin * K * K, Cout}, rng);
        Tensor y = matmul(nullptr, im2col(nullptr, x, H, W, Cin, K), w);

        // brute-force sliding window oracle
        for (int py = 0; py < H; ++py)
            for (int px = 0; px < W; ++px)
                for (int co = 0; co < Cout; ++co) {
                    double acc = 0;
                    for (int c = 0; c < Cin; ++c)
                        for (int ky = 0; ky < K; ++ky)
                            for (int kx = 0; kx < K; ++kx) {
                                int sy = py + ky - 1, sx = px + kx - 1;
                                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                                acc += x.data()[(sy * W + sx) * Cin + c] *
                                       w.data()[(c * K * K + ky * K + kx) * Cout + co];
                            }
                    CHECK(y.data()[(py * W + px) * Cout + co] == doctest::Approx(acc).epsilon(1e-12));
                }
    }
}

TEST_CASE("backward basics") {
    {
        Tape tape;
        Tensor x({3}, {1, 2, 3});
        tape.watch(x);
        tape.backward(reduce_sum_all(&tape, x));
        for (int i = 0; i < 3; ++i) CHECK(tape.grad(x.node)[i] == 1.0);
    }
    {
        Tape tape;
        Tensor x = Tensor::scalar(3.0);
        tape.watch(x);
        Tensor loss = mul(&tape, x, x);
        tape.backward(loss);
        CHECK(tape.grad(x.node)[0] == 6.0);
    }
    {
        // non-scalar loss rejected
        Tape tape;
        Tensor x({2}, {1, 2});
        tape.watch(x);
        Tensor y = relu(&tape, x);
        CHECK_THROWS_AS(tape.backward(y), std::logic_error);
    }
}

TEST_CASE("fan-out accumulates branch gradients") {
    Tape tape;
    Tensor x({2}, {0.3, -0.4});
    tape.watch(x);
    Tensor b1 = scale(&tape, x, 2.0);
    Tensor b2 = mul(&tape, x, x);
    Tensor loss = reduce_sum_all(&tape, add(&tape, b1, b2));
    tape.backward(loss);
    // d/dx (2x + x^2) = 2 + 2x
    CHECK(tape.grad(x.node)[0] == doctest::Approx(2 + 0.6).epsilon(1e-14));
    CHECK(tape.grad(x.node)[1] == doctest::Approx(2 - 0.8).epsilon(1e-14));

    // matches the sum of single-branch runs
    Tape t1;
    Tensor x1({2}, {0.3, -0.4});
    t1.watch(x1);
    t1.backward(reduce_sum_all(&t1, scale(&t1, x1, 2.0)));
    Tape t2;
    Tensor x2({2}, {0.3, -0.4});
    t2.watch(x2);
    t2.backward(reduce_sum_all(&t2, mul(&t2, x2, x2)));
    for (int i = 0; i < 2; ++i)
        CHECK(tape.grad(x.node)[i] ==
              doctest::Approx(t1.grad(x1.node)[i] + t2.grad(x2.node)[i]).epsilon(1e-14));
}

TEST_CASE("random 3-layer composition matches finite differences") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor w1 = random_tensor({4, 4}, rng);
        Tensor w2 = random_tensor({4, 3}, rng);
        Tensor x0 = random_tensor({2, 4}, rng);
        auto forward = [&](const std::vector<double>& vals, Tape* tape, int* node) {
            Tensor x(x0.shape, vals);
            if (tape) {
                tape->watch(x);
                *node = x.node;
            }
            Tensor h1 = relu(tape, matmul(tape, x, w1));
            Tensor h2 = softmax(tape, matmul(tape, h1, w2), 1);
            return reduce_sum_all(tape, mul(tape, h2, h2));
        };
        Tape tape;
        int node = -1;
        Tensor loss = forward(*x0.store, &tape, &node);
        tape.backward(loss);
        auto f = [&](const std::vector<double>& vals) {
            return forward(vals, nullptr, nullptr).item();
        };
        double err = gradcheck::relative_error(f, *x0.store, tape.grad(node));
        CHECK(err < 1e-5);
    }
}

TEST_CASE("gradient check per primitive on random inputs") {
    Rng rng(1234);
    int count = 0;
    auto shapes = [&]() -> std::vector<int> {
        return {static_cast<int>(rng.next_below(4)) + 1, static_cast<int>(rng.next_below(4)) + 1};
    };
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> sh = shapes();
        Tensor x = random_tensor(sh, rng);
        std::vector<double> w = random_weights(x.size(), rng);

        switch (trial % 8) {
            case 0:
                CHECK(gradcheck::check_op(
                          [](Tape* t, const Tensor& a) { return relu(t, a); }, x, w) < 1e-5);
                break;
            case 1:
                CHECK(gradcheck::check_op(
                          [](Tape* t, const Tensor& a) { return softmax(t, a, 1); }, x, w) < 1e-5);
                break;
            case 2:
                CHECK(gradcheck::check_op(
                          [](Tape* t, const Tensor& a) { return log_softmax(t, a, 1); }, x, w) <
                      1e-5);
                break;
            case 3:
                CHECK(gradcheck::check_op(
                          [](Tape* t, const Tensor& a) { return exp_t(t, a); }, x, w) < 1e-5);
                break;
            case 4: {
                Tensor xp = random_tensor(sh, rng, 0.5, 2.0);
                CHECK(gradcheck::check_op(
                          [](Tape* t, const Tensor& a) { return log_t(t, a); }, xp, w) < 1e-5);
                break;
            }
            case 5: {
                Tensor xn = random_tensor(sh, rng, 0.5, 1.5);  // away from the norm clamp
                CHECK(gradcheck::check_op(
                          [](Tape* t, const Tensor& a) { return l2_normalize(t, a, 1); }, xn, w) <
                      1e-5);
                break;
            }
            case 6: {
                Tensor b = random_tensor(sh, rng);
                std::vector<double> wm = random_weights(x.size(), rng);
                CHECK(gradcheck::check_op(
                          [&b](Tape* t, const Tensor& a) { return mul(t, a, b); }, x, wm) < 1e-5);
                break;
            }
            case 7: {
                Tensor m = random_tensor({sh[1], 3}, rng);
                std::vector<double> wmm = random_weights(sh[0] * 3, rng);
                CHECK(gradcheck::check_op(
                          [&m](Tape* t, const Tensor& a) { return matmul(t, a, m); }, x, wmm) <
                      1e-5);
                break;
            }
        }
        ++count;
    }
    CHECK(count == 100);
}

TEST_CASE("logsumexp and axis reductions gradients") {
    Rng rng(99);
    Tensor x = random_tensor({3, 4}, rng);
    std::vector<double> w = random_weights(3, rng);
    CHECK(gradcheck::check_op(
              [](Tape* t, const Tensor& a) { return logsumexp(t, a, 1); }, x, w) < 1e-5);
    CHECK(gradcheck::check_op(
              [](Tape* t, const Tensor& a) { return reduce_sum(t, a, 1); }, x, w) < 1e-5);
    std::vector<double> w4 = random_weights(4, rng);
    CHECK(gradcheck::check_op(
              [](Tape* t, const Tensor& a) { return reduce_mean(t, a, 0); }, x, w4) < 1e-5);
}

TEST_CASE("im2col gradient") {
    Rng rng(5);
    Tensor x = random_tensor({9, 2}, rng);
    std::vector<double> w = random_weights(9 * 2 * 9, rng);
    CHECK(gradcheck::check_op(
              [](Tape* t, const Tensor& a) { return im2col(t, a, 3, 3, 2, 3); }, x, w) < 1e-5);
}

TEST_CASE("gather/concat/transpose gradients") {
    Rng rng(6);
    Tensor x = random_tensor({4, 3}, rng);
    std::vector<int> rows{2, 0, 2};
    std::vector<double> w = random_weights(9, rng);
    CHECK(gradcheck::check_op(
              [&rows](Tape* t, const Tensor& a) { return gather_rows(t, a, rows); }, x, w) < 1e-5);
    Tensor b = random_tensor({4, 2}, rng);
    std::vector<double> w2 = random_weights(20, rng);
    CHECK(gradcheck::check_op(
              [&b](Tape* t, const Tensor& a) { return concat_cols(t, a, b); }, x, w2) < 1e-5);
    std::vector<double> w3 = random_weights(12, rng);
    CHECK(gradcheck::check_op(
              [](Tape* t, const Tensor& a) { return transpose(t, a); }, x, w3) < 1e-5);
}

TEST_CASE("broadcast add/mul with bias rows") {
    Tape tape;
    Tensor m({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor bias({1, 3}, {10, 20, 30});
    tape.watch(m);
    tape.watch(bias);
    Tensor y = add(&tape, m, bias);
    CHECK(y.data()[0] == 11);
    CHECK(y.data()[5] == 36);
    tape.backward(reduce_sum_all(&tape, y));
    for (int i = 0; i < 6; ++i) CHECK(tape.grad(m.node)[i] == 1.0);
    for (int i = 0; i < 3; ++i) CHECK(tape.grad(bias.node)[i] == 2.0);  // summed over rows
}

TEST_CASE("sgd_step") {
    {
        Tape tape;
        Tensor p({1}, {1.0});
        tape.watch(p);
        Tensor loss = scale(&tape, p, 2.0);
        tape.backward(loss);
        std::vector<double> before = *p.store;
        Tensor p0 = p;
        sgd_step({&p0}, tape, 0.0);
        CHECK((*p0.store)[0] == before[0]);
    }
    {
        Tape tape;
        Tensor p({1}, {1.0});
        tape.watch(p);
        Tensor loss = scale(&tape, p, 2.0);  // grad = 2
        tape.backward(loss);
        sgd_step({&p}, tape, 0.1);
        CHECK((*p.store)[0] == doctest::Approx(0.8).epsilon(1e-15));
    }
    {
        // two steps of lr=0.5 on x^2 from x=1 reach exactly 0
        Tensor x({1}, {1.0});
        for (int i = 0; i < 2; ++i) {
            Tape tape;
            tape.watch(x);
            Tensor loss = mul(&tape, x, x);
            tape.backward(loss);
            sgd_step({&x}, tape, 0.5);
        }
        CHECK((*x.store)[0] == 0.0);
    }
}
