#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "css/losses.hpp"
#include "css/model.hpp"
#include "css/rng.hpp"
#include "gradcheck.hpp"

using namespace css;

namespace {
PrototypeBank make_bank(const std::vector<std::vector<double>>& protos) {
    PrototypeBank bank(static_cast<int>(protos.size()), static_cast<int>(protos[0].size()), 0.9);
    std::map<int, ClassCentroid> cs;
    for (std::size_t c = 0; c < protos.size(); ++c) cs[static_cast<int>(c)] = {protos[c], 1};
    bank.ema_update(cs);
    return bank;
}
}  // namespace

TEST_CASE("supervised loss values") {
    // uniform logits, 2 classes -> ln 2
    Tensor logits({2, 2}, {0, 0, 0, 0});
    Tensor l = supervised_loss(nullptr, logits, {0, 1});
    CHECK(l.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // huge margin on the correct class -> loss near 0
    Tensor big({1, 2}, {50.0, 0.0});
    CHECK(supervised_loss(nullptr, big, {0}).item() < 1e-12);

    // logits (2,0), true class 0
    Tensor two({1, 2}, {2.0, 0.0});
    const double expect = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
    CHECK(supervised_loss(nullptr, two, {0}).item() == doctest::Approx(expect).epsilon(1e-12));

    CHECK_THROWS_AS(supervised_loss(nullptr, Tensor::zeros({0, 2}), {}), std::logic_error);
}

TEST_CASE("unsupervised loss masking") {
    Tensor logits({2, 2}, {2, 0, 0, 2});
    // empty mask -> exact zero, not on the tape
    Tape tape;
    Tensor l0 = unsupervised_loss(&tape, logits, {0, 1}, {false, false});
    CHECK(l0.item() == 0.0);
    CHECK(l0.node == -1);

    // single pixel mean equals that pixel's CE
    Tensor one = unsupervised_loss(nullptr, logits, {0, 1}, {true, false});
    const double expect = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
    CHECK(one.item() == doctest::Approx(expect).epsilon(1e-12));

    // full mask with ground truth equals the supervised loss exactly
    Rng rng(3);
    Tensor rl = Tensor::zeros({6, 3});
    for (int i = 0; i < rl.size(); ++i) rl.data()[i] = rng.uniform(-2, 2);
    std::vector<int> y{0, 2, 1, 1, 0, 2};
    CHECK(unsupervised_loss(nullptr, rl, y, std::vector<bool>(6, true)).item() ==
          supervised_loss(nullptr, rl, y).item());
}

TEST_CASE("contrastive loss values") {
    auto bank = make_bank({{1, 0}, {0, 1}});
    // anchor identical to its prototype, no negatives -> 0
    {
        Tensor reps({1, 2}, {1, 0});
        std::map<int, std::vector<int>> anchors{{0, {0}}};
        Tensor l = contrastive_loss(nullptr, reps, anchors, {}, bank, 0.5);
        CHECK(l.item() == 0.0);
    }
    // anchor sim 1.0 to prototype, one negative at sim 0.0, tau 0.5
    {
        Tensor reps({2, 2}, {1, 0, 0, 1});
        std::map<int, std::vector<int>> anchors{{0, {0}}};
        std::map<int, std::vector<int>> negs{{0, {1}}};
        Tensor l = contrastive_loss(nullptr, reps, anchors, negs, bank, 0.5);
        const double expect = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
        CHECK(l.item() == doctest::Approx(expect).epsilon(1e-12));
    }
    // raising a negative's similarity raises the loss
    {
        double prev = -1;
        for (double s : {-0.5, 0.0, 0.5, 0.9}) {
            Tensor reps({2, 2}, {1, 0, s, std::sqrt(1 - s * s)});
            std::map<int, std::vector<int>> anchors{{0, {0}}};
            std::map<int, std::vector<int>> negs{{0, {1}}};
            double l = contrastive_loss(nullptr, reps, anchors, negs, bank, 0.5).item();
            CHECK(l > prev);
            prev = l;
        }
    }
    CHECK_THROWS_AS(contrastive_loss(nullptr, Tensor::zeros({1, 2}), {{0, {0}}}, {}, bank, 0.0),
                    ConfigError);
}

TEST_CASE("contrastive loss is order invariant") {
    Rng rng(9);
    auto bank = make_bank({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    Tensor reps = Tensor::zeros({10, 3});
    for (int i = 0; i < 10; ++i) {
        double n = 0;
        for (int d = 0; d < 3; ++d) {
            reps.data()[i * 3 + d] = rng.normal();
            n += reps.data()[i * 3 + d] * reps.data()[i * 3 + d];
        }
        for (int d = 0; d < 3; ++d) reps.data()[i * 3 + d] /= std::sqrt(n);
    }
    std::map<int, std::vector<int>> a1{{0, {0, 1, 2}}, {1, {3, 4}}};
    std::map<int, std::vector<int>> n1{{0, {5, 6, 7}}, {1, {8, 9}}};
    std::map<int, std::vector<int>> a2{{0, {2, 0, 1}}, {1, {4, 3}}};
    std::map<int, std::vector<int>> n2{{0, {7, 5, 6}}, {1, {9, 8}}};
    double l1 = contrastive_loss(nullptr, reps, a1, n1, bank, 0.5).item();
    double l2 = contrastive_loss(nullptr, reps, a2, n2, bank, 0.5).item();
    CHECK(std::abs(l1 - l2) < 1e-12);
}

TEST_CASE("one anchor step toward its prototype decreases the loss") {
    auto bank = make_bank({{1, 0}, {0, 1}});
    std::map<int, std::vector<int>> anchors{{0, {0}}};
    std::map<int, std::vector<int>> negs{{0, {1}}};
    Tensor reps({2, 2}, {0.6, 0.8, 0.0, 1.0});

    Tape tape;
    tape.watch(reps);
    Tensor l = contrastive_loss(&tape, reps, anchors, negs, bank, 0.5);
    const double before = l.item();
    tape.backward(l);
    const auto& g = tape.grad(reps.node);

    // move only the anchor row, renormalize, negatives fixed
    Tensor moved = reps;
    moved.store = std::make_shared<std::vector<double>>(*reps.store);
    moved.node = -1;
    for (int d = 0; d < 2; ++d) moved.data()[d] -= 0.05 * g[static_cast<std::size_t>(d)];
    double n = std::sqrt(moved.data()[0] * moved.data()[0] + moved.data()[1] * moved.data()[1]);
    for (int d = 0; d < 2; ++d) moved.data()[d] /= n;
    const double after = contrastive_loss(nullptr, moved, anchors, negs, bank, 0.5).item();
    CHECK(after < before);
}

TEST_CASE("total loss composition") {
    Tensor ls = Tensor::scalar(0.5), lu = Tensor::scalar(0.3), lc = Tensor::scalar(0.2);
    CHECK(total_loss(nullptr, ls, lu, lc, 1.0).item() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(total_loss(nullptr, ls, lu, lc, 0.0).item() == doctest::Approx(0.8).epsilon(1e-12));
    CHECK_THROWS_AS(total_loss(nullptr, ls, lu, lc, -1.0), ConfigError);

    // linearity: gradient of the total equals the sum of per-term gradients
    Tape tape;
    Tensor x({1}, {0.7});
    tape.watch(x);
    Tensor a = mul(&tape, x, x);
    Tensor b = scale(&tape, x, 3.0);
    Tensor c = mul(&tape, x, mul(&tape, x, x));
    Tensor tot = total_loss(&tape, a, b, c, 0.5);
    tape.backward(tot);
    const double expect = 2 * 0.7 + 3.0 + 0.5 * 3 * 0.7 * 0.7;
    CHECK(tape.grad(x.node)[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("poly schedule") {
    CHECK(poly_lr(0.0064, 0, 100) == 0.0064);
    CHECK(poly_lr(0.0064, 100, 100) == 0.0);
    CHECK(poly_lr(1.0, 50, 100) == doctest::Approx(std::pow(0.5, 0.9)).epsilon(1e-12));
    CHECK_THROWS_AS(poly_lr(0.01, 101, 100), std::logic_error);
}

TEST_CASE("loss gradients match finite differences on a small model") {
    // 2 classes, 4x4, 2 images: perturb every student parameter
    Rng rng(21);
    const int H = 4, W = 4, C = 2, D = 4;
    ModelParams params = ModelParams::init(C, 4, D, rng);
    std::vector<double> img1(H * W * kImageChannels), img2(H * W * kImageChannels);
    for (auto& v : img1) v = rng.next_double();
    for (auto& v : img2) v = rng.next_double();
    std::vector<int> labels(H * W);
    for (auto& l : labels) l = static_cast<int>(rng.next_below(C));
    std::vector<bool> mask(H * W, true);
    for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = false;
    auto bank = make_bank({{1, 0, 0, 0}, {0, 1, 0, 0}});
    std::map<int, std::vector<int>> anchors{{0, {0, 5, 9}}, {1, {3, 7}}};
    std::map<int, std::vector<int>> negs{{0, {3, 7}}, {1, {0, 5}}};

    auto eval_losses = [&](Tape* tape, ModelParams& p) {
        if (tape)
            for (auto* t : p.tensor_ptrs()) tape->watch(*t);
        auto o1 = forward(tape, p, img1, H, W);
        auto o2 = forward(tape, p, img2, H, W);
        Tensor ls = supervised_loss(tape, o1.logits, labels);
        Tensor lu = unsupervised_loss(tape, o2.logits, labels, mask);
        Tensor lc = contrastive_loss(tape, o2.reps, anchors, negs, bank, 0.5);
        return total_loss(tape, ls, lu, lc, 0.7);
    };

    Tape tape;
    ModelParams p = params;
    Tensor loss = eval_losses(&tape, p);
    tape.backward(loss);

    for (auto& [name, t] : p.tensors()) {
        const auto& analytic = tape.grad(t->node);
        auto f = [&](const std::vector<double>& vals) {
            ModelParams q = params;
            for (auto& [qn, qt] : q.tensors()) {
                qt->store = std::make_shared<std::vector<double>>(*qt->store);
                qt->node = -1;
            }
            for (auto& [qn, qt] : q.tensors())
                if (qn == name) *qt->store = vals;
            return eval_losses(nullptr, q).item();
        };
        double err = gradcheck::relative_error(f, *t->store, analytic);
        INFO("parameter ", name);
        CHECK(err < 1e-5);
    }
}
