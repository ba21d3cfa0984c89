#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "css/metrics.hpp"
#include "css/rng.hpp"

using namespace css;

TEST_CASE("miou basics") {
    // perfect prediction
    {
        std::vector<int> pred{0, 1, 2, 1};
        std::vector<std::uint8_t> truth{0, 1, 2, 1};
        auto r = miou(pred, truth, 3);
        CHECK(r.miou == doctest::Approx(1.0).epsilon(1e-12));
        for (int c = 0; c < 3; ++c) CHECK(*r.per_class[static_cast<std::size_t>(c)] == 1.0);
    }
    // binary complement -> 0
    {
        std::vector<int> pred{1, 0, 1, 0};
        std::vector<std::uint8_t> truth{0, 1, 0, 1};
        CHECK(miou(pred, truth, 2).miou == 0.0);
    }
    // worked 2x2 example
    {
        std::vector<int> pred{0, 1, 1, 1};
        std::vector<std::uint8_t> truth{0, 0, 1, 1};
        auto r = miou(pred, truth, 2);
        CHECK(*r.per_class[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(*r.per_class[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
        CHECK(r.miou == doctest::Approx((0.5 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
    }
    // classes absent from both maps are excluded from the mean
    {
        std::vector<int> pred{0, 0};
        std::vector<std::uint8_t> truth{0, 0};
        auto r = miou(pred, truth, 5);
        CHECK(r.miou == 1.0);
        CHECK(!r.per_class[3].has_value());
    }
}

TEST_CASE("miou permutation equivariance") {
    Rng rng(3);
    const int C = 4, N = 200;
    std::vector<int> pred(N);
    std::vector<std::uint8_t> truth(N);
    for (auto& v : pred) v = static_cast<int>(rng.next_below(C));
    for (auto& v : truth) v = static_cast<std::uint8_t>(rng.next_below(C));
    const int perm[C] = {2, 3, 1, 0};
    std::vector<int> pred_p(N);
    std::vector<std::uint8_t> truth_p(N);
    for (int i = 0; i < N; ++i) {
        pred_p[static_cast<std::size_t>(i)] = perm[pred[static_cast<std::size_t>(i)]];
        truth_p[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(perm[truth[static_cast<std::size_t>(i)]]);
    }
    auto a = miou(pred, truth, C);
    auto b = miou(pred_p, truth_p, C);
    CHECK(a.miou == doctest::Approx(b.miou).epsilon(1e-12));
    for (int c = 0; c < C; ++c)
        CHECK(*a.per_class[static_cast<std::size_t>(c)] ==
              doctest::Approx(*b.per_class[static_cast<std::size_t>(perm[c])]).epsilon(1e-12));
}

TEST_CASE("confusion column sums equal prediction counts") {
    Rng rng(4);
    const int C = 3, N = 500;
    ConfusionMatrix cm(C);
    std::vector<long> direct(C, 0);
    for (int i = 0; i < N; ++i) {
        int t = static_cast<int>(rng.next_below(C));
        int p = static_cast<int>(rng.next_below(C));
        cm.add(t, p);
        ++direct[static_cast<std::size_t>(p)];
    }
    CHECK(cm.total() == N);
    for (int p = 0; p < C; ++p) CHECK(cm.col_sum(p) == direct[static_cast<std::size_t>(p)]);
}

TEST_CASE("pseudo label quality restricted to masks") {
    std::vector<int> labels{0, 1, 1, 0};
    std::vector<std::uint8_t> truth{0, 1, 0, 0};
    // full mask
    auto full = pseudo_label_quality("lgt", labels, {true, true, true, true}, truth, 2);
    CHECK(full.pixels == 4);
    // restricted mask skips the wrong pixel -> perfect
    auto masked = pseudo_label_quality("mix", labels, {true, true, false, true}, truth, 2);
    CHECK(masked.pixels == 3);
    CHECK(masked.result.miou == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(masked.result.miou >= full.result.miou);
}

TEST_CASE("indicator bins against a brute-force group-by") {
    Rng rng(5);
    const int C = 3, N = 1000, B = 10;
    std::vector<double> conf(N), cosine(N);
    std::vector<int> labels(N);
    for (int i = 0; i < N; ++i) {
        conf[static_cast<std::size_t>(i)] = rng.next_double();
        cosine[static_cast<std::size_t>(i)] = rng.uniform(-1, 1);
        labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.next_below(C));
    }
    auto bins = indicator_bins(conf, cosine, labels, C, B);

    std::map<std::pair<int, int>, std::pair<double, long>> oracle;
    for (int i = 0; i < N; ++i) {
        int b = std::min(static_cast<int>(conf[static_cast<std::size_t>(i)] * B), B - 1);
        auto& e = oracle[{labels[static_cast<std::size_t>(i)], b}];
        e.first += cosine[static_cast<std::size_t>(i)];
        ++e.second;
    }
    CHECK(bins.size() == oracle.size());
    for (const auto& bin : bins) {
        auto& e = oracle.at({bin.class_id, bin.bin});
        CHECK(bin.count == e.second);
        CHECK(bin.mean_cosine == doctest::Approx(e.first / e.second).epsilon(1e-12));
    }
}

TEST_CASE("bin edges") {
    // constant confidence -> single occupied bin
    auto bins = indicator_bins({0.5, 0.5, 0.5}, {0.1, 0.2, 0.3}, {0, 0, 0}, 1, 10);
    CHECK(bins.size() == 1);
    CHECK(bins[0].bin == 5);
    // extremes land in bins 0 and 9
    auto edge = indicator_bins({0.05, 0.95}, {0.0, 0.0}, {0, 0}, 1, 10);
    REQUIRE(edge.size() == 2);
    CHECK(edge[0].bin == 0);
    CHECK(edge[1].bin == 9);
}
