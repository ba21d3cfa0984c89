#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "css/config.hpp"

using namespace css;

TEST_CASE("kv parse, comments, dotted keys") {
    auto cfg = KvConfig::parse_string(
        "# a comment\n"
        "seed = 7\n"
        "sampling.delta_s = 0.25  # trailing comment\n"
        "strategy = mix\n");
    CHECK(cfg.get_int("seed") == 7);
    CHECK(cfg.get_double("sampling.delta_s") == 0.25);
    CHECK(cfg.get_string("strategy") == "mix");
    CHECK_THROWS_AS(cfg.get_string("num_classes"), ConfigError);
    CHECK_THROWS_AS(KvConfig::parse_string("novalue\n"), ConfigError);
}

TEST_CASE("parse -> serialize -> parse round-trips") {
    auto cfg = KvConfig::parse_string("b = 2\na = 1\nc.d = x\n");
    auto again = KvConfig::parse_string(cfg.serialize());
    CHECK(again.serialize() == cfg.serialize());
    CHECK(again.items() == cfg.items());
}

TEST_CASE("train config defaults and validation") {
    TrainConfig c = TrainConfig::from_kv(KvConfig::parse_string("seed = 3\n"));
    CHECK(c.seed == 3);
    CHECK(c.tau == 0.5);
    CHECK(c.lambda_c == 0.1);
    CHECK(c.sampling.delta_u == 0.75);
    CHECK(c.strategy == Strategy::kMix);

    auto resolved = c.to_kv();
    TrainConfig c2 = TrainConfig::from_kv(resolved);
    CHECK(c2.to_kv().serialize() == resolved.serialize());

    CHECK_THROWS_AS(TrainConfig::from_kv(KvConfig::parse_string("strategy = bogus\n")),
                    ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_kv(KvConfig::parse_string("tau = 0\n")), ConfigError);
    CHECK_THROWS_AS(
        TrainConfig::from_kv(KvConfig::parse_string("warmup_epochs = 5\ntotal_epochs = 4\n")),
        ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_kv(KvConfig::parse_string(
                        "sampling.delta_s = 0.9\nsampling.delta_w = 0.5\n")),
                    ConfigError);
}

TEST_CASE("enum round trips") {
    for (auto s : {Strategy::kSupervisedOnly, Strategy::kLgtOnly, Strategy::kRepOnly,
                   Strategy::kMix, Strategy::kCross})
        CHECK(parse_strategy(strategy_name(s)) == s);
    for (auto m : {IndicatorMode::kConf, IndicatorMode::kSmlr, IndicatorMode::kMix})
        CHECK(parse_indicator_mode(indicator_mode_name(m)) == m);
}
