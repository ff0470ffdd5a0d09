#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "sapo/errors.hpp"
#include "sapo/experiment.hpp"

using namespace sapo;
using json = nlohmann::json;

TEST_CASE("config parsing is strict") {
    CHECK_THROWS_AS(parse_config(json::object()), ConfigError);
    CHECK_THROWS_AS(parse_config({{"format_version", 2}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"format_version", "1"}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"format_version", 1}, {"train", {{"inner_epochs", 0}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"format_version", 1}, {"train", {{"learning_rate", -1.0}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"format_version", 1}, {"train", {{"group_size", 3.5}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"format_version", 1}, {"seed", -3}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"format_version", 1}, {"train", {{"seed", 3}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"format_version", 1}, {"train", {{"loss", {{"variant", "PPO"}}}}}}),
                    ConfigError);
    CHECK_THROWS_AS(parse_config({{"format_version", 1}, {"simulate_isdd", {{"L_a", {1, -2}}}}}),
                    ConfigError);
    CHECK_THROWS_AS(parse_config({{"format_version", 1}, {"gradcheck", {{"corrupt_variant", "X"}}}}),
                    ConfigError);

    const auto c = parse_config({{"format_version", 1}, {"seed", 9}, {"train", {{"minibatches", 2}}}});
    CHECK(c.seed == 9);
    CHECK(c.train.seed == 9);
    CHECK(c.train.minibatches == 2);
    CHECK(c.train.group_size == 10);
}

TEST_CASE("property: config JSON round trips") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.01, 0.9);
    for (int i = 0; i < 50; ++i) {
        ExperimentConfig c;
        c.set_seed(rng() % 1000);
        c.label = "run" + std::to_string(i);
        c.train.learning_rate = u(rng);
        c.train.loss.variant = static_cast<Variant>(rng() % 4);
        c.train.loss.penalty_aggregation = static_cast<PenaltyAggregation>(rng() % 2);
        c.train.loss.tau = 0.5 + u(rng);
        c.train.drift.eps_drift = u(rng);
        c.ablation.tau_sweep = {u(rng) + 0.5, u(rng) + 0.5};
        c.simulate_isdd.mu_a = {-u(rng)};
        const auto j = config_to_json(c);
        const auto back = parse_config(json::parse(j.dump()));
        CHECK(config_to_json(back) == j);
        CHECK(config_fingerprint(back) == config_fingerprint(c));
    }
}

TEST_CASE("fingerprints track content, not output location") {
    ExperimentConfig a;
    ExperimentConfig b = a;
    b.out_dir = "elsewhere";
    CHECK(config_fingerprint(a) == config_fingerprint(b));
    b.set_seed(2);
    CHECK(config_fingerprint(a) != config_fingerprint(b));
    CHECK(train_fingerprint(a.train) != train_fingerprint(b.train));
    CHECK(fingerprint(nlohmann::ordered_json::object()).size() == 16);
}

TEST_CASE("late window averages the trailing ceil(fraction * n) rows") {
    std::vector<MetricsRow> rows(10);
    for (int i = 0; i < 10; ++i) {
        rows[static_cast<std::size_t>(i)].mean_is_ratio = i;
        rows[static_cast<std::size_t>(i)].entropy = 2.0 * i;
    }
    auto w = late_window(rows, 0.25);  // last 3 rows
    CHECK(w.mean_is_ratio == doctest::Approx(8.0));
    CHECK(w.entropy == doctest::Approx(16.0));
    w = late_window(rows, 1e-6);
    CHECK(w.mean_is_ratio == 9.0);
    w = late_window(rows, 1.0);
    CHECK(w.mean_is_ratio == doctest::Approx(4.5));
    CHECK(late_window({}, 0.25).mean_is_ratio == 0.0);
}

TEST_CASE("property: CSV exports re-parse to the same values") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    auto odd = [&]() {
        const double pick[] = {0.1, 1.0 / 3.0, 5e-324, std::numeric_limits<double>::max(), -0.0, 1e-17};
        return rng() % 3 == 0 ? pick[rng() % 6] : u(rng) * std::pow(10.0, static_cast<int>(rng() % 20) - 10);
    };
    for (int i = 0; i < 30; ++i) {
        std::vector<IsddSweepRow> rows(1 + rng() % 4);
        for (auto& r : rows) {
            r.l_z = static_cast<std::int64_t>(rng() % 50);
            r.l_a = static_cast<std::int64_t>(rng() % 50);
            r.mu_z = odd();
            r.sigma_z = std::abs(odd());
            r.mu_a = odd();
            r.sigma_a = std::abs(odd());
            r.mean_weight_mc = odd();
            r.mean_weight_closed = odd();
            r.isdd_prob_mc = odd();
            r.isdd_prob_closed = odd();
            r.se_mean = odd();
            r.n = static_cast<std::int64_t>(rng() % 1000000);
            r.seed = rng();
        }
        const auto text = isdd_csv(rows, "0123456789abcdef", 7);
        const auto back = parse_isdd_csv(text);
        REQUIRE(back.size() == rows.size());
        for (std::size_t k = 0; k < rows.size(); ++k) {
            CHECK(back[k] == rows[k]);
        }
        CHECK(isdd_csv(back, "0123456789abcdef", 7) == text);

        AblationReport rep;
        rep.fingerprint = "feedfacecafebeef";
        rep.seed = rng();
        for (const auto v : {Variant::Grpo, Variant::GrpoKl, Variant::GrpoKlR, Variant::Sapo}) {
            AblationRow row;
            row.variant = v;
            row.final_em = odd();
            row.final_f1 = odd();
            row.late = {odd(), odd(), odd(), odd(), odd()};
            if (v != Variant::Grpo) {
                row.delta_em = odd();
                row.delta_f1 = odd();
            }
            rep.rows.push_back(row);
        }
        const auto csv = ablation_csv(rep);
        const auto parsed = parse_ablation_csv(csv);
        CHECK(parsed.fingerprint == rep.fingerprint);
        CHECK(parsed.seed == rep.seed);
        REQUIRE(parsed.rows.size() == 4);
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(parsed.rows[k].final_em == rep.rows[k].final_em);
            CHECK(parsed.rows[k].late.kl_term == rep.rows[k].late.kl_term);
            CHECK(parsed.rows[k].delta_f1 == rep.rows[k].delta_f1);
        }
        CHECK(ablation_csv(parsed) == csv);
    }
}

TEST_CASE("malformed CSV input is rejected") {
    CHECK_THROWS_AS(parse_isdd_csv(""), InvalidInput);
    CHECK_THROWS_AS(parse_isdd_csv("a,b\n1,2\n"), InvalidInput);
    const auto good = isdd_csv({IsddSweepRow{}}, "x", 1);
    CHECK_THROWS_AS(parse_isdd_csv(good + "1,2,3\n"), InvalidInput);
    CHECK_THROWS_AS(parse_ablation_csv("# kind=ablation\n"), InvalidInput);
}

TEST_CASE("metrics rows survive a JSON round trip") {
    MetricsRow r;
    r.step = 7;
    r.outer_step = 3;
    r.inner_epoch = 1;
    r.minibatch = 2;
    r.loss = -0.125;
    r.mean_is_ratio = 0.987654321;
    r.eval_em = 0.5;
    r.seed = 42;
    r.variant = Variant::GrpoKlR;
    const auto j = metrics_row_json(r);
    const auto back = metrics_row_from_json(json::parse(j.dump()));
    CHECK(metrics_row_json(back) == j);
    CHECK_FALSE(back.eval_f1.has_value());
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) {
        keys.push_back(it.key());
    }
    CHECK(keys == metrics_fields());
}
