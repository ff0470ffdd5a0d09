#include <doctest.h>

#include <chrono>
#include <cmath>
#include <random>
#include <vector>

#include "sapo/drift.hpp"
#include "sapo/errors.hpp"

using namespace sapo;
using doctest::Approx;

namespace {

// Abramowitz-Stegun 26.2.17 (|error| < 7.5e-8), independent of erfc.
double phi_as(double x) {
    const double t = 1.0 / (1.0 + 0.2316419 * std::abs(x));
    const double poly =
        t * (0.319381530 +
             t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    const double tail = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI) * poly;
    return x >= 0 ? 1.0 - tail : tail;
}

}  // namespace

TEST_CASE("cumulative importance weight") {
    CHECK(cumulative_is_weight(std::vector<double>(37, 1.0)) == 1.0);
    CHECK(cumulative_is_weight(std::vector<double>{0.5, 0.5}) == Approx(0.25));
    CHECK(cumulative_is_weight(std::vector<double>{2.0, 0.5}) == Approx(1.0));
    CHECK(cumulative_is_weight(std::vector<double>{}) == 1.0);
    CHECK_THROWS_AS(cumulative_is_weight(std::vector<double>{1.0, 0.0}), InvalidInput);
    CHECK_THROWS_AS(cumulative_is_weight(std::vector<double>{-1.0}), InvalidInput);
    CHECK_THROWS_AS(cumulative_is_weight(std::vector<double>{NAN}), InvalidInput);
}

TEST_CASE("property: log-space weight stays finite for extreme ratios") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-50.0, 50.0);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> r(10000);
        double direct = 0.0;
        for (auto& x : r) {
            const double l = u(rng);
            x = std::exp(l);
            direct += l;
        }
        const double lw = log_cumulative_is_weight(r);
        REQUIRE(std::isfinite(lw));
        REQUIRE(lw == Approx(direct).epsilon(1e-9).scale(1.0));
        const double w = cumulative_is_weight(r);
        REQUIRE(!std::isnan(w));
        REQUIRE(w >= 0.0);
    }
}

TEST_CASE("isdd probability") {
    DriftEventConfig cfg;
    auto e = isdd_probability(std::vector<double>(5, 1.0), cfg);
    CHECK(e.probability == 0.0);
    CHECK_FALSE(e.flag);

    cfg.phi = 0.4;
    e = isdd_probability(std::vector<double>{0.001, 1.0}, cfg);
    CHECK(e.probability == 0.5);
    CHECK(e.flag);

    cfg.phi = 0.6;
    e = isdd_probability(std::vector<double>{0.001, 1.0}, cfg);
    CHECK(e.probability == 0.5);
    CHECK_FALSE(e.flag);

    CHECK_THROWS_AS(isdd_probability(std::vector<double>{}, cfg), InvalidInput);
}

TEST_CASE("drift config validation") {
    DriftEventConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.eps_drift = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.phi = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.window = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(DriftSegment(DriftKind::Action, 3, 0.0, -0.1), ConfigError);
    DriftSegment s(DriftKind::Action, 3, -0.01, 0.2);
    CHECK(s.lambda == Approx(-0.01 + 0.02));
}

TEST_CASE("closed-form means") {
    CHECK(lognormal_product_mean(0.0, 0.0, 123) == 1.0);
    CHECK(lognormal_product_mean(-0.01, 0.1, 100) == Approx(0.606531).epsilon(1e-6));
    CHECK(lognormal_product_mean(-0.3, 0.7, 0) == 1.0);

    // lambda_z = -0.001 with sigma 0, lambda_a = -0.05 with sigma 0.
    auto p = DriftParams::interleaved(500, -0.001, 0.0, 10, -0.05, 0.0);
    CHECK(interleaved_drift_mean(p) == Approx(0.367879).epsilon(1e-6));
    // Same lambdas reached through non-zero sigma.
    p = DriftParams::interleaved(500, -0.001 - 0.5 * 0.01 * 0.01, 0.01, 10, -0.05 - 0.5 * 0.04,
                                 0.2);
    CHECK(interleaved_drift_mean(p) == Approx(std::exp(-1.0)));

    CHECK(interleaved_drift_mean(DriftParams::interleaved(7, 0, 0, 9, 0, 0)) == 1.0);
    CHECK(interleaved_drift_mean(DriftParams::single(-0.01, 0.1, 100)) ==
          Approx(lognormal_product_mean(-0.01, 0.1, 100)).epsilon(1e-15));
}

TEST_CASE("property: mean decays strictly with action volume when lambda_a < 0") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int rep = 0; rep < 200; ++rep) {
        const double mu_a = -0.2 * u(rng) - 1e-3;
        const double sigma_a = 0.1 * u(rng);
        const double mu_z = 0.02 * (u(rng) - 0.5);
        double prev = INFINITY;
        for (std::size_t la = 0; la <= 20; ++la) {
            const auto p = DriftParams::interleaved(50, mu_z, 0.05, la, mu_a, sigma_a);
            if (p.segments[1].lambda >= 0.0) {
                break;
            }
            const double m = interleaved_drift_mean(p);
            REQUIRE(m < prev);
            prev = m;
        }
    }
}

TEST_CASE("closed-form isdd probability") {
    const double mu = -0.01;
    const double L = 100;
    CHECK(closed_form_isdd_probability(mu, 0.3, L, std::exp(L * mu)) == Approx(0.5));
    CHECK(closed_form_isdd_probability(0.0, 1.0, 1, 1.0) == 0.5);
    CHECK(closed_form_isdd_probability(-0.01, 0.1, 100, 0.1) == Approx(0.09637).epsilon(1e-4));
    CHECK(closed_form_isdd_probability(-0.01, 0.1, 100, 0.1) ==
          Approx(phi_as(std::log(0.1) + 1.0)).epsilon(1e-6));
    // Degenerate sigma: a step in the log-median.
    CHECK(closed_form_isdd_probability(-0.01, 0.0, 100, 0.01) == 0.0);
    CHECK(closed_form_isdd_probability(-0.1, 0.0, 100, 0.5) == 1.0);
    const auto p = DriftParams::single(-0.01, 0.1, 100);
    CHECK(closed_form_isdd_probability(p, 0.1) ==
          Approx(closed_form_isdd_probability(-0.01, 0.1, 100, 0.1)).epsilon(1e-14));
}

TEST_CASE("simulation with deterministic ratios is exact") {
    const auto p = DriftParams::interleaved(40, -0.003, 0.0, 6, -0.05, 0.0);
    const auto r = simulate_isdd(p, 1000, 7, 0.97);
    CHECK(r.mean_weight == interleaved_drift_mean(p));
    CHECK(r.isdd_probability == closed_form_isdd_probability(p, 0.97));
    CHECK(r.se_mean == 0.0);
    CHECK(r.se_probability == 0.0);
    CHECK(simulate_isdd(p, 1, 7, 0.5).isdd_probability == closed_form_isdd_probability(p, 0.5));
    CHECK_THROWS_AS(simulate_isdd(p, 0, 7, 0.5), ConfigError);
}

TEST_CASE("property: simulation agrees with closed forms within 4 standard errors") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int rep = 0; rep < 6; ++rep) {
        const double mu = -0.02 * u(rng);
        const double sigma = 0.01 + 0.19 * u(rng);
        const std::size_t L = 1 + static_cast<std::size_t>(99 * u(rng));
        const auto p = DriftParams::single(mu, sigma, L);
        const double eps = std::exp(L * mu - 0.5 * sigma * std::sqrt(double(L)));
        const auto r = simulate_isdd(p, 100000, 100 + rep, eps);
        CAPTURE(mu);
        CAPTURE(sigma);
        CAPTURE(L);
        CHECK(std::abs(r.mean_weight - interleaved_drift_mean(p)) <= 4.0 * r.se_mean);
        CHECK(std::abs(r.isdd_probability - closed_form_isdd_probability(p, eps)) <=
              4.0 * r.se_probability);
    }
}

TEST_CASE("property: simulation is reproducible and worker-count independent") {
    const auto p = DriftParams::interleaved(30, -0.002, 0.05, 5, -0.04, 0.1);
    const auto a = simulate_isdd(p, 20000, 42, 0.9, 1);
    const auto b = simulate_isdd(p, 20000, 42, 0.9, 1);
    const auto c = simulate_isdd(p, 20000, 42, 0.9, 4);
    CHECK(a.mean_weight == b.mean_weight);
    CHECK(a.mean_weight == c.mean_weight);
    CHECK(a.se_mean == c.se_mean);
    CHECK(a.isdd_probability == c.isdd_probability);
    const auto d = simulate_isdd(p, 20000, 43, 0.9, 1);
    CHECK(a.mean_weight != d.mean_weight);
}

TEST_CASE("drift detector") {
    DriftEventConfig cfg;
    CHECK(drift_detector(std::vector<double>(1000, 1.0), cfg).empty());

    cfg.window = 4;
    cfg.eps_drift = 0.01;
    cfg.phi = 0.5;
    const auto alerts = drift_detector(std::vector<double>{1, 1, 0.001, 0.001, 0.001}, cfg);
    REQUIRE(alerts.size() == 1);
    CHECK(alerts[0].step == 4);
    CHECK(alerts[0].fraction == 0.75);

    cfg.phi = 1.0;
    CHECK(drift_detector(std::vector<double>(50, 0.0), cfg).empty());

    cfg.window = 0;
    CHECK_THROWS_AS(DriftDetector{cfg}, ConfigError);
}
