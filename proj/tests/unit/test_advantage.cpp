#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "sapo/advantage.hpp"
#include "sapo/errors.hpp"

using namespace sapo;
using doctest::Approx;

namespace {

double mean(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double pop_std(const std::vector<double>& v) {
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) {
        s += (x - m) * (x - m);
    }
    return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

TEST_CASE("group advantages examples") {
    auto a = group_advantages(std::vector<double>{1.0, 0.0});
    CHECK(a[0] == Approx(1.0));
    CHECK(a[1] == Approx(-1.0));

    a = group_advantages(std::vector<double>{0.7, 0.7, 0.7});
    CHECK(a == std::vector<double>{0.0, 0.0, 0.0});

    a = group_advantages(std::vector<double>{2.0, 1.0, 0.0});
    CHECK(a[0] == Approx(1.224745).epsilon(1e-6));
    CHECK(a[1] == Approx(0.0));
    CHECK(a[2] == Approx(-1.224745).epsilon(1e-6));

    CHECK_THROWS_AS(group_advantages(std::vector<double>{1.0}), ConfigError);
    CHECK_THROWS_AS(group_advantages(std::vector<double>{}), ConfigError);
}

TEST_CASE("property: normalized groups have zero mean and unit population std") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 500; ++i) {
        std::vector<double> r(2 + i % 12);
        for (auto& x : r) {
            x = u(rng);
        }
        const auto a = group_advantages(r);
        REQUIRE(std::abs(mean(a)) <= 1e-12);
        REQUIRE(std::abs(pop_std(a) - 1.0) <= 1e-9);

        // Shift and positive scale leave the advantages unchanged.
        std::vector<double> moved(r);
        const double shift = u(rng) * 10.0 - 5.0;
        const double scale = 0.1 + u(rng) * 5.0;
        for (auto& x : moved) {
            x = x * scale + shift;
        }
        const auto b = group_advantages(moved);
        for (std::size_t k = 0; k < a.size(); ++k) {
            REQUIRE(b[k] == Approx(a[k]).epsilon(1e-9));
        }
    }
}

TEST_CASE("broadcast advantage") {
    auto out = broadcast_advantage(std::vector<double>{1.0}, std::vector<std::size_t>{5});
    CHECK(out[0] == std::vector<double>(5, 1.0));
    out = broadcast_advantage(std::vector<double>{0.0}, std::vector<std::size_t>{3});
    CHECK(out[0] == std::vector<double>(3, 0.0));

    const auto adv = group_advantages(std::vector<double>{1.0, 0.0});
    out = broadcast_advantage(adv, std::vector<std::size_t>{3, 2});
    CHECK(out[0] == std::vector<double>{1.0, 1.0, 1.0});
    CHECK(out[1] == std::vector<double>{-1.0, -1.0});
}

TEST_CASE("answer normalization") {
    CHECK(normalize_answer("Donald Trump.") == "donald trump");
    CHECK(normalize_answer("") == "");
    CHECK(normalize_answer("The  Answer") == "answer");
    CHECK(normalize_answer("  An apple, a day! ") == "apple day");
}

TEST_CASE("f1 reward") {
    CHECK(f1_reward({"Donald Trump", {"Donald Trump"}}) == 1.0);
    CHECK(f1_reward({"Trump", {"Donald Trump"}}) == Approx(0.666667).epsilon(1e-6));
    CHECK(f1_reward({"Paris", {"London"}}) == 0.0);
    CHECK(f1_reward({"", {"London"}}) == 0.0);
    CHECK(f1_reward({"Guterres", {"Lu Olo", "Francisco Guterres"}}) ==
          Approx(2.0 / 3.0));
    CHECK(f1_reward({"a a b", {"a b b"}}) == Approx(2.0 / 3.0));  // articles dropped
    CHECK(f1_reward({"x x y", {"x y y"}}) == Approx(2.0 / 3.0));
    CHECK_THROWS_AS(f1_reward({"x", {}}), InvalidInput);
}

TEST_CASE("exact match") {
    CHECK(em_score({"Cavalcade Of The West", {"Cavalcade of the West", "Cavalcade Of The West"}}) == 1);
    CHECK(em_score({"donald trump", {"Donald Trump."}}) == 1);
    CHECK(em_score({"Francisco", {"Francisco Guterres"}}) == 0);
    CHECK(em_score({"the", {"a"}}) == 0);
}

TEST_CASE("property: reward invariants") {
    const std::vector<std::string> words{"alpha", "beta", "gamma", "the", "delta", "x"};
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
    std::uniform_int_distribution<int> len(0, 4);
    auto phrase = [&] {
        std::string s;
        for (int i = len(rng); i > 0; --i) {
            s += words[pick(rng)] + " ";
        }
        return s;
    };
    for (int i = 0; i < 2000; ++i) {
        const AnswerPair p{phrase(), {phrase(), phrase()}};
        const double f1 = f1_reward(p);
        REQUIRE(f1 >= 0.0);
        REQUIRE(f1 <= 1.0);
        if (em_score(p) == 1) {
            REQUIRE(f1 == 1.0);
        }
        const std::string a = words[pick(rng)];
        const std::string b = words[pick(rng)];
        REQUIRE(f1_reward({a, {b}}) == f1_reward({b, {a}}));
    }
}
