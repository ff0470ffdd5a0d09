#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "sapo/errors.hpp"
#include "sapo/policy.hpp"
#include "sapo/rng.hpp"

using namespace sapo;
using doctest::Approx;

namespace {

struct World {
    FactCorpus corpus;
    EnvConfig ecfg;
    PolicyConfig pcfg;

    World() : corpus(build_corpus(3, 8, 2)) { pcfg.hidden = 16; }
    SearchEnv env() const { return SearchEnv(corpus, ecfg); }
    FeatureSpace fs() const { return FeatureSpace(corpus.vocab.size(), pcfg, ecfg); }
    TinyPolicy random_policy(std::uint64_t seed, double scale = 0.3) const {
        TinyPolicy p(pcfg, corpus.vocab.size(), fs().dim());
        std::mt19937_64 gen(seed);
        std::normal_distribution<double> n(0.0, scale);
        for (auto& w : p.params()) {
            w = n(gen);
        }
        return p;
    }
};

}  // namespace

TEST_CASE("initial policy is uniform") {
    World w;
    const auto fs = w.fs();
    const auto env = w.env();
    const auto p = TinyPolicy::initialize(w.pcfg, w.corpus.vocab.size(), fs.dim(), 7);
    const double expect = -std::log(static_cast<double>(w.corpus.vocab.size()));
    const auto& q = w.corpus.questions[0];
    auto t = env.step(env.reset(q), oracle_actions(w.corpus, q, true));
    const auto fr = forward_logprobs(p, fs, env, q, t);
    REQUIRE(fr.logp.size() == t.tokens.size());
    for (std::size_t i = 0; i < t.tokens.size(); ++i) {
        if (t.tokens[i].segment == EpisodeSegment::Docs) {
            CHECK(std::isnan(fr.logp[i]));
        } else {
            CHECK(fr.logp[i] == Approx(expect).epsilon(1e-14));
        }
    }
}

TEST_CASE("parameter budget and layout") {
    World w;
    const auto fs = w.fs();
    TinyPolicy p(w.pcfg, w.corpus.vocab.size(), fs.dim());
    const auto h = static_cast<std::size_t>(w.pcfg.hidden);
    const auto v = w.corpus.vocab.size();
    CHECK(p.params().size() == fs.dim() * h + h + v * h + v);
    CHECK(p.b2_offset() + v == p.params().size());

    PolicyConfig big = w.pcfg;
    big.hidden = 4096;
    CHECK_THROWS_AS(TinyPolicy(big, v, fs.dim()), ConfigError);
    CHECK_THROWS_AS(p.forward(std::vector<int>{static_cast<int>(fs.dim())}), InvalidInput);
}

TEST_CASE("property: softmax normalizes at every position") {
    World w;
    const auto fs = w.fs();
    const auto env = w.env();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto p = w.random_policy(seed, 1.0);
        for (std::size_t qi = 0; qi < w.corpus.questions.size(); qi += 5) {
            const auto ep = rollout_episode(p, fs, env, w.corpus.questions[qi], seed);
            const auto fr = forward_logprobs(p, fs, env, w.corpus.questions[qi], ep.transcript);
            for (const auto& d : fr.distributions) {
                const double s = std::accumulate(d.begin(), d.end(), 0.0);
                CHECK(std::abs(s - 1.0) <= 1e-12);
            }
        }
    }
}

TEST_CASE("property: raising the temperature never lowers entropy") {
    World w;
    const auto fs = w.fs();
    std::mt19937_64 gen(11);
    for (int trial = 0; trial < 50; ++trial) {
        auto p = w.random_policy(100 + static_cast<std::uint64_t>(trial), 0.8);
        PolicyConfig hot = w.pcfg;
        hot.temperature = 2.0 * w.pcfg.temperature;
        TinyPolicy q(hot, w.corpus.vocab.size(), fs.dim());
        q.params() = p.params();
        std::vector<int> feats;
        for (int k = 0; k < 4; ++k) {
            feats.push_back(static_cast<int>(uniform_below(gen, fs.dim())));
        }
        std::sort(feats.begin(), feats.end());
        feats.erase(std::unique(feats.begin(), feats.end()), feats.end());
        const double cold_h = entropy(softmax(p.forward(feats).logits));
        const double hot_h = entropy(softmax(q.forward(feats).logits));
        CHECK(hot_h >= cold_h - 1e-12);
    }
}

TEST_CASE("support log-probs and nucleus") {
    const std::vector<double> logits = {2.0, 1.0, 0.0, -1.0};
    const auto full = softmax(logits);
    CHECK(support_logp(logits, 0, {}) == Approx(std::log(full[0])).epsilon(1e-14));
    const double renorm = std::log(full[0] / (full[0] + full[1]));
    CHECK(support_logp(logits, 0, {0, 1}) == Approx(renorm).epsilon(1e-14));
    CHECK_THROWS_AS(support_logp(logits, 2, {0, 1}), InvalidInput);
    CHECK_THROWS_AS(support_logp(logits, 4, {}), InvalidInput);

    CHECK(nucleus(logits, 1.0).empty());
    CHECK(nucleus(logits, 0.5) == Support{0});
    CHECK(nucleus(logits, 0.9) == Support{0, 1, 2});
    // Ties are broken by token id.
    CHECK(nucleus(std::vector<double>{0.0, 0.0, 0.0, 0.0}, 0.5) == Support{0, 1});
    CHECK(greedy_token(std::vector<double>{0.0, 3.0, 3.0}) == 1);
}

TEST_CASE("sampling stays inside the nucleus and records its log-prob") {
    const std::vector<double> logits = {2.0, 1.5, 0.0, -1.0, -3.0};
    std::mt19937_64 gen(5);
    for (int i = 0; i < 200; ++i) {
        const auto s = sample_token(logits, 0.8, gen);
        const auto nuc = nucleus(logits, 0.8);
        CHECK(s.support == nuc);
        CHECK(std::find(nuc.begin(), nuc.end(), s.token) != nuc.end());
        CHECK(s.logp == support_logp(logits, s.token, s.support));
    }
}

TEST_CASE("rollout groups") {
    World w;
    const auto fs = w.fs();
    const auto env = w.env();
    const auto p = w.random_policy(4, 0.6);
    const auto& q = w.corpus.questions[1];

    SUBCASE("G=10 gives ten transcripts with recorded log-probs") {
        const auto g = rollout_group(p, fs, env, q, 10, 99);
        REQUIRE(g.episodes.size() == 10);
        CHECK(g.rewards.size() == 10);
        CHECK(g.advantages.size() == 10);
        for (const auto& ep : g.episodes) {
            CHECK(ep.transcript.terminal);
            REQUIRE(ep.steps.size() == ep.transcript.tokens.size());
            for (std::size_t t = 0; t < ep.steps.size(); ++t) {
                const auto& x = ep.transcript.tokens[t];
                if (x.segment == EpisodeSegment::Docs) {
                    CHECK(ep.steps[t].token == -1);
                    CHECK(x.mask == 0);
                } else {
                    CHECK(ep.steps[t].token == x.token);
                    CHECK(std::isfinite(x.logp));
                    CHECK(x.logp <= 0.0);
                    // The recorded value is the truncated, renormalized probability.
                    const auto out = p.forward(ep.steps[t].features);
                    CHECK(support_logp(out.logits, x.token, ep.steps[t].support) == x.logp);
                }
            }
        }
    }

    SUBCASE("deterministic in parameters, question and seed") {
        const auto a = rollout_group(p, fs, env, q, 6, 123);
        const auto b = rollout_group(p, fs, env, q, 6, 123);
        const auto c = rollout_group(p, fs, env, q, 6, 124);
        bool differs = false;
        for (std::size_t i = 0; i < a.episodes.size(); ++i) {
            const auto& x = a.episodes[i].transcript.tokens;
            const auto& y = b.episodes[i].transcript.tokens;
            REQUIRE(x.size() == y.size());
            for (std::size_t t = 0; t < x.size(); ++t) {
                CHECK(x[t].token == y[t].token);
                CHECK((x[t].logp == y[t].logp || (std::isnan(x[t].logp) && std::isnan(y[t].logp))));
            }
            CHECK(a.rewards[i] == b.rewards[i]);
            const auto& z = c.episodes[i].transcript.tokens;
            differs = differs || z.size() != x.size() ||
                      !std::equal(x.begin(), x.end(), z.begin(),
                                  [](const auto& l, const auto& r) { return l.token == r.token; });
        }
        CHECK(differs);
    }

    SUBCASE("an all-failing group has zero advantages") {
        // Only the answer-close tag is reachable at the top level: instant format failure.
        TinyPolicy failing(w.pcfg, w.corpus.vocab.size(), fs.dim());
        failing.params()[failing.b2_offset() + tok::AnswerClose] = 50.0;
        const auto g = rollout_group(failing, fs, env, q, 10, 1);
        for (std::size_t i = 0; i < 10; ++i) {
            CHECK(g.episodes[i].transcript.format_failure);
            CHECK(g.rewards[i] == 0.0);
            CHECK(g.advantages[i] == 0.0);
        }
    }

    SUBCASE("group size below two is rejected") {
        CHECK_THROWS_AS(rollout_group(p, fs, env, q, 1, 0), ConfigError);
    }
}

TEST_CASE("forward log-probs replay the sampled episode") {
    World w;
    const auto fs = w.fs();
    const auto env = w.env();
    PolicyConfig full = w.pcfg;
    full.top_p = 1.0;
    auto p = w.random_policy(8, 0.5);
    TinyPolicy untruncated(full, w.corpus.vocab.size(), fs.dim());
    untruncated.params() = p.params();
    const auto& q = w.corpus.questions[3];
    const auto ep = rollout_episode(untruncated, fs, env, q, 17);
    const auto fr = forward_logprobs(untruncated, fs, env, q, ep.transcript);
    for (std::size_t t = 0; t < ep.transcript.tokens.size(); ++t) {
        const auto& x = ep.transcript.tokens[t];
        CHECK(fr.mask[t] == x.mask);
        if (x.segment != EpisodeSegment::Docs) {
            CHECK(fr.logp[t] == Approx(x.logp).epsilon(1e-13));
        }
    }
    CHECK(fr.distributions.size() == ep.entropies.size());
}

TEST_CASE("forward log-probs reject tokens outside the vocabulary") {
    World w;
    const auto fs = w.fs();
    const auto env = w.env();
    const auto p = w.random_policy(2);
    const auto& q = w.corpus.questions[0];
    auto t = env.reset(q);
    TranscriptToken bad;
    bad.token = static_cast<int>(w.corpus.vocab.size()) + 3;
    t.tokens.push_back(bad);
    CHECK_THROWS_AS(forward_logprobs(p, fs, env, q, t), InvalidInput);
}

TEST_CASE("evaluation") {
    World w;
    const auto fs = w.fs();
    const auto env = w.env();
    const auto p = TinyPolicy::initialize(w.pcfg, w.corpus.vocab.size(), fs.dim(), 3);
    CHECK_THROWS_AS(evaluate(p, fs, env, std::span<const Question>{}), InvalidInput);
    const auto r = evaluate(p, fs, env, w.corpus.questions);
    CHECK(r.n == w.corpus.questions.size());
    CHECK(r.em >= 0.0);
    CHECK(r.em <= r.f1 + 1e-15);
}

TEST_CASE("behavior cloning makes the scripted transcript likelier") {
    World w;
    const auto fs = w.fs();
    const auto env = w.env();
    auto p = TinyPolicy::initialize(w.pcfg, w.corpus.vocab.size(), fs.dim(), 5);
    const auto& q = w.corpus.questions[2];
    const auto t = env.step(env.reset(q), oracle_actions(w.corpus, q));
    auto total = [&](const TinyPolicy& pol) {
        const auto fr = forward_logprobs(pol, fs, env, q, t);
        double s = 0.0;
        for (std::size_t i = 0; i < fr.logp.size(); ++i) {
            if (fr.mask[i] != 0) {
                s += fr.logp[i];
            }
        }
        return s;
    };
    const double before = total(p);
    behavior_clone(p, fs, env, w.corpus.questions, 100, 0.5, 9);
    CHECK(total(p) > before + 1.0);

    auto again = TinyPolicy::initialize(w.pcfg, w.corpus.vocab.size(), fs.dim(), 5);
    behavior_clone(again, fs, env, w.corpus.questions, 100, 0.5, 9);
    CHECK(again.params() == p.params());
}
