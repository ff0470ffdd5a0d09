#include <doctest.h>

#include <algorithm>
#include <random>

#include "sapo/errors.hpp"
#include "sapo/search_env.hpp"

using namespace sapo;
using doctest::Approx;

namespace {

// Tiny hand-written corpus with multi-word names.
FactCorpus named_corpus() {
    nlohmann::json j = {
        {"format_version", 1},
        {"seed", 0},
        {"entities", {"Donald", "Trump", "Francisco", "Guterres"}},
        {"relations", {"director", "spouse"}},
        {"facts",
         {{{"subject", "Donald"}, {"relation", "director"}, {"object", "Trump"}},
          {{"subject", "Donald"}, {"relation", "spouse"}, {"object", "Francisco"}},
          {{"subject", "Trump"}, {"relation", "director"}, {"object", "Donald"}},
          {{"subject", "Trump"}, {"relation", "spouse"}, {"object", "Guterres"}},
          {{"subject", "Francisco"}, {"relation", "director"}, {"object", "Guterres"}},
          {{"subject", "Francisco"}, {"relation", "spouse"}, {"object", "Donald"}},
          {{"subject", "Guterres"}, {"relation", "director"}, {"object", "Francisco"}},
          {{"subject", "Guterres"}, {"relation", "spouse"}, {"object", "Trump"}}}},
        {"questions",
         {{{"id", 0},
           {"text", "what is the director of Donald ?"},
           {"hops", 1},
           {"gold_answers", {"Donald Trump"}},
           {"support_fact_ids", {0}}},
          {{"id", 1},
           {"text", "what is the spouse of Donald ?"},
           {"hops", 1},
           {"gold_answers", {"Francisco Guterres"}},
           {"support_fact_ids", {1}}}}}};
    return corpus_from_json(j);
}

std::vector<int> ids(const FactCorpus& c, std::initializer_list<const char*> words) {
    std::vector<int> out;
    for (const char* w : words) {
        out.push_back(c.vocab.id(w));
    }
    return out;
}

int docs_segments(const EpisodeTranscript& t) {
    return static_cast<int>(std::count_if(t.tokens.begin(), t.tokens.end(), [](const auto& x) {
        return x.token == tok::DocsOpen && x.segment == EpisodeSegment::Docs;
    }));
}

}  // namespace

TEST_CASE("corpus construction") {
    const auto a = build_corpus(7, 10, 3);
    const auto b = build_corpus(7, 10, 3);
    CHECK(corpus_to_json(a) == corpus_to_json(b));
    CHECK(corpus_to_json(a) != corpus_to_json(build_corpus(8, 10, 3)));

    CHECK(a.facts.size() == 30);
    CHECK(a.docs.size() == 30);
    const auto n2 = std::count_if(a.questions.begin(), a.questions.end(),
                                  [](const Question& q) { return q.hops == 2; });
    CHECK(n2 == 30);
    CHECK(a.questions.size() == 60);

    CHECK_THROWS_AS(build_corpus(1, 3, 3), ConfigError);
    CHECK_THROWS_AS(build_corpus(1, 10, 1), ConfigError);
    CHECK_THROWS_AS(build_corpus(1, 10, 99), ConfigError);
}

TEST_CASE("2-hop gold answers follow exactly one fact chain") {
    const auto c = build_corpus(11, 10, 3);
    for (const auto& q : c.questions) {
        // Parse the question from its surface text, independently of support ids.
        const auto text = c.question_text(q);
        std::vector<std::string> w;
        std::istringstream in(text);
        for (std::string s; in >> s;) {
            w.push_back(s);
        }
        auto chain = [&](const std::string& subject, const std::string& rel) {
            std::vector<std::string> hits;
            for (const auto& f : c.facts) {
                if (c.entities[f.subject] == subject && c.relations[f.relation] == rel) {
                    hits.push_back(c.entities[f.object]);
                }
            }
            REQUIRE(hits.size() == 1);
            return hits[0];
        };
        if (q.hops == 1) {
            REQUIRE(w.size() == 7);
            CHECK(q.gold_answers == std::vector<std::string>{chain(w[5], w[3])});
        } else {
            REQUIRE(w.size() == 10);
            const auto mid = chain(w[8], w[6]);
            CHECK(q.gold_answers == std::vector<std::string>{chain(mid, w[3])});
            CHECK(q.support_fact_ids.size() == 2);
        }
    }
}

TEST_CASE("retrieval") {
    const auto c = build_corpus(3, 8, 2);
    const auto& d = c.docs[5];
    auto top = retrieve(c.vocab.render(d.title), c, 3);
    REQUIRE(top.size() == 3);
    CHECK(top[0] == 5);

    top = retrieve("zzz qqq", c, 3);
    CHECK(top == std::vector<int>{0, 1, 2});

    top = retrieve(std::string(c.relations[0]), c, 1000);
    CHECK(top.size() == c.docs.size());

    CHECK_THROWS_AS(retrieve("the ?", c, 3), EmptyQuery);
    CHECK_THROWS_AS(retrieve(std::vector<int>{tok::SearchOpen}, c, 3), EmptyQuery);
    CHECK_THROWS_AS(retrieve("x", c, 0), ConfigError);
}

TEST_CASE("episode protocol") {
    const auto c = named_corpus();
    SearchEnv env(c, {});
    const auto& q = c.questions[0];

    SUBCASE("answer extraction") {
        auto t = env.step(env.reset(q), ids(c, {"<answer>", "Donald", "Trump", "</answer>"}));
        CHECK(t.terminal);
        CHECK_FALSE(t.format_failure);
        REQUIRE(t.extracted_answer);
        CHECK(*t.extracted_answer == "Donald Trump");
        CHECK(episode_reward(t, q) == 1.0);
        CHECK(episode_em(t, q) == 1);
        CHECK(std::all_of(t.tokens.begin(), t.tokens.end(),
                          [](const auto& x) { return x.segment == EpisodeSegment::Answer; }));
    }
    SUBCASE("partial answer") {
        auto t = env.step(env.reset(c.questions[1]), ids(c, {"<answer>", "Guterres", "</answer>"}));
        CHECK(episode_reward(t, c.questions[1]) == Approx(0.666667).epsilon(1e-6));
        CHECK(episode_em(t, c.questions[1]) == 0);
    }
    SUBCASE("search appends exactly top_k masked docs") {
        auto t = env.step(env.reset(q), ids(c, {"<search>", "Donald", "director", "</search>"}));
        CHECK_FALSE(t.terminal);
        CHECK(t.turn_count == 1);
        REQUIRE(t.tokens.size() == 4 + 2 + 3 * 5);
        CHECK(t.tokens[4].token == tok::DocsOpen);
        CHECK(t.tokens.back().token == tok::DocsClose);
        for (std::size_t i = 4; i < t.tokens.size(); ++i) {
            CHECK(t.tokens[i].segment == EpisodeSegment::Docs);
            CHECK(t.tokens[i].mask == 0);
        }
        // Best document comes first: "Donald director is Trump ."
        CHECK(c.vocab.word(t.tokens[5].token) == "Donald");
        CHECK(c.vocab.word(t.tokens[8].token) == "Trump");
        CHECK(t.last_docs_begin == 4);
    }
    SUBCASE("turn cap") {
        EnvConfig cfg;
        cfg.max_response_tokens = 1000;
        SearchEnv capped(c, cfg);
        auto t = capped.reset(q);
        const auto search = ids(c, {"<search>", "Donald", "spouse", "</search>"});
        for (int i = 0; i < 5; ++i) {
            t = capped.step(t, search);
        }
        CHECK(t.turn_count == 5);
        CHECK_FALSE(t.terminal);
        const auto before = t.tokens.size();
        t = capped.step(t, search);
        CHECK(t.terminal);
        CHECK(t.tokens.size() == before + 1);
        CHECK(docs_segments(t) == 5);
        CHECK(episode_reward(t, q) == 0.0);
    }
    SUBCASE("token budget") {
        EnvConfig cfg;
        cfg.max_response_tokens = 6;
        SearchEnv small(c, cfg);
        auto t = small.step(small.reset(q), ids(c, {"<think>", "hmm", "hmm", "hmm", "hmm", "hmm",
                                                   "<answer>"}));
        CHECK(t.terminal);
        CHECK(t.truncated);
        CHECK(t.tokens.size() == 6);
        CHECK(episode_reward(t, q) == 0.0);
    }
    SUBCASE("format failures") {
        for (auto seq : {ids(c, {"Donald"}), ids(c, {"<documents>"}), ids(c, {"</think>"}),
                         ids(c, {"<think>", "<search>"}), ids(c, {"<search>", "</search>"}),
                         ids(c, {"<answer>", "Donald", "<search>"}),
                         ids(c, {"<search>", "the", "</search>"})}) {
            auto t = env.step(env.reset(q), seq);
            CHECK(t.terminal);
            CHECK(t.format_failure);
            CHECK(episode_reward(t, q) == 0.0);
        }
    }
    SUBCASE("errors") {
        auto t = env.reset(q);
        CHECK_THROWS_AS(episode_reward(t, q), InvalidState);
        CHECK_THROWS_AS(env.advance(t, 999), InvalidInput);
        t = env.step(t, ids(c, {"<answer>", "</answer>"}));
        CHECK(episode_reward(t, q) == 0.0);
        CHECK_THROWS_AS(env.advance(t, tok::ThinkOpen), InvalidState);
    }
}

TEST_CASE("loss mask") {
    EpisodeTranscript t;
    CHECK(loss_mask(t).empty());
    t.tokens = {{0, EpisodeSegment::Think, 1, 0.0}, {2, EpisodeSegment::Search, 1, 0.0}};
    CHECK(loss_mask(t) == std::vector<std::uint8_t>{1, 1});
    t.tokens = {{4, EpisodeSegment::Docs, 0, 0.0}, {5, EpisodeSegment::Docs, 0, 0.0}};
    CHECK(loss_mask(t) == std::vector<std::uint8_t>{0, 0});

    const auto c = build_corpus(2, 6, 2);
    SearchEnv env(c, {});
    const auto& q = c.questions.back();
    auto run = env.step(env.reset(q), oracle_actions(c, q, true));
    const auto m = loss_mask(run);
    for (std::size_t i = 0; i < m.size(); ++i) {
        CHECK((m[i] == 0) == (run.tokens[i].segment == EpisodeSegment::Docs));
    }
}

TEST_CASE("property: scripted oracle answers every question") {
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto c = build_corpus(seed, 12, 4);
        SearchEnv env(c, {});
        for (const auto& q : c.questions) {
            for (bool think : {false, true}) {
                auto t = env.step(env.reset(q), oracle_actions(c, q, think));
                REQUIRE(t.terminal);
                REQUIRE(t.turn_count == q.hops);
                REQUIRE(episode_reward(t, q) == 1.0);
                REQUIRE(episode_em(t, q) == 1);
            }
        }
    }
}

TEST_CASE("property: random action streams respect the transcript invariants") {
    const auto c = build_corpus(5, 8, 3);
    EnvConfig cfg;
    cfg.t_max = 3;
    cfg.max_response_tokens = 40;
    SearchEnv env(c, cfg);
    std::mt19937_64 rng(17);
    // Bias towards tags so that searches actually happen.
    std::uniform_int_distribution<int> any(0, static_cast<int>(c.vocab.size()) - 1);
    std::uniform_int_distribution<int> coin(0, 3);
    const std::vector<int> search_like{tok::SearchOpen, tok::SearchClose, tok::ThinkOpen,
                                       tok::ThinkClose};
    for (int rep = 0; rep < 3000; ++rep) {
        const auto& q = c.questions[rep % c.questions.size()];
        std::vector<int> actions;
        for (int i = 0; i < 60; ++i) {
            actions.push_back(coin(rng) == 0 ? search_like[coin(rng)] : any(rng));
        }
        auto t = env.step(env.reset(q), actions);
        auto t2 = env.step(env.reset(q), actions);
        REQUIRE(t.tokens.size() == t2.tokens.size());
        REQUIRE(t.terminal == t2.terminal);
        REQUIRE(docs_segments(t) <= cfg.t_max);
        REQUIRE(t.turn_count <= cfg.t_max);
        REQUIRE(t.agent_tokens <= cfg.max_response_tokens);
        const auto m = loss_mask(t);
        for (std::size_t i = 0; i < m.size(); ++i) {
            REQUIRE((m[i] == 0) == (t.tokens[i].segment == EpisodeSegment::Docs));
            REQUIRE(t.tokens[i].token == t2.tokens[i].token);
        }
        if (t.terminal) {
            REQUIRE(episode_reward(t, q) == episode_reward(t2, q));
        }
    }
}

TEST_CASE("corpus JSON round trip") {
    const auto c = build_corpus(9, 7, 3);
    const auto j = corpus_to_json(c);
    const auto back = corpus_from_json(nlohmann::json::parse(j.dump()));
    CHECK(corpus_to_json(back) == j);
    CHECK(back.vocab.words() == c.vocab.words());
    REQUIRE(back.questions.size() == c.questions.size());
    CHECK(back.questions[40].tokens == c.questions[40].tokens);

    auto bad = j;
    bad["format_version"] = 2;
    CHECK_THROWS_AS(corpus_from_json(bad), ConfigError);
    bad = j;
    bad["facts"][0]["object"] = "nobody";
    CHECK_THROWS_AS(corpus_from_json(bad), ConfigError);
}
