#include "sapo/search_env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "sapo/advantage.hpp"
#include "sapo/errors.hpp"
#include "sapo/rng.hpp"

namespace sapo {

namespace {

const std::vector<std::string> kFunctionWords{"what", "is", "the", "of", "?", "."};
const std::vector<std::string> kThinkWords{"hmm",  "so",   "first", "then",
                                           "next", "need", "find",  "check"};
const std::vector<std::string> kRelationPool{
    "director", "spouse",  "capital",  "founder", "mentor", "birthplace",
    "rival",    "author",  "sibling",  "employer", "teacher", "neighbor",
    "owner",    "partner", "editor",   "leader"};
const std::vector<std::string> kTags{"<think>",     "</think>",     "<search>", "</search>",
                                     "<documents>", "</documents>", "<answer>", "</answer>"};

constexpr int kWhat = tok::NumTags;
constexpr int kIs = tok::NumTags + 1;
constexpr int kThe = tok::NumTags + 2;
constexpr int kOf = tok::NumTags + 3;
constexpr int kQuestionMark = tok::NumTags + 4;
constexpr int kPeriod = tok::NumTags + 5;

std::vector<std::string> entity_names(std::uint64_t seed, int n) {
    static const std::string consonants = "bdfgklmnprstvz";
    static const std::string vowels = "aeiou";
    std::mt19937_64 gen(derive_seed(seed, 1));
    std::set<std::string> seen;
    std::vector<std::string> out;
    while (static_cast<int>(out.size()) < n) {
        std::string name;
        for (int syl = 0; syl < 2; ++syl) {
            name += consonants[uniform_below(gen, consonants.size())];
            name += vowels[uniform_below(gen, vowels.size())];
        }
        if (seen.insert(name).second) {
            out.push_back(name);
        }
    }
    return out;
}

std::vector<int> content_set(const Vocabulary& v, std::span<const int> ids) {
    std::vector<int> out;
    for (const int id : ids) {
        if (v.is_content(id)) {
            out.push_back(id);
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

int overlap(const std::vector<int>& a, const std::vector<int>& b) {
    int n = 0;
    auto i = a.begin();
    auto j = b.begin();
    while (i != a.end() && j != b.end()) {
        if (*i < *j) {
            ++i;
        } else if (*j < *i) {
            ++j;
        } else {
            ++n;
            ++i;
            ++j;
        }
    }
    return n;
}

std::vector<int> ranked(const std::vector<int>& q, const FactCorpus& corpus, int k) {
    if (q.empty()) {
        throw EmptyQuery("query has no content token after normalization");
    }
    if (k < 1) {
        throw ConfigError("retrieve needs k >= 1");
    }
    std::vector<std::pair<int, int>> scored;  // (-score, doc id)
    scored.reserve(corpus.docs.size());
    for (const auto& d : corpus.docs) {
        const int s = overlap(q, content_set(corpus.vocab, d.title)) +
                      overlap(q, content_set(corpus.vocab, d.tokens));
        scored.emplace_back(-s, d.id);
    }
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(k), scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n),
                      scored.end());
    std::vector<int> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(scored[i].second);
    }
    return out;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (!index_.emplace(words_[i], static_cast<int>(i)).second) {
            throw ConfigError("duplicate vocabulary word '" + words_[i] + "'");
        }
        content_.push_back(i >= static_cast<std::size_t>(tok::NumTags) &&
                                   !normalize_answer(words_[i]).empty()
                               ? 1
                               : 0);
    }
}

int Vocabulary::id(std::string_view word) const {
    if (auto f = find(word)) {
        return *f;
    }
    throw InvalidInput("out-of-vocabulary word '" + std::string(word) + "'");
}

std::optional<int> Vocabulary::find(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) {
        return std::nullopt;
    }
    return it->second;
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
        throw InvalidInput("token id " + std::to_string(id) + " outside the vocabulary");
    }
    return words_[static_cast<std::size_t>(id)];
}

bool Vocabulary::is_content(int id) const {
    return id >= 0 && static_cast<std::size_t>(id) < content_.size() &&
           content_[static_cast<std::size_t>(id)] != 0;
}

std::string Vocabulary::render(std::span<const int> ids) const {
    std::string out;
    for (const int id : ids) {
        if (!out.empty()) {
            out += ' ';
        }
        out += word(id);
    }
    return out;
}

int FactCorpus::entity_token(int entity) const {
    return static_cast<int>(vocab.size() - entities.size()) + entity;
}

int FactCorpus::relation_token(int relation) const {
    return tok::NumTags + static_cast<int>(kFunctionWords.size() + kThinkWords.size()) + relation;
}

const Fact& FactCorpus::fact(int subject, int relation) const {
    return facts.at(static_cast<std::size_t>(subject) * relations.size() +
                    static_cast<std::size_t>(relation));
}

std::string FactCorpus::question_text(const Question& q) const { return vocab.render(q.tokens); }

namespace {

Vocabulary make_vocab(const std::vector<std::string>& relations,
                      const std::vector<std::string>& entities) {
    std::vector<std::string> words(kTags);
    words.insert(words.end(), kFunctionWords.begin(), kFunctionWords.end());
    words.insert(words.end(), kThinkWords.begin(), kThinkWords.end());
    words.insert(words.end(), relations.begin(), relations.end());
    words.insert(words.end(), entities.begin(), entities.end());
    return Vocabulary(std::move(words));
}

void render_docs(FactCorpus& c) {
    c.docs.clear();
    for (std::size_t i = 0; i < c.facts.size(); ++i) {
        const auto& f = c.facts[i];
        Document d;
        d.id = static_cast<int>(i);
        d.title = {c.entity_token(f.subject), c.relation_token(f.relation)};
        d.tokens = {c.entity_token(f.subject), c.relation_token(f.relation), kIs,
                    c.entity_token(f.object), kPeriod};
        c.docs.push_back(std::move(d));
    }
}

Question one_hop(const FactCorpus& c, int id, int s, int r) {
    Question q;
    q.id = id;
    q.hops = 1;
    q.tokens = {kWhat, kIs, kThe, c.relation_token(r), kOf, c.entity_token(s), kQuestionMark};
    q.gold_answers = {c.entities[static_cast<std::size_t>(c.fact(s, r).object)]};
    q.support_fact_ids = {s * static_cast<int>(c.relations.size()) + r};
    return q;
}

Question two_hop(const FactCorpus& c, int id, int s, int r1, int r2) {
    const int nr = static_cast<int>(c.relations.size());
    const int mid = c.fact(s, r1).object;
    Question q;
    q.id = id;
    q.hops = 2;
    q.tokens = {kWhat, kIs,  kThe, c.relation_token(r2), kOf,         kThe,
                c.relation_token(r1), kOf, c.entity_token(s), kQuestionMark};
    q.gold_answers = {c.entities[static_cast<std::size_t>(c.fact(mid, r2).object)]};
    q.support_fact_ids = {s * nr + r1, mid * nr + r2};
    return q;
}

}  // namespace

FactCorpus build_corpus(std::uint64_t seed, int n_entities, int n_relations) {
    if (n_entities < 4) {
        throw ConfigError("build_corpus needs at least 4 entities to form 2-hop chains");
    }
    if (n_relations < 2) {
        throw ConfigError("build_corpus needs at least 2 relations to form 2-hop chains");
    }
    if (n_relations > static_cast<int>(kRelationPool.size())) {
        throw ConfigError("build_corpus supports at most " +
                          std::to_string(kRelationPool.size()) + " relations");
    }
    if (n_entities > 2000) {
        throw ConfigError("build_corpus supports at most 2000 entities");
    }
    FactCorpus c;
    c.seed = seed;
    c.entities = entity_names(seed, n_entities);
    c.relations.assign(kRelationPool.begin(), kRelationPool.begin() + n_relations);
    c.vocab = make_vocab(c.relations, c.entities);

    std::mt19937_64 gen(derive_seed(seed, 2));
    for (int s = 0; s < n_entities; ++s) {
        for (int r = 0; r < n_relations; ++r) {
            int o = static_cast<int>(uniform_below(gen, static_cast<std::uint64_t>(n_entities - 1)));
            if (o >= s) {
                ++o;
            }
            c.facts.push_back({s, r, o});
        }
    }
    render_docs(c);

    int id = 0;
    for (int s = 0; s < n_entities; ++s) {
        for (int r = 0; r < n_relations; ++r) {
            c.questions.push_back(one_hop(c, id++, s, r));
        }
    }
    // Same number of 2-hop chains, drawn without replacement.
    const std::size_t n_chains = static_cast<std::size_t>(n_entities) * n_relations * n_relations;
    std::vector<std::size_t> chains(n_chains);
    for (std::size_t i = 0; i < n_chains; ++i) {
        chains[i] = i;
    }
    std::mt19937_64 pick(derive_seed(seed, 3));
    const std::size_t want = static_cast<std::size_t>(n_entities) * n_relations;
    for (std::size_t i = 0; i < want; ++i) {
        const std::size_t j = i + uniform_below(pick, n_chains - i);
        std::swap(chains[i], chains[j]);
    }
    chains.resize(want);
    std::sort(chains.begin(), chains.end());
    for (const std::size_t ch : chains) {
        const int s = static_cast<int>(ch / (n_relations * n_relations));
        const int r1 = static_cast<int>(ch / n_relations % n_relations);
        const int r2 = static_cast<int>(ch % n_relations);
        c.questions.push_back(two_hop(c, id++, s, r1, r2));
    }
    return c;
}

std::vector<int> retrieve(std::span<const int> query, const FactCorpus& corpus, int k) {
    for (const int t : query) {
        corpus.vocab.word(t);
    }
    return ranked(content_set(corpus.vocab, query), corpus, k);
}

std::vector<int> retrieve(std::string_view query, const FactCorpus& corpus, int k) {
    std::vector<int> ids;
    int unknown = -1;
    for (const auto& w : answer_tokens(query)) {
        // Unknown words still count as query content but match no document.
        ids.push_back(corpus.vocab.find(w).value_or(unknown--));
    }
    std::vector<int> q;
    for (const int id : ids) {
        if (id < 0 || corpus.vocab.is_content(id)) {
            q.push_back(id);
        }
    }
    std::sort(q.begin(), q.end());
    q.erase(std::unique(q.begin(), q.end()), q.end());
    return ranked(q, corpus, k);
}

void EnvConfig::validate() const {
    if (t_max < 1) {
        throw ConfigError("t_max must be >= 1");
    }
    if (top_k < 1) {
        throw ConfigError("top_k must be >= 1");
    }
    if (max_response_tokens < 1) {
        throw ConfigError("max_response_tokens must be >= 1");
    }
}

Segment to_loss_segment(EpisodeSegment s) {
    switch (s) {
        case EpisodeSegment::Think: return Segment::Reasoning;
        case EpisodeSegment::Search: return Segment::Action;
        case EpisodeSegment::Docs: return Segment::Retrieved;
        case EpisodeSegment::Answer: return Segment::Answer;
    }
    return Segment::Reasoning;
}

std::string_view to_string(EpisodeSegment s) {
    switch (s) {
        case EpisodeSegment::Think: return "THINK";
        case EpisodeSegment::Search: return "SEARCH";
        case EpisodeSegment::Docs: return "DOCS";
        case EpisodeSegment::Answer: return "ANSWER";
    }
    return "?";
}

SearchEnv::SearchEnv(const FactCorpus& corpus, EnvConfig cfg) : corpus_(&corpus), cfg_(cfg) {
    cfg_.validate();
}

EpisodeTranscript SearchEnv::reset(const Question& q) const {
    EpisodeTranscript t;
    t.question_id = q.id;
    return t;
}

void SearchEnv::finish(EpisodeTranscript& s, bool failure) const {
    s.terminal = true;
    s.format_failure = s.format_failure || failure;
    s.phase = EpisodeTranscript::Phase::Done;
    s.pending.clear();
}

void SearchEnv::advance(EpisodeTranscript& s, int token, double logp) const {
    using Phase = EpisodeTranscript::Phase;
    if (s.terminal) {
        throw InvalidState("step on a terminal transcript");
    }
    corpus_->vocab.word(token);

    auto push = [&](EpisodeSegment seg) { s.tokens.push_back({token, seg, 1, logp}); };
    ++s.agent_tokens;

    switch (s.phase) {
        case Phase::Top:
            if (token == tok::ThinkOpen) {
                push(EpisodeSegment::Think);
                s.phase = Phase::Think;
            } else if (token == tok::SearchOpen) {
                push(EpisodeSegment::Search);
                if (s.turn_count >= cfg_.t_max) {
                    // Turn cap reached: end without retrieving.
                    finish(s, false);
                    return;
                }
                s.phase = Phase::Search;
            } else if (token == tok::AnswerOpen) {
                push(EpisodeSegment::Answer);
                s.phase = Phase::Answer;
            } else {
                push(EpisodeSegment::Think);
                finish(s, true);
                return;
            }
            s.segment_tokens = 0;
            s.pending.clear();
            break;
        case Phase::Think:
            push(EpisodeSegment::Think);
            if (token == tok::ThinkClose) {
                s.phase = Phase::Top;
            } else if (corpus_->vocab.is_tag(token)) {
                finish(s, true);
                return;
            } else {
                ++s.segment_tokens;
            }
            break;
        case Phase::Search:
            push(EpisodeSegment::Search);
            if (token == tok::SearchClose) {
                std::vector<int> docs;
                try {
                    docs = retrieve(s.pending, *corpus_, cfg_.top_k);
                } catch (const EmptyQuery&) {
                    finish(s, true);
                    return;
                }
                ++s.turn_count;
                const double nan = std::numeric_limits<double>::quiet_NaN();
                s.last_docs_begin = s.tokens.size();
                s.has_docs = true;
                s.tokens.push_back({tok::DocsOpen, EpisodeSegment::Docs, 0, nan});
                for (const int d : docs) {
                    for (const int w : corpus_->docs[static_cast<std::size_t>(d)].tokens) {
                        s.tokens.push_back({w, EpisodeSegment::Docs, 0, nan});
                    }
                }
                s.tokens.push_back({tok::DocsClose, EpisodeSegment::Docs, 0, nan});
                s.phase = Phase::Top;
                s.pending.clear();
            } else if (corpus_->vocab.is_tag(token)) {
                finish(s, true);
                return;
            } else {
                s.pending.push_back(token);
                ++s.segment_tokens;
            }
            break;
        case Phase::Answer:
            push(EpisodeSegment::Answer);
            if (token == tok::AnswerClose) {
                s.extracted_answer = corpus_->vocab.render(s.pending);
                finish(s, false);
                return;
            }
            if (corpus_->vocab.is_tag(token)) {
                finish(s, true);
                return;
            }
            s.pending.push_back(token);
            ++s.segment_tokens;
            break;
        case Phase::Done:
            break;
    }
    if (!s.terminal && s.agent_tokens >= cfg_.max_response_tokens) {
        s.truncated = true;
        finish(s, false);
    }
}

EpisodeTranscript SearchEnv::step(EpisodeTranscript state,
                                  std::span<const int> action_tokens) const {
    if (state.terminal) {
        throw InvalidState("step on a terminal transcript");
    }
    for (const int t : action_tokens) {
        if (state.terminal) {
            break;
        }
        advance(state, t);
    }
    return state;
}

std::vector<std::uint8_t> loss_mask(const EpisodeTranscript& t) {
    std::vector<std::uint8_t> m;
    m.reserve(t.tokens.size());
    for (const auto& x : t.tokens) {
        m.push_back(x.segment == EpisodeSegment::Docs ? 0 : 1);
    }
    return m;
}

double episode_reward(const EpisodeTranscript& t, const Question& q) {
    if (!t.terminal) {
        throw InvalidState("episode_reward on a non-terminal transcript");
    }
    if (t.format_failure || !t.extracted_answer) {
        return 0.0;
    }
    return f1_reward({*t.extracted_answer, q.gold_answers});
}

int episode_em(const EpisodeTranscript& t, const Question& q) {
    if (!t.terminal) {
        throw InvalidState("episode_em on a non-terminal transcript");
    }
    if (t.format_failure || !t.extracted_answer) {
        return 0;
    }
    return em_score({*t.extracted_answer, q.gold_answers});
}

const std::vector<std::string>& think_words() { return kThinkWords; }

std::vector<int> oracle_actions(const FactCorpus& corpus, const Question& q, bool think) {
    const int filler_base = tok::NumTags + static_cast<int>(kFunctionWords.size());
    std::vector<int> out;
    int hop = 0;
    for (const int fid : q.support_fact_ids) {
        const auto& f = corpus.facts.at(static_cast<std::size_t>(fid));
        if (think) {
            out.insert(out.end(), {tok::ThinkOpen, filler_base + 6, filler_base + (hop == 0 ? 2 : 4),
                                   tok::ThinkClose});
        }
        out.insert(out.end(), {tok::SearchOpen, corpus.entity_token(f.subject),
                               corpus.relation_token(f.relation), tok::SearchClose});
        ++hop;
    }
    const auto& last = corpus.facts.at(static_cast<std::size_t>(q.support_fact_ids.back()));
    out.insert(out.end(), {tok::AnswerOpen, corpus.entity_token(last.object), tok::AnswerClose});
    return out;
}

nlohmann::json corpus_to_json(const FactCorpus& c) {
    using nlohmann::json;
    json facts = json::array();
    for (const auto& f : c.facts) {
        facts.push_back({{"subject", c.entities[static_cast<std::size_t>(f.subject)]},
                         {"relation", c.relations[static_cast<std::size_t>(f.relation)]},
                         {"object", c.entities[static_cast<std::size_t>(f.object)]}});
    }
    json docs = json::array();
    for (const auto& d : c.docs) {
        docs.push_back({{"id", d.id},
                        {"title", c.vocab.render(d.title)},
                        {"text", c.vocab.render(d.tokens)}});
    }
    json questions = json::array();
    for (const auto& q : c.questions) {
        questions.push_back({{"id", q.id},
                             {"text", c.question_text(q)},
                             {"hops", q.hops},
                             {"gold_answers", q.gold_answers},
                             {"support_fact_ids", q.support_fact_ids}});
    }
    return {{"format_version", 1},
            {"seed", c.seed},
            {"entities", c.entities},
            {"relations", c.relations},
            {"facts", facts},
            {"docs", docs},
            {"questions", questions}};
}

FactCorpus corpus_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format_version").get<int>() != 1) {
            throw ConfigError("unsupported corpus format_version");
        }
        FactCorpus c;
        c.seed = j.at("seed").get<std::uint64_t>();
        c.entities = j.at("entities").get<std::vector<std::string>>();
        c.relations = j.at("relations").get<std::vector<std::string>>();
        c.vocab = make_vocab(c.relations, c.entities);
        const int ne = static_cast<int>(c.entities.size());
        const int nr = static_cast<int>(c.relations.size());
        auto index_of = [](const std::vector<std::string>& v, const std::string& w) {
            auto it = std::find(v.begin(), v.end(), w);
            if (it == v.end()) {
                throw ConfigError("corpus references unknown name '" + w + "'");
            }
            return static_cast<int>(it - v.begin());
        };
        const auto& facts = j.at("facts");
        if (facts.size() != static_cast<std::size_t>(ne * nr)) {
            throw ConfigError("corpus must hold one fact per (entity, relation)");
        }
        for (std::size_t i = 0; i < facts.size(); ++i) {
            Fact f{index_of(c.entities, facts[i].at("subject").get<std::string>()),
                   index_of(c.relations, facts[i].at("relation").get<std::string>()),
                   index_of(c.entities, facts[i].at("object").get<std::string>())};
            if (static_cast<std::size_t>(f.subject * nr + f.relation) != i) {
                throw ConfigError("corpus facts are not in (subject, relation) order");
            }
            c.facts.push_back(f);
        }
        render_docs(c);
        for (const auto& jq : j.at("questions")) {
            Question q;
            q.id = jq.at("id").get<int>();
            q.hops = jq.at("hops").get<int>();
            std::istringstream words(jq.at("text").get<std::string>());
            for (std::string w; words >> w;) {
                q.tokens.push_back(c.vocab.id(w));
            }
            q.gold_answers = jq.at("gold_answers").get<std::vector<std::string>>();
            q.support_fact_ids = jq.at("support_fact_ids").get<std::vector<int>>();
            c.questions.push_back(std::move(q));
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed corpus JSON: ") + e.what());
    } catch (const InvalidInput& e) {
        throw ConfigError(std::string("malformed corpus JSON: ") + e.what());
    }
}

}  // namespace sapo
