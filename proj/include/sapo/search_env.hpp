#pragma once

// Synthetic multi-hop search environment over a closed vocabulary.
//
// Protocol (one token per policy action):
//   top level : <think> | <search> | <answer>
//   <think> free words </think>
//   <search> query words </search>  -> environment appends <documents> ... </documents>
//   <answer> words </answer>        -> terminal
// Anything else at the top level, or a tag inside a segment other than its
// closing tag, ends the episode with a format failure (reward 0).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "sapo/loss.hpp"

namespace sapo {

namespace tok {
inline constexpr int ThinkOpen = 0;
inline constexpr int ThinkClose = 1;
inline constexpr int SearchOpen = 2;
inline constexpr int SearchClose = 3;
inline constexpr int DocsOpen = 4;
inline constexpr int DocsClose = 5;
inline constexpr int AnswerOpen = 6;
inline constexpr int AnswerClose = 7;
inline constexpr int NumTags = 8;
}  // namespace tok

class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> words);

    /// Throws InvalidInput for an unknown word.
    int id(std::string_view word) const;
    std::optional<int> find(std::string_view word) const;
    const std::string& word(int id) const;
    std::size_t size() const noexcept { return words_.size(); }
    const std::vector<std::string>& words() const noexcept { return words_; }

    bool is_tag(int id) const noexcept { return id >= 0 && id < tok::NumTags; }
    /// Content words survive answer normalization (no tags, punctuation or articles).
    bool is_content(int id) const;

    std::string render(std::span<const int> ids) const;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
    std::vector<std::uint8_t> content_;
};

struct Fact {
    int subject = 0;   // entity index
    int relation = 0;  // relation index
    int object = 0;    // entity index
};

struct Document {
    int id = 0;
    std::vector<int> title;   // token ids
    std::vector<int> tokens;  // rendered body, token ids
};

struct Question {
    int id = 0;
    std::vector<int> tokens;
    int hops = 1;
    std::vector<std::string> gold_answers;
    std::vector<int> support_fact_ids;
};

struct FactCorpus {
    std::uint64_t seed = 0;
    Vocabulary vocab;
    std::vector<std::string> entities;
    std::vector<std::string> relations;
    std::vector<Fact> facts;  // fact id = subject * relations.size() + relation
    std::vector<Document> docs;  // doc id == fact id
    std::vector<Question> questions;

    int entity_token(int entity) const;
    int relation_token(int relation) const;
    const Fact& fact(int subject, int relation) const;
    std::string question_text(const Question& q) const;
};

/// Deterministic corpus: every (entity, relation) pair has one fact whose
/// object is a different entity. Questions: all 1-hop questions plus an equal
/// number of distinct 2-hop chains. Throws ConfigError for fewer than 4
/// entities, fewer than 2 relations, or more relations than the word pool holds.
FactCorpus build_corpus(std::uint64_t seed, int n_entities, int n_relations);

/// Top-k docs by |Q ∩ title| + |Q ∩ body| over normalized tokens, ties by doc id.
/// Throws EmptyQuery when no content token remains.
std::vector<int> retrieve(std::span<const int> query, const FactCorpus& corpus, int k);
std::vector<int> retrieve(std::string_view query, const FactCorpus& corpus, int k);

struct EnvConfig {
    int t_max = 5;
    int top_k = 3;
    int max_response_tokens = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class EpisodeSegment : std::uint8_t { Think, Search, Docs, Answer };

Segment to_loss_segment(EpisodeSegment s);
std::string_view to_string(EpisodeSegment s);

struct TranscriptToken {
    int token = 0;
    EpisodeSegment segment = EpisodeSegment::Think;
    std::uint8_t mask = 1;
    double logp = 0.0;  // generating-policy log-prob; NaN for retrieved tokens
};

struct EpisodeTranscript {
    enum class Phase : std::uint8_t { Top, Think, Search, Answer, Done };

    int question_id = 0;
    std::vector<TranscriptToken> tokens;
    int turn_count = 0;
    bool terminal = false;
    bool format_failure = false;
    bool truncated = false;
    std::optional<std::string> extracted_answer;

    // Parser state.
    Phase phase = Phase::Top;
    int agent_tokens = 0;
    int segment_tokens = 0;  // content tokens inside the open segment
    std::vector<int> pending;  // query / answer tokens of the open segment
    std::size_t last_docs_begin = 0;  // index of the last <documents>, or tokens.size() if none
    bool has_docs = false;
};

class SearchEnv {
public:
    SearchEnv(const FactCorpus& corpus, EnvConfig cfg);

    const FactCorpus& corpus() const noexcept { return *corpus_; }
    const EnvConfig& config() const noexcept { return cfg_; }

    EpisodeTranscript reset(const Question& q) const;

    /// Feeds one agent token. Throws InvalidState on a terminal transcript and
    /// InvalidInput for an out-of-vocabulary id.
    void advance(EpisodeTranscript& state, int token, double logp = 0.0) const;

    EpisodeTranscript step(EpisodeTranscript state, std::span<const int> action_tokens) const;

private:
    void finish(EpisodeTranscript& state, bool failure) const;

    const FactCorpus* corpus_;
    EnvConfig cfg_;
};

std::vector<std::uint8_t> loss_mask(const EpisodeTranscript& t);

/// F1 of the extracted answer against the gold answers; 0 on format failure or
/// missing answer. Throws InvalidState on a non-terminal transcript.
double episode_reward(const EpisodeTranscript& t, const Question& q);
int episode_em(const EpisodeTranscript& t, const Question& q);

/// Free-form words allowed inside think segments.
const std::vector<std::string>& think_words();

/// Action tokens of the scripted agent that follows the question's support facts.
std::vector<int> oracle_actions(const FactCorpus& corpus, const Question& q, bool think = false);

nlohmann::json corpus_to_json(const FactCorpus& corpus);
FactCorpus corpus_from_json(const nlohmann::json& j);

}  // namespace sapo
