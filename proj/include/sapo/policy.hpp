#pragma once

// One-hidden-layer softmax policy over the environment vocabulary.
//
//   h = tanh(b1 + sum_{j active} W1[j])      (sparse binary features)
//   logits = (b2 + W2 h) / temperature
//
// Sampling uses top-p truncation. The nucleus chosen at sampling time is kept
// with every step so that the update renormalizes over the same support and
// the importance ratio is exactly 1 on-policy.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "sapo/search_env.hpp"

namespace sapo {

struct PolicyConfig {
    int hidden = 64;
    double temperature = 1.0;
    double top_p = 0.95;
    int question_window = 8;  // question tokens counted from the end
    int docs_window = 6;      // leading tokens of the latest retrieval
    double init_scale = 0.5;  // std of W1 at initialization; W2 and biases start at 0

    void validate() const;
};

/// Maps (question, transcript prefix) to active binary feature indices.
class FeatureSpace {
public:
    FeatureSpace(std::size_t vocab_size, const PolicyConfig& pcfg, const EnvConfig& ecfg);

    std::size_t dim() const noexcept { return dim_; }
    std::vector<int> extract(const Question& q, const EpisodeTranscript& t) const;

private:
    std::size_t vocab_;
    int qwin_;
    int dwin_;
    int turns_;
    int off_q_ = 0;
    int off_d_ = 0;
    int off_state_ = 0;
    int off_prev_ = 0;
    int off_bias_ = 0;
    std::size_t dim_ = 0;
};

/// Sampling nucleus at one position (sorted token ids). Empty means the full vocabulary.
using Support = std::vector<int>;

struct PositionOutput {
    std::vector<double> hidden;  // tanh activations
    std::vector<double> logits;  // already divided by the temperature
};

class TinyPolicy {
public:
    TinyPolicy() = default;
    TinyPolicy(const PolicyConfig& cfg, std::size_t vocab_size, std::size_t feature_dim);

    /// W1 ~ N(0, init_scale^2) from the seed; everything else zero, so the
    /// initial policy is uniform over the vocabulary.
    static TinyPolicy initialize(const PolicyConfig& cfg, std::size_t vocab_size,
                                 std::size_t feature_dim, std::uint64_t seed);

    const PolicyConfig& config() const noexcept { return cfg_; }
    std::size_t vocab_size() const noexcept { return vocab_; }
    std::size_t feature_dim() const noexcept { return dim_; }
    std::size_t hidden() const noexcept { return static_cast<std::size_t>(cfg_.hidden); }

    std::vector<double>& params() noexcept { return params_; }
    const std::vector<double>& params() const noexcept { return params_; }

    /// Throws InvalidInput for a feature index outside the feature space.
    PositionOutput forward(std::span<const int> features) const;

    /// Accumulates coeff * d log pi_S(token) / d params into grad, where pi_S is
    /// the softmax restricted to the support.
    void accumulate_logp_gradient(std::span<const int> features, const PositionOutput& out,
                                  int token, const Support& support, double coeff,
                                  std::span<double> grad) const;

    // Parameter layout: W1 (feature-major, dim x hidden), b1, W2 (vocab x hidden), b2.
    std::size_t w1_offset() const noexcept { return 0; }
    std::size_t b1_offset() const noexcept { return dim_ * hidden(); }
    std::size_t w2_offset() const noexcept { return b1_offset() + hidden(); }
    std::size_t b2_offset() const noexcept { return w2_offset() + vocab_ * hidden(); }

private:
    PolicyConfig cfg_;
    std::size_t vocab_ = 0;
    std::size_t dim_ = 0;
    std::vector<double> params_;
};

/// Log-probability of `token` under the softmax restricted to `support`.
/// Throws InvalidInput when the token lies outside the support or vocabulary.
double support_logp(std::span<const double> logits, int token, const Support& support);

/// Full softmax of the logits.
std::vector<double> softmax(std::span<const double> logits);

/// Smallest prefix of tokens sorted by probability (ties by id) whose mass
/// reaches top_p, returned sorted by id; empty when it covers the vocabulary.
Support nucleus(std::span<const double> logits, double top_p);

struct SampledToken {
    int token = 0;
    double logp = 0.0;
    Support support;
};

SampledToken sample_token(std::span<const double> logits, double top_p, std::mt19937_64& gen);
int greedy_token(std::span<const double> logits);

/// One recorded agent decision.
struct PolicyStep {
    std::vector<int> features;
    int token = -1;  // -1 marks a retrieved (non-agent) position
    Support support;
};

struct Episode {
    EpisodeTranscript transcript;
    std::vector<PolicyStep> steps;  // parallel to transcript.tokens
    double reward = 0.0;
    std::vector<double> entropies;  // per agent token, full softmax
};

struct RolloutGroup {
    int question_id = 0;
    std::vector<Episode> episodes;
    std::vector<double> rewards;
    std::vector<double> advantages;
};

Episode rollout_episode(const TinyPolicy& policy, const FeatureSpace& fs, const SearchEnv& env,
                        const Question& q, std::uint64_t seed);

/// G sampled episodes for one question; episode g draws from derive_seed(seed, g).
RolloutGroup rollout_group(const TinyPolicy& policy, const FeatureSpace& fs,
                           const SearchEnv& env, const Question& q, int group_size,
                           std::uint64_t seed);

Episode greedy_episode(const TinyPolicy& policy, const FeatureSpace& fs, const SearchEnv& env,
                       const Question& q);

/// Replays an action sequence from the environment and records the features
/// and full-softmax log-probs of every agent token.
struct ForwardResult {
    std::vector<double> logp;  // per transcript token; NaN on retrieved tokens
    std::vector<std::vector<double>> distributions;  // per agent token
    std::vector<std::uint8_t> mask;
};

ForwardResult forward_logprobs(const TinyPolicy& policy, const FeatureSpace& fs,
                               const SearchEnv& env, const Question& q,
                               const EpisodeTranscript& transcript);

struct EvalResult {
    double em = 0.0;
    double f1 = 0.0;
    std::size_t n = 0;
};

/// Greedy decoding, macro-averaged EM and F1. Throws InvalidInput on an empty list.
EvalResult evaluate(const TinyPolicy& policy, const FeatureSpace& fs, const SearchEnv& env,
                    std::span<const Question> questions);

/// Supervised warm start on scripted transcripts (with random think segments),
/// standing in for a pretrained model. Plain SGD on the token cross-entropy.
void behavior_clone(TinyPolicy& policy, const FeatureSpace& fs, const SearchEnv& env,
                    std::span<const Question> questions, int steps, double lr,
                    std::uint64_t seed);

}  // namespace sapo
