#include "sapo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "sapo/advantage.hpp"
#include "sapo/errors.hpp"
#include "sapo/loss.hpp"
#include "sapo/rng.hpp"

namespace sapo {

namespace {

constexpr std::size_t kMaxParams = 100000;
constexpr int kCountBuckets = 4;
constexpr int kPhases = 4;

double log_sum_exp(std::span<const double> x, const Support& support) {
    double m = -std::numeric_limits<double>::infinity();
    auto each = [&](auto&& fn) {
        if (support.empty()) {
            for (std::size_t v = 0; v < x.size(); ++v) {
                fn(v);
            }
        } else {
            for (const int v : support) {
                fn(static_cast<std::size_t>(v));
            }
        }
    };
    each([&](std::size_t v) { m = std::max(m, x[v]); });
    double s = 0.0;
    each([&](std::size_t v) { s += std::exp(x[v] - m); });
    return m + std::log(s);
}

}  // namespace

void PolicyConfig::validate() const {
    if (hidden < 1) {
        throw ConfigError("policy hidden width must be >= 1");
    }
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ConfigError("policy temperature must be > 0");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
        throw ConfigError("top_p must lie in (0, 1]");
    }
    if (question_window < 1 || docs_window < 0) {
        throw ConfigError("feature windows must be non-negative (question window >= 1)");
    }
    if (!(init_scale >= 0.0) || !std::isfinite(init_scale)) {
        throw ConfigError("init_scale must be >= 0");
    }
}

FeatureSpace::FeatureSpace(std::size_t vocab_size, const PolicyConfig& pcfg, const EnvConfig& ecfg)
    : vocab_(vocab_size),
      qwin_(pcfg.question_window),
      dwin_(pcfg.docs_window),
      turns_(ecfg.t_max + 1) {
    const int v = static_cast<int>(vocab_size);
    off_q_ = 0;
    off_d_ = off_q_ + qwin_ * v;
    off_state_ = off_d_ + dwin_ * v;
    off_prev_ = off_state_ + kPhases * kCountBuckets * turns_;
    off_bias_ = off_prev_ + v + 1;
    dim_ = static_cast<std::size_t>(off_bias_ + 1);
}

std::vector<int> FeatureSpace::extract(const Question& q, const EpisodeTranscript& t) const {
    using Phase = EpisodeTranscript::Phase;
    const int v = static_cast<int>(vocab_);
    std::vector<int> f;
    f.reserve(static_cast<std::size_t>(qwin_ + dwin_ + 3));
    const int qn = static_cast<int>(q.tokens.size());
    for (int p = 0; p < qwin_ && p < qn; ++p) {
        f.push_back(off_q_ + p * v + q.tokens[static_cast<std::size_t>(qn - 1 - p)]);
    }
    if (t.has_docs) {
        std::size_t i = t.last_docs_begin + 1;
        for (int p = 0; p < dwin_ && i < t.tokens.size(); ++p, ++i) {
            if (t.tokens[i].token == tok::DocsClose) {
                break;
            }
            f.push_back(off_d_ + p * v + t.tokens[i].token);
        }
    }
    int phase = 0;
    switch (t.phase) {
        case Phase::Top: phase = 0; break;
        case Phase::Think: phase = 1; break;
        case Phase::Search: phase = 2; break;
        case Phase::Answer: phase = 3; break;
        case Phase::Done: throw InvalidState("features requested for a terminal transcript");
    }
    const int count = phase == 0 ? 0 : std::min(t.segment_tokens, kCountBuckets - 1);
    const int turn = std::min(t.turn_count, turns_ - 1);
    f.push_back(off_state_ + (phase * kCountBuckets + count) * turns_ + turn);
    f.push_back(off_prev_ + (t.tokens.empty() ? v : t.tokens.back().token));
    f.push_back(off_bias_);
    return f;
}

TinyPolicy::TinyPolicy(const PolicyConfig& cfg, std::size_t vocab_size, std::size_t feature_dim)
    : cfg_(cfg), vocab_(vocab_size), dim_(feature_dim) {
    cfg_.validate();
    if (vocab_ < 2 || dim_ < 1) {
        throw ConfigError("policy needs a vocabulary of at least 2 tokens and >= 1 feature");
    }
    const std::size_t n = b2_offset() + vocab_;
    if (n > kMaxParams) {
        throw ConfigError("policy would have " + std::to_string(n) + " parameters (limit " +
                          std::to_string(kMaxParams) + ")");
    }
    params_.assign(n, 0.0);
}

TinyPolicy TinyPolicy::initialize(const PolicyConfig& cfg, std::size_t vocab_size,
                                  std::size_t feature_dim, std::uint64_t seed) {
    TinyPolicy p(cfg, vocab_size, feature_dim);
    std::mt19937_64 gen(derive_seed(seed, 0x5EED));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = p.w1_offset(); i < p.b1_offset(); ++i) {
        p.params_[i] = cfg.init_scale * normal(gen);
    }
    return p;
}

PositionOutput TinyPolicy::forward(std::span<const int> features) const {
    const std::size_t h = hidden();
    PositionOutput out;
    out.hidden.assign(params_.begin() + static_cast<std::ptrdiff_t>(b1_offset()),
                      params_.begin() + static_cast<std::ptrdiff_t>(b1_offset() + h));
    for (const int j : features) {
        if (j < 0 || static_cast<std::size_t>(j) >= dim_) {
            throw InvalidInput("feature index " + std::to_string(j) + " outside the feature space");
        }
        const double* row = params_.data() + w1_offset() + static_cast<std::size_t>(j) * h;
        for (std::size_t k = 0; k < h; ++k) {
            out.hidden[k] += row[k];
        }
    }
    for (auto& x : out.hidden) {
        x = std::tanh(x);
    }
    out.logits.resize(vocab_);
    const double inv_t = 1.0 / cfg_.temperature;
    for (std::size_t v = 0; v < vocab_; ++v) {
        const double* row = params_.data() + w2_offset() + v * h;
        double z = params_[b2_offset() + v];
        for (std::size_t k = 0; k < h; ++k) {
            z += row[k] * out.hidden[k];
        }
        out.logits[v] = z * inv_t;
    }
    return out;
}

void TinyPolicy::accumulate_logp_gradient(std::span<const int> features, const PositionOutput& out,
                                          int token, const Support& support, double coeff,
                                          std::span<double> grad) const {
    if (coeff == 0.0) {
        return;
    }
    const std::size_t h = hidden();
    const double lse = log_sum_exp(out.logits, support);
    // d log pi_S(token) / d raw logits = (e_token - p_S) / temperature.
    std::vector<double> g(vocab_, 0.0);
    const double scale = coeff / cfg_.temperature;
    auto fill = [&](std::size_t v) { g[v] = -scale * std::exp(out.logits[v] - lse); };
    if (support.empty()) {
        for (std::size_t v = 0; v < vocab_; ++v) {
            fill(v);
        }
    } else {
        for (const int v : support) {
            fill(static_cast<std::size_t>(v));
        }
    }
    g[static_cast<std::size_t>(token)] += scale;

    std::vector<double> dh(h, 0.0);
    for (std::size_t v = 0; v < vocab_; ++v) {
        if (g[v] == 0.0) {
            continue;
        }
        grad[b2_offset() + v] += g[v];
        const double* w = params_.data() + w2_offset() + v * h;
        double* gw = grad.data() + w2_offset() + v * h;
        for (std::size_t k = 0; k < h; ++k) {
            gw[k] += g[v] * out.hidden[k];
            dh[k] += g[v] * w[k];
        }
    }
    for (std::size_t k = 0; k < h; ++k) {
        dh[k] *= 1.0 - out.hidden[k] * out.hidden[k];
        grad[b1_offset() + k] += dh[k];
    }
    for (const int j : features) {
        double* gw = grad.data() + w1_offset() + static_cast<std::size_t>(j) * h;
        for (std::size_t k = 0; k < h; ++k) {
            gw[k] += dh[k];
        }
    }
}

double support_logp(std::span<const double> logits, int token, const Support& support) {
    if (token < 0 || static_cast<std::size_t>(token) >= logits.size()) {
        throw InvalidInput("token id " + std::to_string(token) + " outside the vocabulary");
    }
    if (!support.empty() && !std::binary_search(support.begin(), support.end(), token)) {
        throw InvalidInput("token id " + std::to_string(token) + " outside the sampling support");
    }
    return logits[static_cast<std::size_t>(token)] - log_sum_exp(logits, support);
}

std::vector<double> softmax(std::span<const double> logits) {
    const double lse = log_sum_exp(logits, {});
    std::vector<double> p(logits.size());
    for (std::size_t v = 0; v < logits.size(); ++v) {
        p[v] = std::exp(logits[v] - lse);
    }
    return p;
}

Support nucleus(std::span<const double> logits, double top_p) {
    if (top_p >= 1.0) {
        return {};
    }
    const auto p = softmax(logits);
    std::vector<int> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)]; });
    double mass = 0.0;
    std::size_t n = 0;
    while (n < order.size() && mass < top_p) {
        mass += p[static_cast<std::size_t>(order[n])];
        ++n;
    }
    if (n == order.size()) {
        return {};
    }
    Support s(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
    std::sort(s.begin(), s.end());
    return s;
}

SampledToken sample_token(std::span<const double> logits, double top_p, std::mt19937_64& gen) {
    SampledToken out;
    out.support = nucleus(logits, top_p);
    const double lse = log_sum_exp(logits, out.support);
    const double u = uniform01(gen);
    double acc = 0.0;
    auto pick = [&](int v) {
        acc += std::exp(logits[static_cast<std::size_t>(v)] - lse);
        return u < acc;
    };
    int chosen = -1;
    if (out.support.empty()) {
        for (int v = 0; v < static_cast<int>(logits.size()) && chosen < 0; ++v) {
            if (pick(v)) {
                chosen = v;
            }
        }
        if (chosen < 0) {
            chosen = static_cast<int>(logits.size()) - 1;
        }
    } else {
        for (const int v : out.support) {
            if (pick(v)) {
                chosen = v;
                break;
            }
        }
        if (chosen < 0) {
            chosen = out.support.back();
        }
    }
    out.token = chosen;
    out.logp = logits[static_cast<std::size_t>(chosen)] - lse;
    return out;
}

int greedy_token(std::span<const double> logits) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

namespace {

template <class Choose>
Episode run_episode(const TinyPolicy& policy, const FeatureSpace& fs, const SearchEnv& env,
                    const Question& q, Choose&& choose) {
    Episode ep;
    ep.transcript = env.reset(q);
    auto& t = ep.transcript;
    while (!t.terminal) {
        PolicyStep step;
        step.features = fs.extract(q, t);
        const auto out = policy.forward(step.features);
        ep.entropies.push_back(entropy(softmax(out.logits)));
        const auto [token, logp, support] = choose(out.logits);
        step.token = token;
        step.support = support;
        const std::size_t before = t.tokens.size();
        env.advance(t, token, logp);
        ep.steps.push_back(std::move(step));
        for (std::size_t i = before + 1; i < t.tokens.size(); ++i) {
            ep.steps.push_back(PolicyStep{});
        }
    }
    ep.reward = episode_reward(t, q);
    return ep;
}

}  // namespace

Episode rollout_episode(const TinyPolicy& policy, const FeatureSpace& fs, const SearchEnv& env,
                        const Question& q, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    const double top_p = policy.config().top_p;
    return run_episode(policy, fs, env, q, [&](const std::vector<double>& logits) {
        return sample_token(logits, top_p, gen);
    });
}

RolloutGroup rollout_group(const TinyPolicy& policy, const FeatureSpace& fs,
                           const SearchEnv& env, const Question& q, int group_size,
                           std::uint64_t seed) {
    if (group_size < 2) {
        throw ConfigError("group_size must be >= 2");
    }
    RolloutGroup g;
    g.question_id = q.id;
    for (int i = 0; i < group_size; ++i) {
        g.episodes.push_back(
            rollout_episode(policy, fs, env, q, derive_seed(seed, static_cast<std::uint64_t>(i))));
        g.rewards.push_back(g.episodes.back().reward);
    }
    g.advantages = group_advantages(g.rewards);
    return g;
}

Episode greedy_episode(const TinyPolicy& policy, const FeatureSpace& fs, const SearchEnv& env,
                       const Question& q) {
    return run_episode(policy, fs, env, q, [&](const std::vector<double>& logits) {
        const int t = greedy_token(logits);
        return SampledToken{t, support_logp(logits, t, {}), {}};
    });
}

ForwardResult forward_logprobs(const TinyPolicy& policy, const FeatureSpace& fs,
                               const SearchEnv& env, const Question& q,
                               const EpisodeTranscript& transcript) {
    ForwardResult r;
    auto t = env.reset(q);
    std::size_t i = 0;
    while (i < transcript.tokens.size()) {
        const auto& x = transcript.tokens[i];
        if (x.segment == EpisodeSegment::Docs) {
            throw InvalidInput("transcript has retrieved tokens where an agent token was expected");
        }
        if (t.terminal) {
            throw InvalidInput("transcript continues past a terminal state");
        }
        const auto out = policy.forward(fs.extract(q, t));
        r.logp.push_back(support_logp(out.logits, x.token, {}));
        r.distributions.push_back(softmax(out.logits));
        r.mask.push_back(1);
        const std::size_t before = t.tokens.size();
        env.advance(t, x.token);
        ++i;
        for (std::size_t k = before + 1; k < t.tokens.size(); ++k, ++i) {
            if (i >= transcript.tokens.size() || transcript.tokens[i].token != t.tokens[k].token) {
                throw InvalidInput("transcript retrieval does not match the environment");
            }
            r.logp.push_back(std::numeric_limits<double>::quiet_NaN());
            r.mask.push_back(0);
        }
    }
    return r;
}

EvalResult evaluate(const TinyPolicy& policy, const FeatureSpace& fs, const SearchEnv& env,
                    std::span<const Question> questions) {
    if (questions.empty()) {
        throw InvalidInput("evaluate needs at least one question");
    }
    EvalResult r;
    for (const auto& q : questions) {
        const auto ep = greedy_episode(policy, fs, env, q);
        r.em += episode_em(ep.transcript, q);
        r.f1 += ep.reward;
    }
    r.n = questions.size();
    r.em /= static_cast<double>(r.n);
    r.f1 /= static_cast<double>(r.n);
    return r;
}

void behavior_clone(TinyPolicy& policy, const FeatureSpace& fs, const SearchEnv& env,
                    std::span<const Question> questions, int steps, double lr,
                    std::uint64_t seed) {
    if (steps <= 0) {
        return;
    }
    if (questions.empty()) {
        throw InvalidInput("behavior cloning needs at least one question");
    }
    std::vector<int> fillers;
    for (const auto& w : think_words()) {
        fillers.push_back(env.corpus().vocab.id(w));
    }
    std::mt19937_64 gen(derive_seed(seed, 0xB0C1));
    std::vector<double> grad(policy.params().size());
    for (int s = 0; s < steps; ++s) {
        const auto& q = questions[uniform_below(gen, questions.size())];
        std::vector<int> actions;
        for (const int a : oracle_actions(env.corpus(), q, false)) {
            if ((a == tok::SearchOpen || a == tok::AnswerOpen) && uniform_below(gen, 2) == 0) {
                actions.push_back(tok::ThinkOpen);
                const auto n = 1 + uniform_below(gen, 2);
                for (std::uint64_t k = 0; k < n; ++k) {
                    actions.push_back(fillers[uniform_below(gen, fillers.size())]);
                }
                actions.push_back(tok::ThinkClose);
            }
            actions.push_back(a);
        }
        std::fill(grad.begin(), grad.end(), 0.0);
        auto t = env.reset(q);
        for (const int a : actions) {
            if (t.terminal) {
                break;
            }
            const auto f = fs.extract(q, t);
            const auto out = policy.forward(f);
            policy.accumulate_logp_gradient(f, out, a, {}, 1.0, grad);
            env.advance(t, a);
        }
        const double step = lr / static_cast<double>(actions.size());
        for (std::size_t i = 0; i < grad.size(); ++i) {
            policy.params()[i] += step * grad[i];
        }
    }
}

}  // namespace sapo
