#include "sapo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "sapo/advantage.hpp"
#include "sapo/errors.hpp"
#include "sapo/rng.hpp"

namespace sapo {

PolicyBatch build_batch(const std::vector<RolloutGroup>& groups) {
    PolicyBatch b;
    auto& tb = b.tokens;
    std::int64_t traj = 0;
    for (const auto& g : groups) {
        for (std::size_t i = 0; i < g.episodes.size(); ++i) {
            const auto& ep = g.episodes[i];
            for (std::size_t t = 0; t < ep.transcript.tokens.size(); ++t) {
                const auto& x = ep.transcript.tokens[t];
                const bool retrieved = x.segment == EpisodeSegment::Docs;
                // Retrieved tokens carry placeholder log-probs; they are masked out.
                tb.old_logp.push_back(retrieved ? 0.0 : x.logp);
                tb.new_logp.push_back(retrieved ? 0.0 : x.logp);
                tb.advantage.push_back(g.advantages[i]);
                tb.mask.push_back(x.mask);
                tb.segment.push_back(to_loss_segment(x.segment));
                tb.trajectory_id.push_back(traj);
                b.steps.push_back(ep.steps[t]);
            }
            ++traj;
        }
    }
    return b;
}

namespace {

struct Recomputed {
    std::vector<PositionOutput> outputs;  // empty outputs on retrieved positions
    TokenBatch tokens;
    double entropy = 0.0;
};

Recomputed recompute(const TinyPolicy& policy, const PolicyBatch& batch) {
    if (batch.steps.size() != batch.tokens.size()) {
        throw InvalidInput("policy batch steps and tokens differ in length");
    }
    Recomputed r;
    r.tokens = batch.tokens;
    r.outputs.resize(batch.steps.size());
    double ent = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < batch.steps.size(); ++t) {
        const auto& s = batch.steps[t];
        if (s.token < 0) {
            continue;
        }
        r.outputs[t] = policy.forward(s.features);
        r.tokens.new_logp[t] = support_logp(r.outputs[t].logits, s.token, s.support);
        if (!std::isfinite(r.tokens.new_logp[t])) {
            throw NonFiniteGradient("non-finite log-prob at token " + std::to_string(t), t);
        }
        if (batch.tokens.mask[t] != 0) {
            ent += entropy(softmax(r.outputs[t].logits));
            ++n;
        }
    }
    r.entropy = n > 0 ? ent / static_cast<double>(n) : 0.0;
    return r;
}

}  // namespace

LossAndGradient policy_loss_gradient(const TinyPolicy& policy, const PolicyBatch& batch,
                                     const LossConfig& cfg, double coefficient_scale) {
    const auto rc = recompute(policy, batch);
    LossAndGradient out;
    out.report = sapo_objective(rc.tokens, cfg);
    out.entropy = rc.entropy;
    const auto coeffs = analytic_gradient_coefficients(rc.tokens, cfg);
    out.boundary_tokens = coeffs.boundary_tokens;

    out.grad.assign(policy.params().size(), 0.0);
    for (std::size_t t = 0; t < batch.steps.size(); ++t) {
        const double c = coeffs.objective[t] * coefficient_scale;
        if (c == 0.0 || batch.steps[t].token < 0) {
            continue;
        }
        // d loss = -sum c_t d log pi_t.
        policy.accumulate_logp_gradient(batch.steps[t].features, rc.outputs[t],
                                        batch.steps[t].token, batch.steps[t].support, -c,
                                        out.grad);
    }

    std::map<std::int64_t, double> log_w;
    for (std::size_t t = 0; t < rc.tokens.size(); ++t) {
        auto& w = log_w[rc.tokens.trajectory_id[t]];
        if (rc.tokens.mask[t] != 0) {
            w += rc.tokens.new_logp[t] - rc.tokens.old_logp[t];
        }
    }
    for (const auto& [id, lw] : log_w) {
        out.trajectory_weights.push_back(std::exp(lw));
    }
    return out;
}

double policy_loss(const TinyPolicy& policy, const PolicyBatch& batch, const LossConfig& cfg) {
    return sapo_objective(recompute(policy, batch).tokens, cfg).loss;
}

UpdateResult apply_update(const TinyPolicy& policy, const PolicyBatch& batch, const LossConfig& cfg,
                          double lr) {
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        throw ConfigError("learning rate must be > 0");
    }
    UpdateResult r{policy, policy_loss_gradient(policy, batch, cfg)};
    auto& p = r.policy.params();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!std::isfinite(r.before.grad[i])) {
            throw NonFiniteGradient("non-finite gradient at parameter " + std::to_string(i), i);
        }
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] -= lr * r.before.grad[i];
    }
    return r;
}

double central_difference_error(const std::function<double(const std::vector<double>&)>& f,
                                const std::vector<double>& x, const std::vector<double>& analytic,
                                double h) {
    if (analytic.size() != x.size()) {
        throw InvalidInput("analytic gradient length differs from the parameter vector");
    }
    std::vector<double> probe = x;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double up = f(probe);
        probe[i] = x[i] - h;
        const double down = f(probe);
        probe[i] = x[i];
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

namespace {

// Extended-precision loss for the finite-difference probe. In double the
// h = 1e-6 central difference carries about ulp(loss) / 2h of rounding noise,
// enough to swamp gradient components below ~1e-5. Written independently of
// the double loss path; only the penalty gate is shared.
long double reference_loss(const TinyPolicy& policy, const PolicyBatch& batch, const LossConfig& cfg) {
    using ld = long double;
    const auto& p = policy.params();
    const std::size_t h = policy.hidden();
    const std::size_t vocab = policy.vocab_size();
    const ld inv_t = 1.0L / static_cast<ld>(policy.config().temperature);
    const auto& tb = batch.tokens;

    std::vector<ld> new_logp(tb.size(), 0.0L);
    std::vector<ld> hid(h);
    std::vector<ld> logits(vocab);
    for (std::size_t t = 0; t < tb.size(); ++t) {
        const auto& s = batch.steps[t];
        if (tb.mask[t] == 0 || s.token < 0) {
            continue;
        }
        for (std::size_t k = 0; k < h; ++k) {
            hid[k] = p[policy.b1_offset() + k];
        }
        for (const int j : s.features) {
            for (std::size_t k = 0; k < h; ++k) {
                hid[k] += p[policy.w1_offset() + static_cast<std::size_t>(j) * h + k];
            }
        }
        for (auto& x : hid) {
            x = std::tanh(x);
        }
        for (std::size_t v = 0; v < vocab; ++v) {
            ld z = p[policy.b2_offset() + v];
            for (std::size_t k = 0; k < h; ++k) {
                z += p[policy.w2_offset() + v * h + k] * hid[k];
            }
            logits[v] = z * inv_t;
        }
        std::vector<std::size_t> support;
        if (s.support.empty()) {
            for (std::size_t v = 0; v < vocab; ++v) {
                support.push_back(v);
            }
        } else {
            for (const int v : s.support) {
                support.push_back(static_cast<std::size_t>(v));
            }
        }
        ld m = logits[support.front()];
        for (const auto v : support) {
            m = std::max(m, logits[v]);
        }
        ld sum = 0.0L;
        for (const auto v : support) {
            sum += std::exp(logits[v] - m);
        }
        new_logp[t] = logits[static_cast<std::size_t>(s.token)] - m - std::log(sum);
    }

    std::map<std::int64_t, std::vector<std::size_t>> trajs;
    for (std::size_t t = 0; t < tb.size(); ++t) {
        if (tb.mask[t] != 0) {
            trajs[tb.trajectory_id[t]].push_back(t);
        }
    }
    const bool penalized = cfg.variant != Variant::Grpo;
    const bool with_ref = cfg.use_ref_kl && tb.has_reference();
    std::size_t qualifying = 0;
    for (const auto& [id, idx] : trajs) {
        const double a = tb.advantage[idx.front()];
        const bool pos = cfg.listing_inequalities ? a >= 0.0 : a > 0.0;
        if (cfg.variant != Variant::Sapo || pos) {
            qualifying += idx.size();
        }
    }

    const ld eps = cfg.clip_eps;
    ld pg = 0.0L;
    ld pen_insum = 0.0L;
    ld pen_masked = 0.0L;
    ld ref = 0.0L;
    for (const auto& [id, idx] : trajs) {
        const ld len = static_cast<ld>(idx.size());
        ld traj_pg = 0.0L;
        ld traj_pen = 0.0L;
        ld traj_ref = 0.0L;
        for (const auto t : idx) {
            const ld lr = new_logp[t] - static_cast<ld>(tb.old_logp[t]);
            const ld r = std::exp(lr);
            const ld a = tb.advantage[t];
            traj_pg += std::min(r * a, std::clamp(r, 1.0L - eps, 1.0L + eps) * a);
            if (penalized && penalty_active(static_cast<double>(r), tb.advantage[t], cfg)) {
                (cfg.penalty_aggregation == PenaltyAggregation::InSum ? traj_pen : pen_masked) += lr;
            }
            if (with_ref) {
                traj_ref += new_logp[t] - static_cast<ld>(tb.ref_logp[t]);
            }
        }
        pg += traj_pg / len;
        pen_insum += traj_pen / len;
        ref += traj_ref / len;
    }
    const ld groups = static_cast<ld>(trajs.size());
    ld loss = -pg / groups;
    if (penalized) {
        const ld agg = cfg.penalty_aggregation == PenaltyAggregation::InSum
                           ? pen_insum / groups
                           : (qualifying > 0 ? pen_masked / static_cast<ld>(qualifying) : 0.0L);
        loss -= static_cast<ld>(cfg.gamma) * agg;
    }
    if (with_ref) {
        loss += static_cast<ld>(cfg.ref_kl_beta) * ref / groups;
    }
    return loss;
}

}  // namespace

GradcheckResult finite_diff_gradcheck(const TinyPolicy& policy, const PolicyBatch& batch,
                                      const LossConfig& cfg, const GradcheckOptions& opts) {
    GradcheckResult res;
    // Tokens near a kink of the loss are taken out of the check.
    const auto rc = recompute(policy, batch);
    PolicyBatch checked;
    std::map<std::int64_t, std::size_t> live;
    std::vector<std::uint8_t> keep_mask(batch.tokens.size());
    for (std::size_t t = 0; t < batch.tokens.size(); ++t) {
        keep_mask[t] = batch.tokens.mask[t];
        if (batch.tokens.mask[t] == 0) {
            continue;
        }
        const double r = std::exp(rc.tokens.new_logp[t] - rc.tokens.old_logp[t]);
        const bool near = std::abs(r - (1.0 - cfg.clip_eps)) <= opts.margin ||
                          std::abs(r - (1.0 + cfg.clip_eps)) <= opts.margin ||
                          std::abs(r - cfg.tau) <= opts.margin;
        if (near) {
            keep_mask[t] = 0;
            ++res.skipped_tokens;
        } else {
            ++live[batch.tokens.trajectory_id[t]];
        }
    }
    const auto& src = batch.tokens;
    auto& dst = checked.tokens;
    for (std::size_t t = 0; t < src.size(); ++t) {
        if (live.count(src.trajectory_id[t]) == 0) {
            continue;
        }
        dst.new_logp.push_back(src.new_logp[t]);
        dst.old_logp.push_back(src.old_logp[t]);
        dst.advantage.push_back(src.advantage[t]);
        dst.mask.push_back(keep_mask[t]);
        dst.segment.push_back(src.segment[t]);
        dst.trajectory_id.push_back(src.trajectory_id[t]);
        if (src.has_reference()) {
            dst.ref_logp.push_back(src.ref_logp[t]);
        }
        checked.steps.push_back(batch.steps[t]);
    }
    if (dst.size() == 0) {
        return res;
    }

    const auto lg = policy_loss_gradient(policy, checked, cfg, opts.coefficient_scale);
    TinyPolicy probe = policy;
    auto f = [&](const std::vector<double>& x) {
        probe.params() = x;
        return reference_loss(probe, checked, cfg);
    };
    // Same measure as central_difference_error, also tracking the worst index.
    std::vector<double> x = policy.params();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        x[i] = xi + opts.h;
        const long double up = f(x);
        x[i] = xi - opts.h;
        const long double down = f(x);
        x[i] = xi;
        const double numeric = static_cast<double>((up - down) / (2.0L * opts.h));
        const double a = lg.grad[i];
        const double err =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        if (err > res.max_rel_error || std::isnan(err)) {
            res.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
            res.worst_param = i;
        }
        ++res.checked_params;
    }
    return res;
}

GradcheckCase random_gradcheck_case(std::mt19937_64& gen, Variant variant) {
    auto u = [&](double lo, double hi) { return lo + (hi - lo) * uniform01(gen); };
    auto pick = [&](std::uint64_t n) { return static_cast<int>(uniform_below(gen, n)); };

    PolicyConfig pcfg;
    pcfg.hidden = 2 + pick(3);
    pcfg.temperature = u(0.5, 1.5);
    const std::size_t vocab = 3 + static_cast<std::size_t>(pick(2));
    const std::size_t dim = 3 + static_cast<std::size_t>(pick(3));
    GradcheckCase c{TinyPolicy(pcfg, vocab, dim), {}, {}};
    std::normal_distribution<double> normal(0.0, 1.0);
    // Output weights scale with the temperature so logit spreads stay comparable.
    auto& w = c.policy.params();
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = (i < c.policy.w2_offset() ? 0.6 : pcfg.temperature) * normal(gen);
    }

    LossConfig& cfg = c.config;
    cfg.variant = variant;
    cfg.clip_eps = u(0.1, 0.3);
    cfg.gamma = u(0.05, 0.5);
    cfg.tau = u(0.7, 1.2);
    cfg.penalty_aggregation = pick(2) == 0 ? PenaltyAggregation::InSum : PenaltyAggregation::MaskedMean;
    cfg.listing_inequalities = pick(2) == 0;
    cfg.use_ref_kl = pick(3) == 0;
    cfg.ref_kl_beta = u(0.01, 0.1);

    auto& tb = c.batch.tokens;
    const int trajectories = 2 + pick(3);
    for (int i = 0; i < trajectories; ++i) {
        const double adv = pick(10) == 0 ? 0.0 : (pick(2) == 0 ? -1.0 : 1.0) * u(0.3, 1.5);
        const int len = 2 + pick(4);
        for (int t = 0; t < len; ++t) {
            PolicyStep s;
            const bool retrieved = t > 0 && pick(5) == 0;
            if (!retrieved) {
                std::vector<int> all(dim);
                std::iota(all.begin(), all.end(), 0);
                const int nf = 1 + pick(3);
                for (int k = 0; k < nf; ++k) {
                    const int j = k + pick(dim - static_cast<std::uint64_t>(k));
                    std::swap(all[static_cast<std::size_t>(k)], all[static_cast<std::size_t>(j)]);
                    s.features.push_back(all[static_cast<std::size_t>(k)]);
                }
                s.token = pick(vocab);
                if (pick(2) == 0) {
                    for (int v = 0; v < static_cast<int>(vocab); ++v) {
                        if (v == s.token || pick(2) == 0) {
                            s.support.push_back(v);
                        }
                    }
                    if (s.support.size() == vocab) {
                        s.support.clear();
                    }
                }
            }
            double new_lp = 0.0;
            double old_lp = 0.0;
            if (!retrieved) {
                const auto out = c.policy.forward(s.features);
                new_lp = support_logp(out.logits, s.token, s.support);
                old_lp = new_lp - u(-0.6, 0.6);
            }
            tb.new_logp.push_back(new_lp);
            tb.old_logp.push_back(old_lp);
            tb.ref_logp.push_back(retrieved ? 0.0 : new_lp - u(-0.5, 0.5));
            tb.advantage.push_back(adv);
            tb.mask.push_back(retrieved ? 0 : 1);
            tb.segment.push_back(retrieved ? Segment::Retrieved
                                           : (pick(2) == 0 ? Segment::Reasoning : Segment::Action));
            tb.trajectory_id.push_back(i);
            c.batch.steps.push_back(std::move(s));
        }
    }
    return c;
}

void TrainConfig::validate() const {
    if (outer_steps < 1) {
        throw ConfigError("outer_steps must be >= 1");
    }
    if (group_size < 2) {
        throw ConfigError("group_size must be >= 2");
    }
    if (inner_epochs < 1) {
        throw ConfigError("inner_epochs must be >= 1");
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning_rate must be > 0");
    }
    if (questions_per_step < 1) {
        throw ConfigError("questions_per_step must be >= 1");
    }
    if (minibatches < 1 || minibatches > questions_per_step) {
        throw ConfigError("minibatches must lie in [1, questions_per_step]");
    }
    if (eval_every < 0) {
        throw ConfigError("eval_every must be >= 0");
    }
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
        throw ConfigError("eval_fraction must lie in (0, 1)");
    }
    if (warm_start_steps < 0 || !(warm_start_lr > 0.0)) {
        throw ConfigError("warm start needs steps >= 0 and a positive learning rate");
    }
    loss.validate();
    env.validate();
    policy.validate();
    drift.validate();
    if (corpus.n_entities < 4 || corpus.n_relations < 2) {
        throw ConfigError("corpus needs at least 4 entities and 2 relations");
    }
}

TrainSetup make_setup(const TrainConfig& cfg) {
    TrainSetup s;
    s.corpus = build_corpus(cfg.env.seed, cfg.corpus.n_entities, cfg.corpus.n_relations);
    std::vector<std::size_t> order(s.corpus.questions.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 gen(derive_seed(cfg.env.seed, 0x5917));
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[uniform_below(gen, i)]);
    }
    const auto n_eval = static_cast<std::size_t>(
        std::ceil(cfg.eval_fraction * static_cast<double>(order.size())));
    std::vector<std::size_t> eval_ids(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_eval));
    std::sort(eval_ids.begin(), eval_ids.end());
    std::vector<std::uint8_t> is_eval(order.size(), 0);
    for (const auto i : eval_ids) {
        is_eval[i] = 1;
    }
    for (std::size_t i = 0; i < s.corpus.questions.size(); ++i) {
        (is_eval[i] ? s.eval_questions : s.train_questions).push_back(s.corpus.questions[i]);
    }
    if (s.train_questions.empty()) {
        throw ConfigError("eval_fraction leaves no training questions");
    }
    return s;
}

TrainResult train(const TrainConfig& cfg, const std::function<void(const MetricsRow&)>& on_row) {
    cfg.validate();
    const auto setup = make_setup(cfg);
    const SearchEnv env(setup.corpus, cfg.env);
    const FeatureSpace fs(setup.corpus.vocab.size(), cfg.policy, cfg.env);

    TrainResult res;
    res.policy = TinyPolicy::initialize(cfg.policy, setup.corpus.vocab.size(), fs.dim(), cfg.seed);
    behavior_clone(res.policy, fs, env, setup.train_questions, cfg.warm_start_steps,
                   cfg.warm_start_lr, cfg.seed);
    res.initial_eval = evaluate(res.policy, fs, env, setup.eval_questions);

    DriftDetector detector(cfg.drift);
    const std::uint64_t question_stream = derive_seed(cfg.seed, 0xA11);
    const std::uint64_t rollout_stream = derive_seed(cfg.seed, 0xB22);
    const auto n_train = setup.train_questions.size();
    int step = 0;
    for (int outer = 0; outer < cfg.outer_steps; ++outer) {
        // Distinct questions for this step (with repeats only if the pool is smaller).
        std::mt19937_64 qgen(derive_seed(question_stream, static_cast<std::uint64_t>(outer)));
        std::vector<std::size_t> pool(n_train);
        std::iota(pool.begin(), pool.end(), 0);
        std::vector<RolloutGroup> groups;
        double reward_sum = 0.0;
        std::size_t reward_n = 0;
        const std::uint64_t outer_seed =
            derive_seed(rollout_stream, static_cast<std::uint64_t>(outer));
        for (int j = 0; j < cfg.questions_per_step; ++j) {
            const std::size_t k = static_cast<std::size_t>(j) % n_train;
            const std::size_t pick = k + uniform_below(qgen, n_train - k);
            std::swap(pool[k], pool[pick]);
            const auto& q = setup.train_questions[pool[k]];
            groups.push_back(rollout_group(res.policy, fs, env, q, cfg.group_size,
                                           derive_seed(outer_seed, static_cast<std::uint64_t>(j))));
            for (const double r : groups.back().rewards) {
                reward_sum += r;
                ++reward_n;
            }
        }
        const double mean_reward = reward_sum / static_cast<double>(reward_n);
        // Contiguous runs of groups form the minibatches.
        std::vector<PolicyBatch> batches;
        const auto n_groups = groups.size();
        const auto n_mb = static_cast<std::size_t>(cfg.minibatches);
        for (std::size_t m = 0; m < n_mb; ++m) {
            const auto lo = m * n_groups / n_mb;
            const auto hi = (m + 1) * n_groups / n_mb;
            batches.push_back(build_batch({groups.begin() + static_cast<std::ptrdiff_t>(lo),
                                           groups.begin() + static_cast<std::ptrdiff_t>(hi)}));
        }

        for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
            for (std::size_t mb = 0; mb < n_mb; ++mb) {
                const auto& batch = batches[mb];
                auto upd = apply_update(res.policy, batch, cfg.loss, cfg.learning_rate);
                const auto& m = upd.before;
                MetricsRow row;
                row.step = step++;
                row.outer_step = outer;
                row.inner_epoch = epoch;
                row.minibatch = static_cast<int>(mb);
                row.loss = m.report.loss;
                row.mean_is_ratio = m.report.mean_is_ratio;
                row.clip_fraction = m.report.clip_fraction;
                row.entropy = m.entropy;
                row.mean_reward = mean_reward;
                row.kl_term = m.report.kl_term;
                row.penalty_active_fraction = m.report.penalty_active_fraction;
                row.isdd_fraction = isdd_probability(m.trajectory_weights, cfg.drift).probability;
                for (const double w : m.trajectory_weights) {
                    if (auto alert = detector.push(w)) {
                        row.drift_alert = true;
                        res.alerts.push_back(*alert);
                    }
                }
                row.seed = cfg.seed;
                row.variant = cfg.loss.variant;
                res.policy = std::move(upd.policy);

                const bool last_update = epoch + 1 == cfg.inner_epochs && mb + 1 == n_mb;
                const bool eval_now = last_update && (outer + 1 == cfg.outer_steps ||
                                                      (cfg.eval_every > 0 && (outer + 1) % cfg.eval_every == 0));
                if (eval_now) {
                    const auto ev = evaluate(res.policy, fs, env, setup.eval_questions);
                    row.eval_em = ev.em;
                    row.eval_f1 = ev.f1;
                    res.final_eval = ev;
                }
                if (on_row) {
                    on_row(row);
                }
                res.rows.push_back(row);
            }
        }
    }
    return res;
}

}  // namespace sapo
