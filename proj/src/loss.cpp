#include "sapo/loss.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "sapo/errors.hpp"

namespace sapo {

std::string_view to_string(Segment s) {
    switch (s) {
        case Segment::Reasoning: return "REASONING";
        case Segment::Action: return "ACTION";
        case Segment::Retrieved: return "RETRIEVED";
        case Segment::Answer: return "ANSWER";
    }
    return "?";
}

std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::Grpo: return "GRPO";
        case Variant::GrpoKl: return "GRPO_KL";
        case Variant::GrpoKlR: return "GRPO_KL_R";
        case Variant::Sapo: return "SAPO";
    }
    return "?";
}

std::string_view to_string(PenaltyAggregation a) {
    return a == PenaltyAggregation::InSum ? "IN_SUM" : "MASKED_MEAN";
}

Variant parse_variant(std::string_view name) {
    for (auto v : {Variant::Grpo, Variant::GrpoKl, Variant::GrpoKlR, Variant::Sapo}) {
        if (to_string(v) == name) {
            return v;
        }
    }
    throw ConfigError("unknown variant '" + std::string(name) + "'");
}

PenaltyAggregation parse_aggregation(std::string_view name) {
    if (name == "IN_SUM") {
        return PenaltyAggregation::InSum;
    }
    if (name == "MASKED_MEAN") {
        return PenaltyAggregation::MaskedMean;
    }
    throw ConfigError("unknown penalty_aggregation '" + std::string(name) + "'");
}

void TokenBatch::validate() const {
    const std::size_t n = new_logp.size();
    if (old_logp.size() != n || advantage.size() != n || mask.size() != n ||
        segment.size() != n || trajectory_id.size() != n ||
        (!ref_logp.empty() && ref_logp.size() != n)) {
        throw InvalidInput("token batch fields have mismatched lengths");
    }
    std::map<std::int64_t, double> traj_adv;
    for (std::size_t t = 0; t < n; ++t) {
        if (!std::isfinite(new_logp[t]) || !std::isfinite(old_logp[t])) {
            throw InvalidInput("non-finite log-prob at token " + std::to_string(t));
        }
        if (!ref_logp.empty() && !std::isfinite(ref_logp[t])) {
            throw InvalidInput("non-finite reference log-prob at token " + std::to_string(t));
        }
        if (!std::isfinite(advantage[t])) {
            throw InvalidInput("non-finite advantage at token " + std::to_string(t));
        }
        if (mask[t] > 1) {
            throw InvalidInput("mask value outside {0,1} at token " + std::to_string(t));
        }
        if (segment[t] == Segment::Retrieved && mask[t] != 0) {
            throw InvalidInput("retrieved token " + std::to_string(t) + " is not masked out");
        }
        auto [it, inserted] = traj_adv.emplace(trajectory_id[t], advantage[t]);
        if (!inserted && it->second != advantage[t]) {
            throw InvalidInput("advantage differs within trajectory " +
                               std::to_string(trajectory_id[t]) + " at token " +
                               std::to_string(t));
        }
    }
}

void LossConfig::validate() const {
    if (!(clip_eps > 0.0) || !std::isfinite(clip_eps)) {
        throw ConfigError("clip_eps must be > 0");
    }
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
        throw ConfigError("gamma must be >= 0");
    }
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw ConfigError("tau must be > 0");
    }
    if (!(ref_kl_beta >= 0.0) || !std::isfinite(ref_kl_beta)) {
        throw ConfigError("ref_kl_beta must be >= 0");
    }
}

std::vector<double> importance_ratios(const TokenBatch& batch) {
    if (batch.old_logp.size() != batch.new_logp.size()) {
        throw InvalidInput("old/new log-prob lengths differ");
    }
    std::vector<double> r(batch.size());
    for (std::size_t t = 0; t < r.size(); ++t) {
        const double diff = batch.new_logp[t] - batch.old_logp[t];
        if (!std::isfinite(batch.new_logp[t]) || !std::isfinite(batch.old_logp[t])) {
            throw InvalidInput("non-finite log-prob at token " + std::to_string(t));
        }
        r[t] = std::exp(diff);
    }
    return r;
}

double ppo_clip_term(double r, double advantage, double eps) {
    if (!(eps > 0.0)) {
        throw ConfigError("clip eps must be > 0");
    }
    const double clipped = std::clamp(r, 1.0 - eps, 1.0 + eps);
    return std::min(r * advantage, clipped * advantage);
}

namespace {

bool below_threshold(double r, double tau, bool listing) {
    return listing ? r <= tau : r < tau;
}

bool positive_advantage(double a, bool listing) {
    return listing ? a >= 0.0 : a > 0.0;
}

}  // namespace

double conditional_kl_penalty(double r, double advantage, double tau, bool listing) {
    return below_threshold(r, tau, listing) && positive_advantage(advantage, listing)
               ? std::log(r)
               : 0.0;
}

double unconditional_kl_penalty(double r) { return std::log(r); }

double ratio_conditioned_kl(double r, double tau, bool listing) {
    return below_threshold(r, tau, listing) ? std::log(r) : 0.0;
}

bool penalty_active(double r, double advantage, const LossConfig& cfg) {
    switch (cfg.variant) {
        case Variant::Grpo: return false;
        case Variant::GrpoKl: return true;
        case Variant::GrpoKlR: return below_threshold(r, cfg.tau, cfg.listing_inequalities);
        case Variant::Sapo:
            return below_threshold(r, cfg.tau, cfg.listing_inequalities) &&
                   positive_advantage(advantage, cfg.listing_inequalities);
    }
    return false;
}

namespace {

struct Trajectory {
    std::vector<std::size_t> masked;  // loss-bearing token indices, ascending
};

// Per-token quantities shared by the loss and its gradient.
struct Evaluation {
    std::vector<double> ratio;
    std::vector<double> pg_weight;   // 1/(G*|o_i|) on loss-bearing tokens
    std::vector<double> pen_weight;  // weight of the token's penalty in the aggregate
    std::vector<std::uint8_t> unclipped;
    std::vector<std::uint8_t> active;
    LossReport report;
};

std::map<std::int64_t, Trajectory> group_by_trajectory(const TokenBatch& batch) {
    std::map<std::int64_t, Trajectory> trajs;
    for (std::size_t t = 0; t < batch.size(); ++t) {
        auto& tr = trajs[batch.trajectory_id[t]];
        if (batch.mask[t] != 0) {
            tr.masked.push_back(t);
        }
    }
    for (const auto& [id, tr] : trajs) {
        if (tr.masked.empty()) {
            throw DegenerateTrajectory("trajectory " + std::to_string(id) +
                                       " has no loss-bearing tokens");
        }
    }
    return trajs;
}

Evaluation evaluate(const TokenBatch& batch, const LossConfig& cfg) {
    cfg.validate();
    batch.validate();

    const std::size_t n = batch.size();
    Evaluation ev;
    ev.ratio = importance_ratios(batch);
    ev.pg_weight.assign(n, 0.0);
    ev.pen_weight.assign(n, 0.0);
    ev.unclipped.assign(n, 0);
    ev.active.assign(n, 0);

    const auto trajs = group_by_trajectory(batch);
    if (trajs.empty()) {
        throw InvalidInput("token batch is empty");
    }
    const double groups = static_cast<double>(trajs.size());
    const bool penalized = cfg.variant != Variant::Grpo;
    const bool with_ref = cfg.use_ref_kl && batch.has_reference();

    // Masked-mean penalty denominator: loss-bearing tokens of qualifying trajectories.
    std::size_t qualifying_tokens = 0;
    if (penalized && cfg.penalty_aggregation == PenaltyAggregation::MaskedMean) {
        for (const auto& [id, tr] : trajs) {
            const double adv = batch.advantage[tr.masked.front()];
            if (cfg.variant != Variant::Sapo ||
                positive_advantage(adv, cfg.listing_inequalities)) {
                qualifying_tokens += tr.masked.size();
            }
        }
    }

    double pg_sum = 0.0;
    double pen_insum = 0.0;
    double pen_masked = 0.0;
    double ref_sum = 0.0;
    std::size_t total_masked = 0;
    std::size_t clipped = 0;
    std::size_t active_count = 0;
    double ratio_sum = 0.0;
    double neg_kl_sum = 0.0;

    for (const auto& [id, tr] : trajs) {
        const double inv_len = 1.0 / static_cast<double>(tr.masked.size());
        const double weight = inv_len / groups;
        double traj_pg = 0.0;
        double traj_pen = 0.0;
        double traj_ref = 0.0;
        for (const std::size_t t : tr.masked) {
            const double r = ev.ratio[t];
            const double a = batch.advantage[t];
            const double unclipped_val = r * a;
            const double clipped_val = std::clamp(r, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * a;
            traj_pg += std::min(unclipped_val, clipped_val);
            ev.unclipped[t] = unclipped_val <= clipped_val ? 1 : 0;
            if (clipped_val < unclipped_val) {
                ++clipped;
            }
            ev.pg_weight[t] = weight;

            if (penalized && penalty_active(r, a, cfg)) {
                ev.active[t] = 1;
                ++active_count;
                // Every variant's penalty is log r wherever it is active.
                const double pen = std::log(r);
                if (cfg.penalty_aggregation == PenaltyAggregation::InSum) {
                    traj_pen += pen;
                    ev.pen_weight[t] = weight;
                } else {
                    pen_masked += pen;
                    ev.pen_weight[t] = 1.0 / static_cast<double>(qualifying_tokens);
                }
            }
            if (with_ref) {
                traj_ref += batch.new_logp[t] - batch.ref_logp[t];
            }
            ratio_sum += r;
            neg_kl_sum += -(batch.new_logp[t] - batch.old_logp[t]);
            ++total_masked;
        }
        pg_sum += traj_pg * inv_len;
        pen_insum += traj_pen * inv_len;
        ref_sum += traj_ref * inv_len;
    }

    LossReport& rep = ev.report;
    rep.pg_loss = -(pg_sum / groups);
    rep.loss = rep.pg_loss;
    if (penalized) {
        const double aggregate = cfg.penalty_aggregation == PenaltyAggregation::InSum
                                     ? pen_insum / groups
                                     : (qualifying_tokens > 0
                                            ? pen_masked / static_cast<double>(qualifying_tokens)
                                            : 0.0);
        rep.kl_term = -aggregate;
        rep.loss = rep.pg_loss + cfg.gamma * rep.kl_term;
    }
    if (with_ref) {
        rep.ref_kl = ref_sum / groups;
        rep.loss += cfg.ref_kl_beta * rep.ref_kl;
    }
    const double denom = static_cast<double>(total_masked);
    rep.clip_fraction = static_cast<double>(clipped) / denom;
    rep.mean_is_ratio = ratio_sum / denom;
    rep.approx_kl = neg_kl_sum / denom;
    rep.penalty_active_fraction = static_cast<double>(active_count) / denom;
    return ev;
}

}  // namespace

LossReport grpo_objective(const TokenBatch& batch, const LossConfig& cfg) {
    LossConfig grpo = cfg;
    grpo.variant = Variant::Grpo;
    return evaluate(batch, grpo).report;
}

LossReport sapo_objective(const TokenBatch& batch, const LossConfig& cfg) {
    if (cfg.variant == Variant::Grpo) {
        return grpo_objective(batch, cfg);
    }
    return evaluate(batch, cfg).report;
}

std::vector<double> GradientCoefficients::loss() const {
    std::vector<double> out(objective.size());
    std::transform(objective.begin(), objective.end(), out.begin(),
                   [](double c) { return -c; });
    return out;
}

GradientCoefficients analytic_gradient_coefficients(const TokenBatch& batch,
                                                    const LossConfig& cfg,
                                                    double boundary_delta) {
    const Evaluation ev = evaluate(batch, cfg);
    const bool with_ref = cfg.use_ref_kl && batch.has_reference();

    GradientCoefficients out;
    out.objective.assign(batch.size(), 0.0);
    for (std::size_t t = 0; t < batch.size(); ++t) {
        if (batch.mask[t] == 0) {
            continue;
        }
        const double r = ev.ratio[t];
        const double a = batch.advantage[t];
        // The clipped branch is constant in r and contributes nothing.
        double c = ev.unclipped[t] ? ev.pg_weight[t] * (a * r) : 0.0;
        if (cfg.variant != Variant::Grpo) {
            // d(log r)/d(log pi) = 1; the indicator is a stop-gradient mask.
            c += cfg.gamma * (ev.active[t] ? ev.pen_weight[t] : 0.0);
        }
        if (with_ref) {
            c -= cfg.ref_kl_beta * ev.pg_weight[t];
        }
        out.objective[t] = c;

        const bool gated = cfg.variant == Variant::GrpoKlR ||
                           (cfg.variant == Variant::Sapo &&
                            positive_advantage(a, cfg.listing_inequalities));
        if (gated && std::abs(r - cfg.tau) < boundary_delta) {
            out.boundary_tokens.push_back(t);
        }
    }
    return out;
}

double entropy(std::span<const double> p) {
    double h = 0.0;
    for (const double v : p) {
        if (v > 0.0) {
            h -= v * std::log(v);
        }
    }
    return h;
}

double policy_entropy(std::span<const std::vector<double>> distributions,
                      std::span<const std::uint8_t> mask) {
    if (distributions.size() != mask.size()) {
        throw InvalidInput("distribution count does not match mask length");
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < distributions.size(); ++i) {
        const auto& p = distributions[i];
        double total = 0.0;
        for (const double v : p) {
            if (!(v >= 0.0) || !std::isfinite(v)) {
                throw InvalidInput("negative or non-finite probability at position " +
                                   std::to_string(i));
            }
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-9) {
            throw InvalidInput("unnormalized distribution at position " + std::to_string(i));
        }
        if (mask[i] != 0) {
            sum += entropy(p);
            ++count;
        }
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

}  // namespace sapo
