#pragma once

// Token-level policy-gradient losses: PPO-clip/GRPO and the drift-penalized
// variants (unconditional log-ratio, ratio-gated, ratio+advantage-gated).
//
// Conventions used throughout:
//   * all logs are natural logs, all reductions in double precision;
//   * the clipped surrogate is averaged over the loss-bearing tokens of each
//     trajectory first, then over trajectories (never a flat token mean);
//   * functions return a *loss* (negated objective). Gradient coefficients
//     are reported for the maximized objective: d objective = sum_t c_t d log pi_t.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace sapo {

enum class Segment : std::uint8_t { Reasoning, Action, Retrieved, Answer };

std::string_view to_string(Segment s);

struct TokenBatch {
    std::vector<double> new_logp;
    std::vector<double> old_logp;
    std::vector<double> advantage;
    std::vector<std::uint8_t> mask;
    std::vector<Segment> segment;
    std::vector<std::int64_t> trajectory_id;
    // Optional reference-policy channel; empty when absent.
    std::vector<double> ref_logp;

    std::size_t size() const noexcept { return new_logp.size(); }
    bool has_reference() const noexcept { return !ref_logp.empty(); }

    /// Checks shapes, finiteness, mask values, retrieved-token masking and
    /// per-trajectory constant advantages. Throws InvalidInput.
    void validate() const;
};

enum class Variant : std::uint8_t { Grpo, GrpoKl, GrpoKlR, Sapo };
enum class PenaltyAggregation : std::uint8_t { InSum, MaskedMean };

std::string_view to_string(Variant v);
std::string_view to_string(PenaltyAggregation a);
Variant parse_variant(std::string_view name);
PenaltyAggregation parse_aggregation(std::string_view name);

struct LossConfig {
    double clip_eps = 0.2;
    double gamma = 0.1;
    double tau = 1.0;
    Variant variant = Variant::Sapo;
    PenaltyAggregation penalty_aggregation = PenaltyAggregation::InSum;
    double ref_kl_beta = 0.001;
    // Reference KL only contributes when enabled *and* the batch carries ref_logp.
    bool use_ref_kl = false;
    // Use `r <= tau` / `A >= 0` instead of the strict `r < tau` / `A > 0`.
    bool listing_inequalities = false;

    void validate() const;
};

struct LossReport {
    double loss = 0.0;
    double pg_loss = 0.0;
    double kl_term = 0.0;  // kl_term_loss, enters the loss as gamma * kl_term
    double ref_kl = 0.0;   // enters the loss as beta * ref_kl
    double clip_fraction = 0.0;
    double mean_is_ratio = 1.0;
    double approx_kl = 0.0;
    double penalty_active_fraction = 0.0;
};

/// r_t = exp(new_logp_t - old_logp_t). Throws InvalidInput naming the token.
std::vector<double> importance_ratios(const TokenBatch& batch);

/// min(r*A, clip(r, 1-eps, 1+eps)*A). Throws ConfigError for eps <= 0.
double ppo_clip_term(double r, double advantage, double eps);

double conditional_kl_penalty(double r, double advantage, double tau,
                              bool listing_inequalities = false);
double unconditional_kl_penalty(double r);
double ratio_conditioned_kl(double r, double tau, bool listing_inequalities = false);

/// Whether the variant's drift penalty is live on a loss-bearing token.
bool penalty_active(double r, double advantage, const LossConfig& cfg);

LossReport grpo_objective(const TokenBatch& batch, const LossConfig& cfg);

/// Dispatches on cfg.variant; Variant::Grpo short-circuits to grpo_objective.
LossReport sapo_objective(const TokenBatch& batch, const LossConfig& cfg);

struct GradientCoefficients {
    // c_t with d(objective) = sum_t c_t d(log pi_t); loss gradient is -c_t.
    std::vector<double> objective;
    // Loss-bearing tokens with |r - tau| < boundary_delta (indicator kink).
    std::vector<std::size_t> boundary_tokens;

    std::vector<double> loss() const;
};

GradientCoefficients analytic_gradient_coefficients(const TokenBatch& batch,
                                                    const LossConfig& cfg,
                                                    double boundary_delta = 1e-6);

/// Masked mean of Shannon entropy. Each distribution must be non-negative and
/// sum to 1 within 1e-9.
double policy_entropy(std::span<const std::vector<double>> distributions,
                      std::span<const std::uint8_t> mask);

/// Shannon entropy of one distribution (no validation).
double entropy(std::span<const double> p);

}  // namespace sapo
