#pragma once

// Vanishing cumulative importance weights: measurement on real trajectories
// and a log-normal Monte Carlo model of how they decay with length.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace sapo {

enum class DriftKind : std::uint8_t { Reasoning, Action };

struct DriftSegment {
    DriftKind kind = DriftKind::Reasoning;
    std::size_t length = 0;
    double mu = 0.0;
    double sigma = 0.0;
    double lambda = 0.0;  // mu + sigma^2 / 2

    /// Throws ConfigError on negative or non-finite sigma, non-finite mu.
    DriftSegment(DriftKind kind, std::size_t length, double mu, double sigma);
};

struct DriftParams {
    std::vector<DriftSegment> segments;

    static DriftParams single(double mu, double sigma, std::size_t length);
    /// Reasoning block of length lz followed by an action block of length la.
    static DriftParams interleaved(std::size_t lz, double mu_z, double sigma_z, std::size_t la,
                                   double mu_a, double sigma_a);

    std::size_t total_length() const;
    double log_mean() const;      // sum length * lambda
    double log_median() const;    // sum length * mu
    double log_variance() const;  // sum length * sigma^2
};

struct DriftEventConfig {
    double eps_drift = 0.01;
    double phi = 0.25;
    std::size_t window = 256;

    /// 0 < eps_drift < 1, 0 < phi <= 1, window >= 1. Throws ConfigError.
    void validate() const;
};

/// prod r_t, computed as exp(sum log r_t). Throws InvalidInput on r <= 0 or NaN.
double cumulative_is_weight(std::span<const double> ratios);

/// Same in log space; useful when the weight itself would underflow.
double log_cumulative_is_weight(std::span<const double> ratios);

struct IsddEstimate {
    double probability = 0.0;
    bool flag = false;
};

/// Fraction of weights below eps_drift; flag when it exceeds phi.
IsddEstimate isdd_probability(std::span<const double> weights, const DriftEventConfig& cfg);

double lognormal_product_mean(double mu, double sigma, double length);
double interleaved_drift_mean(const DriftParams& params);

/// P(prod r < eps_drift) when sum log r ~ Normal(L mu, L sigma^2).
/// sigma == 0 degenerates to the step 1(L mu < ln eps_drift).
double closed_form_isdd_probability(double mu, double sigma, double length, double eps_drift);
double closed_form_isdd_probability(const DriftParams& params, double eps_drift);

struct SimulationResult {
    double mean_weight = 0.0;
    double isdd_probability = 0.0;
    double se_mean = 0.0;
    double se_probability = 0.0;
    std::size_t n = 0;
};

/// Monte Carlo over n_samples trajectories of independent log-normal per-token
/// ratios. Samples are split into a fixed number of shards, each seeded from
/// (seed, shard); the result does not depend on `workers`.
SimulationResult simulate_isdd(const DriftParams& params, std::size_t n_samples,
                               std::uint64_t seed, double eps_drift, unsigned workers = 1);

struct DriftAlert {
    std::size_t step = 0;
    double fraction = 0.0;
};

/// Online monitor over the most recent `window` trajectory weights.
class DriftDetector {
public:
    explicit DriftDetector(DriftEventConfig cfg);

    /// Feeds one weight; returns an alert when the windowed fraction below
    /// eps_drift exceeds phi.
    std::optional<DriftAlert> push(double weight);

    double fraction() const;
    std::size_t steps() const noexcept { return step_; }

private:
    DriftEventConfig cfg_;
    std::vector<std::uint8_t> ring_;
    std::size_t head_ = 0;
    std::size_t filled_ = 0;
    std::size_t below_ = 0;
    std::size_t step_ = 0;
};

std::vector<DriftAlert> drift_detector(std::span<const double> weights,
                                       const DriftEventConfig& cfg);

}  // namespace sapo
