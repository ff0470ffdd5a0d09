#include "sapo/drift.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <thread>

#include "sapo/errors.hpp"
#include "sapo/rng.hpp"

namespace sapo {

namespace {

constexpr std::size_t kShards = 64;

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Running mean / M2 with Chan's merge so shards combine in a fixed order.
struct Moments {
    double count = 0.0;
    double mean = 0.0;
    double m2 = 0.0;
    double below = 0.0;

    void add(double y) {
        count += 1.0;
        const double d = y - mean;
        mean += d / count;
        m2 += d * (y - mean);
    }

    void merge(const Moments& o) {
        if (o.count == 0.0) {
            return;
        }
        const double n = count + o.count;
        const double d = o.mean - mean;
        mean += d * o.count / n;
        m2 += o.m2 + d * d * count * o.count / n;
        count = n;
        below += o.below;
    }
};

Moments run_shard(const DriftParams& params, std::size_t n, std::uint64_t seed, double shift,
                  double log_eps) {
    Moments m;
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (const auto& seg : params.segments) {
            double z = 0.0;
            if (seg.sigma > 0.0) {
                for (std::size_t t = 0; t < seg.length; ++t) {
                    z += normal(gen);
                }
            }
            s += static_cast<double>(seg.length) * seg.mu + seg.sigma * z;
        }
        if (s < log_eps) {
            m.below += 1.0;
        }
        // Weights are tracked relative to exp(shift) so that deterministic
        // segments contribute exactly nothing.
        m.add(std::exp(s - shift));
    }
    return m;
}

}  // namespace

DriftSegment::DriftSegment(DriftKind k, std::size_t len, double m, double s)
    : kind(k), length(len), mu(m), sigma(s), lambda(m + 0.5 * s * s) {
    if (!std::isfinite(mu)) {
        throw ConfigError("drift segment mu must be finite");
    }
    if (!std::isfinite(sigma) || sigma < 0.0) {
        throw ConfigError("drift segment sigma must be finite and >= 0");
    }
}

DriftParams DriftParams::single(double mu, double sigma, std::size_t length) {
    return DriftParams{{DriftSegment(DriftKind::Reasoning, length, mu, sigma)}};
}

DriftParams DriftParams::interleaved(std::size_t lz, double mu_z, double sigma_z, std::size_t la,
                                     double mu_a, double sigma_a) {
    return DriftParams{{DriftSegment(DriftKind::Reasoning, lz, mu_z, sigma_z),
                        DriftSegment(DriftKind::Action, la, mu_a, sigma_a)}};
}

std::size_t DriftParams::total_length() const {
    std::size_t n = 0;
    for (const auto& s : segments) {
        n += s.length;
    }
    return n;
}

double DriftParams::log_mean() const {
    double v = 0.0;
    for (const auto& s : segments) {
        v += static_cast<double>(s.length) * s.lambda;
    }
    return v;
}

double DriftParams::log_median() const {
    double v = 0.0;
    for (const auto& s : segments) {
        v += static_cast<double>(s.length) * s.mu;
    }
    return v;
}

double DriftParams::log_variance() const {
    double v = 0.0;
    for (const auto& s : segments) {
        v += static_cast<double>(s.length) * s.sigma * s.sigma;
    }
    return v;
}

void DriftEventConfig::validate() const {
    if (!(eps_drift > 0.0 && eps_drift < 1.0)) {
        throw ConfigError("eps_drift must lie in (0, 1)");
    }
    if (!(phi > 0.0 && phi <= 1.0)) {
        throw ConfigError("phi must lie in (0, 1]");
    }
    if (window < 1) {
        throw ConfigError("drift window must be >= 1");
    }
}

double log_cumulative_is_weight(std::span<const double> ratios) {
    double s = 0.0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        if (!(ratios[i] > 0.0) || !std::isfinite(ratios[i])) {
            throw InvalidInput("importance ratio at position " + std::to_string(i) +
                               " must be positive and finite");
        }
        s += std::log(ratios[i]);
    }
    return s;
}

double cumulative_is_weight(std::span<const double> ratios) {
    return std::exp(log_cumulative_is_weight(ratios));
}

IsddEstimate isdd_probability(std::span<const double> weights, const DriftEventConfig& cfg) {
    if (weights.empty()) {
        throw InvalidInput("isdd_probability needs at least one weight");
    }
    std::size_t below = 0;
    for (const double w : weights) {
        if (std::isnan(w)) {
            throw InvalidInput("NaN cumulative weight");
        }
        below += w < cfg.eps_drift ? 1 : 0;
    }
    const double p = static_cast<double>(below) / static_cast<double>(weights.size());
    return {p, p > cfg.phi};
}

double lognormal_product_mean(double mu, double sigma, double length) {
    return std::exp(length * (mu + 0.5 * sigma * sigma));
}

double interleaved_drift_mean(const DriftParams& params) { return std::exp(params.log_mean()); }

double closed_form_isdd_probability(double mu, double sigma, double length, double eps_drift) {
    if (!(eps_drift > 0.0)) {
        throw InvalidInput("eps_drift must be positive");
    }
    if (sigma == 0.0 || length == 0.0) {
        return length * mu < std::log(eps_drift) ? 1.0 : 0.0;
    }
    return normal_cdf((std::log(eps_drift) - length * mu) / (sigma * std::sqrt(length)));
}

double closed_form_isdd_probability(const DriftParams& params, double eps_drift) {
    if (!(eps_drift > 0.0)) {
        throw InvalidInput("eps_drift must be positive");
    }
    const double var = params.log_variance();
    const double med = params.log_median();
    if (var == 0.0) {
        return med < std::log(eps_drift) ? 1.0 : 0.0;
    }
    return normal_cdf((std::log(eps_drift) - med) / std::sqrt(var));
}

SimulationResult simulate_isdd(const DriftParams& params, std::size_t n_samples,
                               std::uint64_t seed, double eps_drift, unsigned workers) {
    if (n_samples < 1) {
        throw ConfigError("simulate_isdd needs n_samples >= 1");
    }
    if (!(eps_drift > 0.0)) {
        throw ConfigError("eps_drift must be positive");
    }
    const double shift = params.log_median();
    const double log_eps = std::log(eps_drift);

    std::vector<Moments> shards(kShards);
    auto work = [&](std::size_t first, std::size_t stride) {
        for (std::size_t k = first; k < kShards; k += stride) {
            const std::size_t n = n_samples / kShards + (k < n_samples % kShards ? 1 : 0);
            shards[k] = run_shard(params, n, derive_seed(seed, k), shift, log_eps);
        }
    };
    workers = std::max(1u, std::min<unsigned>(workers, kShards));
    if (workers == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back(work, w, workers);
        }
        for (auto& t : pool) {
            t.join();
        }
    }

    Moments total;
    for (const auto& s : shards) {
        total.merge(s);
    }
    const double n = static_cast<double>(n_samples);
    const double scale = std::exp(shift);
    SimulationResult r;
    r.n = n_samples;
    r.mean_weight = scale * total.mean;
    r.se_mean = n > 1 ? scale * std::sqrt(total.m2 / (n - 1.0) / n) : 0.0;
    r.isdd_probability = total.below / n;
    r.se_probability = std::sqrt(r.isdd_probability * (1.0 - r.isdd_probability) / n);
    return r;
}

DriftDetector::DriftDetector(DriftEventConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    ring_.assign(cfg_.window, 0);
}

std::optional<DriftAlert> DriftDetector::push(double weight) {
    if (std::isnan(weight)) {
        throw InvalidInput("NaN cumulative weight");
    }
    const std::uint8_t flag = weight < cfg_.eps_drift ? 1 : 0;
    if (filled_ == cfg_.window) {
        below_ -= ring_[head_];
    } else {
        ++filled_;
    }
    ring_[head_] = flag;
    below_ += flag;
    head_ = (head_ + 1) % cfg_.window;
    const std::size_t step = step_++;
    const double f = fraction();
    if (f > cfg_.phi) {
        return DriftAlert{step, f};
    }
    return std::nullopt;
}

double DriftDetector::fraction() const {
    return filled_ == 0 ? 0.0 : static_cast<double>(below_) / static_cast<double>(filled_);
}

std::vector<DriftAlert> drift_detector(std::span<const double> weights,
                                       const DriftEventConfig& cfg) {
    DriftDetector d(cfg);
    std::vector<DriftAlert> out;
    for (const double w : weights) {
        if (auto a = d.push(w)) {
            out.push_back(*a);
        }
    }
    return out;
}

}  // namespace sapo
