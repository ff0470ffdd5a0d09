#pragma once

// Experiment orchestration behind the command line: config schema, artifact
// formats and the multi-run drivers (ablation ladder, threshold sweep, drift
// simulation grid, gradient-check suite).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sapo/trainer.hpp"

namespace sapo {

inline constexpr int kFormatVersion = 1;

struct AblationSettings {
    double late_fraction = 0.25;  // trailing share of updates averaged into the report
    std::vector<double> tau_sweep;  // optional SAPO runs, one per threshold
};

struct IsddSweepConfig {
    std::vector<std::int64_t> l_z{0};
    std::vector<std::int64_t> l_a{20};
    std::vector<double> mu_z{0.0};
    std::vector<double> sigma_z{0.0};
    std::vector<double> mu_a{-0.002};
    std::vector<double> sigma_a{0.05};
    std::int64_t n = 100000;
    double eps_drift = 0.97;
    int workers = 1;
};

struct GradcheckSuiteConfig {
    int triples_per_variant = 100;
    double tolerance = 1e-5;
    double h = 1e-6;
    double margin = 1e-3;
    std::string corrupt_variant;  // test hook: scale this variant's coefficients
    double corrupt_scale = 1.0;
};

struct ExperimentConfig {
    std::string label = "run";
    std::string out_dir = "out";
    std::uint64_t seed = 1;  // mirrored into train.seed
    TrainConfig train;
    AblationSettings ablation;
    IsddSweepConfig simulate_isdd;
    GradcheckSuiteConfig gradcheck;
    std::string checkpoint;  // eval input; empty means <out_dir>/checkpoint.json

    void set_seed(std::uint64_t s);
    /// Throws ConfigError.
    void validate() const;
};

/// Strict parse: unknown keys, wrong types and a missing or unknown
/// format_version raise ConfigError. Missing keys take their defaults.
ExperimentConfig parse_config(const nlohmann::json& j);
/// Also maps unreadable files and malformed JSON to ConfigError.
ExperimentConfig load_config(const std::filesystem::path& path);

nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);
nlohmann::ordered_json train_config_to_json(const TrainConfig& cfg);

/// FNV-1a 64 over the compact dump, as 16 hex digits.
std::string fingerprint(const nlohmann::ordered_json& j);
std::string config_fingerprint(const ExperimentConfig& cfg);
std::string train_fingerprint(const TrainConfig& cfg);

// Metrics stream: a header object, then one object per update with fields in
// metrics_fields() order.
const std::vector<std::string>& metrics_fields();
nlohmann::ordered_json metrics_header(const TrainConfig& cfg);
nlohmann::ordered_json metrics_row_json(const MetricsRow& row);
MetricsRow metrics_row_from_json(const nlohmann::json& j);

class MetricsWriter {
public:
    /// Truncates `path` and writes the header line.
    MetricsWriter(const std::filesystem::path& path, const TrainConfig& cfg);
    void write(const MetricsRow& row);

private:
    std::filesystem::path path_;
};

struct MetricsFile {
    nlohmann::json header;
    std::vector<MetricsRow> rows;
};
MetricsFile read_metrics(const std::filesystem::path& path);

nlohmann::ordered_json checkpoint_to_json(const TrainConfig& cfg, const TinyPolicy& policy);
/// Rebuilds the policy; throws ConfigError when the checkpoint does not match `cfg`.
TinyPolicy checkpoint_from_json(const nlohmann::json& j, const TrainConfig& cfg);

struct LateWindow {
    double mean_is_ratio = 0.0;
    double clip_fraction = 0.0;
    double entropy = 0.0;
    double mean_reward = 0.0;
    double kl_term = 0.0;
};
/// Means over the trailing ceil(fraction * n) rows.
LateWindow late_window(const std::vector<MetricsRow>& rows, double fraction);

struct AblationRow {
    Variant variant = Variant::Grpo;
    double final_em = 0.0;
    double final_f1 = 0.0;
    LateWindow late;
    std::optional<double> delta_em;  // against the previous row; absent on the first
    std::optional<double> delta_f1;
};

struct AblationReport {
    std::string fingerprint;
    std::uint64_t seed = 0;
    std::vector<AblationRow> rows;
};

/// Row label in the ladder: GRPO, +KL, +KL_r, +KL_ra.
std::string_view ladder_label(Variant v);

struct AblationRun {
    AblationReport report;
    std::vector<TrainResult> runs;  // ladder order
};

/// Trains the four variants with identical seeds and environment.
AblationRun run_ablation(const ExperimentConfig& cfg,
                         const std::function<void(Variant, const MetricsRow&)>& on_row = {});

std::string ablation_csv(const AblationReport& r);
AblationReport parse_ablation_csv(std::string_view text);
nlohmann::ordered_json ablation_json(const AblationReport& r);

struct TauSweepRow {
    double tau = 1.0;
    int step = 0;
    int outer_step = 0;
    double eval_em = 0.0;
    double eval_f1 = 0.0;
};
std::string tau_sweep_csv(const std::vector<TauSweepRow>& rows, const std::string& fp,
                          std::uint64_t seed);

struct IsddSweepRow {
    std::int64_t l_z = 0;
    std::int64_t l_a = 0;
    double mu_z = 0.0;
    double sigma_z = 0.0;
    double mu_a = 0.0;
    double sigma_a = 0.0;
    double mean_weight_mc = 0.0;
    double mean_weight_closed = 0.0;
    double isdd_prob_mc = 0.0;
    double isdd_prob_closed = 0.0;
    double se_mean = 0.0;
    std::int64_t n = 0;
    std::uint64_t seed = 0;

    bool operator==(const IsddSweepRow&) const = default;
};

/// Cartesian grid, L_z outermost and sigma_a innermost.
std::vector<IsddSweepRow> run_isdd_sweep(const IsddSweepConfig& cfg, std::uint64_t seed);
std::string isdd_csv(const std::vector<IsddSweepRow>& rows, const std::string& fp,
                     std::uint64_t seed);
std::vector<IsddSweepRow> parse_isdd_csv(std::string_view text);

struct VariantGradcheck {
    Variant variant = Variant::Grpo;
    std::size_t triples = 0;
    double max_rel_error = 0.0;
    std::size_t worst_triple = 0;
    std::size_t worst_param = 0;
    std::size_t skipped_tokens = 0;
    // A copy of the first triple with every other token moved onto r = tau.
    double boundary_error = 0.0;
    std::size_t boundary_skipped = 0;
    bool passed = false;
};

struct GradcheckReport {
    double tolerance = 0.0;
    std::vector<VariantGradcheck> variants;
    bool passed() const;
};

GradcheckReport run_gradcheck_suite(const GradcheckSuiteConfig& cfg, std::uint64_t seed);
nlohmann::ordered_json gradcheck_json(const GradcheckReport& r, const std::string& fp,
                                      std::uint64_t seed);

/// Writes text to a sibling temporary file and renames it into place.
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace sapo
