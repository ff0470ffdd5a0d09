#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sapo/drift.hpp"
#include "sapo/loss.hpp"
#include "sapo/policy.hpp"
#include "sapo/search_env.hpp"

namespace sapo {

/// Token batch plus the recorded decisions needed to recompute log-probs.
struct PolicyBatch {
    TokenBatch tokens;
    std::vector<PolicyStep> steps;  // parallel to tokens; token == -1 on retrieved positions
};

/// Flattens groups in order; trajectory ids are consecutive from 0.
PolicyBatch build_batch(const std::vector<RolloutGroup>& groups);

struct LossAndGradient {
    LossReport report;
    std::vector<double> grad;  // d loss / d params
    std::vector<std::size_t> boundary_tokens;
    double entropy = 0.0;  // masked mean, full softmax at the current parameters
    std::vector<double> trajectory_weights;  // cumulative IS weight per trajectory (id order)
};

/// Recomputes new_logp under `policy` (over each step's recorded support) and
/// returns the loss with its exact parameter gradient. `coefficient_scale`
/// multiplies the analytic coefficients (a test hook; 1 leaves them intact).
LossAndGradient policy_loss_gradient(const TinyPolicy& policy, const PolicyBatch& batch,
                                     const LossConfig& cfg, double coefficient_scale = 1.0);

/// Loss only; the scalar the finite-difference check differentiates.
double policy_loss(const TinyPolicy& policy, const PolicyBatch& batch, const LossConfig& cfg);

struct UpdateResult {
    TinyPolicy policy;
    LossAndGradient before;  // metrics at the pre-update parameters
};

/// One SGD step on the loss. Pure in (policy, batch, cfg, lr). Throws
/// NonFiniteGradient naming the offending parameter index.
UpdateResult apply_update(const TinyPolicy& policy, const PolicyBatch& batch, const LossConfig& cfg,
                          double lr);

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8) with central differences of f.
double central_difference_error(const std::function<double(const std::vector<double>&)>& f,
                                const std::vector<double>& x, const std::vector<double>& analytic,
                                double h);

struct GradcheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t checked_params = 0;
    std::size_t skipped_tokens = 0;  // within the margin of a clip edge or tau
};

struct GradcheckOptions {
    double h = 1e-6;
    double margin = 1e-3;
    double coefficient_scale = 1.0;
};

GradcheckResult finite_diff_gradcheck(const TinyPolicy& policy, const PolicyBatch& batch,
                                      const LossConfig& cfg, const GradcheckOptions& opts = {});

struct GradcheckCase {
    TinyPolicy policy;
    PolicyBatch batch;
    LossConfig config;
};

/// Small random (policy, batch, config) triple for the given variant.
GradcheckCase random_gradcheck_case(std::mt19937_64& gen, Variant variant);

struct CorpusConfig {
    int n_entities = 12;
    int n_relations = 3;
};

struct TrainConfig {
    int outer_steps = 200;
    int group_size = 10;
    int inner_epochs = 2;
    double learning_rate = 1e-2;
    int questions_per_step = 4;
    int minibatches = 1;  // gradient steps per inner epoch, each on a slice of the groups
    int eval_every = 20;
    double eval_fraction = 0.2;
    int warm_start_steps = 0;
    double warm_start_lr = 0.5;
    std::uint64_t seed = 1;
    LossConfig loss;
    EnvConfig env;
    PolicyConfig policy;
    CorpusConfig corpus;
    DriftEventConfig drift;

    void validate() const;
};

struct MetricsRow {
    int step = 0;
    int outer_step = 0;
    int inner_epoch = 0;
    int minibatch = 0;
    double loss = 0.0;
    double mean_is_ratio = 1.0;
    double clip_fraction = 0.0;
    double entropy = 0.0;
    double mean_reward = 0.0;
    double kl_term = 0.0;
    double penalty_active_fraction = 0.0;
    double isdd_fraction = 0.0;
    bool drift_alert = false;
    std::optional<double> eval_em;
    std::optional<double> eval_f1;
    std::uint64_t seed = 0;
    Variant variant = Variant::Sapo;
};

struct TrainSetup {
    FactCorpus corpus;
    std::vector<Question> train_questions;
    std::vector<Question> eval_questions;
};

/// Corpus plus the held-out split; depends only on the corpus and env seeds.
TrainSetup make_setup(const TrainConfig& cfg);

struct TrainResult {
    std::vector<MetricsRow> rows;
    TinyPolicy policy;
    std::vector<DriftAlert> alerts;
    EvalResult initial_eval;
    EvalResult final_eval;
};

TrainResult train(const TrainConfig& cfg,
                  const std::function<void(const MetricsRow&)>& on_row = {});

}  // namespace sapo
