#include "sapo/experiment.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "sapo/errors.hpp"
#include "sapo/rng.hpp"

namespace sapo {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// Walks one JSON object, type-checking known keys and rejecting the rest.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(where() + " must be an object");
        }
    }

    template <class T>
    void get(const char* key, T& out) {
        const json* v = find(key);
        if (v != nullptr) {
            out = convert<T>(*v, path_ + "." + key);
        }
    }

    const json* sub(const char* key) { return find(key); }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (seen_.count(it.key()) == 0) {
                throw ConfigError("unknown key '" + it.key() + "' in " + where());
            }
        }
    }

    const std::string& path() const { return path_; }

private:
    std::string where() const { return path_.empty() ? "config" : path_; }

    const json* find(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    template <class T>
    static T convert(const json& v, const std::string& name) {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) {
                throw ConfigError(name + " must be a boolean");
            }
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) {
                throw ConfigError(name + " must be a string");
            }
            return v.get<std::string>();
        } else if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) {
                throw ConfigError(name + " must be a number");
            }
            return v.get<double>();
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            if (v.is_number_unsigned()) {
                return v.get<std::uint64_t>();
            }
            if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
                throw ConfigError(name + " must be a non-negative integer");
            }
            return static_cast<std::uint64_t>(v.get<std::int64_t>());
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) {
                throw ConfigError(name + " must be an integer");
            }
            const auto x = v.get<std::int64_t>();
            if (x < static_cast<std::int64_t>(std::numeric_limits<T>::min()) ||
                x > static_cast<std::int64_t>(std::numeric_limits<T>::max())) {
                throw ConfigError(name + " is out of range");
            }
            return static_cast<T>(x);
        } else {
            // std::vector of numbers
            using E = typename T::value_type;
            if (!v.is_array()) {
                throw ConfigError(name + " must be an array");
            }
            T out;
            for (std::size_t i = 0; i < v.size(); ++i) {
                out.push_back(convert<E>(v[i], name + "[" + std::to_string(i) + "]"));
            }
            return out;
        }
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_loss(ObjectReader& r, LossConfig& c) {
    std::string variant(to_string(c.variant));
    std::string agg(to_string(c.penalty_aggregation));
    r.get("variant", variant);
    r.get("clip_eps", c.clip_eps);
    r.get("gamma", c.gamma);
    r.get("tau", c.tau);
    r.get("penalty_aggregation", agg);
    r.get("listing_inequalities", c.listing_inequalities);
    r.get("use_ref_kl", c.use_ref_kl);
    r.get("ref_kl_beta", c.ref_kl_beta);
    r.finish();
    c.variant = parse_variant(variant);
    c.penalty_aggregation = parse_aggregation(agg);
}

void read_train(ObjectReader& r, TrainConfig& c) {
    r.get("outer_steps", c.outer_steps);
    r.get("group_size", c.group_size);
    r.get("inner_epochs", c.inner_epochs);
    r.get("minibatches", c.minibatches);
    r.get("learning_rate", c.learning_rate);
    r.get("questions_per_step", c.questions_per_step);
    r.get("eval_every", c.eval_every);
    r.get("eval_fraction", c.eval_fraction);
    r.get("warm_start_steps", c.warm_start_steps);
    r.get("warm_start_lr", c.warm_start_lr);
    if (const auto* j = r.sub("loss")) {
        ObjectReader s(*j, r.path() + ".loss");
        read_loss(s, c.loss);
    }
    if (const auto* j = r.sub("env")) {
        ObjectReader s(*j, r.path() + ".env");
        s.get("t_max", c.env.t_max);
        s.get("top_k", c.env.top_k);
        s.get("max_response_tokens", c.env.max_response_tokens);
        s.get("seed", c.env.seed);
        s.finish();
    }
    if (const auto* j = r.sub("policy")) {
        ObjectReader s(*j, r.path() + ".policy");
        s.get("hidden", c.policy.hidden);
        s.get("temperature", c.policy.temperature);
        s.get("top_p", c.policy.top_p);
        s.get("question_window", c.policy.question_window);
        s.get("docs_window", c.policy.docs_window);
        s.get("init_scale", c.policy.init_scale);
        s.finish();
    }
    if (const auto* j = r.sub("corpus")) {
        ObjectReader s(*j, r.path() + ".corpus");
        s.get("n_entities", c.corpus.n_entities);
        s.get("n_relations", c.corpus.n_relations);
        s.finish();
    }
    if (const auto* j = r.sub("drift")) {
        ObjectReader s(*j, r.path() + ".drift");
        s.get("eps_drift", c.drift.eps_drift);
        s.get("phi", c.drift.phi);
        s.get("window", c.drift.window);
        s.finish();
    }
    r.finish();
}

ojson loss_json(const LossConfig& c) {
    ojson j;
    j["variant"] = std::string(to_string(c.variant));
    j["clip_eps"] = c.clip_eps;
    j["gamma"] = c.gamma;
    j["tau"] = c.tau;
    j["penalty_aggregation"] = std::string(to_string(c.penalty_aggregation));
    j["listing_inequalities"] = c.listing_inequalities;
    j["use_ref_kl"] = c.use_ref_kl;
    j["ref_kl_beta"] = c.ref_kl_beta;
    return j;
}

ojson train_json(const TrainConfig& c, bool with_seed) {
    ojson j;
    if (with_seed) {
        j["seed"] = c.seed;
    }
    j["outer_steps"] = c.outer_steps;
    j["group_size"] = c.group_size;
    j["inner_epochs"] = c.inner_epochs;
    j["minibatches"] = c.minibatches;
    j["learning_rate"] = c.learning_rate;
    j["questions_per_step"] = c.questions_per_step;
    j["eval_every"] = c.eval_every;
    j["eval_fraction"] = c.eval_fraction;
    j["warm_start_steps"] = c.warm_start_steps;
    j["warm_start_lr"] = c.warm_start_lr;
    j["loss"] = loss_json(c.loss);
    j["env"] = {{"t_max", c.env.t_max},
                {"top_k", c.env.top_k},
                {"max_response_tokens", c.env.max_response_tokens},
                {"seed", c.env.seed}};
    j["policy"] = {{"hidden", c.policy.hidden},
                   {"temperature", c.policy.temperature},
                   {"top_p", c.policy.top_p},
                   {"question_window", c.policy.question_window},
                   {"docs_window", c.policy.docs_window},
                   {"init_scale", c.policy.init_scale}};
    j["corpus"] = {{"n_entities", c.corpus.n_entities}, {"n_relations", c.corpus.n_relations}};
    j["drift"] = {{"eps_drift", c.drift.eps_drift},
                  {"phi", c.drift.phi},
                  {"window", c.drift.window}};
    return j;
}

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::vector<std::string> split(std::string_view line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == sep) {
            out.emplace_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

std::vector<std::string_view> lines_of(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        out.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return out;
}

double parse_double(const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) {
        throw InvalidInput("malformed number '" + s + "'");
    }
    return v;
}

std::int64_t parse_int(const std::string& s) {
    char* end = nullptr;
    const long long v = std::strtoll(s.c_str(), &end, 10);
    if (s.empty() || end != s.c_str() + s.size()) {
        throw InvalidInput("malformed integer '" + s + "'");
    }
    return v;
}

std::uint64_t parse_uint(const std::string& s) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (s.empty() || s[0] == '-' || end != s.c_str() + s.size()) {
        throw InvalidInput("malformed integer '" + s + "'");
    }
    return v;
}

std::string csv_comment(const std::string& kind, const std::string& fp, std::uint64_t seed) {
    return "# kind=" + kind + " format_version=" + std::to_string(kFormatVersion) +
           " fingerprint=" + fp + " seed=" + std::to_string(seed) + "\n";
}

// Reads "# key=value ..." into a map.
std::map<std::string, std::string> comment_fields(std::string_view line) {
    std::map<std::string, std::string> m;
    std::istringstream in{std::string(line.substr(1))};
    std::string tok;
    while (in >> tok) {
        const auto eq = tok.find('=');
        if (eq != std::string::npos) {
            m[tok.substr(0, eq)] = tok.substr(eq + 1);
        }
    }
    return m;
}

}  // namespace

void ExperimentConfig::set_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
}

void ExperimentConfig::validate() const {
    train.validate();
    if (label.empty()) {
        throw ConfigError("label must not be empty");
    }
    if (out_dir.empty()) {
        throw ConfigError("out_dir must not be empty");
    }
    if (!(ablation.late_fraction > 0.0 && ablation.late_fraction <= 1.0)) {
        throw ConfigError("ablation.late_fraction must lie in (0, 1]");
    }
    for (const double t : ablation.tau_sweep) {
        if (!(t > 0.0) || !std::isfinite(t)) {
            throw ConfigError("ablation.tau_sweep values must be > 0");
        }
    }
    const auto& s = simulate_isdd;
    if (s.l_z.empty() || s.l_a.empty() || s.mu_z.empty() || s.sigma_z.empty() || s.mu_a.empty() ||
        s.sigma_a.empty()) {
        throw ConfigError("simulate_isdd grids must be non-empty");
    }
    for (const auto l : s.l_z) {
        if (l < 0) {
            throw ConfigError("simulate_isdd.L_z values must be >= 0");
        }
    }
    for (const auto l : s.l_a) {
        if (l < 0) {
            throw ConfigError("simulate_isdd.L_a values must be >= 0");
        }
    }
    for (const auto& grid : {s.sigma_z, s.sigma_a}) {
        for (const double x : grid) {
            if (!(x >= 0.0) || !std::isfinite(x)) {
                throw ConfigError("simulate_isdd sigmas must be finite and >= 0");
            }
        }
    }
    for (const auto& grid : {s.mu_z, s.mu_a}) {
        for (const double x : grid) {
            if (!std::isfinite(x)) {
                throw ConfigError("simulate_isdd means must be finite");
            }
        }
    }
    if (s.n < 1) {
        throw ConfigError("simulate_isdd.n must be >= 1");
    }
    if (!(s.eps_drift > 0.0) || !std::isfinite(s.eps_drift)) {
        throw ConfigError("simulate_isdd.eps_drift must be > 0");
    }
    if (s.workers < 1) {
        throw ConfigError("simulate_isdd.workers must be >= 1");
    }
    const auto& g = gradcheck;
    if (g.triples_per_variant < 1) {
        throw ConfigError("gradcheck.triples_per_variant must be >= 1");
    }
    if (!(g.tolerance > 0.0) || !(g.h > 0.0) || !(g.margin >= 0.0)) {
        throw ConfigError("gradcheck tolerance and step must be > 0, margin >= 0");
    }
    if (!g.corrupt_variant.empty()) {
        parse_variant(g.corrupt_variant);
    }
    if (!std::isfinite(g.corrupt_scale)) {
        throw ConfigError("gradcheck.corrupt_scale must be finite");
    }
}

ExperimentConfig parse_config(const json& j) {
    ExperimentConfig c;
    ObjectReader r(j, "");
    const json* fv = r.sub("format_version");
    if (fv == nullptr) {
        throw ConfigError("config is missing format_version");
    }
    if (!fv->is_number_integer() || fv->get<std::int64_t>() != kFormatVersion) {
        throw ConfigError("unsupported format_version " + fv->dump());
    }
    r.get("label", c.label);
    r.get("out_dir", c.out_dir);
    std::uint64_t seed = c.seed;
    r.get("seed", seed);
    r.get("checkpoint", c.checkpoint);
    if (const auto* t = r.sub("train")) {
        ObjectReader s(*t, "train");
        read_train(s, c.train);
    }
    if (const auto* a = r.sub("ablation")) {
        ObjectReader s(*a, "ablation");
        s.get("late_fraction", c.ablation.late_fraction);
        s.get("tau_sweep", c.ablation.tau_sweep);
        s.finish();
    }
    if (const auto* m = r.sub("simulate_isdd")) {
        ObjectReader s(*m, "simulate_isdd");
        auto& d = c.simulate_isdd;
        s.get("L_z", d.l_z);
        s.get("L_a", d.l_a);
        s.get("mu_z", d.mu_z);
        s.get("sigma_z", d.sigma_z);
        s.get("mu_a", d.mu_a);
        s.get("sigma_a", d.sigma_a);
        s.get("n", d.n);
        s.get("eps_drift", d.eps_drift);
        s.get("workers", d.workers);
        s.finish();
    }
    if (const auto* g = r.sub("gradcheck")) {
        ObjectReader s(*g, "gradcheck");
        auto& d = c.gradcheck;
        s.get("triples_per_variant", d.triples_per_variant);
        s.get("tolerance", d.tolerance);
        s.get("h", d.h);
        s.get("margin", d.margin);
        s.get("corrupt_variant", d.corrupt_variant);
        s.get("corrupt_scale", d.corrupt_scale);
        s.finish();
    }
    r.finish();
    c.set_seed(seed);
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file '" + path.string() + "'");
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("malformed JSON in '" + path.string() + "': " + e.what());
    }
    return parse_config(j);
}

ojson config_to_json(const ExperimentConfig& c) {
    ojson j;
    j["format_version"] = kFormatVersion;
    j["label"] = c.label;
    j["out_dir"] = c.out_dir;
    j["seed"] = c.seed;
    j["checkpoint"] = c.checkpoint;
    j["train"] = train_json(c.train, false);
    j["ablation"] = {{"late_fraction", c.ablation.late_fraction},
                     {"tau_sweep", c.ablation.tau_sweep}};
    const auto& s = c.simulate_isdd;
    j["simulate_isdd"] = {{"L_z", s.l_z},     {"L_a", s.l_a},       {"mu_z", s.mu_z},
                          {"sigma_z", s.sigma_z}, {"mu_a", s.mu_a}, {"sigma_a", s.sigma_a},
                          {"n", s.n},         {"eps_drift", s.eps_drift}, {"workers", s.workers}};
    const auto& g = c.gradcheck;
    j["gradcheck"] = {{"triples_per_variant", g.triples_per_variant},
                      {"tolerance", g.tolerance},
                      {"h", g.h},
                      {"margin", g.margin},
                      {"corrupt_variant", g.corrupt_variant},
                      {"corrupt_scale", g.corrupt_scale}};
    return j;
}

ojson train_config_to_json(const TrainConfig& cfg) { return train_json(cfg, true); }

std::string fingerprint(const ojson& j) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

std::string config_fingerprint(const ExperimentConfig& cfg) {
    // Output locations do not change what a run computes.
    auto j = config_to_json(cfg);
    j.erase("out_dir");
    return fingerprint(j);
}

std::string train_fingerprint(const TrainConfig& cfg) {
    return fingerprint(train_config_to_json(cfg));
}

const std::vector<std::string>& metrics_fields() {
    static const std::vector<std::string> f = {
        "step",    "outer_step",  "inner_epoch", "minibatch",
        "loss",    "mean_is_ratio", "clip_fraction", "entropy",
        "mean_reward", "kl_term", "penalty_active_fraction", "isdd_fraction",
        "drift_alert", "eval_em", "eval_f1", "seed",
        "variant"};
    return f;
}

ojson metrics_header(const TrainConfig& cfg) {
    ojson j;
    j["format_version"] = kFormatVersion;
    j["kind"] = "metrics";
    j["fingerprint"] = train_fingerprint(cfg);
    j["seed"] = cfg.seed;
    j["variant"] = std::string(to_string(cfg.loss.variant));
    j["fields"] = metrics_fields();
    j["config"] = train_config_to_json(cfg);
    return j;
}

ojson metrics_row_json(const MetricsRow& r) {
    ojson j;
    j["step"] = r.step;
    j["outer_step"] = r.outer_step;
    j["inner_epoch"] = r.inner_epoch;
    j["minibatch"] = r.minibatch;
    j["loss"] = r.loss;
    j["mean_is_ratio"] = r.mean_is_ratio;
    j["clip_fraction"] = r.clip_fraction;
    j["entropy"] = r.entropy;
    j["mean_reward"] = r.mean_reward;
    j["kl_term"] = r.kl_term;
    j["penalty_active_fraction"] = r.penalty_active_fraction;
    j["isdd_fraction"] = r.isdd_fraction;
    j["drift_alert"] = r.drift_alert;
    j["eval_em"] = r.eval_em ? ojson(*r.eval_em) : ojson(nullptr);
    j["eval_f1"] = r.eval_f1 ? ojson(*r.eval_f1) : ojson(nullptr);
    j["seed"] = r.seed;
    j["variant"] = std::string(to_string(r.variant));
    return j;
}

MetricsRow metrics_row_from_json(const json& j) {
    try {
        MetricsRow r;
        r.step = j.at("step").get<int>();
        r.outer_step = j.at("outer_step").get<int>();
        r.inner_epoch = j.at("inner_epoch").get<int>();
        r.minibatch = j.at("minibatch").get<int>();
        r.loss = j.at("loss").get<double>();
        r.mean_is_ratio = j.at("mean_is_ratio").get<double>();
        r.clip_fraction = j.at("clip_fraction").get<double>();
        r.entropy = j.at("entropy").get<double>();
        r.mean_reward = j.at("mean_reward").get<double>();
        r.kl_term = j.at("kl_term").get<double>();
        r.penalty_active_fraction = j.at("penalty_active_fraction").get<double>();
        r.isdd_fraction = j.at("isdd_fraction").get<double>();
        r.drift_alert = j.at("drift_alert").get<bool>();
        if (!j.at("eval_em").is_null()) {
            r.eval_em = j.at("eval_em").get<double>();
        }
        if (!j.at("eval_f1").is_null()) {
            r.eval_f1 = j.at("eval_f1").get<double>();
        }
        r.seed = j.at("seed").get<std::uint64_t>();
        r.variant = parse_variant(j.at("variant").get<std::string>());
        return r;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed metrics row: ") + e.what());
    }
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, const TrainConfig& cfg)
    : path_(path) {
    std::ofstream out(path_, std::ios::trunc);
    if (!out) {
        throw Error("cannot write '" + path_.string() + "'");
    }
    out << metrics_header(cfg).dump() << '\n';
}

void MetricsWriter::write(const MetricsRow& row) {
    std::ofstream out(path_, std::ios::app);
    out << metrics_row_json(row).dump() << '\n';
    if (!out) {
        throw Error("cannot append to '" + path_.string() + "'");
    }
}

MetricsFile read_metrics(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InvalidInput("cannot read '" + path.string() + "'");
    }
    MetricsFile f;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw InvalidInput("malformed metrics line: " + std::string(e.what()));
        }
        if (first) {
            if (j.value("kind", "") != "metrics" || j.value("format_version", 0) != kFormatVersion) {
                throw InvalidInput("'" + path.string() + "' is not a version-1 metrics file");
            }
            f.header = std::move(j);
            first = false;
        } else {
            f.rows.push_back(metrics_row_from_json(j));
        }
    }
    if (first) {
        throw InvalidInput("'" + path.string() + "' is empty");
    }
    return f;
}

ojson checkpoint_to_json(const TrainConfig& cfg, const TinyPolicy& policy) {
    ojson j;
    j["format_version"] = kFormatVersion;
    j["kind"] = "checkpoint";
    j["fingerprint"] = train_fingerprint(cfg);
    j["seed"] = cfg.seed;
    j["vocab_size"] = policy.vocab_size();
    j["feature_dim"] = policy.feature_dim();
    j["hidden"] = policy.hidden();
    j["params"] = policy.params();
    return j;
}

TinyPolicy checkpoint_from_json(const json& j, const TrainConfig& cfg) {
    try {
        if (j.at("kind").get<std::string>() != "checkpoint" ||
            j.at("format_version").get<int>() != kFormatVersion) {
            throw ConfigError("not a version-1 checkpoint");
        }
        const auto setup = make_setup(cfg);
        const FeatureSpace fs(setup.corpus.vocab.size(), cfg.policy, cfg.env);
        if (j.at("vocab_size").get<std::size_t>() != setup.corpus.vocab.size() ||
            j.at("feature_dim").get<std::size_t>() != fs.dim() ||
            j.at("hidden").get<std::size_t>() != static_cast<std::size_t>(cfg.policy.hidden)) {
            throw ConfigError("checkpoint shape does not match the configuration");
        }
        TinyPolicy p(cfg.policy, setup.corpus.vocab.size(), fs.dim());
        auto params = j.at("params").get<std::vector<double>>();
        if (params.size() != p.params().size()) {
            throw ConfigError("checkpoint parameter count does not match the configuration");
        }
        p.params() = std::move(params);
        return p;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed checkpoint: ") + e.what());
    }
}

LateWindow late_window(const std::vector<MetricsRow>& rows, double fraction) {
    LateWindow w;
    if (rows.empty()) {
        return w;
    }
    const auto n = rows.size();
    const auto k = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n))), 1, n);
    for (std::size_t i = n - k; i < n; ++i) {
        w.mean_is_ratio += rows[i].mean_is_ratio;
        w.clip_fraction += rows[i].clip_fraction;
        w.entropy += rows[i].entropy;
        w.mean_reward += rows[i].mean_reward;
        w.kl_term += rows[i].kl_term;
    }
    const auto d = static_cast<double>(k);
    w.mean_is_ratio /= d;
    w.clip_fraction /= d;
    w.entropy /= d;
    w.mean_reward /= d;
    w.kl_term /= d;
    return w;
}

std::string_view ladder_label(Variant v) {
    switch (v) {
        case Variant::Grpo:
            return "GRPO";
        case Variant::GrpoKl:
            return "+KL";
        case Variant::GrpoKlR:
            return "+KL_r";
        case Variant::Sapo:
            return "+KL_ra";
    }
    return "?";
}

AblationRun run_ablation(const ExperimentConfig& cfg,
                         const std::function<void(Variant, const MetricsRow&)>& on_row) {
    cfg.validate();
    AblationRun out;
    out.report.fingerprint = config_fingerprint(cfg);
    out.report.seed = cfg.seed;
    for (const auto v : {Variant::Grpo, Variant::GrpoKl, Variant::GrpoKlR, Variant::Sapo}) {
        TrainConfig tc = cfg.train;
        tc.loss.variant = v;
        auto res = train(tc, [&](const MetricsRow& row) {
            if (on_row) {
                on_row(v, row);
            }
        });
        AblationRow row;
        row.variant = v;
        row.final_em = res.final_eval.em;
        row.final_f1 = res.final_eval.f1;
        row.late = late_window(res.rows, cfg.ablation.late_fraction);
        if (!out.report.rows.empty()) {
            row.delta_em = row.final_em - out.report.rows.back().final_em;
            row.delta_f1 = row.final_f1 - out.report.rows.back().final_f1;
        }
        out.report.rows.push_back(row);
        out.runs.push_back(std::move(res));
    }
    return out;
}

namespace {

const char* kAblationColumns =
    "variant,label,final_em,final_f1,late_mean_is_ratio,late_clip_fraction,late_entropy,"
    "late_mean_reward,late_kl_term,delta_em,delta_f1";

}  // namespace

std::string ablation_csv(const AblationReport& r) {
    std::string s = csv_comment("ablation", r.fingerprint, r.seed);
    s += kAblationColumns;
    s += '\n';
    for (const auto& row : r.rows) {
        s += std::string(to_string(row.variant)) + "," + std::string(ladder_label(row.variant)) + "," +
             fmt(row.final_em) + "," + fmt(row.final_f1) + "," + fmt(row.late.mean_is_ratio) + "," +
             fmt(row.late.clip_fraction) + "," + fmt(row.late.entropy) + "," +
             fmt(row.late.mean_reward) + "," + fmt(row.late.kl_term) + "," +
             (row.delta_em ? fmt(*row.delta_em) : "") + "," +
             (row.delta_f1 ? fmt(*row.delta_f1) : "") + "\n";
    }
    return s;
}

AblationReport parse_ablation_csv(std::string_view text) {
    AblationReport r;
    bool header = false;
    for (const auto line : lines_of(text)) {
        if (line.empty()) {
            continue;
        }
        if (line[0] == '#') {
            auto m = comment_fields(line);
            r.fingerprint = m["fingerprint"];
            if (m.count("seed") != 0) {
                r.seed = parse_uint(m["seed"]);
            }
            continue;
        }
        if (!header) {
            if (line != kAblationColumns) {
                throw InvalidInput("unexpected ablation CSV header");
            }
            header = true;
            continue;
        }
        const auto f = split(line, ',');
        if (f.size() != 11) {
            throw InvalidInput("ablation CSV row has " + std::to_string(f.size()) + " fields");
        }
        AblationRow row;
        row.variant = parse_variant(f[0]);
        row.final_em = parse_double(f[2]);
        row.final_f1 = parse_double(f[3]);
        row.late.mean_is_ratio = parse_double(f[4]);
        row.late.clip_fraction = parse_double(f[5]);
        row.late.entropy = parse_double(f[6]);
        row.late.mean_reward = parse_double(f[7]);
        row.late.kl_term = parse_double(f[8]);
        if (!f[9].empty()) {
            row.delta_em = parse_double(f[9]);
        }
        if (!f[10].empty()) {
            row.delta_f1 = parse_double(f[10]);
        }
        r.rows.push_back(row);
    }
    if (!header) {
        throw InvalidInput("ablation CSV has no header");
    }
    return r;
}

ojson ablation_json(const AblationReport& r) {
    ojson j;
    j["format_version"] = kFormatVersion;
    j["kind"] = "ablation";
    j["fingerprint"] = r.fingerprint;
    j["seed"] = r.seed;
    ojson rows = ojson::array();
    for (const auto& row : r.rows) {
        ojson x;
        x["variant"] = std::string(to_string(row.variant));
        x["label"] = std::string(ladder_label(row.variant));
        x["final_em"] = row.final_em;
        x["final_f1"] = row.final_f1;
        x["late_mean_is_ratio"] = row.late.mean_is_ratio;
        x["late_clip_fraction"] = row.late.clip_fraction;
        x["late_entropy"] = row.late.entropy;
        x["late_mean_reward"] = row.late.mean_reward;
        x["late_kl_term"] = row.late.kl_term;
        x["delta_em"] = row.delta_em ? ojson(*row.delta_em) : ojson(nullptr);
        x["delta_f1"] = row.delta_f1 ? ojson(*row.delta_f1) : ojson(nullptr);
        rows.push_back(std::move(x));
    }
    j["rows"] = std::move(rows);
    return j;
}

std::string tau_sweep_csv(const std::vector<TauSweepRow>& rows, const std::string& fp,
                          std::uint64_t seed) {
    std::string s = csv_comment("tau_sweep", fp, seed);
    s += "tau,step,outer_step,eval_em,eval_f1\n";
    for (const auto& r : rows) {
        s += fmt(r.tau) + "," + std::to_string(r.step) + "," + std::to_string(r.outer_step) + "," +
             fmt(r.eval_em) + "," + fmt(r.eval_f1) + "\n";
    }
    return s;
}

std::vector<IsddSweepRow> run_isdd_sweep(const IsddSweepConfig& cfg, std::uint64_t seed) {
    std::vector<IsddSweepRow> rows;
    for (const auto lz : cfg.l_z) {
        for (const auto la : cfg.l_a) {
            for (const double mz : cfg.mu_z) {
                for (const double sz : cfg.sigma_z) {
                    for (const double ma : cfg.mu_a) {
                        for (const double sa : cfg.sigma_a) {
                            const auto p = DriftParams::interleaved(
                                static_cast<std::size_t>(lz), mz, sz, static_cast<std::size_t>(la),
                                ma, sa);
                            const auto sim = simulate_isdd(p, static_cast<std::size_t>(cfg.n), seed,
                                                           cfg.eps_drift,
                                                           static_cast<unsigned>(cfg.workers));
                            IsddSweepRow r;
                            r.l_z = lz;
                            r.l_a = la;
                            r.mu_z = mz;
                            r.sigma_z = sz;
                            r.mu_a = ma;
                            r.sigma_a = sa;
                            r.mean_weight_mc = sim.mean_weight;
                            r.mean_weight_closed = interleaved_drift_mean(p);
                            r.isdd_prob_mc = sim.isdd_probability;
                            r.isdd_prob_closed = closed_form_isdd_probability(p, cfg.eps_drift);
                            r.se_mean = sim.se_mean;
                            r.n = cfg.n;
                            r.seed = seed;
                            rows.push_back(r);
                        }
                    }
                }
            }
        }
    }
    return rows;
}

namespace {

const char* kIsddColumns =
    "L_z,L_a,mu_z,sigma_z,mu_a,sigma_a,mean_weight_mc,mean_weight_closed,isdd_prob_mc,"
    "isdd_prob_closed,se_mean,n,seed";

}  // namespace

std::string isdd_csv(const std::vector<IsddSweepRow>& rows, const std::string& fp,
                     std::uint64_t seed) {
    std::string s = csv_comment("isdd_sweep", fp, seed);
    s += kIsddColumns;
    s += '\n';
    for (const auto& r : rows) {
        s += std::to_string(r.l_z) + "," + std::to_string(r.l_a) + "," + fmt(r.mu_z) + "," +
             fmt(r.sigma_z) + "," + fmt(r.mu_a) + "," + fmt(r.sigma_a) + "," +
             fmt(r.mean_weight_mc) + "," + fmt(r.mean_weight_closed) + "," + fmt(r.isdd_prob_mc) +
             "," + fmt(r.isdd_prob_closed) + "," + fmt(r.se_mean) + "," + std::to_string(r.n) +
             "," + std::to_string(r.seed) + "\n";
    }
    return s;
}

std::vector<IsddSweepRow> parse_isdd_csv(std::string_view text) {
    std::vector<IsddSweepRow> rows;
    bool header = false;
    for (const auto line : lines_of(text)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        if (!header) {
            if (line != kIsddColumns) {
                throw InvalidInput("unexpected drift sweep CSV header");
            }
            header = true;
            continue;
        }
        const auto f = split(line, ',');
        if (f.size() != 13) {
            throw InvalidInput("drift sweep CSV row has " + std::to_string(f.size()) + " fields");
        }
        IsddSweepRow r;
        r.l_z = parse_int(f[0]);
        r.l_a = parse_int(f[1]);
        r.mu_z = parse_double(f[2]);
        r.sigma_z = parse_double(f[3]);
        r.mu_a = parse_double(f[4]);
        r.sigma_a = parse_double(f[5]);
        r.mean_weight_mc = parse_double(f[6]);
        r.mean_weight_closed = parse_double(f[7]);
        r.isdd_prob_mc = parse_double(f[8]);
        r.isdd_prob_closed = parse_double(f[9]);
        r.se_mean = parse_double(f[10]);
        r.n = parse_int(f[11]);
        r.seed = parse_uint(f[12]);
        rows.push_back(r);
    }
    if (!header) {
        throw InvalidInput("drift sweep CSV has no header");
    }
    return rows;
}

bool GradcheckReport::passed() const {
    return std::all_of(variants.begin(), variants.end(), [](const auto& v) { return v.passed; });
}

GradcheckReport run_gradcheck_suite(const GradcheckSuiteConfig& cfg, std::uint64_t seed) {
    GradcheckReport rep;
    rep.tolerance = cfg.tolerance;
    const std::uint64_t stream = derive_seed(seed, 0x6C);
    for (const auto v : {Variant::Grpo, Variant::GrpoKl, Variant::GrpoKlR, Variant::Sapo}) {
        std::mt19937_64 gen(derive_seed(stream, static_cast<std::uint64_t>(v)));
        GradcheckOptions opts;
        opts.h = cfg.h;
        opts.margin = cfg.margin;
        opts.coefficient_scale = cfg.corrupt_variant == to_string(v) ? cfg.corrupt_scale : 1.0;
        VariantGradcheck out;
        out.variant = v;
        for (int i = 0; i < cfg.triples_per_variant; ++i) {
            auto c = random_gradcheck_case(gen, v);
            const auto r = finite_diff_gradcheck(c.policy, c.batch, c.config, opts);
            ++out.triples;
            out.skipped_tokens += r.skipped_tokens;
            if (r.max_rel_error > out.max_rel_error || i == 0) {
                out.max_rel_error = r.max_rel_error;
                out.worst_triple = static_cast<std::size_t>(i);
                out.worst_param = r.worst_param;
            }
            if (i == 0) {
                // Put every other live token exactly on the threshold.
                auto& tb = c.batch.tokens;
                bool flip = false;
                for (std::size_t t = 0; t < tb.size(); ++t) {
                    if (tb.mask[t] == 0) {
                        continue;
                    }
                    if (flip) {
                        tb.old_logp[t] = tb.new_logp[t] - std::log(c.config.tau);
                    }
                    flip = !flip;
                }
                const auto b = finite_diff_gradcheck(c.policy, c.batch, c.config, opts);
                out.boundary_error = b.max_rel_error;
                out.boundary_skipped = b.skipped_tokens;
            }
        }
        out.passed = out.max_rel_error <= cfg.tolerance && out.boundary_error <= cfg.tolerance;
        rep.variants.push_back(out);
    }
    return rep;
}

ojson gradcheck_json(const GradcheckReport& r, const std::string& fp, std::uint64_t seed) {
    ojson j;
    j["format_version"] = kFormatVersion;
    j["kind"] = "gradcheck";
    j["fingerprint"] = fp;
    j["seed"] = seed;
    j["tolerance"] = r.tolerance;
    j["passed"] = r.passed();
    ojson vs = ojson::array();
    for (const auto& v : r.variants) {
        ojson x;
        x["variant"] = std::string(to_string(v.variant));
        x["triples"] = v.triples;
        x["max_rel_error"] = v.max_rel_error;
        x["worst_triple"] = v.worst_triple;
        x["worst_param"] = v.worst_param;
        x["skipped_tokens"] = v.skipped_tokens;
        x["boundary_error"] = v.boundary_error;
        x["boundary_skipped"] = v.boundary_skipped;
        x["passed"] = v.passed;
        vs.push_back(std::move(x));
    }
    j["variants"] = std::move(vs);
    return j;
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error("cannot write '" + tmp.string() + "'");
        }
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) {
            throw Error("short write to '" + tmp.string() + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace sapo
