#include "sapo/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>

#include "sapo/errors.hpp"
#include "sapo/experiment.hpp"

namespace sapo {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct GlobalFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool quiet = false;
};

std::uint64_t parse_seed_env(const char* s) {
    const std::string v(s);
    char* end = nullptr;
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || v[0] == '-' || end != v.c_str() + v.size()) {
        throw ConfigError("SAPO_SEED must be a non-negative integer, got '" + v + "'");
    }
    return x;
}

// Config file (or defaults), then SAPO_SEED, then --seed, then --out.
ExperimentConfig resolve(const GlobalFlags& f) {
    ExperimentConfig cfg;
    if (!f.config.empty()) {
        cfg = load_config(f.config);
    }
    if (const char* env = std::getenv("SAPO_SEED"); env != nullptr) {
        cfg.set_seed(parse_seed_env(env));
    }
    if (f.seed) {
        cfg.set_seed(*f.seed);
    }
    if (!f.out.empty()) {
        cfg.out_dir = f.out;
    }
    cfg.validate();
    return cfg;
}

fs::path prepare_out(const ExperimentConfig& cfg) {
    const fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    return dir;
}

std::string tau_tag(double tau) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", tau);
    return buf;
}

std::string num(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", x);
    return buf;
}

int cmd_train(const ExperimentConfig& cfg, bool quiet, std::ostream& out) {
    const auto dir = prepare_out(cfg);
    MetricsWriter writer(dir / "metrics.jsonl", cfg.train);
    const auto res = train(cfg.train, [&](const MetricsRow& r) { writer.write(r); });
    write_text_file(dir / "checkpoint.json", checkpoint_to_json(cfg.train, res.policy).dump() + "\n");
    if (!quiet) {
        out << "train " << to_string(cfg.train.loss.variant) << " seed " << cfg.seed << ": "
            << res.rows.size() << " updates, EM " << num(res.initial_eval.em) << " -> "
            << num(res.final_eval.em) << ", F1 " << num(res.initial_eval.f1) << " -> "
            << num(res.final_eval.f1) << ", " << res.alerts.size() << " drift alerts\n";
    }
    return kExitOk;
}

int cmd_ablate(const ExperimentConfig& cfg, bool quiet, std::ostream& out) {
    const auto dir = prepare_out(cfg);
    std::unique_ptr<MetricsWriter> writer;
    std::optional<Variant> current;
    const auto run = run_ablation(cfg, [&](Variant v, const MetricsRow& r) {
        if (!current || *current != v) {
            TrainConfig tc = cfg.train;
            tc.loss.variant = v;
            writer = std::make_unique<MetricsWriter>(
                dir / ("metrics_" + std::string(to_string(v)) + ".jsonl"), tc);
            current = v;
        }
        writer->write(r);
    });
    const auto fp = config_fingerprint(cfg);
    write_text_file(dir / "ablation.json", ablation_json(run.report).dump(2) + "\n");
    write_text_file(dir / "ablation.csv", ablation_csv(run.report));

    if (!cfg.ablation.tau_sweep.empty()) {
        std::vector<TauSweepRow> rows;
        for (const double tau : cfg.ablation.tau_sweep) {
            TrainConfig tc = cfg.train;
            tc.loss.variant = Variant::Sapo;
            tc.loss.tau = tau;
            MetricsWriter w(dir / ("metrics_tau_" + tau_tag(tau) + ".jsonl"), tc);
            train(tc, [&](const MetricsRow& r) {
                w.write(r);
                if (r.eval_em) {
                    rows.push_back({tau, r.step, r.outer_step, *r.eval_em, r.eval_f1.value_or(0.0)});
                }
            });
        }
        write_text_file(dir / "tau_sweep.csv", tau_sweep_csv(rows, fp, cfg.seed));
    }

    if (!quiet) {
        out << "variant   final_em  final_f1  late_is_ratio  late_entropy  delta_em\n";
        for (const auto& r : run.report.rows) {
            char line[160];
            std::snprintf(line, sizeof line, "%-8s  %8.4f  %8.4f  %13.6f  %12.4f  %s\n",
                          std::string(ladder_label(r.variant)).c_str(), r.final_em, r.final_f1,
                          r.late.mean_is_ratio, r.late.entropy,
                          r.delta_em ? num(*r.delta_em).c_str() : "-");
            out << line;
        }
    }
    return kExitOk;
}

int cmd_simulate(const ExperimentConfig& cfg, bool quiet, std::ostream& out) {
    const auto rows = run_isdd_sweep(cfg.simulate_isdd, cfg.seed);
    const auto dir = prepare_out(cfg);
    write_text_file(dir / "isdd_sweep.csv", isdd_csv(rows, config_fingerprint(cfg), cfg.seed));
    if (!quiet) {
        for (const auto& r : rows) {
            out << "L_z=" << r.l_z << " L_a=" << r.l_a << " mean " << r.mean_weight_mc
                << " (closed " << r.mean_weight_closed << ") isdd " << r.isdd_prob_mc << " (closed "
                << r.isdd_prob_closed << ")\n";
        }
    }
    return kExitOk;
}

int cmd_gradcheck(const ExperimentConfig& cfg, bool quiet, std::ostream& out, std::ostream& err) {
    const auto rep = run_gradcheck_suite(cfg.gradcheck, cfg.seed);
    const auto dir = prepare_out(cfg);
    write_text_file(dir / "gradcheck.json",
                    gradcheck_json(rep, config_fingerprint(cfg), cfg.seed).dump(2) + "\n");
    for (const auto& v : rep.variants) {
        if (!quiet) {
            out << to_string(v.variant) << ": max_rel_error " << v.max_rel_error << " over "
                << v.triples << " triples, " << v.skipped_tokens << " boundary tokens skipped ("
                << v.boundary_skipped << " in the threshold fixture) " << (v.passed ? "ok" : "FAIL")
                << "\n";
        }
        if (!v.passed) {
            err << "gradcheck failed for " << to_string(v.variant) << ": max_rel_error "
                << std::max(v.max_rel_error, v.boundary_error) << " > " << rep.tolerance << "\n";
        }
    }
    return rep.passed() ? kExitOk : kExitTolerance;
}

int cmd_eval(const ExperimentConfig& cfg, bool quiet, std::ostream& out) {
    const fs::path ckpt =
        cfg.checkpoint.empty() ? fs::path(cfg.out_dir) / "checkpoint.json" : fs::path(cfg.checkpoint);
    std::ifstream in(ckpt);
    if (!in) {
        throw ConfigError("cannot read checkpoint '" + ckpt.string() + "'");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed checkpoint '" + ckpt.string() + "': " + e.what());
    }
    const auto policy = checkpoint_from_json(j, cfg.train);
    const auto setup = make_setup(cfg.train);
    const FeatureSpace feats(setup.corpus.vocab.size(), cfg.train.policy, cfg.train.env);
    const SearchEnv env(setup.corpus, cfg.train.env);
    const auto held = evaluate(policy, feats, env, setup.eval_questions);
    const auto seen = evaluate(policy, feats, env, setup.train_questions);

    ojson rep;
    rep["format_version"] = kFormatVersion;
    rep["kind"] = "eval";
    rep["fingerprint"] = config_fingerprint(cfg);
    rep["seed"] = cfg.seed;
    rep["checkpoint_fingerprint"] = j.value("fingerprint", "");
    rep["held_out"] = {{"em", held.em}, {"f1", held.f1}, {"n", held.n}};
    rep["train"] = {{"em", seen.em}, {"f1", seen.f1}, {"n", seen.n}};
    const auto dir = prepare_out(cfg);
    write_text_file(dir / "eval.json", rep.dump(2) + "\n");
    if (!quiet) {
        out << "held-out EM " << num(held.em) << " F1 " << num(held.f1) << " (n=" << held.n
            << "), train EM " << num(seen.em) << " F1 " << num(seen.f1) << " (n=" << seen.n << ")\n";
    }
    return kExitOk;
}

int cmd_export(const ExperimentConfig& cfg, bool quiet, std::ostream& out) {
    const auto setup = make_setup(cfg.train);
    ojson rep;
    rep["format_version"] = kFormatVersion;
    rep["kind"] = "export";
    rep["fingerprint"] = config_fingerprint(cfg);
    rep["seed"] = cfg.seed;
    rep["config"] = config_to_json(cfg);
    rep["config"].erase("out_dir");
    rep["corpus"] = corpus_to_json(setup.corpus);
    auto ids = [](const std::vector<Question>& qs) {
        std::vector<int> v;
        for (const auto& q : qs) {
            v.push_back(q.id);
        }
        return v;
    };
    rep["split"] = {{"train", ids(setup.train_questions)}, {"eval", ids(setup.eval_questions)}};
    const auto dir = prepare_out(cfg);
    write_text_file(dir / "export.json", rep.dump(2) + "\n");
    if (!quiet) {
        out << "exported " << setup.corpus.questions.size() << " questions, "
            << setup.corpus.docs.size() << " documents to " << (dir / "export.json").string()
            << "\n";
    }
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"SAPO/GRPO desk-scale lab"};
    app.require_subcommand(1);
    GlobalFlags flags;
    std::uint64_t seed_flag = 0;

    auto add_flags = [&](CLI::App* sub) {
        sub->add_option("--config", flags.config, "experiment config (JSON)");
        sub->add_option("--seed", seed_flag, "seed; overrides SAPO_SEED and the config");
        sub->add_option("--out", flags.out, "output directory; overrides out_dir");
        sub->add_flag("--quiet", flags.quiet, "suppress the summary on stdout");
    };
    std::map<CLI::App*, std::string> names;
    for (const auto* name : {"train", "ablate", "simulate-isdd", "gradcheck", "eval", "export"}) {
        static const std::map<std::string, std::string> help = {
            {"train", "train one policy; writes metrics.jsonl and checkpoint.json"},
            {"ablate", "run the four-variant ladder; writes ablation.json/.csv"},
            {"simulate-isdd", "Monte Carlo drift grid; writes isdd_sweep.csv"},
            {"gradcheck", "finite-difference suite over all variants; writes gradcheck.json"},
            {"eval", "score a checkpoint on the held-out questions; writes eval.json"},
            {"export", "dump the corpus, split and resolved config; writes export.json"}};
        auto* sub = app.add_subcommand(name, help.at(name));
        add_flags(sub);
        names[sub] = name;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    std::string cmd;
    for (const auto& [sub, name] : names) {
        if (sub->parsed()) {
            cmd = name;
            if (sub->count("--seed") > 0) {
                flags.seed = seed_flag;
            }
        }
    }

    try {
        const auto cfg = resolve(flags);
        if (cmd == "train") {
            return cmd_train(cfg, flags.quiet, out);
        }
        if (cmd == "ablate") {
            return cmd_ablate(cfg, flags.quiet, out);
        }
        if (cmd == "simulate-isdd") {
            return cmd_simulate(cfg, flags.quiet, out);
        }
        if (cmd == "gradcheck") {
            return cmd_gradcheck(cfg, flags.quiet, out, err);
        }
        if (cmd == "eval") {
            return cmd_eval(cfg, flags.quiet, out);
        }
        return cmd_export(cfg, flags.quiet, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NonFiniteGradient& e) {
        err << "aborted: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "runtime error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace sapo
