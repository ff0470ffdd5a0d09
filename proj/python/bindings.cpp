#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "sapo/advantage.hpp"
#include "sapo/cli.hpp"
#include "sapo/drift.hpp"
#include "sapo/errors.hpp"
#include "sapo/experiment.hpp"
#include "sapo/loss.hpp"
#include "sapo/trainer.hpp"

namespace py = pybind11;
using namespace sapo;

namespace {

py::dict row_dict(const MetricsRow& r) {
    return py::module_::import("json").attr("loads")(metrics_row_json(r).dump());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "SAPO/GRPO desk-scale lab core";
    m.attr("FORMAT_VERSION") = kFormatVersion;

    auto base = py::register_exception<Error>(m, "SapoError");
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<InvalidInput>(m, "InvalidInput", base.ptr());
    py::register_exception<NonFiniteGradient>(m, "NonFiniteGradient", base.ptr());
    py::register_exception<DegenerateTrajectory>(m, "DegenerateTrajectory", base.ptr());

    py::enum_<Variant>(m, "Variant")
        .value("GRPO", Variant::Grpo)
        .value("GRPO_KL", Variant::GrpoKl)
        .value("GRPO_KL_R", Variant::GrpoKlR)
        .value("SAPO", Variant::Sapo);
    py::enum_<PenaltyAggregation>(m, "PenaltyAggregation")
        .value("IN_SUM", PenaltyAggregation::InSum)
        .value("MASKED_MEAN", PenaltyAggregation::MaskedMean);
    py::enum_<Segment>(m, "Segment")
        .value("REASONING", Segment::Reasoning)
        .value("ACTION", Segment::Action)
        .value("RETRIEVED", Segment::Retrieved)
        .value("ANSWER", Segment::Answer);

    py::class_<LossConfig>(m, "LossConfig")
        .def(py::init<>())
        .def_readwrite("clip_eps", &LossConfig::clip_eps)
        .def_readwrite("gamma", &LossConfig::gamma)
        .def_readwrite("tau", &LossConfig::tau)
        .def_readwrite("variant", &LossConfig::variant)
        .def_readwrite("penalty_aggregation", &LossConfig::penalty_aggregation)
        .def_readwrite("ref_kl_beta", &LossConfig::ref_kl_beta)
        .def_readwrite("use_ref_kl", &LossConfig::use_ref_kl)
        .def_readwrite("listing_inequalities", &LossConfig::listing_inequalities);

    py::class_<TokenBatch>(m, "TokenBatch")
        .def(py::init<>())
        .def_readwrite("new_logp", &TokenBatch::new_logp)
        .def_readwrite("old_logp", &TokenBatch::old_logp)
        .def_readwrite("advantage", &TokenBatch::advantage)
        .def_readwrite("mask", &TokenBatch::mask)
        .def_readwrite("segment", &TokenBatch::segment)
        .def_readwrite("trajectory_id", &TokenBatch::trajectory_id)
        .def_readwrite("ref_logp", &TokenBatch::ref_logp)
        .def("validate", &TokenBatch::validate);

    py::class_<LossReport>(m, "LossReport")
        .def_readonly("loss", &LossReport::loss)
        .def_readonly("pg_loss", &LossReport::pg_loss)
        .def_readonly("kl_term", &LossReport::kl_term)
        .def_readonly("ref_kl", &LossReport::ref_kl)
        .def_readonly("clip_fraction", &LossReport::clip_fraction)
        .def_readonly("mean_is_ratio", &LossReport::mean_is_ratio)
        .def_readonly("approx_kl", &LossReport::approx_kl)
        .def_readonly("penalty_active_fraction", &LossReport::penalty_active_fraction);

    m.def("importance_ratios", &importance_ratios);
    m.def("penalty_active", &penalty_active, py::arg("r"), py::arg("advantage"), py::arg("config"));
    m.def("grpo_objective", &grpo_objective);
    m.def("sapo_objective", &sapo_objective);
    m.def(
        "gradient_coefficients",
        [](const TokenBatch& b, const LossConfig& c) {
            const auto g = analytic_gradient_coefficients(b, c);
            return py::make_tuple(g.objective, g.boundary_tokens);
        },
        "Objective-side coefficients c_t and the indices of boundary tokens.");

    m.def("group_advantages", [](const std::vector<double>& r) { return group_advantages(r); });
    m.def("normalize_answer", &normalize_answer);
    m.def("f1_reward", [](const std::string& p, const std::vector<std::string>& g) {
        return f1_reward({p, g});
    });
    m.def("em_score", [](const std::string& p, const std::vector<std::string>& g) {
        return em_score({p, g});
    });

    m.def("cumulative_is_weight", [](const std::vector<double>& r) { return cumulative_is_weight(r); });
    m.def("lognormal_product_mean", &lognormal_product_mean);
    m.def("closed_form_isdd_probability",
          py::overload_cast<double, double, double, double>(&closed_form_isdd_probability),
          py::arg("mu"), py::arg("sigma"), py::arg("length"), py::arg("eps_drift"));
    m.def(
        "simulate_isdd",
        [](double mu, double sigma, std::size_t length, std::size_t n, std::uint64_t seed,
           double eps_drift) {
            const auto r = simulate_isdd(DriftParams::single(mu, sigma, length), n, seed, eps_drift);
            py::dict d;
            d["mean_weight"] = r.mean_weight;
            d["isdd_probability"] = r.isdd_probability;
            d["se_mean"] = r.se_mean;
            d["se_probability"] = r.se_probability;
            d["n"] = r.n;
            return d;
        },
        py::arg("mu"), py::arg("sigma"), py::arg("length"), py::arg("n"), py::arg("seed"),
        py::arg("eps_drift"));

    m.def(
        "config_fingerprint",
        [](const std::string& text) {
            return config_fingerprint(parse_config(nlohmann::json::parse(text)));
        },
        "Validates a JSON config string and returns its fingerprint.");
    m.def(
        "train",
        [](const std::string& text) {
            const auto cfg = parse_config(nlohmann::json::parse(text));
            TrainResult res;
            {
                py::gil_scoped_release release;
                res = train(cfg.train);
            }
            py::list rows;
            for (const auto& r : res.rows) {
                rows.append(row_dict(r));
            }
            py::dict d;
            d["rows"] = rows;
            d["final_em"] = res.final_eval.em;
            d["final_f1"] = res.final_eval.f1;
            d["initial_em"] = res.initial_eval.em;
            d["fingerprint"] = train_fingerprint(cfg.train);
            return d;
        },
        py::arg("config_json"), "Runs one training job from a JSON config string.");
    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::vector<const char*> argv = {"sapo"};
            for (const auto& a : args) {
                argv.push_back(a.c_str());
            }
            std::ostringstream out;
            std::ostringstream err;
            const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs the command line in-process; returns (exit_code, stdout, stderr).");
}
