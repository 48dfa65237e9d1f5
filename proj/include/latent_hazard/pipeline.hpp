#pragma once

// End-to-end analysis: missingness report, MICE, factor selection and
// scoring per imputation, wage equation, two-stage moral-hazard regressions
// per policy subsample, and Rubin pooling into report tables.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "latent_hazard/dataset.hpp"
#include "latent_hazard/error.hpp"
#include "latent_hazard/factor_model.hpp"
#include "latent_hazard/imputation.hpp"
#include "latent_hazard/moral_hazard.hpp"
#include "latent_hazard/parallel.hpp"
#include "latent_hazard/regression.hpp"
#include "latent_hazard/table.hpp"

namespace lh {

enum class Pooling { rubin, single };

inline Pooling parse_pooling(const std::string& s) {
    if (s == "rubin") return Pooling::rubin;
    if (s == "single") return Pooling::single;
    throw ConfigError("unknown pooling mode '" + s + "' (expected rubin or single)");
}

inline std::string to_string(Pooling p) { return p == Pooling::rubin ? "rubin" : "single"; }

struct PipelineConfig {
    std::optional<int> m;  // default: choose_num_imputations
    int iterations = 20;
    std::uint64_t seed = 1;
    Criterion criterion = Criterion::bic;
    std::vector<Policy> subsamples{Policy::all, Policy::on_site, Policy::fully_remote};
    Pooling pooling = Pooling::rubin;
    int bootstrap = 0;
    double display_cutoff = 0.1;
    double alpha = 0.05;
    std::string firm_value = std::string(default_firm_value_code);
    bool stratify = true;  // impute within policy strata when the key is present
    bool little_test = true;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["m"] = m ? nlohmann::json(*m) : nlohmann::json("auto");
        j["iterations"] = iterations;
        j["seed"] = seed;
        j["criterion"] = to_string(criterion);
        std::vector<std::string> subs;
        for (auto p : subsamples) subs.push_back(to_string(p));
        j["subsamples"] = subs;
        j["pooling"] = to_string(pooling);
        j["bootstrap"] = bootstrap;
        j["display_cutoff"] = display_cutoff;
        j["alpha"] = alpha;
        j["firm_value"] = firm_value;
        j["stratify"] = stratify;
        j["little_test"] = little_test;
        return j;
    }
};

struct DeltaEstimate {
    Policy subsample = Policy::all;
    std::string factor;
    double estimate = 0;
    double std_error = 0;
    double df = 0;
    double p_value = 1;
    double lower = 0;
    double upper = 0;
    std::size_t n = 0;
    int m = 1;
    bool significant = false;
    std::optional<double> bootstrap_se;
};

struct PipelineReport {
    PipelineConfig config;
    int m = 0;
    MissingnessReport missingness;
    DatasetSummary summary;
    SelectionTable selection;  // criteria averaged across the imputations used
    FactorModel display_model; // loadings averaged across imputations, factors in label order
    std::vector<std::string> labels;
    std::optional<ReportColumn> wage;
    std::vector<ReportColumn> columns;  // Table 5: stage 1 per subsample, then stage 2 per factor x subsample
    std::vector<DeltaEstimate> deltas;
    std::vector<std::pair<std::string, Table>> tables;  // (file stem, table)

    const DeltaEstimate& delta(Policy p, const std::string& factor) const {
        for (const auto& d : deltas)
            if (d.subsample == p && d.factor == factor) return d;
        throw ConfigError("no delta estimate for " + to_string(p) + "/" + factor);
    }

    const Table& table(const std::string& stem) const {
        for (const auto& [s, t] : tables)
            if (s == stem) return t;
        throw ConfigError("report has no table '" + stem + "'");
    }
};

namespace detail {

inline std::string subsample_heading(std::size_t index, Policy p) {
    static const std::map<Policy, std::string> names{
        {Policy::all, "All"}, {Policy::on_site, "On-site"}, {Policy::hybrid, "Hybrid"}, {Policy::fully_remote, "Fully remote"}};
    return "(" + std::to_string(index + 1) + ") " + names.at(p);
}

template <typename Fn>
auto staged(const std::string& stage, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error& e) {
        throw with_stage(e, stage);
    }
}

struct ImputationWork {
    std::vector<FactorModel> fits;  // p = 0..pmax
    FactorModel rotated;
    FactorScores scores;
    std::optional<RegressionFit> wage;
    std::vector<MoralHazardResult> hazard;  // subsample-major, factor-minor
};

}  // namespace detail

inline PipelineReport run_pipeline(const Dataset& d, const PipelineConfig& cfg) {
    PipelineReport rep;
    rep.config = cfg;
    if (cfg.subsamples.empty()) throw ConfigError("at least one subsample is required");
    const Schema& schema = d.schema();
    const auto components = detail::staged("schema", [&] { return FactorProblem::component_codes(schema); });
    detail::staged("schema", [&] {
        if (!schema.find(cfg.firm_value)) throw SchemaError("firm-value proxy column '" + cfg.firm_value + "' is absent");
        for (Policy p : cfg.subsamples)
            if (p != Policy::all) policy_key_index(schema);
        return 0;
    });

    // Missingness.
    rep.summary = summarize(d);
    detail::staged("missingness", [&] {
        rep.missingness.variables.clear();
        std::vector<std::string> demo;
        for (std::size_t j : schema.with_role(VariableRole::demographic)) demo.push_back(schema[j].code);
        for (std::size_t j = 0; j < d.cols(); ++j) {
            const auto miss = d.missing_count(j);
            rep.missingness.variables.push_back({schema[j].code, miss, d.rows() ? static_cast<double>(miss) / d.rows() : 0.0});
        }
        rep.missingness.average_rate = average_missing_rate(d);
        if (cfg.little_test) {
            try {
                rep.missingness.little = little_mcar_test(d);
            } catch (const NumericalError& e) {
                rep.missingness.little_note = e.what();
            }
        }
        if (!d.complete()) rep.missingness.mar = mar_diagnostic(d, demo);
        return 0;
    });

    // Imputation.
    rep.m = cfg.m ? *cfg.m : choose_num_imputations(rep.missingness.average_rate);
    MiceOptions mo;
    mo.m = rep.m;
    mo.iterations = cfg.iterations;
    mo.seed = cfg.seed;
    if (cfg.stratify && !d.complete()) {
        if (auto key = schema.find(policy_key_code); key && d.missing_count(*key) == 0) mo.strata = std::string(policy_key_code);
    }
    const ImputationSet imps = detail::staged("imputation", [&] { return mice_impute(d, mo); });
    const std::size_t used = cfg.pooling == Pooling::rubin ? imps.completed.size() : 1;

    // Factor candidates per imputation.
    std::vector<detail::ImputationWork> work(used);
    std::vector<FactorProblem> problems;
    problems.reserve(used);
    for (std::size_t i = 0; i < used; ++i)
        problems.push_back(detail::staged("factor", [&] { return FactorProblem::from_dataset(imps.completed[i], components); }));
    const int q = static_cast<int>(components.size());
    const int pmax = max_factors(q);
    detail::staged("factor", [&] {
        for (auto& w : work) w.fits.resize(static_cast<std::size_t>(pmax + 1));
        parallel_for(used * static_cast<std::size_t>(pmax + 1), [&](std::size_t task) {
            const std::size_t i = task / static_cast<std::size_t>(pmax + 1);
            const std::size_t p = task % static_cast<std::size_t>(pmax + 1);
            work[i].fits[p] = fit_fa(problems[i], static_cast<int>(p));
        });
        return 0;
    });

    // Choose p once from criteria averaged over imputations.
    rep.selection = detail::staged("factor", [&] {
        std::vector<SelectionRow> rows;
        for (int p = 0; p <= pmax; ++p) {
            SelectionRow r;
            r.p = p;
            for (const auto& w : work) {
                const auto ic = information_criteria(w.fits[static_cast<std::size_t>(p)], problems.front().v(), q);
                r.aic += ic.aic / static_cast<double>(used);
                r.bic += ic.bic / static_cast<double>(used);
                r.d_p = ic.d_p;
                r.converged = r.converged && w.fits[static_cast<std::size_t>(p)].converged;
            }
            rows.push_back(r);
        }
        auto sel = choose_factor_count(std::move(rows), q, cfg.criterion);
        if (sel.chosen_p < 1) throw NumericalError("the selected model has no common factors; nothing to score");
        return sel;
    });
    const int p = rep.selection.chosen_p;

    // Per imputation: rotate, score, regress.
    const bool has_wage = !schema.with_role(VariableRole::wage).empty();
    HazardOptions ho;
    ho.firm_value = cfg.firm_value;
    ho.alpha = cfg.alpha;
    ho.bootstrap = cfg.bootstrap;
    ho.seed = cfg.seed;
    detail::staged("factor", [&] {
        parallel_for(used, [&](std::size_t i) {
            work[i].rotated = varimax(work[i].fits[static_cast<std::size_t>(p)]);
            work[i].scores = predict_scores(work[i].rotated, problems[i]);
        });
        return 0;
    });
    rep.labels = work.front().scores.labels;
    for (const auto& w : work) {
        auto a = w.scores.labels, b = rep.labels;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        if (a != b) throw with_stage(NumericalError("factor labels differ across imputations"), "factor");
    }
    if (has_wage)
        detail::staged("wage", [&] {
            parallel_for(used, [&](std::size_t i) { work[i].wage = wage_equation(wage_column(imps.completed[i]), work[i].scores); });
            return 0;
        });
    detail::staged("moral_hazard", [&] {
        parallel_for(used, [&](std::size_t i) {
            const Dataset& full = imps.completed[i];
            for (Policy s : cfg.subsamples) {
                const auto rows = policy_rows(full, s);
                const Dataset sub = full.select_rows(rows);
                const DesignMatrix x = encode(sub, EncodeOptions{ho.covariate_roles});
                const Eigen::VectorXd y = firm_value_column(sub, cfg.firm_value);
                for (const auto& label : rep.labels) {
                    const Eigen::VectorXd all_scores = work[i].scores.column(label);
                    Eigen::VectorXd score(static_cast<Eigen::Index>(rows.size()));
                    for (std::size_t r = 0; r < rows.size(); ++r) score[static_cast<Eigen::Index>(r)] = all_scores[static_cast<Eigen::Index>(rows[r])];
                    HazardOptions local = ho;
                    local.seed = derive_seed(cfg.seed, "imputation" + std::to_string(i));
                    work[i].hazard.push_back(estimate_moral_hazard(x, y, score, label, local, s));
                }
            }
        });
        return 0;
    });

    // Display model: loadings averaged over imputations in label order.
    {
        FactorModel avg = work.front().rotated;
        avg.beta.setZero();
        avg.omega.setZero();
        for (const auto& w : work) {
            for (std::size_t f = 0; f < rep.labels.size(); ++f) {
                const auto pos = static_cast<Eigen::Index>(
                    std::find(w.scores.labels.begin(), w.scores.labels.end(), rep.labels[f]) - w.scores.labels.begin());
                avg.beta.row(static_cast<Eigen::Index>(f)) += w.rotated.beta.row(pos) / static_cast<double>(used);
            }
            avg.omega += w.rotated.omega / static_cast<double>(used);
        }
        rep.display_model = avg;
    }

    // Pooled columns.
    const std::size_t nlab = rep.labels.size();
    auto fits_of = [&](auto pick) {
        std::vector<RegressionFit> out;
        for (const auto& w : work) out.push_back(pick(w));
        return out;
    };
    auto column_of = [&](const std::vector<RegressionFit>& fits, const std::string& group, const std::string& heading) {
        return cfg.pooling == Pooling::rubin ? pooled_column(fits, group, heading) : report_column(fits.front(), group, heading);
    };
    if (has_wage) rep.wage = column_of(fits_of([](const detail::ImputationWork& w) { return *w.wage; }), "", "Estimates (Std. Error)");
    for (std::size_t s = 0; s < cfg.subsamples.size(); ++s)
        rep.columns.push_back(column_of(fits_of([&](const detail::ImputationWork& w) { return w.hazard[s * nlab].stage1; }),
                                        "Stage 1: " + cfg.firm_value, detail::subsample_heading(s, cfg.subsamples[s])));
    for (std::size_t f = 0; f < nlab; ++f)
        for (std::size_t s = 0; s < cfg.subsamples.size(); ++s)
            rep.columns.push_back(column_of(fits_of([&](const detail::ImputationWork& w) { return w.hazard[s * nlab + f].stage2; }),
                                            "Stage 2: " + rep.labels[f], detail::subsample_heading(s, cfg.subsamples[s])));

    // Delta estimates.
    for (std::size_t s = 0; s < cfg.subsamples.size(); ++s) {
        for (std::size_t f = 0; f < nlab; ++f) {
            DeltaEstimate de;
            de.subsample = cfg.subsamples[s];
            de.factor = rep.labels[f];
            std::vector<std::pair<double, double>> est, boot;
            for (const auto& w : work) {
                const auto& h = w.hazard[s * nlab + f];
                est.emplace_back(h.delta_hat, h.delta_se * h.delta_se);
                if (h.bootstrap) boot.emplace_back(h.delta_hat, h.bootstrap->std_error * h.bootstrap->std_error);
            }
            const auto& first = work.front().hazard[s * nlab + f];
            de.n = first.stage2.n;
            const auto pooled = pool_rubin(est, first.stage2.df_residual);
            de.m = pooled.m;
            de.estimate = pooled.estimate;
            de.std_error = pooled.std_error();
            de.df = pooled.df;
            de.p_value = pooled.p_value();
            std::tie(de.lower, de.upper) = pooled.interval(1.0 - cfg.alpha);
            de.significant = de.p_value < cfg.alpha;
            if (!boot.empty()) de.bootstrap_se = pool_rubin(boot).std_error();
            rep.deltas.push_back(de);
        }
    }

    // Tables.
    rep.tables.emplace_back("table1_selection", selection_table(rep.selection));
    {
        FactorScores summary;
        summary.labels = rep.labels;
        summary.ss_loadings = rep.display_model.beta.rowwise().squaredNorm();
        summary.proportion_var = summary.ss_loadings / static_cast<double>(q);
        summary.cumulative_var = summary.proportion_var;
        for (Eigen::Index i = 1; i < summary.cumulative_var.size(); ++i) summary.cumulative_var[i] += summary.cumulative_var[i - 1];
        rep.tables.emplace_back("table2_factors", factor_summary_table(summary));
    }
    rep.tables.emplace_back("table3_loadings", loadings_table(rep.display_model, cfg.display_cutoff));
    if (rep.wage) rep.tables.emplace_back("table4_wage", regression_table("Wage equation results", {*rep.wage}));
    rep.tables.emplace_back("table5_regression", regression_table("Regression results", rep.columns));
    {
        Table t{"Moral hazard coefficients", {"Subsample", "Factor", "Estimate", "Std. Error", "df", "p-value", "CI lower",
                                              "CI upper", "n", "m", "Verdict"}, {}};
        for (const auto& de : rep.deltas)
            t.add_row({to_string(de.subsample), de.factor, format_fixed(de.estimate, 4), format_fixed(de.std_error, 4),
                       std::isinf(de.df) ? "Inf" : format_fixed(de.df, 1), format_fixed(de.p_value, 4), format_fixed(de.lower, 4),
                       format_fixed(de.upper, 4), std::to_string(de.n), std::to_string(de.m),
                       de.significant ? "significant" : "not significant"});
        rep.tables.emplace_back("delta", t);
    }
    rep.tables.emplace_back("missingness", missingness_table(rep.missingness));
    if (!rep.missingness.mar.empty()) rep.tables.emplace_back("mar_diagnostic", mar_table(rep.missingness.mar));
    rep.tables.emplace_back("summary_continuous", continuous_summary_table(rep.summary));
    rep.tables.emplace_back("summary_categorical", categorical_summary_table(rep.summary));
    return rep;
}

inline nlohmann::json pipeline_results_json(const PipelineReport& rep) {
    nlohmann::json j;
    j["config"] = rep.config.to_json();
    j["m"] = rep.m;
    j["average_missing_rate"] = rep.missingness.average_rate;
    if (rep.missingness.little) {
        j["little"] = {{"statistic", rep.missingness.little->statistic},
                       {"df", rep.missingness.little->df},
                       {"p_value", rep.missingness.little->p_value}};
    } else {
        j["little"] = {{"note", rep.missingness.little_note}};
    }
    nlohmann::json sel = nlohmann::json::array();
    for (const auto& r : rep.selection.rows)
        sel.push_back({{"p", r.p}, {"aic", r.aic}, {"bic", r.bic}, {"d_p", r.d_p}, {"converged", r.converged}});
    j["selection"] = {{"criterion", to_string(rep.selection.criterion)}, {"chosen_p", rep.selection.chosen_p}, {"candidates", sel}};
    j["factor_labels"] = rep.labels;
    nlohmann::json deltas = nlohmann::json::array();
    for (const auto& d : rep.deltas) {
        nlohmann::json e{{"subsample", to_string(d.subsample)},
                         {"factor", d.factor},
                         {"delta_hat", d.estimate},
                         {"std_error", d.std_error},
                         {"df", std::isinf(d.df) ? nlohmann::json("Inf") : nlohmann::json(d.df)},
                         {"p_value", d.p_value},
                         {"ci_lower", d.lower},
                         {"ci_upper", d.upper},
                         {"n", d.n},
                         {"m", d.m},
                         {"significant", d.significant}};
        if (d.bootstrap_se) e["bootstrap_se"] = *d.bootstrap_se;
        deltas.push_back(e);
    }
    j["delta"] = deltas;
    if (rep.wage) {
        nlohmann::json w = nlohmann::json::object();
        for (std::size_t k = 0; k < rep.wage->names.size(); ++k)
            w[rep.wage->names[k]] = {{"estimate", rep.wage->estimate[k]}, {"std_error", rep.wage->std_error[k]},
                                     {"p_value", rep.wage->p_value[k]}};
        j["wage"] = w;
    }
    return j;
}

/// Writes every table as Markdown and CSV, a combined report.md, and results.json.
inline void write_pipeline_report(const PipelineReport& rep, const std::string& dir) {
    namespace fs = std::filesystem;
    std::string combined;
    for (const auto& [stem, table] : rep.tables) {
        const std::string md = to_markdown(table);
        write_text((fs::path(dir) / (stem + ".md")).string(), md);
        write_text((fs::path(dir) / (stem + ".csv")).string(), to_csv(table));
        combined += md + "\n";
    }
    write_text((fs::path(dir) / "report.md").string(), combined);
    write_text((fs::path(dir) / "results.json").string(), pipeline_results_json(rep).dump(2) + "\n");
}

}  // namespace lh
