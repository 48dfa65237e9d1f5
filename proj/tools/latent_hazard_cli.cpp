// latent-hazard: command-line front end for the analysis pipeline.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "latent_hazard/latent_hazard.hpp"

namespace fs = std::filesystem;

namespace {

const char* exit_code_help =
    "Exit codes:\n"
    "  0  success\n"
    "  1  configuration error (bad flags, violated preconditions)\n"
    "  2  schema error (unknown/missing columns, malformed cells)\n"
    "  3  numerical error (rank deficiency, singular matrices, failed selection)\n"
    "  4  I/O error (unreadable input, unwritable output)\n"
    "\nEnvironment:\n"
    "  LATENT_HAZARD_THREADS  maximum worker threads\n";

struct Common {
    std::string input;
    std::string schema;
    std::string out;
    std::uint64_t seed = 1;
    bool force = false;
};

struct Options {
    Common common;
    int m = 0;  // 0: automatic
    int iterations = 20;
    std::string criterion = "bic";
    std::vector<std::string> subsamples;
    std::string pooling = "rubin";
    int bootstrap = 0;
    double display_cutoff = 0.1;
    int p = -1;  // factor: -1 selects by criterion
    std::string preset = "pipeline";
    std::size_t n = 5000;
    double missing_rate = 0.3;
    std::string strata;
};

/// Creates the output directory; refuses to reuse a non-empty one without --force.
void prepare_output(const Common& c) {
    if (c.out.empty()) throw lh::ConfigError("--out is required");
    std::error_code ec;
    if (fs::exists(c.out, ec)) {
        if (!fs::is_directory(c.out, ec)) throw lh::IoError("output path '" + c.out + "' exists and is not a directory");
        if (!fs::is_empty(c.out, ec) && !c.force)
            throw lh::ConfigError("output directory '" + c.out + "' is not empty; pass --force to overwrite");
    }
    fs::create_directories(c.out, ec);
    if (ec) throw lh::IoError("cannot create output directory '" + c.out + "': " + ec.message());
}

std::string out_path(const Common& c, const std::string& name) { return (fs::path(c.out) / name).string(); }

void write_table(const Common& c, const std::string& stem, const lh::Table& t) {
    lh::write_text(out_path(c, stem + ".md"), lh::to_markdown(t));
    lh::write_text(out_path(c, stem + ".csv"), lh::to_csv(t));
}

/// Resolved configuration plus tool version; every output listed by name.
void write_manifest(const Common& c, const std::string& command, const nlohmann::json& config) {
    nlohmann::json m;
    m["tool"] = "latent-hazard";
    m["version"] = lh::version;
    m["command"] = command;
    m["config"] = config;
    std::vector<std::string> outputs;
    for (const auto& entry : fs::recursive_directory_iterator(c.out))
        if (entry.is_regular_file()) outputs.push_back(fs::relative(entry.path(), c.out).generic_string());
    std::sort(outputs.begin(), outputs.end());
    outputs.erase(std::remove(outputs.begin(), outputs.end(), "manifest.json"), outputs.end());
    m["outputs"] = outputs;
    lh::write_text(out_path(c, "manifest.json"), m.dump(2) + "\n");
}

nlohmann::json common_json(const Common& c) {
    return {{"input", c.input}, {"schema", c.schema}, {"out", c.out}, {"seed", c.seed}};
}

void echo(const std::string& command, const nlohmann::json& config) {
    std::cout << command << " resolved config: " << config.dump() << "\n";
}

lh::Dataset load_input(const Common& c) {
    if (c.input.empty()) throw lh::ConfigError("--input is required");
    if (c.schema.empty()) throw lh::ConfigError("--schema is required");
    const lh::Schema schema = lh::load_schema(c.schema);
    return lh::load_csv(c.input, schema);
}

std::vector<lh::Policy> parse_subsamples(const std::vector<std::string>& raw, std::vector<lh::Policy> fallback) {
    if (raw.empty()) return fallback;
    std::vector<lh::Policy> out;
    for (const auto& r : raw) {
        std::stringstream ss(r);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) out.push_back(lh::parse_policy(tok));
    }
    return out;
}

int cmd_summarize(const Options& o) {
    lh::Dataset d = load_input(o.common);
    const auto subs = parse_subsamples(o.subsamples, {lh::Policy::all});
    if (subs.size() != 1) throw lh::ConfigError("summarize takes a single --subsample");
    d = lh::subsample(d, subs.front());
    nlohmann::json cfg = common_json(o.common);
    cfg["subsample"] = lh::to_string(subs.front());
    echo("summarize", cfg);
    prepare_output(o.common);
    const auto s = lh::summarize(d);
    write_table(o.common, "summary_continuous", lh::continuous_summary_table(s));
    write_table(o.common, "summary_categorical", lh::categorical_summary_table(s));
    write_table(o.common, "missingness", lh::missingness_table(lh::missingness_report(d)));
    write_manifest(o.common, "summarize", cfg);
    std::cout << "rows: " << d.rows() << "\n";
    return 0;
}

int cmd_impute(const Options& o) {
    const lh::Dataset d = load_input(o.common);
    const double rate = lh::average_missing_rate(d);
    lh::MiceOptions mo;
    mo.m = o.m > 0 ? o.m : lh::choose_num_imputations(rate);
    mo.iterations = o.iterations;
    mo.seed = o.common.seed;
    mo.strata = o.strata;
    nlohmann::json cfg = common_json(o.common);
    cfg["m"] = mo.m;
    cfg["iterations"] = mo.iterations;
    cfg["strata"] = mo.strata;
    cfg["average_missing_rate"] = rate;
    echo("impute", cfg);
    prepare_output(o.common);
    const auto set = lh::mice_impute(d, mo);
    lh::write_imputation_set(set, o.common.out);
    write_table(o.common, "missingness", lh::missingness_table(lh::missingness_report(d)));
    write_manifest(o.common, "impute", cfg);
    std::cout << "imputations: " << set.m << "\n";
    return 0;
}

int cmd_factor(const Options& o) {
    const lh::Dataset d = load_input(o.common);
    const auto problem = lh::FactorProblem::from_dataset(d, lh::FactorProblem::component_codes(d.schema()));
    const auto criterion = lh::parse_criterion(o.criterion);
    nlohmann::json cfg = common_json(o.common);
    cfg["criterion"] = lh::to_string(criterion);
    cfg["p"] = o.p < 0 ? nlohmann::json("auto") : nlohmann::json(o.p);
    cfg["display_cutoff"] = o.display_cutoff;
    echo("factor", cfg);
    if (o.p > lh::max_factors(problem.q()))
        throw lh::ConfigError("p=" + std::to_string(o.p) + " is not identifiable for q=" + std::to_string(problem.q()) +
                              " (at most " + std::to_string(lh::max_factors(problem.q())) + ")");
    const auto selection = lh::select_p(problem, criterion);
    const int p = o.p >= 0 ? o.p : selection.chosen_p;
    if (p < 1) throw lh::NumericalError("the selected model has no common factors");
    prepare_output(o.common);
    const auto model = lh::varimax(selection.fits[static_cast<std::size_t>(p)]);
    const auto scores = lh::predict_scores(model, problem);
    write_table(o.common, "table1_selection", lh::selection_table(selection));
    write_table(o.common, "table2_factors", lh::factor_summary_table(scores));
    write_table(o.common, "table3_loadings", lh::loadings_table(model, o.display_cutoff));
    lh::save_factor_model(model, out_path(o.common, "factor_model.txt"));
    lh::Table st{"", scores.labels, {}};
    for (Eigen::Index i = 0; i < scores.scores.rows(); ++i) {
        std::vector<std::string> row;
        for (Eigen::Index k = 0; k < scores.scores.cols(); ++k) row.push_back(lh::detail::format_roundtrip(scores.scores(i, k)));
        st.add_row(std::move(row));
    }
    lh::write_text(out_path(o.common, "scores.csv"), lh::to_csv(st));
    write_manifest(o.common, "factor", cfg);
    std::cout << "factors: " << p << "\n";
    return 0;
}

lh::PipelineConfig pipeline_config(const Options& o) {
    lh::PipelineConfig pc;
    if (o.m > 0) pc.m = o.m;
    pc.iterations = o.iterations;
    pc.seed = o.common.seed;
    pc.criterion = lh::parse_criterion(o.criterion);
    pc.subsamples = parse_subsamples(o.subsamples, pc.subsamples);
    pc.pooling = lh::parse_pooling(o.pooling);
    pc.bootstrap = o.bootstrap;
    pc.display_cutoff = o.display_cutoff;
    if (o.bootstrap < 0) throw lh::ConfigError("--bootstrap must be non-negative");
    if (o.iterations < 1) throw lh::ConfigError("--iterations must be at least 1");
    return pc;
}

int run_pipeline_command(const Options& o, const std::string& name, bool require_complete) {
    lh::PipelineConfig pc = pipeline_config(o);
    const lh::Dataset d = load_input(o.common);
    if (require_complete) {
        if (!d.complete()) throw lh::ConfigError("input has missing cells; run `impute` first or use `pipeline`");
        pc.m = 1;
        pc.pooling = lh::Pooling::single;
        pc.little_test = false;
    }
    nlohmann::json cfg = common_json(o.common);
    cfg.update(pc.to_json());
    echo(name, cfg);
    prepare_output(o.common);
    const auto rep = lh::run_pipeline(d, pc);
    lh::write_pipeline_report(rep, o.common.out);
    cfg["m"] = rep.m;
    write_manifest(o.common, name, cfg);
    for (const auto& de : rep.deltas)
        std::cout << lh::to_string(de.subsample) << " " << de.factor << ": delta=" << lh::format_fixed(de.estimate, 4)
                  << " se=" << lh::format_fixed(de.std_error, 4) << " p=" << lh::format_fixed(de.p_value, 4) << "\n";
    return 0;
}

int cmd_synth(const Options& o) {
    nlohmann::json cfg{{"out", o.common.out}, {"seed", o.common.seed}, {"preset", o.preset}, {"n", o.n}};
    if (o.preset == "pipeline") cfg["missing_rate"] = o.missing_rate;
    echo("synth", cfg);
    if (o.n < 10) throw lh::ConfigError("--n must be at least 10");
    prepare_output(o.common);
    lh::Dataset data;
    nlohmann::json truth;
    if (o.preset == "factor") {
        lh::GeneratorConfig gc;
        gc.n = o.n;
        gc.seed = o.common.seed;
        data = lh::gen_factor_data(gc);
        truth["factor"] = gc.factor.to_json();
    } else if (o.preset == "hazard") {
        lh::GeneratorConfig gc;
        gc.n = o.n;
        gc.seed = o.common.seed;
        data = lh::gen_hazard_data(gc);
        truth["hazard"] = {{"sigma_v2", gc.hazard.sigma_v2}, {"sigma_eps2", gc.hazard.sigma_eps2},
                           {"sigma_veps", gc.hazard.sigma_veps}, {"delta", gc.hazard.delta}, {"sigma_xi2", gc.hazard.sigma_xi2}};
    } else if (o.preset == "pipeline") {
        const auto fx = lh::make_pipeline_fixture(o.n, o.common.seed, o.missing_rate);
        data = fx.data;
        truth = fx.truth.to_json();
    } else {
        throw lh::ConfigError("unknown preset '" + o.preset + "' (expected factor, hazard or pipeline)");
    }
    truth["n"] = o.n;
    truth["seed"] = o.common.seed;
    lh::write_csv(data, out_path(o.common, "data.csv"));
    lh::save_schema(data.schema(), out_path(o.common, "schema.json"));
    lh::write_text(out_path(o.common, "truth.json"), truth.dump(2) + "\n");
    write_manifest(o.common, "synth", cfg);
    return 0;
}

void add_common(CLI::App* sub, Common& c, bool needs_input) {
    if (needs_input) {
        sub->add_option("--input", c.input, "CSV data file")->required();
        sub->add_option("--schema", c.schema, "schema JSON file")->required();
    }
    sub->add_option("--out", c.out, "output directory")->required();
    sub->add_option("--seed", c.seed, "random seed")->capture_default_str();
    sub->add_flag("--force", c.force, "allow writing into a non-empty output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Detect ex-post moral hazard in survey data: multiple imputation, factor analysis and two-stage regression."};
    app.footer(exit_code_help);
    app.require_subcommand(1);
    app.set_version_flag("--version", lh::version);
    Options o;

    auto* summarize = app.add_subcommand("summarize", "summary statistics and missingness by variable");
    add_common(summarize, o.common, true);
    summarize->add_option("--subsample", o.subsamples, "all, on_site, hybrid or fully_remote");

    auto* impute = app.add_subcommand("impute", "multiple imputation by chained equations");
    add_common(impute, o.common, true);
    impute->add_option("--m", o.m, "number of imputations (default: from the missing rate)");
    impute->add_option("--iterations", o.iterations, "chained-equation sweeps")->capture_default_str();
    impute->add_option("--strata", o.strata, "impute separately within levels of this column");

    auto* factor = app.add_subcommand("factor", "maximum-likelihood factor analysis of the productivity components");
    add_common(factor, o.common, true);
    factor->add_option("--criterion", o.criterion, "aic or bic")->capture_default_str();
    factor->add_option("--p", o.p, "number of factors (default: selected by criterion)");
    factor->add_option("--display-cutoff", o.display_cutoff, "loadings below this print as 0")->capture_default_str();

    auto* hazard = app.add_subcommand("hazard", "two-stage moral-hazard regressions on complete data");
    add_common(hazard, o.common, true);
    hazard->add_option("--criterion", o.criterion, "aic or bic")->capture_default_str();
    hazard->add_option("--subsample", o.subsamples, "subsamples (repeat or comma-separate)");
    hazard->add_option("--bootstrap", o.bootstrap, "pairs-bootstrap resamples for delta (0 disables)")->capture_default_str();
    hazard->add_option("--display-cutoff", o.display_cutoff, "loadings below this print as 0")->capture_default_str();

    auto* pipeline = app.add_subcommand("pipeline", "full analysis from raw data to pooled report");
    add_common(pipeline, o.common, true);
    pipeline->add_option("--m", o.m, "number of imputations (default: from the missing rate)");
    pipeline->add_option("--iterations", o.iterations, "chained-equation sweeps")->capture_default_str();
    pipeline->add_option("--criterion", o.criterion, "aic or bic")->capture_default_str();
    pipeline->add_option("--subsample", o.subsamples, "subsamples (repeat or comma-separate)");
    pipeline->add_option("--pooling", o.pooling, "rubin or single")->capture_default_str();
    pipeline->add_option("--bootstrap", o.bootstrap, "pairs-bootstrap resamples for delta (0 disables)")->capture_default_str();
    pipeline->add_option("--display-cutoff", o.display_cutoff, "loadings below this print as 0")->capture_default_str();

    auto* synth = app.add_subcommand("synth", "write a synthetic dataset with its ground truth");
    add_common(synth, o.common, false);
    synth->add_option("--preset", o.preset, "factor, hazard or pipeline")->capture_default_str();
    synth->add_option("--n", o.n, "rows")->capture_default_str();
    synth->add_option("--missing-rate", o.missing_rate, "MCAR rate for the pipeline preset")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return static_cast<int>(lh::ErrorKind::config);
    }

    try {
        if (*summarize) return cmd_summarize(o);
        if (*impute) return cmd_impute(o);
        if (*factor) return cmd_factor(o);
        if (*hazard) return run_pipeline_command(o, "hazard", true);
        if (*pipeline) return run_pipeline_command(o, "pipeline", false);
        if (*synth) return cmd_synth(o);
    } catch (const lh::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(lh::ErrorKind::config);
    }
    return 0;
}
