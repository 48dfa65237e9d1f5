#pragma once

// Two-stage residual-inclusion test for ex-post moral hazard.
//
// Stage 1 regresses the firm-value proxy on the covariates and keeps the
// residuals eps-hat. Stage 2 regresses a productivity score on the same
// covariates plus eps-hat; the coefficient on eps-hat estimates
// delta = sigma_v,eps / sigma_eps^2.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "latent_hazard/dataset.hpp"
#include "latent_hazard/error.hpp"
#include "latent_hazard/factor_model.hpp"
#include "latent_hazard/imputation.hpp"
#include "latent_hazard/random.hpp"
#include "latent_hazard/regression.hpp"
#include "latent_hazard/table.hpp"

namespace lh {

inline const std::string residual_column_name = "First-stage residuals";
inline constexpr std::string_view default_firm_value_code = "workteam_npeople";

/// Bivariate-normal (eps, v) with v | eps ~ N(delta eps, sigma_xi^2).
struct ShockDecomposition {
    double sigma_v2 = 0;
    double sigma_eps2 = 1;
    double sigma_veps = 0;
    double delta = 0;
    double sigma_xi2 = 0;

    static ShockDecomposition from_covariance(double sigma_v2, double sigma_eps2, double sigma_veps) {
        if (!(sigma_eps2 > 0)) throw ConfigError("shock covariance: sigma_eps^2 must be positive");
        if (!(sigma_v2 >= 0)) throw ConfigError("shock covariance: sigma_v^2 must be non-negative");
        const double det = sigma_v2 * sigma_eps2 - sigma_veps * sigma_veps;
        if (det < -1e-12 * std::max(1.0, sigma_v2 * sigma_eps2))
            throw ConfigError("shock covariance is not positive semi-definite");
        ShockDecomposition s;
        s.sigma_v2 = sigma_v2;
        s.sigma_eps2 = sigma_eps2;
        s.sigma_veps = sigma_veps;
        s.delta = sigma_veps / sigma_eps2;
        s.sigma_xi2 = std::max(0.0, sigma_v2 - sigma_veps * sigma_veps / sigma_eps2);
        return s;
    }

    static ShockDecomposition from_delta(double delta, double sigma_eps2, double sigma_xi2) {
        if (!(sigma_xi2 >= 0)) throw ConfigError("sigma_xi^2 must be non-negative");
        return from_covariance(sigma_xi2 + delta * delta * sigma_eps2, sigma_eps2, delta * sigma_eps2);
    }
};

/// Draws n pairs (eps, v).
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> draw_shocks(const ShockDecomposition& s, std::size_t n, RandomStream rng) {
    auto eps_rng = rng.substream("eps");
    auto xi_rng = rng.substream("xi");
    Eigen::VectorXd eps(static_cast<Eigen::Index>(n)), v(static_cast<Eigen::Index>(n));
    const double se = std::sqrt(s.sigma_eps2), sx = std::sqrt(s.sigma_xi2);
    for (Eigen::Index i = 0; i < eps.size(); ++i) {
        eps[i] = se * eps_rng.normal();
        v[i] = s.delta * eps[i] + sx * xi_rng.normal();
    }
    return {eps, v};
}

struct HazardOptions {
    std::string firm_value = std::string(default_firm_value_code);
    std::vector<VariableRole> covariate_roles{VariableRole::wfh_related, VariableRole::demographic, VariableRole::control};
    double alpha = 0.05;
    int bootstrap = 0;  // pairs-bootstrap resamples; 0 disables
    std::uint64_t seed = 1;
};

inline RegressionFit stage1_fit(const DesignMatrix& x, const Eigen::VectorXd& firm_value) {
    return fit_ols(x, firm_value, "firm_value");
}

inline RegressionFit stage2_fit(const DesignMatrix& x, const Eigen::VectorXd& eps_hat, const Eigen::VectorXd& productivity,
                                const std::string& response = "productivity") {
    if (eps_hat.size() != x.rows())
        throw ConfigError("stage-1 residuals have " + std::to_string(eps_hat.size()) + " rows, design has " +
                          std::to_string(x.rows()));
    if (productivity.size() != x.rows())
        throw ConfigError("productivity score has " + std::to_string(productivity.size()) + " rows, design has " +
                          std::to_string(x.rows()));
    return fit_ols(x.with_column(residual_column_name, eps_hat), productivity, response);
}

struct BootstrapSummary {
    int replicates = 0;  // successful resamples
    double std_error = 0;
    double lower = 0;  // percentile interval at 1 - alpha
    double upper = 0;
};

struct MoralHazardResult {
    Policy subsample = Policy::all;
    std::string productivity;
    RegressionFit stage1;
    RegressionFit stage2;
    double delta_hat = 0;
    double delta_se = 0;
    double delta_p = 1;
    double alpha = 0.05;
    bool significant = false;
    std::optional<BootstrapSummary> bootstrap;

    std::string verdict() const { return significant ? "significant" : "not significant"; }
};

/// Pairs bootstrap of delta-hat: both stages are re-estimated on each resample.
inline BootstrapSummary bootstrap_delta(const DesignMatrix& x, const Eigen::VectorXd& firm_value,
                                        const Eigen::VectorXd& productivity, int resamples, double alpha,
                                        RandomStream rng) {
    const auto n = static_cast<std::size_t>(x.rows());
    std::vector<double> draws(static_cast<std::size_t>(resamples), std::numeric_limits<double>::quiet_NaN());
    parallel_for(draws.size(), [&](std::size_t b) {
        auto r = rng.substream("boot" + std::to_string(b));
        std::vector<std::size_t> rows(n);
        for (auto& i : rows) i = static_cast<std::size_t>(r.below(n));
        const DesignMatrix xb = x.select_rows(rows);
        Eigen::VectorXd yb(static_cast<Eigen::Index>(n)), pb(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            yb[static_cast<Eigen::Index>(i)] = firm_value[static_cast<Eigen::Index>(rows[i])];
            pb[static_cast<Eigen::Index>(i)] = productivity[static_cast<Eigen::Index>(rows[i])];
        }
        try {
            const auto s1 = stage1_fit(xb, yb);
            const auto s2 = stage2_fit(xb, s1.residuals, pb);
            draws[b] = s2.coefficient(residual_column_name).estimate;
        } catch (const NumericalError&) {
            // Degenerate resample (e.g. a dummy with no variation); skipped.
        }
    });
    draws.erase(std::remove_if(draws.begin(), draws.end(), [](double v) { return std::isnan(v); }), draws.end());
    BootstrapSummary s;
    s.replicates = static_cast<int>(draws.size());
    if (draws.size() < 2) throw NumericalError("bootstrap produced fewer than two usable resamples");
    const double mean = std::accumulate(draws.begin(), draws.end(), 0.0) / static_cast<double>(draws.size());
    double ss = 0;
    for (double d : draws) ss += (d - mean) * (d - mean);
    s.std_error = std::sqrt(ss / static_cast<double>(draws.size() - 1));
    std::sort(draws.begin(), draws.end());
    auto quant = [&](double q) {
        const double pos = q * static_cast<double>(draws.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, draws.size() - 1);
        return draws[lo] + (pos - static_cast<double>(lo)) * (draws[hi] - draws[lo]);
    };
    s.lower = quant(alpha / 2.0);
    s.upper = quant(1.0 - alpha / 2.0);
    return s;
}

/// Both stages on one design; stage 2 is run on the supplied productivity score.
inline MoralHazardResult estimate_moral_hazard(const DesignMatrix& x, const Eigen::VectorXd& firm_value,
                                               const Eigen::VectorXd& productivity, const std::string& label,
                                               const HazardOptions& opts = {}, Policy subsample = Policy::all) {
    MoralHazardResult r;
    r.subsample = subsample;
    r.productivity = label;
    r.alpha = opts.alpha;
    r.stage1 = stage1_fit(x, firm_value);
    r.stage2 = stage2_fit(x, r.stage1.residuals, productivity, label);
    const auto c = r.stage2.coefficient(residual_column_name);
    r.delta_hat = c.estimate;
    r.delta_se = c.std_error;
    r.delta_p = c.p_value;
    r.significant = c.p_value < opts.alpha;
    if (opts.bootstrap > 0)
        r.bootstrap = bootstrap_delta(x, firm_value, productivity, opts.bootstrap, opts.alpha,
                                      RandomStream(opts.seed, "bootstrap/" + to_string(subsample) + "/" + label));
    return r;
}

/// Firm-value column of a completed dataset.
inline Eigen::VectorXd firm_value_column(const Dataset& d, const std::string& code = std::string(default_firm_value_code)) {
    const auto j = d.schema().find(code);
    if (!j) throw SchemaError("firm-value proxy column '" + code + "' is absent");
    if (!d.schema()[*j].is_numeric()) throw SchemaError("firm-value proxy '" + code + "' must be numeric");
    if (d.missing_count(*j) > 0) throw ConfigError("firm-value proxy '" + code + "' has missing cells; impute first");
    return Eigen::Map<const Eigen::VectorXd>(d.column(*j).data(), static_cast<Eigen::Index>(d.rows()));
}

struct SyntheticDeltaCheck {
    double delta_hat = 0;
    double std_error = 0;
    double p_value = 1;
    double lower = 0;
    double upper = 0;
    bool covered = false;
};

/// Simulates the two-equation model with known shocks, runs both stages and
/// reports whether the (1 - alpha) interval for delta covers the truth.
inline SyntheticDeltaCheck estimate_delta_synthetic_check(const ShockDecomposition& truth, std::size_t n, std::uint64_t seed,
                                                          double alpha = 0.05) {
    if (truth.sigma_xi2 < 0) throw ConfigError("sigma_xi^2 must be non-negative");
    ShockDecomposition::from_covariance(truth.sigma_v2, truth.sigma_eps2, truth.sigma_veps);
    if (n < 10) throw ConfigError("synthetic check needs at least 10 rows");
    const RandomStream root(seed, "delta-check");
    const std::vector<double> theta{1.0, 0.5, -0.3, 0.2};
    const std::vector<double> rho{0.0, 0.3, 0.1, -0.2};
    DesignMatrix x;
    x.has_intercept = true;
    x.names = {intercept_name, "x1", "x2", "x3"};
    x.x.resize(static_cast<Eigen::Index>(n), 4);
    x.x.col(0).setOnes();
    for (Eigen::Index c = 1; c < 4; ++c) {
        auto r = root.substream("x" + std::to_string(c));
        for (Eigen::Index i = 0; i < x.x.rows(); ++i) x.x(i, c) = r.normal();
    }
    const auto [eps, v] = draw_shocks(truth, n, root.substream("shocks"));
    const Eigen::VectorXd y = x.x * Eigen::Map<const Eigen::VectorXd>(theta.data(), 4) + eps;
    const Eigen::VectorXd p = x.x * Eigen::Map<const Eigen::VectorXd>(rho.data(), 4) + v;
    const auto s1 = stage1_fit(x, y);
    const auto s2 = stage2_fit(x, s1.residuals, p);
    const auto c = s2.coefficient(residual_column_name);
    SyntheticDeltaCheck out;
    out.delta_hat = c.estimate;
    out.std_error = c.std_error;
    out.p_value = c.p_value;
    const double half = t_quantile(1.0 - alpha / 2.0, s2.df_residual) * c.std_error;
    out.lower = c.estimate - half;
    out.upper = c.estimate + half;
    out.covered = out.lower <= truth.delta && truth.delta <= out.upper;
    return out;
}

/// OLS of wage on an intercept and every factor score, named by factor label.
inline RegressionFit wage_equation(const Eigen::VectorXd& wage, const FactorScores& scores) {
    if (wage.size() != scores.scores.rows())
        throw ConfigError("wage has " + std::to_string(wage.size()) + " rows, scores have " + std::to_string(scores.scores.rows()));
    DesignMatrix x;
    x.has_intercept = true;
    x.names.push_back(intercept_name);
    for (const auto& l : scores.labels) x.names.push_back(l);
    x.x.resize(wage.size(), static_cast<Eigen::Index>(x.names.size()));
    x.x.col(0).setOnes();
    x.x.rightCols(scores.scores.cols()) = scores.scores;
    return fit_ols(x, wage, "wage");
}

inline Eigen::VectorXd wage_column(const Dataset& d) {
    const auto wages = d.schema().with_role(VariableRole::wage);
    if (wages.empty()) throw SchemaError("schema has no wage variable");
    const std::size_t j = wages.front();
    if (d.missing_count(j) > 0) throw ConfigError("wage column '" + d.schema()[j].code + "' has missing cells; impute first");
    return Eigen::Map<const Eigen::VectorXd>(d.column(j).data(), static_cast<Eigen::Index>(d.rows()));
}

// ----------------------------------------------------------------- reports

/// One column of a multi-equation regression table, from a single fit or
/// pooled across imputations.
struct ReportColumn {
    std::string group;    // e.g. "Stage 1: firm_value"
    std::string heading;  // e.g. "(1) All"
    std::vector<std::string> names;
    std::vector<double> estimate, std_error, p_value;
    double residual_std_error = 0;
    int df_residual = 0;
    double r_squared = 0, adjusted_r_squared = 0;
    double f_statistic = 0, f_p_value = 1;
    int f_df1 = 0, f_df2 = 0;
    std::size_t n = 0;
    int m = 1;  // fits combined into this column
};

inline ReportColumn report_column(const RegressionFit& fit, std::string group, std::string heading) {
    ReportColumn c;
    c.group = std::move(group);
    c.heading = std::move(heading);
    c.names = fit.names;
    for (Eigen::Index k = 0; k < fit.coefficients.size(); ++k) {
        c.estimate.push_back(fit.coefficients[k]);
        c.std_error.push_back(fit.std_errors[k]);
        c.p_value.push_back(fit.p_values[k]);
    }
    c.residual_std_error = fit.residual_std_error;
    c.df_residual = fit.df_residual;
    c.r_squared = fit.r_squared;
    c.adjusted_r_squared = fit.adjusted_r_squared;
    c.f_statistic = fit.f_statistic;
    c.f_p_value = fit.f_p_value;
    c.f_df1 = fit.f_df1;
    c.f_df2 = fit.f_df2;
    c.n = fit.n;
    return c;
}

/// Rubin-pooled coefficients; fit statistics are averaged across imputations.
inline ReportColumn pooled_column(const std::vector<RegressionFit>& fits, std::string group, std::string heading) {
    if (fits.empty()) throw ConfigError("no fits to pool");
    ReportColumn c = report_column(fits.front(), std::move(group), std::move(heading));
    const auto m = static_cast<double>(fits.size());
    c.m = static_cast<int>(fits.size());
    for (std::size_t k = 0; k < c.names.size(); ++k) {
        std::vector<std::pair<double, double>> est;
        for (const auto& f : fits) {
            const auto co = f.coefficient(c.names[k]);
            est.emplace_back(co.estimate, co.std_error * co.std_error);
        }
        const auto pooled = pool_rubin(est, fits.front().df_residual);
        c.estimate[k] = pooled.estimate;
        c.std_error[k] = pooled.std_error();
        c.p_value[k] = pooled.p_value();
    }
    c.residual_std_error = c.r_squared = c.adjusted_r_squared = c.f_statistic = 0;
    for (const auto& f : fits) {
        c.residual_std_error += f.residual_std_error / m;
        c.r_squared += f.r_squared / m;
        c.adjusted_r_squared += f.adjusted_r_squared / m;
        c.f_statistic += f.f_statistic / m;
    }
    c.f_p_value = f_test_p_value(c.f_statistic, c.f_df1, c.f_df2);
    return c;
}

/// Rows are the union of coefficient names in first-appearance order; cells a
/// column lacks print as NA.
inline Table regression_table(const std::string& title, const std::vector<ReportColumn>& cols, int decimals = 3) {
    Table t{title, {"Variables"}, {}};
    std::vector<std::string> groups{""};
    bool any_group = false;
    for (const auto& c : cols) {
        t.header.push_back(c.heading);
        groups.push_back(c.group);
        any_group = any_group || !c.group.empty();
    }
    if (any_group) t.add_row(groups);
    std::vector<std::string> names;
    for (const auto& c : cols)
        for (const auto& n : c.names)
            if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
    // Keep the residual regressor directly after the intercept.
    if (auto it = std::find(names.begin(), names.end(), residual_column_name); it != names.end() && names.size() > 1) {
        names.erase(it);
        names.insert(names.begin() + 1, residual_column_name);
    }
    for (const auto& name : names) {
        std::vector<std::string> row{name};
        for (const auto& c : cols) {
            auto it = std::find(c.names.begin(), c.names.end(), name);
            if (it == c.names.end()) {
                row.push_back("NA");
                continue;
            }
            const auto k = static_cast<std::size_t>(it - c.names.begin());
            row.push_back(format_estimate(c.estimate[k], c.std_error[k], c.p_value[k], decimals));
        }
        t.add_row(std::move(row));
    }
    std::vector<std::string> rse{"Residual standard error (df)"}, r2{"Multiple R-squared (Adjusted)"}, f{"F-statistic (df)"},
        obs{"Observations"};
    for (const auto& c : cols) {
        rse.push_back(format_rse(c.residual_std_error, c.df_residual));
        r2.push_back(format_r2(c.r_squared, c.adjusted_r_squared));
        f.push_back(format_f(c.f_statistic, c.f_p_value, c.f_df1, c.f_df2));
        obs.push_back(format_grouped(static_cast<double>(c.n)));
    }
    t.add_row(std::move(rse));
    t.add_row(std::move(r2));
    t.add_row(std::move(f));
    t.add_row(std::move(obs));
    return t;
}

}  // namespace lh
