#pragma once

// Ordinary least squares with classical inference. Shared by the firm-value,
// productivity, and wage equations.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "latent_hazard/dataset.hpp"
#include "latent_hazard/error.hpp"
#include "latent_hazard/table.hpp"

namespace lh {

/// Singular values of the design below this fraction of the largest count as zero.
inline constexpr double collinearity_tolerance = 1e-10;

struct Coefficient {
    std::string name;
    double estimate = 0, std_error = 0, t_stat = 0, p_value = 0;
};

struct RegressionFit {
    std::string response;
    std::vector<std::string> names;
    Eigen::VectorXd coefficients;
    Eigen::VectorXd std_errors;
    Eigen::VectorXd t_stats;
    Eigen::VectorXd p_values;
    Eigen::VectorXd residuals;
    Eigen::VectorXd fitted;
    Eigen::MatrixXd cov_unscaled;  // (X'X)^-1
    double r_squared = 0;
    double adjusted_r_squared = 0;
    double f_statistic = std::numeric_limits<double>::quiet_NaN();
    int f_df1 = 0;
    int f_df2 = 0;
    double f_p_value = std::numeric_limits<double>::quiet_NaN();
    double residual_std_error = 0;
    int df_residual = 0;
    std::size_t n = 0;
    bool has_intercept = false;

    std::optional<std::size_t> find(std::string_view name) const {
        for (std::size_t k = 0; k < names.size(); ++k)
            if (names[k] == name) return k;
        return std::nullopt;
    }

    Coefficient coefficient(std::string_view name) const {
        auto k = find(name);
        if (!k) throw ConfigError("regression has no coefficient named '" + std::string(name) + "'");
        const auto i = static_cast<Eigen::Index>(*k);
        return {names[*k], coefficients[i], std_errors[i], t_stats[i], p_values[i]};
    }
};

/// Two-sided p-value of a t statistic.
inline double t_test_p_value(double t, double df) {
    if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
    if (std::isinf(t)) return 0.0;
    if (!(df > 0)) return std::numeric_limits<double>::quiet_NaN();
    if (std::isinf(df)) df = 1e12;
    boost::math::students_t dist(df);
    return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

inline double t_quantile(double prob, double df) {
    if (std::isinf(df) || df > 1e12) df = 1e12;
    boost::math::students_t dist(df);
    return boost::math::quantile(dist, prob);
}

inline double f_test_p_value(double f, int df1, int df2) {
    if (!(f >= 0) || df1 <= 0 || df2 <= 0) return std::numeric_limits<double>::quiet_NaN();
    if (std::isinf(f)) return 0.0;
    boost::math::fisher_f dist(df1, df2);
    return boost::math::cdf(boost::math::complement(dist, f));
}

namespace detail {

/// Names of the columns that carry the near-null direction of R.
inline std::string dependent_columns(const Eigen::MatrixXd& r, const std::vector<std::string>& names) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(r, Eigen::ComputeFullV);
    const Eigen::VectorXd v = svd.matrixV().col(r.cols() - 1);
    const double biggest = v.cwiseAbs().maxCoeff();
    std::string out;
    for (Eigen::Index k = 0; k < v.size(); ++k) {
        if (std::fabs(v[k]) < 1e-6 * biggest) continue;
        if (!out.empty()) out += ", ";
        out += names[static_cast<std::size_t>(k)];
    }
    return out;
}

}  // namespace detail

/// Least squares via Householder QR. Classical (homoskedastic) standard errors.
inline RegressionFit fit_ols(const DesignMatrix& x, const Eigen::VectorXd& y, std::string response = "y") {
    const Eigen::Index n = x.rows();
    const Eigen::Index k = x.cols();
    if (y.size() != n)
        throw ConfigError("response '" + response + "' has " + std::to_string(y.size()) + " rows, design has " +
                          std::to_string(n));
    if (k == 0) throw ConfigError("design matrix has no columns");
    if (n <= k)
        throw NumericalError("insufficient data for '" + response + "': " + std::to_string(n) + " rows for " +
                             std::to_string(k) + " coefficients");
    if (!x.x.allFinite() || !y.allFinite()) throw NumericalError("non-finite values in regression of '" + response + "'");

    Eigen::HouseholderQR<Eigen::MatrixXd> qr(x.x);
    const Eigen::MatrixXd r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
    const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(r).singularValues();
    if (sv[k - 1] <= collinearity_tolerance * sv[0])
        throw NumericalError("rank-deficient design for '" + response + "'; dependent columns: " +
                             detail::dependent_columns(r, x.names));

    RegressionFit fit;
    fit.response = std::move(response);
    fit.names = x.names;
    fit.n = static_cast<std::size_t>(n);
    fit.has_intercept = x.has_intercept;
    fit.coefficients = qr.solve(y);
    fit.fitted = x.x * fit.coefficients;
    fit.residuals = y - fit.fitted;

    const Eigen::MatrixXd r_inv =
        r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(k, k));
    fit.cov_unscaled = r_inv * r_inv.transpose();

    fit.df_residual = static_cast<int>(n - k);
    const double ssr = fit.residuals.squaredNorm();
    const double sigma2 = ssr / fit.df_residual;
    fit.residual_std_error = std::sqrt(sigma2);
    fit.std_errors = (sigma2 * fit.cov_unscaled.diagonal()).cwiseSqrt();
    fit.t_stats = fit.coefficients.cwiseQuotient(fit.std_errors);
    fit.p_values.resize(k);
    for (Eigen::Index j = 0; j < k; ++j) fit.p_values[j] = t_test_p_value(fit.t_stats[j], fit.df_residual);

    const double sst = fit.has_intercept ? (y.array() - y.mean()).square().sum() : y.squaredNorm();
    fit.r_squared = sst > 0 ? 1.0 - ssr / sst : 1.0;
    const double denom_n = fit.has_intercept ? static_cast<double>(n - 1) : static_cast<double>(n);
    fit.adjusted_r_squared = 1.0 - (1.0 - fit.r_squared) * denom_n / fit.df_residual;
    fit.f_df1 = static_cast<int>(fit.has_intercept ? k - 1 : k);
    fit.f_df2 = fit.df_residual;
    if (fit.f_df1 > 0) {
        fit.f_statistic = ssr > 0 ? ((sst - ssr) / fit.f_df1) / sigma2 : std::numeric_limits<double>::infinity();
        fit.f_p_value = f_test_p_value(fit.f_statistic, fit.f_df1, fit.f_df2);
    }
    return fit;
}

/// x * coefficients, with x's columns matched to the fit by name.
inline Eigen::VectorXd predict(const RegressionFit& fit, const DesignMatrix& x) {
    if (static_cast<std::size_t>(x.cols()) != fit.names.size()) {
        for (const auto& name : x.names)
            if (!fit.find(name)) throw ConfigError("design column '" + name + "' is not a coefficient of the fit");
    }
    Eigen::VectorXd out = Eigen::VectorXd::Zero(x.rows());
    for (std::size_t k = 0; k < fit.names.size(); ++k) {
        auto col = x.find(fit.names[k]);
        if (!col) throw ConfigError("design is missing column '" + fit.names[k] + "' required by the fit");
        out += fit.coefficients[static_cast<Eigen::Index>(k)] * x.x.col(*col);
    }
    return out;
}

// ---------------------------------------------------------------- reports

inline std::string format_significant(double x, int digits = 4) {
    if (std::isnan(x)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, x);
    return buf;
}

inline std::string format_rse(double rse, int df) { return format_fixed(rse, 3) + " (" + format_grouped(df) + ")"; }

inline std::string format_r2(double r2, double adj) { return format_fixed(r2, 3) + " (" + format_fixed(adj, 3) + ")"; }

inline std::string format_f(double f, double p, int df1, int df2) {
    return format_significant(f) + significance_stars(p) + " (" + std::to_string(df1) + ", " + format_grouped(df2) + ")";
}

/// Single-equation table: one row per coefficient, then fit statistics.
inline Table coefficient_table(const RegressionFit& fit, const std::string& title = "") {
    Table t{title, {"Variables", "Estimates (Std. Error)"}, {}};
    for (std::size_t k = 0; k < fit.names.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        t.add_row({fit.names[k], format_estimate(fit.coefficients[i], fit.std_errors[i], fit.p_values[i])});
    }
    t.add_row({"Residual standard error (df)", format_rse(fit.residual_std_error, fit.df_residual)});
    t.add_row({"Multiple R-squared (Adjusted)", format_r2(fit.r_squared, fit.adjusted_r_squared)});
    t.add_row({"F-statistic (df)", format_f(fit.f_statistic, fit.f_p_value, fit.f_df1, fit.f_df2)});
    t.add_row({"Observations", format_grouped(static_cast<double>(fit.n))});
    return t;
}

}  // namespace lh
