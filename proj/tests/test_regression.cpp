#include <gtest/gtest.h>

#include <cmath>

#include "latent_hazard/latent_hazard.hpp"
#include "test_support.hpp"

using namespace lh;

namespace {

DesignMatrix random_design(RandomStream& rng, Eigen::Index n, Eigen::Index k) {
    DesignMatrix x;
    x.has_intercept = true;
    x.names.push_back(intercept_name);
    x.x.resize(n, k);
    x.x.col(0).setOnes();
    for (Eigen::Index c = 1; c < k; ++c) {
        x.names.push_back("x" + std::to_string(c));
        const double scale = std::exp(2.0 * rng.normal());
        for (Eigen::Index i = 0; i < n; ++i) x.x(i, c) = scale * rng.normal();
    }
    return x;
}

}  // namespace

TEST(Ols, MatchesNormalEquationsOnRandomInstances) {
    RandomStream rng(2024, "ols-oracle");
    for (int rep = 0; rep < 100; ++rep) {
        const auto n = static_cast<Eigen::Index>(20 + rng.below(200));
        const auto k = static_cast<Eigen::Index>(2 + rng.below(8));
        const DesignMatrix x = random_design(rng, n, k);
        Eigen::VectorXd y(n);
        for (Eigen::Index i = 0; i < n; ++i) y[i] = rng.normal();
        y += x.x * Eigen::VectorXd::LinSpaced(k, -1.0, 2.0);
        const auto fit = fit_ols(x, y);
        const Eigen::VectorXd oracle = lh_test::normal_equations(x.x, y);
        for (Eigen::Index j = 0; j < k; ++j)
            EXPECT_NEAR(fit.coefficients[j], oracle[j], 1e-8 * std::max(1.0, std::fabs(oracle[j]))) << "rep " << rep;
    }
}

TEST(Ols, StandardErrorsAndFitStatisticsMatchTextbookFormulas) {
    RandomStream rng(7, "ols-stats");
    const DesignMatrix x = random_design(rng, 150, 4);
    Eigen::VectorXd y(150);
    for (Eigen::Index i = 0; i < y.size(); ++i) y[i] = 1.0 + 0.5 * x.x(i, 1) + rng.normal();
    const auto fit = fit_ols(x, y);

    const Eigen::MatrixXd xtx_inv = (x.x.transpose() * x.x).inverse();
    const Eigen::VectorXd resid = y - x.x * lh_test::normal_equations(x.x, y);
    const double s2 = resid.squaredNorm() / (150 - 4);
    for (Eigen::Index j = 0; j < 4; ++j) EXPECT_NEAR(fit.std_errors[j], std::sqrt(s2 * xtx_inv(j, j)), 1e-10);
    const double sst = (y.array() - y.mean()).square().sum();
    EXPECT_NEAR(fit.r_squared, 1.0 - resid.squaredNorm() / sst, 1e-12);
    EXPECT_NEAR(fit.adjusted_r_squared, 1.0 - (1.0 - fit.r_squared) * 149.0 / 146.0, 1e-12);
    EXPECT_NEAR(fit.f_statistic, ((sst - resid.squaredNorm()) / 3.0) / s2, 1e-8);
    EXPECT_EQ(fit.df_residual, 146);
    EXPECT_EQ(fit.f_df1, 3);
    EXPECT_NEAR(fit.residuals.sum(), 0.0, 1e-9);
}

TEST(Ols, RankDeficientDesignNamesColumns) {
    RandomStream rng(1, "rank");
    DesignMatrix x = random_design(rng, 50, 3);
    x = x.with_column("dup", 2.0 * x.x.col(1));
    Eigen::VectorXd y = Eigen::VectorXd::Ones(50);
    try {
        fit_ols(x, y);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("dup"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("x1"), std::string::npos);
    }
}

TEST(Ols, TooFewRowsAndNonFinite) {
    RandomStream rng(1, "small");
    const DesignMatrix x = random_design(rng, 3, 3);
    EXPECT_THROW(fit_ols(x, Eigen::VectorXd::Ones(3)), NumericalError);
    const DesignMatrix y = random_design(rng, 10, 2);
    Eigen::VectorXd v = Eigen::VectorXd::Ones(10);
    v[3] = std::nan("");
    EXPECT_THROW(fit_ols(y, v), NumericalError);
    EXPECT_THROW(fit_ols(y, Eigen::VectorXd::Ones(9)), ConfigError);
}

TEST(Ols, ExactFitAndPredict) {
    RandomStream rng(9, "exact");
    const DesignMatrix x = random_design(rng, 30, 3);
    const Eigen::Vector3d beta(1.0, -2.0, 0.25);
    const Eigen::VectorXd y = x.x * beta;
    const auto fit = fit_ols(x, y);
    EXPECT_NEAR(fit.r_squared, 1.0, 1e-12);
    EXPECT_LT((predict(fit, x) - y).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Distributions, TailProbabilitiesAreConsistent) {
    EXPECT_NEAR(t_test_p_value(t_quantile(0.975, 10), 10), 0.05, 1e-12);
    EXPECT_NEAR(t_quantile(0.975, 10), 2.228138851986, 1e-9);
    EXPECT_NEAR(t_test_p_value(1.959963984540054, std::numeric_limits<double>::infinity()), 0.05, 1e-9);
    EXPECT_NEAR(f_test_p_value(1.0, 1, 1), 0.5, 1e-12);
    EXPECT_DOUBLE_EQ(t_test_p_value(std::numeric_limits<double>::infinity(), 5), 0.0);
}

TEST(Formatting, WageTableCellsFollowPublishedLayout) {
    EXPECT_EQ(format_estimate(4.565, 0.006, 1e-20), "4.565*** (0.006)");
    EXPECT_EQ(format_estimate(0.052, 0.007, 1e-12), "0.052*** (0.007)");
    EXPECT_EQ(format_estimate(-0.629, 0.342, 0.066), "-0.629* (0.342)");
    EXPECT_EQ(format_estimate(2.163, 0.947, 0.022), "2.163** (0.947)");
    EXPECT_EQ(format_estimate(0.0001, 0.0002, 0.6), "0.000 (0.000)");
    EXPECT_EQ(format_rse(0.703, 13918), "0.703 (13,918)");
    EXPECT_EQ(format_r2(0.044, 0.044), "0.044 (0.044)");
    EXPECT_EQ(format_f(323.2, 1e-100, 2, 13918), "323.2*** (2, 13,918)");
    EXPECT_EQ(format_fixed(-0.0001, 3), "0.000");
}

TEST(Formatting, CoefficientTableRows) {
    RandomStream rng(4, "table");
    const DesignMatrix x = random_design(rng, 40, 2);
    Eigen::VectorXd y(40);
    for (Eigen::Index i = 0; i < 40; ++i) y[i] = x.x(i, 1) + rng.normal();
    const Table t = coefficient_table(fit_ols(x, y), "Wage");
    ASSERT_EQ(t.rows.size(), 6u);
    EXPECT_EQ(t.rows[0][0], intercept_name);
    EXPECT_EQ(t.rows[2][0], "Residual standard error (df)");
    EXPECT_EQ(t.rows[5][1], "40");
}
