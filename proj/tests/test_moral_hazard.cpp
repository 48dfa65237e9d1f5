#include <gtest/gtest.h>

#include <cmath>

#include "latent_hazard/latent_hazard.hpp"
#include "test_support.hpp"

using namespace lh;

namespace {

DesignMatrix normal_design(std::size_t n, int k, std::uint64_t seed) {
    const RandomStream rng(seed, "design");
    DesignMatrix x;
    x.has_intercept = true;
    x.names.push_back(intercept_name);
    x.x.resize(static_cast<Eigen::Index>(n), k);
    x.x.col(0).setOnes();
    for (int c = 1; c < k; ++c) {
        x.names.push_back("x" + std::to_string(c));
        auto r = rng.substream("x" + std::to_string(c));
        for (Eigen::Index i = 0; i < x.x.rows(); ++i) x.x(i, c) = r.normal();
    }
    return x;
}

FactorScores two_scores(const Eigen::MatrixXd& s) {
    FactorScores fs;
    fs.scores = s;
    fs.labels = {"efficiency", "competence"};
    return fs;
}

}  // namespace

TEST(Shocks, DecompositionIdentity) {
    RandomStream rng(3, "shocks");
    for (int r = 0; r < 200; ++r) {
        const double se2 = 0.1 + 3.0 * rng.uniform();
        const double sv2 = 0.1 + 3.0 * rng.uniform();
        const double corr = 2.0 * rng.uniform() - 1.0;
        const auto s = ShockDecomposition::from_covariance(sv2, se2, corr * std::sqrt(sv2 * se2));
        EXPECT_NEAR(s.sigma_xi2 + s.delta * s.delta * s.sigma_eps2, s.sigma_v2, 1e-12);
        EXPECT_GE(s.sigma_xi2, 0.0);
        const auto back = ShockDecomposition::from_delta(s.delta, s.sigma_eps2, s.sigma_xi2);
        EXPECT_NEAR(back.sigma_veps, s.sigma_veps, 1e-12);
        EXPECT_NEAR(back.sigma_v2, s.sigma_v2, 1e-12);
    }
    EXPECT_EQ(ShockDecomposition::from_covariance(1.0, 2.0, 0.0).delta, 0.0);
    EXPECT_NE(ShockDecomposition::from_covariance(1.0, 2.0, 0.1).delta, 0.0);
    EXPECT_DOUBLE_EQ(ShockDecomposition::from_covariance(1.0, 2.0, -0.3).delta, -0.15);
}

TEST(Shocks, InvalidCovarianceRejected) {
    EXPECT_THROW(ShockDecomposition::from_covariance(0.1, 1.0, 1.0), ConfigError);
    EXPECT_THROW(ShockDecomposition::from_covariance(1.0, 0.0, 0.0), ConfigError);
    EXPECT_THROW(ShockDecomposition::from_covariance(-1.0, 1.0, 0.0), ConfigError);
    EXPECT_THROW(ShockDecomposition::from_delta(0.5, 1.0, -0.1), ConfigError);
    ShockDecomposition bad;
    bad.sigma_v2 = 0.1;
    bad.sigma_eps2 = 1.0;
    bad.sigma_veps = 1.0;
    bad.delta = 1.0;
    EXPECT_THROW(estimate_delta_synthetic_check(bad, 100, 1), ConfigError);
}

TEST(DeltaCheck, RecoversGeneratorDelta) {
    const auto half = estimate_delta_synthetic_check(ShockDecomposition::from_covariance(1.0, 1.0, 0.5), 50000, 1);
    EXPECT_GE(half.delta_hat, 0.48);
    EXPECT_LE(half.delta_hat, 0.52);

    const auto zero = estimate_delta_synthetic_check(ShockDecomposition::from_covariance(1.0, 1.0, 0.0), 50000, 2);
    EXPECT_LE(std::fabs(zero.delta_hat), 2.0 * zero.std_error);

    const auto negative = estimate_delta_synthetic_check(ShockDecomposition::from_covariance(1.0, 2.0, -0.3), 50000, 3);
    EXPECT_NEAR(negative.delta_hat, -0.15, 0.02);
    EXPECT_LT(negative.lower, negative.upper);
}

TEST(DeltaCheck, SizeUnderNoHazard) {
    const auto truth = ShockDecomposition::from_covariance(1.0, 1.0, 0.0);
    int rejections = 0;
    for (int r = 0; r < 500; ++r) rejections += estimate_delta_synthetic_check(truth, 2000, 10000 + r).p_value < 0.05;
    const double rate = rejections / 500.0;
    EXPECT_GE(rate, 0.03);
    EXPECT_LE(rate, 0.08);
}

TEST(DeltaCheck, SignConsistency) {
    for (double cov : {0.3, -0.3}) {
        const auto truth = ShockDecomposition::from_covariance(1.0, 1.0, cov);
        int agree = 0;
        for (int r = 0; r < 100; ++r) agree += std::signbit(estimate_delta_synthetic_check(truth, 10000, 20000 + r).delta_hat) == (cov < 0);
        EXPECT_GE(agree, 95) << "sigma_veps " << cov;
    }
}

TEST(DeltaCheck, Deterministic) {
    const auto truth = ShockDecomposition::from_covariance(1.0, 1.0, 0.2);
    EXPECT_EQ(estimate_delta_synthetic_check(truth, 500, 7).delta_hat, estimate_delta_synthetic_check(truth, 500, 7).delta_hat);
    EXPECT_NE(estimate_delta_synthetic_check(truth, 500, 7).delta_hat, estimate_delta_synthetic_check(truth, 500, 8).delta_hat);
}

TEST(Stages, ExactFirmValueLeavesZeroResiduals) {
    const DesignMatrix x = normal_design(200, 4, 1);
    const Eigen::VectorXd y = x.x * Eigen::Vector4d(2.0, 1.0, -0.5, 0.25);
    const auto s1 = stage1_fit(x, y);
    EXPECT_LT(s1.residuals.cwiseAbs().maxCoeff(), 1e-10);
    const auto oracle = fit_ols(x, y, "firm_value");
    EXPECT_EQ(s1.coefficients, oracle.coefficients);
}

TEST(Stages, SecondStageAddsResidualColumn) {
    const DesignMatrix x = normal_design(300, 3, 2);
    RandomStream rng(5, "stage");
    Eigen::VectorXd y(300), p(300);
    for (Eigen::Index i = 0; i < 300; ++i) {
        const double e = rng.normal();
        y[i] = 1.0 + x.x(i, 1) + e;
        p[i] = 0.5 * x.x(i, 2) + 0.4 * e + rng.normal();
    }
    const auto r = estimate_moral_hazard(x, y, p, "efficiency");
    ASSERT_EQ(r.stage2.names.size(), x.names.size() + 1);
    for (std::size_t k = 0; k < x.names.size(); ++k) EXPECT_EQ(r.stage2.names[k], x.names[k]);
    EXPECT_EQ(r.stage2.names.back(), residual_column_name);
    EXPECT_EQ(r.delta_hat, r.stage2.coefficient(residual_column_name).estimate);
    EXPECT_EQ(r.significant, r.delta_p < 0.05);
    EXPECT_EQ(r.verdict(), r.significant ? "significant" : "not significant");

    // The residual regressor is exactly stage-1's residual vector.
    const auto direct = fit_ols(x.with_column(residual_column_name, r.stage1.residuals), p, "efficiency");
    EXPECT_EQ(direct.coefficients, r.stage2.coefficients);

    // Orthogonality: the X block equals the regression of P - delta eps-hat on X.
    const auto adjusted = fit_ols(x, p - r.delta_hat * r.stage1.residuals);
    for (Eigen::Index k = 0; k < x.x.cols(); ++k) EXPECT_NEAR(r.stage2.coefficients[k], adjusted.coefficients[k], 1e-8);

    EXPECT_THROW(stage2_fit(x, r.stage1.residuals.head(10), p), ConfigError);
    EXPECT_THROW(stage2_fit(x, r.stage1.residuals, p.head(10)), ConfigError);
}

TEST(Stages, HazardDatasetRecoversDelta) {
    GeneratorConfig cfg;
    cfg.n = 20000;
    cfg.seed = 4;
    cfg.hazard = ShockDecomposition::from_covariance(1.0, 1.0, 0.5);
    const auto sample = simulate_hazard(cfg);
    const Dataset& d = sample.data;
    const DesignMatrix x = encode(d, EncodeOptions{HazardOptions{}.covariate_roles});
    EXPECT_EQ(x.names, (std::vector<std::string>{intercept_name, "x1", "x2", "gender_Male"}));
    const auto p = Eigen::Map<const Eigen::VectorXd>(d.column("productivity").data(), static_cast<Eigen::Index>(d.rows()));
    const auto r = estimate_moral_hazard(x, firm_value_column(d), p, "productivity");
    EXPECT_NEAR(r.delta_hat, 0.5, 3.0 * r.delta_se);
    EXPECT_TRUE(r.significant);
    EXPECT_THROW(firm_value_column(d, "absent"), SchemaError);
}

TEST(Stages, PolicySubsamplesAreDisjoint) {
    GeneratorConfig cfg;
    cfg.n = 900;
    const Dataset d = gen_hazard_data(cfg);
    const auto on = policy_rows(d, Policy::on_site), remote = policy_rows(d, Policy::fully_remote);
    std::vector<std::size_t> both;
    std::set_intersection(on.begin(), on.end(), remote.begin(), remote.end(), std::back_inserter(both));
    EXPECT_TRUE(both.empty());
    EXPECT_EQ(on.size() + remote.size() + policy_rows(d, Policy::hybrid).size(), d.rows());
}

TEST(Bootstrap, AgreesWithOlsAndIsDeterministic) {
    const DesignMatrix x = normal_design(1500, 3, 6);
    RandomStream rng(6, "boot-data");
    Eigen::VectorXd y(1500), p(1500);
    for (Eigen::Index i = 0; i < 1500; ++i) {
        const double e = rng.normal();
        y[i] = x.x(i, 1) + e;
        p[i] = 0.3 * e + rng.normal();
    }
    HazardOptions o;
    o.bootstrap = 300;
    o.seed = 12;
    const auto a = estimate_moral_hazard(x, y, p, "efficiency", o);
    const auto b = estimate_moral_hazard(x, y, p, "efficiency", o);
    ASSERT_TRUE(a.bootstrap.has_value());
    EXPECT_EQ(a.bootstrap->replicates, 300);
    EXPECT_EQ(a.bootstrap->std_error, b.bootstrap->std_error);
    EXPECT_NEAR(a.bootstrap->std_error / a.delta_se, 1.0, 0.2);
    EXPECT_LT(a.bootstrap->lower, a.delta_hat);
    EXPECT_GT(a.bootstrap->upper, a.delta_hat);
}

TEST(Wage, ExactConstruction) {
    RandomStream rng(8, "wage");
    Eigen::MatrixXd s(100, 2);
    for (Eigen::Index i = 0; i < 100; ++i) s.row(i) << rng.normal(), rng.normal();
    const Eigen::VectorXd wage = (1.0 + 0.5 * s.col(0).array()).matrix();
    const auto fit = wage_equation(wage, two_scores(s));
    EXPECT_EQ(fit.names, (std::vector<std::string>{intercept_name, "efficiency", "competence"}));
    EXPECT_NEAR(fit.coefficients[0], 1.0, 1e-12);
    EXPECT_NEAR(fit.coefficients[1], 0.5, 1e-12);
    EXPECT_NEAR(fit.coefficients[2], 0.0, 1e-12);
    EXPECT_NEAR(fit.r_squared, 1.0, 1e-12);
    EXPECT_THROW(wage_equation(wage.head(50), two_scores(s)), ConfigError);
}

TEST(Wage, RecoversGeneratorCoefficients) {
    RandomStream rng(9, "wage-noise");
    Eigen::MatrixXd s(3000, 2);
    Eigen::VectorXd wage(3000);
    for (Eigen::Index i = 0; i < 3000; ++i) {
        s.row(i) << rng.normal(), rng.normal();
        wage[i] = 4.5 + 0.15 * s(i, 0) + 0.05 * s(i, 1) + 0.7 * rng.normal();
    }
    const auto fit = wage_equation(wage, two_scores(s));
    const double truth[] = {4.5, 0.15, 0.05};
    for (int k = 0; k < 3; ++k) EXPECT_LE(std::fabs(fit.coefficients[k] - truth[k]), 2.0 * fit.std_errors[k]) << k;

    Dataset none(Schema({continuous_spec("x", VariableRole::demographic)}), 3);
    EXPECT_THROW(wage_column(none), SchemaError);
}

TEST(Reports, RegressionTableLayout) {
    const DesignMatrix x = normal_design(120, 3, 10);
    RandomStream rng(10, "table");
    Eigen::VectorXd y(120), p(120);
    for (Eigen::Index i = 0; i < 120; ++i) {
        y[i] = x.x(i, 1) + rng.normal();
        p[i] = rng.normal();
    }
    const auto r = estimate_moral_hazard(x, y, p, "efficiency");
    const std::vector<ReportColumn> cols{report_column(r.stage1, "Firm value", "(1) All"),
                                         report_column(r.stage2, "Efficiency", "(2) All")};
    const Table t = regression_table("Two-stage", cols);
    EXPECT_EQ(t.header, (std::vector<std::string>{"Variables", "(1) All", "(2) All"}));
    EXPECT_EQ(t.rows[0], (std::vector<std::string>{"", "Firm value", "Efficiency"}));
    EXPECT_EQ(t.rows[1][0], intercept_name);
    EXPECT_EQ(t.rows[2][0], residual_column_name);
    EXPECT_EQ(t.rows[2][1], "NA");
    EXPECT_EQ(t.rows.back()[0], "Observations");
    EXPECT_EQ(t.rows.back()[1], "120");
    EXPECT_EQ(t.rows.size(), 1u + 4u + 4u);
}

TEST(Reports, PooledColumnUsesRubinsRules) {
    const DesignMatrix x = normal_design(80, 2, 11);
    std::vector<RegressionFit> fits;
    for (int m = 0; m < 3; ++m) {
        RandomStream rng(11, "pool" + std::to_string(m));
        Eigen::VectorXd y(80);
        for (Eigen::Index i = 0; i < 80; ++i) y[i] = 1.0 + x.x(i, 1) + rng.normal();
        fits.push_back(fit_ols(x, y));
    }
    const auto col = pooled_column(fits, "", "pooled");
    std::vector<std::pair<double, double>> est;
    for (const auto& f : fits) est.emplace_back(f.coefficients[1], f.std_errors[1] * f.std_errors[1]);
    const auto oracle = pool_rubin(est, fits.front().df_residual);
    EXPECT_DOUBLE_EQ(col.estimate[1], oracle.estimate);
    EXPECT_DOUBLE_EQ(col.std_error[1], oracle.std_error());
    EXPECT_EQ(col.m, 3);
    EXPECT_NEAR(col.r_squared, (fits[0].r_squared + fits[1].r_squared + fits[2].r_squared) / 3.0, 1e-15);
    EXPECT_THROW(pooled_column({}, "", ""), ConfigError);
}
