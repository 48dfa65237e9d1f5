#pragma once

// Ground-truth generators: factor data, two-equation hazard data, missingness
// mechanisms, and a survey-shaped fixture for the full pipeline.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "latent_hazard/dataset.hpp"
#include "latent_hazard/error.hpp"
#include "latent_hazard/moral_hazard.hpp"
#include "latent_hazard/random.hpp"

namespace lh {

/// Y = M lambda + X beta + E with X ~ N(0, I_p), E_j ~ N(0, omega_j).
struct FactorTruth {
    std::vector<std::string> codes;
    Eigen::MatrixXd beta;    // p x q
    Eigen::VectorXd omega;   // q
    Eigen::VectorXd lambda;  // q intercepts

    int p() const { return static_cast<int>(beta.rows()); }
    int q() const { return static_cast<int>(beta.cols()); }

    Eigen::MatrixXd covariance() const {
        Eigen::MatrixXd s = beta.transpose() * beta;
        s.diagonal() += omega;
        return s;
    }

    void validate() const {
        if (static_cast<int>(codes.size()) != q()) throw ConfigError("factor truth: one code per column of beta");
        if (omega.size() != q() || lambda.size() != q()) throw ConfigError("factor truth: omega and lambda need q entries");
        if ((omega.array() < 0).any()) throw ConfigError("factor truth: uniquenesses must be non-negative");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["codes"] = codes;
        std::vector<std::vector<double>> b(static_cast<std::size_t>(p()));
        for (int i = 0; i < p(); ++i)
            for (int k = 0; k < q(); ++k) b[static_cast<std::size_t>(i)].push_back(beta(i, k));
        j["beta"] = b;
        j["omega"] = std::vector<double>(omega.data(), omega.data() + omega.size());
        j["lambda"] = std::vector<double>(lambda.data(), lambda.data() + lambda.size());
        return j;
    }
};

inline const std::vector<std::string>& component_codes() {
    static const std::vector<std::string> codes{"wfh_eff_COVID_quant", "wfh_expect_quant",    "wfh_extraeff_comm_quant",
                                                "extratime_1stjob",    "prom_eff_1day_quant", "prom_eff_5day_quant"};
    return codes;
}

/// Six unit-variance components with simple two-factor structure.
inline FactorTruth two_factor_truth() {
    FactorTruth t;
    t.codes = component_codes();
    t.beta = Eigen::MatrixXd::Zero(2, 6);
    t.beta.row(0) << 0.9, 0.8, 0.8, 0.0, 0.0, 0.0;
    t.beta.row(1) << 0.0, 0.0, 0.0, 0.6, 0.9, 0.85;
    t.omega = (Eigen::VectorXd::Ones(6) - t.beta.colwise().squaredNorm().transpose());
    t.lambda = Eigen::VectorXd::Zero(6);
    return t;
}

enum class MissingMechanism { none, mcar, mar, mnar };

inline MissingMechanism parse_mechanism(const std::string& s) {
    if (s == "none") return MissingMechanism::none;
    if (s == "mcar") return MissingMechanism::mcar;
    if (s == "mar") return MissingMechanism::mar;
    if (s == "mnar") return MissingMechanism::mnar;
    throw ConfigError("unknown missingness mechanism '" + s + "'");
}

struct MissingnessSpec {
    MissingMechanism mechanism = MissingMechanism::none;
    double rate = 0.0;   // MCAR probability; baseline probability for MAR/MNAR
    std::string driver;  // MAR: fully observed numeric column
    double slope = 0.0;  // MAR/MNAR: logistic slope per standard deviation
    std::vector<std::string> targets;  // empty: every column except `exempt` and the driver
    std::vector<std::string> exempt;
};

struct GeneratorConfig {
    std::size_t n = 1000;
    std::uint64_t seed = 1;
    FactorTruth factor = two_factor_truth();
    ShockDecomposition hazard = ShockDecomposition::from_covariance(1.0, 1.0, 0.5);
    std::map<Policy, ShockDecomposition> hazard_by_policy;  // overrides `hazard` per subsample
    MissingnessSpec missingness;

    const ShockDecomposition& hazard_for(Policy p) const {
        auto it = hazard_by_policy.find(p);
        return it == hazard_by_policy.end() ? hazard : it->second;
    }
};

inline Dataset gen_factor_data(const GeneratorConfig& cfg) {
    const FactorTruth& t = cfg.factor;
    t.validate();
    const RandomStream root(cfg.seed, "factor");
    std::vector<VariableSpec> specs;
    for (const auto& c : t.codes) specs.push_back(continuous_spec(c, VariableRole::productivity_component));
    Dataset d(Schema(std::move(specs)), cfg.n);
    const auto n = static_cast<Eigen::Index>(cfg.n);
    Eigen::MatrixXd x(n, t.p());
    for (int f = 0; f < t.p(); ++f) {
        auto r = root.substream("x" + std::to_string(f));
        for (Eigen::Index i = 0; i < n; ++i) x(i, f) = r.normal();
    }
    const Eigen::MatrixXd y = x * t.beta;
    for (int j = 0; j < t.q(); ++j) {
        auto r = root.substream("e/" + t.codes[static_cast<std::size_t>(j)]);
        const double sd = std::sqrt(t.omega[j]);
        for (Eigen::Index i = 0; i < n; ++i)
            d.set(static_cast<std::size_t>(i), static_cast<std::size_t>(j), t.lambda[j] + y(i, j) + sd * r.normal());
    }
    d.provenance().source = "synthetic:factor seed=" + std::to_string(cfg.seed);
    return d;
}

inline VariableSpec policy_key_spec() {
    return categorical_spec(std::string(policy_key_code), VariableRole::policy_key,
                            {{"1", "Fully on-site"}, {"2", "Hybrid"}, {"3", "Fully remote"}}, 0);
}

inline VariableSpec gender_spec() {
    return categorical_spec("gender", VariableRole::demographic, {{"Female", "Female"}, {"Male", "Male"}}, 0);
}

inline Policy policy_of_index(int k) { return k == 0 ? Policy::on_site : k == 1 ? Policy::hybrid : Policy::fully_remote; }

struct HazardSample {
    Dataset data;
    Eigen::VectorXd eps;
    Eigen::VectorXd v;
};

/// Firm value Y = X theta + eps and productivity P = X rho + v, with (eps, v)
/// drawn from the shock law of each row's policy.
inline HazardSample simulate_hazard(const GeneratorConfig& cfg) {
    const RandomStream root(cfg.seed, "hazard");
    Schema schema({policy_key_spec(), continuous_spec("x1", VariableRole::wfh_related),
                   continuous_spec("x2", VariableRole::demographic), gender_spec(),
                   continuous_spec(std::string(default_firm_value_code), VariableRole::firm_value),
                   continuous_spec("productivity", VariableRole::productivity_component)});
    HazardSample s{Dataset(schema, cfg.n), Eigen::VectorXd(static_cast<Eigen::Index>(cfg.n)),
                   Eigen::VectorXd(static_cast<Eigen::Index>(cfg.n))};
    auto pol = root.substream("policy"), x1 = root.substream("x1"), x2 = root.substream("x2"), g = root.substream("gender");
    std::array<RandomStream, 3> shock{root.substream("shock/on_site"), root.substream("shock/hybrid"),
                                      root.substream("shock/fully_remote")};
    for (std::size_t i = 0; i < cfg.n; ++i) {
        const int k = static_cast<int>(pol.below(3));
        const double a = x1.normal(), b = x2.normal();
        const double male = static_cast<double>(g.below(2));
        const auto& sd = cfg.hazard_for(policy_of_index(k));
        auto& r = shock[static_cast<std::size_t>(k)];
        const double eps = std::sqrt(sd.sigma_eps2) * r.normal();
        const double v = sd.delta * eps + std::sqrt(sd.sigma_xi2) * r.normal();
        s.eps[static_cast<Eigen::Index>(i)] = eps;
        s.v[static_cast<Eigen::Index>(i)] = v;
        s.data.set(i, 0, k);
        s.data.set(i, 1, a);
        s.data.set(i, 2, b);
        s.data.set(i, 3, male);
        s.data.set(i, 4, 5.0 + 1.0 * a + 0.5 * b + 0.8 * male + eps);
        s.data.set(i, 5, 0.3 * a - 0.2 * b + 0.1 * male + v);
    }
    s.data.provenance().source = "synthetic:hazard seed=" + std::to_string(cfg.seed);
    return s;
}

inline Dataset gen_hazard_data(const GeneratorConfig& cfg) { return simulate_hazard(cfg).data; }

namespace detail {

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Standardized observed values of a numeric column (missing cells -> 0).
inline std::vector<double> zscores(const Dataset& d, std::size_t j) {
    double sum = 0, ss = 0, n = 0;
    for (std::size_t i = 0; i < d.rows(); ++i)
        if (!d.missing(i, j)) {
            sum += d.value(i, j);
            n += 1;
        }
    const double mean = n > 0 ? sum / n : 0.0;
    for (std::size_t i = 0; i < d.rows(); ++i)
        if (!d.missing(i, j)) ss += (d.value(i, j) - mean) * (d.value(i, j) - mean);
    const double sd = n > 1 ? std::sqrt(ss / (n - 1)) : 1.0;
    std::vector<double> z(d.rows(), 0.0);
    for (std::size_t i = 0; i < d.rows(); ++i)
        if (!d.missing(i, j)) z[i] = sd > 0 ? (d.value(i, j) - mean) / sd : 0.0;
    return z;
}

}  // namespace detail

/// Masks cells according to the mechanism. Each target column uses its own
/// random substream, so adding a target does not disturb the others.
inline Dataset apply_missingness(const Dataset& d, const MissingnessSpec& spec, std::uint64_t seed) {
    if (spec.mechanism == MissingMechanism::none) return d;
    if (!(spec.rate >= 0.0 && spec.rate < 1.0)) throw ConfigError("missingness rate must lie in [0, 1)");
    std::vector<std::size_t> targets;
    if (spec.targets.empty()) {
        for (std::size_t j = 0; j < d.cols(); ++j) {
            const auto& code = d.schema()[j].code;
            if (std::find(spec.exempt.begin(), spec.exempt.end(), code) != spec.exempt.end()) continue;
            if (spec.mechanism == MissingMechanism::mar && code == spec.driver) continue;
            targets.push_back(j);
        }
    } else {
        for (const auto& c : spec.targets) targets.push_back(d.schema().index_of(c));
    }

    std::vector<double> driver_z;
    if (spec.mechanism == MissingMechanism::mar) {
        const auto drv = d.schema().find(spec.driver);
        if (!drv) throw ConfigError("MAR driver '" + spec.driver + "' is not a column");
        if (std::find(targets.begin(), targets.end(), *drv) != targets.end())
            throw ConfigError("MAR driver '" + spec.driver + "' cannot itself be masked");
        if (!d.schema()[*drv].is_numeric()) throw ConfigError("MAR driver '" + spec.driver + "' must be numeric");
        if (d.missing_count(*drv) > 0) throw ConfigError("MAR driver '" + spec.driver + "' must be fully observed");
        driver_z = detail::zscores(d, *drv);
    }

    Dataset out = d;
    const RandomStream root(seed, "missingness");
    const double base = spec.rate > 0 ? detail::logit(spec.rate) : -std::numeric_limits<double>::infinity();
    for (std::size_t j : targets) {
        auto r = root.substream(d.schema()[j].code);
        std::vector<double> own;
        if (spec.mechanism == MissingMechanism::mnar) {
            if (!d.schema()[j].is_numeric()) throw ConfigError("MNAR masking needs numeric targets");
            own = detail::zscores(d, j);
        }
        for (std::size_t i = 0; i < d.rows(); ++i) {
            double p = spec.rate;
            if (spec.mechanism == MissingMechanism::mar) p = detail::logistic(base + spec.slope * driver_z[i]);
            if (spec.mechanism == MissingMechanism::mnar) p = detail::logistic(base + spec.slope * own[i]);
            if (r.uniform() < p) out.set_missing(i, j);
        }
    }
    out.provenance().filters.push_back("missingness seed=" + std::to_string(seed));
    return out;
}

// -------------------------------------------------------- pipeline fixture

struct PipelineTruth {
    FactorTruth factor;
    std::vector<std::string> factor_labels{"efficiency", "competence"};
    double sigma_eps2 = 4.0;
    std::map<Policy, std::array<double, 2>> latent_delta;  // per unit of eps, latent-factor scale
    std::map<Policy, double> policy_share;
    Eigen::MatrixXd score_map;  // beta Sigma^-1 beta': latent shift -> predicted-score shift
    std::array<double, 3> wage{4.5, 0.15, 0.05};
    double wage_sd = 0.7;

    /// delta on the predicted-score scale that stage 2 estimates.
    double score_delta(Policy p, int factor) const {
        if (p == Policy::all) {
            double total = 0;
            for (const auto& [pol, share] : policy_share) total += share * score_delta(pol, factor);
            return total;
        }
        const auto& d = latent_delta.at(p);
        return score_map(factor, 0) * d[0] + score_map(factor, 1) * d[1];
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["factor"] = factor.to_json();
        j["factor_labels"] = factor_labels;
        j["sigma_eps2"] = sigma_eps2;
        nlohmann::json deltas = nlohmann::json::object();
        for (Policy p : {Policy::all, Policy::on_site, Policy::hybrid, Policy::fully_remote}) {
            nlohmann::json entry;
            for (int f = 0; f < 2; ++f) {
                entry["score"][factor_labels[static_cast<std::size_t>(f)]] = score_delta(p, f);
                if (p != Policy::all) entry["latent"][factor_labels[static_cast<std::size_t>(f)]] = latent_delta.at(p)[static_cast<std::size_t>(f)];
            }
            deltas[to_string(p)] = entry;
        }
        j["delta"] = deltas;
        j["wage"] = {{"intercept", wage[0]}, {"efficiency", wage[1]}, {"competence", wage[2]}, {"sd", wage_sd}};
        return j;
    }
};

struct PipelineFixture {
    Dataset complete;
    Dataset data;  // with missingness applied
    PipelineTruth truth;
};

inline Schema pipeline_fixture_schema() {
    std::vector<VariableSpec> v;
    v.push_back(policy_key_spec());
    v.push_back(continuous_spec(std::string(default_firm_value_code), VariableRole::firm_value, "people"));
    for (const auto& c : component_codes()) v.push_back(continuous_spec(c, VariableRole::productivity_component));
    v.push_back(continuous_spec("wfh_hoursinvest", VariableRole::wfh_related, "hours"));
    v.push_back(continuous_spec("internet_quality_quant", VariableRole::wfh_related, "percent"));
    v.push_back(continuous_spec("educ_years", VariableRole::demographic, "years"));
    v.push_back(continuous_spec("age_quant", VariableRole::demographic, "years"));
    v.push_back(gender_spec());
    v.push_back(continuous_spec("commutetime_quant", VariableRole::control, "minutes"));
    v.push_back(continuous_spec("log_earnings", VariableRole::wage));
    return Schema(std::move(v));
}

/// Survey-shaped data with known per-policy delta for both factors.
///
/// Within each policy stratum the latent factors have unit variance and are
/// uncorrelated: F_k = X rho_k + delta_k eps + xi_k, with the xi covariance
/// offsetting the common eps term. Covariates are standard normal except the
/// binary gender, and the components load on F with simple structure.
inline PipelineFixture make_pipeline_fixture(std::size_t n, std::uint64_t seed, double missing_rate = 0.3) {
    PipelineFixture fx;
    PipelineTruth& t = fx.truth;
    t.factor = two_factor_truth();
    t.latent_delta = {{Policy::on_site, {0.15, 0.20}}, {Policy::hybrid, {0.10, 0.15}}, {Policy::fully_remote, {0.0, 0.10}}};
    t.policy_share = {{Policy::on_site, 1.0 / 3}, {Policy::hybrid, 1.0 / 3}, {Policy::fully_remote, 1.0 / 3}};
    {
        const Eigen::MatrixXd sigma = t.factor.covariance();
        t.score_map = t.factor.beta * sigma.llt().solve(t.factor.beta.transpose());
    }

    const Schema schema = pipeline_fixture_schema();
    Dataset d(schema, n);
    const RandomStream root(seed, "pipeline-fixture");
    auto pol = root.substream("policy");
    auto cov = root.substream("covariates");
    auto shocks = root.substream("shocks");
    auto noise = root.substream("component-noise");
    auto wage_noise = root.substream("wage");

    // Firm value: 10 + theta'x + eps.
    const double theta_hours = 1.0, theta_internet = 0.8, theta_educ = 0.6, theta_age = 0.3, theta_commute = 0.5,
                 theta_male = 1.0;
    // Latent-factor means: disjoint covariate supports.
    const double rho_e_hours = 0.3, rho_e_internet = 0.3, rho_e_educ = 0.2;
    const double rho_c_age = 0.2, rho_c_commute = 0.2, rho_c_male = 0.3;
    const double var_e_x = rho_e_hours * rho_e_hours + rho_e_internet * rho_e_internet + rho_e_educ * rho_e_educ;
    const double var_c_x = rho_c_age * rho_c_age + rho_c_commute * rho_c_commute + 0.25 * rho_c_male * rho_c_male;
    const double se = std::sqrt(t.sigma_eps2);

    const auto idx = [&](std::string_view c) { return schema.index_of(c); };
    const std::size_t c_pol = idx(policy_key_code), c_fv = idx(default_firm_value_code), c_hours = idx("wfh_hoursinvest"),
                      c_net = idx("internet_quality_quant"), c_educ = idx("educ_years"), c_age = idx("age_quant"),
                      c_gender = idx("gender"), c_commute = idx("commutetime_quant"), c_wage = idx("log_earnings");
    std::vector<std::size_t> c_comp;
    for (const auto& c : component_codes()) c_comp.push_back(idx(c));

    for (std::size_t i = 0; i < n; ++i) {
        const int k = static_cast<int>(pol.below(3));
        const Policy policy = policy_of_index(k);
        const double hours = cov.normal(), net = cov.normal(), educ = cov.normal(), age = cov.normal(), commute = cov.normal();
        const double male = static_cast<double>(cov.below(2));
        const double eps = se * shocks.normal();
        const auto& dl = t.latent_delta.at(policy);
        // xi ~ N(0, [[a, c], [c, b]]) with c cancelling the shared eps covariance.
        const double a = 1.0 - var_e_x - dl[0] * dl[0] * t.sigma_eps2;
        const double b = 1.0 - var_c_x - dl[1] * dl[1] * t.sigma_eps2;
        const double c = -dl[0] * dl[1] * t.sigma_eps2;
        const double l11 = std::sqrt(a), l21 = c / l11, l22 = std::sqrt(b - l21 * l21);
        const double z1 = shocks.normal(), z2 = shocks.normal();
        const double xi_e = l11 * z1, xi_c = l21 * z1 + l22 * z2;
        const double f_e = rho_e_hours * hours + rho_e_internet * net + rho_e_educ * educ + dl[0] * eps + xi_e;
        const double f_c = rho_c_age * age + rho_c_commute * commute + rho_c_male * (male - 0.5) + dl[1] * eps + xi_c;

        d.set(i, c_pol, k);
        d.set(i, c_hours, hours);
        d.set(i, c_net, net);
        d.set(i, c_educ, educ);
        d.set(i, c_age, age);
        d.set(i, c_gender, male);
        d.set(i, c_commute, commute);
        d.set(i, c_fv, 10.0 + theta_hours * hours + theta_internet * net + theta_educ * educ + theta_age * age +
                           theta_commute * commute + theta_male * male + eps);
        for (std::size_t q = 0; q < c_comp.size(); ++q) {
            const auto qi = static_cast<Eigen::Index>(q);
            const double y = t.factor.lambda[qi] + t.factor.beta(0, qi) * f_e + t.factor.beta(1, qi) * f_c +
                             std::sqrt(t.factor.omega[qi]) * noise.normal();
            d.set(i, c_comp[q], y);
        }
        d.set(i, c_wage, t.wage[0] + t.wage[1] * f_e + t.wage[2] * f_c + t.wage_sd * wage_noise.normal());
    }
    d.provenance().source = "synthetic:pipeline seed=" + std::to_string(seed);
    fx.complete = d;
    MissingnessSpec ms;
    ms.mechanism = missing_rate > 0 ? MissingMechanism::mcar : MissingMechanism::none;
    ms.rate = missing_rate;
    ms.exempt = {std::string(policy_key_code)};
    fx.data = apply_missingness(d, ms, seed);
    return fx;
}

}  // namespace lh
