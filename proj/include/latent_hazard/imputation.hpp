#pragma once

// Missingness diagnostics, multiple imputation by chained equations, and
// Rubin's combination rules.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <nlohmann/json.hpp>

#include "latent_hazard/dataset.hpp"
#include "latent_hazard/error.hpp"
#include "latent_hazard/parallel.hpp"
#include "latent_hazard/random.hpp"
#include "latent_hazard/regression.hpp"
#include "latent_hazard/table.hpp"

namespace lh {

// ------------------------------------------------------------ Little's test

struct LittleTest {
    double statistic = 0;
    int df = 0;
    double p_value = 1;
    int patterns = 0;
    int em_iterations = 0;
    bool em_converged = false;
};

struct EmOptions {
    double tolerance = 1e-6;  // absolute change in observed-data log-likelihood
    int max_iterations = 500;
};

namespace detail {

/// Numeric view of a dataset for the normal model: numeric columns as-is,
/// categoricals as non-reference dummies. NaN marks missing.
inline Eigen::MatrixXd numeric_view(const Dataset& d) {
    std::vector<Eigen::VectorXd> cols;
    const auto n = static_cast<Eigen::Index>(d.rows());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t j = 0; j < d.cols(); ++j) {
        const auto& spec = d.schema()[j];
        if (spec.is_numeric()) {
            Eigen::VectorXd c(n);
            for (Eigen::Index i = 0; i < n; ++i) c[i] = d.missing(static_cast<std::size_t>(i), j) ? nan : d.value(static_cast<std::size_t>(i), j);
            cols.push_back(std::move(c));
            continue;
        }
        for (std::size_t k = 0; k < spec.categories.size(); ++k) {
            if (k == spec.reference) continue;
            Eigen::VectorXd c(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                const auto r = static_cast<std::size_t>(i);
                c[i] = d.missing(r, j) ? nan : (d.value(r, j) == static_cast<double>(k) ? 1.0 : 0.0);
            }
            cols.push_back(std::move(c));
        }
    }
    Eigen::MatrixXd y(n, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) y.col(static_cast<Eigen::Index>(c)) = cols[c];
    return y;
}

struct Pattern {
    std::vector<int> observed;
    std::vector<int> missing;
    double n = 0;
    Eigen::VectorXd s1;  // sum of observed sub-vectors
    Eigen::MatrixXd s2;  // sum of their outer products
};

inline Eigen::MatrixXd sub(const Eigen::MatrixXd& a, const std::vector<int>& r, const std::vector<int>& c) {
    Eigen::MatrixXd out(r.size(), c.size());
    for (std::size_t i = 0; i < r.size(); ++i)
        for (std::size_t j = 0; j < c.size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a(r[i], c[j]);
    return out;
}

inline Eigen::VectorXd sub(const Eigen::VectorXd& a, const std::vector<int>& r) {
    Eigen::VectorXd out(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) out[static_cast<Eigen::Index>(i)] = a[r[i]];
    return out;
}

/// Groups rows by missingness pattern (rows with nothing observed are dropped).
inline std::vector<Pattern> group_patterns(const Eigen::MatrixXd& y) {
    std::map<std::vector<bool>, std::vector<Eigen::Index>> groups;
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        std::vector<bool> key(static_cast<std::size_t>(y.cols()));
        bool any = false;
        for (Eigen::Index j = 0; j < y.cols(); ++j) {
            key[static_cast<std::size_t>(j)] = !std::isnan(y(i, j));
            any = any || key[static_cast<std::size_t>(j)];
        }
        if (any) groups[key].push_back(i);
    }
    std::vector<Pattern> out;
    for (const auto& [key, rows] : groups) {
        Pattern p;
        for (std::size_t j = 0; j < key.size(); ++j) (key[j] ? p.observed : p.missing).push_back(static_cast<int>(j));
        p.n = static_cast<double>(rows.size());
        const auto po = static_cast<Eigen::Index>(p.observed.size());
        p.s1 = Eigen::VectorXd::Zero(po);
        p.s2 = Eigen::MatrixXd::Zero(po, po);
        Eigen::VectorXd v(po);
        for (auto i : rows) {
            for (Eigen::Index a = 0; a < po; ++a) v[a] = y(i, p.observed[static_cast<std::size_t>(a)]);
            p.s1 += v;
            p.s2.selfadjointView<Eigen::Lower>().rankUpdate(v);
        }
        p.s2 = p.s2.selfadjointView<Eigen::Lower>();
        out.push_back(std::move(p));
    }
    return out;
}

struct NormalEm {
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;
    int iterations = 0;
    bool converged = false;
};

inline double observed_loglik(const std::vector<Pattern>& pats, const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma) {
    double ll = 0;
    for (const auto& p : pats) {
        const Eigen::VectorXd m = sub(mu, p.observed);
        Eigen::LLT<Eigen::MatrixXd> llt(sub(sigma, p.observed, p.observed));
        if (llt.info() != Eigen::Success) throw NumericalError("covariance estimate is singular in Little's test");
        const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
        const Eigen::MatrixXd centered = p.s2 - p.s1 * m.transpose() - m * p.s1.transpose() + p.n * m * m.transpose();
        ll -= 0.5 * (p.n * logdet + llt.solve(centered).trace());
    }
    return ll;
}

/// ML mean and covariance of a multivariate normal under ignorable missingness.
inline NormalEm normal_em(const std::vector<Pattern>& pats, int dim, double total_n, const EmOptions& opts) {
    NormalEm em;
    // Start from available-case means and variances.
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim), sumsq = Eigen::VectorXd::Zero(dim), count = Eigen::VectorXd::Zero(dim);
    for (const auto& p : pats)
        for (std::size_t a = 0; a < p.observed.size(); ++a) {
            const int j = p.observed[a];
            sum[j] += p.s1[static_cast<Eigen::Index>(a)];
            sumsq[j] += p.s2(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(a));
            count[j] += p.n;
        }
    for (int j = 0; j < dim; ++j)
        if (count[j] < 2) throw NumericalError("Little's test: a variable has fewer than two observed values");
    em.mu = sum.cwiseQuotient(count);
    em.sigma = (sumsq.cwiseQuotient(count) - em.mu.cwiseAbs2()).asDiagonal();

    double ll = observed_loglik(pats, em.mu, em.sigma);
    for (em.iterations = 1; em.iterations <= opts.max_iterations; ++em.iterations) {
        Eigen::VectorXd t1 = Eigen::VectorXd::Zero(dim);
        Eigen::MatrixXd t2 = Eigen::MatrixXd::Zero(dim, dim);
        for (const auto& p : pats) {
            const auto& o = p.observed;
            const auto& mi = p.missing;
            const auto po = static_cast<Eigen::Index>(o.size());
            const auto pm = static_cast<Eigen::Index>(mi.size());
            Eigen::VectorXd e1(dim);
            Eigen::MatrixXd e2(dim, dim);
            if (pm == 0) {
                e1 = p.s1;
                e2 = p.s2;
                t1 += e1;
                t2 += e2;
                continue;
            }
            // y_m | y_o ~ N(a + B y_o, C)
            const Eigen::MatrixXd soo = sub(em.sigma, o, o);
            const Eigen::MatrixXd smo = sub(em.sigma, mi, o);
            Eigen::LLT<Eigen::MatrixXd> llt(soo);
            const Eigen::MatrixXd b = llt.solve(smo.transpose()).transpose();  // pm x po
            const Eigen::VectorXd a = sub(em.mu, mi) - b * sub(em.mu, o);
            const Eigen::MatrixXd c = sub(em.sigma, mi, mi) - b * smo.transpose();
            const Eigen::VectorXd sm = p.n * a + b * p.s1;
            const Eigen::MatrixXd smo_sum = a * p.s1.transpose() + b * p.s2;  // sum yhat_m y_o'
            const Eigen::MatrixXd bs1a = b * p.s1 * a.transpose();
            const Eigen::MatrixXd smm = p.n * a * a.transpose() + bs1a + bs1a.transpose() + b * p.s2 * b.transpose() + p.n * c;
            for (Eigen::Index x = 0; x < po; ++x) {
                t1[o[static_cast<std::size_t>(x)]] += p.s1[x];
                for (Eigen::Index y = 0; y < po; ++y) t2(o[static_cast<std::size_t>(x)], o[static_cast<std::size_t>(y)]) += p.s2(x, y);
            }
            for (Eigen::Index x = 0; x < pm; ++x) {
                t1[mi[static_cast<std::size_t>(x)]] += sm[x];
                for (Eigen::Index y = 0; y < po; ++y) {
                    t2(mi[static_cast<std::size_t>(x)], o[static_cast<std::size_t>(y)]) += smo_sum(x, y);
                    t2(o[static_cast<std::size_t>(y)], mi[static_cast<std::size_t>(x)]) += smo_sum(x, y);
                }
                for (Eigen::Index y = 0; y < pm; ++y) t2(mi[static_cast<std::size_t>(x)], mi[static_cast<std::size_t>(y)]) += smm(x, y);
            }
        }
        em.mu = t1 / total_n;
        em.sigma = t2 / total_n - em.mu * em.mu.transpose();
        em.sigma = 0.5 * (em.sigma + em.sigma.transpose()).eval();
        const double next = observed_loglik(pats, em.mu, em.sigma);
        const double change = std::fabs(next - ll);
        ll = next;
        if (change < opts.tolerance) {
            em.converged = true;
            break;
        }
    }
    em.iterations = std::min(em.iterations, opts.max_iterations);
    return em;
}

}  // namespace detail

/// Little's chi-square test of MCAR over the numeric view of the data.
inline LittleTest little_mcar_test(const Dataset& d, const EmOptions& opts = {}) {
    const Eigen::MatrixXd y = detail::numeric_view(d);
    const auto pats = detail::group_patterns(y);
    if (pats.size() < 2)
        throw NumericalError("Little's test is degenerate: the data have a single missingness pattern");
    double total = 0;
    for (const auto& p : pats) total += p.n;
    const int dim = static_cast<int>(y.cols());
    const auto em = detail::normal_em(pats, dim, total, opts);

    LittleTest t;
    t.patterns = static_cast<int>(pats.size());
    t.em_iterations = em.iterations;
    t.em_converged = em.converged;
    for (const auto& p : pats) {
        const Eigen::VectorXd diff = p.s1 / p.n - detail::sub(em.mu, p.observed);
        const Eigen::MatrixXd soo = detail::sub(em.sigma, p.observed, p.observed);
        t.statistic += p.n * diff.dot(soo.llt().solve(diff));
        t.df += static_cast<int>(p.observed.size());
    }
    t.df -= dim;
    if (t.df <= 0) throw NumericalError("Little's test is degenerate: no degrees of freedom");
    boost::math::chi_squared dist(t.df);
    t.p_value = boost::math::cdf(boost::math::complement(dist, std::max(t.statistic, 0.0)));
    return t;
}

// ---------------------------------------------------------- MAR diagnostic

struct MarComparison {
    std::string target;
    std::string covariate;
    std::vector<std::string> bins;
    std::vector<double> missing_share;   // distribution among rows where target is missing
    std::vector<double> observed_share;  // ... and where it is observed
    std::size_t n_missing = 0;
    std::size_t n_observed = 0;
    double tv_distance = 0;
};

/// For every target with missingness and every covariate, compare the
/// covariate's distribution between rows missing and observing the target.
/// Numeric covariates with more than ten distinct values are binned at the
/// pooled deciles.
inline std::vector<MarComparison> mar_diagnostic(const Dataset& d, const std::vector<std::string>& covariates,
                                                 std::vector<std::string> targets = {}) {
    if (targets.empty())
        for (std::size_t j = 0; j < d.cols(); ++j)
            if (d.missing_count(j) > 0) targets.push_back(d.schema()[j].code);
    std::vector<MarComparison> out;
    for (const auto& cov_code : covariates) {
        const std::size_t c = d.schema().index_of(cov_code);
        const auto& spec = d.schema()[c];
        // Bin assignment for the covariate.
        std::vector<std::string> bins;
        std::vector<int> bin_of(d.rows(), -1);
        if (spec.kind == VariableKind::categorical) {
            for (const auto& cat : spec.categories) bins.push_back(cat.label);
            for (std::size_t i = 0; i < d.rows(); ++i)
                if (!d.missing(i, c)) bin_of[i] = static_cast<int>(d.value(i, c));
        } else {
            std::vector<double> obs;
            for (std::size_t i = 0; i < d.rows(); ++i)
                if (!d.missing(i, c)) obs.push_back(d.value(i, c));
            std::vector<double> levels = obs;
            std::sort(levels.begin(), levels.end());
            levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
            if (levels.size() <= 10) {
                for (double l : levels) bins.push_back(detail::format_roundtrip(l));
                for (std::size_t i = 0; i < d.rows(); ++i)
                    if (!d.missing(i, c))
                        bin_of[i] = static_cast<int>(std::lower_bound(levels.begin(), levels.end(), d.value(i, c)) - levels.begin());
            } else {
                std::sort(obs.begin(), obs.end());
                std::vector<double> cuts;
                for (int k = 1; k < 10; ++k) {
                    const double cut = obs[static_cast<std::size_t>(std::floor(k * (obs.size() - 1) / 10.0))];
                    if (cuts.empty() || cut > cuts.back()) cuts.push_back(cut);
                }
                for (std::size_t b = 0; b <= cuts.size(); ++b)
                    bins.push_back(b == 0 ? "<=" + detail::format_roundtrip(cuts[0])
                                          : ">" + detail::format_roundtrip(cuts[b - 1]));
                for (std::size_t i = 0; i < d.rows(); ++i)
                    if (!d.missing(i, c))
                        bin_of[i] = static_cast<int>(std::lower_bound(cuts.begin(), cuts.end(), d.value(i, c)) - cuts.begin());
            }
        }

        for (const auto& target : targets) {
            if (target == cov_code) continue;
            const std::size_t t = d.schema().index_of(target);
            MarComparison cmp;
            cmp.target = target;
            cmp.covariate = cov_code;
            cmp.bins = bins;
            cmp.missing_share.assign(bins.size(), 0.0);
            cmp.observed_share.assign(bins.size(), 0.0);
            for (std::size_t i = 0; i < d.rows(); ++i) {
                if (bin_of[i] < 0) continue;
                if (d.missing(i, t)) {
                    cmp.missing_share[static_cast<std::size_t>(bin_of[i])] += 1;
                    ++cmp.n_missing;
                } else {
                    cmp.observed_share[static_cast<std::size_t>(bin_of[i])] += 1;
                    ++cmp.n_observed;
                }
            }
            if (cmp.n_missing == 0 || cmp.n_observed == 0) continue;
            for (std::size_t b = 0; b < bins.size(); ++b) {
                cmp.missing_share[b] /= static_cast<double>(cmp.n_missing);
                cmp.observed_share[b] /= static_cast<double>(cmp.n_observed);
                cmp.tv_distance += 0.5 * std::fabs(cmp.missing_share[b] - cmp.observed_share[b]);
            }
            out.push_back(std::move(cmp));
        }
    }
    return out;
}

// ------------------------------------------------------- missingness report

struct VariableMissingness {
    std::string code;
    std::size_t missing = 0;
    double rate = 0;
};

struct MissingnessReport {
    std::vector<VariableMissingness> variables;
    double average_rate = 0;  // missing cells / total cells
    std::optional<LittleTest> little;
    std::string little_note;  // why the test was not computed, when it was not
    std::vector<MarComparison> mar;
};

inline double average_missing_rate(const Dataset& d) {
    if (d.rows() == 0 || d.cols() == 0) return 0.0;
    return static_cast<double>(d.missing_count()) / static_cast<double>(d.rows() * d.cols());
}

inline MissingnessReport missingness_report(const Dataset& d, const std::vector<std::string>& mar_covariates = {}) {
    MissingnessReport r;
    for (std::size_t j = 0; j < d.cols(); ++j) {
        const auto miss = d.missing_count(j);
        r.variables.push_back({d.schema()[j].code, miss, d.rows() ? static_cast<double>(miss) / d.rows() : 0.0});
    }
    r.average_rate = average_missing_rate(d);
    try {
        r.little = little_mcar_test(d);
    } catch (const NumericalError& e) {
        r.little_note = e.what();
    }
    if (!mar_covariates.empty()) r.mar = mar_diagnostic(d, mar_covariates);
    return r;
}

inline Table missingness_table(const MissingnessReport& r) {
    Table t{"Missingness", {"Variable", "Missing", "Rate"}, {}};
    for (const auto& v : r.variables) t.add_row({v.code, format_grouped(static_cast<double>(v.missing)), format_fixed(v.rate, 4)});
    t.add_row({"Average", "", format_fixed(r.average_rate, 4)});
    if (r.little) {
        t.add_row({"Little's statistic (df)", format_grouped(r.little->statistic) + " (" + format_grouped(r.little->df) + ")",
                   format_fixed(r.little->p_value, 4)});
    }
    return t;
}

inline Table mar_table(const std::vector<MarComparison>& rows) {
    Table t{"Missing vs. observed covariate distributions", {"Target", "Covariate", "Missing", "Observed", "TV distance"}, {}};
    for (const auto& c : rows)
        t.add_row({c.target, c.covariate, format_grouped(static_cast<double>(c.n_missing)),
                   format_grouped(static_cast<double>(c.n_observed)), format_fixed(c.tv_distance, 4)});
    return t;
}

/// Percentage missing rounded up to the next multiple of ten, at least 5.
inline int choose_num_imputations(double avg_missing_rate) {
    if (!(avg_missing_rate >= 0.0 && avg_missing_rate <= 1.0))
        throw ConfigError("missing rate must lie in [0, 1], got " + std::to_string(avg_missing_rate));
    // The small offset keeps exact tenths (0.3 * 10 = 3.0000000000000004) from rounding up.
    const int tens = static_cast<int>(std::ceil(avg_missing_rate * 10.0 - 1e-9));
    return std::max(5, tens * 10);
}

// ------------------------------------------------------------------- MICE

struct MiceOptions {
    int m = 5;
    int iterations = 20;
    std::uint64_t seed = 1;
    int donors = 5;
    std::size_t min_observed = 30;
    double ridge = 1e-5;
    /// Impute separately within each level of this fully observed column.
    std::string strata;
};

struct ImputationSet {
    int m = 0;
    int iterations = 0;
    std::uint64_t seed = 0;
    std::string strata;
    std::vector<Dataset> completed;
    std::vector<std::string> engines;  // per schema variable: pmm, ovr-linear, none
    /// trace[v][imputation][iteration]: mean of the imputed cells of variable v.
    std::vector<std::vector<std::vector<double>>> trace;
};

namespace detail {

struct EncodedBlock {
    std::size_t var;
    Eigen::Index first;
    Eigen::Index width;
};

/// One predictor block per variable: numeric columns directly, categoricals as dummies.
inline std::vector<EncodedBlock> predictor_layout(const Schema& schema, Eigen::Index& total) {
    std::vector<EncodedBlock> blocks;
    total = 1;  // intercept at column 0
    for (std::size_t j = 0; j < schema.size(); ++j) {
        const Eigen::Index w = schema[j].is_numeric() ? 1 : static_cast<Eigen::Index>(schema[j].categories.size() - 1);
        blocks.push_back({j, total, w});
        total += w;
    }
    return blocks;
}

inline void write_block(Eigen::MatrixXd& x, const EncodedBlock& b, const VariableSpec& spec, const std::vector<double>& col) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double v = col[static_cast<std::size_t>(i)];
        if (spec.is_numeric()) {
            x(i, b.first) = v;
            continue;
        }
        Eigen::Index k = 0;
        for (std::size_t c = 0; c < spec.categories.size(); ++c) {
            if (c == spec.reference) continue;
            x(i, b.first + k++) = v == static_cast<double>(c) ? 1.0 : 0.0;
        }
    }
}

/// Draw (beta*, used for the missing rows) and the point estimate (for donors)
/// of a ridge-stabilized normal linear model, one column per response.
struct PosteriorDraw {
    Eigen::MatrixXd beta_hat;
    Eigen::MatrixXd beta_star;
};

inline PosteriorDraw linear_draw(const Eigen::MatrixXd& xo, const Eigen::MatrixXd& yo, double ridge, RandomStream& rng) {
    const Eigen::Index k = xo.cols();
    Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(k, k);
    xtx.selfadjointView<Eigen::Lower>().rankUpdate(xo.transpose());
    xtx = xtx.selfadjointView<Eigen::Lower>();
    Eigen::VectorXd pen = xtx.diagonal() * ridge;
    for (Eigen::Index a = 0; a < k; ++a) xtx(a, a) += std::max(pen[a], 1e-12);
    Eigen::LLT<Eigen::MatrixXd> llt(xtx);
    if (llt.info() != Eigen::Success) throw NumericalError("imputation model is singular");
    PosteriorDraw out;
    out.beta_hat = llt.solve(xo.transpose() * yo);
    out.beta_star = out.beta_hat;
    const double df = std::max(1.0, static_cast<double>(xo.rows() - k));
    // V^(1/2) z with V = (X'X)^-1 = L^-T L^-1.
    const Eigen::MatrixXd resid = yo - xo * out.beta_hat;
    for (Eigen::Index c = 0; c < yo.cols(); ++c) {
        const double sigma = std::sqrt(resid.col(c).squaredNorm() / rng.chi_squared(df));
        Eigen::VectorXd z(k);
        for (Eigen::Index a = 0; a < k; ++a) z[a] = rng.normal();
        out.beta_star.col(c) += sigma * llt.matrixU().solve(z);
    }
    return out;
}

struct MiceWorker {
    const Dataset& source;
    const MiceOptions& opts;
    const std::vector<std::size_t>& rows;  // rows of this stratum
    const std::vector<std::size_t>& order; // variables to visit, ascending missingness

    /// Imputes the stratum in place inside `out`. Adds imputed-cell sums per
    /// iteration into `sums` (per variable x iteration).
    void run(Dataset& out, RandomStream rng, std::vector<std::vector<double>>& sums) const {
        const Schema& schema = source.schema();
        const auto n = static_cast<Eigen::Index>(rows.size());
        Eigen::Index width = 0;
        const auto blocks = predictor_layout(schema, width);

        // Local copy of the stratum's columns with an initial random fill from observed values.
        std::vector<std::vector<double>> cols(schema.size(), std::vector<double>(rows.size()));
        std::vector<std::vector<std::size_t>> missing_rows(schema.size()), observed_rows(schema.size());
        for (std::size_t j = 0; j < schema.size(); ++j) {
            for (std::size_t r = 0; r < rows.size(); ++r) {
                if (source.missing(rows[r], j)) {
                    missing_rows[j].push_back(r);
                } else {
                    observed_rows[j].push_back(r);
                    cols[j][r] = source.value(rows[r], j);
                }
            }
            if (missing_rows[j].empty()) continue;
            auto fill = rng.substream("init/" + schema[j].code);
            for (std::size_t r : missing_rows[j])
                cols[j][r] = cols[j][observed_rows[j][fill.below(observed_rows[j].size())]];
        }

        Eigen::MatrixXd x(n, width);
        x.col(0).setOnes();
        for (const auto& b : blocks) write_block(x, b, schema[b.var], cols[b.var]);

        for (int it = 0; it < opts.iterations; ++it) {
            for (std::size_t j : order) {
                if (missing_rows[j].empty()) continue;
                auto step = rng.substream("it" + std::to_string(it) + "/" + schema[j].code);
                const auto& b = blocks[j];
                // Predictors: every column except this variable's block.
                std::vector<Eigen::Index> keep;
                for (Eigen::Index c = 0; c < width; ++c)
                    if (c < b.first || c >= b.first + b.width) keep.push_back(c);
                const auto& obs = observed_rows[j];
                const auto& mis = missing_rows[j];
                Eigen::MatrixXd xo(static_cast<Eigen::Index>(obs.size()), static_cast<Eigen::Index>(keep.size()));
                Eigen::MatrixXd xm(static_cast<Eigen::Index>(mis.size()), static_cast<Eigen::Index>(keep.size()));
                for (std::size_t a = 0; a < keep.size(); ++a) {
                    const auto ka = static_cast<Eigen::Index>(a);
                    for (std::size_t r = 0; r < obs.size(); ++r) xo(static_cast<Eigen::Index>(r), ka) = x(static_cast<Eigen::Index>(obs[r]), keep[a]);
                    for (std::size_t r = 0; r < mis.size(); ++r) xm(static_cast<Eigen::Index>(r), ka) = x(static_cast<Eigen::Index>(mis[r]), keep[a]);
                }

                const auto& spec = schema[j];
                if (spec.is_numeric()) {
                    Eigen::MatrixXd yo(static_cast<Eigen::Index>(obs.size()), 1);
                    for (std::size_t r = 0; r < obs.size(); ++r) yo(static_cast<Eigen::Index>(r), 0) = cols[j][obs[r]];
                    const auto draw = linear_draw(xo, yo, opts.ridge, step);
                    pmm(cols[j], obs, mis, xo * draw.beta_hat, xm * draw.beta_star, step);
                } else {
                    const auto levels = static_cast<Eigen::Index>(spec.categories.size());
                    Eigen::MatrixXd yo = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(obs.size()), levels);
                    std::vector<double> marginal(static_cast<std::size_t>(levels), 0.0);
                    for (std::size_t r = 0; r < obs.size(); ++r) {
                        const auto c = static_cast<Eigen::Index>(cols[j][obs[r]]);
                        yo(static_cast<Eigen::Index>(r), c) = 1.0;
                        marginal[static_cast<std::size_t>(c)] += 1.0;
                    }
                    const auto draw = linear_draw(xo, yo, opts.ridge, step);
                    const Eigen::MatrixXd scores = xm * draw.beta_star;
                    for (std::size_t r = 0; r < mis.size(); ++r) {
                        std::vector<double> prob(static_cast<std::size_t>(levels));
                        double total = 0;
                        for (Eigen::Index c = 0; c < levels; ++c) {
                            prob[static_cast<std::size_t>(c)] = std::clamp(scores(static_cast<Eigen::Index>(r), c), 0.0, 1.0);
                            total += prob[static_cast<std::size_t>(c)];
                        }
                        if (!(total > 0)) {
                            prob = marginal;
                            total = static_cast<double>(obs.size());
                        }
                        double u = step.uniform() * total;
                        std::size_t pick = 0;
                        while (pick + 1 < prob.size() && u >= prob[pick]) u -= prob[pick++];
                        cols[j][mis[r]] = static_cast<double>(pick);
                    }
                }
                write_block(x, b, spec, cols[j]);
                double s = 0;
                for (std::size_t r : mis) s += cols[j][r];
                sums[j][static_cast<std::size_t>(it)] += s;
            }
        }
        for (std::size_t j = 0; j < schema.size(); ++j)
            for (std::size_t r : missing_rows[j]) out.set(rows[r], j, cols[j][r]);
    }

    /// Predictive mean matching: each missing row takes the observed value of a
    /// donor drawn uniformly from the k observed rows with the closest predictions.
    void pmm(std::vector<double>& col, const std::vector<std::size_t>& obs, const std::vector<std::size_t>& mis,
             const Eigen::VectorXd& pred_obs, const Eigen::VectorXd& pred_mis, RandomStream& rng) const {
        std::vector<std::size_t> idx(obs.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return pred_obs[static_cast<Eigen::Index>(a)] < pred_obs[static_cast<Eigen::Index>(b)];
        });
        std::vector<double> sorted(idx.size());
        for (std::size_t a = 0; a < idx.size(); ++a) sorted[a] = pred_obs[static_cast<Eigen::Index>(idx[a])];
        const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(opts.donors), obs.size());
        for (std::size_t r = 0; r < mis.size(); ++r) {
            const double target = pred_mis[static_cast<Eigen::Index>(r)];
            std::size_t hi = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), target) - sorted.begin());
            std::size_t lo = hi;  // window [lo, hi)
            while (hi - lo < k) {
                if (lo == 0) {
                    ++hi;
                } else if (hi == sorted.size()) {
                    --lo;
                } else if (target - sorted[lo - 1] <= sorted[hi] - target) {
                    --lo;
                } else {
                    ++hi;
                }
            }
            const std::size_t donor = idx[lo + rng.below(k)];
            col[mis[r]] = col[obs[donor]];
        }
    }
};

}  // namespace detail

inline ImputationSet mice_impute(const Dataset& d, const MiceOptions& opts) {
    if (opts.m < 1) throw ConfigError("number of imputations must be at least 1");
    if (opts.iterations < 1) throw ConfigError("number of iterations must be at least 1");
    if (opts.donors < 1) throw ConfigError("PMM needs at least one donor");
    const Schema& schema = d.schema();

    // Strata: row groups imputed independently.
    std::vector<std::vector<std::size_t>> strata;
    if (opts.strata.empty()) {
        strata.emplace_back(d.rows());
        std::iota(strata[0].begin(), strata[0].end(), std::size_t{0});
    } else {
        const std::size_t s = schema.index_of(opts.strata);
        if (d.missing_count(s) > 0) throw ConfigError("stratification column '" + opts.strata + "' has missing cells");
        std::map<double, std::vector<std::size_t>> groups;
        for (std::size_t i = 0; i < d.rows(); ++i) groups[d.value(i, s)].push_back(i);
        for (auto& [key, rows] : groups) strata.push_back(std::move(rows));
    }

    for (std::size_t j = 0; j < schema.size(); ++j) {
        for (const auto& rows : strata) {
            std::size_t observed = 0, missing = 0;
            for (std::size_t i : rows) (d.missing(i, j) ? missing : observed) += 1;
            if (missing > 0 && observed < opts.min_observed)
                throw NumericalError("insufficient support to impute '" + schema[j].code + "': " + std::to_string(observed) +
                                     " observed cells" + (strata.size() > 1 ? " in a stratum" : "") + ", need " +
                                     std::to_string(opts.min_observed));
        }
    }

    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < schema.size(); ++j)
        if (d.missing_count(j) > 0) order.push_back(j);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.missing_count(a) < d.missing_count(b); });

    ImputationSet set;
    set.m = opts.m;
    set.iterations = opts.iterations;
    set.seed = opts.seed;
    set.strata = opts.strata;
    for (std::size_t j = 0; j < schema.size(); ++j)
        set.engines.push_back(d.missing_count(j) == 0 ? "none" : schema[j].is_numeric() ? "pmm" : "ovr-linear");
    set.completed.assign(static_cast<std::size_t>(opts.m), d);
    set.trace.assign(schema.size(), std::vector<std::vector<double>>(static_cast<std::size_t>(opts.m)));

    parallel_for(static_cast<std::size_t>(opts.m), [&](std::size_t im) {
        Dataset& out = set.completed[im];
        std::vector<std::vector<double>> sums(schema.size(), std::vector<double>(static_cast<std::size_t>(opts.iterations), 0.0));
        const RandomStream base(opts.seed, "mice/" + std::to_string(im));
        for (std::size_t s = 0; s < strata.size(); ++s) {
            detail::MiceWorker worker{d, opts, strata[s], order};
            worker.run(out, base.substream("stratum" + std::to_string(s)), sums);
        }
        for (std::size_t j : order) {
            auto& tr = set.trace[j][im];
            tr.resize(static_cast<std::size_t>(opts.iterations));
            const double count = static_cast<double>(d.missing_count(j));
            for (int it = 0; it < opts.iterations; ++it) tr[static_cast<std::size_t>(it)] = sums[j][static_cast<std::size_t>(it)] / count;
        }
        out.provenance().filters.push_back("imputation=" + std::to_string(im + 1));
    });
    return set;
}

// ------------------------------------------------------------ persistence

inline std::string imputation_file_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "imputation_%03d.csv", index + 1);
    return buf;
}

inline nlohmann::json imputation_metadata(const ImputationSet& set, const Schema& schema) {
    nlohmann::json doc;
    doc["m"] = set.m;
    doc["iterations"] = set.iterations;
    doc["seed"] = set.seed;
    doc["strata"] = set.strata;
    nlohmann::json engines = nlohmann::json::object(), trace = nlohmann::json::object();
    for (std::size_t j = 0; j < schema.size(); ++j) {
        engines[schema[j].code] = set.engines[j];
        if (set.engines[j] != "none") trace[schema[j].code] = set.trace[j];
    }
    doc["engines"] = engines;
    doc["trace"] = trace;
    nlohmann::json files = nlohmann::json::array();
    for (int i = 0; i < set.m; ++i) files.push_back(imputation_file_name(i));
    doc["files"] = files;
    return doc;
}

inline void write_imputation_set(const ImputationSet& set, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
    for (int i = 0; i < set.m; ++i)
        write_csv(set.completed[static_cast<std::size_t>(i)], (std::filesystem::path(dir) / imputation_file_name(i)).string());
    const Schema& schema = set.completed.empty() ? Schema{} : set.completed.front().schema();
    write_text((std::filesystem::path(dir) / "metadata.json").string(), imputation_metadata(set, schema).dump(2) + "\n");
}

inline ImputationSet read_imputation_set(const std::string& dir, const Schema& schema) {
    const auto meta_path = std::filesystem::path(dir) / "metadata.json";
    std::ifstream in(meta_path);
    if (!in) throw IoError("cannot open '" + meta_path.string() + "'");
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed imputation metadata: " + std::string(e.what()));
    }
    ImputationSet set;
    set.m = doc.at("m").get<int>();
    set.iterations = doc.at("iterations").get<int>();
    set.seed = doc.at("seed").get<std::uint64_t>();
    set.strata = doc.value("strata", "");
    set.trace.assign(schema.size(), std::vector<std::vector<double>>(static_cast<std::size_t>(set.m)));
    for (std::size_t j = 0; j < schema.size(); ++j) {
        const auto& code = schema[j].code;
        set.engines.push_back(doc["engines"].value(code, "none"));
        if (doc["trace"].contains(code)) set.trace[j] = doc["trace"][code].get<std::vector<std::vector<double>>>();
    }
    for (int i = 0; i < set.m; ++i)
        set.completed.push_back(load_csv((std::filesystem::path(dir) / imputation_file_name(i)).string(), schema));
    return set;
}

// ----------------------------------------------------------------- pooling

struct PooledEstimate {
    double estimate = 0;
    double within_var = 0;   // W-bar
    double between_var = 0;  // B
    double total_var = 0;    // T = W-bar + (1 + 1/m) B
    int m = 0;
    double df = std::numeric_limits<double>::infinity();

    double std_error() const { return std::sqrt(total_var); }
    double t_stat() const { return total_var > 0 ? estimate / std_error() : std::numeric_limits<double>::quiet_NaN(); }
    double p_value() const { return t_test_p_value(t_stat(), df); }
    /// Fraction of the total variance due to missingness.
    double lambda() const { return total_var > 0 ? (1.0 + 1.0 / m) * between_var / total_var : 0.0; }
    std::pair<double, double> interval(double level = 0.95) const {
        const double half = t_quantile(0.5 + level / 2.0, df) * std_error();
        return {estimate - half, estimate + half};
    }
};

/// Rubin's rules. Degrees of freedom follow Barnard and Rubin with the given
/// complete-data df (infinite by default).
inline PooledEstimate pool_rubin(const std::vector<std::pair<double, double>>& estimates,
                                 double complete_df = std::numeric_limits<double>::infinity()) {
    if (estimates.empty()) throw ConfigError("cannot pool an empty list of estimates");
    PooledEstimate p;
    p.m = static_cast<int>(estimates.size());
    for (const auto& [est, var] : estimates) {
        if (!(var >= 0)) throw ConfigError("pooled variances must be non-negative");
        p.estimate += est;
        p.within_var += var;
    }
    p.estimate /= p.m;
    p.within_var /= p.m;
    // Identical estimates (e.g. complete data) must give exactly zero between
    // variance; the rounded mean would otherwise leave a tiny residue.
    const bool identical = std::all_of(estimates.begin(), estimates.end(),
                                       [&](const auto& e) { return e.first == estimates.front().first; });
    if (identical) p.estimate = estimates.front().first;
    if (p.m > 1 && !identical) {
        for (const auto& [est, var] : estimates) p.between_var += (est - p.estimate) * (est - p.estimate);
        p.between_var /= (p.m - 1);
    }
    p.total_var = p.within_var + (1.0 + 1.0 / p.m) * p.between_var;

    const double lam = p.lambda();
    if (p.m == 1 || lam <= 0) {
        p.df = complete_df;
    } else {
        const double df_old = (p.m - 1) / (lam * lam);
        if (std::isinf(complete_df)) {
            p.df = df_old;
        } else {
            const double df_obs = (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - lam);
            p.df = df_old * df_obs / (df_old + df_obs);
        }
    }
    return p;
}

}  // namespace lh
