#pragma once

// Maximum-likelihood factor analysis of the productivity components.
//
// Model: Y ~ N(M lambda, I_n (x) (beta' beta + Omega)) with beta p x q
// (rows index factors) and Omega diagonal. The loadings and uniquenesses
// maximize the Wishart likelihood of U = Y' Q_M Y with v = n - k degrees of
// freedom, fitted by EM on the latent-factor formulation.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "latent_hazard/dataset.hpp"
#include "latent_hazard/error.hpp"
#include "latent_hazard/parallel.hpp"
#include "latent_hazard/table.hpp"

namespace lh {

/// Largest p >= 0 with (q - p)^2 - p - q >= 0.
inline int max_factors(int q) {
    if (q < 1) throw ConfigError("factor analysis needs at least one observed variable");
    auto ok = [q](int p) { return (q - p) * (q - p) - p - q >= 0; };
    int p = static_cast<int>(std::floor((2.0 * q + 1.0 - std::sqrt(8.0 * q + 1.0)) / 2.0));
    p = std::clamp(p, 0, q);
    while (p + 1 <= q && ok(p + 1)) ++p;
    while (p > 0 && !ok(p)) --p;
    return p;
}

/// Free parameters of the p-factor model: q(p+1) - p(p-1)/2.
inline int factor_parameter_count(int q, int p) { return q * (p + 1) - p * (p - 1) / 2; }

struct Standardization {
    Eigen::VectorXd center;
    Eigen::VectorXd scale;
};

/// Observed components Y (standardized), known mean design M, and the
/// derived mean coefficients and centered cross-product U = Y' Q_M Y.
class FactorProblem {
public:
    FactorProblem(const Eigen::MatrixXd& raw, std::vector<std::string> codes, bool standardize = true)
        : FactorProblem(raw, std::move(codes), Eigen::MatrixXd::Ones(raw.rows(), 1), standardize) {}

    FactorProblem(const Eigen::MatrixXd& raw, std::vector<std::string> codes, const Eigen::MatrixXd& mean_design,
                  bool standardize = true)
        : codes_(std::move(codes)), m_(mean_design) {
        const Eigen::Index n = raw.rows();
        const Eigen::Index q = raw.cols();
        if (q < 1) throw ConfigError("factor problem needs at least one observed column");
        if (static_cast<Eigen::Index>(codes_.size()) != q) throw ConfigError("factor problem: one code per column required");
        if (m_.rows() != n) throw ConfigError("mean design rows do not match observations");
        if (n <= m_.cols() + q)
            throw ConfigError("factor problem needs n > k + q (n=" + std::to_string(n) + ", k=" + std::to_string(m_.cols()) +
                              ", q=" + std::to_string(q) + ")");
        if (!raw.allFinite()) throw ConfigError("factor problem has non-finite or missing values; impute first");

        std_.center = Eigen::VectorXd::Zero(q);
        std_.scale = Eigen::VectorXd::Ones(q);
        y_ = raw;
        if (standardize) {
            for (Eigen::Index j = 0; j < q; ++j) {
                const double mean = raw.col(j).mean();
                const double sd = std::sqrt((raw.col(j).array() - mean).square().sum() / static_cast<double>(n - 1));
                if (!(sd > 0)) throw NumericalError("component '" + codes_[static_cast<std::size_t>(j)] + "' is constant");
                std_.center[j] = mean;
                std_.scale[j] = sd;
                y_.col(j) = (raw.col(j).array() - mean) / sd;
            }
        }

        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m_);
        qr.setThreshold(1e-10);
        if (qr.rank() < m_.cols()) throw ConfigError("columns of the mean design are linearly dependent");
        lambda_ = qr.solve(y_);
        const Eigen::MatrixXd resid = y_ - m_ * lambda_;
        u_ = resid.transpose() * resid;
        u_ = 0.5 * (u_ + u_.transpose()).eval();
    }

    /// Productivity components of a completed dataset.
    static FactorProblem from_dataset(const Dataset& d, const std::vector<std::string>& codes, bool standardize = true) {
        Eigen::MatrixXd raw(static_cast<Eigen::Index>(d.rows()), static_cast<Eigen::Index>(codes.size()));
        for (std::size_t c = 0; c < codes.size(); ++c) {
            const std::size_t j = d.schema().index_of(codes[c]);
            if (!d.schema()[j].is_numeric()) throw SchemaError("component '" + codes[c] + "' must be numeric");
            if (d.missing_count(j) > 0)
                throw ConfigError("component '" + codes[c] + "' has missing cells; impute before factor analysis");
            for (std::size_t i = 0; i < d.rows(); ++i)
                raw(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = d.value(i, j);
        }
        return FactorProblem(raw, codes, standardize);
    }

    static std::vector<std::string> component_codes(const Schema& schema) {
        std::vector<std::string> codes;
        for (std::size_t j : schema.with_role(VariableRole::productivity_component)) codes.push_back(schema[j].code);
        if (codes.empty()) throw SchemaError("schema has no productivity_component variables");
        return codes;
    }

    int n() const { return static_cast<int>(y_.rows()); }
    int q() const { return static_cast<int>(y_.cols()); }
    int k() const { return static_cast<int>(m_.cols()); }
    int v() const { return n() - k(); }

    const std::vector<std::string>& codes() const { return codes_; }
    const Eigen::MatrixXd& y() const { return y_; }
    const Eigen::MatrixXd& mean_design() const { return m_; }
    const Eigen::MatrixXd& lambda() const { return lambda_; }
    const Eigen::MatrixXd& cross_product() const { return u_; }
    Eigen::MatrixXd sample_covariance() const { return u_ / static_cast<double>(v()); }
    const Standardization& standardization() const { return std_; }

private:
    std::vector<std::string> codes_;
    Eigen::MatrixXd y_;
    Eigen::MatrixXd m_;
    Eigen::MatrixXd lambda_;
    Eigen::MatrixXd u_;
    Standardization std_;
};

struct FactorModel {
    int p = 0;
    int q = 0;
    int n = 0;
    int v = 0;
    std::vector<std::string> codes;
    Eigen::MatrixXd beta;      // p x q
    Eigen::VectorXd omega;     // q uniquenesses
    Eigen::MatrixXd lambda;    // k x q
    Eigen::MatrixXd rotation;  // p x p, applied to the unrotated ML loadings
    double deviance = 0;       // v ln|beta'beta + Omega|
    double log_likelihood = 0;
    bool converged = false;
    int iterations = 0;
    std::vector<bool> floored;          // uniqueness held at the Heywood floor
    std::vector<double> loglik_trace;   // per EM iteration, starting point first
    Standardization standardization;

    Eigen::MatrixXd implied_covariance() const {
        Eigen::MatrixXd sigma = omega.asDiagonal();
        if (p > 0) sigma += beta.transpose() * beta;
        return sigma;
    }
};

struct FitOptions {
    double tolerance = 1e-8;     // relative change of the deviance v ln|Sigma|
    int max_iterations = 1000;
    double uniqueness_floor = 1e-4;
};

namespace detail {

inline double log_det_spd(const Eigen::MatrixXd& a) {
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success) throw NumericalError("implied covariance is not positive definite");
    return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

/// ln|Sigma| + tr(Sigma^-1 S): the Wishart deviance per degree of freedom, up to a constant.
inline double wishart_discrepancy(const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& s) {
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success) throw NumericalError("implied covariance is not positive definite");
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return logdet + llt.solve(s).trace();
}

}  // namespace detail

/// Wishart log-likelihood of U given Sigma, constants dropped.
inline double wishart_log_likelihood(const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& s, int v) {
    return -0.5 * v * detail::wishart_discrepancy(sigma, s);
}

/// v ln|beta'beta + Omega|, recomputed from the matrices.
inline double factor_deviance(const FactorModel& m) { return m.v * detail::log_det_spd(m.implied_covariance()); }

inline FactorModel fit_fa(const FactorProblem& problem, int p, const FitOptions& opts = {}) {
    const int q = problem.q();
    if (p < 0) throw ConfigError("factor count must be non-negative");
    if (p > max_factors(q))
        throw ConfigError("p=" + std::to_string(p) + " violates the identifiability bound (q-p)^2 - p - q >= 0; at most " +
                          std::to_string(max_factors(q)) + " factors for q=" + std::to_string(q));

    const Eigen::MatrixXd s = problem.sample_covariance();
    FactorModel m;
    m.p = p;
    m.q = q;
    m.n = problem.n();
    m.v = problem.v();
    m.codes = problem.codes();
    m.lambda = problem.lambda();
    m.rotation = Eigen::MatrixXd::Identity(p, p);
    m.standardization = problem.standardization();

    const double floor = opts.uniqueness_floor;
    Eigen::MatrixXd load(q, p);  // q x p, transpose of beta
    Eigen::VectorXd omega(q);

    if (p == 0) {
        omega = s.diagonal().cwiseMax(floor);
        m.beta.resize(0, q);
        m.omega = omega;
        m.converged = true;
        m.deviance = m.v * omega.array().log().sum();
        m.log_likelihood = wishart_log_likelihood(m.implied_covariance(), s, m.v);
        m.loglik_trace = {m.log_likelihood};
        m.floored.assign(static_cast<std::size_t>(q), false);
        for (int j = 0; j < q; ++j) m.floored[static_cast<std::size_t>(j)] = omega[j] <= floor;
        return m;
    }

    // Principal-component start on the sample correlation matrix.
    {
        const Eigen::VectorXd sd = s.diagonal().cwiseSqrt();
        const Eigen::MatrixXd corr = sd.cwiseInverse().asDiagonal() * s * sd.cwiseInverse().asDiagonal();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(corr);
        for (int f = 0; f < p; ++f) {
            const int idx = q - 1 - f;
            load.col(f) = eig.eigenvectors().col(idx) * std::sqrt(std::max(eig.eigenvalues()[idx], 0.0));
        }
        load = sd.asDiagonal() * load;
        omega = (s.diagonal() - load.rowwise().squaredNorm()).cwiseMax(floor);
    }

    auto sigma_of = [&](const Eigen::MatrixXd& l, const Eigen::VectorXd& w) {
        Eigen::MatrixXd sig = l * l.transpose();
        sig.diagonal() += w;
        return sig;
    };

    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(p, p);
    // One EM update of (loadings, uniquenesses).
    auto em_step = [&](const Eigen::MatrixXd& l, const Eigen::VectorXd& w, Eigen::MatrixXd& l_out, Eigen::VectorXd& w_out) {
        Eigen::LLT<Eigen::MatrixXd> llt(sigma_of(l, w));
        if (llt.info() != Eigen::Success) throw NumericalError("EM iterate lost positive definiteness");
        const Eigen::MatrixXd b = llt.solve(l).transpose();  // p x q: E[x | y] = B y
        const Eigen::MatrixXd sb = s * b.transpose();        // q x p
        const Eigen::MatrixXd cxx = eye - b * l + b * sb;    // expected latent second moment
        l_out = cxx.llt().solve(sb.transpose()).transpose();
        w_out = (s.diagonal() - l_out.cwiseProduct(sb).rowwise().sum()).cwiseMax(floor);
    };
    double logdet = 0;
    auto try_discrepancy = [&](const Eigen::MatrixXd& l, const Eigen::VectorXd& w, double& out) {
        Eigen::LLT<Eigen::MatrixXd> llt(sigma_of(l, w));
        if (llt.info() != Eigen::Success) return false;
        logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
        out = logdet + llt.solve(s).trace();
        return std::isfinite(out);
    };

    // Loadings that maximize the likelihood for fixed uniquenesses: the
    // leading eigenvectors of W^-1/2 S W^-1/2, scaled by sqrt(theta - 1).
    auto profile_load = [&](const Eigen::VectorXd& w) {
        const Eigen::VectorXd root = w.cwiseSqrt();
        const Eigen::MatrixXd scaled = root.cwiseInverse().asDiagonal() * s * root.cwiseInverse().asDiagonal();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(scaled);
        Eigen::MatrixXd l(q, p);
        for (int f = 0; f < p; ++f) {
            const int idx = q - 1 - f;
            l.col(f) = root.asDiagonal() * eig.eigenvectors().col(idx) * std::sqrt(std::max(eig.eigenvalues()[idx] - 1.0, 0.0));
        }
        return l;
    };
    // One cycle of the uniqueness map: profile the loadings, then one EM
    // update. Both halves raise the likelihood.
    auto em_map = [&](const Eigen::VectorXd& w, Eigen::VectorXd& w_out) {
        Eigen::MatrixXd l_out;
        em_step(profile_load(w), w, l_out, w_out);
    };
    auto objective = [&](const Eigen::VectorXd& w, double& out) { return try_discrepancy(profile_load(w), w, out); };

    // EM with squared extrapolation (SQUAREM) on the uniquenesses. A factor
    // measured by only two variables leaves a nearly flat ridge that plain
    // EM crawls along. Working in the identified uniqueness space keeps the
    // free rotation of the loadings out of the extrapolation, and a step is
    // kept only if it does not lower the likelihood.
    double disc = 0;
    if (!objective(omega, disc)) throw NumericalError("starting values are not positive definite");
    double dev = m.v * logdet;
    m.loglik_trace.push_back(-0.5 * m.v * disc);
    int it = 0;
    bool converged = false;
    Eigen::VectorXd w1, w2, w3;
    while (it < opts.max_iterations) {
        ++it;
        em_map(omega, w1);
        em_map(w1, w2);
        double next = 0;
        if (!objective(w2, next)) throw NumericalError("EM iterate lost positive definiteness");
        double next_logdet = logdet;
        const Eigen::VectorXd r = w1 - omega, v = w2 - w1 - r;
        if (v.norm() > 0 && r.norm() > 0) {
            double alpha = std::min(-r.norm() / v.norm(), -1.0);
            for (int attempt = 0; attempt < 8 && alpha < -1.0; ++attempt, alpha = (alpha - 1.0) / 2.0) {
                const Eigen::VectorXd wx = (omega - 2.0 * alpha * r + alpha * alpha * v).cwiseMax(floor);
                double dx = 0;
                if (!objective(wx, dx)) continue;
                em_map(wx, w3);
                double d3 = 0;
                if (objective(w3, d3) && d3 <= next) {
                    w2 = w3;
                    next = d3;
                    next_logdet = logdet;
                    break;
                }
            }
        }
        omega = w2;
        m.loglik_trace.push_back(-0.5 * m.v * next);
        const double next_dev = m.v * next_logdet;
        const double dev_change = std::fabs(next_dev - dev) / std::max(std::fabs(dev), 1.0);
        dev = next_dev;
        disc = next;
        if (dev_change < opts.tolerance) {
            converged = true;
            break;
        }
    }
    load = profile_load(omega);

    m.beta = load.transpose();
    m.omega = omega;
    m.converged = converged;
    m.iterations = it;
    m.log_likelihood = m.loglik_trace.back();
    m.deviance = factor_deviance(m);
    m.floored.assign(static_cast<std::size_t>(q), false);
    for (int j = 0; j < q; ++j) m.floored[static_cast<std::size_t>(j)] = omega[j] <= floor * (1 + 1e-12);
    return m;
}

// ------------------------------------------------------ model selection

enum class Criterion { aic, bic };

inline Criterion parse_criterion(const std::string& s) {
    if (s == "aic" || s == "AIC") return Criterion::aic;
    if (s == "bic" || s == "BIC") return Criterion::bic;
    throw ConfigError("unknown criterion '" + s + "' (expected aic or bic)");
}

inline std::string to_string(Criterion c) { return c == Criterion::aic ? "aic" : "bic"; }

struct InformationCriteria {
    double aic = 0;
    double bic = 0;
    int d_p = 0;
    double deviance = 0;
};

/// AIC = D + 2 d_p, BIC = D + ln(v) d_p with D = v ln|beta'beta + Omega|.
inline InformationCriteria information_criteria(const FactorModel& model, int v, int q) {
    InformationCriteria ic;
    ic.d_p = factor_parameter_count(q, model.p);
    FactorModel tmp = model;
    tmp.v = v;
    ic.deviance = factor_deviance(tmp);
    ic.aic = ic.deviance + 2.0 * ic.d_p;
    ic.bic = ic.deviance + std::log(static_cast<double>(v)) * ic.d_p;
    return ic;
}

struct SelectionRow {
    int p = 0;
    double aic = 0;
    double bic = 0;
    int d_p = 0;
    bool converged = true;

    double value(Criterion c) const { return c == Criterion::aic ? aic : bic; }
};

struct SelectionTable {
    std::vector<SelectionRow> rows;
    Criterion criterion = Criterion::bic;
    int chosen_p = -1;
    std::vector<FactorModel> fits;  // aligned with rows when produced by select_p
};

/// Argmin of the criterion over converged, identifiable candidates.
inline SelectionTable choose_factor_count(std::vector<SelectionRow> rows, int q, Criterion criterion) {
    const int pmax = max_factors(q);
    for (const auto& r : rows)
        if (r.p < 0 || r.p > pmax)
            throw ConfigError("candidate p=" + std::to_string(r.p) + " is not identifiable for q=" + std::to_string(q));
    SelectionTable t;
    t.rows = std::move(rows);
    t.criterion = criterion;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : t.rows) {
        if (!r.converged) continue;
        if (r.value(criterion) < best) {
            best = r.value(criterion);
            t.chosen_p = r.p;
        }
    }
    if (t.chosen_p < 0) throw NumericalError("no candidate factor model converged");
    return t;
}

/// Fit every identifiable p (concurrently) and pick the best by the criterion.
inline SelectionTable select_p(const FactorProblem& problem, Criterion criterion, const FitOptions& opts = {}) {
    const int pmax = max_factors(problem.q());
    std::vector<FactorModel> fits(static_cast<std::size_t>(pmax + 1));
    parallel_for(fits.size(), [&](std::size_t p) { fits[p] = fit_fa(problem, static_cast<int>(p), opts); });
    std::vector<SelectionRow> rows;
    for (const auto& f : fits) {
        const auto ic = information_criteria(f, problem.v(), problem.q());
        rows.push_back({f.p, ic.aic, ic.bic, ic.d_p, f.converged});
    }
    SelectionTable t = choose_factor_count(std::move(rows), problem.q(), criterion);
    t.fits = std::move(fits);
    return t;
}

// --------------------------------------------------------------- rotation

/// Sum over factors of the variance of the squared loadings in that row.
inline double varimax_criterion(const Eigen::MatrixXd& beta) {
    double total = 0;
    for (Eigen::Index i = 0; i < beta.rows(); ++i) {
        const Eigen::ArrayXd sq = beta.row(i).array().square();
        total += (sq - sq.mean()).square().mean();
    }
    return total;
}

struct VarimaxOptions {
    int max_iterations = 1000;
    double tolerance = 1e-12;
};

/// Orthogonal rotation beta* = Psi beta maximizing varimax_criterion. Each
/// factor's largest-magnitude loading is made positive and factors are
/// ordered by decreasing sum of squared loadings.
inline FactorModel varimax(const FactorModel& model, const VarimaxOptions& opts = {}) {
    if (model.p < 1) throw ConfigError("varimax needs at least one factor");
    const int p = model.p;
    const int q = model.q;
    const Eigen::MatrixXd x = model.beta.transpose();  // q x p
    Eigen::MatrixXd tt = Eigen::MatrixXd::Identity(p, p);
    if (p > 1) {
        double d = 0;
        for (int it = 0; it < opts.max_iterations; ++it) {
            const Eigen::MatrixXd z = x * tt;
            const Eigen::RowVectorXd colsq = z.array().square().colwise().sum();
            const Eigen::MatrixXd target =
                z.array().cube().matrix() - z * (colsq / static_cast<double>(q)).asDiagonal();
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(x.transpose() * target, Eigen::ComputeFullU | Eigen::ComputeFullV);
            tt = svd.matrixU() * svd.matrixV().transpose();
            const double past = d;
            d = svd.singularValues().sum();
            if (d < past * (1.0 + opts.tolerance)) break;
        }
    }
    Eigen::MatrixXd psi = tt.transpose();
    Eigen::MatrixXd rotated = psi * model.beta;

    for (int i = 0; i < p; ++i) {
        Eigen::Index j;
        rotated.row(i).cwiseAbs().maxCoeff(&j);
        if (rotated(i, j) < 0) {
            rotated.row(i) *= -1.0;
            psi.row(i) *= -1.0;
        }
    }
    std::vector<int> order(static_cast<std::size_t>(p));
    std::iota(order.begin(), order.end(), 0);
    const Eigen::VectorXd ss = rotated.rowwise().squaredNorm();
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return ss[a] > ss[b]; });
    Eigen::MatrixXd sorted_beta(p, q), sorted_psi(p, p);
    for (int i = 0; i < p; ++i) {
        sorted_beta.row(i) = rotated.row(order[static_cast<std::size_t>(i)]);
        sorted_psi.row(i) = psi.row(order[static_cast<std::size_t>(i)]);
    }

    FactorModel out = model;
    out.beta = sorted_beta;
    out.rotation = sorted_psi * model.rotation;
    return out;
}

// ------------------------------------------------------------------ scores

struct FactorLabelRule {
    std::string label;
    std::vector<std::string> anchors;
};

inline std::vector<FactorLabelRule> default_label_rules() {
    return {{"efficiency", {"wfh_eff_COVID_quant"}}, {"competence", {"prom_eff_1day_quant", "prom_eff_5day_quant"}}};
}

/// Rules are applied in order; each claims the unclaimed factor with the
/// largest squared loading mass on its anchors. Unclaimed factors become
/// "factor<i>".
inline std::vector<std::string> label_factors(const FactorModel& model,
                                              const std::vector<FactorLabelRule>& rules = default_label_rules()) {
    std::vector<std::string> labels(static_cast<std::size_t>(model.p));
    for (const auto& rule : rules) {
        std::vector<Eigen::Index> cols;
        for (const auto& a : rule.anchors) {
            auto it = std::find(model.codes.begin(), model.codes.end(), a);
            if (it != model.codes.end()) cols.push_back(it - model.codes.begin());
        }
        if (cols.empty()) continue;
        int best = -1;
        double best_mass = -1;
        for (int i = 0; i < model.p; ++i) {
            if (!labels[static_cast<std::size_t>(i)].empty()) continue;
            double mass = 0;
            for (auto c : cols) mass += model.beta(i, c) * model.beta(i, c);
            if (mass > best_mass) {
                best_mass = mass;
                best = i;
            }
        }
        if (best >= 0) labels[static_cast<std::size_t>(best)] = rule.label;
    }
    for (int i = 0; i < model.p; ++i)
        if (labels[static_cast<std::size_t>(i)].empty()) labels[static_cast<std::size_t>(i)] = "factor" + std::to_string(i + 1);
    return labels;
}

struct FactorScores {
    Eigen::MatrixXd scores;  // n x p
    std::vector<std::string> labels;
    Eigen::VectorXd ss_loadings;
    Eigen::VectorXd proportion_var;
    Eigen::VectorXd cumulative_var;

    Eigen::VectorXd column(std::string_view label) const {
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == label) return scores.col(static_cast<Eigen::Index>(i));
        throw ConfigError("no factor labelled '" + std::string(label) + "'");
    }
};

/// X-hat = (Y - M lambda)(beta'beta + Omega)^-1 beta'.
inline FactorScores predict_scores(const FactorModel& model, const FactorProblem& problem,
                                   const std::vector<FactorLabelRule>& rules = default_label_rules()) {
    if (model.q != problem.q()) throw ConfigError("model and problem disagree on the number of components");
    FactorScores fs;
    const Eigen::MatrixXd centered = problem.y() - problem.mean_design() * model.lambda;
    Eigen::LLT<Eigen::MatrixXd> llt(model.implied_covariance());
    if (llt.info() != Eigen::Success) throw NumericalError("implied covariance is singular; cannot predict scores");
    // (Y - M lambda) Sigma^-1 beta' = ((Sigma^-1 beta') ' (Y - M lambda)')'
    const Eigen::MatrixXd weights = llt.solve(model.beta.transpose());  // q x p
    fs.scores = centered * weights;
    fs.labels = label_factors(model, rules);
    fs.ss_loadings = model.p > 0 ? Eigen::VectorXd(model.beta.rowwise().squaredNorm()) : Eigen::VectorXd();
    fs.proportion_var = fs.ss_loadings / static_cast<double>(model.q);
    fs.cumulative_var = fs.proportion_var;
    for (Eigen::Index i = 1; i < fs.cumulative_var.size(); ++i) fs.cumulative_var[i] += fs.cumulative_var[i - 1];
    return fs;
}

// ----------------------------------------------------------------- reports

struct LoadingsRow {
    std::string code;
    std::vector<double> loadings;  // zeroed below the display cutoff
    double uniqueness = 0;
};

inline std::vector<LoadingsRow> loadings_report(const FactorModel& model, double display_cutoff = 0.1) {
    std::vector<LoadingsRow> rows;
    for (int j = 0; j < model.q; ++j) {
        LoadingsRow r{model.codes[static_cast<std::size_t>(j)], {}, model.omega[j]};
        for (int i = 0; i < model.p; ++i) {
            const double l = model.beta(i, j);
            r.loadings.push_back(std::fabs(l) < display_cutoff ? 0.0 : l);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

/// Table-3 layout. A cutoff of zero prints loadings at full precision.
inline Table loadings_table(const FactorModel& model, double display_cutoff = 0.1) {
    Table t{"Factor loadings", {"Variable"}, {}};
    for (int i = 0; i < model.p; ++i) t.header.push_back("Factor " + std::to_string(i + 1));
    t.header.push_back("Uniqueness");
    for (const auto& r : loadings_report(model, display_cutoff)) {
        std::vector<std::string> row{r.code};
        for (double l : r.loadings)
            row.push_back(display_cutoff <= 0 ? detail::format_roundtrip(l) : (l == 0.0 ? "0" : format_fixed(l, 3)));
        row.push_back(format_fixed(r.uniqueness, 3));
        t.add_row(std::move(row));
    }
    return t;
}

/// Table-2 layout.
inline Table factor_summary_table(const FactorScores& fs) {
    Table t{"Factor analysis results", {""}, {}};
    for (Eigen::Index i = 0; i < fs.ss_loadings.size(); ++i) t.header.push_back("Factor " + std::to_string(i + 1));
    auto row = [&](const std::string& name, const Eigen::VectorXd& v) {
        std::vector<std::string> r{name};
        for (Eigen::Index i = 0; i < v.size(); ++i) r.push_back(format_fixed(v[i], 3));
        t.add_row(std::move(r));
    };
    row("SS loadings", fs.ss_loadings);
    row("Proportion Var", fs.proportion_var);
    row("Cumulative Var", fs.cumulative_var);
    std::vector<std::string> labels{"Label"};
    for (const auto& l : fs.labels) labels.push_back(l);
    t.add_row(std::move(labels));
    return t;
}

/// Table-1 layout.
inline Table selection_table(const SelectionTable& sel) {
    Table t{"AIC and BIC", {"p"}, {}};
    for (const auto& r : sel.rows) t.header.push_back(std::to_string(r.p));
    std::vector<std::string> aic{"AIC"}, bic{"BIC"}, dp{"d_p"}, conv{"Converged"};
    for (const auto& r : sel.rows) {
        aic.push_back(format_grouped(r.aic));
        bic.push_back(format_grouped(r.bic));
        dp.push_back(std::to_string(r.d_p));
        conv.push_back(r.converged ? "yes" : "no");
    }
    t.add_row(std::move(aic));
    t.add_row(std::move(bic));
    t.add_row(std::move(dp));
    t.add_row(std::move(conv));
    return t;
}

// ------------------------------------------------------------- persistence

namespace detail {

inline void write_row(std::ostream& os, const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    for (Eigen::Index j = 0; j < row.size(); ++j) os << (j ? " " : "") << format_roundtrip(row[j]);
    os << '\n';
}

inline double read_number(std::istream& is) {
    std::string tok;
    if (!(is >> tok)) throw IoError("truncated factor model document");
    auto v = parse_double(tok);
    if (!v) throw IoError("bad number '" + tok + "' in factor model document");
    return *v;
}

inline void expect_key(std::istream& is, const std::string& key) {
    std::string tok;
    if (!(is >> tok) || tok != key) throw IoError("factor model document: expected '" + key + "', found '" + tok + "'");
}

}  // namespace detail

/// Plain-text matrix document with a metadata header.
inline std::string factor_model_text(const FactorModel& m) {
    std::ostringstream os;
    os << "# latent_hazard factor model\n";
    os << "p " << m.p << "\nq " << m.q << "\nn " << m.n << "\nv " << m.v << "\nk " << m.lambda.rows() << '\n';
    os << "converged " << (m.converged ? 1 : 0) << "\niterations " << m.iterations << '\n';
    os << "deviance " << detail::format_roundtrip(m.deviance) << '\n';
    os << "codes";
    for (const auto& c : m.codes) os << ' ' << c;
    os << "\ncenter\n";
    detail::write_row(os, m.standardization.center.transpose());
    os << "scale\n";
    detail::write_row(os, m.standardization.scale.transpose());
    os << "beta\n";
    for (int i = 0; i < m.p; ++i) detail::write_row(os, m.beta.row(i));
    os << "omega\n";
    detail::write_row(os, m.omega.transpose());
    os << "lambda\n";
    for (Eigen::Index i = 0; i < m.lambda.rows(); ++i) detail::write_row(os, m.lambda.row(i));
    os << "rotation\n";
    for (int i = 0; i < m.p; ++i) detail::write_row(os, m.rotation.row(i));
    return os.str();
}

inline void save_factor_model(const FactorModel& m, const std::string& path) { write_text(path, factor_model_text(m)); }

inline FactorModel parse_factor_model(std::istream& is) {
    std::string line;
    std::getline(is, line);
    FactorModel m;
    int k = 0, conv = 0;
    detail::expect_key(is, "p"), is >> m.p;
    detail::expect_key(is, "q"), is >> m.q;
    detail::expect_key(is, "n"), is >> m.n;
    detail::expect_key(is, "v"), is >> m.v;
    detail::expect_key(is, "k"), is >> k;
    detail::expect_key(is, "converged"), is >> conv;
    detail::expect_key(is, "iterations"), is >> m.iterations;
    if (!is) throw IoError("malformed factor model header");
    m.converged = conv != 0;
    detail::expect_key(is, "deviance");
    m.deviance = detail::read_number(is);
    detail::expect_key(is, "codes");
    m.codes.resize(static_cast<std::size_t>(m.q));
    for (auto& c : m.codes) is >> c;
    auto read_matrix = [&](const std::string& key, int rows, int cols) {
        detail::expect_key(is, key);
        Eigen::MatrixXd out(rows, cols);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) out(i, j) = detail::read_number(is);
        return out;
    };
    m.standardization.center = read_matrix("center", 1, m.q).transpose();
    m.standardization.scale = read_matrix("scale", 1, m.q).transpose();
    m.beta = read_matrix("beta", m.p, m.q);
    m.omega = read_matrix("omega", 1, m.q).transpose();
    m.lambda = read_matrix("lambda", k, m.q);
    m.rotation = read_matrix("rotation", m.p, m.p);
    m.floored.assign(static_cast<std::size_t>(m.q), false);
    return m;
}

inline FactorModel load_factor_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open factor model '" + path + "'");
    return parse_factor_model(in);
}

}  // namespace lh
