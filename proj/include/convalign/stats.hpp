#pragma once

// Outcome association: ordinary least squares, a clinician random-intercept
// linear mixed model fitted by REML, Benjamini-Hochberg step-up and score
// transforms.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "convalign/error.hpp"

namespace convalign::stats {

enum class Method { OLS, LMM };

inline std::string_view to_string(Method m) noexcept { return m == Method::OLS ? "OLS" : "LMM"; }

struct FitResult {
    double estimate = 0.0;
    double se = 0.0;
    double p_value = 1.0;
    double t_statistic = 0.0;
    std::size_t n_used = 0;
    std::size_t n_params = 0;
    Method method = Method::OLS;
    bool degenerate = false; // residual variance is zero; SE reported as 0
    double sigma2 = 0.0;     // residual variance estimate
    double rss = 0.0;        // residual sum of squares (GLS-weighted for LMM)
    std::optional<double> lambda; // sigma_u^2 / sigma_e^2 for LMM
    Eigen::VectorXd coefficients;
    Eigen::MatrixXd covariance;
};

inline double two_sided_t_p(double t, double df) {
    if (!std::isfinite(t)) return 0.0;
    boost::math::students_t dist(df);
    return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

namespace detail {

inline void check_design(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, std::size_t coef) {
    if (X.rows() != y.size()) throw Error(Errc::ShapeMismatch, "design rows differ from outcome length");
    if (coef >= static_cast<std::size_t>(X.cols())) throw Error(Errc::ShapeMismatch, "coefficient index out of range");
    if (X.rows() <= X.cols())
        throw Error(Errc::TooFewRows, std::to_string(X.rows()) + " rows for " + std::to_string(X.cols()) + " parameters");
    if (!X.allFinite() || !y.allFinite()) throw Error(Errc::ShapeMismatch, "design or outcome not finite");
}

inline void finish(FitResult& r, std::size_t coef, double scale) {
    const double df = static_cast<double>(r.n_used - r.n_params);
    r.estimate = r.coefficients(static_cast<Eigen::Index>(coef));
    r.degenerate = r.rss <= 1e-24 * std::max(1.0, scale);
    if (r.degenerate) {
        r.se = 0.0;
        r.t_statistic = r.estimate == 0.0 ? 0.0 : std::copysign(INFINITY, r.estimate);
        r.p_value = r.estimate == 0.0 ? 1.0 : 0.0;
        return;
    }
    const auto c = static_cast<Eigen::Index>(coef);
    r.se = std::sqrt(r.covariance(c, c));
    r.t_statistic = r.estimate / r.se;
    r.p_value = two_sided_t_p(r.t_statistic, df);
}

} // namespace detail

// Least squares via column-pivoted QR; SE from sigma^2 (X'X)^-1 with sigma^2
// on n - p degrees of freedom; two-sided t test for column `coef`.
inline FitResult fit_ols(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, std::size_t coef) {
    detail::check_design(X, y, coef);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    if (qr.rank() < X.cols()) throw Error(Errc::RankDeficient, "design matrix is rank deficient");
    FitResult r;
    r.method = Method::OLS;
    r.n_used = static_cast<std::size_t>(X.rows());
    r.n_params = static_cast<std::size_t>(X.cols());
    r.coefficients = qr.solve(y);
    r.rss = (y - X * r.coefficients).squaredNorm();
    r.sigma2 = r.rss / static_cast<double>(r.n_used - r.n_params);
    const auto p = X.cols();
    Eigen::MatrixXd R = qr.matrixR().topLeftCorner(p, p).triangularView<Eigen::Upper>();
    Eigen::MatrixXd Rinv = R.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(p, p));
    Eigen::MatrixXd unpermuted = Rinv * Rinv.transpose();
    const auto& perm = qr.colsPermutation();
    r.covariance = r.sigma2 * (perm * unpermuted * perm.transpose());
    detail::finish(r, coef, y.squaredNorm());
    return r;
}

struct MixedOptions {
    std::optional<double> fixed_lambda; // skip the search and use this ratio
    double tolerance = 1e-8;            // absolute, on lambda
    double lambda_max = 1e4;
};

struct RemlTracePoint {
    double lambda;
    double objective; // -2 * restricted log-likelihood, up to a constant
};

// Random-intercept model y = X b + Z u + e with u ~ N(0, lambda * s2 I) per
// cluster. The restricted likelihood is profiled over s2 and maximized over
// lambda by a log-spaced grid followed by golden-section refinement.
class RandomInterceptModel {
public:
    RandomInterceptModel(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const std::vector<std::string>& clusters)
        : n_(static_cast<std::size_t>(X.rows())), p_(static_cast<std::size_t>(X.cols())) {
        if (clusters.size() != n_) throw Error(Errc::ShapeMismatch, "one cluster label per row required");
        std::map<std::string, std::size_t> index;
        for (const auto& c : clusters) index.try_emplace(c, index.size());
        if (index.size() < 2) throw Error(Errc::Singular, "random-intercept model needs >= 2 clusters");
        const auto p = X.cols();
        groups_.assign(index.size(), Group{0, Eigen::MatrixXd::Zero(p, p), Eigen::VectorXd::Zero(p), 0.0,
                                           Eigen::VectorXd::Zero(p), 0.0});
        for (std::size_t i = 0; i < n_; ++i) {
            auto& g = groups_[index[clusters[i]]];
            const auto xi = X.row(static_cast<Eigen::Index>(i)).transpose();
            const double yi = y(static_cast<Eigen::Index>(i));
            ++g.n;
            g.xtx.noalias() += xi * xi.transpose();
            g.xty += xi * yi;
            g.yty += yi * yi;
            g.sx += xi;
            g.sy += yi;
        }
        scale_ = y.squaredNorm();
    }

    std::size_t n_clusters() const noexcept { return groups_.size(); }

    struct Evaluation {
        double objective;
        Eigen::VectorXd beta;
        Eigen::MatrixXd a_inv; // (X' V^-1 X)^-1
        double rvr;            // r' V^-1 r
    };

    Evaluation evaluate(double lambda) const {
        const auto p = static_cast<Eigen::Index>(p_);
        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
        Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
        double c = 0.0, logdet_v = 0.0;
        for (const auto& g : groups_) {
            const double n = static_cast<double>(g.n);
            const double w = lambda / (1.0 + lambda * n);
            A += g.xtx - w * g.sx * g.sx.transpose();
            b += g.xty - w * g.sx * g.sy;
            c += g.yty - w * g.sy * g.sy;
            logdet_v += std::log1p(lambda * n);
        }
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        if (llt.info() != Eigen::Success) throw Error(Errc::Singular, "X' V^-1 X is not positive definite");
        Evaluation e;
        e.beta = llt.solve(b);
        e.rvr = std::max(0.0, c - b.dot(e.beta));
        e.a_inv = llt.solve(Eigen::MatrixXd::Identity(p, p));
        double logdet_a = 0.0;
        const Eigen::MatrixXd L = llt.matrixL();
        for (Eigen::Index i = 0; i < p; ++i) logdet_a += 2.0 * std::log(L(i, i));
        const double dof = static_cast<double>(n_ - p_);
        const double s2 = std::max(e.rvr / dof, std::numeric_limits<double>::min());
        e.objective = dof * std::log(s2) + logdet_v + logdet_a;
        return e;
    }

    double optimize(const MixedOptions& opt, std::vector<RemlTracePoint>* trace = nullptr) const {
        auto f = [&](double l) {
            const double v = evaluate(l).objective;
            if (trace) trace->push_back({l, v});
            return v;
        };
        std::vector<double> grid{0.0};
        for (double e = -4.0; e <= std::log10(opt.lambda_max) + 1e-12; e += 0.25) grid.push_back(std::pow(10.0, e));
        std::vector<double> values;
        values.reserve(grid.size());
        for (double l : grid) values.push_back(f(l));
        for (double v : values)
            if (!std::isfinite(v)) throw Error(Errc::NonConvergence, "restricted likelihood not finite on the grid");
        std::size_t best = 0;
        for (std::size_t i = 1; i < values.size(); ++i)
            if (values[i] < values[best] - 1e-12 * std::abs(values[best])) best = i;
        if (best + 1 == grid.size())
            throw Error(Errc::NonConvergence, "variance ratio runs to the search bound " + std::to_string(opt.lambda_max));
        double lo = grid[best == 0 ? 0 : best - 1];
        double hi = grid[best + 1];
        constexpr double invphi = 0.6180339887498949;
        double x1 = hi - invphi * (hi - lo), x2 = lo + invphi * (hi - lo);
        double f1 = f(x1), f2 = f(x2);
        for (int it = 0; it < 500 && hi - lo > opt.tolerance; ++it) {
            if (f1 <= f2) {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - invphi * (hi - lo);
                f1 = f(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + invphi * (hi - lo);
                f2 = f(x2);
            }
        }
        if (hi - lo > opt.tolerance) throw Error(Errc::NonConvergence, "golden-section search did not converge");
        const double mid = 0.5 * (lo + hi);
        // The boundary can win when the maximum sits at lambda = 0.
        return (best == 0 && values[0] <= f(mid)) ? 0.0 : mid;
    }

    FitResult fit(std::size_t coef, const MixedOptions& opt = {}, std::vector<RemlTracePoint>* trace = nullptr) const {
        const double lambda = opt.fixed_lambda ? *opt.fixed_lambda : optimize(opt, trace);
        if (lambda < 0.0 || !std::isfinite(lambda)) throw Error(Errc::ConfigInvalid, "lambda must be finite and >= 0");
        const Evaluation e = evaluate(lambda);
        FitResult r;
        r.method = Method::LMM;
        r.n_used = n_;
        r.n_params = p_;
        r.lambda = lambda;
        r.coefficients = e.beta;
        r.rss = e.rvr;
        r.sigma2 = e.rvr / static_cast<double>(n_ - p_);
        r.covariance = r.sigma2 * e.a_inv;
        detail::finish(r, coef, scale_);
        return r;
    }

private:
    struct Group {
        std::size_t n;
        Eigen::MatrixXd xtx;
        Eigen::VectorXd xty;
        double yty;
        Eigen::VectorXd sx;
        double sy;
    };
    std::size_t n_, p_;
    std::vector<Group> groups_;
    double scale_ = 1.0;
};

inline FitResult fit_random_intercept(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                      const std::vector<std::string>& clusters, std::size_t coef,
                                      const MixedOptions& opt = {}, std::vector<RemlTracePoint>* trace = nullptr) {
    detail::check_design(X, y, coef);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    if (qr.rank() < X.cols()) throw Error(Errc::RankDeficient, "design matrix is rank deficient");
    return RandomInterceptModel(X, y, clusters).fit(coef, opt, trace);
}

// ---------------------------------------------------------------------------
// Benjamini-Hochberg

struct MultipleTestReport {
    std::size_t m = 0;
    double q = 0.2;
    std::vector<std::size_t> order;   // input indices sorted by ascending p
    std::vector<double> sorted_p;
    std::vector<bool> reject;         // input order
    std::vector<double> adjusted;     // BH-adjusted p-values, input order
    std::size_t n_rejected = 0;
};

// Step-up: reject the hypotheses with the i smallest p-values, where i is the
// largest rank with p_(i) <= i q / m.
inline MultipleTestReport bh_adjust(const std::vector<double>& pvalues, double q = 0.2) {
    if (pvalues.empty()) throw Error(Errc::InvalidP, "no p-values");
    for (double p : pvalues)
        if (!(p >= 0.0 && p <= 1.0)) throw Error(Errc::InvalidP, "p-value outside [0, 1]: " + std::to_string(p));
    MultipleTestReport r;
    r.m = pvalues.size();
    r.q = q;
    r.order.resize(r.m);
    std::iota(r.order.begin(), r.order.end(), std::size_t{0});
    std::stable_sort(r.order.begin(), r.order.end(),
                     [&](std::size_t a, std::size_t b) { return pvalues[a] < pvalues[b]; });
    for (std::size_t i : r.order) r.sorted_p.push_back(pvalues[i]);
    const double m = static_cast<double>(r.m);
    for (std::size_t i = r.m; i >= 1; --i) {
        if (r.sorted_p[i - 1] <= static_cast<double>(i) / m * q) {
            r.n_rejected = i;
            break;
        }
    }
    // Tied p-values straddling the cut are all rejected.
    while (r.n_rejected > 0 && r.n_rejected < r.m && r.sorted_p[r.n_rejected] == r.sorted_p[r.n_rejected - 1])
        ++r.n_rejected;
    r.reject.assign(r.m, false);
    for (std::size_t i = 0; i < r.n_rejected; ++i) r.reject[r.order[i]] = true;
    r.adjusted.assign(r.m, 1.0);
    double running = 1.0;
    for (std::size_t i = r.m; i >= 1; --i) {
        running = std::min(running, r.sorted_p[i - 1] * m / static_cast<double>(i));
        r.adjusted[r.order[i - 1]] = running;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Transforms

enum class Transform { Identity, LogShift, RankInverseNormal };

inline std::string_view to_string(Transform t) noexcept {
    switch (t) {
    case Transform::Identity: return "identity";
    case Transform::LogShift: return "log-shift";
    case Transform::RankInverseNormal: return "rank-inverse-normal";
    }
    return "identity";
}

inline Transform parse_transform(std::string_view s) {
    if (s == "identity") return Transform::Identity;
    if (s == "log-shift") return Transform::LogShift;
    if (s == "rank-inverse-normal") return Transform::RankInverseNormal;
    throw Error(Errc::ConfigInvalid, "unknown transform \"" + std::string(s) + "\"");
}

struct TransformResult {
    std::vector<std::optional<double>> values;
    Transform method = Transform::Identity;
    double shift = 0.0; // log-shift: log(x + shift)
};

// Blanks pass through. Log-shift uses log(x - min + epsilon); rank-inverse-
// normal uses Blom scores with average ranks for ties.
inline TransformResult normalize_scores(const std::vector<std::optional<double>>& values, Transform method,
                                        double epsilon = 1e-3) {
    TransformResult r;
    r.method = method;
    r.values = values;
    if (method == Transform::Identity) return r;
    std::vector<std::size_t> present;
    for (std::size_t i = 0; i < values.size(); ++i)
        if (values[i]) present.push_back(i);
    if (present.empty()) return r;
    if (method == Transform::LogShift) {
        double lo = INFINITY;
        for (std::size_t i : present) lo = std::min(lo, *values[i]);
        r.shift = -lo + epsilon;
        for (std::size_t i : present) r.values[i] = std::log(*values[i] + r.shift);
        return r;
    }
    std::vector<std::size_t> order = present;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return *values[a] < *values[b]; });
    const double n = static_cast<double>(order.size());
    const boost::math::normal standard;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && *values[order[j + 1]] == *values[order[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        const double z = boost::math::quantile(standard, (rank - 0.375) / (n + 0.25));
        for (std::size_t t = i; t <= j; ++t) r.values[order[t]] = z;
        i = j + 1;
    }
    return r;
}

inline std::optional<double> skewness(const std::vector<std::optional<double>>& values) {
    std::vector<double> xs;
    for (const auto& v : values)
        if (v) xs.push_back(*v);
    if (xs.size() < 3) return std::nullopt;
    const double n = static_cast<double>(xs.size());
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    double m2 = 0.0, m3 = 0.0;
    for (double x : xs) {
        m2 += (x - mean) * (x - mean);
        m3 += (x - mean) * (x - mean) * (x - mean);
    }
    m2 /= n;
    m3 /= n;
    if (m2 <= 0.0) return 0.0;
    return m3 / std::pow(m2, 1.5);
}

// ---------------------------------------------------------------------------
// Design assembly

enum class Outcome { Option12, Dcs };

inline std::string_view to_string(Outcome o) noexcept { return o == Outcome::Option12 ? "OPTION12" : "DCS"; }

struct AnalysisRow {
    std::string conversation_id;
    std::string clinician_id;
    std::optional<double> age;
    std::string sex;
    std::string race;
    std::string arm;
    std::optional<double> option12;
    std::optional<double> dcs;
    std::optional<double> predictor;

    std::optional<double> outcome(Outcome o) const { return o == Outcome::Option12 ? option12 : dcs; }
};

struct RegressionSpec {
    Outcome outcome = Outcome::Option12;
    bool adjusted = false;  // add age, sex, race and trial arm
    bool clustered = false; // clinician random intercept
    // Reference level per categorical covariate; defaults to the smallest level.
    std::map<std::string, std::string> reference_levels;
};

struct Design {
    Eigen::MatrixXd X;
    Eigen::VectorXd y;
    std::vector<std::string> clusters;
    std::vector<std::string> columns;
    std::size_t predictor_column = 1;
};

inline std::string level_or_missing(const std::string& s) { return s.empty() ? "missing" : s; }

// Column 0 is the intercept, column 1 the predictor; rows with a blank
// predictor, a missing outcome or (when adjusted) a missing age are dropped.
// Missing sex/race/arm become an explicit "missing" level.
inline Design build_design(const std::vector<AnalysisRow>& rows, const RegressionSpec& spec) {
    std::vector<const AnalysisRow*> used;
    for (const auto& r : rows) {
        if (!r.predictor || !std::isfinite(*r.predictor) || !r.outcome(spec.outcome)) continue;
        if (spec.adjusted && !r.age) continue;
        used.push_back(&r);
    }
    Design d;
    d.columns = {"intercept", "predictor"};
    struct Factor {
        std::string name;
        std::string AnalysisRow::*field;
        std::vector<std::string> levels; // non-reference levels
    };
    std::vector<Factor> factors;
    if (spec.adjusted) {
        d.columns.push_back("age");
        for (auto [name, field] : {std::pair{"sex", &AnalysisRow::sex}, std::pair{"race", &AnalysisRow::race},
                                   std::pair{"arm", &AnalysisRow::arm}}) {
            std::set<std::string> levels;
            for (const auto* r : used) levels.insert(level_or_missing(r->*field));
            if (levels.empty()) continue;
            std::string ref = *levels.begin();
            if (auto it = spec.reference_levels.find(name); it != spec.reference_levels.end() && levels.count(it->second))
                ref = it->second;
            Factor f{name, field, {}};
            for (const auto& l : levels)
                if (l != ref) {
                    f.levels.push_back(l);
                    d.columns.push_back(std::string(name) + "=" + l);
                }
            factors.push_back(std::move(f));
        }
    }
    const auto n = static_cast<Eigen::Index>(used.size());
    d.X = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(d.columns.size()));
    d.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = *used[static_cast<std::size_t>(i)];
        Eigen::Index c = 0;
        d.X(i, c++) = 1.0;
        d.X(i, c++) = *r.predictor;
        if (spec.adjusted) {
            d.X(i, c++) = *r.age;
            for (const auto& f : factors) {
                const std::string level = level_or_missing(r.*(f.field));
                for (const auto& l : f.levels) d.X(i, c++) = level == l ? 1.0 : 0.0;
            }
        }
        d.y(i) = *r.outcome(spec.outcome);
        d.clusters.push_back(level_or_missing(r.clinician_id));
    }
    return d;
}

inline FitResult fit_linear(const RegressionSpec& spec, const std::vector<AnalysisRow>& rows) {
    const Design d = build_design(rows, spec);
    return fit_ols(d.X, d.y, d.predictor_column);
}

inline FitResult fit_random_intercept(const RegressionSpec& spec, const std::vector<AnalysisRow>& rows,
                                      const MixedOptions& opt = {}) {
    const Design d = build_design(rows, spec);
    return fit_random_intercept(d.X, d.y, d.clusters, d.predictor_column, opt);
}

} // namespace convalign::stats
