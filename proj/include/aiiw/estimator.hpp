#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aiiw/error.hpp"
#include "aiiw/intensity.hpp"
#include "aiiw/outcome.hpp"
#include "aiiw/parallel.hpp"
#include "aiiw/records.hpp"
#include "aiiw/rng.hpp"
#include "aiiw/spline.hpp"

namespace aiiw {

// Augmented inverse-intensity-weighted estimator of the spline coefficients
// of the mean curve E[Y(t)] = beta' B(t) on [a, b], for a fixed tilt alpha.
// Per subject,
//
//   m_i = sum_{t_k in S_i} V^-1 B(t_k) (Y(t_k) - E[Y(t_k) | past]) / rho(t_k)
//       + int_a^b V^-1 B(t) E[Y(t) | past] dt,
//
// beta_hat is the mean of the m_i and Var(beta_hat) = sum (m_i - beta)(m_i - beta)' / n^2.

struct AnalysisOptions {
    SplineSpec spec = SplineSpec::default_window();
    IntensityOptions intensity{};
    OutcomeOptions outcome{};
    double positivity_floor = 1e-4;
};

struct NuisanceFits {
    IntensityFit intensity;
    OutcomeFit outcome;
};

inline NuisanceFits fit_nuisance(std::span<const SubjectRecord> data, const AnalysisOptions& opt) {
    return {fit_intensity(data, opt.intensity), fit_outcome_model(data, opt.outcome)};
}

struct InfluenceContribution {
    Eigen::VectorXd m_value;
    Eigen::VectorXd weighted_term;
    Eigen::VectorXd augmentation_term;
};

struct BetaEstimate {
    double alpha = 0.0;
    SplineCoefficients beta;
    Eigen::MatrixXd covariance;
    std::size_t positivity_violations = 0;
    std::vector<Eigen::VectorXd> m_values;
};

/// (1/n^2) sum (m_i - beta)(m_i - beta)'.
inline Eigen::MatrixXd variance_beta(std::span<const Eigen::VectorXd> m_values, const Eigen::VectorXd& beta) {
    const auto p = beta.size();
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(p, p);
    for (const auto& m : m_values) {
        const Eigen::VectorXd d = m - beta;
        cov.selfadjointView<Eigen::Lower>().rankUpdate(d);
    }
    cov = cov.selfadjointView<Eigen::Lower>();
    const double n = static_cast<double>(m_values.size());
    return cov / (n * n);
}

struct TargetEstimate {
    double mu = 0.0;
    double se = 0.0;
};

/// mu_t = beta' B(t) with se^2 = B(t)' Var(beta) B(t).
inline TargetEstimate mu_at(const SplineCoefficients& beta, const Eigen::MatrixXd& covariance,
                            const SplineSpec& spec, double t) {
    const Eigen::VectorXd b = evaluate_basis(spec, t);
    if (beta.size() != b.size() || covariance.rows() != b.size() || covariance.cols() != b.size())
        throw ArgumentError("mu_at: dimension mismatch");
    const double var = b.dot(covariance * b);
    return {beta.dot(b), std::sqrt(std::max(var, 0.0))};
}

class AiiwEstimator {
public:
    explicit AiiwEstimator(SplineSpec spec, double positivity_floor = 1e-4)
        : spec_(std::move(spec)), floor_(positivity_floor) {
        gram_ = gram_matrix(spec_);
        Eigen::LLT<Eigen::MatrixXd> llt(gram_);
        if (llt.info() != Eigen::Success) throw ConfigError("Gram matrix of the spline basis is singular");
        gram_inv_ = llt.solve(Eigen::MatrixXd::Identity(gram_.rows(), gram_.cols()));
        basis_ = basis_at_nodes(spec_);
        nodes_ = spec_.nodes();
    }

    const SplineSpec& spec() const { return spec_; }
    const Eigen::MatrixXd& gram() const { return gram_; }
    const Eigen::MatrixXd& gram_inverse() const { return gram_inv_; }
    double positivity_floor() const { return floor_; }

    /// m(O_i) for each alpha. `violations[a]` is incremented per clipped rho.
    std::vector<InfluenceContribution> contributions(const SubjectRecord& s, const NuisanceFits& fits,
                                                     std::span<const double> alphas,
                                                     std::vector<std::size_t>* violations = nullptr) const {
        const std::size_t na = alphas.size();
        const auto& of = fits.outcome;
        const Eigen::Vector4d& th = of.coefficients;
        const Eigen::Index p = gram_.rows();
        const std::size_t m = nodes_.size();

        std::vector<InfluenceContribution> out(na);
        for (auto& c : out) {
            c.weighted_term = Eigen::VectorXd::Zero(p);
            c.augmentation_term = Eigen::VectorXd::Zero(p);
        }

        // augmentation: midpoint-rule integral of V^-1 B(t) E[Y(t) | past(t)]
        std::vector<double> mu(m);
        {
            std::size_t k = 0;
            ObservedPastFeatures past{0, 0.0, s.baseline_outcome};
            double seg = std::exp(th(0) + th(2) * past.prev_time + th(3) * past.prev_outcome);
            for (std::size_t j = 0; j < m; ++j) {
                const double t = nodes_[j];
                bool moved = false;
                while (k < s.assessments.size() && s.assessments[k].time < t) {
                    past.prev_time = s.assessments[k].time;
                    past.prev_outcome = s.assessments[k].outcome;
                    ++k;
                    moved = true;
                }
                if (moved) {
                    past.stratum_k = static_cast<int>(k);
                    seg = std::exp(th(0) + th(2) * past.prev_time + th(3) * past.prev_outcome);
                }
                mu[j] = seg * std::exp(th(1) * t);
            }
        }
        Eigen::VectorXd cond(static_cast<Eigen::Index>(m));
        for (std::size_t a = 0; a < na; ++a) {
            for (std::size_t j = 0; j < m; ++j) {
                const double e = (alphas[a] == 0.0 && !of.score_ceiling) ? mu[j]
                                                                         : tilted_moments(of, mu[j], alphas[a]).mean();
                cond(static_cast<Eigen::Index>(j)) = e;
            }
            out[a].augmentation_term = gram_inv_ * (basis_.transpose() * cond) * spec_.grid_step();
        }

        // inverse-intensity-weighted residuals over assessments inside [a, b]
        for (std::size_t k = 0; k < s.assessments.size(); ++k) {
            const double t = s.assessments[k].time;
            if (!spec_.contains(t)) continue;
            const double y = s.assessments[k].outcome;
            const ObservedPastFeatures past = past_before_assessment(s, k);
            const double lam = lambda_hat(fits.intensity, t, past);
            const double mu_k = of.mean_parameter(t, past);
            const Eigen::VectorXd wb = gram_inv_ * evaluate_basis(spec_, t);
            for (std::size_t a = 0; a < na; ++a) {
                const double alpha = alphas[a];
                double cond_mean = mu_k;
                double rho = lam;
                if (alpha != 0.0 || of.score_ceiling) {
                    const TiltedMoments tm = tilted_moments(of, mu_k, alpha);
                    cond_mean = tm.mean();
                    if (alpha != 0.0) rho = lam * std::exp(-alpha * y) * tm.m0;
                }
                if (rho < floor_) {
                    rho = floor_;
                    if (violations) ++(*violations)[a];
                }
                out[a].weighted_term += wb * ((y - cond_mean) / rho);
            }
        }
        for (auto& c : out) c.m_value = c.weighted_term + c.augmentation_term;
        return out;
    }

    InfluenceContribution influence_contribution(const SubjectRecord& s, const NuisanceFits& fits, double alpha,
                                                 std::size_t* violations = nullptr) const {
        std::vector<std::size_t> v(1, 0);
        const double a[1] = {alpha};
        auto c = contributions(s, fits, a, &v);
        if (violations) *violations += v[0];
        return std::move(c[0]);
    }

    std::vector<BetaEstimate> estimate(std::span<const SubjectRecord> data, const NuisanceFits& fits,
                                       std::span<const double> alphas) const {
        if (data.size() < static_cast<std::size_t>(spec_.dimension()))
            throw ArgumentError("estimate_beta needs at least p subjects");
        const std::size_t na = alphas.size();
        const auto p = gram_.rows();
        std::vector<BetaEstimate> est(na);
        std::vector<std::size_t> violations(na, 0);
        for (std::size_t a = 0; a < na; ++a) {
            est[a].alpha = alphas[a];
            est[a].beta = Eigen::VectorXd::Zero(p);
            est[a].m_values.reserve(data.size());
        }
        for (const auto& s : data) {
            auto cs = contributions(s, fits, alphas, &violations);
            for (std::size_t a = 0; a < na; ++a) {
                est[a].beta += cs[a].m_value;
                est[a].m_values.push_back(std::move(cs[a].m_value));
            }
        }
        const double n = static_cast<double>(data.size());
        for (std::size_t a = 0; a < na; ++a) {
            est[a].beta /= n;
            est[a].covariance = variance_beta(est[a].m_values, est[a].beta);
            est[a].positivity_violations = violations[a];
            Eigen::VectorXd centred = Eigen::VectorXd::Zero(p);
            double scale = 1.0;
            for (const auto& mv : est[a].m_values) {
                centred += mv - est[a].beta;
                scale = std::max(scale, mv.lpNorm<Eigen::Infinity>());
            }
            if (!(centred.lpNorm<Eigen::Infinity>() / n <= 1e-9 * scale))
                throw NumericError("estimating function does not average to zero at beta_hat");
        }
        return est;
    }

    BetaEstimate estimate_beta(std::span<const SubjectRecord> data, const NuisanceFits& fits, double alpha) const {
        const double a[1] = {alpha};
        return std::move(estimate(data, fits, a)[0]);
    }

private:
    SplineSpec spec_;
    double floor_;
    Eigen::MatrixXd gram_;
    Eigen::MatrixXd gram_inv_;
    Eigen::MatrixXd basis_;
    std::vector<double> nodes_;
};

// ---------------------------------------------------------------------------
// Intervals

struct Interval {
    double low = std::numeric_limits<double>::quiet_NaN();
    double high = std::numeric_limits<double>::quiet_NaN();
    bool contains(double x) const { return x >= low && x <= high; }
    bool valid() const { return std::isfinite(low) && std::isfinite(high); }
};

inline constexpr double kZ975 = 1.959963984540054;

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman-Fan type 7).
inline double quantile(std::vector<double> x, double prob) {
    if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(x.begin(), x.end());
    const double h = (static_cast<double>(x.size()) - 1.0) * prob;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, x.size() - 1);
    return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

inline Interval wald_interval(double mu, double se) { return {mu - kZ975 * se, mu + kZ975 * se}; }

/// mu -+ c* se with c* the 0.95 quantile of |T*|.
inline Interval boot_t_interval(double mu, double se, std::span<const double> t_star) {
    std::vector<double> abs_t;
    abs_t.reserve(t_star.size());
    for (double t : t_star)
        if (std::isfinite(t)) abs_t.push_back(std::abs(t));
    if (abs_t.empty()) return {};
    const double c = quantile(std::move(abs_t), 0.95);
    return {mu - c * se, mu + c * se};
}

inline Interval percentile_interval(std::span<const double> mu_star) {
    std::vector<double> v(mu_star.begin(), mu_star.end());
    if (v.empty()) return {};
    return {quantile(v, 0.025), quantile(v, 0.975)};
}

// ---------------------------------------------------------------------------
// Bootstrap and per-arm sensitivity results

struct TargetResult {
    double t = 0.0;
    double mu_hat = 0.0;
    double se = 0.0;
    Interval wald;
    Interval percentile;
    Interval boot_t;
};

struct SensitivityResult {
    double alpha = 0.0;
    SplineCoefficients beta_hat;
    Eigen::MatrixXd covariance;
    std::vector<TargetResult> targets;
    bool plausible = true;
    std::size_t positivity_violations = 0;
};

struct BootstrapDraw {
    bool ok = false;
    std::string error;
    Eigen::MatrixXd mu;  // alpha x target
    Eigen::MatrixXd se;
};

struct BootstrapOptions {
    std::size_t resamples = 500;
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;  // distinguishes arms / replications
    unsigned workers = 1;
    double max_failure_fraction = 0.05;
};

struct ArmAnalysis {
    std::vector<double> alphas;
    std::vector<double> targets;
    NuisanceFits fits;
    std::vector<BetaEstimate> estimates;
    Eigen::MatrixXd mu_hat;  // alpha x target
    Eigen::MatrixXd se_hat;
    std::vector<BootstrapDraw> draws;
    std::size_t failed_resamples = 0;
    std::vector<SensitivityResult> results;
};

/// Subject indices of bootstrap resample `b`.
inline std::vector<std::size_t> resample_indices(std::size_t n, const BootstrapOptions& opt, std::size_t b) {
    Rng rng(opt.seed, {opt.stream, static_cast<std::uint64_t>(b)}, StreamPurpose::bootstrap);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n));
    return idx;
}

inline void target_estimates(const std::vector<BetaEstimate>& est, const SplineSpec& spec,
                             std::span<const double> targets, Eigen::MatrixXd& mu, Eigen::MatrixXd& se) {
    mu.resize(static_cast<Eigen::Index>(est.size()), static_cast<Eigen::Index>(targets.size()));
    se.resizeLike(mu);
    for (std::size_t a = 0; a < est.size(); ++a)
        for (std::size_t j = 0; j < targets.size(); ++j) {
            const TargetEstimate te = mu_at(est[a].beta, est[a].covariance, spec, targets[j]);
            mu(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(j)) = te.mu;
            se(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(j)) = te.se;
        }
}

/// Point estimates for every alpha plus a subject-level bootstrap that refits
/// both nuisance models on each resample. With zero resamples only the Wald
/// intervals are filled in.
inline ArmAnalysis analyze_arm(std::span<const SubjectRecord> data, const AnalysisOptions& opt,
                               std::span<const double> alphas, std::span<const double> targets,
                               const BootstrapOptions& boot) {
    for (double t : targets)
        if (!opt.spec.contains(t)) throw ArgumentError("target time " + std::to_string(t) + " outside [a, b]");
    const AiiwEstimator estimator(opt.spec, opt.positivity_floor);
    ArmAnalysis out;
    out.alphas.assign(alphas.begin(), alphas.end());
    out.targets.assign(targets.begin(), targets.end());
    out.fits = fit_nuisance(data, opt);
    out.estimates = estimator.estimate(data, out.fits, alphas);
    target_estimates(out.estimates, opt.spec, targets, out.mu_hat, out.se_hat);

    out.draws.resize(boot.resamples);
    parallel_for(boot.resamples, boot.workers, [&](std::size_t b) {
        BootstrapDraw& d = out.draws[b];
        try {
            const auto idx = resample_indices(data.size(), boot, b);
            std::vector<SubjectRecord> sample;
            sample.reserve(idx.size());
            for (std::size_t i : idx) sample.push_back(data[i]);
            const NuisanceFits fits = fit_nuisance(sample, opt);
            const auto est = estimator.estimate(sample, fits, alphas);
            target_estimates(est, opt.spec, targets, d.mu, d.se);
            d.ok = true;
        } catch (const Error& e) {
            d.ok = false;
            d.error = e.what();
        }
    });
    for (const auto& d : out.draws)
        if (!d.ok) ++out.failed_resamples;
    if (boot.resamples > 0 &&
        static_cast<double>(out.failed_resamples) > boot.max_failure_fraction * static_cast<double>(boot.resamples))
        throw InferenceError(std::to_string(out.failed_resamples) + " of " + std::to_string(boot.resamples) +
                             " bootstrap resamples failed (first: " +
                             std::find_if(out.draws.begin(), out.draws.end(), [](const auto& d) { return !d.ok; })
                                 ->error +
                             ")");

    for (std::size_t a = 0; a < alphas.size(); ++a) {
        SensitivityResult r;
        r.alpha = alphas[a];
        r.beta_hat = out.estimates[a].beta;
        r.covariance = out.estimates[a].covariance;
        r.positivity_violations = out.estimates[a].positivity_violations;
        for (std::size_t j = 0; j < targets.size(); ++j) {
            const auto ai = static_cast<Eigen::Index>(a);
            const auto ji = static_cast<Eigen::Index>(j);
            TargetResult tr;
            tr.t = targets[j];
            tr.mu_hat = out.mu_hat(ai, ji);
            tr.se = out.se_hat(ai, ji);
            tr.wald = wald_interval(tr.mu_hat, tr.se);
            std::vector<double> mu_star, t_star;
            for (const auto& d : out.draws) {
                if (!d.ok) continue;
                mu_star.push_back(d.mu(ai, ji));
                t_star.push_back((d.mu(ai, ji) - tr.mu_hat) / d.se(ai, ji));
            }
            tr.percentile = percentile_interval(mu_star);
            tr.boot_t = boot_t_interval(tr.mu_hat, tr.se, t_star);
            r.targets.push_back(tr);
        }
        out.results.push_back(std::move(r));
    }
    return out;
}

/// Bootstrap-t interval for a single (alpha, t).
inline Interval bootstrap_t_ci(std::span<const SubjectRecord> data, const AnalysisOptions& opt, double alpha,
                               double t, std::size_t resamples, std::uint64_t seed, unsigned workers = 1) {
    if (resamples < 100) throw ArgumentError("bootstrap-t needs at least 100 resamples");
    const double a[1] = {alpha};
    const double ts[1] = {t};
    BootstrapOptions bo;
    bo.resamples = resamples;
    bo.seed = seed;
    bo.workers = workers;
    return analyze_arm(data, opt, a, ts, bo).results[0].targets[0].boot_t;
}

// ---------------------------------------------------------------------------
// Treatment effects

struct EffectResult {
    double estimate = 0.0;
    double se = 0.0;
    Interval boot_t;
};

/// Contrast mu_t(arm A, alpha_A) - mu_t(arm B, alpha_B). Bootstrap draw b of
/// each arm comes from independent resamples, so draws are paired by index.
inline EffectResult treatment_effect(const ArmAnalysis& arm_a, std::size_t alpha_a, const ArmAnalysis& arm_b,
                                     std::size_t alpha_b, double t) {
    auto find_t = [t](const ArmAnalysis& arm) {
        auto it = std::find(arm.targets.begin(), arm.targets.end(), t);
        if (it == arm.targets.end()) throw ArgumentError("target time " + std::to_string(t) + " not on both grids");
        return static_cast<Eigen::Index>(it - arm.targets.begin());
    };
    if (arm_a.targets != arm_b.targets) throw ArgumentError("treatment arms have mismatched target grids");
    const Eigen::Index ja = find_t(arm_a);
    const Eigen::Index jb = find_t(arm_b);
    const auto ia = static_cast<Eigen::Index>(alpha_a);
    const auto ib = static_cast<Eigen::Index>(alpha_b);
    EffectResult r;
    r.estimate = arm_a.mu_hat(ia, ja) - arm_b.mu_hat(ib, jb);
    r.se = std::hypot(arm_a.se_hat(ia, ja), arm_b.se_hat(ib, jb));
    std::vector<double> t_star;
    const std::size_t nb = std::min(arm_a.draws.size(), arm_b.draws.size());
    for (std::size_t b = 0; b < nb; ++b) {
        const auto& da = arm_a.draws[b];
        const auto& db = arm_b.draws[b];
        if (!da.ok || !db.ok) continue;
        const double delta = da.mu(ia, ja) - db.mu(ib, jb);
        t_star.push_back((delta - r.estimate) / std::hypot(da.se(ia, ja), db.se(ib, jb)));
    }
    r.boot_t = boot_t_interval(r.estimate, r.se, t_star);
    return r;
}

enum class SignClass { negative, spans_zero, positive };

inline const char* sign_class_name(SignClass c) {
    switch (c) {
        case SignClass::negative: return "negative";
        case SignClass::positive: return "positive";
        default: return "spans-zero";
    }
}

inline SignClass classify(const Interval& ci) {
    if (ci.high < 0.0) return SignClass::negative;
    if (ci.low > 0.0) return SignClass::positive;
    return SignClass::spans_zero;
}

// ---------------------------------------------------------------------------
// Plausible range of the sensitivity parameter

struct PlausibilityCheck {
    bool plausible = true;
    double min_value = 0.0;
    double max_value = 0.0;
    double t_at_min = 0.0;
    double t_at_max = 0.0;
};

/// The curve beta' B(t) must stay strictly inside (mu_min, mu_max) at every
/// lattice point of [a, b].
inline PlausibilityCheck check_plausible(const SplineCoefficients& beta, const SplineSpec& spec, double mu_min,
                                         double mu_max) {
    if (!(mu_min < mu_max)) throw ArgumentError("plausibility bounds require mu_min < mu_max");
    PlausibilityCheck c;
    c.min_value = std::numeric_limits<double>::infinity();
    c.max_value = -std::numeric_limits<double>::infinity();
    for (double t : spec.lattice()) {
        const double v = curve_value(beta, spec, t);
        if (v < c.min_value) {
            c.min_value = v;
            c.t_at_min = t;
        }
        if (v > c.max_value) {
            c.max_value = v;
            c.t_at_max = t;
        }
    }
    c.plausible = c.min_value > mu_min && c.max_value < mu_max;
    return c;
}

/// Flags each result and returns the plausible subset.
inline std::vector<SensitivityResult> plausible_alpha_range(std::vector<SensitivityResult>& results,
                                                            const SplineSpec& spec, double mu_min, double mu_max) {
    std::vector<SensitivityResult> kept;
    for (auto& r : results) {
        r.plausible = check_plausible(r.beta_hat, spec, mu_min, mu_max).plausible;
        if (r.plausible) kept.push_back(r);
    }
    return kept;
}

}  // namespace aiiw
