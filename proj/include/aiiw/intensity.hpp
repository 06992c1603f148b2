#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aiiw/error.hpp"
#include "aiiw/records.hpp"

namespace aiiw {

// Assessment-intensity model: stratified Andersen-Gill with stratum k for the
// k-th post-baseline assessment,
//
//   lambda(t | past) = lambda0_k(t) exp(gamma' Z(t)),  k = N(t-) + 1,
//
// fitted by Cox partial likelihood (Breslow ties), with a Breslow cumulative
// baseline per stratum that is kernel smoothed into an intensity.

/// Covariates Z(t) of the intensity model. Only the previous outcome is used;
/// the fitting code works for any dimension.
inline Eigen::VectorXd intensity_covariates(const ObservedPastFeatures& past) {
    Eigen::VectorXd z(1);
    z(0) = past.prev_outcome;
    return z;
}

/// Counting-process intervals (entry, exit] for one stratum.
struct StratumRisk {
    std::vector<double> entry;
    std::vector<double> exit;
    std::vector<char> event;
    std::vector<std::size_t> subject;
    Eigen::MatrixXd z;  // one row per interval

    std::size_t size() const { return entry.size(); }
    std::size_t event_count() const {
        return static_cast<std::size_t>(std::count(event.begin(), event.end(), char{1}));
    }
};

struct RiskStructure {
    int J = 0;
    double tau = 0.0;
    int covariate_dim = 1;
    std::vector<StratumRisk> strata;  // strata[k - 1] is stratum k

    std::size_t total_events() const {
        std::size_t n = 0;
        for (const auto& s : strata) n += s.event_count();
        return n;
    }
};

/// One interval per subject per stratum they reach. Stratum k runs from the
/// (k-1)-th assessment (or 0) to the k-th assessment (event) or tau
/// (censored), with Z taken from the observed past at entry.
inline RiskStructure build_risk_sets(std::span<const SubjectRecord> data, int J, double tau) {
    if (J < 1) throw ArgumentError("J must be >= 1");
    RiskStructure rs;
    rs.J = J;
    rs.tau = tau;
    rs.covariate_dim = static_cast<int>(intensity_covariates(ObservedPastFeatures{}).size());
    rs.strata.resize(static_cast<std::size_t>(J));

    std::vector<std::vector<double>> zrows(static_cast<std::size_t>(J));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& s = data[i];
        if (s.assessments.size() > static_cast<std::size_t>(J))
            throw DataError("subject '" + s.id + "' has " + std::to_string(s.assessments.size()) +
                            " assessments, more than J = " + std::to_string(J));
        validate(s, tau);
        for (std::size_t k = 0; k < static_cast<std::size_t>(J); ++k) {
            if (k > s.assessments.size()) break;
            const auto past = past_before_assessment(s, k);
            const bool happened = k < s.assessments.size();
            const double entry = past.prev_time;
            const double exit = happened ? s.assessments[k].time : tau;
            if (!(exit > entry)) continue;
            auto& st = rs.strata[k];
            st.entry.push_back(entry);
            st.exit.push_back(exit);
            st.event.push_back(happened ? 1 : 0);
            st.subject.push_back(i);
            const Eigen::VectorXd z = intensity_covariates(past);
            zrows[k].insert(zrows[k].end(), z.data(), z.data() + z.size());
        }
    }
    const int d = rs.covariate_dim;
    for (std::size_t k = 0; k < rs.strata.size(); ++k) {
        auto& st = rs.strata[k];
        st.z.resize(static_cast<Eigen::Index>(st.size()), d);
        for (std::size_t r = 0; r < st.size(); ++r)
            for (int c = 0; c < d; ++c) st.z(static_cast<Eigen::Index>(r), c) = zrows[k][r * d + c];
    }
    return rs;
}

/// All intervals pooled into a single stratum (unstratified Andersen-Gill).
inline RiskStructure collapse_strata(const RiskStructure& rs) {
    RiskStructure out;
    out.J = 1;
    out.tau = rs.tau;
    out.covariate_dim = rs.covariate_dim;
    out.strata.resize(1);
    auto& dst = out.strata[0];
    std::size_t total = 0;
    for (const auto& s : rs.strata) total += s.size();
    dst.z.resize(static_cast<Eigen::Index>(total), rs.covariate_dim);
    Eigen::Index row = 0;
    for (const auto& s : rs.strata) {
        dst.entry.insert(dst.entry.end(), s.entry.begin(), s.entry.end());
        dst.exit.insert(dst.exit.end(), s.exit.begin(), s.exit.end());
        dst.event.insert(dst.event.end(), s.event.begin(), s.event.end());
        dst.subject.insert(dst.subject.end(), s.subject.begin(), s.subject.end());
        if (s.size() > 0) dst.z.middleRows(row, static_cast<Eigen::Index>(s.size())) = s.z;
        row += static_cast<Eigen::Index>(s.size());
    }
    return out;
}

struct PartialLikelihood {
    double loglik = 0.0;
    Eigen::VectorXd score;
    Eigen::MatrixXd hessian;
};

namespace detail {

// Sorted views of one stratum for the risk-set sweep. At an event time T the
// risk set is {entry < T <= exit} = {exit >= T} \ {entry >= T}, so every
// risk-set sum is a difference of two suffix sums.
struct StratumSweep {
    std::vector<std::size_t> by_exit;
    std::vector<std::size_t> by_entry;
    std::vector<double> exit_sorted;
    std::vector<double> entry_sorted;
    std::vector<double> event_times;  // distinct, ascending
    std::vector<double> event_counts;
    Eigen::MatrixXd event_zsum;  // row g: sum of Z over events at event_times[g]

    explicit StratumSweep(const StratumRisk& st) {
        const std::size_t n = st.size();
        by_exit.resize(n);
        by_entry.resize(n);
        std::iota(by_exit.begin(), by_exit.end(), std::size_t{0});
        std::iota(by_entry.begin(), by_entry.end(), std::size_t{0});
        std::stable_sort(by_exit.begin(), by_exit.end(),
                         [&](std::size_t l, std::size_t r) { return st.exit[l] < st.exit[r]; });
        std::stable_sort(by_entry.begin(), by_entry.end(),
                         [&](std::size_t l, std::size_t r) { return st.entry[l] < st.entry[r]; });
        exit_sorted.resize(n);
        entry_sorted.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            exit_sorted[i] = st.exit[by_exit[i]];
            entry_sorted[i] = st.entry[by_entry[i]];
        }
        std::vector<Eigen::VectorXd> zs;
        for (std::size_t i : by_exit) {
            if (!st.event[i]) continue;
            const double t = st.exit[i];
            if (event_times.empty() || event_times.back() != t) {
                event_times.push_back(t);
                event_counts.push_back(0.0);
                zs.push_back(Eigen::VectorXd::Zero(st.z.cols()));
            }
            event_counts.back() += 1.0;
            zs.back() += st.z.row(static_cast<Eigen::Index>(i)).transpose();
        }
        event_zsum.resize(static_cast<Eigen::Index>(zs.size()), st.z.cols());
        for (std::size_t g = 0; g < zs.size(); ++g) event_zsum.row(static_cast<Eigen::Index>(g)) = zs[g];
    }

    std::size_t first_exit_at_or_after(double t) const {
        return static_cast<std::size_t>(std::lower_bound(exit_sorted.begin(), exit_sorted.end(), t) -
                                        exit_sorted.begin());
    }
    std::size_t first_entry_at_or_after(double t) const {
        return static_cast<std::size_t>(std::lower_bound(entry_sorted.begin(), entry_sorted.end(), t) -
                                        entry_sorted.begin());
    }
};

inline std::vector<double> suffix_sums(const std::vector<double>& w, const std::vector<std::size_t>& order) {
    std::vector<double> out(order.size() + 1, 0.0);
    for (std::size_t i = order.size(); i-- > 0;) out[i] = out[i + 1] + w[order[i]];
    return out;
}

}  // namespace detail

/// Stratified log partial likelihood with score and Hessian at gamma.
inline PartialLikelihood partial_likelihood(const RiskStructure& rs, const Eigen::VectorXd& gamma) {
    const int d = rs.covariate_dim;
    PartialLikelihood pl;
    pl.score = Eigen::VectorXd::Zero(d);
    pl.hessian = Eigen::MatrixXd::Zero(d, d);
    for (const auto& st : rs.strata) {
        if (st.event_count() == 0) continue;
        const detail::StratumSweep sw(st);
        const std::size_t n = st.size();
        // Z is centred per stratum; the partial likelihood is invariant to
        // that and exp() stays in range for large |gamma|.
        const Eigen::RowVectorXd zbar = st.z.colwise().mean();
        std::vector<double> w(n);
        std::vector<std::vector<double>> wz(static_cast<std::size_t>(d), std::vector<double>(n));
        std::vector<std::vector<double>> wzz(static_cast<std::size_t>(d * d), std::vector<double>(n));
        for (std::size_t i = 0; i < n; ++i) {
            const Eigen::RowVectorXd zc = st.z.row(static_cast<Eigen::Index>(i)) - zbar;
            w[i] = std::exp(zc.dot(gamma));
            for (int r = 0; r < d; ++r) {
                wz[r][i] = w[i] * zc(r);
                for (int c = 0; c < d; ++c) wzz[r * d + c][i] = w[i] * zc(r) * zc(c);
            }
        }
        const auto s0x = detail::suffix_sums(w, sw.by_exit);
        const auto s0n = detail::suffix_sums(w, sw.by_entry);
        std::vector<std::vector<double>> s1x, s1n, s2x, s2n;
        for (int r = 0; r < d; ++r) {
            s1x.push_back(detail::suffix_sums(wz[r], sw.by_exit));
            s1n.push_back(detail::suffix_sums(wz[r], sw.by_entry));
        }
        for (int rc = 0; rc < d * d; ++rc) {
            s2x.push_back(detail::suffix_sums(wzz[rc], sw.by_exit));
            s2n.push_back(detail::suffix_sums(wzz[rc], sw.by_entry));
        }

        Eigen::VectorXd s1(d);
        Eigen::MatrixXd s2(d, d);
        for (std::size_t g = 0; g < sw.event_times.size(); ++g) {
            const double t = sw.event_times[g];
            const std::size_t px = sw.first_exit_at_or_after(t);
            const std::size_t pn = sw.first_entry_at_or_after(t);
            const double s0 = s0x[px] - s0n[pn];
            for (int r = 0; r < d; ++r) {
                s1(r) = s1x[r][px] - s1n[r][pn];
                for (int c = 0; c < d; ++c) s2(r, c) = s2x[r * d + c][px] - s2n[r * d + c][pn];
            }
            const double dg = sw.event_counts[g];
            const Eigen::VectorXd zsum_c =
                sw.event_zsum.row(static_cast<Eigen::Index>(g)).transpose() - dg * zbar.transpose();
            const Eigen::VectorXd mean = s1 / s0;
            pl.loglik += zsum_c.dot(gamma) - dg * std::log(s0);
            pl.score += zsum_c - dg * mean;
            pl.hessian -= dg * (s2 / s0 - mean * mean.transpose());
        }
    }
    return pl;
}

struct PartialLikelihoodFit {
    Eigen::VectorXd gamma;
    Eigen::VectorXd se;
    double loglik = 0.0;
    double score_norm = 0.0;
    int iterations = 0;
};

struct NewtonOptions {
    int max_iterations = 50;
    double tolerance = 1e-8;
    double divergence_bound = 50.0;
};

/// Newton-Raphson with step halving on the stratified log partial likelihood.
inline PartialLikelihoodFit fit_partial_likelihood(const RiskStructure& rs, const NewtonOptions& opt = {}) {
    if (rs.total_events() == 0) throw DataError("partial likelihood needs at least one event");
    const int d = rs.covariate_dim;
    Eigen::VectorXd gamma = Eigen::VectorXd::Zero(d);
    PartialLikelihood cur = partial_likelihood(rs, gamma);
    std::ostringstream trace;
    PartialLikelihoodFit fit;

    int it = 0;
    for (; it <= opt.max_iterations; ++it) {
        const double gnorm = cur.score.lpNorm<Eigen::Infinity>();
        trace << " [" << it << "] gamma=" << gamma.transpose() << " |score|=" << gnorm;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(-cur.hessian);
        const bool regular = ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0.0).all();
        if (gnorm == 0.0 && !regular) break;  // flat: covariate carries no information
        if (!regular) throw NumericError("partial likelihood information matrix is singular:" + trace.str());
        Eigen::VectorXd step = ldlt.solve(cur.score);
        if (gnorm < opt.tolerance) {
            // a vanishing score with a Newton step that stays large is the
            // asymptote of a monotone likelihood, not a maximum
            if (step.lpNorm<Eigen::Infinity>() > 1e-4 * (1.0 + gamma.lpNorm<Eigen::Infinity>()))
                throw MonotoneLikelihoodError("partial likelihood is monotone (score vanishes at gamma=" +
                                              std::to_string(gamma(0)) + " without a maximum)");
            break;
        }
        if (it == opt.max_iterations)
            throw NumericError("partial likelihood Newton did not converge:" + trace.str());
        double scale = 1.0;
        for (int halving = 0;; ++halving) {
            const Eigen::VectorXd cand = gamma + scale * step;
            if (cand.lpNorm<Eigen::Infinity>() > opt.divergence_bound)
                throw MonotoneLikelihoodError("partial likelihood diverges (|gamma| > " +
                                              std::to_string(opt.divergence_bound) + ")");
            PartialLikelihood next = partial_likelihood(rs, cand);
            if (std::isfinite(next.loglik) && next.loglik >= cur.loglik - 1e-12 * std::abs(cur.loglik)) {
                gamma = cand;
                cur = std::move(next);
                break;
            }
            if (halving == 40) throw NumericError("step halving failed:" + trace.str());
            scale *= 0.5;
        }
    }
    fit.gamma = gamma;
    fit.loglik = cur.loglik;
    fit.score_norm = cur.score.lpNorm<Eigen::Infinity>();
    fit.iterations = it;
    Eigen::LDLT<Eigen::MatrixXd> info(-cur.hessian);
    fit.se = Eigen::VectorXd::Constant(d, std::numeric_limits<double>::infinity());
    if (info.info() == Eigen::Success && (info.vectorD().array() > 0.0).all()) {
        const Eigen::MatrixXd cov = info.solve(Eigen::MatrixXd::Identity(d, d));
        fit.se = cov.diagonal().cwiseSqrt();
    }
    return fit;
}

/// Right-continuous nondecreasing step function with Lambda(0) = 0.
struct StepFunction {
    std::vector<double> times;  // jump locations, ascending
    std::vector<double> jumps;

    double operator()(double t) const {
        double s = 0.0;
        for (std::size_t j = 0; j < times.size() && times[j] <= t; ++j) s += jumps[j];
        return s;
    }
    double total() const { return std::accumulate(jumps.begin(), jumps.end(), 0.0); }
};

/// Breslow cumulative baseline per stratum: jump d(T) / sum_{at risk} exp(gamma' Z).
inline std::vector<StepFunction> breslow_cumulative(const RiskStructure& rs, const Eigen::VectorXd& gamma) {
    std::vector<StepFunction> out;
    out.reserve(rs.strata.size());
    for (const auto& st : rs.strata) {
        StepFunction f;
        if (st.event_count() > 0) {
            const detail::StratumSweep sw(st);
            std::vector<double> w(st.size());
            for (std::size_t i = 0; i < st.size(); ++i)
                w[i] = std::exp(st.z.row(static_cast<Eigen::Index>(i)).dot(gamma));
            const auto sx = detail::suffix_sums(w, sw.by_exit);
            const auto sn = detail::suffix_sums(w, sw.by_entry);
            for (std::size_t g = 0; g < sw.event_times.size(); ++g) {
                const double t = sw.event_times[g];
                const double s0 = sx[sw.first_exit_at_or_after(t)] - sn[sw.first_entry_at_or_after(t)];
                f.times.push_back(t);
                f.jumps.push_back(sw.event_counts[g] / s0);
            }
        }
        out.push_back(std::move(f));
    }
    return out;
}

enum class Kernel { epanechnikov };

inline double kernel_weight(Kernel, double u) {
    return std::abs(u) <= 1.0 ? 0.75 * (1.0 - u * u) : 0.0;
}

/// Kernel-smoothed intensity (1/h) sum_j K((t - T_j)/h) dLambda(T_j). No
/// boundary correction.
class SmoothedBaseline {
public:
    SmoothedBaseline() = default;
    SmoothedBaseline(StepFunction cumulative, double bandwidth, Kernel kernel = Kernel::epanechnikov)
        : cum_(std::move(cumulative)), h_(bandwidth), kernel_(kernel) {
        if (!(h_ > 0.0)) throw ArgumentError("bandwidth must be positive");
    }

    double operator()(double t) const {
        const auto& ts = cum_.times;
        auto lo = std::lower_bound(ts.begin(), ts.end(), t - h_);
        double s = 0.0;
        for (auto it = lo; it != ts.end() && *it <= t + h_; ++it) {
            const auto j = static_cast<std::size_t>(it - ts.begin());
            s += kernel_weight(kernel_, (t - *it) / h_) * cum_.jumps[j];
        }
        return s / h_;
    }

    double bandwidth() const { return h_; }
    const StepFunction& cumulative() const { return cum_; }

private:
    StepFunction cum_;
    double h_ = 1.0;
    Kernel kernel_ = Kernel::epanechnikov;
};

inline SmoothedBaseline smooth_baseline(const StepFunction& cumulative, double bandwidth,
                                        Kernel kernel = Kernel::epanechnikov) {
    return SmoothedBaseline(cumulative, bandwidth, kernel);
}

struct IntensityFit {
    Eigen::VectorXd gamma_hat;
    Eigen::VectorXd gamma_se;
    std::vector<StepFunction> cum_baselines;  // index k - 1
    std::vector<SmoothedBaseline> smoothed_baselines;
    double bandwidth_h = 30.0;
    Kernel kernel = Kernel::epanechnikov;
    int J = 4;
    double tau = 0.0;
    std::vector<std::size_t> events_per_stratum;
    int iterations = 0;
    double loglik = 0.0;
    double score_norm = 0.0;
};

/// lambda0_{k+1}(t) exp(gamma' Z(past)), or 0 once all J assessments happened.
inline double lambda_hat(const IntensityFit& fit, double t, const ObservedPastFeatures& past) {
    const int next = past.stratum_k + 1;
    if (next > fit.J) return 0.0;
    const double base = fit.smoothed_baselines[static_cast<std::size_t>(next - 1)](t);
    return base * std::exp(intensity_covariates(past).dot(fit.gamma_hat));
}

struct IntensityOptions {
    int J = 4;
    double tau = 460.0;
    double bandwidth = 30.0;
    Kernel kernel = Kernel::epanechnikov;
    NewtonOptions newton{};
};

inline IntensityFit assemble_intensity_fit(const RiskStructure& rs, Eigen::VectorXd gamma, Eigen::VectorXd se,
                                           const IntensityOptions& opt) {
    IntensityFit fit;
    fit.gamma_hat = std::move(gamma);
    fit.gamma_se = std::move(se);
    fit.cum_baselines = breslow_cumulative(rs, fit.gamma_hat);
    for (const auto& c : fit.cum_baselines) fit.smoothed_baselines.emplace_back(c, opt.bandwidth, opt.kernel);
    fit.bandwidth_h = opt.bandwidth;
    fit.kernel = opt.kernel;
    fit.J = rs.J;
    fit.tau = rs.tau;
    for (const auto& st : rs.strata) fit.events_per_stratum.push_back(st.event_count());
    return fit;
}

inline IntensityFit fit_intensity(std::span<const SubjectRecord> data, const IntensityOptions& opt = {}) {
    const RiskStructure rs = build_risk_sets(data, opt.J, opt.tau);
    const PartialLikelihoodFit pl = fit_partial_likelihood(rs, opt.newton);
    IntensityFit fit = assemble_intensity_fit(rs, pl.gamma, pl.se, opt);
    fit.iterations = pl.iterations;
    fit.loglik = pl.loglik;
    fit.score_norm = pl.score_norm;
    return fit;
}

/// Breslow baselines and smoothing under a supplied gamma instead of the
/// partial-likelihood estimate.
inline IntensityFit fit_intensity_fixed_gamma(std::span<const SubjectRecord> data, const Eigen::VectorXd& gamma,
                                              const IntensityOptions& opt = {}) {
    const RiskStructure rs = build_risk_sets(data, opt.J, opt.tau);
    return assemble_intensity_fit(rs, gamma, Eigen::VectorXd::Zero(gamma.size()), opt);
}

}  // namespace aiiw
