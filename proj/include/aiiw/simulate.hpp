#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aiiw/error.hpp"
#include "aiiw/estimator.hpp"
#include "aiiw/outcome.hpp"
#include "aiiw/parallel.hpp"
#include "aiiw/records.hpp"
#include "aiiw/rng.hpp"
#include "aiiw/spline.hpp"

namespace aiiw {

// Synthetic trial generator: assessment times from a stratified proportional
// intensity lambda0_k(t) exp(gamma * y_prev) by Ogata thinning, outcomes from
// the (optionally truncated) NB outcome model given the observed past.

/// Piecewise-constant rate: rates[i] on [breaks[i], breaks[i+1]), zero
/// outside [breaks.front(), breaks.back()).
struct PiecewiseConstantRate {
    std::vector<double> breaks;
    std::vector<double> rates;

    static PiecewiseConstantRate constant(double rate, double end) { return {{0.0, end}, {rate}}; }

    void validate() const {
        if (breaks.size() != rates.size() + 1 || rates.empty())
            throw ConfigError("piecewise rate needs breaks.size() == rates.size() + 1");
        for (std::size_t i = 0; i + 1 < breaks.size(); ++i)
            if (!(breaks[i + 1] > breaks[i])) throw ConfigError("piecewise rate breaks must increase");
        for (double r : rates)
            if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("piecewise rates must be finite and >= 0");
    }

    double operator()(double t) const {
        if (t < breaks.front() || t >= breaks.back()) return 0.0;
        const auto it = std::upper_bound(breaks.begin(), breaks.end(), t);
        return rates[static_cast<std::size_t>(it - breaks.begin()) - 1];
    }

    /// Maximum over [0, tau], taken over the pieces that intersect it.
    double sup(double tau) const {
        double m = 0.0;
        for (std::size_t i = 0; i < rates.size(); ++i)
            if (breaks[i] <= tau) m = std::max(m, rates[i]);
        return m;
    }

    /// Closed-form integral over [0, t].
    double cumulative(double t) const {
        double s = 0.0;
        for (std::size_t i = 0; i < rates.size(); ++i) {
            const double lo = std::max(breaks[i], 0.0);
            const double hi = std::min(breaks[i + 1], t);
            if (hi > lo) s += rates[i] * (hi - lo);
        }
        return s;
    }
};

struct DgmSpec {
    std::vector<double> baseline_values;  // drawn uniformly (empirical distribution)
    std::vector<PiecewiseConstantRate> intensity;  // lambda0_k, k = 1..J
    double gamma = 0.0;
    Eigen::Vector4d outcome_coefficients = Eigen::Vector4d::Zero();
    double dispersion = 1.0;
    std::optional<int> score_ceiling;
    double tau = 460.0;
    int J = 4;
    double envelope_inflation = 1.05;
    std::optional<double> constant_outcome;  // degenerate world: every outcome equals this value

    void validate() const {
        if (baseline_values.empty()) throw ConfigError("DGM baseline distribution is empty");
        if (J < 0) throw ConfigError("DGM J must be >= 0");
        if (static_cast<int>(intensity.size()) != J) throw ConfigError("DGM needs one baseline intensity per stratum");
        for (const auto& r : intensity) r.validate();
        if (!(dispersion > 0.0)) throw ConfigError("DGM dispersion must be positive");
        if (!(tau > 0.0)) throw ConfigError("DGM tau must be positive");
        if (!(envelope_inflation >= 1.0)) throw ConfigError("envelope inflation must be >= 1");
        if (constant_outcome && !(*constant_outcome >= 0.0)) throw ConfigError("constant outcome must be >= 0");
    }

    /// The true outcome model expressed as an OutcomeFit.
    OutcomeFit outcome_model() const {
        OutcomeFit f;
        f.coefficients = outcome_coefficients;
        f.dispersion = dispersion;
        f.score_ceiling = score_ceiling;
        return f;
    }
};

/// lambda* = inflation * sup_t lambda0_k(t) exp(gamma y_prev).
inline double envelope_rate(const DgmSpec& dgm, int stratum_k, double y_prev) {
    const auto& base = dgm.intensity[static_cast<std::size_t>(stratum_k - 1)];
    return dgm.envelope_inflation * base.sup(dgm.tau) * std::exp(dgm.gamma * y_prev);
}

/// Ogata thinning for the next event after t_start under the rate
/// base(t) exp(gamma y_prev), dominated by lambda_star. Returns nullopt when
/// the candidate passes tau.
inline std::optional<double> ogata_next_time(const PiecewiseConstantRate& base, double gamma, double y_prev,
                                             double t_start, double tau, double lambda_star, Rng& rng) {
    if (!(lambda_star > 0.0)) return std::nullopt;
    const double factor = std::exp(gamma * y_prev);
    double t = t_start;
    for (;;) {
        t += rng.exponential(lambda_star);
        if (t > tau) return std::nullopt;
        const double accept = base(t) * factor / lambda_star;
        if (accept > 1.0 + 1e-12)
            throw EnvelopeError("thinning acceptance probability " + std::to_string(accept) +
                                " > 1 at t = " + std::to_string(t));
        if (rng.uniform() < accept) return t;
    }
}

inline std::optional<double> ogata_next_time(const DgmSpec& dgm, int stratum_k, double y_prev, double t_start,
                                             Rng& rng) {
    return ogata_next_time(dgm.intensity[static_cast<std::size_t>(stratum_k - 1)], dgm.gamma, y_prev, t_start,
                           dgm.tau, envelope_rate(dgm, stratum_k, y_prev), rng);
}

/// Inverse-CDF draw from NB(mu, r), truncated to {0..ceiling} when given.
inline int draw_outcome(double mu, double r, std::optional<int> ceiling, Rng& rng) {
    const double u = rng.uniform();
    const double q = mu / (mu + r);
    if (ceiling) {
        std::vector<double> w(static_cast<std::size_t>(*ceiling + 1));
        double z = 0.0, v = 1.0;
        for (int y = 0; y <= *ceiling; ++y) {
            if (y > 0) v *= (r + y - 1) / static_cast<double>(y) * q;
            w[static_cast<std::size_t>(y)] = v;
            z += v;
        }
        double c = 0.0;
        for (int y = 0; y <= *ceiling; ++y) {
            c += w[static_cast<std::size_t>(y)] / z;
            if (u < c) return y;
        }
        return *ceiling;
    }
    double p = std::exp(-r * std::log1p(mu / r));
    if (!(p > 0.0)) throw NumericError("NB draw: mass at zero underflows (mu=" + std::to_string(mu) + ")");
    double c = p;
    int y = 0;
    while (u >= c) {
        p *= (r + y) / (y + 1.0) * q;
        ++y;
        c += p;
        if (p == 0.0 && c < u) break;  // rounding left the CDF just short of u
        if (y > 100'000'000) throw NumericError("NB draw did not terminate");
    }
    return y;
}

inline SubjectRecord simulate_subject(const DgmSpec& dgm, Rng& rng, std::string id = {}) {
    SubjectRecord s;
    s.id = std::move(id);
    s.baseline_outcome = dgm.baseline_values[static_cast<std::size_t>(rng.below(dgm.baseline_values.size()))];
    double t = 0.0;
    double y = s.baseline_outcome;
    for (int k = 1; k <= dgm.J; ++k) {
        const auto next = ogata_next_time(dgm, k, y, t, rng);
        if (!next) break;
        const ObservedPastFeatures past{k - 1, t, y};
        const double mu = std::exp(dgm.outcome_coefficients.dot(outcome_design(*next, past)));
        t = *next;
        y = dgm.constant_outcome ? *dgm.constant_outcome : draw_outcome(mu, dgm.dispersion, dgm.score_ceiling, rng);
        s.assessments.push_back({t, y});
    }
    return s;
}

/// n subjects; subject i draws from stream (seed, stream, i).
inline std::vector<SubjectRecord> simulate_dataset(const DgmSpec& dgm, std::size_t n, std::uint64_t seed,
                                                   std::uint64_t stream = 0, Arm arm = Arm::control) {
    std::vector<SubjectRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(seed, {stream, static_cast<std::uint64_t>(i)}, StreamPurpose::simulate);
        out.push_back(simulate_subject(dgm, rng, "s" + std::to_string(i + 1)));
        out.back().arm = arm;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ground truth by projection of the true mean curve onto the spline space

struct TruthResult {
    double alpha = 0.0;
    SplineCoefficients gamma_proj;
    std::vector<double> targets;
    std::vector<double> true_mu;    // gamma_proj' B(t) at targets
    std::vector<double> grid_mean;  // Monte Carlo E[Y(t)] at the quadrature nodes
    double projection_residual = 0.0;
};

/// For each alpha: average the tilted conditional mean over N simulated
/// observed pasts at every quadrature node, then solve V gamma = int B E[Y].
inline std::vector<TruthResult> compute_truth(const DgmSpec& dgm, std::span<const double> alphas, std::size_t N,
                                              const SplineSpec& spec, std::span<const double> targets,
                                              std::uint64_t seed, unsigned workers = 1) {
    dgm.validate();
    const OutcomeFit model = dgm.outcome_model();
    const std::vector<double> nodes = spec.nodes();
    const std::size_t m = nodes.size();
    const std::size_t na = alphas.size();
    constexpr std::size_t chunk = 4096;
    const std::size_t nchunks = (N + chunk - 1) / chunk;
    std::vector<std::vector<double>> partial(nchunks);

    parallel_for(nchunks, workers, [&](std::size_t c) {
        std::vector<double> sums(na * m, 0.0);
        std::vector<double> time_factor(m);
        for (std::size_t j = 0; j < m; ++j) time_factor[j] = std::exp(model.coefficients(1) * nodes[j]);
        const std::size_t lo = c * chunk;
        const std::size_t hi = std::min(N, lo + chunk);
        for (std::size_t i = lo; i < hi; ++i) {
            Rng rng(seed, {static_cast<std::uint64_t>(i)}, StreamPurpose::truth);
            const SubjectRecord s = simulate_subject(dgm, rng);
            std::size_t k = 0;
            double seg = std::exp(model.coefficients(0) + model.coefficients(3) * s.baseline_outcome);
            for (std::size_t j = 0; j < m; ++j) {
                bool moved = false;
                while (k < s.assessments.size() && s.assessments[k].time < nodes[j]) {
                    ++k;
                    moved = true;
                }
                if (moved)
                    seg = std::exp(model.coefficients(0) + model.coefficients(2) * s.assessments[k - 1].time +
                                   model.coefficients(3) * s.assessments[k - 1].outcome);
                const double mu = seg * time_factor[j];
                for (std::size_t a = 0; a < na; ++a) {
                    if (dgm.constant_outcome) {
                        sums[a * m + j] += *dgm.constant_outcome;
                        continue;
                    }
                    const double e = (alphas[a] == 0.0 && !model.score_ceiling)
                                         ? mu
                                         : tilted_moments(model, mu, alphas[a]).mean();
                    sums[a * m + j] += e;
                }
            }
        }
        partial[c] = std::move(sums);
    });

    const Eigen::MatrixXd basis = basis_at_nodes(spec);
    const Eigen::MatrixXd v = gram_matrix(spec);
    Eigen::LLT<Eigen::MatrixXd> llt(v);
    if (llt.info() != Eigen::Success) throw ConfigError("Gram matrix is singular; spline spec is degenerate");

    std::vector<TruthResult> out(na);
    for (std::size_t a = 0; a < na; ++a) {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
        for (const auto& ps : partial)
            for (std::size_t j = 0; j < m; ++j) mean(static_cast<Eigen::Index>(j)) += ps[a * m + j];
        mean /= static_cast<double>(N);
        const Eigen::VectorXd rhs = basis.transpose() * mean * spec.grid_step();
        TruthResult& tr = out[a];
        tr.alpha = alphas[a];
        tr.gamma_proj = llt.solve(rhs);
        tr.projection_residual = (v * tr.gamma_proj - rhs).lpNorm<Eigen::Infinity>();
        tr.grid_mean.assign(mean.data(), mean.data() + mean.size());
        tr.targets.assign(targets.begin(), targets.end());
        for (double t : targets) tr.true_mu.push_back(curve_value(tr.gamma_proj, spec, t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Bias / coverage study

struct StudyRow {
    double alpha = 0.0;
    double t = 0.0;
    double true_value = 0.0;
    double emp_mean = 0.0;
    double abs_bias = 0.0;
    double bias_mc_se = 0.0;
    double boot_t = 0.0;  // coverage proportions
    double percentile = 0.0;
    double wald = 0.0;
};

struct StudyResult {
    std::vector<StudyRow> rows;
    std::size_t reps = 0;
    std::size_t failed_reps = 0;
    std::vector<std::string> failures;
};

struct StudyOptions {
    std::size_t n_per_rep = 200;
    std::size_t reps = 200;
    std::size_t resamples = 500;
    std::uint64_t seed = 1;
    unsigned workers = 1;
    double failure_budget = 0.02;
};

/// Simulates `reps` datasets, analyzes each under every alpha with the true
/// alpha, and tabulates bias and interval coverage against `truth`.
inline StudyResult run_study(const DgmSpec& dgm, const AnalysisOptions& analysis, std::span<const double> alphas,
                             std::span<const TruthResult> truth, const StudyOptions& opt) {
    if (truth.size() != alphas.size()) throw ArgumentError("need one truth result per alpha");
    const std::vector<double> targets = truth.front().targets;
    const std::size_t na = alphas.size();
    const std::size_t nt = targets.size();

    struct RepOut {
        bool ok = false;
        std::string error;
        Eigen::MatrixXd mu;
        Eigen::MatrixXd cover_t, cover_p, cover_w;
    };
    std::vector<RepOut> reps(opt.reps);
    parallel_for(opt.reps, opt.workers, [&](std::size_t r) {
        RepOut& out = reps[r];
        try {
            const auto data = simulate_dataset(dgm, opt.n_per_rep, opt.seed, r);
            BootstrapOptions bo;
            bo.resamples = opt.resamples;
            bo.seed = opt.seed;
            bo.stream = r;
            bo.workers = 1;
            const ArmAnalysis arm = analyze_arm(data, analysis, alphas, targets, bo);
            out.mu = arm.mu_hat;
            out.cover_t.resize(static_cast<Eigen::Index>(na), static_cast<Eigen::Index>(nt));
            out.cover_p.resizeLike(out.cover_t);
            out.cover_w.resizeLike(out.cover_t);
            for (std::size_t a = 0; a < na; ++a)
                for (std::size_t j = 0; j < nt; ++j) {
                    const auto& tr = arm.results[a].targets[j];
                    const double truth_v = truth[a].true_mu[j];
                    const auto ai = static_cast<Eigen::Index>(a);
                    const auto ji = static_cast<Eigen::Index>(j);
                    out.cover_t(ai, ji) = tr.boot_t.contains(truth_v) ? 1.0 : 0.0;
                    out.cover_p(ai, ji) = tr.percentile.contains(truth_v) ? 1.0 : 0.0;
                    out.cover_w(ai, ji) = tr.wald.contains(truth_v) ? 1.0 : 0.0;
                }
            out.ok = true;
        } catch (const Error& e) {
            out.error = e.what();
        }
    });

    StudyResult res;
    res.reps = opt.reps;
    for (std::size_t r = 0; r < reps.size(); ++r)
        if (!reps[r].ok) {
            ++res.failed_reps;
            res.failures.push_back("rep " + std::to_string(r) + ": " + reps[r].error);
        }
    if (static_cast<double>(res.failed_reps) > opt.failure_budget * static_cast<double>(opt.reps))
        throw InferenceError(std::to_string(res.failed_reps) + " of " + std::to_string(opt.reps) +
                             " study replications failed" +
                             (res.failures.empty() ? std::string() : " (first: " + res.failures.front() + ")"));
    const double ok = static_cast<double>(opt.reps - res.failed_reps);
    for (std::size_t a = 0; a < na; ++a)
        for (std::size_t j = 0; j < nt; ++j) {
            const auto ai = static_cast<Eigen::Index>(a);
            const auto ji = static_cast<Eigen::Index>(j);
            StudyRow row;
            row.alpha = alphas[a];
            row.t = targets[j];
            row.true_value = truth[a].true_mu[j];
            double s = 0.0, ss = 0.0;
            for (const auto& rp : reps) {
                if (!rp.ok) continue;
                const double v = rp.mu(ai, ji);
                s += v;
                ss += v * v;
                row.boot_t += rp.cover_t(ai, ji);
                row.percentile += rp.cover_p(ai, ji);
                row.wald += rp.cover_w(ai, ji);
            }
            row.emp_mean = s / ok;
            row.abs_bias = std::abs(row.emp_mean - row.true_value);
            const double var = ok > 1 ? (ss - s * s / ok) / (ok - 1.0) : 0.0;
            row.bias_mc_se = std::sqrt(std::max(var, 0.0) / ok);
            row.boot_t /= ok;
            row.percentile /= ok;
            row.wald /= ok;
            res.rows.push_back(row);
        }
    return res;
}

/// Bandwidth h0 (n / n_ref)^(-1/5), so that n h^5 stays constant.
inline double scaled_bandwidth(double h0, std::size_t n, std::size_t n_ref) {
    return h0 * std::pow(static_cast<double>(n) / static_cast<double>(n_ref), -0.2);
}

}  // namespace aiiw
