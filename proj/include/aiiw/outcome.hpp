#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aiiw/error.hpp"
#include "aiiw/intensity.hpp"
#include "aiiw/records.hpp"

namespace aiiw {

// Outcome model for assessed outcomes: negative binomial (size r, mean mu)
// with log mu = theta' (1, t, prev_time, prev_outcome). An optional score
// ceiling C turns the family into the NB truncated to {0, ..., C}.

using OutcomeDesign = Eigen::Vector4d;

inline OutcomeDesign outcome_design(double t, const ObservedPastFeatures& past) {
    return OutcomeDesign(1.0, t, past.prev_time, past.prev_outcome);
}

struct OutcomeFit {
    Eigen::Vector4d coefficients = Eigen::Vector4d::Zero();
    double dispersion = 1.0;  // NB size r
    std::optional<int> score_ceiling;
    int support_max = 0;  // lower bound on the summation range for moments
    bool poisson_boundary = false;
    Eigen::Vector4d coefficient_se = Eigen::Vector4d::Constant(std::numeric_limits<double>::quiet_NaN());
    double loglik = 0.0;
    double gradient_norm = 0.0;
    int iterations = 0;
    std::size_t records = 0;
    std::size_t rounded = 0;

    double mean_parameter(double t, const ObservedPastFeatures& past) const {
        return std::exp(coefficients.dot(outcome_design(t, past)));
    }
};

/// log NB(y; mu, r) for integer y >= 0.
inline double nb_logpmf(int y, double mu, double r) {
    double s = 0.0;
    for (int j = 0; j < y; ++j) s += std::log((r + j) / (j + 1.0));
    return s - r * std::log1p(mu / r) + y * (std::log(mu) - std::log(r + mu));
}

struct TiltedMoments {
    double m0 = 1.0;  // E[exp(alpha Y)]
    double m1 = 0.0;  // E[Y exp(alpha Y)]
    int terms = 0;
    double mean() const { return m1 / m0; }
};

namespace detail {

inline TiltedMoments tilted_moments_truncated(double mu, double r, int ceiling, double alpha) {
    // unnormalized w_y = prod_{j<y} (r+j)/(j+1) q^y; the pmf normalizer cancels
    const double q = mu / (mu + r);
    const double ea = std::exp(alpha);
    double w = 1.0, tilt = 1.0;
    double z = 0.0, s0 = 0.0, s1 = 0.0;
    for (int y = 0; y <= ceiling; ++y) {
        if (y > 0) {
            w *= (r + y - 1) / static_cast<double>(y) * q;
            tilt *= ea;
        }
        z += w;
        s0 += w * tilt;
        s1 += y * w * tilt;
        if (z > 1e250 || s0 > 1e250) {
            w *= 1e-250;
            z *= 1e-250;
            s0 *= 1e-250;
            s1 *= 1e-250;
        }
    }
    return {s0 / z, s1 / z, ceiling + 1};
}

inline TiltedMoments tilted_moments_untruncated(double mu, double r, int support_max, double alpha) {
    constexpr double rel_tail = 1e-13;
    constexpr int hard_cap = 10'000'000;
    const double s = mu / (mu + r) * std::exp(alpha);
    auto overflow = [&](const char* why) {
        std::ostringstream os;
        os << "tilted moments diverge or exceed working precision (" << why << ") at alpha=" << alpha
           << ", mu=" << mu << ", r=" << r;
        throw TiltOverflowError(alpha, mu, os.str());
    };
    if (!(s < 1.0)) overflow("exp(alpha) * mu/(mu+r) >= 1");

    // terms start at 1 and are rescaled by exp(log p0 + shift) at the end
    double term = 1.0, s0 = 0.0, s1 = 0.0, log_shift = 0.0;
    int y = 0;
    for (;; ++y) {
        if (y > 0) term *= (r + y - 1) / static_cast<double>(y) * s;
        s0 += term;
        s1 += y * term;
        if (s0 > 1e250) {
            term *= 1e-250;
            s0 *= 1e-250;
            s1 *= 1e-250;
            log_shift += 250.0 * std::log(10.0);
        }
        const double ratio = (r + y) / (y + 1.0) * s;
        const double bound = std::max(ratio, s);
        if (y >= support_max && bound < 1.0) {
            const double tail0 = term * bound / (1.0 - bound);
            const double bound1 = bound * (y + 2.0) / (y + 1.0);
            if (bound1 < 1.0) {
                const double tail1 = (y + 1.0) * term * bound / (1.0 - bound1);
                if (tail0 <= rel_tail * s0 && tail1 <= rel_tail * std::max(s1, std::numeric_limits<double>::min()))
                    break;
            }
        }
        if (y >= hard_cap) overflow("tail bound unattainable");
    }
    const double log_p0 = -r * std::log1p(mu / r);
    const double scale = std::exp(log_p0 + log_shift);
    if (!std::isfinite(scale)) overflow("normalizer out of range");
    TiltedMoments out{s0 * scale, s1 * scale, y + 1};
    if (!std::isfinite(out.m0) || !std::isfinite(out.m1) || !(out.m0 > 0.0)) overflow("non-finite moment");
    return out;
}

}  // namespace detail

/// m0 = E[e^{alpha Y}], m1 = E[Y e^{alpha Y}] under the fitted family with mean
/// parameter mu.
inline TiltedMoments tilted_moments(const OutcomeFit& fit, double mu, double alpha) {
    if (alpha == 0.0 && !fit.score_ceiling) return {1.0, mu, 0};
    if (fit.score_ceiling) return detail::tilted_moments_truncated(mu, fit.dispersion, *fit.score_ceiling, alpha);
    return detail::tilted_moments_untruncated(mu, fit.dispersion, fit.support_max, alpha);
}

inline TiltedMoments tilted_moments(const OutcomeFit& fit, const ObservedPastFeatures& past, double t,
                                    double alpha) {
    return tilted_moments(fit, fit.mean_parameter(t, past), alpha);
}

/// E[Y(t) | past] under the tilt: m1 / m0.
inline double tilted_conditional_mean(const OutcomeFit& fit, const ObservedPastFeatures& past, double t,
                                      double alpha) {
    const double mu = fit.mean_parameter(t, past);
    if (alpha == 0.0 && !fit.score_ceiling) return mu;
    return tilted_moments(fit, mu, alpha).mean();
}

/// rho(t, y, past) = lambda(t, past) exp(-alpha y) E[exp(alpha Y) | A = 1, past],
/// clipped below at `floor`. Each clip increments `*violations` when given.
inline double rho_hat(const IntensityFit& ifit, const OutcomeFit& ofit, double t, double y,
                      const ObservedPastFeatures& past, double alpha, double floor = 0.0,
                      std::size_t* violations = nullptr) {
    const double lam = lambda_hat(ifit, t, past);
    double rho = lam;
    if (alpha != 0.0) rho = lam * std::exp(-alpha * y) * tilted_moments(ofit, past, t, alpha).m0;
    if (rho < floor) {
        if (violations) ++*violations;
        return floor;
    }
    return rho;
}

// ---------------------------------------------------------------------------
// Maximum likelihood fit

struct OutcomeRecord {
    double t = 0.0;
    ObservedPastFeatures past;
    int y = 0;
};

struct OutcomeOptions {
    std::optional<int> score_ceiling;
    int support_max = 0;
    bool round_outcomes = false;
    int max_iterations = 200;
    double tolerance = 1e-8;
    double min_dispersion = 1e-3;
    double max_dispersion = 1e8;  // treated as the Poisson boundary
};

/// One record per assessment, features from the previous assessment (or
/// baseline). Non-integer outcomes are rejected unless rounding is enabled.
inline std::vector<OutcomeRecord> outcome_records(std::span<const SubjectRecord> data, bool round_outcomes,
                                                  std::size_t* rounded = nullptr) {
    std::vector<OutcomeRecord> out;
    std::size_t nr = 0;
    for (const auto& s : data) {
        for (std::size_t k = 0; k < s.assessments.size(); ++k) {
            const double y = s.assessments[k].outcome;
            const double yr = std::round(y);
            if (yr != y) {
                if (!round_outcomes)
                    throw DataError("subject '" + s.id + "': non-integer outcome " + std::to_string(y) +
                                    " (enable rounding to accept)");
                ++nr;
            }
            out.push_back({s.assessments[k].time, past_before_assessment(s, k), static_cast<int>(yr)});
        }
    }
    if (rounded) *rounded = nr;
    return out;
}

namespace detail {

// per-y log likelihood and derivatives in (eta = log mu, phi = log r)
struct NbTerm {
    double l = 0.0;
    double ge = 0.0, gp = 0.0;
    double hee = 0.0, hep = 0.0, hpp = 0.0;
};

// cumulative sums over j < y of log(r+j) - log(j+1), 1/(r+j), 1/(r+j)^2
struct NbPrefix {
    double lg = 0.0, d1 = 0.0, d2 = 0.0;
};

inline NbTerm nb_term(int y, double mu, double r, const NbPrefix& pre) {
    NbTerm t;
    const double rm = r + mu;
    const double log_ratio = -std::log1p(mu / r);  // log(r/(r+mu))
    t.l = pre.lg + r * log_ratio + y * (std::log(mu) - std::log(rm));
    t.ge = r * (y - mu) / rm;
    t.hee = -(y + r) * mu * r / (rm * rm);
    const double dr = pre.d1 + log_ratio + (mu - y) / rm;
    const double drr = -pre.d2 + 1.0 / r - 1.0 / rm - (mu - y) / (rm * rm);
    t.gp = r * dr;
    t.hpp = r * r * drr + r * dr;
    t.hep = r * (y - mu) * mu / (rm * rm);
    return t;
}

inline NbPrefix advance(NbPrefix p, int j, double r) {
    p.lg += std::log((r + j) / (j + 1.0));
    p.d1 += 1.0 / (r + j);
    p.d2 += 1.0 / ((r + j) * (r + j));
    return p;
}

// record contribution (possibly truncated) as an NbTerm in (eta, phi)
inline NbTerm record_term(int y, double mu, double r, std::optional<int> ceiling) {
    NbPrefix pre;
    if (!ceiling) {
        for (int j = 0; j < y; ++j) pre = advance(pre, j, r);
        return nb_term(y, mu, r, pre);
    }
    const int c = *ceiling;
    std::vector<NbTerm> terms(static_cast<std::size_t>(c + 1));
    double lmax = -std::numeric_limits<double>::infinity();
    for (int v = 0; v <= c; ++v) {
        terms[static_cast<std::size_t>(v)] = nb_term(v, mu, r, pre);
        lmax = std::max(lmax, terms[static_cast<std::size_t>(v)].l);
        pre = advance(pre, v, r);
    }
    double z = 0.0;
    for (const auto& t : terms) z += std::exp(t.l - lmax);
    double ege = 0.0, egp = 0.0, ehee = 0.0, ehep = 0.0, ehpp = 0.0, eee = 0.0, eep = 0.0, epp = 0.0;
    for (const auto& t : terms) {
        const double pi = std::exp(t.l - lmax) / z;
        ege += pi * t.ge;
        egp += pi * t.gp;
        ehee += pi * t.hee;
        ehep += pi * t.hep;
        ehpp += pi * t.hpp;
        eee += pi * t.ge * t.ge;
        eep += pi * t.ge * t.gp;
        epp += pi * t.gp * t.gp;
    }
    const NbTerm& obs = terms[static_cast<std::size_t>(y)];
    NbTerm out;
    out.l = obs.l - (lmax + std::log(z));
    out.ge = obs.ge - ege;
    out.gp = obs.gp - egp;
    out.hee = obs.hee - ehee - (eee - ege * ege);
    out.hep = obs.hep - ehep - (eep - ege * egp);
    out.hpp = obs.hpp - ehpp - (epp - egp * egp);
    return out;
}

struct NbObjective {
    double loglik = 0.0;
    Eigen::Matrix<double, 5, 1> grad;
    Eigen::Matrix<double, 5, 5> hess;
};

// Parameters psi = (theta_scaled (4), phi). Design columns are pre-scaled.
inline NbObjective nb_objective(const std::vector<Eigen::Vector4d>& x, const std::vector<int>& y,
                                const Eigen::Matrix<double, 5, 1>& psi, std::optional<int> ceiling) {
    NbObjective obj;
    obj.grad.setZero();
    obj.hess.setZero();
    const double r = std::exp(psi(4));
    const Eigen::Vector4d theta = psi.head<4>();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double mu = std::exp(theta.dot(x[i]));
        const NbTerm t = record_term(y[i], mu, r, ceiling);
        obj.loglik += t.l;
        obj.grad.head<4>() += t.ge * x[i];
        obj.grad(4) += t.gp;
        obj.hess.topLeftCorner<4, 4>() += t.hee * x[i] * x[i].transpose();
        obj.hess.block<4, 1>(0, 4) += t.hep * x[i];
        obj.hess(4, 4) += t.hpp;
    }
    obj.hess.block<1, 4>(4, 0) = obj.hess.block<4, 1>(0, 4).transpose();
    return obj;
}

}  // namespace detail

inline double outcome_loglik(std::span<const OutcomeRecord> recs, const Eigen::Vector4d& coef, double dispersion,
                             std::optional<int> ceiling) {
    double ll = 0.0;
    for (const auto& rec : recs) {
        const double mu = std::exp(coef.dot(outcome_design(rec.t, rec.past)));
        ll += detail::record_term(rec.y, mu, dispersion, ceiling).l;
    }
    return ll;
}

/// Joint Newton-Raphson on (theta, log r) with step halving. The dispersion
/// is clamped to [min_dispersion, max_dispersion]; hitting the upper clamp
/// fixes r there and sets `poisson_boundary`.
inline OutcomeFit fit_outcome_model(std::span<const OutcomeRecord> recs, const OutcomeOptions& opt = {}) {
    if (recs.size() < 6) throw DataError("outcome model needs at least p + 2 = 6 assessment records");
    // time columns are fitted in units of 100 days
    const Eigen::Vector4d scale(1.0, 100.0, 100.0, 1.0);
    std::vector<Eigen::Vector4d> x;
    std::vector<int> y;
    x.reserve(recs.size());
    y.reserve(recs.size());
    double ysum = 0.0, ysq = 0.0;
    for (const auto& rec : recs) {
        if (rec.y < 0) throw DataError("negative outcome");
        if (opt.score_ceiling && rec.y > *opt.score_ceiling)
            throw DataError("outcome " + std::to_string(rec.y) + " above score ceiling " +
                            std::to_string(*opt.score_ceiling));
        x.push_back(outcome_design(rec.t, rec.past).cwiseQuotient(scale));
        y.push_back(rec.y);
        ysum += rec.y;
        ysq += static_cast<double>(rec.y) * rec.y;
    }
    const double n = static_cast<double>(recs.size());
    const double ybar = ysum / n;
    if (!(ybar > 0.0)) throw NumericError("outcome model: all outcomes are zero");
    const double var = ysq / n - ybar * ybar;
    double r0 = var > ybar ? ybar * ybar / (var - ybar) : 100.0;
    r0 = std::clamp(r0, 0.1, 1e4);

    const double phi_lo = std::log(opt.min_dispersion);
    const double phi_hi = std::log(opt.max_dispersion);
    Eigen::Matrix<double, 5, 1> psi;
    psi << std::log(ybar), 0.0, 0.0, 0.0, std::log(r0);
    bool phi_fixed = false;

    auto free_dim = [&] { return phi_fixed ? 4 : 5; };
    auto grad_norm_original = [&](const detail::NbObjective& o) {
        double g = 0.0;
        for (int j = 0; j < 4; ++j) g = std::max(g, std::abs(o.grad(j) / scale(j)));
        if (!phi_fixed) g = std::max(g, std::abs(o.grad(4)));
        return g;
    };

    detail::NbObjective cur = detail::nb_objective(x, y, psi, opt.score_ceiling);
    std::ostringstream trace;
    int it = 0;
    for (; it <= opt.max_iterations; ++it) {
        const double gnorm = grad_norm_original(cur);
        trace << " [" << it << "] ll=" << cur.loglik << " |g|=" << gnorm;
        if (gnorm < opt.tolerance) break;
        if (it == opt.max_iterations) throw NumericError("outcome model did not converge:" + trace.str());
        const int m = free_dim();
        Eigen::MatrixXd info = -cur.hess.topLeftCorner(m, m);
        const Eigen::VectorXd g = cur.grad.head(m);
        // Levenberg shift until the information is positive definite
        double shift = 0.0;
        Eigen::LLT<Eigen::MatrixXd> llt(info);
        while (llt.info() != Eigen::Success) {
            shift = shift == 0.0 ? 1e-8 * std::max(1.0, info.diagonal().cwiseAbs().maxCoeff()) : shift * 10.0;
            llt.compute(info + shift * Eigen::MatrixXd::Identity(m, m));
            if (shift > 1e12) throw NumericError("outcome model information matrix degenerate:" + trace.str());
        }
        Eigen::Matrix<double, 5, 1> step = Eigen::Matrix<double, 5, 1>::Zero();
        step.head(m) = llt.solve(g);
        double lam = 1.0;
        bool accepted = false;
        for (int halving = 0; halving < 60; ++halving, lam *= 0.5) {
            Eigen::Matrix<double, 5, 1> cand = psi + lam * step;
            bool hit_upper = false;
            if (!phi_fixed) {
                if (cand(4) >= phi_hi) {
                    cand(4) = phi_hi;
                    hit_upper = true;
                }
                cand(4) = std::max(cand(4), phi_lo);
            }
            detail::NbObjective next = detail::nb_objective(x, y, cand, opt.score_ceiling);
            if (std::isfinite(next.loglik) && next.loglik >= cur.loglik - 1e-12 * std::abs(cur.loglik)) {
                psi = cand;
                cur = std::move(next);
                if (hit_upper) phi_fixed = true;
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            // converged to within floating-point resolution of the likelihood
            if (grad_norm_original(cur) < 1e3 * opt.tolerance) break;
            throw NumericError("outcome model line search failed:" + trace.str());
        }
    }

    OutcomeFit fit;
    fit.coefficients = psi.head<4>().cwiseQuotient(scale);
    fit.dispersion = std::exp(psi(4));
    fit.score_ceiling = opt.score_ceiling;
    fit.support_max = opt.support_max;
    fit.poisson_boundary = phi_fixed;
    fit.loglik = cur.loglik;
    fit.gradient_norm = grad_norm_original(cur);
    fit.iterations = it;
    fit.records = recs.size();
    const int m = free_dim();
    Eigen::MatrixXd info = -cur.hess.topLeftCorner(m, m);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    if (ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0.0).all()) {
        const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(m, m));
        for (int j = 0; j < 4; ++j) fit.coefficient_se(j) = std::sqrt(cov(j, j)) / scale(j);
    }
    return fit;
}

inline OutcomeFit fit_outcome_model(std::span<const SubjectRecord> data, const OutcomeOptions& opt = {}) {
    std::size_t rounded = 0;
    const auto recs = outcome_records(data, opt.round_outcomes, &rounded);
    OutcomeFit fit = fit_outcome_model(std::span<const OutcomeRecord>(recs), opt);
    fit.rounded = rounded;
    return fit;
}

}  // namespace aiiw
