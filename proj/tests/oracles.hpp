#pragma once

// Independent reference implementations used only by the tests. Nothing here
// calls into the library's numerical routines except where a test needs the
// library's fitted nuisance objects as inputs.

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include <Eigen/Dense>

#include "aiiw/records.hpp"

namespace oracle {

/// Textbook Cox-de Boor recursion on the clamped knot vector, evaluated
/// directly from the definition with 0/0 := 0. At t == b the last basis
/// function is 1 (right-end convention).
inline double cox_de_boor(const std::vector<double>& knots, int i, int deg, double t) {
    if (deg == 0) {
        const double lo = knots[i], hi = knots[i + 1];
        if (t >= lo && t < hi) return 1.0;
        return 0.0;
    }
    double v = 0.0;
    const double d1 = knots[i + deg] - knots[i];
    const double d2 = knots[i + deg + 1] - knots[i + 1];
    if (d1 > 0.0) v += (t - knots[i]) / d1 * cox_de_boor(knots, i, deg - 1, t);
    if (d2 > 0.0) v += (knots[i + deg + 1] - t) / d2 * cox_de_boor(knots, i + 1, deg - 1, t);
    return v;
}

inline Eigen::VectorXd basis(double a, double b, const std::vector<double>& interior, double t) {
    std::vector<double> knots(4, a);
    knots.insert(knots.end(), interior.begin(), interior.end());
    knots.insert(knots.end(), 4, b);
    const int p = 4 + static_cast<int>(interior.size());
    Eigen::VectorXd out(p);
    if (t == b) {
        out.setZero();
        out(p - 1) = 1.0;
        return out;
    }
    for (int i = 0; i < p; ++i) out(i) = cox_de_boor(knots, i, 3, t);
    return out;
}

/// Unnormalized NB weights summed in long double to y = ymax.
struct BruteMoments {
    long double m0 = 0, m1 = 0;
    double mean() const { return static_cast<double>(m1 / m0); }
};

inline BruteMoments nb_tilted(double mu, double r, double alpha, int ymax) {
    BruteMoments out;
    const long double lmu = mu, lr = r, la = alpha;
    for (int y = 0; y <= ymax; ++y) {
        const long double logp = std::lgamma(lr + y) - std::lgamma(lr) - std::lgamma(static_cast<long double>(y) + 1) +
                                 lr * std::log(lr / (lr + lmu)) + y * std::log(lmu / (lr + lmu));
        const long double w = std::exp(logp + la * y);
        out.m0 += w;
        out.m1 += y * w;
    }
    return out;
}

/// Tilted moments of the NB truncated to {0..ceiling}, renormalized.
inline BruteMoments nb_tilted_truncated(double mu, double r, double alpha, int ceiling) {
    const BruteMoments untilted = nb_tilted(mu, r, 0.0, ceiling);
    BruteMoments t = nb_tilted(mu, r, alpha, ceiling);
    t.m0 /= untilted.m0;
    t.m1 /= untilted.m0;
    return t;
}

/// Risk interval of stratum k written out from the raw records.
struct Interval {
    double entry, exit, z;
    bool event;
};

inline std::vector<std::vector<Interval>> intervals(const std::vector<aiiw::SubjectRecord>& data, int J,
                                                    double tau) {
    std::vector<std::vector<Interval>> out(J);
    for (const auto& s : data) {
        double prev_t = 0.0, prev_y = s.baseline_outcome;
        for (int k = 0; k < J; ++k) {
            if (k < static_cast<int>(s.assessments.size())) {
                out[k].push_back({prev_t, s.assessments[k].time, prev_y, true});
                prev_t = s.assessments[k].time;
                prev_y = s.assessments[k].outcome;
            } else {
                if (tau > prev_t) out[k].push_back({prev_t, tau, prev_y, false});
                break;
            }
        }
    }
    return out;
}

/// Stratified log partial likelihood with Breslow ties, one term per event.
inline double log_partial_likelihood(const std::vector<std::vector<Interval>>& strata, double gamma) {
    double ll = 0.0;
    for (const auto& st : strata)
        for (const auto& ev : st) {
            if (!ev.event) continue;
            double denom = 0.0;
            for (const auto& r : st)
                if (r.entry < ev.exit && ev.exit <= r.exit) denom += std::exp(gamma * r.z);
            ll += gamma * ev.z - std::log(denom);
        }
    return ll;
}

/// Successively refined grid search for the maximizer on [lo, hi].
inline double grid_argmax(const std::function<double(double)>& f, double lo, double hi) {
    double step = (hi - lo) / 2000.0;
    double best = lo, best_v = f(lo);
    for (int round = 0; round < 8; ++round) {
        for (double x = lo; x <= hi + 1e-15; x += step) {
            const double v = f(x);
            if (v > best_v) {
                best_v = v;
                best = x;
            }
        }
        lo = best - step;
        hi = best + step;
        step /= 20.0;
    }
    return best;
}

/// Nelson-Aalen increments per distinct event time of a stratum.
inline std::map<double, double> nelson_aalen(const std::vector<Interval>& st) {
    std::set<double> times;
    for (const auto& r : st)
        if (r.event) times.insert(r.exit);
    std::map<double, double> out;
    for (double t : times) {
        int events = 0, at_risk = 0;
        for (const auto& r : st) {
            if (r.event && r.exit == t) ++events;
            if (r.entry < t && t <= r.exit) ++at_risk;
        }
        out[t] = static_cast<double>(events) / static_cast<double>(at_risk);
    }
    return out;
}

/// 1 - exp(-integral of the piecewise-constant rate) at t.
inline double first_event_cdf(const std::vector<double>& breaks, const std::vector<double>& rates, double factor,
                              double t) {
    double cum = 0.0;
    for (std::size_t i = 0; i < rates.size(); ++i) {
        const double lo = breaks[i], hi = std::min(breaks[i + 1], t);
        if (hi > lo) cum += rates[i] * (hi - lo);
    }
    return 1.0 - std::exp(-factor * cum);
}

/// Plain augmented inverse-intensity estimator of the spline coefficients:
/// weights 1/lambda, augmentation with the supplied conditional mean, all
/// integrals by a midpoint sum on the unit lattice of [a, b], V solved by LU.
inline Eigen::VectorXd plain_aiiw(
    const std::vector<aiiw::SubjectRecord>& data, double a, double b, const std::vector<double>& interior,
    const std::function<double(double, const aiiw::SubjectRecord&, std::size_t)>& lambda_at_assessment,
    const std::function<double(double, double, double)>& cond_mean /* (t, prev_time, prev_outcome) */) {
    const int p = 4 + static_cast<int>(interior.size());
    Eigen::MatrixXd V = Eigen::MatrixXd::Zero(p, p);
    for (double t = a + 0.5; t < b; t += 1.0) {
        const Eigen::VectorXd B = basis(a, b, interior, t);
        V += B * B.transpose();
    }
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(V);
    Eigen::VectorXd total = Eigen::VectorXd::Zero(p);
    for (const auto& s : data) {
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(p);
        for (std::size_t k = 0; k < s.assessments.size(); ++k) {
            const double t = s.assessments[k].time;
            if (t < a || t > b) continue;
            const double pt = k == 0 ? 0.0 : s.assessments[k - 1].time;
            const double py = k == 0 ? s.baseline_outcome : s.assessments[k - 1].outcome;
            const double resid = s.assessments[k].outcome - cond_mean(t, pt, py);
            acc += basis(a, b, interior, t) * (resid / lambda_at_assessment(t, s, k));
        }
        for (double t = a + 0.5; t < b; t += 1.0) {
            double pt = 0.0, py = s.baseline_outcome;
            for (const auto& as : s.assessments)
                if (as.time < t) {
                    pt = as.time;
                    py = as.outcome;
                }
            acc += basis(a, b, interior, t) * cond_mean(t, pt, py);
        }
        total += acc;
    }
    return lu.solve(total / static_cast<double>(data.size()));
}

}  // namespace oracle
