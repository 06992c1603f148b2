#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "aiiw/error.hpp"

namespace aiiw {

/// Clamped cubic B-spline basis on [a, b] plus the quadrature lattice used
/// for every time integral over that window.
///
/// The lattice splits [a, b] into cells of width `grid_step`; integrals are
/// midpoint sums over the cell centres. With the default step of one day the
/// sums match a daily-interval approximation.
class SplineSpec {
public:
    static constexpr int kDegree = 3;

    SplineSpec(double a, double b, std::vector<double> interior_knots, double grid_step = 1.0)
        : a_(a), b_(b), interior_(std::move(interior_knots)), step_(grid_step) {
        if (!(a_ < b_)) throw ArgumentError("spline domain requires a < b");
        if (!(step_ > 0.0)) throw ArgumentError("grid_step must be positive");
        for (std::size_t i = 0; i < interior_.size(); ++i) {
            if (!(interior_[i] > a_ && interior_[i] < b_))
                throw ArgumentError("interior knot outside (a, b)");
            if (i > 0 && !(interior_[i] > interior_[i - 1]))
                throw ArgumentError("interior knots must be strictly increasing");
        }
        const double cells = (b_ - a_) / step_;
        cells_ = static_cast<std::size_t>(std::llround(cells));
        if (cells_ == 0 || std::abs(cells - static_cast<double>(cells_)) > 1e-9 * std::max(1.0, cells))
            throw ArgumentError("grid_step must divide (b - a) into a whole number of cells");

        knots_.assign(kDegree + 1, a_);
        knots_.insert(knots_.end(), interior_.begin(), interior_.end());
        knots_.insert(knots_.end(), kDegree + 1, b_);
    }

    /// The window [60, 460] days with one interior knot at 260.
    static SplineSpec default_window() { return SplineSpec(60.0, 460.0, {260.0}, 1.0); }

    double a() const { return a_; }
    double b() const { return b_; }
    double grid_step() const { return step_; }
    const std::vector<double>& interior_knots() const { return interior_; }
    const std::vector<double>& knots() const { return knots_; }
    int dimension() const { return kDegree + 1 + static_cast<int>(interior_.size()); }

    std::size_t cell_count() const { return cells_; }
    /// Centre of quadrature cell j.
    double node(std::size_t j) const { return a_ + (static_cast<double>(j) + 0.5) * step_; }
    std::vector<double> nodes() const {
        std::vector<double> out(cells_);
        for (std::size_t j = 0; j < cells_; ++j) out[j] = node(j);
        return out;
    }
    /// Cell boundaries a, a + step, ..., b (cells_ + 1 points).
    std::vector<double> lattice() const {
        std::vector<double> out(cells_ + 1);
        for (std::size_t j = 0; j <= cells_; ++j) out[j] = a_ + static_cast<double>(j) * step_;
        out.back() = b_;
        return out;
    }

    bool contains(double t) const { return t >= a_ && t <= b_; }

    SplineSpec with_grid_step(double step) const { return SplineSpec(a_, b_, interior_, step); }

private:
    double a_;
    double b_;
    std::vector<double> interior_;
    double step_;
    std::size_t cells_ = 0;
    std::vector<double> knots_;
};

using SplineCoefficients = Eigen::VectorXd;

namespace detail {

// index of the knot span [u_i, u_{i+1}) holding t; t == b maps to the last
// non-degenerate span
inline int find_span(const SplineSpec& spec, double t) {
    const auto& u = spec.knots();
    const int n = spec.dimension() - 1;
    if (t >= u[n + 1]) return n;
    auto it = std::upper_bound(u.begin() + SplineSpec::kDegree, u.begin() + n + 1, t);
    return static_cast<int>(it - u.begin()) - 1;
}

}  // namespace detail

/// B(t) via the triangular de Boor scheme. Throws DomainError outside [a, b].
inline Eigen::VectorXd evaluate_basis(const SplineSpec& spec, double t) {
    if (!spec.contains(t)) {
        std::ostringstream os;
        os << "t = " << t << " outside spline domain [" << spec.a() << ", " << spec.b() << "]";
        throw DomainError(os.str());
    }
    constexpr int d = SplineSpec::kDegree;
    const auto& u = spec.knots();
    const int span = detail::find_span(spec, t);

    double local[d + 1];
    double left[d + 1];
    double right[d + 1];
    local[0] = 1.0;
    for (int j = 1; j <= d; ++j) {
        left[j] = t - u[span + 1 - j];
        right[j] = u[span + j] - t;
        double saved = 0.0;
        for (int r = 0; r < j; ++r) {
            const double tmp = local[r] / (right[r + 1] + left[j - r]);
            local[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        local[j] = saved;
    }

    Eigen::VectorXd out = Eigen::VectorXd::Zero(spec.dimension());
    for (int r = 0; r <= d; ++r) out(span - d + r) = local[r];
    return out;
}

/// Basis evaluated at every quadrature node; row j is B(node j)'.
inline Eigen::MatrixXd basis_at_nodes(const SplineSpec& spec) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(spec.cell_count()), spec.dimension());
    for (std::size_t j = 0; j < spec.cell_count(); ++j)
        out.row(static_cast<Eigen::Index>(j)) = evaluate_basis(spec, spec.node(j)).transpose();
    return out;
}

/// V = integral of B(t) B(t)' over [a, b] by the midpoint rule.
inline Eigen::MatrixXd gram_matrix(const SplineSpec& spec) {
    const int p = spec.dimension();
    Eigen::MatrixXd v = Eigen::MatrixXd::Zero(p, p);
    for (std::size_t j = 0; j < spec.cell_count(); ++j) {
        const Eigen::VectorXd bj = evaluate_basis(spec, spec.node(j));
        for (int r = 0; r < p; ++r)
            for (int c = r; c < p; ++c) v(r, c) += bj(r) * bj(c);
    }
    v *= spec.grid_step();
    for (int r = 0; r < p; ++r)
        for (int c = 0; c < r; ++c) v(r, c) = v(c, r);
    return v;
}

inline double curve_value(const SplineCoefficients& coef, const SplineSpec& spec, double t) {
    if (coef.size() != spec.dimension())
        throw ArgumentError("coefficient length " + std::to_string(coef.size()) +
                            " does not match basis dimension " + std::to_string(spec.dimension()));
    return coef.dot(evaluate_basis(spec, t));
}

}  // namespace aiiw
