#include <gtest/gtest.h>

#include "aiiw/intensity.hpp"
#include "aiiw/simulate.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace aiiw;
using support::subject;

namespace {

TEST(RiskSets, IntervalsUnrolled) {
    const std::vector<SubjectRecord> d{subject("s", 3, {{100, 2}, {200, 4}})};
    const RiskStructure rs = build_risk_sets(d, 4, 460);
    ASSERT_EQ(rs.strata.size(), 4u);
    const auto& s1 = rs.strata[0];
    const auto& s2 = rs.strata[1];
    const auto& s3 = rs.strata[2];
    ASSERT_EQ(s1.size(), 1u);
    EXPECT_EQ(s1.entry[0], 0);
    EXPECT_EQ(s1.exit[0], 100);
    EXPECT_EQ(s1.event[0], 1);
    EXPECT_EQ(s1.z(0, 0), 3);
    ASSERT_EQ(s2.size(), 1u);
    EXPECT_EQ(s2.entry[0], 100);
    EXPECT_EQ(s2.exit[0], 200);
    EXPECT_EQ(s2.event[0], 1);
    EXPECT_EQ(s2.z(0, 0), 2);
    ASSERT_EQ(s3.size(), 1u);
    EXPECT_EQ(s3.entry[0], 200);
    EXPECT_EQ(s3.exit[0], 460);
    EXPECT_EQ(s3.event[0], 0);
    EXPECT_EQ(s3.z(0, 0), 4);
    EXPECT_EQ(rs.strata[3].size(), 0u);
}

TEST(RiskSets, NoAssessmentsGivesOneCensoredInterval) {
    const std::vector<SubjectRecord> d{subject("s", 1, {})};
    const RiskStructure rs = build_risk_sets(d, 4, 460);
    ASSERT_EQ(rs.strata[0].size(), 1u);
    EXPECT_EQ(rs.strata[0].entry[0], 0);
    EXPECT_EQ(rs.strata[0].exit[0], 460);
    EXPECT_EQ(rs.strata[0].event[0], 0);
    for (int k = 1; k < 4; ++k) EXPECT_EQ(rs.strata[k].size(), 0u);
}

TEST(RiskSets, EventCountsMatchAssessments) {
    const auto d = simulate_dataset(support::dgm(), 300, 5);
    const RiskStructure rs = build_risk_sets(d, 4, 460);
    EXPECT_EQ(rs.total_events(), total_assessments(d));
}

TEST(RiskSets, TooManyAssessmentsNamesSubject) {
    const std::vector<SubjectRecord> d{subject("p-17", 1, {{10, 1}, {20, 1}, {30, 1}})};
    try {
        build_risk_sets(d, 2, 460);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("p-17"), std::string::npos);
    }
}

TEST(PartialLikelihood, ConstantCovariateGivesZero) {
    auto d = simulate_dataset(support::dgm(), 200, 6);
    for (auto& s : d) {
        s.baseline_outcome = 3;
        for (auto& a : s.assessments) a.outcome = 3;
    }
    const RiskStructure rs = build_risk_sets(d, 4, 460);
    const PartialLikelihoodFit fit = fit_partial_likelihood(rs);
    EXPECT_EQ(fit.gamma(0), 0.0);
    EXPECT_EQ(partial_likelihood(rs, fit.gamma).score(0), 0.0);
}

TEST(PartialLikelihood, RecoversSimulatedGamma) {
    const auto d = simulate_dataset(support::dgm(0.3), 2000, 7);
    const RiskStructure rs = build_risk_sets(d, 4, 460);
    const PartialLikelihoodFit fit = fit_partial_likelihood(rs);
    support::check_fit(rs, fit);
    EXPECT_LT(std::abs(fit.gamma(0) - 0.3), 3 * fit.se(0)) << fit.gamma(0) << " se " << fit.se(0);
}

TEST(PartialLikelihood, ToysMatchGridSearch) {
    for (const auto& d : {support::two_subject_toy(), support::three_subject_toy()}) {
        const RiskStructure rs = build_risk_sets(d, 2, 50);
        const PartialLikelihoodFit fit = fit_partial_likelihood(rs);
        support::check_fit(rs, fit);
        const auto strata = oracle::intervals(d, 2, 50);
        const double best =
            oracle::grid_argmax([&](double g) { return oracle::log_partial_likelihood(strata, g); }, -10, 10);
        EXPECT_NEAR(fit.gamma(0), best, 1e-6);
        EXPECT_NEAR(fit.loglik, oracle::log_partial_likelihood(strata, fit.gamma(0)), 1e-10);
    }
}

TEST(PartialLikelihood, SingleStratumEqualsUnstratified) {
    auto dg = support::dgm();
    dg.J = 1;
    dg.intensity.resize(1);
    const auto d = simulate_dataset(dg, 500, 8);
    const RiskStructure rs = build_risk_sets(d, 1, 460);
    const PartialLikelihoodFit strat = fit_partial_likelihood(rs);
    const PartialLikelihoodFit pooled = fit_partial_likelihood(collapse_strata(rs));
    EXPECT_EQ(strat.gamma(0), pooled.gamma(0));
    EXPECT_EQ(strat.loglik, pooled.loglik);
    support::check_fit(rs, strat);
    const auto strata = oracle::intervals(d, 1, 460);
    EXPECT_NEAR(strat.gamma(0),
                oracle::grid_argmax([&](double g) { return oracle::log_partial_likelihood(strata, g); }, -2, 2),
                1e-6);
}

TEST(PartialLikelihood, MonotoneLikelihoodIsFlagged) {
    // the subject with the larger covariate always has the event first
    const std::vector<SubjectRecord> d{subject("a", 5, {{10, 0}}), subject("b", 0, {{20, 0}})};
    EXPECT_THROW(fit_partial_likelihood(build_risk_sets(d, 1, 50)), MonotoneLikelihoodError);
}

TEST(Breslow, NelsonAalenAtGammaZero) {
    const auto d = simulate_dataset(support::dgm(), 400, 9);
    const RiskStructure rs = build_risk_sets(d, 4, 460);
    const auto cum = breslow_cumulative(rs, Eigen::VectorXd::Zero(1));
    const auto strata = oracle::intervals(d, 4, 460);
    for (int k = 0; k < 4; ++k) {
        const auto na = oracle::nelson_aalen(strata[k]);
        ASSERT_EQ(na.size(), cum[k].times.size());
        std::size_t j = 0;
        for (auto [t, inc] : na) {
            EXPECT_EQ(cum[k].times[j], t);
            EXPECT_EQ(cum[k].jumps[j], inc);
            ++j;
        }
    }
}

TEST(Breslow, TiedTimesUseTieConvention) {
    const std::vector<SubjectRecord> d{subject("a", 1, {{10, 0}}), subject("b", 1, {{10, 0}}),
                                       subject("c", 1, {{20, 0}})};
    const auto cum = breslow_cumulative(build_risk_sets(d, 1, 50), Eigen::VectorXd::Zero(1));
    ASSERT_EQ(cum[0].times.size(), 2u);
    EXPECT_EQ(cum[0].jumps[0], 2.0 / 3.0);
    EXPECT_EQ(cum[0].jumps[1], 1.0);
}

TEST(Breslow, NondecreasingFromZero) {
    const auto d = simulate_dataset(support::dgm(), 400, 10);
    const IntensityFit fit = fit_intensity(d);
    for (const auto& c : fit.cum_baselines) {
        EXPECT_EQ(c(0.0), 0.0);
        double prev = 0.0;
        for (double t = 0; t <= 460; t += 0.5) {
            const double v = c(t);
            EXPECT_GE(v, prev);
            prev = v;
        }
    }
}

TEST(Breslow, HomogeneousPoissonCumulative) {
    DgmSpec dg = support::dgm(0.0);
    dg.J = 1;
    dg.intensity = {PiecewiseConstantRate::constant(0.01, 460)};
    const auto d = simulate_dataset(dg, 1000, 11);
    IntensityOptions opt;
    opt.J = 1;
    const IntensityFit fit = fit_intensity(d, opt);
    EXPECT_NEAR(fit.cum_baselines[0](300.0), 3.0, 0.15 * 3.0);
}

TEST(Smoothing, SingleJumpAndSupport) {
    const StepFunction f{{100.0}, {0.4}};
    const SmoothedBaseline s = smooth_baseline(f, 30.0);
    EXPECT_DOUBLE_EQ(s(100.0), 0.75 * 0.4 / 30.0);
    EXPECT_EQ(s(130.5), 0.0);
    EXPECT_EQ(s(69.0), 0.0);
    EXPECT_GE(s(120.0), 0.0);
    EXPECT_THROW(smooth_baseline(f, 0.0), ArgumentError);
    EXPECT_THROW(smooth_baseline(f, -1.0), ArgumentError);
}

TEST(Smoothing, KernelMassConservation) {
    const auto d = simulate_dataset(support::dgm(), 2000, 12);
    const IntensityFit fit = fit_intensity(d);
    const StepFunction& cum = fit.cum_baselines[0];
    const SmoothedBaseline& sm = fit.smoothed_baselines[0];
    const double lo = 10.0, hi = 250.0;
    double integral = 0.0;
    for (double t = lo + 0.05; t < hi; t += 0.1) integral += sm(t) * 0.1;
    const double mass = cum(hi) - cum(lo);
    EXPECT_NEAR(integral / mass, 1.0, 0.02);
}

TEST(LambdaHat, ReductionsAndMonotonicity) {
    const auto d = simulate_dataset(support::dgm(), 500, 13);
    const IntensityFit f0 = fit_intensity_fixed_gamma(d, Eigen::VectorXd::Zero(1));
    const IntensityFit f = fit_intensity(d);
    ASSERT_GT(f.gamma_hat(0), 0.0);
    for (double t : {50.0, 90.0, 200.0, 333.0}) {
        for (int k = 0; k < 4; ++k) {
            const ObservedPastFeatures p{k, 0.0, 4.0};
            EXPECT_EQ(lambda_hat(f0, t, p), f0.smoothed_baselines[k](t));
            const ObservedPastFeatures zero{k, 0.0, 0.0};
            EXPECT_EQ(lambda_hat(f, t, zero), f.smoothed_baselines[k](t));
            double prev = -1.0;
            for (double y = 0; y <= 6; y += 1) {
                const double v = lambda_hat(f, t, {k, 0.0, y});
                EXPECT_GE(v, prev);
                prev = v;
            }
        }
        EXPECT_EQ(lambda_hat(f, t, {4, 10.0, 2.0}), 0.0);
    }
}

TEST(IntensityFit, AnalysisOfSimulatedDataRecoversGamma) {
    const auto d = simulate_dataset(support::dgm(), 5000, 14);
    const IntensityFit f = fit_intensity(d);
    EXPECT_LT(std::abs(f.gamma_hat(0) - 0.1), 3 * f.gamma_se(0));
    EXPECT_LT(f.score_norm, 1e-8);
}

}  // namespace
