#include <gtest/gtest.h>

#include "aiiw/estimator.hpp"
#include "aiiw/simulate.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace aiiw;
using support::subject;

namespace {

const SplineSpec kSpec = SplineSpec::default_window();
const std::vector<double> kTargets{90, 180, 270, 360};

OutcomeFit constant_mean(double mu) {
    OutcomeFit f;
    f.coefficients << std::log(mu), 0, 0, 0;
    f.dispersion = 5.0;
    return f;
}

// intensity whose stratum-1 baseline has a single kernel bump at t0 with
// height lambda0 there; gamma = 0
IntensityFit bump_intensity(double t0, double lambda0) {
    IntensityFit f;
    f.gamma_hat = Eigen::VectorXd::Zero(1);
    f.gamma_se = Eigen::VectorXd::Zero(1);
    f.J = 4;
    f.tau = 460;
    for (int k = 0; k < 4; ++k) {
        StepFunction c{{t0}, {lambda0 * 30.0 / 0.75}};
        f.cum_baselines.push_back(c);
        f.smoothed_baselines.emplace_back(c, 30.0);
    }
    return f;
}

std::vector<SubjectRecord> constant_world(double c, std::size_t n) {
    auto d = simulate_dataset(support::dgm(), n, 41);
    for (auto& s : d) {
        s.baseline_outcome = c;
        for (auto& a : s.assessments) a.outcome = c;
    }
    return d;
}

TEST(Influence, NoAssessmentsInWindowIsAugmentationOnly) {
    const AiiwEstimator est(kSpec);
    const NuisanceFits fits{bump_intensity(100, 0.01), constant_mean(2.0)};
    const InfluenceContribution c = est.influence_contribution(subject("a", 2, {{20, 1}, {30, 2}}), fits, 0.3);
    EXPECT_EQ(c.weighted_term, Eigen::VectorXd::Zero(5));
    EXPECT_EQ(c.m_value, c.augmentation_term);
}

TEST(Influence, HandSetWeightMatchesMatrixProduct) {
    const double tk = 150.0;
    const AiiwEstimator est(kSpec);
    const NuisanceFits fits{bump_intensity(tk, 0.01), constant_mean(2.0)};
    const SubjectRecord s = subject("a", 1, {{tk, 3.0}});
    ASSERT_NEAR(lambda_hat(fits.intensity, tk, {0, 0, 1}), 0.01, 1e-15);
    const InfluenceContribution c = est.influence_contribution(s, fits, 0.0);

    Eigen::MatrixXd V = Eigen::MatrixXd::Zero(5, 5);
    for (double t = 60.5; t < 460; t += 1.0) {
        const Eigen::VectorXd b = oracle::basis(60, 460, {260}, t);
        V += b * b.transpose();
    }
    const double resid = 3.0 - fits.outcome.mean_parameter(tk, {0, 0, 1});
    const Eigen::VectorXd expect = V.fullPivLu().solve(oracle::basis(60, 460, {260}, tk)) * (resid / 0.01);
    EXPECT_NEAR(resid, 1.0, 1e-15);
    EXPECT_LT((c.weighted_term - expect).lpNorm<Eigen::Infinity>(), 1e-9 * expect.lpNorm<Eigen::Infinity>());
    EXPECT_LT((c.m_value - c.weighted_term - c.augmentation_term).lpNorm<Eigen::Infinity>(), 1e-15);
}

TEST(Estimate, ConstantWorldReproducesConstant) {
    const auto d = constant_world(2.0, 300);
    const AiiwEstimator est(kSpec);
    const NuisanceFits fits{fit_intensity(d), constant_mean(2.0)};
    const BetaEstimate b = est.estimate_beta(d, fits, 0.0);
    for (double t : {60.0, 90.0, 180.0, 333.0, 460.0}) EXPECT_NEAR(curve_value(b.beta, kSpec, t), 2.0, 1e-10);
}

TEST(Estimate, NeedsAtLeastPSubjects) {
    const auto d = constant_world(2.0, 4);
    const AiiwEstimator est(kSpec);
    const NuisanceFits fits{bump_intensity(100, 0.01), constant_mean(2.0)};
    EXPECT_THROW(est.estimate_beta(d, fits, 0.0), ArgumentError);
}

TEST(Estimate, DuplicatingSubjectsLeavesBetaUnchanged) {
    const auto d = simulate_dataset(support::dgm(), 200, 42);
    auto dd = d;
    dd.insert(dd.end(), d.begin(), d.end());
    AnalysisOptions opt;
    opt.outcome.score_ceiling = 6;
    const NuisanceFits fits = fit_nuisance(d, opt);
    const AiiwEstimator est(kSpec);
    const double alphas[] = {-0.3, 0.0, 0.3};
    const auto e1 = est.estimate(d, fits, alphas);
    const auto e2 = est.estimate(dd, fits, alphas);
    for (int a = 0; a < 3; ++a) EXPECT_LT((e1[a].beta - e2[a].beta).lpNorm<Eigen::Infinity>(), 1e-12);

    // refitting the nuisance models on the doubled data gives the same fits
    const NuisanceFits fits2 = fit_nuisance(dd, opt);
    EXPECT_NEAR(fits2.intensity.gamma_hat(0), fits.intensity.gamma_hat(0), 1e-9);
    const auto e3 = est.estimate(dd, fits2, alphas);
    for (int a = 0; a < 3; ++a) EXPECT_LT((e1[a].beta - e3[a].beta).lpNorm<Eigen::Infinity>(), 1e-7);
}

TEST(Estimate, AarPipelineEqualsPlainAiiw) {
    for (std::optional<int> ceiling : {std::optional<int>{}, std::optional<int>{6}}) {
        const auto d = simulate_dataset(support::dgm(), 200, 43);
        AnalysisOptions opt;
        opt.outcome.score_ceiling = ceiling;
        const NuisanceFits fits = fit_nuisance(d, opt);
        const AiiwEstimator est(kSpec, opt.positivity_floor);
        const BetaEstimate b = est.estimate_beta(d, fits, 0.0);

        const auto& th = fits.outcome.coefficients;
        const double r = fits.outcome.dispersion;
        auto cond = [&](double t, double pt, double py) {
            const double mu = std::exp(th(0) + th(1) * t + th(2) * pt + th(3) * py);
            return ceiling ? oracle::nb_tilted_truncated(mu, r, 0.0, *ceiling).mean() : mu;
        };
        auto lam = [&](double t, const SubjectRecord& s, std::size_t k) {
            const double pt = k == 0 ? 0.0 : s.assessments[k - 1].time;
            const double py = k == 0 ? s.baseline_outcome : s.assessments[k - 1].outcome;
            const int stratum = static_cast<int>(k) + 1;
            const double v = fits.intensity.smoothed_baselines[stratum - 1](t) *
                             std::exp(fits.intensity.gamma_hat(0) * py);
            (void)pt;
            return std::max(v, opt.positivity_floor);
        };
        const Eigen::VectorXd ob = oracle::plain_aiiw(d, 60, 460, {260}, lam, cond);
        for (double t : kTargets)
            EXPECT_NEAR(curve_value(b.beta, kSpec, t), ob.dot(oracle::basis(60, 460, {260}, t)), 1e-10);
    }
}

TEST(Variance, Properties) {
    const Eigen::VectorXd beta = Eigen::VectorXd::Constant(3, 1.5);
    const std::vector<Eigen::VectorXd> same(10, beta);
    EXPECT_EQ(variance_beta(same, beta), Eigen::MatrixXd::Zero(3, 3));

    Rng rng(44, {0}, StreamPurpose::test);
    std::vector<Eigen::VectorXd> m(50), m2(50);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(3);
    for (auto& v : m) {
        v = Eigen::VectorXd(3);
        for (int j = 0; j < 3; ++j) v(j) = rng.uniform() * 4 - 1;
        mean += v;
    }
    mean /= 50.0;
    for (int i = 0; i < 50; ++i) m2[i] = mean + 2.0 * (m[i] - mean);
    const Eigen::MatrixXd c1 = variance_beta(m, mean);
    const Eigen::MatrixXd c2 = variance_beta(m2, mean);
    EXPECT_LT((c2 - 4.0 * c1).lpNorm<Eigen::Infinity>(), 1e-12 * c1.lpNorm<Eigen::Infinity>());
    EXPECT_EQ(c1, c1.transpose());
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(c1).eigenvalues().minCoeff(), -1e-15);

    // Welford population variance / n
    for (int j = 0; j < 3; ++j) {
        double mu = 0.0, m2s = 0.0;
        for (int i = 0; i < 50; ++i) {
            const double x = m[i](j);
            const double delta = x - mu;
            mu += delta / (i + 1);
            m2s += delta * (x - mu);
        }
        EXPECT_NEAR(c1(j, j), m2s / 50.0 / 50.0, 1e-12);
    }
}

TEST(MuAt, QuadraticForm) {
    const Eigen::VectorXd beta = Eigen::VectorXd::LinSpaced(5, 1.0, 2.0);
    EXPECT_EQ(mu_at(beta, Eigen::MatrixXd::Zero(5, 5), kSpec, 200).se, 0.0);
    const Eigen::VectorXd b = evaluate_basis(kSpec, 200);
    EXPECT_NEAR(std::pow(mu_at(beta, Eigen::MatrixXd::Identity(5, 5), kSpec, 200).se, 2), b.squaredNorm(), 1e-15);
    Eigen::MatrixXd cov(5, 5);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) cov(i, j) = 0.01 * std::exp(-std::abs(i - j));
    const Eigen::VectorXd o = oracle::basis(60, 460, {260}, 180);
    const TargetEstimate te = mu_at(beta, cov, kSpec, 180);
    EXPECT_NEAR(te.se * te.se, o.dot(cov * o), 1e-14);
    EXPECT_NEAR(te.mu, beta.dot(o), 1e-12);
}

TEST(Intervals, BootTReducesToWald) {
    const std::vector<double> t(200, 1.96);
    const Interval ci = boot_t_interval(2.5, 0.2, t);
    EXPECT_DOUBLE_EQ(ci.low, 2.5 - 1.96 * 0.2);
    EXPECT_DOUBLE_EQ(ci.high, 2.5 + 1.96 * 0.2);
    std::vector<double> mixed;
    for (int i = 0; i < 300; ++i) mixed.push_back(std::sin(i) * 3);
    const Interval s = boot_t_interval(1.0, 0.5, mixed);
    EXPECT_DOUBLE_EQ(s.high - 1.0, 1.0 - s.low);
    EXPECT_NEAR(quantile({1, 2, 3, 4, 5}, 0.95), 4.8, 1e-15);
}

class Bootstrap : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        data = new std::vector<SubjectRecord>(simulate_dataset(support::dgm(), 200, 45));
        opt.outcome.score_ceiling = 6;
    }
    static void TearDownTestSuite() { delete data; }
    static std::vector<SubjectRecord>* data;
    static AnalysisOptions opt;
};
std::vector<SubjectRecord>* Bootstrap::data = nullptr;
AnalysisOptions Bootstrap::opt;

TEST_F(Bootstrap, DeterministicAcrossRunsAndWorkers) {
    const double alphas[] = {0.0, 0.3};
    BootstrapOptions bo;
    bo.resamples = 100;
    bo.seed = 5;
    const ArmAnalysis a = analyze_arm(*data, opt, alphas, kTargets, bo);
    bo.workers = 3;
    const ArmAnalysis b = analyze_arm(*data, opt, alphas, kTargets, bo);
    ASSERT_EQ(a.results.size(), b.results.size());
    for (std::size_t i = 0; i < a.results.size(); ++i)
        for (std::size_t j = 0; j < kTargets.size(); ++j) {
            const auto& x = a.results[i].targets[j];
            const auto& y = b.results[i].targets[j];
            EXPECT_EQ(x.mu_hat, y.mu_hat);
            EXPECT_EQ(x.boot_t.low, y.boot_t.low);
            EXPECT_EQ(x.boot_t.high, y.boot_t.high);
            EXPECT_EQ(x.percentile.low, y.percentile.low);
            EXPECT_TRUE(x.boot_t.contains(x.mu_hat));
            EXPECT_DOUBLE_EQ(x.boot_t.high - x.mu_hat, x.mu_hat - x.boot_t.low);
        }
}

TEST_F(Bootstrap, SingleTargetInterval) {
    EXPECT_THROW(bootstrap_t_ci(*data, opt, 0.0, 180, 99, 1), ArgumentError);
    const Interval ci = bootstrap_t_ci(*data, opt, 0.0, 180, 100, 1);
    EXPECT_TRUE(ci.valid());
    EXPECT_LT(ci.low, ci.high);
}

TEST(Effect, IdenticalArmsAndShiftedConstantWorld) {
    const auto d = simulate_dataset(support::dgm(), 200, 46);
    AnalysisOptions opt;
    opt.outcome.score_ceiling = 6;
    const double alphas[] = {0.0};
    BootstrapOptions bo;
    bo.resamples = 0;
    const ArmAnalysis a = analyze_arm(d, opt, alphas, kTargets, bo);
    EXPECT_EQ(treatment_effect(a, 0, a, 0, 180).estimate, 0.0);

    const auto c2 = constant_world(2.0, 200);
    const auto c3 = constant_world(3.0, 200);
    AnalysisOptions plain;
    const ArmAnalysis x = analyze_arm(c3, plain, alphas, kTargets, bo);
    const ArmAnalysis y = analyze_arm(c2, plain, alphas, kTargets, bo);
    EXPECT_NEAR(treatment_effect(x, 0, y, 0, 180).estimate, 1.0, 1e-6);

    const double other_targets[] = {90, 180};
    const ArmAnalysis z = analyze_arm(c2, plain, alphas, other_targets, bo);
    EXPECT_THROW(treatment_effect(x, 0, z, 0, 180), ArgumentError);
}

TEST(Effect, RecoversSimulatedContrast) {
    DgmSpec da = support::dgm();
    DgmSpec db = support::dgm();
    db.outcome_coefficients(0) -= 0.12;
    const double alphas[] = {0.0};
    const double t180[] = {180.0};
    const auto ta = compute_truth(da, alphas, 200000, kSpec, t180, 1);
    const auto tb = compute_truth(db, alphas, 200000, kSpec, t180, 2);
    const double truth = ta[0].true_mu[0] - tb[0].true_mu[0];

    AnalysisOptions opt;
    opt.outcome.score_ceiling = 6;
    BootstrapOptions bo;
    bo.resamples = 0;
    const ArmAnalysis a = analyze_arm(simulate_dataset(da, 2000, 47, 0), opt, alphas, kTargets, bo);
    const ArmAnalysis b = analyze_arm(simulate_dataset(db, 2000, 47, 1), opt, alphas, kTargets, bo);
    const EffectResult e = treatment_effect(a, 0, b, 0, 180);
    EXPECT_LT(std::abs(e.estimate - truth), 3 * e.se) << e.estimate << " vs " << truth << " se " << e.se;
}

TEST(Estimate, AarSimulationWithinThreeSe) {
    const DgmSpec dg = support::dgm();
    const double alphas[] = {0.0};
    const auto truth = compute_truth(dg, alphas, 200000, kSpec, kTargets, 3);
    AnalysisOptions opt;
    opt.outcome.score_ceiling = 6;
    BootstrapOptions bo;
    bo.resamples = 0;
    const ArmAnalysis a = analyze_arm(simulate_dataset(dg, 2000, 48), opt, alphas, kTargets, bo);
    for (std::size_t j = 0; j < kTargets.size(); ++j) {
        const auto& tr = a.results[0].targets[j];
        EXPECT_LT(std::abs(tr.mu_hat - truth[0].true_mu[j]), 3 * tr.se) << "t=" << kTargets[j];
    }
}

TEST(Plausibility, OpenIntervalOnTheLattice) {
    const Eigen::VectorXd mid = Eigen::VectorXd::Constant(5, 2.1);
    EXPECT_TRUE(check_plausible(mid, kSpec, 1.2, 3.0).plausible);

    Eigen::VectorXd touch = Eigen::VectorXd::Constant(5, 2.0);
    touch(0) = 3.0;  // B(60) = e_1, so the curve reaches 3.0 only at t = 60
    const PlausibilityCheck c = check_plausible(touch, kSpec, 1.2, 3.0);
    EXPECT_FALSE(c.plausible);
    EXPECT_EQ(c.max_value, 3.0);
    EXPECT_EQ(c.t_at_max, 60.0);

    Eigen::VectorXd peak = Eigen::VectorXd::Constant(5, 2.0);
    peak(2) = 3.2;
    const PlausibilityCheck p = check_plausible(peak, kSpec, -1e300, 1e300);
    EXPECT_TRUE(p.plausible);
    EXPECT_THROW(check_plausible(mid, kSpec, 3.0, 1.2), ArgumentError);
}

TEST(Plausibility, FilterPerResult) {
    std::vector<SensitivityResult> rs(3);
    rs[0].alpha = -0.3;
    rs[0].beta_hat = Eigen::VectorXd::Constant(5, 1.5);
    rs[1].alpha = 0.0;
    rs[1].beta_hat = Eigen::VectorXd::Constant(5, 2.5);
    rs[2].alpha = 0.3;
    rs[2].beta_hat = Eigen::VectorXd::Constant(5, 2.8);
    rs[2].beta_hat(4) = 3.05;
    const auto kept = plausible_alpha_range(rs, kSpec, 1.2, 3.0);
    ASSERT_EQ(kept.size(), 2u);
    EXPECT_TRUE(rs[0].plausible);
    EXPECT_TRUE(rs[1].plausible);
    EXPECT_FALSE(rs[2].plausible);
}

TEST(SignClass, Classification) {
    EXPECT_STREQ(sign_class_name(classify({-2, -1})), "negative");
    EXPECT_STREQ(sign_class_name(classify({-1, 1})), "spans-zero");
    EXPECT_STREQ(sign_class_name(classify({0.5, 1})), "positive");
}

}  // namespace
