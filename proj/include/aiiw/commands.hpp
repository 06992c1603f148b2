#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "aiiw/config.hpp"
#include "aiiw/dataset_io.hpp"
#include "aiiw/estimator.hpp"
#include "aiiw/simulate.hpp"

namespace aiiw {

/// Fixed-format number for output files; NaN is written as NA.
inline std::string fmt(double v) {
    if (std::isnan(v)) return "NA";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

inline std::string file_header(const RunConfig& c) {
    return "# config_hash=" + config_hash(c) + " seed=" + std::to_string(c.seed);
}

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + p.string() + "'");
    out << content;
    if (!out) throw ConfigError("write failed for '" + p.string() + "'");
}

inline Json vec_json(const Eigen::VectorXd& v) {
    Json a = Json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(std::isfinite(v(i)) ? Json(v(i)) : Json(nullptr));
    return a;
}

inline Json header_json(const RunConfig& c) { return {{"config_hash", config_hash(c)}, {"seed", c.seed}}; }

}  // namespace detail

struct AnalyzeOutput {
    std::vector<Arm> arms;
    std::vector<ArmAnalysis> analyses;
    std::string estimates_csv;
    std::string contour_csv;
    Json diagnostics;
};

/// Runs the full sensitivity analysis in memory.
inline AnalyzeOutput run_analysis(const RunConfig& cfg, const ArmData& data, unsigned workers) {
    cfg.validate();
    AnalyzeOutput out;
    const SplineSpec spec = cfg.spline();
    std::ostringstream est;
    est << file_header(cfg) << '\n'
        << "arm,alpha,t,mu_hat,se,wald_low,wald_high,percentile_low,percentile_high,boot_t_low,boot_t_high,"
           "plausible,positivity_violations\n";
    out.diagnostics["header"] = detail::header_json(cfg);
    Json arms_json = Json::object();

    for (Arm arm : {Arm::control, Arm::intervention}) {
        const auto& recs = data[arm];
        if (recs.empty()) continue;
        const AnalysisOptions opt = cfg.analysis(recs.size());
        for (const auto& s : recs) validate(s, opt.intensity.tau);
        BootstrapOptions bo;
        bo.resamples = cfg.resamples;
        bo.seed = cfg.seed;
        bo.stream = arm == Arm::control ? 0 : 1;
        bo.workers = workers;
        ArmAnalysis an = analyze_arm(recs, opt, cfg.alphas(arm), cfg.targets, bo);

        const ArmBounds& bounds = cfg.bounds(arm);
        Json excluded = Json::array();
        Json violations = Json::array();
        for (auto& r : an.results) {
            const PlausibilityCheck pc = check_plausible(r.beta_hat, spec, bounds.mu_min, bounds.mu_max);
            r.plausible = pc.plausible;
            violations.push_back({{"alpha", r.alpha}, {"count", r.positivity_violations}});
            if (!pc.plausible) {
                std::string reason;
                if (!(pc.max_value < bounds.mu_max))
                    reason = "mean curve reaches " + fmt(pc.max_value) + " at t=" + fmt(pc.t_at_max) +
                             " (mu_max=" + fmt(bounds.mu_max) + ")";
                else
                    reason = "mean curve falls to " + fmt(pc.min_value) + " at t=" + fmt(pc.t_at_min) +
                             " (mu_min=" + fmt(bounds.mu_min) + ")";
                excluded.push_back({{"alpha", r.alpha}, {"reason", reason}});
            }
            for (const auto& tr : r.targets)
                est << arm_name(arm) << ',' << fmt(r.alpha) << ',' << fmt(tr.t) << ',' << fmt(tr.mu_hat) << ','
                    << fmt(tr.se) << ',' << fmt(tr.wald.low) << ',' << fmt(tr.wald.high) << ','
                    << fmt(tr.percentile.low) << ',' << fmt(tr.percentile.high) << ',' << fmt(tr.boot_t.low) << ','
                    << fmt(tr.boot_t.high) << ',' << (r.plausible ? "true" : "false") << ','
                    << r.positivity_violations << '\n';
        }

        const IntensityFit& ifit = an.fits.intensity;
        const OutcomeFit& ofit = an.fits.outcome;
        Json aj;
        aj["subjects"] = recs.size();
        aj["assessments"] = total_assessments(recs);
        aj["intensity"] = {{"gamma_hat", detail::vec_json(ifit.gamma_hat)},
                           {"gamma_se", detail::vec_json(ifit.gamma_se)},
                           {"iterations", ifit.iterations},
                           {"score_norm", ifit.score_norm},
                           {"log_partial_likelihood", ifit.loglik},
                           {"events_per_stratum", ifit.events_per_stratum},
                           {"bandwidth", ifit.bandwidth_h},
                           {"kernel", "epanechnikov"}};
        aj["outcome"] = {{"coefficients", detail::vec_json(ofit.coefficients)},
                         {"coefficient_se", detail::vec_json(ofit.coefficient_se)},
                         {"dispersion", ofit.dispersion},
                         {"poisson_boundary", ofit.poisson_boundary},
                         {"score_ceiling", ofit.score_ceiling ? Json(*ofit.score_ceiling) : Json(nullptr)},
                         {"iterations", ofit.iterations},
                         {"gradient_norm", ofit.gradient_norm},
                         {"loglik", ofit.loglik},
                         {"rounded_outcomes", ofit.rounded}};
        aj["bootstrap"] = {{"resamples", cfg.resamples}, {"failed", an.failed_resamples}};
        aj["positivity_violations"] = violations;
        aj["excluded_alphas"] = excluded;
        arms_json[std::string(arm_name(arm))] = aj;
        out.arms.push_back(arm);
        out.analyses.push_back(std::move(an));
    }
    if (out.arms.empty()) throw DataError("dataset has no subjects");
    out.estimates_csv = est.str();

    // arm contrast intervention - control over the plausible alpha pairs
    std::ostringstream con;
    con << file_header(cfg) << '\n' << "alpha_A,alpha_B,t,effect,ci_low,ci_high,sign_class\n";
    if (out.arms.size() == 2) {
        const ArmAnalysis& ctrl = out.analyses[0];
        const ArmAnalysis& intv = out.analyses[1];
        for (std::size_t ia = 0; ia < intv.alphas.size(); ++ia) {
            if (!intv.results[ia].plausible) continue;
            for (std::size_t ib = 0; ib < ctrl.alphas.size(); ++ib) {
                if (!ctrl.results[ib].plausible) continue;
                for (double t : cfg.targets) {
                    const EffectResult e = treatment_effect(intv, ia, ctrl, ib, t);
                    const Interval ci = cfg.resamples > 0 ? e.boot_t : wald_interval(e.estimate, e.se);
                    con << fmt(intv.alphas[ia]) << ',' << fmt(ctrl.alphas[ib]) << ',' << fmt(t) << ','
                        << fmt(e.estimate) << ',' << fmt(ci.low) << ',' << fmt(ci.high) << ','
                        << sign_class_name(classify(ci)) << '\n';
                }
            }
        }
    }
    out.contour_csv = con.str();
    out.diagnostics["arms"] = arms_json;
    out.diagnostics["contour"] = {{"arm_A", "intervention"},
                                  {"arm_B", "control"},
                                  {"interval", cfg.resamples > 0 ? "boot_t" : "wald"}};
    return out;
}

inline void cmd_analyze(const RunConfig& cfg, const ArmData& data, const std::filesystem::path& out_dir,
                        unsigned workers) {
    const AnalyzeOutput r = run_analysis(cfg, data, workers);
    std::filesystem::create_directories(out_dir);
    detail::write_file(out_dir / "estimates.csv", r.estimates_csv);
    detail::write_file(out_dir / "contour.csv", r.contour_csv);
    detail::write_file(out_dir / "diagnostics.json", r.diagnostics.dump(2) + "\n");
}

inline std::string truth_csv(const RunConfig& cfg, const std::vector<TruthResult>& truth) {
    std::ostringstream o;
    o << file_header(cfg) << '\n' << "alpha,t,true_value\n";
    for (const auto& tr : truth)
        for (std::size_t j = 0; j < tr.targets.size(); ++j)
            o << fmt(tr.alpha) << ',' << fmt(tr.targets[j]) << ',' << fmt(tr.true_mu[j]) << '\n';
    return o.str();
}

inline std::vector<TruthResult> run_truth(const RunConfig& cfg, unsigned workers) {
    const SimulationConfig& sc = cfg.simulation;
    return compute_truth(sc.dgm, sc.alphas, sc.truth_n, cfg.spline(), cfg.targets, cfg.seed, workers);
}

inline void cmd_truth(const RunConfig& cfg, std::ostream& out, unsigned workers) {
    out << truth_csv(cfg, run_truth(cfg, workers));
}

inline void cmd_simulate(const RunConfig& cfg, const std::filesystem::path& out_dir, unsigned workers) {
    const SimulationConfig& sc = cfg.simulation;
    const auto truth = run_truth(cfg, workers);
    StudyOptions so;
    so.n_per_rep = sc.n_per_rep;
    so.reps = sc.reps;
    so.resamples = sc.resamples;
    so.seed = cfg.seed;
    so.workers = workers;
    so.failure_budget = sc.failure_budget;
    const StudyResult study = run_study(sc.dgm, cfg.analysis(sc.n_per_rep), sc.alphas, truth, so);

    std::ostringstream s;
    s << file_header(cfg) << '\n' << "alpha,target,true_value,emp_mean,abs_bias,boot_t,percentile,wald,bias_mc_se\n";
    for (const auto& r : study.rows)
        s << fmt(r.alpha) << ',' << fmt(r.t) << ',' << fmt(r.true_value) << ',' << fmt(r.emp_mean) << ','
          << fmt(r.abs_bias) << ',' << fmt(r.boot_t) << ',' << fmt(r.percentile) << ',' << fmt(r.wald) << ','
          << fmt(r.bias_mc_se) << '\n';

    Json lock;
    lock["header"] = detail::header_json(cfg);
    lock["dgm"] = dgm_to_json(sc.dgm);
    Json tj = Json::array();
    for (const auto& tr : truth)
        tj.push_back({{"alpha", tr.alpha},
                      {"gamma_proj", detail::vec_json(tr.gamma_proj)},
                      {"projection_residual", tr.projection_residual}});
    lock["truth"] = {{"N", sc.truth_n}, {"projections", tj}};
    lock["study"] = {{"n_per_rep", sc.n_per_rep},
                     {"reps", sc.reps},
                     {"resamples", sc.resamples},
                     {"failed_reps", study.failed_reps},
                     {"failures", study.failures}};

    std::filesystem::create_directories(out_dir);
    detail::write_file(out_dir / "truth.csv", truth_csv(cfg, truth));
    detail::write_file(out_dir / "study.csv", s.str());
    detail::write_file(out_dir / "dgm.lock.json", lock.dump(2) + "\n");
}

}  // namespace aiiw
