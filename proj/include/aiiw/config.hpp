#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aiiw/error.hpp"
#include "aiiw/estimator.hpp"
#include "aiiw/simulate.hpp"

namespace aiiw {

using Json = nlohmann::ordered_json;

struct ArmBounds {
    double mu_min = 1.2;
    double mu_max = 3.0;
};

struct SimulationConfig {
    DgmSpec dgm;
    std::vector<double> alphas{-0.3, 0.0, 0.3};
    std::size_t n_per_rep = 200;
    std::size_t reps = 200;
    std::size_t resamples = 500;
    std::size_t truth_n = 1'000'000;
    double failure_budget = 0.02;
};

/// Everything a run needs. Defaults reproduce the reference analysis
/// configuration.
struct RunConfig {
    double spline_a = 60.0;
    double spline_b = 460.0;
    std::vector<double> interior_knots{260.0};
    double grid_step = 1.0;
    std::vector<double> alpha_control{-0.6, -0.3, 0.0, 0.3, 0.6};
    std::vector<double> alpha_intervention{-0.6, -0.3, 0.0, 0.3, 0.6};
    std::vector<double> targets{90.0, 180.0, 270.0, 360.0};
    int J = 4;
    double tau = 460.0;
    double bandwidth = 30.0;
    std::string kernel = "epanechnikov";
    bool scale_bandwidth = false;
    std::size_t bandwidth_reference_n = 200;
    std::optional<int> score_ceiling;
    bool round_outcomes = false;
    int support_max = 0;
    ArmBounds bounds_control{};
    ArmBounds bounds_intervention{};
    std::size_t resamples = 500;
    std::uint64_t seed = 20240601;
    double positivity_floor = 1e-4;
    std::optional<unsigned> workers;
    std::string output_dir = "out";
    SimulationConfig simulation{};

    SplineSpec spline() const { return SplineSpec(spline_a, spline_b, interior_knots, grid_step); }

    const std::vector<double>& alphas(Arm arm) const {
        return arm == Arm::control ? alpha_control : alpha_intervention;
    }
    const ArmBounds& bounds(Arm arm) const { return arm == Arm::control ? bounds_control : bounds_intervention; }

    /// Analysis options; with scale_bandwidth the bandwidth is rescaled to n.
    AnalysisOptions analysis(std::size_t n = 0) const {
        AnalysisOptions o;
        o.spec = spline();
        o.intensity.J = J;
        o.intensity.tau = tau;
        o.intensity.bandwidth =
            (scale_bandwidth && n > 0) ? scaled_bandwidth(bandwidth, n, bandwidth_reference_n) : bandwidth;
        o.intensity.kernel = Kernel::epanechnikov;
        o.outcome.score_ceiling = score_ceiling;
        o.outcome.round_outcomes = round_outcomes;
        o.outcome.support_max = support_max;
        o.positivity_floor = positivity_floor;
        return o;
    }

    void validate() const;
};

namespace detail {

inline double json_number(const Json& j, const std::string& what) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf" || s == "+inf" || s == "Infinity") return std::numeric_limits<double>::infinity();
        if (s == "-inf" || s == "-Infinity") return -std::numeric_limits<double>::infinity();
    }
    throw ConfigError(what + " must be a number");
}

inline std::vector<double> json_numbers(const Json& j, const std::string& what) {
    if (!j.is_array()) throw ConfigError(what + " must be an array of numbers");
    std::vector<double> v;
    for (const auto& x : j) v.push_back(json_number(x, what));
    return v;
}

template <class T>
T json_count(const Json& j, const std::string& what) {
    if (!j.is_number_integer() || j.get<long long>() < 0) throw ConfigError(what + " must be a nonnegative integer");
    return static_cast<T>(j.get<long long>());
}

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

inline PiecewiseConstantRate parse_rate(const Json& j) {
    check_keys(j, {"breaks", "rates"}, "piecewise rate");
    PiecewiseConstantRate r{json_numbers(j.at("breaks"), "breaks"), json_numbers(j.at("rates"), "rates")};
    r.validate();
    return r;
}

/// Rate `high` on [centre - half_width, centre + half_width), `low` elsewhere on [0, tau].
inline PiecewiseConstantRate hump_rate(double centre, double half_width, double high, double low, double tau) {
    const double lo = std::max(0.0, centre - half_width);
    const double hi = std::min(tau, centre + half_width);
    PiecewiseConstantRate r;
    r.breaks.push_back(0.0);
    if (lo > 0.0) {
        r.rates.push_back(low);
        r.breaks.push_back(lo);
    }
    r.rates.push_back(high);
    r.breaks.push_back(hi);
    if (hi < tau) {
        r.rates.push_back(low);
        r.breaks.push_back(tau);
    }
    return r;
}

}  // namespace detail

inline DgmSpec parse_dgm(const Json& j) {
    using namespace detail;
    check_keys(j,
               {"baseline_values", "baseline_uniform_integers", "intensity", "intensity_humps", "gamma",
                "outcome_coefficients", "dispersion", "score_ceiling", "tau", "J", "envelope_inflation",
                "constant_outcome"},
               "dgm");
    DgmSpec d;
    d.tau = json_number(j.value("tau", Json(460.0)), "dgm.tau");
    d.J = json_count<int>(j.value("J", Json(4)), "dgm.J");
    d.gamma = json_number(j.value("gamma", Json(0.0)), "dgm.gamma");
    d.dispersion = json_number(j.value("dispersion", Json(5.0)), "dgm.dispersion");
    d.envelope_inflation = json_number(j.value("envelope_inflation", Json(1.05)), "dgm.envelope_inflation");
    if (j.contains("score_ceiling") && !j.at("score_ceiling").is_null())
        d.score_ceiling = json_count<int>(j.at("score_ceiling"), "dgm.score_ceiling");
    if (j.contains("constant_outcome") && !j.at("constant_outcome").is_null())
        d.constant_outcome = json_number(j.at("constant_outcome"), "dgm.constant_outcome");
    if (j.contains("baseline_values")) {
        d.baseline_values = json_numbers(j.at("baseline_values"), "dgm.baseline_values");
    } else if (j.contains("baseline_uniform_integers")) {
        const auto r = json_numbers(j.at("baseline_uniform_integers"), "dgm.baseline_uniform_integers");
        if (r.size() != 2 || r[0] > r[1]) throw ConfigError("baseline_uniform_integers must be [min, max]");
        for (double v = r[0]; v <= r[1]; v += 1.0) d.baseline_values.push_back(v);
    }
    if (j.contains("outcome_coefficients")) {
        const auto c = json_numbers(j.at("outcome_coefficients"), "dgm.outcome_coefficients");
        if (c.size() != 4) throw ConfigError("dgm.outcome_coefficients needs 4 entries");
        d.outcome_coefficients = Eigen::Vector4d(c[0], c[1], c[2], c[3]);
    }
    if (j.contains("intensity")) {
        for (const auto& r : j.at("intensity")) d.intensity.push_back(parse_rate(r));
    } else if (j.contains("intensity_humps")) {
        const Json& h = j.at("intensity_humps");
        check_keys(h, {"spacing", "half_width", "high", "low"}, "dgm.intensity_humps");
        const double spacing = json_number(h.at("spacing"), "spacing");
        const double half = json_number(h.at("half_width"), "half_width");
        const double high = json_number(h.at("high"), "high");
        const double low = json_number(h.at("low"), "low");
        for (int k = 1; k <= d.J; ++k) d.intensity.push_back(hump_rate(spacing * k, half, high, low, d.tau));
    }
    d.validate();
    return d;
}

inline Json dgm_to_json(const DgmSpec& d) {
    Json j;
    j["baseline_values"] = d.baseline_values;
    Json rates = Json::array();
    for (const auto& r : d.intensity) rates.push_back(Json{{"breaks", r.breaks}, {"rates", r.rates}});
    j["intensity"] = rates;
    j["gamma"] = d.gamma;
    j["outcome_coefficients"] = std::vector<double>(d.outcome_coefficients.data(), d.outcome_coefficients.data() + 4);
    j["dispersion"] = d.dispersion;
    j["score_ceiling"] = d.score_ceiling ? Json(*d.score_ceiling) : Json(nullptr);
    j["tau"] = d.tau;
    j["J"] = d.J;
    j["envelope_inflation"] = d.envelope_inflation;
    if (d.constant_outcome) j["constant_outcome"] = *d.constant_outcome;
    return j;
}

/// The synthetic reference mechanism (also shipped as configs/simulation.json).
inline DgmSpec reference_dgm() {
    DgmSpec d;
    for (int v = 0; v <= 6; ++v) d.baseline_values.push_back(v);
    for (int k = 1; k <= 4; ++k) d.intensity.push_back(detail::hump_rate(90.0 * k, 45.0, 0.03, 0.001, 460.0));
    d.gamma = 0.1;
    d.outcome_coefficients = Eigen::Vector4d(0.7, 0.0002, -0.0001, 0.15);
    d.dispersion = 5.0;
    d.score_ceiling = 6;
    d.tau = 460.0;
    d.J = 4;
    return d;
}

inline void RunConfig::validate() const {
    (void)spline();
    for (const auto* g : {&alpha_control, &alpha_intervention}) {
        if (g->empty()) throw ConfigError("alpha grid is empty");
        for (std::size_t i = 0; i < g->size(); ++i) {
            if (!std::isfinite((*g)[i])) throw ConfigError("alpha grid entries must be finite");
            if (i > 0 && !((*g)[i] > (*g)[i - 1])) throw ConfigError("alpha grid must be strictly increasing");
        }
    }
    if (targets.empty()) throw ConfigError("no target times");
    for (double t : targets)
        if (!(t >= spline_a && t <= spline_b)) throw ConfigError("target time outside the spline window");
    for (const auto* b : {&bounds_control, &bounds_intervention})
        if (!(b->mu_min < b->mu_max)) throw ConfigError("bounds require mu_min < mu_max");
    if (!(bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
    if (kernel != "epanechnikov") throw ConfigError("unsupported kernel '" + kernel + "'");
    if (J < 1) throw ConfigError("J must be >= 1");
    if (!(tau >= spline_b)) throw ConfigError("tau must be >= the end of the spline window");
    if (!(positivity_floor > 0.0)) throw ConfigError("positivity floor must be positive");
    if (resamples != 0 && resamples < 100) throw ConfigError("bootstrap needs 0 or >= 100 resamples");
    if (workers && *workers == 0) throw ConfigError("workers must be >= 1");
}

inline RunConfig parse_config(const Json& j) {
    using namespace detail;
    check_keys(j,
               {"spline", "alpha_grid", "targets", "intensity", "outcome", "bounds", "bootstrap", "seed",
                "positivity_floor", "workers", "output_dir", "simulation"},
               "config");
    RunConfig c;
    if (j.contains("spline")) {
        const Json& s = j.at("spline");
        check_keys(s, {"a", "b", "interior_knots", "grid_step"}, "spline");
        c.spline_a = json_number(s.value("a", Json(c.spline_a)), "spline.a");
        c.spline_b = json_number(s.value("b", Json(c.spline_b)), "spline.b");
        if (s.contains("interior_knots")) c.interior_knots = json_numbers(s.at("interior_knots"), "interior_knots");
        c.grid_step = json_number(s.value("grid_step", Json(c.grid_step)), "spline.grid_step");
    }
    if (j.contains("alpha_grid")) {
        const Json& g = j.at("alpha_grid");
        if (g.is_array()) {
            c.alpha_control = c.alpha_intervention = json_numbers(g, "alpha_grid");
        } else {
            check_keys(g, {"control", "intervention"}, "alpha_grid");
            if (g.contains("control")) c.alpha_control = json_numbers(g.at("control"), "alpha_grid.control");
            if (g.contains("intervention"))
                c.alpha_intervention = json_numbers(g.at("intervention"), "alpha_grid.intervention");
        }
    }
    if (j.contains("targets")) c.targets = json_numbers(j.at("targets"), "targets");
    if (j.contains("intensity")) {
        const Json& s = j.at("intensity");
        check_keys(s, {"J", "tau", "bandwidth", "kernel", "scale_bandwidth", "bandwidth_reference_n"}, "intensity");
        c.J = json_count<int>(s.value("J", Json(c.J)), "intensity.J");
        c.tau = json_number(s.value("tau", Json(c.tau)), "intensity.tau");
        c.bandwidth = json_number(s.value("bandwidth", Json(c.bandwidth)), "intensity.bandwidth");
        c.kernel = s.value("kernel", c.kernel);
        c.scale_bandwidth = s.value("scale_bandwidth", c.scale_bandwidth);
        c.bandwidth_reference_n = json_count<std::size_t>(
            s.value("bandwidth_reference_n", Json(c.bandwidth_reference_n)), "intensity.bandwidth_reference_n");
    }
    if (j.contains("outcome")) {
        const Json& s = j.at("outcome");
        check_keys(s, {"score_ceiling", "round_outcomes", "support_max"}, "outcome");
        if (s.contains("score_ceiling"))
            c.score_ceiling = s.at("score_ceiling").is_null()
                                  ? std::nullopt
                                  : std::optional<int>(json_count<int>(s.at("score_ceiling"), "score_ceiling"));
        c.round_outcomes = s.value("round_outcomes", c.round_outcomes);
        c.support_max = json_count<int>(s.value("support_max", Json(c.support_max)), "outcome.support_max");
    }
    if (j.contains("bounds")) {
        const Json& b = j.at("bounds");
        auto one = [](const Json& x, ArmBounds& out) {
            check_keys(x, {"mu_min", "mu_max"}, "bounds");
            out.mu_min = json_number(x.value("mu_min", Json(out.mu_min)), "mu_min");
            out.mu_max = json_number(x.value("mu_max", Json(out.mu_max)), "mu_max");
        };
        if (b.contains("control") || b.contains("intervention")) {
            check_keys(b, {"control", "intervention"}, "bounds");
            if (b.contains("control")) one(b.at("control"), c.bounds_control);
            if (b.contains("intervention")) one(b.at("intervention"), c.bounds_intervention);
        } else {
            one(b, c.bounds_control);
            c.bounds_intervention = c.bounds_control;
        }
    }
    if (j.contains("bootstrap")) {
        const Json& s = j.at("bootstrap");
        check_keys(s, {"resamples"}, "bootstrap");
        c.resamples = json_count<std::size_t>(s.value("resamples", Json(c.resamples)), "bootstrap.resamples");
    }
    if (j.contains("seed")) c.seed = json_count<std::uint64_t>(j.at("seed"), "seed");
    c.positivity_floor = json_number(j.value("positivity_floor", Json(c.positivity_floor)), "positivity_floor");
    if (j.contains("workers") && !j.at("workers").is_null())
        c.workers = json_count<unsigned>(j.at("workers"), "workers");
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("simulation")) {
        const Json& s = j.at("simulation");
        check_keys(s, {"dgm", "alphas", "n_per_rep", "reps", "resamples", "truth_n", "failure_budget"},
                   "simulation");
        SimulationConfig& sc = c.simulation;
        sc.dgm = s.contains("dgm") ? parse_dgm(s.at("dgm")) : reference_dgm();
        if (s.contains("alphas")) sc.alphas = json_numbers(s.at("alphas"), "simulation.alphas");
        sc.n_per_rep = json_count<std::size_t>(s.value("n_per_rep", Json(sc.n_per_rep)), "n_per_rep");
        sc.reps = json_count<std::size_t>(s.value("reps", Json(sc.reps)), "reps");
        sc.resamples = json_count<std::size_t>(s.value("resamples", Json(sc.resamples)), "resamples");
        sc.truth_n = json_count<std::size_t>(s.value("truth_n", Json(sc.truth_n)), "truth_n");
        sc.failure_budget = json_number(s.value("failure_budget", Json(sc.failure_budget)), "failure_budget");
    } else {
        c.simulation.dgm = reference_dgm();
    }
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    Json j;
    try {
        j = Json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config file '" + path + "': " + e.what());
    }
    return parse_config(j);
}

/// Fully resolved configuration; the worker count and output directory are
/// left out so they cannot change the hash.
inline Json resolved_config(const RunConfig& c) {
    Json j;
    j["spline"] = {{"a", c.spline_a}, {"b", c.spline_b}, {"interior_knots", c.interior_knots},
                   {"grid_step", c.grid_step}};
    j["alpha_grid"] = {{"control", c.alpha_control}, {"intervention", c.alpha_intervention}};
    j["targets"] = c.targets;
    j["intensity"] = {{"J", c.J},
                      {"tau", c.tau},
                      {"bandwidth", c.bandwidth},
                      {"kernel", c.kernel},
                      {"scale_bandwidth", c.scale_bandwidth},
                      {"bandwidth_reference_n", c.bandwidth_reference_n}};
    j["outcome"] = {{"score_ceiling", c.score_ceiling ? Json(*c.score_ceiling) : Json(nullptr)},
                    {"round_outcomes", c.round_outcomes},
                    {"support_max", c.support_max}};
    auto bounds = [](const ArmBounds& b) {
        auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(v > 0 ? "inf" : "-inf"); };
        return Json{{"mu_min", num(b.mu_min)}, {"mu_max", num(b.mu_max)}};
    };
    j["bounds"] = {{"control", bounds(c.bounds_control)}, {"intervention", bounds(c.bounds_intervention)}};
    j["bootstrap"] = {{"resamples", c.resamples}};
    j["seed"] = c.seed;
    j["positivity_floor"] = c.positivity_floor;
    j["simulation"] = {{"dgm", dgm_to_json(c.simulation.dgm)},
                       {"alphas", c.simulation.alphas},
                       {"n_per_rep", c.simulation.n_per_rep},
                       {"reps", c.simulation.reps},
                       {"resamples", c.simulation.resamples},
                       {"truth_n", c.simulation.truth_n},
                       {"failure_budget", c.simulation.failure_budget}};
    return j;
}

/// FNV-1a 64 of the compact resolved configuration, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
    const std::string s = resolved_config(c).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace aiiw
