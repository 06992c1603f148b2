#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "aiiw/error.hpp"

namespace aiiw {

enum class Arm { control, intervention };

inline std::string_view arm_name(Arm arm) {
    return arm == Arm::control ? "control" : "intervention";
}

inline Arm parse_arm(std::string_view s) {
    if (s == "control") return Arm::control;
    if (s == "intervention") return Arm::intervention;
    throw ArgumentError("unknown arm label '" + std::string(s) + "'");
}

struct Assessment {
    double time = 0.0;     // days since randomization, in (0, tau]
    double outcome = 0.0;  // nonnegative score

    friend bool operator==(const Assessment&, const Assessment&) = default;
};

/// One participant: baseline outcome plus post-baseline assessments in
/// strictly increasing time order.
struct SubjectRecord {
    std::string id;
    Arm arm = Arm::control;
    double baseline_outcome = 0.0;
    std::vector<Assessment> assessments;

    friend bool operator==(const SubjectRecord&, const SubjectRecord&) = default;
};

inline void validate(const SubjectRecord& s, double tau) {
    auto fail = [&](const std::string& why) { throw DataError("subject '" + s.id + "': " + why); };
    if (!std::isfinite(s.baseline_outcome) || s.baseline_outcome < 0.0)
        fail("baseline outcome must be finite and >= 0");
    double prev = 0.0;
    for (const auto& a : s.assessments) {
        if (!(a.time > prev)) fail("assessment times must be strictly increasing and > 0");
        if (a.time > tau) fail("assessment time after tau");
        if (!std::isfinite(a.outcome) || a.outcome < 0.0) fail("outcomes must be finite and >= 0");
        prev = a.time;
    }
}

/// Summary of the observed past strictly before a query time t.
struct ObservedPastFeatures {
    int stratum_k = 0;          // number of assessments before t
    double prev_time = 0.0;     // 0 when only the baseline has been seen
    double prev_outcome = 0.0;  // baseline outcome when no assessment yet
};

inline ObservedPastFeatures observed_past(const SubjectRecord& s, double t) {
    ObservedPastFeatures f{0, 0.0, s.baseline_outcome};
    for (const auto& a : s.assessments) {
        if (!(a.time < t)) break;
        ++f.stratum_k;
        f.prev_time = a.time;
        f.prev_outcome = a.outcome;
    }
    return f;
}

/// Features in force just before the k-th (0-based) assessment.
inline ObservedPastFeatures past_before_assessment(const SubjectRecord& s, std::size_t k) {
    if (k == 0) return {0, 0.0, s.baseline_outcome};
    return {static_cast<int>(k), s.assessments[k - 1].time, s.assessments[k - 1].outcome};
}

inline std::size_t total_assessments(const std::vector<SubjectRecord>& data) {
    std::size_t n = 0;
    for (const auto& s : data) n += s.assessments.size();
    return n;
}

}  // namespace aiiw
