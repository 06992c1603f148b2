#pragma once

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "aiiw/error.hpp"
#include "aiiw/records.hpp"

namespace aiiw {

// Long-format CSV: header `subject_id,arm,time_days,outcome`, one row per
// assessment, time_days = 0 marks the baseline row.

inline constexpr std::string_view kDatasetHeader = "subject_id,arm,time_days,outcome";

struct ArmData {
    std::vector<SubjectRecord> control;
    std::vector<SubjectRecord> intervention;

    std::vector<SubjectRecord>& operator[](Arm a) { return a == Arm::control ? control : intervention; }
    const std::vector<SubjectRecord>& operator[](Arm a) const { return a == Arm::control ? control : intervention; }
    friend bool operator==(const ArmData&, const ArmData&) = default;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = line.find(',', start);
        out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline double parse_real(std::string_view field, std::size_t line, const char* name) {
    const std::string s(field);
    if (s.empty()) throw ParseError(line, std::string("empty ") + name);
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v))
        throw ParseError(line, std::string("non-numeric ") + name + " '" + s + "'");
    return v;
}

}  // namespace detail

inline ArmData ingest(std::istream& in) {
    using namespace detail;
    struct Pending {
        SubjectRecord rec;
        bool has_baseline = false;
        std::size_t first_line = 0;
        double last_time = -1.0;
    };
    std::vector<Pending> subjects;
    std::map<std::string, std::size_t, std::less<>> index;

    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view body = trim(line);
        if (body.empty() || body.front() == '#') continue;
        if (!header_seen) {
            std::string norm;
            for (auto f : split_csv(body)) norm += (norm.empty() ? "" : ",") + std::string(f);
            if (norm != kDatasetHeader)
                throw ParseError(lineno, "expected header '" + std::string(kDatasetHeader) + "'");
            header_seen = true;
            continue;
        }
        const auto f = split_csv(body);
        if (f.size() != 4) throw ParseError(lineno, "expected 4 fields, found " + std::to_string(f.size()));
        if (f[0].empty()) throw ParseError(lineno, "empty subject_id");
        Arm arm;
        if (f[1] == "control")
            arm = Arm::control;
        else if (f[1] == "intervention")
            arm = Arm::intervention;
        else
            throw ParseError(lineno, "unknown arm label '" + std::string(f[1]) + "'");
        const double t = parse_real(f[2], lineno, "time_days");
        const double y = parse_real(f[3], lineno, "outcome");
        if (t < 0.0) throw ParseError(lineno, "negative time_days");
        if (y < 0.0) throw ParseError(lineno, "negative outcome");

        auto it = index.find(f[0]);
        if (it == index.end()) {
            it = index.emplace(std::string(f[0]), subjects.size()).first;
            Pending p;
            p.rec.id = std::string(f[0]);
            p.rec.arm = arm;
            p.first_line = lineno;
            subjects.push_back(std::move(p));
        }
        Pending& p = subjects[it->second];
        if (p.rec.arm != arm)
            throw ParseError(lineno, "subject '" + p.rec.id + "' appears in both arms");
        if (t == p.last_time || (t == 0.0 && p.has_baseline))
            throw ParseError(lineno, "duplicate row for subject '" + p.rec.id + "' at time " + std::string(f[2]));
        if (t < p.last_time)
            throw ParseError(lineno, "non-monotone times for subject '" + p.rec.id + "'");
        if (t == 0.0) {
            p.has_baseline = true;
            p.rec.baseline_outcome = y;
        } else {
            if (!p.has_baseline)
                throw ParseError(lineno, "missing baseline row (time_days = 0) before first assessment of subject '" +
                                             p.rec.id + "'");
            p.rec.assessments.push_back({t, y});
        }
        p.last_time = t;
    }
    if (!header_seen) throw ParseError(lineno, "missing header");

    ArmData out;
    for (auto& p : subjects) {
        if (!p.has_baseline)
            throw ParseError(p.first_line, "missing baseline row (time_days = 0) for subject '" + p.rec.id + "'");
        out[p.rec.arm].push_back(std::move(p.rec));
    }
    return out;
}

inline ArmData ingest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError(0, "cannot open data file '" + path + "'");
    return ingest(in);
}

/// Writes records in the ingest format with round-trip precision.
inline void export_csv(std::ostream& out, const ArmData& data) {
    out << kDatasetHeader << '\n';
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (Arm arm : {Arm::control, Arm::intervention})
        for (const auto& s : data[arm]) {
            out << s.id << ',' << arm_name(arm) << ",0," << num(s.baseline_outcome) << '\n';
            for (const auto& a : s.assessments)
                out << s.id << ',' << arm_name(arm) << ',' << num(a.time) << ',' << num(a.outcome) << '\n';
        }
}

}  // namespace aiiw
