#pragma once

#include <set>
#include <string>
#include <vector>

#include "qc/orchestrator.hpp"

namespace testing_support {

/// Checks the diff partition and that every produced issue has exactly one
/// final state. Returns human-readable failures (empty when all hold).
inline std::vector<std::string> report_invariant_failures(const qc::QCReport& r) {
    std::vector<std::string> out;
    std::size_t detected = 0, unanchored = 0;
    std::vector<std::string> produced_prefixes;
    for (const auto& e : r.audit) {
        if (e.kind == "model_call" && e.detail.value("outcome", "") == "ok") {
            const std::string label = e.detail.value("label", "");
            const std::size_t n = e.detail.value("issues", std::size_t{0});
            if (label == "teacher-detect" || label == "student-detect") detected += n;
        }
        if (e.kind == "unanchored") ++unanchored;
    }
    const auto& c = r.consensus;
    const std::size_t diffed = detected - unanchored;
    if (c.agreed.size() + c.teacher_only.size() + c.student_only.size() + c.matched_pairs.size() != diffed) {
        out.push_back("partition: agreed + teacher_only + student_only + matched != anchored detections");
    }
    if (c.agreed.size() != c.matched_pairs.size()) out.push_back("partition: agreed != matched pairs");

    static const std::set<std::string> states = {"agreed",   "matched",  "verified", "cross_checked", "always_valid",
                                                 "absorbed", "rejected", "unresolved"};
    for (const auto& [id, d] : r.dispositions) {
        if (!states.contains(d.state)) out.push_back("unknown state " + d.state + " for " + id);
    }
    // Every detection issue id T1-k / S1-k must have a disposition.
    auto count_issues = [&](const std::string& label) {
        for (const auto& e : r.audit) {
            if (e.kind == "model_call" && e.detail.value("label", "") == label && e.detail.value("outcome", "") == "ok") {
                return e.detail.value("issues", std::size_t{0});
            }
        }
        return std::size_t{0};
    };
    auto require = [&](const std::string& prefix, std::size_t n) {
        for (std::size_t k = 1; k <= n; ++k) {
            const std::string id = prefix + std::to_string(k);
            if (!r.dispositions.contains(id)) out.push_back("silent drop: " + id);
        }
    };
    require("T1-", count_issues("teacher-detect"));
    require("S1-", count_issues("student-detect"));
    for (int round = 1; round <= 16; ++round) {
        require("V" + std::to_string(round) + "-", count_issues("verify-" + std::to_string(round)));
        require("X" + std::to_string(round) + "-", count_issues("cross-check-" + std::to_string(round)));
    }

    std::set<std::string> finals, unresolved, rejected;
    for (const auto& f : r.final_issues) finals.insert(f.issue.issue_id);
    for (const auto& u : r.unresolved_for_review) unresolved.insert(u.issue_id);
    for (const auto& v : r.rejected) rejected.insert(v.issue.issue_id);
    for (const auto& [id, d] : r.dispositions) {
        const bool final_state = d.state == "agreed" || d.state == "verified" || d.state == "cross_checked" ||
                                 d.state == "always_valid";
        if (final_state != finals.contains(id)) out.push_back("final_issues disagrees with state of " + id);
        if ((d.state == "unresolved") != unresolved.contains(id)) out.push_back("unresolved list disagrees for " + id);
        if ((d.state == "rejected") != rejected.contains(id)) out.push_back("rejected list disagrees for " + id);
        if ((d.state == "matched" || d.state == "absorbed") && d.ref.empty()) out.push_back(id + " folded without ref");
    }
    for (const auto& f : r.final_issues) {
        bool known = false;
        for (const auto& id : r.filtered_rule_ids) known = known || id == f.issue.rule_id;
        if (!known && !f.issue.out_of_scope) out.push_back("final issue outside filtered rules: " + f.issue.issue_id);
    }
    return out;
}

inline int count_audit(const qc::QCReport& r, const std::string& kind) {
    int n = 0;
    for (const auto& e : r.audit) n += e.kind == kind;
    return n;
}

} // namespace testing_support
