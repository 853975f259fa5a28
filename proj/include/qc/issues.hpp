#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace qc {

enum class Origin { kTeacher, kStudent };

std::string_view to_string(Origin o);
Origin origin_from_string(std::string_view s);

/// One flagged violation. `rule_id` is the model's "issue" key and
/// `context_snippet` its "context" key.
struct Issue {
    std::string issue_id;
    std::string rule_id;
    std::string context_snippet;
    std::string recommendation;
    Origin origin = Origin::kTeacher;
    int pass_index = 1;
    bool unanchored = false;    // snippet not found in the analyzed content
    bool out_of_scope = false;  // rule_id not among the filtered rules

    bool operator==(const Issue&) const = default;
};

/// A verifier's judgement on one (possibly consolidated) issue.
struct Verdict {
    Issue issue;
    bool is_valid = false;
    std::string justification;

    bool operator==(const Verdict&) const = default;
};

void to_json(nlohmann::json& j, const Issue& i);
void from_json(const nlohmann::json& j, Issue& i);
void to_json(nlohmann::json& j, const Verdict& v);
void from_json(const nlohmann::json& j, Verdict& v);

} // namespace qc
