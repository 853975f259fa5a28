#pragma once

#include "qc/context.hpp"
#include "qc/rulebase.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace qc {

/// What happened to the candidate set at one waterfall level.
struct RuleBlockTrace {
    TaxonomyLevel level = TaxonomyLevel::kIp;
    nlohmann::json query_value;  // null when the context leaves the level open
    std::size_t rules_in = 0;
    std::size_t rules_out = 0;
    std::vector<std::string> excluded_rule_ids;

    bool operator==(const RuleBlockTrace&) const = default;
};

struct FilteredRuleSet {
    std::vector<Rule> rules;             // ordered by (module, rule_id)
    std::vector<RuleBlockTrace> trace;   // one entry per level, in level order
    ContentContext context;
    std::uint64_t rulebase_version = 0;
    /// Rules dropped before the first level (suppressed globally or for this context).
    std::vector<std::string> suppressed_rule_ids;

    std::vector<std::string> rule_ids() const;
};

nlohmann::json to_json(const FilteredRuleSet& fset);
void to_json(nlohmann::json& j, const RuleBlockTrace& t);

/// Orders rules by LRBTC module (L, R, B, T, C) and then by rule id, where
/// dot-separated numeric segments compare numerically ("1.2" < "1.10").
bool rule_order_less(const Rule& a, const Rule& b);

/// Narrows the active rules level by level (ip, country, use case, topic,
/// subtask). A rule survives a level when its tags there are empty, when the
/// context leaves the level open, or when the tags contain the context
/// value (case-insensitive; for subtasks, when the sets intersect).
FilteredRuleSet filter_rules(const RuleBase& base, const ContentContext& ctx);

// ── Prompt templates ─────────────────────────────────────────────────────────

/// A system-prompt layout. `body` holds the placeholders {{role}},
/// {{do_rules}}, {{prohibit_rules}}, {{analysis_requirements}} and
/// {{output_format}}; the last is mandatory.
struct PromptTemplate {
    std::string id;
    std::string role;
    std::string body;
};

/// The JSON output contract appended to every detection prompt.
extern const std::string_view kIssuesOutputFormat;
extern const std::string_view kAnalysisRequirements;
inline constexpr std::string_view kDefaultTemplateId = "foundation-qc";

class TemplateStore {
public:
    /// Store holding only the built-in "foundation-qc" template.
    TemplateStore();

    /// Built-ins plus every `<id>.txt` in `dir` (an optional `<id>.role.txt`
    /// supplies the role paragraph). Directory templates shadow built-ins.
    static TemplateStore from_directory(const std::string& dir);

    void add(PromptTemplate t);
    const PromptTemplate& get(std::string_view id) const;  // UnknownTemplateError
    std::vector<std::string> ids() const;

private:
    std::map<std::string, PromptTemplate, std::less<>> templates_;
};

std::string render_system_prompt(const FilteredRuleSet& fset, std::string_view template_id,
                                 const TemplateStore& templates = TemplateStore());

} // namespace qc
