#include "qc/waterfall.hpp"

#include "qc/errors.hpp"
#include "qc/text.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <sstream>

namespace qc {

using nlohmann::json;

const std::string_view kAnalysisRequirements =
    "1. Examine the text against every relevant rule listed above.\n"
    "2. Identify each passage that may not comply with a rule.\n"
    "3. Cite the specific rule ID for every compliance issue you report.\n"
    "4. Consider both the explicit requirements and the implicit intent of the rules.";

const std::string_view kIssuesOutputFormat =
    "Respond with a JSON object. The object must have a single key \"issues\" whose value is an "
    "array of objects. Each violation object must contain:\n"
    "1. \"issue\": the rule ID of the violated rule (required).\n"
    "2. \"context\": the exact text snippet from the user's content where the violation occurs.\n"
    "3. \"recommendation\": a clear suggestion on how to fix the violation.\n"
    "If no issues are found, return \"issues\": [] (that is, {\"issues\": []}).";

namespace {

constexpr std::string_view kFoundationRole =
    "You are an expert in corporate communications and regulatory compliance. Review the user's "
    "text against the quality-control rules below and report every violation you find.";

constexpr std::string_view kFoundationBody =
    "{{role}}\n"
    "\n"
    "## Rules: what to do\n"
    "{{do_rules}}\n"
    "\n"
    "## Rules: what to prohibit\n"
    "{{prohibit_rules}}\n"
    "\n"
    "## Analysis requirements\n"
    "{{analysis_requirements}}\n"
    "\n"
    "## Output format\n"
    "{{output_format}}\n";

// Splits "a.12.D.3" into segments; numeric segments compare as numbers and
// sort before alphabetic ones.
int compare_rule_ids(std::string_view a, std::string_view b) {
    auto next = [](std::string_view& s) {
        auto pos = s.find('.');
        std::string_view seg = s.substr(0, pos);
        s = pos == std::string_view::npos ? std::string_view{} : s.substr(pos + 1);
        return seg;
    };
    auto numeric = [](std::string_view seg, unsigned long long& out) {
        if (seg.empty()) return false;
        auto [p, ec] = std::from_chars(seg.data(), seg.data() + seg.size(), out);
        return ec == std::errc{} && p == seg.data() + seg.size();
    };
    while (!a.empty() || !b.empty()) {
        if (a.empty()) return -1;
        if (b.empty()) return 1;
        auto sa = next(a);
        auto sb = next(b);
        unsigned long long na = 0, nb = 0;
        const bool da = numeric(sa, na);
        const bool db = numeric(sb, nb);
        if (da && db) {
            if (na != nb) return na < nb ? -1 : 1;
            if (sa != sb) return sa < sb ? -1 : 1;  // "01" vs "1"
        } else if (da != db) {
            return da ? -1 : 1;
        } else if (sa != sb) {
            return sa < sb ? -1 : 1;
        }
    }
    return 0;
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
}

std::string render_rule_list(const std::vector<Rule>& rules, Polarity pol) {
    std::ostringstream out;
    bool any = false;
    for (const auto& r : rules) {
        if (r.polarity != pol) continue;
        if (any) out << '\n';
        out << "- " << r.rule_id << ' ' << r.text;
        any = true;
    }
    if (!any) out << "(none)";
    return out.str();
}

} // namespace

bool rule_order_less(const Rule& a, const Rule& b) {
    if (a.module != b.module) return static_cast<int>(a.module) < static_cast<int>(b.module);
    return compare_rule_ids(a.rule_id, b.rule_id) < 0;
}

std::vector<std::string> FilteredRuleSet::rule_ids() const {
    std::vector<std::string> ids;
    ids.reserve(rules.size());
    for (const auto& r : rules) ids.push_back(r.rule_id);
    return ids;
}

void to_json(json& j, const RuleBlockTrace& t) {
    j = {{"level", to_string(t.level)},
         {"query_value", t.query_value},
         {"rules_in", t.rules_in},
         {"rules_out", t.rules_out},
         {"excluded_rule_ids", t.excluded_rule_ids}};
}

json to_json(const FilteredRuleSet& fset) {
    return {{"rules", fset.rules},
            {"trace", fset.trace},
            {"context", fset.context},
            {"rulebase_version", fset.rulebase_version},
            {"suppressed_rule_ids", fset.suppressed_rule_ids}};
}

FilteredRuleSet filter_rules(const RuleBase& base, const ContentContext& ctx) {
    FilteredRuleSet out;
    out.context = ctx;
    out.rulebase_version = base.version();

    std::set<std::string> current;
    for (const Rule* r : base.all()) {
        if (r->status == RuleStatus::kSuppressed || r->suppressed_for(ctx)) {
            out.suppressed_rule_ids.push_back(r->rule_id);
        } else {
            current.insert(r->rule_id);
        }
    }

    auto single = [](const std::optional<std::string>& v) -> std::optional<std::vector<std::string>> {
        if (!v) return std::nullopt;
        return std::vector<std::string>{*v};
    };

    for (auto level : kTaxonomyLevels) {
        std::optional<std::vector<std::string>> query;
        switch (level) {
        case TaxonomyLevel::kIp: query = single(ctx.ip); break;
        case TaxonomyLevel::kCountry: query = single(ctx.country); break;
        case TaxonomyLevel::kUseCase: query = single(ctx.use_case); break;
        case TaxonomyLevel::kTopic: query = single(ctx.topic); break;
        case TaxonomyLevel::kSubtask:
            if (ctx.subtasks && !ctx.subtasks->empty()) {
                query = std::vector<std::string>(ctx.subtasks->begin(), ctx.subtasks->end());
            }
            break;
        }

        RuleBlockTrace t;
        t.level = level;
        t.rules_in = current.size();
        if (query) {
            t.query_value = level == TaxonomyLevel::kSubtask ? json(*query) : json(query->front());
            std::set<std::string> allowed;
            for (const auto& v : *query) {
                auto ids = base.ids_matching(level, v);
                allowed.insert(ids.begin(), ids.end());
            }
            std::set<std::string> next;
            for (const auto& id : current) {
                if (allowed.count(id) != 0) {
                    next.insert(id);
                } else {
                    t.excluded_rule_ids.push_back(id);
                }
            }
            current = std::move(next);
        }
        t.rules_out = current.size();
        out.trace.push_back(std::move(t));
    }

    out.rules.reserve(current.size());
    for (const auto& id : current) out.rules.push_back(*base.find(id));
    std::sort(out.rules.begin(), out.rules.end(), rule_order_less);
    return out;
}

// ── Templates ────────────────────────────────────────────────────────────────

TemplateStore::TemplateStore() {
    add({std::string(kDefaultTemplateId), std::string(kFoundationRole), std::string(kFoundationBody)});
}

void TemplateStore::add(PromptTemplate t) {
    if (t.body.find("{{output_format}}") == std::string::npos) {
        throw TemplateError("template '" + t.id + "' lacks the {{output_format}} placeholder");
    }
    auto id = t.id;
    templates_.insert_or_assign(std::move(id), std::move(t));
}

const PromptTemplate& TemplateStore::get(std::string_view id) const {
    auto it = templates_.find(id);
    if (it == templates_.end()) throw UnknownTemplateError("unknown prompt template: " + std::string(id));
    return it->second;
}

std::vector<std::string> TemplateStore::ids() const {
    std::vector<std::string> out;
    for (const auto& [id, t] : templates_) out.push_back(id);
    return out;
}

TemplateStore TemplateStore::from_directory(const std::string& dir) {
    namespace fs = std::filesystem;
    TemplateStore store;
    if (!fs::is_directory(dir)) throw TemplateError("template directory not found: " + dir);
    for (const auto& entry : fs::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (!entry.is_regular_file() || !name.ends_with(".txt") || name.ends_with(".role.txt")) continue;
        PromptTemplate t;
        t.id = name.substr(0, name.size() - 4);
        t.body = read_file(entry.path().string());
        const auto role_path = (fs::path(dir) / (t.id + ".role.txt")).string();
        t.role = fs::exists(role_path) ? text::trim(read_file(role_path)) : std::string(kFoundationRole);
        store.add(std::move(t));
    }
    return store;
}

std::string render_system_prompt(const FilteredRuleSet& fset, std::string_view template_id,
                                 const TemplateStore& templates) {
    const PromptTemplate& t = templates.get(template_id);
    std::string out = t.body;
    // rules go in last so rule text containing "{{...}}" is never expanded
    replace_all(out, "{{role}}", t.role);
    replace_all(out, "{{analysis_requirements}}", kAnalysisRequirements);
    replace_all(out, "{{output_format}}", kIssuesOutputFormat);
    const auto marker_do = std::string("\x1e" "DO\x1e");
    const auto marker_pr = std::string("\x1e" "PR\x1e");
    replace_all(out, "{{do_rules}}", marker_do);
    replace_all(out, "{{prohibit_rules}}", marker_pr);
    replace_all(out, marker_do, render_rule_list(fset.rules, Polarity::kDo));
    replace_all(out, marker_pr, render_rule_list(fset.rules, Polarity::kProhibit));
    return out;
}

} // namespace qc
