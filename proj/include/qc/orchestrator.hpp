#pragma once

#include "qc/context.hpp"
#include "qc/hitl.hpp"
#include "qc/issues.hpp"
#include "qc/modelclient.hpp"
#include "qc/rulebase.hpp"
#include "qc/text.hpp"
#include "qc/waterfall.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace qc {

/// True when `snippet` occurs in `content` after whitespace normalization.
/// An empty snippet never anchors.
bool is_anchored(std::string_view snippet, std::string_view content);

/// Turns an issues-report object into Issues. Ids are `<id_prefix><n>` from 1.
std::vector<Issue> parse_issues(const nlohmann::json& report, Origin origin, int pass_index,
                                std::string_view id_prefix);

struct DetectOptions {
    int pass_index = 1;
    std::string id_prefix;  // defaults to "T<pass>-" / "S<pass>-"
    std::optional<std::string> request_id;
    std::optional<Origin> origin;  // overrides spec.role_hint
};

/// One detection pass: system prompt = rendered rules, user content = text.
/// Origin follows spec.role_hint (student -> student, otherwise teacher).
std::vector<Issue> detect_issues(ModelClient& client, const ModelSpec& spec, std::string_view prompt,
                                 std::string_view content, const DetectOptions& options = {});

struct ConsensusReport {
    std::vector<Issue> agreed;        // teacher copies
    std::vector<Issue> teacher_only;
    std::vector<Issue> student_only;
    struct Consolidation {
        Issue merged;
        std::vector<std::string> absorbed_issue_ids;

        bool operator==(const Consolidation&) const = default;
    };
    std::vector<Consolidation> consolidated;
    std::vector<Issue> unresolved;
    /// (teacher issue id, student issue id) for each agreed pair.
    std::vector<std::pair<std::string, std::string>> matched_pairs;

    bool operator==(const ConsensusReport&) const = default;
};

void to_json(nlohmann::json& j, const ConsensusReport& r);

/// Same rule_id and snippet token-set Jaccard >= threshold.
bool issues_match(const Issue& a, const Issue& b, double jaccard_threshold = 0.5);

/// Pairs teacher and student issues one-to-one, best Jaccard first (ties go
/// to the earlier teacher issue, then the earlier student issue).
ConsensusReport diff_issues(std::span<const Issue> teacher, std::span<const Issue> student,
                            double jaccard_threshold = 0.5);

/// The output contract appended to every verification prompt.
extern const std::string_view kVerificationOutputFormat;

/// Throws SchemaError when `conflicts` is empty.
std::string build_verification_prompt(std::span<const Issue> conflicts, std::string_view content,
                                      std::string_view rules_prompt);

struct VerifyOptions {
    int pass_index = 2;
    std::string id_prefix = "V";
    std::optional<std::string> request_id;
};

/// Sends a verification prompt and parses the verdicts. Each verdict's issue
/// takes its rule_id and context from the reply; the reply's recommendation
/// is the justification.
std::vector<Verdict> verify_issues(ModelClient& client, const ModelSpec& teacher_spec, std::string_view prompt,
                                   const VerifyOptions& options = {});

/// How a batch of verdicts lines up with the conflicts it was asked about.
struct Reconciliation {
    struct Outcome {
        Issue issue;  // the conflict itself, or a merged issue when consolidated
        Verdict verdict;
        std::vector<std::string> absorbed_issue_ids;  // non-empty when consolidated
    };
    std::vector<Outcome> valid;
    std::vector<Outcome> rejected;
    std::vector<Issue> unmatched_conflicts;   // no verdict points at them
    std::vector<Verdict> new_verdicts;        // point at no conflict
};

/// Maps every conflict to at most one verdict. A verdict covers a conflict
/// when their snippets have Jaccard >= threshold or one contains the other;
/// a verdict on the same rule_id is preferred. A verdict covering several
/// conflicts, or one conflict under a different rule id, consolidates them
/// under the verdict's issue (id, rule id and snippet all come from the verdict).
Reconciliation reconcile_verdicts(std::span<const Issue> conflicts, std::span<const Verdict> verdicts,
                                  double jaccard_threshold = 0.5);

// ── run_qc ───────────────────────────────────────────────────────────────────

struct OrchestratorConfig {
    RoutingPolicy policy;  // teacher + lightweight (student)
    int max_rounds = 2;
    double jaccard_threshold = 0.5;
    std::string template_id{kDefaultTemplateId};
};

void to_json(nlohmann::json& j, const OrchestratorConfig& c);
void from_json(const nlohmann::json& j, OrchestratorConfig& c);

enum class Resolution { kAgreed, kVerified, kCrossChecked, kAlwaysValid };

std::string_view to_string(Resolution r);

struct FinalIssue {
    Issue issue;
    Resolution resolution = Resolution::kAgreed;
    std::optional<Verdict> verdict;  // absent for agreed / always-valid issues
    std::vector<std::string> absorbed_issue_ids;
};

/// Final state of one produced issue: "agreed", "matched" (the student copy
/// of an agreed pair), "verified", "cross_checked", "always_valid",
/// "absorbed", "rejected" or "unresolved". `ref` names the issue or review
/// item it was folded into.
struct Disposition {
    std::string state;
    std::string ref;
    std::string reason;
};

struct AuditEvent {
    int seq = 0;
    std::string kind;  // filter, model_call, diff, verification, absorption, cross_check, unanchored, enqueue, ...
    text::TimePoint at{};
    nlohmann::json detail;
};

struct QCReport {
    std::string content_id;
    ContentContext context;
    std::uint64_t rulebase_version = 0;
    std::vector<std::string> filtered_rule_ids;
    std::vector<FinalIssue> final_issues;
    std::vector<Issue> unresolved_for_review;
    std::vector<Verdict> rejected;
    ConsensusReport consensus;
    std::map<std::string, Disposition> dispositions;  // issue id -> final state
    std::vector<AuditEvent> audit;
    std::vector<std::string> usage_request_ids;  // UsageRecord references, in call order
    std::vector<std::string> review_item_ids;
    int model_calls = 0;  // including retries
    int retries = 0;
    bool degraded = false;  // a detection head failed
};

/// `include_timestamps = false` drops every wall-clock field so two runs can
/// be compared byte for byte.
nlohmann::json to_json(const QCReport& report, bool include_timestamps = true);

struct QcDeps {
    ModelClient& client;
    const TemplateStore& templates;
    ReviewQueue* queue = nullptr;             // unresolved items are enqueued when set
    std::function<text::TimePoint()> clock;  // audit timestamps
};

/// Runs the full detect / diff / verify / cross-check pipeline. Model
/// failures never escape: they degrade into unresolved items. Throws only
/// for caller errors (empty content, unroutable policy, unknown template).
QCReport run_qc(std::string_view content, const ContentContext& ctx, const RuleBase& base,
                const OrchestratorConfig& config, const QcDeps& deps,
                std::optional<std::string> content_id = std::nullopt);

} // namespace qc
