#pragma once

#include "qc/context.hpp"
#include "qc/issues.hpp"
#include "qc/rulebase.hpp"
#include "qc/text.hpp"

#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace qc {

enum class ReviewStatus { kPending, kAccepted, kRejected };
enum class DecisionVerdict { kAcceptViolation, kRejectFlag };
enum class FeedbackAction { kSuppressInContext, kMarkAlwaysValid, kAmendRecommendation };

std::string_view to_string(ReviewStatus s);
std::string_view to_string(DecisionVerdict v);
std::string_view to_string(FeedbackAction a);
ReviewStatus review_status_from_string(std::string_view s);
DecisionVerdict decision_verdict_from_string(std::string_view s);
FeedbackAction feedback_action_from_string(std::string_view s);

struct KnowledgeUpdate {
    std::string rule_id;
    FeedbackAction action = FeedbackAction::kSuppressInContext;
    ContentContext context;              // scope for suppress_in_context
    std::string amended_recommendation;  // text for amend_recommendation
    std::string scope_note;

    bool operator==(const KnowledgeUpdate&) const = default;
};

struct HumanDecision {
    DecisionVerdict verdict = DecisionVerdict::kAcceptViolation;
    std::string justification;
    std::string reviewer_id;
    std::optional<KnowledgeUpdate> knowledge_update;

    bool operator==(const HumanDecision&) const = default;
};

struct ReviewItem {
    std::string item_id;  // assigned by enqueue
    std::string content_id;
    Issue issue;
    std::optional<Verdict> teacher_position;
    std::optional<Issue> student_position;
    ReviewStatus status = ReviewStatus::kPending;
    std::optional<HumanDecision> decision;
    text::TimePoint created_at{};
    std::optional<text::TimePoint> decided_at;
    bool unanchored = false;
    std::string reason;  // why the pipeline could not settle it

    bool operator==(const ReviewItem&) const = default;
};

void to_json(nlohmann::json& j, const KnowledgeUpdate& u);
void from_json(const nlohmann::json& j, KnowledgeUpdate& u);
void to_json(nlohmann::json& j, const HumanDecision& d);
void from_json(const nlohmann::json& j, HumanDecision& d);
void to_json(nlohmann::json& j, const ReviewItem& r);
void from_json(const nlohmann::json& j, ReviewItem& r);

/// Applies one closed-form feedback action and bumps the version.
///  - suppress_in_context: records a context-scoped suppression consulted by
///    filter_rules; a fully open context suppresses the rule everywhere.
///  - mark_always_valid: the orchestrator accepts this rule's conflicts
///    without verification.
///  - amend_recommendation: future issues on the rule carry the text.
/// Throws UnknownRule.
RuleBase apply_feedback(const RuleBase& base, const KnowledgeUpdate& update);

// ── Event log ────────────────────────────────────────────────────────────────

inline constexpr int kReviewEventSchemaVersion = 1;

/// One line of the review event log. kind is "enqueue", "decide" or "apply".
struct ReviewEvent {
    std::uint64_t seq = 0;
    std::string kind;
    text::TimePoint at{};
    nlohmann::json payload;

    bool operator==(const ReviewEvent&) const = default;
};

void to_json(nlohmann::json& j, const ReviewEvent& e);
void from_json(const nlohmann::json& j, ReviewEvent& e);

/// Queue contents in creation order: a pure fold over the events.
struct QueueState {
    std::vector<ReviewItem> items;
    std::uint64_t last_seq = 0;

    bool operator==(const QueueState&) const = default;
    const ReviewItem* find(std::string_view item_id) const;
};

void to_json(nlohmann::json& j, const QueueState& s);
void from_json(const nlohmann::json& j, QueueState& s);

struct ReviewFilter {
    std::optional<std::string> content_id;
    std::optional<std::string> rule_id;
};

/// Inclusive bounds; any unset bound is open.
struct EventRange {
    std::optional<std::uint64_t> first_seq;
    std::optional<std::uint64_t> last_seq;
    std::optional<text::TimePoint> since;
    std::optional<text::TimePoint> until;
};

struct ReviewQueueOptions {
    std::string log_path;       // empty: in-memory only
    std::string snapshot_path;  // empty: no snapshots
    std::size_t snapshot_every = 50;
    std::function<text::TimePoint()> clock;
};

/// Event-sourced review queue. Appends are serialized and flushed to the
/// JSON-lines log before a call returns; a snapshot is rewritten atomically
/// every `snapshot_every` events.
class ReviewQueue {
public:
    using Options = ReviewQueueOptions;

    explicit ReviewQueue(Options options = {}, RuleBaseStore* rules = nullptr);

    /// Returns the new item's id, or the id of a pending item with the same
    /// (content_id, rule_id, normalized snippet).
    std::string enqueue(ReviewItem item);

    std::vector<ReviewItem> list_pending(const ReviewFilter& filter = {}) const;
    std::optional<ReviewItem> get(std::string_view item_id) const;

    /// Throws NotFound, AlreadyDecided, EmptyJustification, SchemaError (no
    /// reviewer) or UnknownRule. A knowledge update is applied to the rule
    /// store under the same lock as the decision.
    ReviewItem decide(const std::string& item_id, const HumanDecision& decision);

    std::vector<ReviewEvent> export_audit(const EventRange& range = {}) const;
    QueueState state() const;

    static QueueState replay(std::span<const ReviewEvent> events, QueueState from = {});
    static std::vector<ReviewEvent> load_log(const std::string& path);

    void write_snapshot() const;

private:
    void append(ReviewEvent e);
    static void fold(QueueState& state, const ReviewEvent& e);

    Options options_;
    RuleBaseStore* rules_;
    mutable std::mutex mutex_;
    std::vector<ReviewEvent> events_;
    QueueState state_;
};

} // namespace qc
