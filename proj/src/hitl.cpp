#include "qc/hitl.hpp"

#include "qc/errors.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

namespace qc {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(ReviewStatus s) {
    switch (s) {
    case ReviewStatus::kPending: return "pending";
    case ReviewStatus::kAccepted: return "accepted";
    case ReviewStatus::kRejected: return "rejected";
    }
    return "pending";
}

std::string_view to_string(DecisionVerdict v) {
    return v == DecisionVerdict::kAcceptViolation ? "accept_violation" : "reject_flag";
}

std::string_view to_string(FeedbackAction a) {
    switch (a) {
    case FeedbackAction::kSuppressInContext: return "suppress_in_context";
    case FeedbackAction::kMarkAlwaysValid: return "mark_always_valid";
    case FeedbackAction::kAmendRecommendation: return "amend_recommendation";
    }
    return "suppress_in_context";
}

ReviewStatus review_status_from_string(std::string_view s) {
    if (s == "pending") return ReviewStatus::kPending;
    if (s == "accepted") return ReviewStatus::kAccepted;
    if (s == "rejected") return ReviewStatus::kRejected;
    throw SchemaError("unknown review status: " + std::string(s));
}

DecisionVerdict decision_verdict_from_string(std::string_view s) {
    if (s == "accept_violation") return DecisionVerdict::kAcceptViolation;
    if (s == "reject_flag") return DecisionVerdict::kRejectFlag;
    throw SchemaError("unknown decision verdict: " + std::string(s));
}

FeedbackAction feedback_action_from_string(std::string_view s) {
    if (s == "suppress_in_context") return FeedbackAction::kSuppressInContext;
    if (s == "mark_always_valid") return FeedbackAction::kMarkAlwaysValid;
    if (s == "amend_recommendation") return FeedbackAction::kAmendRecommendation;
    throw SchemaError("unknown feedback action: " + std::string(s));
}

// ── JSON ─────────────────────────────────────────────────────────────────────

namespace {

template <typename T>
json opt_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> opt_get(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    return it->get<T>();
}

text::TimePoint ms_precision(text::TimePoint t) {
    return std::chrono::time_point_cast<std::chrono::milliseconds>(t);
}

} // namespace

void to_json(json& j, const KnowledgeUpdate& u) {
    j = {{"rule_id", u.rule_id},
         {"action", to_string(u.action)},
         {"context", u.context},
         {"amended_recommendation", u.amended_recommendation},
         {"scope_note", u.scope_note}};
}

void from_json(const json& j, KnowledgeUpdate& u) {
    try {
        u.rule_id = j.at("rule_id").get<std::string>();
        u.action = feedback_action_from_string(j.at("action").get<std::string>());
        u.context = j.contains("context") && !j.at("context").is_null() ? j.at("context").get<ContentContext>()
                                                                        : ContentContext{};
        u.amended_recommendation = j.value("amended_recommendation", std::string{});
        u.scope_note = j.value("scope_note", std::string{});
    } catch (const json::exception& e) {
        throw SchemaError(std::string("knowledge update: ") + e.what());
    }
}

void to_json(json& j, const HumanDecision& d) {
    j = {{"verdict", to_string(d.verdict)},
         {"justification", d.justification},
         {"reviewer_id", d.reviewer_id},
         {"knowledge_update", opt_json(d.knowledge_update)}};
}

void from_json(const json& j, HumanDecision& d) {
    try {
        d.verdict = decision_verdict_from_string(j.at("verdict").get<std::string>());
        d.justification = j.value("justification", std::string{});
        d.reviewer_id = j.value("reviewer_id", std::string{});
        d.knowledge_update = opt_get<KnowledgeUpdate>(j, "knowledge_update");
    } catch (const json::exception& e) {
        throw SchemaError(std::string("decision: ") + e.what());
    }
}

void to_json(json& j, const ReviewItem& r) {
    j = {{"item_id", r.item_id},
         {"content_id", r.content_id},
         {"issue", r.issue},
         {"teacher_position", opt_json(r.teacher_position)},
         {"student_position", opt_json(r.student_position)},
         {"status", to_string(r.status)},
         {"decision", opt_json(r.decision)},
         {"created_at", text::to_iso8601(r.created_at)},
         {"decided_at", r.decided_at ? json(text::to_iso8601(*r.decided_at)) : json(nullptr)},
         {"unanchored", r.unanchored},
         {"reason", r.reason}};
}

void from_json(const json& j, ReviewItem& r) {
    r.item_id = j.value("item_id", std::string{});
    r.content_id = j.at("content_id").get<std::string>();
    r.issue = j.at("issue").get<Issue>();
    r.teacher_position = opt_get<Verdict>(j, "teacher_position");
    r.student_position = opt_get<Issue>(j, "student_position");
    r.status = review_status_from_string(j.value("status", std::string{"pending"}));
    r.decision = opt_get<HumanDecision>(j, "decision");
    r.created_at = text::from_iso8601(j.at("created_at").get<std::string>());
    if (auto d = opt_get<std::string>(j, "decided_at")) r.decided_at = text::from_iso8601(*d);
    r.unanchored = j.value("unanchored", false);
    r.reason = j.value("reason", std::string{});
}

void to_json(json& j, const ReviewEvent& e) {
    j = {{"schema_version", kReviewEventSchemaVersion},
         {"seq", e.seq},
         {"kind", e.kind},
         {"at", text::to_iso8601(e.at)},
         {"payload", e.payload}};
}

void from_json(const json& j, ReviewEvent& e) {
    const int version = j.value("schema_version", 0);
    if (version != kReviewEventSchemaVersion) {
        throw StorageError("unsupported review event schema version " + std::to_string(version));
    }
    e.seq = j.at("seq").get<std::uint64_t>();
    e.kind = j.at("kind").get<std::string>();
    e.at = text::from_iso8601(j.at("at").get<std::string>());
    e.payload = j.at("payload");
}

void to_json(json& j, const QueueState& s) {
    j = {{"schema_version", kReviewEventSchemaVersion}, {"last_seq", s.last_seq}, {"items", s.items}};
}

void from_json(const json& j, QueueState& s) {
    s.last_seq = j.at("last_seq").get<std::uint64_t>();
    s.items = j.at("items").get<std::vector<ReviewItem>>();
}

const ReviewItem* QueueState::find(std::string_view item_id) const {
    for (const auto& i : items) {
        if (i.item_id == item_id) return &i;
    }
    return nullptr;
}

// ── Feedback ─────────────────────────────────────────────────────────────────

RuleBase apply_feedback(const RuleBase& base, const KnowledgeUpdate& update) {
    if (update.action == FeedbackAction::kAmendRecommendation && text::trim(update.amended_recommendation).empty()) {
        throw SchemaError("amend_recommendation needs a non-empty text");
    }
    auto out = base.modified(update.rule_id, [&](Rule& rule) {
        const bool suppressed = rule.status == RuleStatus::kSuppressed;
        switch (update.action) {
        case FeedbackAction::kSuppressInContext:
            if (update.context.is_wildcard()) {
                rule.status = RuleStatus::kSuppressed;
                return;
            }
            if (std::find(rule.suppressed_in.begin(), rule.suppressed_in.end(), update.context) ==
                rule.suppressed_in.end()) {
                rule.suppressed_in.push_back(update.context);
            }
            break;
        case FeedbackAction::kMarkAlwaysValid:
            rule.always_valid = true;
            break;
        case FeedbackAction::kAmendRecommendation:
            rule.amended_recommendation = text::trim(update.amended_recommendation);
            break;
        }
        if (!suppressed) rule.status = RuleStatus::kHumanOverridden;
    });
    if (!out) throw UnknownRule("no rule with id " + update.rule_id);
    return *out;
}

// ── ReviewQueue ──────────────────────────────────────────────────────────────

namespace {

std::string dedup_key(const ReviewItem& i) {
    return i.content_id + '\x1f' + i.issue.rule_id + '\x1f' +
           text::fold(text::normalize_whitespace(i.issue.context_snippet));
}

std::string format_item_id(std::size_t n) {
    std::string digits = std::to_string(n);
    if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
    return "rv-" + digits;
}

} // namespace

ReviewQueue::ReviewQueue(Options options, RuleBaseStore* rules) : options_(std::move(options)), rules_(rules) {
    if (!options_.clock) options_.clock = [] { return std::chrono::system_clock::now(); };
    if (!options_.log_path.empty() && fs::exists(options_.log_path)) events_ = load_log(options_.log_path);
    if (!options_.snapshot_path.empty() && fs::exists(options_.snapshot_path)) {
        try {
            state_ = json::parse(read_file(options_.snapshot_path)).get<QueueState>();
        } catch (const json::exception& e) {
            throw StorageError("review snapshot " + options_.snapshot_path + ": " + e.what());
        }
        if (!events_.empty() && events_.back().seq < state_.last_seq) {
            throw StorageError("review snapshot is ahead of the event log");
        }
    }
    state_ = replay(events_, std::move(state_));
}

void ReviewQueue::fold(QueueState& state, const ReviewEvent& e) {
    if (e.kind == "enqueue") {
        state.items.push_back(e.payload.at("item").get<ReviewItem>());
    } else if (e.kind == "decide") {
        const std::string id = e.payload.at("item_id").get<std::string>();
        auto it = std::find_if(state.items.begin(), state.items.end(),
                               [&](const ReviewItem& i) { return i.item_id == id; });
        if (it == state.items.end()) throw StorageError("decide event for unknown item " + id);
        it->status = review_status_from_string(e.payload.at("status").get<std::string>());
        it->decision = e.payload.at("decision").get<HumanDecision>();
        it->decided_at = text::from_iso8601(e.payload.at("decided_at").get<std::string>());
    } else if (e.kind != "apply") {
        throw StorageError("unknown review event kind " + e.kind);
    }
    state.last_seq = e.seq;
}

QueueState ReviewQueue::replay(std::span<const ReviewEvent> events, QueueState from) {
    for (const auto& e : events) {
        if (e.seq > from.last_seq) fold(from, e);
    }
    return from;
}

std::vector<ReviewEvent> ReviewQueue::load_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw StorageError("cannot open review log " + path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
        if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(std::move(line));
    }
    std::vector<ReviewEvent> out;
    for (std::size_t k = 0; k < lines.size(); ++k) {
        try {
            out.push_back(json::parse(lines[k]).get<ReviewEvent>());
        } catch (const json::exception& e) {
            // A torn final line is what a crash mid-append leaves behind.
            if (k + 1 == lines.size()) break;
            throw StorageError("review log " + path + " line " + std::to_string(k + 1) + ": " + e.what());
        }
    }
    return out;
}

void ReviewQueue::append(ReviewEvent e) {
    e.seq = state_.last_seq + 1;
    e.at = ms_precision(options_.clock());
    if (!options_.log_path.empty()) {
        std::ofstream out(options_.log_path, std::ios::app);
        out << json(e).dump() << '\n';
        out.flush();
        if (!out) throw StorageError("cannot append to review log " + options_.log_path);
    }
    fold(state_, e);
    events_.push_back(std::move(e));
    if (!options_.snapshot_path.empty() && options_.snapshot_every > 0 &&
        state_.last_seq % options_.snapshot_every == 0) {
        write_file_atomic(options_.snapshot_path, json(state_).dump(2));
    }
}

std::string ReviewQueue::enqueue(ReviewItem item) {
    std::lock_guard lock(mutex_);
    if (item.status != ReviewStatus::kPending || item.decision) {
        throw SchemaError("only pending items without a decision can be enqueued");
    }
    const std::string key = dedup_key(item);
    for (const auto& existing : state_.items) {
        if (existing.status == ReviewStatus::kPending && dedup_key(existing) == key) return existing.item_id;
    }
    item.item_id = format_item_id(state_.items.size() + 1);
    item.created_at = ms_precision(options_.clock());
    item.decided_at.reset();
    if (text::trim(item.issue.context_snippet).empty()) item.unanchored = true;
    append({0, "enqueue", {}, {{"item", item}}});
    return item.item_id;
}

std::vector<ReviewItem> ReviewQueue::list_pending(const ReviewFilter& filter) const {
    std::lock_guard lock(mutex_);
    std::vector<ReviewItem> out;
    for (const auto& i : state_.items) {
        if (i.status != ReviewStatus::kPending) continue;
        if (filter.content_id && i.content_id != *filter.content_id) continue;
        if (filter.rule_id && i.issue.rule_id != *filter.rule_id) continue;
        out.push_back(i);
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const ReviewItem& a, const ReviewItem& b) { return a.created_at < b.created_at; });
    return out;
}

std::optional<ReviewItem> ReviewQueue::get(std::string_view item_id) const {
    std::lock_guard lock(mutex_);
    if (const ReviewItem* i = state_.find(item_id)) return *i;
    return std::nullopt;
}

ReviewItem ReviewQueue::decide(const std::string& item_id, const HumanDecision& decision) {
    std::lock_guard lock(mutex_);
    const ReviewItem* item = state_.find(item_id);
    if (item == nullptr) throw NotFound("no review item " + item_id);
    if (item->status != ReviewStatus::kPending) throw AlreadyDecided("review item " + item_id + " is already decided");
    if (text::trim(decision.justification).empty()) throw EmptyJustification("a decision needs a justification");
    if (text::trim(decision.reviewer_id).empty()) throw SchemaError("a decision needs a reviewer_id");

    const auto& update = decision.knowledge_update;
    if (update) {
        if (rules_ == nullptr) throw StorageError("no rule base attached to the review queue");
        if (!rules_->snapshot().contains(update->rule_id)) throw UnknownRule("no rule with id " + update->rule_id);
        if (update->action == FeedbackAction::kAmendRecommendation &&
            text::trim(update->amended_recommendation).empty()) {
            throw SchemaError("amend_recommendation needs a non-empty text");
        }
    }

    const auto status =
        decision.verdict == DecisionVerdict::kAcceptViolation ? ReviewStatus::kAccepted : ReviewStatus::kRejected;
    const auto decided_at = std::max(ms_precision(options_.clock()), item->created_at);
    append({0, "decide", {},
            {{"item_id", item_id},
             {"status", to_string(status)},
             {"decision", decision},
             {"decided_at", text::to_iso8601(decided_at)}}});

    if (update) {
        const RuleBase after = rules_->update([&](const RuleBase& b) { return apply_feedback(b, *update); });
        append({0, "apply", {},
                {{"item_id", item_id}, {"update", *update}, {"rulebase_version", after.version()}}});
    }
    return *state_.find(item_id);
}

std::vector<ReviewEvent> ReviewQueue::export_audit(const EventRange& range) const {
    std::lock_guard lock(mutex_);
    std::vector<ReviewEvent> out;
    for (const auto& e : events_) {
        if (range.first_seq && e.seq < *range.first_seq) continue;
        if (range.last_seq && e.seq > *range.last_seq) continue;
        if (range.since && e.at < *range.since) continue;
        if (range.until && e.at > *range.until) continue;
        out.push_back(e);
    }
    return out;
}

QueueState ReviewQueue::state() const {
    std::lock_guard lock(mutex_);
    return state_;
}

void ReviewQueue::write_snapshot() const {
    std::lock_guard lock(mutex_);
    if (options_.snapshot_path.empty()) throw StorageError("no snapshot path configured");
    write_file_atomic(options_.snapshot_path, json(state_).dump(2));
}

} // namespace qc
