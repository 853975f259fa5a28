#include <gtest/gtest.h>

#include <fstream>
#include <thread>

#include "qc/errors.hpp"
#include "qc/hitl.hpp"
#include "qc/waterfall.hpp"
#include "support/helpers.hpp"

using namespace qc;
using namespace testing_support;
using nlohmann::json;

namespace {

ReviewItem item(std::string content_id, std::string rule, std::string snippet) {
    ReviewItem i;
    i.content_id = std::move(content_id);
    i.issue.issue_id = "S1-1";
    i.issue.rule_id = std::move(rule);
    i.issue.context_snippet = std::move(snippet);
    i.issue.recommendation = "fix";
    i.issue.origin = Origin::kStudent;
    i.reason = "contested";
    return i;
}

HumanDecision accept(std::string why = "Clear typo.") {
    return {DecisionVerdict::kAcceptViolation, std::move(why), "rev-1", std::nullopt};
}

bool has_rule(const FilteredRuleSet& f, const std::string& id) {
    const auto ids = f.rule_ids();
    return std::find(ids.begin(), ids.end(), id) != ids.end();
}

ReviewQueueOptions clocked(SteppingClock& clock, std::string log = {}, std::string snap = {}) {
    ReviewQueueOptions o;
    o.log_path = std::move(log);
    o.snapshot_path = std::move(snap);
    o.clock = [&clock] { return clock(); };
    return o;
}

} // namespace

TEST(Enqueue, FreshConflictIsPendingAndVisible) {
    ReviewQueue q;
    const auto id = q.enqueue(item("c1", "1.3", "recieve"));
    EXPECT_EQ(id, "rv-000001");
    const auto pending = q.list_pending();
    ASSERT_EQ(pending.size(), 1u);
    EXPECT_EQ(pending[0].item_id, id);
    EXPECT_EQ(pending[0].status, ReviewStatus::kPending);
    EXPECT_FALSE(pending[0].decision);
}

TEST(Enqueue, DuplicateWithinReportReturnsExistingId) {
    ReviewQueue q;
    const auto a = q.enqueue(item("c1", "1.3", "teams recieve  updates"));
    const auto b = q.enqueue(item("c1", "1.3", "Teams recieve updates"));
    EXPECT_EQ(a, b);
    EXPECT_EQ(q.list_pending().size(), 1u);
    EXPECT_NE(q.enqueue(item("c2", "1.3", "teams recieve updates")), a);
    EXPECT_NE(q.enqueue(item("c1", "1.4", "teams recieve updates")), a);
}

TEST(Enqueue, DecidedItemsNoLongerDeduplicate) {
    ReviewQueue q;
    const auto a = q.enqueue(item("c1", "1.3", "x"));
    q.decide(a, accept());
    EXPECT_NE(q.enqueue(item("c1", "1.3", "x")), a);
}

TEST(Enqueue, EmptySnippetIsFlaggedUnanchored) {
    ReviewQueue q;
    const auto id = q.enqueue(item("c1", "1.3", ""));
    EXPECT_TRUE(q.get(id)->unanchored);
}

TEST(Enqueue, RejectsDecidedItems) {
    ReviewQueue q;
    ReviewItem i = item("c1", "1.3", "x");
    i.status = ReviewStatus::kAccepted;
    EXPECT_THROW(q.enqueue(i), SchemaError);
}

TEST(ListPending, EmptyFilteredAndOrdered) {
    SteppingClock clock;
    ReviewQueue q(clocked(clock));
    EXPECT_TRUE(q.list_pending().empty());
    const auto a = q.enqueue(item("c1", "1.3", "a"));
    const auto b = q.enqueue(item("c2", "1.3", "b"));
    const auto c = q.enqueue(item("c1", "2.1", "c"));
    ReviewFilter f;
    f.content_id = "c1";
    auto got = q.list_pending(f);
    ASSERT_EQ(got.size(), 2u);
    EXPECT_EQ(got[0].item_id, a);
    EXPECT_EQ(got[1].item_id, c);
    f.rule_id = "2.1";
    got = q.list_pending(f);
    ASSERT_EQ(got.size(), 1u);
    EXPECT_EQ(got[0].item_id, c);
    q.decide(a, accept());
    EXPECT_EQ(q.list_pending().size(), 2u);
    EXPECT_EQ(q.list_pending()[0].item_id, b);
}

TEST(Decide, AcceptSetsStatusAndTimestamps) {
    SteppingClock clock;
    ReviewQueue q(clocked(clock));
    const auto id = q.enqueue(item("c1", "1.3", "x"));
    const ReviewItem r = q.decide(id, accept());
    EXPECT_EQ(r.status, ReviewStatus::kAccepted);
    ASSERT_TRUE(r.decision);
    EXPECT_EQ(r.decision->justification, "Clear typo.");
    ASSERT_TRUE(r.decided_at);
    EXPECT_GE(*r.decided_at, r.created_at);
    HumanDecision reject = accept("Not an error.");
    reject.verdict = DecisionVerdict::kRejectFlag;
    EXPECT_EQ(q.decide(q.enqueue(item("c1", "1.4", "y")), reject).status, ReviewStatus::kRejected);
}

TEST(Decide, ErrorCases) {
    ReviewQueue q;
    const auto id = q.enqueue(item("c1", "1.3", "x"));
    EXPECT_THROW(q.decide("rv-999999", accept()), NotFound);
    EXPECT_THROW(q.decide(id, accept("   ")), EmptyJustification);
    HumanDecision anon = accept();
    anon.reviewer_id = "";
    EXPECT_THROW(q.decide(id, anon), SchemaError);
    q.decide(id, accept());
    EXPECT_THROW(q.decide(id, accept()), AlreadyDecided);
}

TEST(Decide, FailedValidationLeavesNoEvents) {
    RuleBaseStore store(house_style_base());
    ReviewQueue q({}, &store);
    const auto id = q.enqueue(item("c1", "1.3", "x"));
    HumanDecision d = accept();
    d.knowledge_update = KnowledgeUpdate{"9.9", FeedbackAction::kMarkAlwaysValid, {}, "", ""};
    EXPECT_THROW(q.decide(id, d), UnknownRule);
    d.knowledge_update = KnowledgeUpdate{"1.3", FeedbackAction::kAmendRecommendation, {}, "  ", ""};
    EXPECT_THROW(q.decide(id, d), SchemaError);
    EXPECT_EQ(q.export_audit().size(), 1u);
    EXPECT_EQ(q.get(id)->status, ReviewStatus::kPending);
}

TEST(Decide, UpdateWithoutRuleStoreIsStorageError) {
    ReviewQueue q;
    const auto id = q.enqueue(item("c1", "1.3", "x"));
    HumanDecision d = accept();
    d.knowledge_update = KnowledgeUpdate{"1.3", FeedbackAction::kMarkAlwaysValid, {}, "", ""};
    EXPECT_THROW(q.decide(id, d), StorageError);
}

TEST(Decide, RejectWithSuppressionMutatesRuleAndLogsApply) {
    RuleBaseStore store(house_style_base());
    ReviewQueue q({}, &store);
    const auto id = q.enqueue(item("c1", "1.3", "recieve"));
    HumanDecision d = accept("Accepted spelling in US copy.");
    d.verdict = DecisionVerdict::kRejectFlag;
    KnowledgeUpdate u;
    u.rule_id = "1.3";
    u.action = FeedbackAction::kSuppressInContext;
    u.context.country = "US";
    u.scope_note = "US market";
    d.knowledge_update = u;

    ContentContext us;
    us.country = "US";
    EXPECT_TRUE(has_rule(filter_rules(store.snapshot(), us), "1.3"));
    const auto v0 = store.snapshot().version();
    q.decide(id, d);
    EXPECT_FALSE(has_rule(filter_rules(store.snapshot(), us), "1.3"));
    EXPECT_EQ(store.snapshot().version(), v0 + 1);
    EXPECT_EQ(lookup(store.snapshot(), "1.3")->status, RuleStatus::kHumanOverridden);

    const auto events = q.export_audit();
    ASSERT_EQ(events.size(), 3u);
    EXPECT_EQ(events[1].kind, "decide");
    EXPECT_EQ(events[2].kind, "apply");
    EXPECT_EQ(events[2].payload["rulebase_version"], v0 + 1);
    EXPECT_EQ(events[2].payload["update"]["rule_id"], "1.3");
}

TEST(Decide, ConcurrentDecidesAreLinearized) {
    ReviewQueue q;
    const auto id = q.enqueue(item("c1", "1.3", "x"));
    std::atomic<int> ok{0}, already{0};
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) {
        threads.emplace_back([&] {
            try {
                q.decide(id, accept());
                ++ok;
            } catch (const AlreadyDecided&) {
                ++already;
            }
        });
    }
    for (auto& t : threads) t.join();
    EXPECT_EQ(ok.load(), 1);
    EXPECT_EQ(already.load(), 7);
}

TEST(ApplyFeedback, SuppressForUsKeepsUk) {
    const RuleBase b = house_style_base();
    KnowledgeUpdate u;
    u.rule_id = "1.3";
    u.context.country = "US";
    const RuleBase after = apply_feedback(b, u);
    ContentContext us, uk;
    us.country = "US";
    uk.country = "UK";
    EXPECT_FALSE(has_rule(filter_rules(after, us), "1.3"));
    EXPECT_TRUE(has_rule(filter_rules(after, uk), "1.3"));
    EXPECT_TRUE(has_rule(filter_rules(after, {}), "1.3"));
    EXPECT_EQ(after.version(), b.version() + 1);
}

TEST(ApplyFeedback, OpenContextSuppressesEverywhere) {
    KnowledgeUpdate u;
    u.rule_id = "1.3";
    const RuleBase after = apply_feedback(house_style_base(), u);
    EXPECT_EQ(lookup(after, "1.3")->status, RuleStatus::kSuppressed);
    EXPECT_FALSE(has_rule(filter_rules(after, {}), "1.3"));
}

TEST(ApplyFeedback, AmendAndAlwaysValid) {
    KnowledgeUpdate amend{"2.1", FeedbackAction::kAmendRecommendation, {}, "  Use colour.  ", ""};
    RuleBase b = apply_feedback(house_style_base(), amend);
    EXPECT_EQ(lookup(b, "2.1")->amended_recommendation, "Use colour.");
    b = apply_feedback(b, {"2.1", FeedbackAction::kMarkAlwaysValid, {}, "", ""});
    EXPECT_TRUE(lookup(b, "2.1")->always_valid);
    EXPECT_THROW(apply_feedback(b, {"2.1", FeedbackAction::kAmendRecommendation, {}, "", ""}), SchemaError);
}

TEST(ApplyFeedback, UnknownRule) {
    EXPECT_THROW(apply_feedback(house_style_base(), {"9.9", FeedbackAction::kMarkAlwaysValid, {}, "", ""}),
                 UnknownRule);
}

TEST(ApplyFeedback, RepeatedSuppressionIsNotDuplicated) {
    KnowledgeUpdate u;
    u.rule_id = "1.3";
    u.context.country = "US";
    const RuleBase b = apply_feedback(apply_feedback(house_style_base(), u), u);
    EXPECT_EQ(lookup(b, "1.3")->suppressed_in.size(), 1u);
}

TEST(ExportAudit, RangesAndEmpty) {
    SteppingClock clock;
    ReviewQueue q(clocked(clock));
    EXPECT_TRUE(q.export_audit().empty());
    const auto a = q.enqueue(item("c1", "1.3", "a"));
    q.enqueue(item("c1", "1.4", "b"));
    q.decide(a, accept());
    EventRange none;
    none.first_seq = 10;
    EXPECT_TRUE(q.export_audit(none).empty());
    EventRange one;
    one.first_seq = 3;
    one.last_seq = 3;
    const auto ev = q.export_audit(one);
    ASSERT_EQ(ev.size(), 1u);
    EXPECT_EQ(ev[0].kind, "decide");
    EventRange since;
    since.since = q.export_audit()[1].at;
    EXPECT_EQ(q.export_audit(since).size(), 2u);
}

TEST(ExportAudit, ReplayEqualsLiveState) {
    SteppingClock clock;
    ReviewQueue q(clocked(clock));
    for (int i = 0; i < 5; ++i) q.enqueue(item("c" + std::to_string(i), "1.3", "x"));
    q.decide("rv-000002", accept());
    const auto events = q.export_audit();
    EXPECT_EQ(ReviewQueue::replay(events), q.state());
    // JSON round trip of every event keeps replay exact.
    std::vector<ReviewEvent> reparsed;
    for (const auto& e : events) reparsed.push_back(json::parse(json(e).dump()).get<ReviewEvent>());
    EXPECT_EQ(ReviewQueue::replay(reparsed), q.state());
}

TEST(Persistence, ReopenedQueueHasSameStateAndContinuesIds) {
    TempDir dir;
    SteppingClock clock;
    QueueState before;
    {
        ReviewQueue q(clocked(clock, dir / "events.jsonl"));
        q.enqueue(item("c1", "1.3", "a"));
        q.decide(q.enqueue(item("c1", "1.4", "b")), accept());
        before = q.state();
    }
    ReviewQueue again(clocked(clock, dir / "events.jsonl"));
    EXPECT_EQ(again.state(), before);
    EXPECT_EQ(again.enqueue(item("c1", "2.1", "c")), "rv-000003");
    const auto line = slurp(dir / "events.jsonl");
    EXPECT_NE(line.find("\"schema_version\":1"), std::string::npos);
}

TEST(Persistence, SnapshotPlusTailReplay) {
    TempDir dir;
    SteppingClock clock;
    ReviewQueueOptions o = clocked(clock, dir / "events.jsonl", dir / "snapshot.json");
    o.snapshot_every = 3;
    QueueState before;
    {
        ReviewQueue q(o);
        for (int i = 0; i < 7; ++i) q.enqueue(item("c" + std::to_string(i), "1.3", "x"));
        before = q.state();
    }
    const json snap = json::parse(slurp(dir / "snapshot.json"));
    EXPECT_EQ(snap["last_seq"], 6);
    ReviewQueue again(o);
    EXPECT_EQ(again.state(), before);
}

TEST(Persistence, TornLastLineIsIgnored) {
    TempDir dir;
    SteppingClock clock;
    {
        ReviewQueue q(clocked(clock, dir / "events.jsonl"));
        q.enqueue(item("c1", "1.3", "a"));
    }
    {
        std::ofstream out(dir / "events.jsonl", std::ios::app);
        out << "{\"schema_version\":1,\"seq\":2,\"kind\":\"enq";
    }
    ReviewQueue again(clocked(clock, dir / "events.jsonl"));
    EXPECT_EQ(again.state().items.size(), 1u);
}

TEST(Persistence, CorruptMiddleLineIsStorageError) {
    TempDir dir;
    spit(dir / "events.jsonl", "garbage\n{}\n");
    EXPECT_THROW(ReviewQueue::load_log(dir / "events.jsonl"), StorageError);
}

TEST(Persistence, UnwritableLogIsStorageError) {
    TempDir dir;
    ReviewQueueOptions o;
    o.log_path = dir / "no-such-dir/events.jsonl";
    ReviewQueue q(o);
    EXPECT_THROW(q.enqueue(item("c1", "1.3", "a")), StorageError);
}

TEST(ReviewJson, ItemAndDecisionRoundTrip) {
    SteppingClock clock;
    ReviewQueue q(clocked(clock));
    ReviewItem i = item("c1", "1.3", "x");
    i.teacher_position = Verdict{i.issue, true, "valid"};
    i.student_position = i.issue;
    const auto id = q.enqueue(i);
    HumanDecision d = accept();
    d.knowledge_update = KnowledgeUpdate{"1.3", FeedbackAction::kAmendRecommendation, {}, "Use receive.", "note"};
    EXPECT_EQ(json(d).get<HumanDecision>(), d);
    const ReviewItem stored = *q.get(id);
    EXPECT_EQ(json(stored).get<ReviewItem>(), stored);
    EXPECT_EQ(json(stored)["status"], "pending");
}
