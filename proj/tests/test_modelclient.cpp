#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "qc/errors.hpp"
#include "qc/modelclient.hpp"
#include "support/helpers.hpp"

using namespace qc;
using namespace testing_support;
using nlohmann::json;

namespace {

ModelSpec flash() { return ModelSpec::student("google", "gemini-2.5-flash"); }

ChatRequest issues_request(std::string user = "Some text.") {
    ChatRequest r;
    r.system_instruction = "rules";
    r.user_content = std::move(user);
    r.response_schema_id = std::string(schema_id::kIssuesReport);
    return r;
}

PricingTable table9() { return PricingTable::from_json(json::parse(slurp(fixture("pricing/table9.json")))); }

} // namespace

TEST(ModelSpec, TeacherAndStudentDefaults) {
    EXPECT_DOUBLE_EQ(ModelSpec::teacher("p", "m").temperature, 0.2);
    EXPECT_EQ(ModelSpec::teacher("p", "m").role_hint, RoleHint::kTeacher);
    EXPECT_DOUBLE_EQ(ModelSpec::student("p", "m").temperature, 1.0);
    EXPECT_EQ(ModelSpec::student("p", "m").role_hint, RoleHint::kStudent);
    ModelSpec s = ModelSpec::student("p", "m");
    s.temperature = 0.7;
    EXPECT_NO_THROW(s.validate());
    EXPECT_EQ(json(s).get<ModelSpec>(), s);
}

TEST(ModelSpec, ValidationRejectsOutOfRangeFields) {
    ModelSpec s = ModelSpec::teacher("p", "m");
    s.temperature = 3.0;
    EXPECT_THROW(s.validate(), MisconfiguredPolicy);
    s = ModelSpec::teacher("", "m");
    EXPECT_THROW(s.validate(), MisconfiguredPolicy);
    s = ModelSpec::teacher("p", "m");
    s.max_output_tokens = 0;
    EXPECT_THROW(s.validate(), MisconfiguredPolicy);
}

TEST(ExtractJson, StripsFences) {
    EXPECT_EQ(extract_json("```json\n{\"issues\":[]}\n```"), json::parse(R"({"issues":[]})"));
}

TEST(ExtractJson, PlainObjectIsIdentity) {
    EXPECT_EQ(extract_json(R"({"issues":[]})"), json::parse(R"({"issues":[]})"));
}

TEST(ExtractJson, FindsBalancedObjectInsideProse) {
    EXPECT_EQ(extract_json("Here are results: {\"a\":1} trailing"), json::parse(R"({"a":1})"));
    EXPECT_EQ(extract_json(R"(x {"s": "brace } in string", "n": {"m": [1, {"k": 2}]}} y)"),
              json::parse(R"({"s": "brace } in string", "n": {"m": [1, {"k": 2}]}})"));
}

TEST(ExtractJson, RepairsTrailingCommas) {
    EXPECT_EQ(extract_json(R"({"issues": [1, 2,],})"), json::parse(R"({"issues": [1, 2]})"));
}

TEST(ExtractJson, ProseWithoutJsonFails) {
    EXPECT_THROW(extract_json("I found no problems."), JsonError);
    EXPECT_THROW(extract_json("{ unbalanced"), JsonError);
}

TEST(ValidateResponse, IssueContracts) {
    EXPECT_NO_THROW(validate_response(schema_id::kIssuesReport, json::parse(R"({"issues": []})")));
    EXPECT_THROW(validate_response(schema_id::kIssuesReport, json::parse(R"({"issues": [{"issue": "1.1", "context": "x"}]})")),
                 SchemaViolation);
    EXPECT_THROW(validate_response(schema_id::kIssuesReport, json::parse(R"({"problems": []})")), SchemaViolation);
    EXPECT_THROW(validate_response(schema_id::kVerificationVerdicts,
                                   json::parse(R"({"issues": [{"issue": "1", "context": "x", "recommendation": "y"}]})")),
                 SchemaViolation);
    EXPECT_NO_THROW(validate_response(
        schema_id::kVerificationVerdicts,
        json::parse(R"({"issues": [{"issue": "1", "context": "x", "recommendation": "y", "isValid": false}]})")));
    EXPECT_THROW(validate_response(schema_id::kRuleDocument, json::parse(R"({"sections": []})")), SchemaViolation);
}

TEST(EstimateCost, Table9RowsWithFlatRates) {
    const PricingTable t = table9();
    EXPECT_NEAR(estimate_cost({2400, 0}, t, ModelSpec::teacher("google", "gemini-2.5-pro")), 3.39, 0.005);
    EXPECT_NEAR(estimate_cost({11000, 0}, t, ModelSpec::teacher("anthropic", "claude")), 3.51, 0.005);
    EXPECT_NEAR(estimate_cost({1900, 0}, t, flash()), 0.64, 0.005);
    EXPECT_EQ(estimate_cost({0, 0}, t, flash()), 0.0);
}

TEST(EstimateCost, SplitRatesAndUnknownModel) {
    PricingTable t;
    t.set("p", "m", PriceRate{std::nullopt, 1.0, 3.0});
    EXPECT_DOUBLE_EQ(estimate_cost({1000, 500}, t, ModelSpec::teacher("p", "m")), 2.5);
    EXPECT_THROW(estimate_cost({1, 1}, t, ModelSpec::teacher("p", "other")), UnknownModelError);
    EXPECT_THROW(t.set("p", "neg", PriceRate{-1.0, 0, 0}), SchemaError);
}

TEST(Route, TieredPolicy) {
    RoutingPolicy p;
    p.teacher = ModelSpec::teacher("google", "gemini-2.5-pro");
    p.lightweight = flash();
    EXPECT_EQ(route(p, Risk::kLow, Pass::kDetect), *p.lightweight);
    EXPECT_EQ(route(p, Risk::kHigh, Pass::kDetect), *p.teacher);
    EXPECT_EQ(route(p, Risk::kLow, Pass::kVerify), *p.teacher);
    EXPECT_EQ(route(p, Risk::kHigh, Pass::kVerify), *p.teacher);
    p.lightweight.reset();
    EXPECT_THROW(route(p, Risk::kLow, Pass::kDetect), MisconfiguredPolicy);
}

TEST(UsageSummary, Table10TokensPerRequest) {
    std::vector<UsageRecord> log(2000);
    for (std::size_t i = 0; i < log.size(); ++i) {
        log[i].usage = {5000, 1150};
        log[i].latency_ms = i < 1000 ? 2010 : 2500;
        log[i].cost_cents = 2.045;
    }
    const UsageSummary s = usage_summary(log);
    EXPECT_EQ(s.total_tokens, 12'300'000);
    EXPECT_EQ(s.total_requests, 2000);
    EXPECT_EQ(s.tokens_per_request, 6150.0);
    EXPECT_EQ(s.p50_latency_ms, 2010);
    EXPECT_NEAR(s.cost_per_request, 2.045, 1e-9);
}

TEST(UsageSummary, EmptyAndSingle) {
    EXPECT_EQ(usage_summary({}), UsageSummary{});
    std::vector<UsageRecord> one(1);
    one[0].latency_ms = 2010;
    EXPECT_EQ(usage_summary(one).p50_latency_ms, 2010);
}

TEST(UsageLog, JsonlRoundTrip) {
    TempDir dir;
    UsageLog log(dir / "usage.jsonl");
    UsageRecord r;
    r.request_id = "a";
    r.model_spec = flash();
    r.usage = {10, 5};
    r.cost_cents = 0.0051;
    r.latency_ms = 12;
    r.timestamp = text::from_iso8601("2025-07-01T00:00:00.000Z");
    log.append(r);
    r.request_id = "b";
    r.cost_cents.reset();
    log.append(r);
    const auto back = UsageLog::load_jsonl(dir / "usage.jsonl");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].request_id, "a");
    EXPECT_EQ(back[0].cost_cents, 0.0051);
    EXPECT_FALSE(back[1].cost_cents);
    EXPECT_EQ(back[1].model_spec, flash());
    EXPECT_EQ(back[1].timestamp, r.timestamp);
}

TEST(MockBackend, ScriptedTwoIssues) {
    auto mock = std::make_shared<MockBackend>();
    mock->add(reply_entry(issues_reply({{"1.1", "colour", "fix"}, {"2.1", "color", "fix it"}})));
    ModelClient client;
    client.register_backend("google", mock);
    const ChatResponse r = client.complete(flash(), issues_request());
    ASSERT_TRUE(r.parsed_json);
    EXPECT_EQ((*r.parsed_json)["issues"].size(), 2u);
    EXPECT_EQ((*r.parsed_json)["issues"][1]["context"], "color");
}

TEST(MockBackend, EmptyIssuesAndProse) {
    auto mock = std::make_shared<MockBackend>();
    mock->add(reply_entry("{\"issues\": []}", std::string("empty")));
    mock->add(reply_entry("Looks fine to me."));
    ModelClient client;
    client.register_backend("google", mock);
    ModelSpec empty = flash();
    empty.model_name = "empty";
    EXPECT_TRUE((*client.complete(empty, issues_request()).parsed_json)["issues"].empty());
    EXPECT_THROW(client.complete(flash(), issues_request()), SchemaViolation);
}

TEST(MockBackend, MatchersAndFallback) {
    json script = {{"entries",
                    {{{"user_contains", "alpha"}, {"response", "A"}},
                     {{"system_contains", "sys-b"}, {"response", "B"}},
                     {{"provider", "other"}, {"error", "timeout"}}}},
                   {"default", {{"response", "D"}, {"usage", {{"prompt_tokens", 3}, {"completion_tokens", 4}}}}}};
    MockBackend m = MockBackend::from_json(script);
    ChatRequest req;
    req.system_instruction = "sys";
    req.user_content = "alpha text";
    EXPECT_EQ(m.complete(flash(), req, std::chrono::seconds(1)).text, "A");
    req.user_content = "x";
    req.system_instruction = "sys-b";
    EXPECT_EQ(m.complete(flash(), req, std::chrono::seconds(1)).text, "B");
    req.system_instruction = "s";
    EXPECT_THROW(m.complete(ModelSpec::teacher("other", "m"), req, std::chrono::seconds(1)), Timeout);
    const auto d = m.complete(flash(), req, std::chrono::seconds(1));
    EXPECT_EQ(d.text, "D");
    EXPECT_EQ(d.usage, (Usage{3, 4}));
}

TEST(MockBackend, FingerprintMatchingAndNoMatch) {
    MockBackend m;
    MockBackend::Entry e;
    e.fingerprint = request_fingerprint("sys", "user");
    e.response = "hit";
    m.add(e);
    ChatRequest req;
    req.system_instruction = "sys";
    req.user_content = "user";
    EXPECT_EQ(m.complete(flash(), req, std::chrono::seconds(1)).text, "hit");
    req.user_content = "other";
    EXPECT_THROW(m.complete(flash(), req, std::chrono::seconds(1)), BackendUnavailable);
}

TEST(MockBackend, LatencyBeyondDeadlineTimesOut) {
    MockBackend m;
    MockBackend::Entry e = reply_entry("{}");
    e.latency_ms = 5000;
    m.add(e);
    ChatRequest req;
    req.system_instruction = "s";
    req.user_content = "u";
    EXPECT_THROW(m.complete(flash(), req, std::chrono::milliseconds(100)), Timeout);
}

TEST(MockBackend, BadScriptIsSchemaError) {
    EXPECT_THROW(MockBackend::from_json(json::parse(R"({"entries": [{"model": "m"}]})")), SchemaError);
    EXPECT_THROW(MockBackend::from_json(json::parse(R"({"entries": [{"error": "boom"}]})")), SchemaError);
}

TEST(ModelClient, RecordsUsageWithCostAndRequestId) {
    auto mock = std::make_shared<MockBackend>();
    MockBackend::Entry e = reply_entry("{\"issues\": []}");
    e.usage = Usage{1500, 400};
    e.latency_ms = 2010;
    mock->add(e);
    auto log = std::make_shared<UsageLog>();
    ModelClient client({}, table9(), log);
    client.register_backend("google", mock);
    ChatRequest req = issues_request();
    req.request_id = "c-1/teacher-detect";
    client.complete(flash(), req);
    client.complete(ModelSpec::teacher("google", "unpriced"), issues_request());
    const auto recs = log->records();
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(recs[0].request_id, "c-1/teacher-detect");
    EXPECT_EQ(recs[0].latency_ms, 2010);
    ASSERT_TRUE(recs[0].cost_cents);
    EXPECT_NEAR(*recs[0].cost_cents, 0.64, 0.005);
    EXPECT_FALSE(recs[1].cost_cents);
    EXPECT_FALSE(recs[1].request_id.empty());
}

TEST(ModelClient, UnknownProviderAndEmptyRequest) {
    ModelClient client;
    EXPECT_THROW(client.complete(flash(), issues_request()), BackendUnavailable);
    client.register_backend("google", std::make_shared<MockBackend>());
    ChatRequest empty;
    EXPECT_THROW(client.complete(flash(), empty), SchemaError);
}

namespace {

class CountingBackend : public Backend {
public:
    std::atomic<int> current{0};
    std::atomic<int> peak{0};

    RawCompletion complete(const ModelSpec&, const ChatRequest&, std::chrono::milliseconds) override {
        const int now = ++current;
        int seen = peak.load();
        while (now > seen && !peak.compare_exchange_weak(seen, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        --current;
        return {"{\"issues\": []}", {1, 1}, 20};
    }
};

} // namespace

TEST(ModelClient, InFlightBoundHolds) {
    auto backend = std::make_shared<CountingBackend>();
    ModelClientOptions opts;
    opts.max_in_flight = 2;
    ModelClient client(opts);
    client.register_backend("google", backend);
    std::vector<std::thread> threads;
    for (int i = 0; i < 6; ++i) threads.emplace_back([&] { client.complete(flash(), issues_request()); });
    for (auto& t : threads) t.join();
    EXPECT_LE(backend->peak.load(), 2);
    EXPECT_EQ(client.usage_log().size(), 6u);
}

TEST(RecordReplay, ReplayServesRecordedExchanges) {
    TempDir dir;
    auto mock = std::make_shared<MockBackend>();
    mock->add(reply_entry(issues_reply({{"1.1", "x", "y"}}), std::string("gemini-2.5-flash")));
    const std::string cassette = dir / "cassette.jsonl";
    {
        ModelClient rec;
        rec.register_backend("google", std::make_shared<RecordingBackend>(mock, cassette));
        rec.complete(flash(), issues_request("first"));
    }
    ModelClient play;
    play.register_backend("google", std::make_shared<ReplayBackend>(cassette));
    const auto r = play.complete(flash(), issues_request("first"));
    EXPECT_EQ((*r.parsed_json)["issues"][0]["issue"], "1.1");
    EXPECT_THROW(play.complete(flash(), issues_request("second")), BackendUnavailable);
    EXPECT_THROW(ReplayBackend(dir / "missing.jsonl"), StorageError);
}

TEST(ApproxTokens, CeilOfBytesOverFour) {
    EXPECT_EQ(approx_tokens(""), 0);
    EXPECT_EQ(approx_tokens("abcd"), 1);
    EXPECT_EQ(approx_tokens("abcde"), 2);
}
