#include <gtest/gtest.h>

#include <random>

#include "qc/errors.hpp"
#include "qc/hitl.hpp"
#include "qc/waterfall.hpp"
#include "support/helpers.hpp"
#include "support/oracles.hpp"

using namespace qc;
using namespace testing_support;

namespace {

Rule make_rule(std::string id, TagSet countries = {}, Polarity pol = Polarity::kDo,
               LrbtcModule mod = LrbtcModule::kL) {
    Rule r;
    r.rule_id = std::move(id);
    r.text = "Rule text for " + r.rule_id + ".";
    r.polarity = pol;
    r.module = mod;
    r.taxonomy.countries = std::move(countries);
    return r;
}

// 3 UK rules, 2 US rules, 5 untagged.
RuleBase country_fixture() {
    std::vector<Rule> rules;
    for (int i = 1; i <= 3; ++i) rules.push_back(make_rule("1." + std::to_string(i), {"UK"}));
    for (int i = 4; i <= 5; ++i) rules.push_back(make_rule("1." + std::to_string(i), {"US"}));
    for (int i = 6; i <= 10; ++i) rules.push_back(make_rule("1." + std::to_string(i)));
    return upsert_rules(RuleBase(), rules);
}

void expect_chained(const FilteredRuleSet& f, std::size_t active) {
    ASSERT_EQ(f.trace.size(), 5u);
    EXPECT_EQ(f.trace.front().rules_in, active);
    for (std::size_t k = 0; k < f.trace.size(); ++k) {
        EXPECT_EQ(f.trace[k].level, kTaxonomyLevels[k]);
        EXPECT_LE(f.trace[k].rules_out, f.trace[k].rules_in);
        EXPECT_EQ(f.trace[k].rules_in - f.trace[k].rules_out, f.trace[k].excluded_rule_ids.size());
        if (k + 1 < f.trace.size()) {
            EXPECT_EQ(f.trace[k].rules_out, f.trace[k + 1].rules_in);
        }
    }
    EXPECT_EQ(f.trace.back().rules_out, f.rules.size());
}

} // namespace

TEST(FilterRules, OpenContextReturnsEverythingWithIdentityTrace) {
    const RuleBase b = country_fixture();
    const auto f = filter_rules(b, {});
    EXPECT_EQ(f.rules.size(), 10u);
    for (const auto& t : f.trace) {
        EXPECT_EQ(t.rules_in, t.rules_out);
        EXPECT_TRUE(t.query_value.is_null());
    }
    expect_chained(f, 10);
    EXPECT_EQ(f.rulebase_version, b.version());
}

TEST(FilterRules, CountryUkKeepsUkAndGlobalRules) {
    ContentContext ctx;
    ctx.country = "UK";
    const auto f = filter_rules(country_fixture(), ctx);
    EXPECT_EQ(f.rule_ids(), (std::vector<std::string>{"1.1", "1.2", "1.3", "1.6", "1.7", "1.8", "1.9", "1.10"}));
    expect_chained(f, 10);
    EXPECT_EQ(f.trace[1].excluded_rule_ids, (std::vector<std::string>{"1.4", "1.5"}));
}

TEST(FilterRules, UnknownCountryKeepsOnlyGlobals) {
    ContentContext ctx;
    ctx.country = "XX";
    const auto f = filter_rules(country_fixture(), ctx);
    EXPECT_EQ(f.rule_ids(), (std::vector<std::string>{"1.6", "1.7", "1.8", "1.9", "1.10"}));
    std::vector<std::string> excluded = f.trace[1].excluded_rule_ids;
    std::sort(excluded.begin(), excluded.end());
    EXPECT_EQ(excluded, (std::vector<std::string>{"1.1", "1.2", "1.3", "1.4", "1.5"}));
    EXPECT_EQ(f.trace[1].query_value, "XX");
}

TEST(FilterRules, MatchingIsCaseInsensitive) {
    ContentContext ctx;
    ctx.country = "uk";
    EXPECT_EQ(filter_rules(country_fixture(), ctx).rules.size(), 8u);
}

TEST(FilterRules, OrderingIsModuleThenNumericId) {
    std::vector<Rule> rules = {make_rule("1.10"), make_rule("1.2"), make_rule("2.1", {}, Polarity::kDo, LrbtcModule::kR),
                               make_rule("0.5", {}, Polarity::kDo, LrbtcModule::kC)};
    const auto f = filter_rules(upsert_rules(RuleBase(), rules), {});
    EXPECT_EQ(f.rule_ids(), (std::vector<std::string>{"1.2", "1.10", "2.1", "0.5"}));
}

TEST(FilterRules, SubtasksMatchOnIntersection) {
    Rule a = make_rule("1.1");
    a.taxonomy.subtasks = {"headline", "caption"};
    Rule b = make_rule("1.2");
    b.taxonomy.subtasks = {"body"};
    const RuleBase base = upsert_rules(RuleBase(), std::vector<Rule>{a, b, make_rule("1.3")});
    ContentContext ctx;
    ctx.subtasks = std::set<std::string>{"Caption", "footer"};
    EXPECT_EQ(filter_rules(base, ctx).rule_ids(), (std::vector<std::string>{"1.1", "1.3"}));
    ctx.subtasks = std::set<std::string>{};
    EXPECT_EQ(filter_rules(base, ctx).rules.size(), 3u);
}

TEST(FilterRules, SuppressedRulesDropBeforeTheFirstLevel) {
    RuleBase b = country_fixture();
    b = *b.modified("1.6", [](Rule& r) { r.status = RuleStatus::kSuppressed; });
    const auto f = filter_rules(b, {});
    EXPECT_EQ(f.rules.size(), 9u);
    EXPECT_EQ(f.suppressed_rule_ids, std::vector<std::string>{"1.6"});
    expect_chained(f, 9);
}

TEST(FilterRules, ContextScopedSuppressionOnlyAppliesInScope) {
    const RuleBase b = house_style_base();
    KnowledgeUpdate u;
    u.rule_id = "1.3";
    u.action = FeedbackAction::kSuppressInContext;
    u.context.country = "US";
    const RuleBase s = apply_feedback(b, u);
    ContentContext us, uk;
    us.country = "US";
    uk.country = "UK";
    const auto ids_us = filter_rules(s, us).rule_ids();
    const auto ids_uk = filter_rules(s, uk).rule_ids();
    EXPECT_EQ(std::count(ids_us.begin(), ids_us.end(), "1.3"), 0);
    EXPECT_EQ(std::count(ids_uk.begin(), ids_uk.end(), "1.3"), 1);
}

TEST(FilterRules, RandomContextsMatchPredicateOracle) {
    std::mt19937 rng(11);
    const std::vector<std::string> values = {"A", "b", "C"};
    std::vector<Rule> rules;
    for (int i = 1; i <= 30; ++i) {
        Rule r = make_rule("3." + std::to_string(i));
        r.module = static_cast<LrbtcModule>(rng() % 5);
        for (auto level : kTaxonomyLevels) {
            for (const auto& v : values) {
                if (rng() % 3 == 0) r.taxonomy.at(level).insert(v);
            }
        }
        rules.push_back(r);
    }
    const RuleBase base = upsert_rules(RuleBase(), rules);
    for (int t = 0; t < 100; ++t) {
        ContentContext ctx;
        auto pick = [&]() -> std::optional<std::string> {
            const auto k = rng() % 5;
            if (k >= 3) return std::nullopt;
            return k == 0 ? "a" : values[k];
        };
        ctx.ip = pick();
        ctx.country = pick();
        ctx.use_case = pick();
        ctx.topic = pick();
        if (auto s = pick()) ctx.subtasks = std::set<std::string>{*s};
        const auto f = filter_rules(base, ctx);
        EXPECT_EQ(f.rule_ids(), oracle::filter_ids(rules, ctx));
        expect_chained(f, rules.size());
    }
}

TEST(FilteredRuleSetJson, HasTraceAndRules) {
    ContentContext ctx;
    ctx.country = "UK";
    const auto j = to_json(filter_rules(country_fixture(), ctx));
    EXPECT_EQ(j["rules"].size(), 8u);
    EXPECT_EQ(j["trace"].size(), 5u);
    EXPECT_EQ(j["trace"][1]["level"], "country");
    EXPECT_EQ(j["trace"][1]["rules_out"], 8);
}

TEST(RenderPrompt, EmptyRuleSetStillCarriesOutputContract) {
    const std::string p = render_system_prompt(filter_rules(RuleBase(), {}), kDefaultTemplateId);
    EXPECT_NE(p.find(kIssuesOutputFormat), std::string::npos);
}

TEST(RenderPrompt, ListsEachRuleIdOnce) {
    const RuleBase b = upsert_rules(RuleBase(), std::vector<Rule>{make_rule("1.1"), make_rule("2.1", {}, Polarity::kProhibit)});
    const std::string p = render_system_prompt(filter_rules(b, {}), kDefaultTemplateId);
    auto count = [&](const std::string& needle) {
        std::size_t n = 0;
        for (auto pos = p.find(needle); pos != std::string::npos; pos = p.find(needle, pos + 1)) ++n;
        return n;
    };
    EXPECT_EQ(count("- 1.1 "), 1u);
    EXPECT_EQ(count("- 2.1 "), 1u);
}

TEST(RenderPrompt, StyleGuideLayoutHasRoleDoProhibitRequirementsAndFormat) {
    const std::string p = render_system_prompt(filter_rules(house_style_base(), {}), kDefaultTemplateId);
    const auto role = p.find("You are an expert");
    const auto dos = p.find("## Rules: what to do");
    const auto first_do = p.find("- 1.1 Use UK English spelling in all external copy.");
    const auto prohibit = p.find("## Rules: what to prohibit");
    const auto first_pr = p.find("- 2.1 Avoid US spellings such as color, center and behavior.");
    const auto req = p.find("## Analysis requirements");
    const auto fmt = p.find("## Output format");
    ASSERT_NE(role, std::string::npos);
    EXPECT_LT(role, dos);
    EXPECT_LT(dos, first_do);
    EXPECT_LT(first_do, prohibit);
    EXPECT_LT(prohibit, first_pr);
    EXPECT_LT(first_pr, req);
    EXPECT_LT(req, fmt);
    EXPECT_NE(p.find("\"issues\": []"), std::string::npos);
}

TEST(RenderPrompt, RuleTextWithPlaceholdersIsNotExpanded) {
    Rule r = make_rule("1.1");
    r.text = "Never write {{output_format}} literally.";
    const std::string p =
        render_system_prompt(filter_rules(upsert_rules(RuleBase(), std::vector<Rule>{r}), {}), kDefaultTemplateId);
    EXPECT_NE(p.find("Never write {{output_format}} literally."), std::string::npos);
}

TEST(TemplateStore, UnknownIdAndMissingPlaceholder) {
    TemplateStore store;
    EXPECT_THROW(store.get("nope"), UnknownTemplateError);
    EXPECT_THROW(store.add({"bad", "role", "no contract here"}), TemplateError);
}

TEST(TemplateStore, DirectoryTemplatesShadowBuiltins) {
    TempDir dir;
    spit(dir / "short.txt", "{{role}}|{{do_rules}}|{{output_format}}");
    spit(dir / "short.role.txt", "Custom role.\n");
    const TemplateStore store = TemplateStore::from_directory(dir.path());
    EXPECT_EQ(store.get("short").role, "Custom role.");
    EXPECT_NO_THROW(store.get(kDefaultTemplateId));
    const std::string p = render_system_prompt(filter_rules(country_fixture(), {}), "short", store);
    EXPECT_EQ(p.rfind("Custom role.|- ", 0), 0u);
}
