#include "qc/orchestrator.hpp"

#include "qc/errors.hpp"

#include <algorithm>
#include <future>
#include <set>
#include <tuple>

namespace qc {

using nlohmann::json;

// ── Issue / Verdict serialization ────────────────────────────────────────────

std::string_view to_string(Origin o) {
    return o == Origin::kTeacher ? "teacher" : "student";
}

Origin origin_from_string(std::string_view s) {
    if (s == "teacher") return Origin::kTeacher;
    if (s == "student") return Origin::kStudent;
    throw SchemaError("unknown issue origin: " + std::string(s));
}

void to_json(json& j, const Issue& i) {
    j = {{"issue_id", i.issue_id},
         {"rule_id", i.rule_id},
         {"context_snippet", i.context_snippet},
         {"recommendation", i.recommendation},
         {"origin", to_string(i.origin)},
         {"pass_index", i.pass_index},
         {"unanchored", i.unanchored},
         {"out_of_scope", i.out_of_scope}};
}

void from_json(const json& j, Issue& i) {
    i.issue_id = j.value("issue_id", std::string{});
    i.rule_id = j.at("rule_id").get<std::string>();
    i.context_snippet = j.value("context_snippet", std::string{});
    i.recommendation = j.value("recommendation", std::string{});
    i.origin = origin_from_string(j.value("origin", std::string{"teacher"}));
    i.pass_index = j.value("pass_index", 1);
    i.unanchored = j.value("unanchored", false);
    i.out_of_scope = j.value("out_of_scope", false);
}

void to_json(json& j, const Verdict& v) {
    j = {{"issue", v.issue}, {"is_valid", v.is_valid}, {"justification", v.justification}};
}

void from_json(const json& j, Verdict& v) {
    v.issue = j.at("issue").get<Issue>();
    v.is_valid = j.at("is_valid").get<bool>();
    v.justification = j.value("justification", std::string{});
}

// ── Detection ────────────────────────────────────────────────────────────────

bool is_anchored(std::string_view snippet, std::string_view content) {
    const std::string s = text::normalize_whitespace(snippet);
    if (s.empty()) return false;
    return text::normalize_whitespace(content).find(s) != std::string::npos;
}

namespace {

std::string default_prefix(Origin o, int pass_index) {
    return std::string(o == Origin::kTeacher ? "T" : "S") + std::to_string(pass_index) + "-";
}

Origin origin_of(const ModelSpec& spec) {
    return spec.role_hint == RoleHint::kStudent ? Origin::kStudent : Origin::kTeacher;
}

const json& issues_array(const json& report) {
    if (!report.is_object()) throw SchemaViolation("response is not a JSON object");
    auto it = report.find("issues");
    if (it == report.end() || !it->is_array()) throw SchemaViolation("response has no \"issues\" array");
    return *it;
}

std::string string_field(const json& item, const char* key) {
    auto it = item.find(key);
    if (it == item.end() || !it->is_string()) {
        throw SchemaViolation(std::string("issue item lacks string key \"") + key + "\"");
    }
    return it->get<std::string>();
}

} // namespace

std::vector<Issue> parse_issues(const json& report, Origin origin, int pass_index, std::string_view id_prefix) {
    std::vector<Issue> out;
    int n = 0;
    for (const auto& item : issues_array(report)) {
        if (!item.is_object()) throw SchemaViolation("issue items must be objects");
        Issue i;
        i.issue_id = std::string(id_prefix) + std::to_string(++n);
        i.rule_id = text::trim(string_field(item, "issue"));
        i.context_snippet = string_field(item, "context");
        i.recommendation = string_field(item, "recommendation");
        i.origin = origin;
        i.pass_index = pass_index;
        out.push_back(std::move(i));
    }
    return out;
}

std::vector<Issue> detect_issues(ModelClient& client, const ModelSpec& spec, std::string_view prompt,
                                 std::string_view content, const DetectOptions& options) {
    const Origin origin = options.origin.value_or(origin_of(spec));
    ChatRequest req;
    req.system_instruction = std::string(prompt);
    req.user_content = std::string(content);
    req.response_schema_id = std::string(schema_id::kIssuesReport);
    req.request_id = options.request_id;
    const ChatResponse resp = client.complete(spec, req);
    const std::string prefix =
        options.id_prefix.empty() ? default_prefix(origin, options.pass_index) : options.id_prefix;
    return parse_issues(*resp.parsed_json, origin, options.pass_index, prefix);
}

// ── Diff ─────────────────────────────────────────────────────────────────────

namespace {

double snippet_similarity(const Issue& a, const Issue& b) {
    return text::jaccard(text::token_set(a.context_snippet), text::token_set(b.context_snippet));
}

} // namespace

bool issues_match(const Issue& a, const Issue& b, double jaccard_threshold) {
    return a.rule_id == b.rule_id && snippet_similarity(a, b) >= jaccard_threshold;
}

ConsensusReport diff_issues(std::span<const Issue> teacher, std::span<const Issue> student,
                            double jaccard_threshold) {
    struct Candidate {
        double score;
        std::size_t t;
        std::size_t s;
    };
    std::vector<Candidate> candidates;
    for (std::size_t t = 0; t < teacher.size(); ++t) {
        for (std::size_t s = 0; s < student.size(); ++s) {
            if (teacher[t].rule_id != student[s].rule_id) continue;
            const double score = snippet_similarity(teacher[t], student[s]);
            if (score >= jaccard_threshold) candidates.push_back({score, t, s});
        }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        return std::tie(b.score, a.t, a.s) < std::tie(a.score, b.t, b.s);
    });

    std::vector<std::optional<std::size_t>> partner(teacher.size());
    std::vector<bool> student_taken(student.size(), false);
    for (const auto& c : candidates) {
        if (partner[c.t] || student_taken[c.s]) continue;
        partner[c.t] = c.s;
        student_taken[c.s] = true;
    }

    ConsensusReport r;
    for (std::size_t t = 0; t < teacher.size(); ++t) {
        if (partner[t]) {
            r.agreed.push_back(teacher[t]);
            r.matched_pairs.emplace_back(teacher[t].issue_id, student[*partner[t]].issue_id);
        } else {
            r.teacher_only.push_back(teacher[t]);
        }
    }
    for (std::size_t s = 0; s < student.size(); ++s) {
        if (!student_taken[s]) r.student_only.push_back(student[s]);
    }
    return r;
}

void to_json(json& j, const ConsensusReport& r) {
    json consolidated = json::array();
    for (const auto& c : r.consolidated) {
        consolidated.push_back({{"merged", c.merged}, {"absorbed_issue_ids", c.absorbed_issue_ids}});
    }
    json pairs = json::array();
    for (const auto& [t, s] : r.matched_pairs) pairs.push_back({{"teacher", t}, {"student", s}});
    j = {{"agreed", r.agreed},
         {"teacher_only", r.teacher_only},
         {"student_only", r.student_only},
         {"consolidated", std::move(consolidated)},
         {"unresolved", r.unresolved},
         {"matched_pairs", std::move(pairs)}};
}

// ── Verification ─────────────────────────────────────────────────────────────

const std::string_view kVerificationOutputFormat =
    "Respond with a JSON object containing a single key \"issues\". Its value is an array with one "
    "object per issue that remains after your review. Each object must have the following FOUR keys:\n"
    "1. \"issue\": The most appropriate rule ID for the violation.\n"
    "2. \"context\": The exact snippet of the text the issue refers to.\n"
    "3. \"recommendation\": Your final verdict and justification. If the issue is not a valid violation, "
    "explain why it was likely flagged incorrectly.\n"
    "4. \"isValid\": A boolean value, true if the issue is a valid violation, false otherwise.";

std::string build_verification_prompt(std::span<const Issue> conflicts, std::string_view content,
                                      std::string_view rules_prompt) {
    if (conflicts.empty()) throw SchemaError("verification needs at least one issue");
    std::string p;
    p += "You are the teacher model. Earlier review passes by different models flagged the issues listed "
         "below; they need a final, authoritative check.\n\n";
    p += "## Original text\n";
    p += content;
    p += "\n\n## Original rules\n";
    p += rules_prompt;
    p += "\n\n## Flagged issues\n";
    for (const auto& c : conflicts) {
        p += "- Rule: " + c.rule_id + "\n  Context: \"" + c.context_snippet + "\"\n";
    }
    p += "\n## Instructions\n";
    p += "1. Re-evaluate each flagged issue critically against the original text and the original rules.\n";
    p += "2. When several issues describe the same underlying error, consolidate them into a single issue "
         "and keep the most appropriate rule ID.\n";
    p += "3. Determine for every remaining issue whether it is a valid violation.\n";
    p += "\n## Output format\n";
    p += kVerificationOutputFormat;
    p += '\n';
    return p;
}

std::vector<Verdict> verify_issues(ModelClient& client, const ModelSpec& teacher_spec, std::string_view prompt,
                                   const VerifyOptions& options) {
    ChatRequest req;
    req.system_instruction =
        "You review flagged compliance issues and return a final verdict for each one as JSON.";
    req.user_content = std::string(prompt);
    req.response_schema_id = std::string(schema_id::kVerificationVerdicts);
    req.request_id = options.request_id;
    const ChatResponse resp = client.complete(teacher_spec, req);

    std::vector<Verdict> out;
    int n = 0;
    for (const auto& item : issues_array(*resp.parsed_json)) {
        Verdict v;
        v.issue.issue_id = options.id_prefix + std::to_string(++n);
        v.issue.rule_id = text::trim(string_field(item, "issue"));
        v.issue.context_snippet = string_field(item, "context");
        v.issue.recommendation = string_field(item, "recommendation");
        v.issue.origin = origin_of(teacher_spec);
        v.issue.pass_index = options.pass_index;
        auto valid = item.find("isValid");
        if (valid == item.end() || !valid->is_boolean()) throw SchemaViolation("verdict lacks boolean \"isValid\"");
        v.is_valid = valid->get<bool>();
        v.justification = v.issue.recommendation;
        out.push_back(std::move(v));
    }
    return out;
}

namespace {

bool snippet_contains(const Issue& a, const Issue& b) {
    const std::string x = text::fold(text::normalize_whitespace(a.context_snippet));
    const std::string y = text::fold(text::normalize_whitespace(b.context_snippet));
    if (x.empty() || y.empty()) return false;
    return x.find(y) != std::string::npos || y.find(x) != std::string::npos;
}

} // namespace

Reconciliation reconcile_verdicts(std::span<const Issue> conflicts, std::span<const Verdict> verdicts,
                                  double jaccard_threshold) {
    // conflict index -> verdict index
    std::vector<std::optional<std::size_t>> owner(conflicts.size());
    for (std::size_t c = 0; c < conflicts.size(); ++c) {
        std::optional<std::tuple<bool, double>> best;
        for (std::size_t v = 0; v < verdicts.size(); ++v) {
            double score = snippet_similarity(conflicts[c], verdicts[v].issue);
            if (snippet_contains(conflicts[c], verdicts[v].issue)) score = std::max(score, 1.0);
            if (score < jaccard_threshold) continue;
            const std::tuple<bool, double> key{conflicts[c].rule_id == verdicts[v].issue.rule_id, score};
            if (!best || key > *best) {
                best = key;
                owner[c] = v;
            }
        }
    }

    Reconciliation r;
    for (std::size_t v = 0; v < verdicts.size(); ++v) {
        std::vector<std::size_t> covered;
        for (std::size_t c = 0; c < conflicts.size(); ++c) {
            if (owner[c] == v) covered.push_back(c);
        }
        if (covered.empty()) {
            r.new_verdicts.push_back(verdicts[v]);
            continue;
        }
        Reconciliation::Outcome o;
        o.verdict = verdicts[v];
        if (covered.size() == 1 && conflicts[covered[0]].rule_id == verdicts[v].issue.rule_id) {
            o.issue = conflicts[covered[0]];
        } else {
            o.issue = verdicts[v].issue;
            for (auto c : covered) o.absorbed_issue_ids.push_back(conflicts[c].issue_id);
        }
        (verdicts[v].is_valid ? r.valid : r.rejected).push_back(std::move(o));
    }
    for (std::size_t c = 0; c < conflicts.size(); ++c) {
        if (!owner[c]) r.unmatched_conflicts.push_back(conflicts[c]);
    }
    return r;
}

// ── Config / report serialization ────────────────────────────────────────────

void to_json(json& j, const OrchestratorConfig& c) {
    j = {{"max_rounds", c.max_rounds}, {"jaccard_threshold", c.jaccard_threshold}, {"template_id", c.template_id}};
    j["teacher"] = c.policy.teacher ? json(*c.policy.teacher) : json(nullptr);
    j["student"] = c.policy.lightweight ? json(*c.policy.lightweight) : json(nullptr);
}

void from_json(const json& j, OrchestratorConfig& c) {
    c = OrchestratorConfig{};
    if (auto it = j.find("teacher"); it != j.end() && !it->is_null()) c.policy.teacher = it->get<ModelSpec>();
    if (auto it = j.find("student"); it != j.end() && !it->is_null()) c.policy.lightweight = it->get<ModelSpec>();
    c.max_rounds = j.value("max_rounds", c.max_rounds);
    c.jaccard_threshold = j.value("jaccard_threshold", c.jaccard_threshold);
    c.template_id = j.value("template_id", c.template_id);
}

std::string_view to_string(Resolution r) {
    switch (r) {
    case Resolution::kAgreed: return "agreed";
    case Resolution::kVerified: return "verified";
    case Resolution::kCrossChecked: return "cross_checked";
    case Resolution::kAlwaysValid: return "always_valid";
    }
    return "agreed";
}

json to_json(const QCReport& r, bool include_timestamps) {
    json finals = json::array();
    for (const auto& f : r.final_issues) {
        finals.push_back({{"issue", f.issue},
                          {"resolution", to_string(f.resolution)},
                          {"verdict", f.verdict ? json(*f.verdict) : json(nullptr)},
                          {"absorbed_issue_ids", f.absorbed_issue_ids}});
    }
    json dispositions = json::object();
    for (const auto& [id, d] : r.dispositions) {
        dispositions[id] = {{"state", d.state}, {"ref", d.ref}, {"reason", d.reason}};
    }
    json audit = json::array();
    for (const auto& e : r.audit) {
        json ev = {{"seq", e.seq}, {"kind", e.kind}, {"detail", e.detail}};
        if (include_timestamps) ev["at"] = text::to_iso8601(e.at);
        audit.push_back(std::move(ev));
    }
    return {{"schema_version", 1},
            {"content_id", r.content_id},
            {"context", r.context},
            {"rulebase_version", r.rulebase_version},
            {"filtered_rule_ids", r.filtered_rule_ids},
            {"status", r.degraded ? "degraded" : "complete"},
            {"final_issues", std::move(finals)},
            {"unresolved_for_review", r.unresolved_for_review},
            {"rejected", r.rejected},
            {"consensus", r.consensus},
            {"dispositions", std::move(dispositions)},
            {"audit", std::move(audit)},
            {"usage_request_ids", r.usage_request_ids},
            {"review_item_ids", r.review_item_ids},
            {"model_calls", r.model_calls},
            {"retries", r.retries}};
}

// ── run_qc ───────────────────────────────────────────────────────────────────

namespace {

struct Attempt {
    std::string request_id;
    bool ok = false;
    std::string error_code;
    std::string error;
    std::size_t issues = 0;
};

struct PassResult {
    std::optional<std::vector<Issue>> issues;
    std::vector<Attempt> attempts;
};

PassResult detect_with_retry(ModelClient& client, const ModelSpec& spec, const std::string& prompt,
                             const std::string& content, Origin origin, const std::string& request_id) {
    PassResult out;
    for (int attempt = 1; attempt <= 2; ++attempt) {
        Attempt a;
        a.request_id = attempt == 1 ? request_id : request_id + "#retry";
        DetectOptions opts;
        opts.origin = origin;
        opts.request_id = a.request_id;
        try {
            auto issues = detect_issues(client, spec, prompt, content, opts);
            a.ok = true;
            a.issues = issues.size();
            out.attempts.push_back(a);
            out.issues = std::move(issues);
            return out;
        } catch (const Error& e) {
            a.error_code = e.code();
            a.error = e.what();
            out.attempts.push_back(a);
        }
    }
    return out;
}

struct ReviewHandoff {
    Issue issue;
    std::string reason;
    std::optional<Verdict> teacher_position;
    std::optional<Issue> student_position;
};

class Run {
public:
    Run(std::string_view content, const RuleBase& base, const OrchestratorConfig& config, const QcDeps& deps,
        QCReport& report)
        : content_(content), base_(base), config_(config), deps_(deps), r_(report) {}

    void execute(const ContentContext& ctx);

private:
    text::TimePoint now() const { return deps_.clock ? deps_.clock() : std::chrono::system_clock::now(); }

    void event(std::string kind, json detail) {
        r_.audit.push_back({static_cast<int>(r_.audit.size()) + 1, std::move(kind), now(), std::move(detail)});
    }

    void record_call(const std::string& label, const ModelSpec& spec, const Attempt& a) {
        ++r_.model_calls;
        r_.usage_request_ids.push_back(a.request_id);
        json d = {{"label", label},
                  {"provider", spec.provider},
                  {"model", spec.model_name},
                  {"request_id", a.request_id},
                  {"outcome", a.ok ? "ok" : "failed"}};
        if (a.ok) {
            d["issues"] = a.issues;
        } else {
            d["error_code"] = a.error_code;
            d["error"] = a.error;
        }
        event("model_call", std::move(d));
    }

    void annotate(Issue& i) const {
        i.unanchored = !is_anchored(i.context_snippet, content_);
        i.out_of_scope = !filtered_.contains(i.rule_id);
        if (const Rule* rule = base_.find(i.rule_id); rule && rule->amended_recommendation) {
            i.recommendation = *rule->amended_recommendation;
        }
    }

    void dispose(const std::string& id, std::string state, std::string ref = {}, std::string reason = {}) {
        r_.dispositions[id] = Disposition{std::move(state), std::move(ref), std::move(reason)};
    }

    void finalize(Issue issue, Resolution res, std::optional<Verdict> verdict = std::nullopt,
                  std::vector<std::string> absorbed = {}) {
        dispose(issue.issue_id, std::string(to_string(res)));
        r_.final_issues.push_back({std::move(issue), res, std::move(verdict), std::move(absorbed)});
    }

    void unresolve(Issue issue, std::string reason, std::optional<Verdict> teacher_pos = std::nullopt,
                   std::optional<Issue> student_pos = std::nullopt) {
        if (!student_pos && issue.origin == Origin::kStudent) student_pos = issue;
        dispose(issue.issue_id, "unresolved", {}, reason);
        r_.unresolved_for_review.push_back(issue);
        r_.consensus.unresolved.push_back(issue);
        handoff_.push_back({std::move(issue), std::move(reason), std::move(teacher_pos), std::move(student_pos)});
    }

    /// A verifier restating an issue that already has a final state.
    std::optional<std::string> known_as(const Issue& i) const {
        for (const auto& f : r_.final_issues) {
            if (issues_match(f.issue, i, config_.jaccard_threshold)) return f.issue.issue_id;
        }
        for (const auto& u : r_.unresolved_for_review) {
            if (issues_match(u, i, config_.jaccard_threshold)) return u.issue_id;
        }
        for (const auto& v : r_.rejected) {
            if (issues_match(v.issue, i, config_.jaccard_threshold)) return v.issue.issue_id;
        }
        return std::nullopt;
    }

    // A verdict about an existing issue carries its own id; fold it into that issue.
    void fold_verdict(const Reconciliation::Outcome& o) {
        const std::string& vid = o.verdict.issue.issue_id;
        if (vid.empty() || vid == o.issue.issue_id || r_.dispositions.contains(vid)) return;
        dispose(vid, "absorbed", o.issue.issue_id, "verdict on an open issue");
    }

    void record_absorption(const Reconciliation::Outcome& o, int round) {
        fold_verdict(o);
        if (o.absorbed_issue_ids.empty()) return;
        for (const auto& id : o.absorbed_issue_ids) dispose(id, "absorbed", o.issue.issue_id);
        r_.consensus.consolidated.push_back({o.issue, o.absorbed_issue_ids});
        event("absorption", {{"round", round},
                             {"merged_issue_id", o.issue.issue_id},
                             {"rule_id", o.issue.rule_id},
                             {"absorbed_issue_ids", o.absorbed_issue_ids}});
    }

    bool any_contested(const Reconciliation::Outcome& o) const {
        if (contested_.contains(o.issue.issue_id)) return true;
        return std::any_of(o.absorbed_issue_ids.begin(), o.absorbed_issue_ids.end(),
                           [&](const std::string& id) { return contested_.contains(id); });
    }

    std::optional<Issue> objection_for(const Reconciliation::Outcome& o) const {
        if (auto it = objections_.find(o.issue.issue_id); it != objections_.end()) return it->second;
        for (const auto& id : o.absorbed_issue_ids) {
            if (auto it = objections_.find(id); it != objections_.end()) return it->second;
        }
        return std::nullopt;
    }

    void verification_loop(std::vector<Issue> pending);
    void hand_off();

    std::string_view content_;
    const RuleBase& base_;
    const OrchestratorConfig& config_;
    const QcDeps& deps_;
    QCReport& r_;

    std::set<std::string> filtered_;
    std::string prompt_;
    ModelSpec teacher_;
    ModelSpec student_;
    ModelSpec verifier_;
    std::vector<ReviewHandoff> handoff_;
    std::set<std::string> contested_;
    std::map<std::string, Issue> objections_;
};

void Run::execute(const ContentContext& ctx) {
    teacher_ = route(config_.policy, Risk::kHigh, Pass::kDetect);
    student_ = route(config_.policy, Risk::kLow, Pass::kDetect);
    verifier_ = route(config_.policy, Risk::kHigh, Pass::kVerify);

    const FilteredRuleSet fset = filter_rules(base_, ctx);
    r_.filtered_rule_ids = fset.rule_ids();
    filtered_.insert(r_.filtered_rule_ids.begin(), r_.filtered_rule_ids.end());
    prompt_ = render_system_prompt(fset, config_.template_id, deps_.templates);
    event("filter", {{"rulebase_version", fset.rulebase_version},
                     {"rules", r_.filtered_rule_ids.size()},
                     {"suppressed_rule_ids", fset.suppressed_rule_ids},
                     {"template_id", config_.template_id}});

    const std::string content(content_);
    auto teacher_future = std::async(std::launch::async, detect_with_retry, std::ref(deps_.client),
                                     std::cref(teacher_), std::cref(prompt_), std::cref(content),
                                     Origin::kTeacher, r_.content_id + "/teacher-detect");
    PassResult student_pass = detect_with_retry(deps_.client, student_, prompt_, content, Origin::kStudent,
                                                r_.content_id + "/student-detect");
    PassResult teacher_pass = teacher_future.get();

    for (std::size_t k = 0; k < teacher_pass.attempts.size(); ++k) {
        if (k > 0) ++r_.retries;
        record_call("teacher-detect", teacher_, teacher_pass.attempts[k]);
    }
    for (std::size_t k = 0; k < student_pass.attempts.size(); ++k) {
        if (k > 0) ++r_.retries;
        record_call("student-detect", student_, student_pass.attempts[k]);
    }

    if (!teacher_pass.issues && !student_pass.issues) {
        r_.degraded = true;
        Issue synthetic;
        synthetic.issue_id = "D-1";
        synthetic.recommendation = "Both detection passes failed; the whole content needs manual review.";
        synthetic.unanchored = true;
        synthetic.out_of_scope = true;
        event("degraded", {{"reason", "both detection passes failed"}});
        unresolve(synthetic, "detection failed");
        hand_off();
        return;
    }
    if (!teacher_pass.issues || !student_pass.issues) {
        r_.degraded = true;
        event("degraded", {{"reason", std::string(teacher_pass.issues ? "student" : "teacher") +
                                          " detection failed; continuing with the surviving pass"}});
    }

    // Unanchored issues skip diffing and go straight to review.
    auto split = [&](std::optional<std::vector<Issue>>& issues) {
        std::vector<Issue> anchored;
        if (!issues) return anchored;
        for (auto& i : *issues) {
            annotate(i);
            if (i.unanchored) {
                event("unanchored", {{"issue_id", i.issue_id}, {"rule_id", i.rule_id}});
                unresolve(i, "snippet not found in content");
            } else {
                anchored.push_back(i);
            }
        }
        return anchored;
    };
    const std::vector<Issue> teacher_issues = split(teacher_pass.issues);
    const std::vector<Issue> student_issues = split(student_pass.issues);

    ConsensusReport diff = diff_issues(teacher_issues, student_issues, config_.jaccard_threshold);
    r_.consensus.agreed = diff.agreed;
    r_.consensus.teacher_only = diff.teacher_only;
    r_.consensus.student_only = diff.student_only;
    r_.consensus.matched_pairs = diff.matched_pairs;
    event("diff", {{"agreed", diff.agreed.size()},
                   {"teacher_only", diff.teacher_only.size()},
                   {"student_only", diff.student_only.size()},
                   {"matched_pairs", r_.consensus.matched_pairs.size()}});

    for (const auto& i : diff.agreed) finalize(i, Resolution::kAgreed);
    for (const auto& [t, s] : diff.matched_pairs) dispose(s, "matched", t);

    std::vector<Issue> conflicts;
    auto take = [&](const std::vector<Issue>& v) {
        for (const auto& i : v) {
            const Rule* rule = base_.find(i.rule_id);
            if (rule && rule->always_valid) {
                event("always_valid", {{"issue_id", i.issue_id}, {"rule_id", i.rule_id}});
                finalize(i, Resolution::kAlwaysValid);
            } else {
                conflicts.push_back(i);
            }
        }
    };
    take(diff.teacher_only);
    take(diff.student_only);

    verification_loop(std::move(conflicts));
    hand_off();
}

void Run::verification_loop(std::vector<Issue> pending) {
    for (int round = 1; !pending.empty(); ++round) {
        if (round > config_.max_rounds) {
            for (auto& p : pending) {
                const bool contested = contested_.contains(p.issue_id);
                std::optional<Issue> objection;
                if (auto it = objections_.find(p.issue_id); it != objections_.end()) objection = it->second;
                unresolve(p, contested ? "still contested after the last round" : "round budget exhausted",
                          std::nullopt, objection);
            }
            return;
        }

        // Teacher verification of everything still open.
        const std::string label = "verify-" + std::to_string(round);
        Attempt a;
        a.request_id = r_.content_id + "/" + label;
        std::vector<Verdict> verdicts;
        try {
            VerifyOptions opts;
            opts.pass_index = round + 1;
            opts.id_prefix = "V" + std::to_string(round) + "-";
            opts.request_id = a.request_id;
            verdicts = verify_issues(deps_.client, verifier_,
                                     build_verification_prompt(pending, content_, prompt_), opts);
            a.ok = true;
            a.issues = verdicts.size();
            record_call(label, verifier_, a);
        } catch (const Error& e) {
            a.error_code = e.code();
            a.error = e.what();
            record_call(label, verifier_, a);
            for (auto& p : pending) unresolve(p, "verification failed: " + e.code());
            return;
        }
        for (auto& v : verdicts) annotate(v.issue);

        Reconciliation rec = reconcile_verdicts(pending, verdicts, config_.jaccard_threshold);
        event("verification", {{"round", round},
                               {"conflicts", pending.size()},
                               {"verdicts", verdicts.size()},
                               {"valid", rec.valid.size()},
                               {"rejected", rec.rejected.size()},
                               {"unmatched", rec.unmatched_conflicts.size()},
                               {"new", rec.new_verdicts.size()}});

        for (auto& o : rec.valid) {
            record_absorption(o, round);
            if (o.issue.unanchored) {
                unresolve(o.issue, "verified snippet not found in content", o.verdict);
            } else if (any_contested(o)) {
                unresolve(o.issue, "teacher and student still disagree", o.verdict, objection_for(o));
            } else {
                finalize(o.issue, Resolution::kVerified, o.verdict, o.absorbed_issue_ids);
            }
        }
        for (auto& o : rec.rejected) {
            record_absorption(o, round);
            dispose(o.issue.issue_id, "rejected", {}, o.verdict.justification);
            Verdict v = o.verdict;
            v.issue = o.issue;
            r_.rejected.push_back(v);
            event("rejected", {{"issue_id", o.issue.issue_id},
                               {"rule_id", o.issue.rule_id},
                               {"justification", o.verdict.justification}});
        }
        for (auto& c : rec.unmatched_conflicts) {
            unresolve(c, "verifier returned no verdict", std::nullopt, objections_.contains(c.issue_id)
                                                                           ? std::optional(objections_.at(c.issue_id))
                                                                           : std::nullopt);
        }

        // Verdicts about issues nobody flagged before.
        std::vector<Verdict> novel;
        for (auto& v : rec.new_verdicts) {
            if (auto known = known_as(v.issue)) {
                dispose(v.issue.issue_id, "absorbed", *known, "restates an issue already settled");
                continue;
            }
            if (!v.is_valid) {
                dispose(v.issue.issue_id, "rejected", {}, v.justification);
                r_.rejected.push_back(v);
                continue;
            }
            if (v.issue.unanchored) {
                unresolve(v.issue, "verified snippet not found in content", v);
                continue;
            }
            novel.push_back(v);
        }
        if (novel.empty()) return;

        // Student cross-check of the verifier's new issues.
        std::vector<Issue> novel_issues;
        for (const auto& v : novel) novel_issues.push_back(v.issue);
        const std::string xlabel = "cross-check-" + std::to_string(round);
        Attempt x;
        x.request_id = r_.content_id + "/" + xlabel;
        std::vector<Verdict> student_verdicts;
        try {
            VerifyOptions opts;
            opts.pass_index = round + 1;
            opts.id_prefix = "X" + std::to_string(round) + "-";
            opts.request_id = x.request_id;
            student_verdicts = verify_issues(deps_.client, student_,
                                             build_verification_prompt(novel_issues, content_, prompt_), opts);
            x.ok = true;
            x.issues = student_verdicts.size();
            record_call(xlabel, student_, x);
        } catch (const Error& e) {
            x.error_code = e.code();
            x.error = e.what();
            record_call(xlabel, student_, x);
            for (auto& v : novel) unresolve(v.issue, "cross-check failed: " + e.code(), v);
            return;
        }
        for (auto& v : student_verdicts) {
            v.issue.origin = Origin::kStudent;
            annotate(v.issue);
        }

        Reconciliation cross = reconcile_verdicts(novel_issues, student_verdicts, config_.jaccard_threshold);
        for (const auto& o : cross.valid) fold_verdict(o);
        for (const auto& o : cross.rejected) fold_verdict(o);
        std::map<std::string, const Verdict*> student_says;  // novel issue id -> student verdict
        for (const auto& o : cross.valid) {
            if (o.absorbed_issue_ids.empty()) student_says[o.issue.issue_id] = &o.verdict;
            for (const auto& id : o.absorbed_issue_ids) student_says[id] = &o.verdict;
        }
        for (const auto& o : cross.rejected) {
            if (o.absorbed_issue_ids.empty()) student_says[o.issue.issue_id] = &o.verdict;
            for (const auto& id : o.absorbed_issue_ids) student_says[id] = &o.verdict;
        }

        std::vector<Issue> next;
        std::size_t confirmed = 0;
        for (const auto& v : novel) {
            auto it = student_says.find(v.issue.issue_id);
            if (it != student_says.end() && it->second->is_valid) {
                ++confirmed;
                finalize(v.issue, Resolution::kCrossChecked, v);
                continue;
            }
            contested_.insert(v.issue.issue_id);
            if (it != student_says.end()) {
                Issue objection = it->second->issue;
                objection.recommendation = it->second->justification;
                objections_[v.issue.issue_id] = objection;
            }
            next.push_back(v.issue);
        }
        // Issues the student raised on its own get the usual teacher check next round.
        for (auto& v : cross.new_verdicts) {
            if (auto known = known_as(v.issue)) {
                dispose(v.issue.issue_id, "absorbed", *known, "restates an issue already settled");
            } else if (!v.is_valid) {
                dispose(v.issue.issue_id, "rejected", {}, v.justification);
                r_.rejected.push_back(v);
            } else if (v.issue.unanchored) {
                unresolve(v.issue, "snippet not found in content");
            } else {
                next.push_back(v.issue);
            }
        }
        event("cross_check", {{"round", round},
                              {"issues", novel.size()},
                              {"confirmed", confirmed},
                              {"contested", novel.size() - confirmed},
                              {"student_new", cross.new_verdicts.size()}});
        pending = std::move(next);
    }
}

void Run::hand_off() {
    if (deps_.queue == nullptr) return;
    for (auto& h : handoff_) {
        ReviewItem item;
        item.content_id = r_.content_id;
        item.issue = h.issue;
        item.teacher_position = h.teacher_position;
        item.student_position = h.student_position;
        item.unanchored = h.issue.unanchored;
        item.reason = h.reason;
        item.created_at = now();
        try {
            const std::string id = deps_.queue->enqueue(std::move(item));
            r_.review_item_ids.push_back(id);
            r_.dispositions[h.issue.issue_id].ref = id;
            event("enqueue", {{"item_id", id}, {"issue_id", h.issue.issue_id}, {"reason", h.reason}});
        } catch (const Error& e) {
            event("enqueue_failed", {{"issue_id", h.issue.issue_id}, {"error_code", e.code()}, {"error", e.what()}});
        }
    }
}

} // namespace

QCReport run_qc(std::string_view content, const ContentContext& ctx, const RuleBase& base,
                const OrchestratorConfig& config, const QcDeps& deps, std::optional<std::string> content_id) {
    if (text::trim(content).empty()) throw SchemaError("content must not be empty");
    if (config.max_rounds < 0) throw MisconfiguredPolicy("max_rounds must be >= 0");
    if (!(config.jaccard_threshold >= 0.0 && config.jaccard_threshold <= 1.0)) {
        throw MisconfiguredPolicy("jaccard_threshold must lie in [0, 1]");
    }
    (void)deps.templates.get(config.template_id);

    QCReport report;
    report.content_id = content_id ? *content_id : "c-" + text::fnv1a_hex(content);
    report.context = ctx;
    report.rulebase_version = base.version();
    Run(content, base, config, deps, report).execute(ctx);
    return report;
}

} // namespace qc
