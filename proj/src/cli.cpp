#include "qc/errors.hpp"
#include "qc/service.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace qc {

using nlohmann::json;

namespace {

std::string default_config_path() {
    const char* env = std::getenv("QC_CONFIG");
    return env != nullptr && *env != '\0' ? env : "qc.ini";
}

json read_json_file(const std::string& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw JsonError(path + ": " + e.what());
    }
}

std::string one_line(std::string_view s, std::size_t width) {
    std::string t = text::normalize_whitespace(s);
    if (t.size() > width) t = t.substr(0, width - 3) + "...";
    return t;
}

std::string with_thousands(std::int64_t v) {
    std::string digits = std::to_string(v < 0 ? -v : v);
    for (int i = static_cast<int>(digits.size()) - 3; i > 0; i -= 3) digits.insert(static_cast<std::size_t>(i), ",");
    return (v < 0 ? "-" : "") + digits;
}

struct ContextFlags {
    std::string json_text;
    std::string ip, country, use_case, topic, content_type;
    std::vector<std::string> subtasks;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--context", json_text, "content context as a JSON object");
        cmd->add_option("--ip", ip, "IP / brand");
        cmd->add_option("--country", country, "country");
        cmd->add_option("--use-case", use_case, "use case");
        cmd->add_option("--topic", topic, "topic");
        cmd->add_option("--subtask", subtasks, "subtask (repeatable)");
        cmd->add_option("--content-type", content_type, "content type");
    }

    ContentContext build() const {
        ContentContext ctx;
        if (!json_text.empty()) {
            try {
                ctx = json::parse(json_text).get<ContentContext>();
            } catch (const json::exception& e) {
                throw SchemaError(std::string("--context: ") + e.what());
            }
        }
        if (!ip.empty()) ctx.ip = ip;
        if (!country.empty()) ctx.country = country;
        if (!use_case.empty()) ctx.use_case = use_case;
        if (!topic.empty()) ctx.topic = topic;
        if (!content_type.empty()) ctx.content_type = content_type;
        if (!subtasks.empty()) ctx.subtasks = std::set<std::string>(subtasks.begin(), subtasks.end());
        return ctx;
    }
};

void print_issue_rows(std::ostream& out, const std::vector<Issue>& issues, const std::string& tag) {
    for (const auto& i : issues) {
        out << "  " << std::left << std::setw(14) << i.rule_id << std::setw(14) << tag << '"'
            << one_line(i.context_snippet, 48) << "\"  " << one_line(i.recommendation, 60) << '\n';
    }
}

void print_report(std::ostream& out, const std::string& report_id, const QCReport& r) {
    out << "report " << report_id << "  content " << r.content_id << "  rulebase v" << r.rulebase_version
        << "  rules " << r.filtered_rule_ids.size() << (r.degraded ? "  (degraded)" : "") << '\n';
    out << "final issues (" << r.final_issues.size() << ")\n";
    for (const auto& f : r.final_issues) {
        std::string tag(to_string(f.resolution));
        if (!f.absorbed_issue_ids.empty()) tag += "+" + std::to_string(f.absorbed_issue_ids.size());
        print_issue_rows(out, {f.issue}, tag);
    }
    out << "rejected (" << r.rejected.size() << ")\n";
    for (const auto& v : r.rejected) print_issue_rows(out, {v.issue}, "rejected");
    out << "unresolved for review (" << r.unresolved_for_review.size() << ")\n";
    print_issue_rows(out, r.unresolved_for_review, "review");
    out << "model calls " << r.model_calls << " (retries " << r.retries << ")\n";
}

void print_items(std::ostream& out, const std::vector<ReviewItem>& items) {
    if (items.empty()) {
        out << "no pending review items\n";
        return;
    }
    out << std::left << std::setw(12) << "item" << std::setw(14) << "rule" << std::setw(22) << "content"
        << "snippet / reason\n";
    for (const auto& i : items) {
        out << std::left << std::setw(12) << i.item_id << std::setw(14) << i.issue.rule_id << std::setw(22)
            << one_line(i.content_id, 20) << '"' << one_line(i.issue.context_snippet, 40) << "\"  "
            << i.reason << (i.unanchored ? " [unanchored]" : "") << '\n';
    }
}

void print_usage_table(std::ostream& out, const UsageSummary& s) {
    std::ostringstream cost;
    cost << std::fixed << std::setprecision(2) << s.cost_per_request << " cents";
    std::ostringstream tpr;
    tpr << std::fixed << std::setprecision(0) << s.tokens_per_request;
    out << std::left << std::setw(22) << "Total tokens" << with_thousands(s.total_tokens) << '\n'
        << std::setw(22) << "Total requests" << with_thousands(s.total_requests) << '\n'
        << std::setw(22) << "Latency (P50)" << s.p50_latency_ms << " ms\n"
        << std::setw(22) << "Cost per request" << cost.str() << '\n'
        << std::setw(22) << "Tokens per request" << tpr.str() << '\n';
}

std::vector<eval::LabeledSample> load_gold(const std::string& path, std::string format, int levels,
                                           std::ostream& err) {
    if (format == "auto") {
        std::string first;
        {
            std::istringstream in(read_file(path));
            while (std::getline(in, first) && text::trim(first).empty()) {
            }
        }
        json j;
        try {
            j = json::parse(first);
        } catch (const json::exception&) {
            throw SchemaError(path + " does not start with a JSON record");
        }
        format = j.contains("errors") ? "cspelling" : "aireg";
    }
    if (format == "cspelling") return eval::load_cspelling_fixture(path);
    if (format != "aireg") throw SchemaError("--format must be auto, aireg or cspelling");
    auto fixture = eval::load_aireg_fixture(path, levels);
    for (const auto& w : fixture.warnings) err << "warning: " << w << '\n';
    return fixture.samples;
}

} // namespace

int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Content quality-control engine"};
    app.name("qc");
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path = default_config_path();
    bool as_json = false;
    app.add_option("-c,--config", config_path, "service config (INI); defaults to $QC_CONFIG or qc.ini");
    app.add_flag("--json", as_json, "print JSON instead of tables");

    // run
    auto* run = app.add_subcommand("run", "run the QC pipeline on one piece of content");
    std::string content_text, content_file, content_id;
    ContextFlags run_ctx;
    run->add_option("--content", content_text, "content text");
    run->add_option("--content-file", content_file, "file holding the content")->check(CLI::ExistingFile);
    run->add_option("--content-id", content_id, "stable id for the content");
    run_ctx.add_to(run);

    // ingest-rules
    auto* ingest = app.add_subcommand("ingest-rules", "index an extracted rule document");
    std::string document_path, sidecar_path, id_scheme;
    ingest->add_option("--document", document_path, "extraction JSON document")->required()->check(CLI::ExistingFile);
    ingest->add_option("--sidecar", sidecar_path, "JSON with default_tags, module_map, section_tags, id_scheme")
        ->check(CLI::ExistingFile);
    ingest->add_option("--id-scheme", id_scheme, "qualified or ordinal");

    // rules
    auto* rules = app.add_subcommand("rules", "list the rules that apply to a context");
    ContextFlags rules_ctx;
    rules_ctx.add_to(rules);

    // eval
    auto* ev = app.add_subcommand("eval", "score predictions against gold labels");
    std::string gold_path, pred_path, format = "auto";
    int levels = 5;
    bool strict = false;
    ev->add_option("--gold", gold_path, "gold JSON lines")->required()->check(CLI::ExistingFile);
    ev->add_option("--pred", pred_path, "prediction JSON lines")->required()->check(CLI::ExistingFile);
    ev->add_option("--format", format, "auto, aireg or cspelling");
    ev->add_option("--levels", levels, "score scale 1..k for agreement statistics");
    ev->add_flag("--strict", strict, "exit 3 when a core metric is undefined");

    // review
    auto* review = app.add_subcommand("review", "human review queue");
    review->require_subcommand(1);
    review->fallthrough();
    auto* review_list = review->add_subcommand("list", "list pending items");
    std::string filter_content, filter_rule;
    review_list->add_option("--content-id", filter_content, "only this content");
    review_list->add_option("--rule-id", filter_rule, "only this rule");

    auto* review_decide = review->add_subcommand("decide", "record a decision on one item");
    std::string item_id, verdict, justification, reviewer, update_json, amend_text, update_rule, scope_note;
    bool suppress = false, always_valid = false;
    ContextFlags suppress_ctx;
    review_decide->add_option("item_id", item_id, "review item id")->required();
    review_decide->add_option("--verdict", verdict, "accept_violation or reject_flag")->required();
    review_decide->add_option("--justification", justification, "why (required)")->required();
    review_decide->add_option("--reviewer", reviewer, "reviewer id")->required();
    review_decide->add_option("--update", update_json, "knowledge update as a JSON object");
    review_decide->add_flag("--suppress", suppress, "suppress the rule in the given context");
    review_decide->add_flag("--always-valid", always_valid, "mark the rule always valid");
    review_decide->add_option("--amend", amend_text, "amended recommendation for the rule");
    review_decide->add_option("--rule", update_rule, "rule to update (defaults to the item's rule)");
    review_decide->add_option("--scope-note", scope_note, "free-text note stored with the update");
    suppress_ctx.add_to(review_decide);

    auto* review_audit = review->add_subcommand("audit", "export review events");
    std::uint64_t first_seq = 0, last_seq = 0;
    review_audit->add_option("--first-seq", first_seq, "first event sequence number");
    review_audit->add_option("--last-seq", last_seq, "last event sequence number");

    // usage
    auto* usage = app.add_subcommand("usage", "token, latency and cost summary");

    // serve
    auto* serve = app.add_subcommand("serve", "start the HTTP API");
    std::string listen;
    serve->add_option("--listen", listen, "host:port (overrides config and QC_LISTEN)");

    // mock-fingerprint
    auto* fingerprint = app.add_subcommand("mock-fingerprint", "fingerprint used to key mock script entries");
    std::string system_file, user_file;
    fingerprint->add_option("--system-file", system_file, "system instruction")->required()->check(CLI::ExistingFile);
    fingerprint->add_option("--user-file", user_file, "user content")->required()->check(CLI::ExistingFile);

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (ev->parsed()) {
            const auto golds = load_gold(gold_path, format, levels, err);
            const auto preds = eval::load_predictions(pred_path);
            const auto report = eval::evaluate(golds, preds, {levels});
            if (as_json) {
                out << eval::to_json(report).dump(2) << '\n';
            } else {
                out << eval::format_table(report);
            }
            if (strict && report.has_undefined_core_metric()) {
                err << "error: a core metric is undefined (--strict)\n";
                return 3;
            }
            return 0;
        }
        if (fingerprint->parsed()) {
            out << request_fingerprint(read_file(system_file), read_file(user_file)) << '\n';
            return 0;
        }

        Engine engine(ServiceConfig::load(config_path));

        if (run->parsed()) {
            if (content_text.empty() == content_file.empty()) {
                throw SchemaError("give exactly one of --content or --content-file");
            }
            const std::string content = content_file.empty() ? content_text : read_file(content_file);
            auto [id, report] = engine.run(content, run_ctx.build(),
                                           content_id.empty() ? std::nullopt : std::optional(content_id));
            if (as_json) {
                json j = to_json(report);
                j["report_id"] = id;
                out << j.dump(2) << '\n';
            } else {
                print_report(out, id, report);
            }
            return 0;
        }
        if (ingest->parsed()) {
            const RuleDocument doc = parse_rule_document(read_file(document_path));
            IngestSidecar sidecar;
            if (!sidecar_path.empty()) {
                try {
                    sidecar = read_json_file(sidecar_path).get<IngestSidecar>();
                } catch (const json::exception& e) {
                    throw SchemaError(sidecar_path + ": " + e.what());
                }
            }
            if (!id_scheme.empty()) sidecar.options.id_scheme = id_scheme_from_string(id_scheme);
            const IngestResult r = engine.ingest(doc, sidecar);
            if (as_json) {
                out << json{{"document", r.document_slug},
                            {"rule_ids", r.rule_ids},
                            {"rulebase_version", r.rulebase_version}}
                           .dump(2)
                    << '\n';
            } else {
                out << "ingested " << r.rule_ids.size() << " rules from " << r.document_slug << " (rulebase v"
                    << r.rulebase_version << ")\n";
                for (const auto& id : r.rule_ids) out << "  " << id << '\n';
            }
            return 0;
        }
        if (rules->parsed()) {
            const FilteredRuleSet fset = filter_rules(engine.rules().snapshot(), rules_ctx.build());
            if (as_json) {
                out << to_json(fset).dump(2) << '\n';
                return 0;
            }
            out << fset.rules.size() << " rules (rulebase v" << fset.rulebase_version << ")\n";
            for (const auto& r : fset.rules) {
                out << "  " << std::left << std::setw(16) << r.rule_id << to_string(r.module) << "  "
                    << std::setw(9) << to_string(r.polarity) << one_line(r.text, 70) << '\n';
            }
            out << "trace\n";
            for (const auto& t : fset.trace) {
                out << "  " << std::left << std::setw(9) << to_string(t.level) << std::setw(20)
                    << (t.query_value.is_null() ? std::string("(open)") : t.query_value.dump()) << t.rules_in
                    << " -> " << t.rules_out << '\n';
            }
            return 0;
        }
        if (review_list->parsed()) {
            ReviewFilter f;
            if (!filter_content.empty()) f.content_id = filter_content;
            if (!filter_rule.empty()) f.rule_id = filter_rule;
            const auto items = engine.queue().list_pending(f);
            if (as_json) {
                out << json{{"items", items}}.dump(2) << '\n';
            } else {
                print_items(out, items);
            }
            return 0;
        }
        if (review_decide->parsed()) {
            HumanDecision d;
            d.verdict = decision_verdict_from_string(verdict);
            d.justification = justification;
            d.reviewer_id = reviewer;
            const int actions = (update_json.empty() ? 0 : 1) + (suppress ? 1 : 0) + (always_valid ? 1 : 0) +
                                (amend_text.empty() ? 0 : 1);
            if (actions > 1) throw SchemaError("give at most one of --update, --suppress, --always-valid, --amend");
            if (!update_json.empty()) {
                try {
                    d.knowledge_update = json::parse(update_json).get<KnowledgeUpdate>();
                } catch (const json::exception& e) {
                    throw SchemaError(std::string("--update: ") + e.what());
                }
            } else if (actions == 1) {
                KnowledgeUpdate u;
                if (update_rule.empty()) {
                    auto item = engine.queue().get(item_id);
                    if (!item) throw NotFound("no review item " + item_id);
                    update_rule = item->issue.rule_id;
                }
                u.rule_id = update_rule;
                u.scope_note = scope_note;
                if (suppress) {
                    u.action = FeedbackAction::kSuppressInContext;
                    u.context = suppress_ctx.build();
                } else if (always_valid) {
                    u.action = FeedbackAction::kMarkAlwaysValid;
                } else {
                    u.action = FeedbackAction::kAmendRecommendation;
                    u.amended_recommendation = amend_text;
                }
                d.knowledge_update = u;
            }
            const ReviewItem item = engine.queue().decide(item_id, d);
            if (as_json) {
                out << json(item).dump(2) << '\n';
            } else {
                out << item.item_id << " " << to_string(item.status) << " by " << reviewer << '\n';
                if (d.knowledge_update) {
                    out << "applied " << to_string(d.knowledge_update->action) << " to "
                        << d.knowledge_update->rule_id << " (rulebase v" << engine.rules().snapshot().version()
                        << ")\n";
                }
            }
            return 0;
        }
        if (review_audit->parsed()) {
            EventRange r;
            if (review_audit->count("--first-seq") > 0) r.first_seq = first_seq;
            if (review_audit->count("--last-seq") > 0) r.last_seq = last_seq;
            for (const auto& e : engine.queue().export_audit(r)) out << json(e).dump() << '\n';
            return 0;
        }
        if (usage->parsed()) {
            const UsageSummary s = engine.usage();
            if (as_json) {
                out << json(s).dump(2) << '\n';
            } else {
                print_usage_table(out, s);
            }
            return 0;
        }
        if (serve->parsed()) {
            auto [host, port] = listen.empty() ? std::pair{engine.config().listen_host, engine.config().listen_port}
                                               : parse_listen_address(listen);
            HttpServer server(engine);
            out << "listening on " << host << ":" << port << std::endl;
            if (!server.listen(host, port)) {
                err << "error: cannot listen on " << host << ":" << port << '\n';
                return 1;
            }
            return 0;
        }
    } catch (const Error& e) {
        err << "error: " << e.code() << ": " << e.what() << '\n';
        return 1;
    }
    return 2;
}

} // namespace qc
