#include "qc/errors.hpp"
#include "qc/service.hpp"

#include <httplib.h>

namespace qc {

using nlohmann::json;

namespace {

void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

/// Runs a handler and turns every failure into an ApiError body.
template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
        try {
            fn(req, res);
        } catch (const Error& e) {
            reply(res, http_status_for(e), api_error(e.code(), e.what()));
        } catch (const json::exception& e) {
            reply(res, 400, api_error("SchemaError", e.what()));
        } catch (const std::exception& e) {
            reply(res, 500, api_error("InternalError", e.what()));
        }
    };
}

json parse_body(const httplib::Request& req) {
    try {
        json j = json::parse(req.body);
        if (!j.is_object()) throw SchemaError("request body must be a JSON object");
        return j;
    } catch (const json::parse_error& e) {
        throw JsonError(std::string("request body is not valid JSON: ") + e.what());
    }
}

std::optional<std::string> param(const httplib::Request& req, const char* key) {
    if (!req.has_param(key)) return std::nullopt;
    return req.get_param_value(key);
}

std::uint64_t to_u64(const std::string& s, const char* what) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw SchemaError(std::string(what) + " must be a non-negative integer");
    }
}

} // namespace

struct HttpServer::Impl {
    Engine& engine;
    httplib::Server server;

    explicit Impl(Engine& e) : engine(e) { mount(); }

    void mount() {
        server.Get("/health", guarded([](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, {{"status", "ok"}});
        }));

        server.Post("/qc/run", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const json body = parse_body(req);
            auto content = body.find("content");
            if (content == body.end() || !content->is_string()) {
                throw SchemaError("\"content\" must be a string");
            }
            ContentContext ctx;
            if (auto c = body.find("context"); c != body.end() && !c->is_null()) ctx = c->get<ContentContext>();
            std::optional<std::string> content_id;
            if (auto c = body.find("content_id"); c != body.end() && !c->is_null()) {
                content_id = c->get<std::string>();
            }
            const std::string id = engine.submit(content->get<std::string>(), ctx, content_id);
            reply(res, 202, {{"report_id", id}, {"status", "running"}});
        }));

        server.Get("/qc/report/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.path_params.at("id");
            const ReportStatus st = engine.report(id);
            if (st.state == ReportStatus::State::kUnknown) throw NotFound("no report " + id);
            reply(res, 200, st.body);
        }));

        server.Get("/review/pending", guarded([this](const httplib::Request& req, httplib::Response& res) {
            ReviewFilter f;
            f.content_id = param(req, "content_id");
            f.rule_id = param(req, "rule_id");
            reply(res, 200, {{"items", engine.queue().list_pending(f)}});
        }));

        server.Get("/review/audit", guarded([this](const httplib::Request& req, httplib::Response& res) {
            EventRange r;
            if (auto v = param(req, "first_seq")) r.first_seq = to_u64(*v, "first_seq");
            if (auto v = param(req, "last_seq")) r.last_seq = to_u64(*v, "last_seq");
            if (auto v = param(req, "since")) r.since = text::from_iso8601(*v);
            if (auto v = param(req, "until")) r.until = text::from_iso8601(*v);
            reply(res, 200, {{"events", engine.queue().export_audit(r)}});
        }));

        server.Get("/review/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.path_params.at("id");
            auto item = engine.queue().get(id);
            if (!item) throw NotFound("no review item " + id);
            reply(res, 200, *item);
        }));

        server.Post("/review/:id/decision", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.path_params.at("id");
            const HumanDecision decision = parse_body(req).get<HumanDecision>();
            reply(res, 200, engine.queue().decide(id, decision));
        }));

        server.Post("/rules/ingest", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const json body = parse_body(req);
            auto doc_it = body.find("document_json");
            if (doc_it == body.end()) throw SchemaError("\"document_json\" is required");
            const RuleDocument doc = doc_it->is_string() ? parse_rule_document(doc_it->get<std::string>())
                                                         : rule_document_from_json(*doc_it);
            const IngestSidecar sidecar = body.get<IngestSidecar>();
            const IngestResult out = engine.ingest(doc, sidecar);
            reply(res, 200, {{"document", out.document_slug},
                             {"rule_ids", out.rule_ids},
                             {"rulebase_version", out.rulebase_version}});
        }));

        server.Get("/rules", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const ContentContext ctx = context_from_params(req.params);
            reply(res, 200, to_json(filter_rules(engine.rules().snapshot(), ctx)));
        }));

        server.Get("/rules/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.path_params.at("id");
            auto rule = lookup(engine.rules().snapshot(), id);
            if (!rule) throw NotFound("no rule " + id);
            reply(res, 200, *rule);
        }));

        server.Get("/usage", guarded([this](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, engine.usage());
        }));

        if (!engine.config().ui_dir.empty()) server.set_mount_point("/ui", engine.config().ui_dir);

        server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
            if (!res.body.empty()) return;
            const std::string code = res.status == 404 ? "NotFound" : "HttpError";
            reply(res, res.status, api_error(code, "no route for " + req.method + " " + req.path));
        });
    }
};

HttpServer::HttpServer(Engine& engine) : impl_(std::make_unique<Impl>(engine)) {}
HttpServer::~HttpServer() = default;

bool HttpServer::listen(const std::string& host, int port) {
    return impl_->server.listen(host, port);
}

int HttpServer::bind_to_any_port(const std::string& host) {
    return impl_->server.bind_to_any_port(host);
}

bool HttpServer::listen_after_bind() {
    return impl_->server.listen_after_bind();
}

void HttpServer::wait_until_ready() const {
    impl_->server.wait_until_ready();
}

void HttpServer::stop() {
    impl_->server.stop();
}

} // namespace qc
