#include "qc/service.hpp"

#include "qc/errors.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <sstream>

namespace qc {

using nlohmann::json;
namespace fs = std::filesystem;
namespace pt = boost::property_tree;

std::string_view to_string(BackendMode m) {
    switch (m) {
    case BackendMode::kMock: return "mock";
    case BackendMode::kLive: return "live";
    case BackendMode::kRecord: return "record";
    case BackendMode::kReplay: return "replay";
    }
    return "mock";
}

BackendMode backend_mode_from_string(std::string_view s) {
    if (s == "mock") return BackendMode::kMock;
    if (s == "live") return BackendMode::kLive;
    if (s == "record") return BackendMode::kRecord;
    if (s == "replay") return BackendMode::kReplay;
    throw ConfigError("backend mode must be mock, live, record or replay (got \"" + std::string(s) + "\")");
}

std::pair<std::string, int> parse_listen_address(std::string_view s) {
    const auto colon = s.rfind(':');
    if (colon == std::string_view::npos) throw ConfigError("listen address must look like host:port");
    std::string host(s.substr(0, colon));
    if (host.empty()) host = "127.0.0.1";
    int port = 0;
    try {
        std::size_t used = 0;
        const std::string digits(s.substr(colon + 1));
        port = std::stoi(digits, &used);
        if (used != digits.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
        throw ConfigError("invalid port in listen address \"" + std::string(s) + "\"");
    }
    if (port < 0 || port > 65535) throw ConfigError("port out of range in \"" + std::string(s) + "\"");
    return {host, port};
}

// ── Config ───────────────────────────────────────────────────────────────────

namespace {

std::string resolve(const fs::path& base, const std::string& p) {
    if (p.empty()) return p;
    const fs::path path(p);
    return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

/// Like ptree::get with a default, but a present value that does not convert
/// is an error instead of silently falling back.
template <typename T>
T get_or(const pt::ptree& tree, const std::string& key, const T& fallback) {
    if (!tree.get_optional<std::string>(key)) return fallback;
    return tree.get<T>(key);
}

ModelSpec spec_from(const pt::ptree& tree, const std::string& section, bool teacher) {
    const auto provider = tree.get_optional<std::string>(section + ".provider");
    const auto model = tree.get_optional<std::string>(section + ".model");
    if (!provider || !model) throw ConfigError("[" + section + "] needs provider and model");
    ModelSpec s = teacher ? ModelSpec::teacher(*provider, *model) : ModelSpec::student(*provider, *model);
    s.temperature = get_or<double>(tree, section + ".temperature", s.temperature);
    s.max_output_tokens = get_or<int>(tree, section + ".max_output_tokens", s.max_output_tokens);
    if (auto role = tree.get_optional<std::string>(section + ".role")) s.role_hint = role_hint_from_string(*role);
    return s;
}

} // namespace

ServiceConfig ServiceConfig::load(const std::string& path) {
    pt::ptree tree;
    try {
        pt::read_ini(path, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("cannot read config: ") + e.what());
    }
    const fs::path base = fs::absolute(path).parent_path();
    ServiceConfig c;
    try {
        if (auto listen = tree.get_optional<std::string>("service.listen")) {
            std::tie(c.listen_host, c.listen_port) = parse_listen_address(*listen);
        }
        c.data_dir = resolve(base, tree.get<std::string>("service.data_dir", c.data_dir));
        c.max_concurrent_runs = get_or<int>(tree, "service.max_concurrent_runs", c.max_concurrent_runs);
        c.ui_dir = resolve(base, tree.get<std::string>("service.ui_dir", ""));

        c.rules_dir = resolve(base, tree.get<std::string>("rules.dir", ""));
        c.templates_dir = resolve(base, tree.get<std::string>("rules.templates_dir", ""));
        c.pricing_path = resolve(base, tree.get<std::string>("pricing.path", ""));

        c.backend = backend_mode_from_string(tree.get<std::string>("backend.mode", "mock"));
        c.mock_script = resolve(base, tree.get<std::string>("backend.mock_script", ""));
        c.base_url = tree.get<std::string>("backend.base_url", "");
        c.api_key_env = tree.get<std::string>("backend.api_key_env", c.api_key_env);
        c.cassette = resolve(base, tree.get<std::string>("backend.cassette", ""));
        c.timeout_ms = get_or<int>(tree, "backend.timeout_ms", c.timeout_ms);
        c.max_in_flight = get_or<int>(tree, "backend.max_in_flight", c.max_in_flight);

        c.orchestrator.policy.teacher = spec_from(tree, "teacher", true);
        c.orchestrator.policy.lightweight = spec_from(tree, "student", false);
        c.orchestrator.max_rounds = get_or<int>(tree, "orchestrator.max_rounds", c.orchestrator.max_rounds);
        c.orchestrator.jaccard_threshold =
            get_or<double>(tree, "orchestrator.jaccard_threshold", c.orchestrator.jaccard_threshold);
        c.orchestrator.template_id = tree.get<std::string>("orchestrator.template_id", c.orchestrator.template_id);
    } catch (const pt::ptree_error& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    } catch (const Error& e) {
        if (e.code() == "ConfigError") throw;
        throw ConfigError(e.what());
    }
    if (const char* listen = std::getenv("QC_LISTEN"); listen != nullptr && *listen != '\0') {
        std::tie(c.listen_host, c.listen_port) = parse_listen_address(listen);
    }
    return c;
}

void ServiceConfig::validate() const {
    auto need_dir = [](const std::string& p, const char* what) {
        if (p.empty()) throw ConfigError(std::string(what) + " is not configured");
        if (!fs::is_directory(p)) throw ConfigError(std::string(what) + " does not exist: " + p);
    };
    auto need_file = [](const std::string& p, const char* what) {
        if (p.empty()) throw ConfigError(std::string(what) + " is not configured");
        if (!fs::is_regular_file(p)) throw ConfigError(std::string(what) + " does not exist: " + p);
    };
    need_dir(rules_dir, "rules.dir");
    if (!templates_dir.empty()) need_dir(templates_dir, "rules.templates_dir");
    if (!pricing_path.empty()) need_file(pricing_path, "pricing.path");
    if (!ui_dir.empty()) need_dir(ui_dir, "service.ui_dir");
    if (max_concurrent_runs < 1) throw ConfigError("service.max_concurrent_runs must be >= 1");
    if (timeout_ms < 1) throw ConfigError("backend.timeout_ms must be >= 1");
    if (!orchestrator.policy.teacher || !orchestrator.policy.lightweight) {
        throw ConfigError("both [teacher] and [student] models are required");
    }
    switch (backend) {
    case BackendMode::kMock: need_file(mock_script, "backend.mock_script"); break;
    case BackendMode::kReplay: need_file(cassette, "backend.cassette"); break;
    case BackendMode::kRecord:
        if (cassette.empty()) throw ConfigError("backend.cassette is not configured");
        [[fallthrough]];
    case BackendMode::kLive: {
        if (base_url.empty()) throw ConfigError("backend.base_url is not configured");
        const char* key = std::getenv(api_key_env.c_str());
        if (key == nullptr || *key == '\0') throw ConfigError("environment variable " + api_key_env + " is not set");
        break;
    }
    }
}

// ── Engine ───────────────────────────────────────────────────────────────────

namespace {

std::shared_ptr<Backend> make_backend(const ServiceConfig& c) {
    switch (c.backend) {
    case BackendMode::kMock: return std::make_shared<MockBackend>(MockBackend::from_file(c.mock_script));
    case BackendMode::kReplay: return std::make_shared<ReplayBackend>(c.cassette);
    case BackendMode::kLive: return std::make_shared<HttpBackend>(HttpBackend::Options{c.base_url, "/v1/chat/completions", c.api_key_env});
    case BackendMode::kRecord:
        return std::make_shared<RecordingBackend>(
            std::make_shared<HttpBackend>(HttpBackend::Options{c.base_url, "/v1/chat/completions", c.api_key_env}),
            c.cassette);
    }
    return nullptr;
}

PricingTable load_pricing(const std::string& path) {
    if (path.empty()) return {};
    try {
        return PricingTable::from_json(json::parse(read_file(path)));
    } catch (const json::exception& e) {
        throw ConfigError("pricing file " + path + ": " + e.what());
    }
}

std::string usage_path(const ServiceConfig& c) {
    return (fs::path(c.data_dir) / "usage.jsonl").string();
}

} // namespace

Engine::Engine(ServiceConfig config, EngineHooks hooks)
    : config_(std::move(config)),
      hooks_(std::move(hooks)),
      clock_(hooks_.clock ? hooks_.clock : [] { return std::chrono::system_clock::now(); }),
      repository_((config_.validate(), config_.rules_dir)),
      rules_(repository_.load()),
      templates_(config_.templates_dir.empty() ? TemplateStore() : TemplateStore::from_directory(config_.templates_dir)) {
    std::error_code ec;
    fs::create_directories(fs::path(config_.data_dir) / "reports", ec);
    fs::create_directories(fs::path(config_.data_dir) / "review", ec);
    if (ec) throw StorageError("cannot create data directory " + config_.data_dir + ": " + ec.message());

    (void)templates_.get(config_.orchestrator.template_id);

    usage_log_ = std::make_shared<UsageLog>(usage_path(config_));
    ModelClientOptions copts;
    copts.timeout = std::chrono::milliseconds(config_.timeout_ms);
    copts.max_in_flight = config_.max_in_flight;
    copts.clock = clock_;
    client_ = std::make_unique<ModelClient>(copts, load_pricing(config_.pricing_path), usage_log_);
    auto backend = hooks_.backend ? hooks_.backend : make_backend(config_);
    for (const auto* spec : {&*config_.orchestrator.policy.teacher, &*config_.orchestrator.policy.lightweight}) {
        client_->register_backend(spec->provider, backend);
    }

    rules_.set_listener([this](const RuleBase& b) { repository_.save_overrides(b); });

    ReviewQueue::Options qopts;
    qopts.log_path = (fs::path(config_.data_dir) / "review" / "events.jsonl").string();
    qopts.snapshot_path = (fs::path(config_.data_dir) / "review" / "snapshot.json").string();
    qopts.clock = clock_;
    queue_ = std::make_unique<ReviewQueue>(qopts, &rules_);

    for (const auto& entry : fs::directory_iterator(fs::path(config_.data_dir) / "reports")) {
        const std::string stem = entry.path().stem().string();
        if (stem.rfind("r-", 0) == 0) {
            try {
                report_counter_ = std::max<std::uint64_t>(report_counter_, std::stoull(stem.substr(2)));
            } catch (const std::exception&) {
            }
        }
    }

    for (int i = 0; i < config_.max_concurrent_runs; ++i) workers_.emplace_back([this] { worker(); });
}

Engine::~Engine() {
    {
        std::lock_guard lock(jobs_mutex_);
        stopping_ = true;
    }
    jobs_cv_.notify_all();
    for (auto& t : workers_) t.join();
}

void Engine::worker() {
    for (;;) {
        std::function<void()> job;
        {
            std::unique_lock lock(jobs_mutex_);
            jobs_cv_.wait(lock, [&] { return stopping_ || !jobs_.empty(); });
            if (jobs_.empty()) return;  // stopping
            job = std::move(jobs_.front());
            jobs_.pop_front();
            ++active_jobs_;
        }
        job();
        {
            std::lock_guard lock(jobs_mutex_);
            --active_jobs_;
        }
        idle_cv_.notify_all();
    }
}

void Engine::drain() {
    std::unique_lock lock(jobs_mutex_);
    idle_cv_.wait(lock, [&] { return jobs_.empty() && active_jobs_ == 0; });
}

IngestResult Engine::ingest(const RuleDocument& doc, const IngestSidecar& sidecar) {
    const auto rules = index_rules(doc, sidecar.default_tags, sidecar.module_map, sidecar.options);
    IngestResult out;
    out.document_slug = repository_.save_document(doc, sidecar);
    const RuleBase after = rules_.update([&](const RuleBase& b) { return b.upserted(rules); });
    out.rulebase_version = after.version();
    for (const auto& r : rules) out.rule_ids.push_back(r.rule_id);
    return out;
}

std::string Engine::next_report_id() {
    std::lock_guard lock(reports_mutex_);
    std::ostringstream os;
    os << "r-" << std::setw(6) << std::setfill('0') << ++report_counter_;
    return os.str();
}

void Engine::store_report(const std::string& id, const QCReport& report) {
    json body = to_json(report);
    body["report_id"] = id;
    write_file_atomic((fs::path(config_.data_dir) / "reports" / (id + ".json")).string(), body.dump(2) + "\n");
    std::lock_guard lock(reports_mutex_);
    reports_[id] = {ReportStatus::State::kComplete, std::move(body)};
}

void Engine::check_backends() const {
    for (const auto* spec : {&*config_.orchestrator.policy.teacher, &*config_.orchestrator.policy.lightweight}) {
        if (!client_->has_backend(spec->provider)) {
            throw BackendUnavailable("no backend for provider " + spec->provider);
        }
    }
    if (!hooks_.backend && (config_.backend == BackendMode::kLive || config_.backend == BackendMode::kRecord)) {
        const char* key = std::getenv(config_.api_key_env.c_str());
        if (key == nullptr || *key == '\0') {
            throw BackendUnavailable("environment variable " + config_.api_key_env + " is not set");
        }
    }
}

std::pair<std::string, QCReport> Engine::run(const std::string& content, const ContentContext& ctx,
                                             std::optional<std::string> content_id) {
    if (text::trim(content).empty()) throw SchemaError("content must not be empty");
    check_backends();
    const std::string id = next_report_id();
    QcDeps deps{*client_, templates_, queue_.get(), clock_};
    QCReport report = run_qc(content, ctx, rules_.snapshot(), config_.orchestrator, deps, std::move(content_id));
    store_report(id, report);
    return {id, std::move(report)};
}

std::string Engine::submit(const std::string& content, const ContentContext& ctx,
                           std::optional<std::string> content_id) {
    if (text::trim(content).empty()) throw SchemaError("content must not be empty");
    check_backends();
    const std::string id = next_report_id();
    {
        std::lock_guard lock(reports_mutex_);
        reports_[id] = {ReportStatus::State::kRunning, {{"report_id", id}, {"status", "running"}}};
    }
    {
        std::lock_guard lock(jobs_mutex_);
        jobs_.push_back([this, id, content, ctx, content_id] {
            try {
                QcDeps deps{*client_, templates_, queue_.get(), clock_};
                store_report(id, run_qc(content, ctx, rules_.snapshot(), config_.orchestrator, deps, content_id));
            } catch (const std::exception& e) {
                const Error* qe = dynamic_cast<const Error*>(&e);
                json body = {{"report_id", id},
                             {"status", "failed"},
                             {"error", api_error(qe ? qe->code() : "InternalError", e.what())}};
                std::lock_guard lock(reports_mutex_);
                reports_[id] = {ReportStatus::State::kFailed, std::move(body)};
            }
        });
    }
    jobs_cv_.notify_one();
    return id;
}

ReportStatus Engine::report(const std::string& report_id) const {
    {
        std::lock_guard lock(reports_mutex_);
        if (auto it = reports_.find(report_id); it != reports_.end()) return it->second;
    }
    // Reports from earlier processes live only on disk.
    if (report_id.find('/') == std::string::npos && report_id.find("..") == std::string::npos) {
        const fs::path p = fs::path(config_.data_dir) / "reports" / (report_id + ".json");
        if (fs::is_regular_file(p)) {
            try {
                return {ReportStatus::State::kComplete, json::parse(read_file(p.string()))};
            } catch (const json::exception& e) {
                throw StorageError("report " + report_id + " is unreadable: " + e.what());
            }
        }
    }
    return {};
}

UsageSummary Engine::usage() const {
    const std::string path = usage_path(config_);
    const auto records = fs::exists(path) ? UsageLog::load_jsonl(path) : usage_log_->records();
    return usage_summary(records);
}

// ── HTTP helpers shared with the CLI ─────────────────────────────────────────

int http_status_for(const Error& e) {
    const std::string& c = e.code();
    if (c == "NotFound") return 404;
    if (c == "AlreadyDecided") return 409;
    if (c == "BackendUnavailable" || c == "Timeout") return 503;
    if (c == "StorageError") return 500;
    return 400;
}

json api_error(std::string_view code, std::string_view message, const json& detail) {
    return {{"code", code}, {"message", message}, {"detail", detail}};
}

ContentContext context_from_params(const std::multimap<std::string, std::string>& params) {
    ContentContext ctx;
    auto single = [&](const char* key, std::optional<std::string>& out) {
        auto it = params.find(key);
        if (it != params.end() && !text::trim(it->second).empty()) out = text::trim(it->second);
    };
    single("ip", ctx.ip);
    single("country", ctx.country);
    single("use_case", ctx.use_case);
    single("topic", ctx.topic);
    single("content_type", ctx.content_type);
    std::set<std::string> subtasks;
    auto [lo, hi] = params.equal_range("subtask");
    for (auto it = lo; it != hi; ++it) {
        std::stringstream ss(it->second);
        for (std::string part; std::getline(ss, part, ',');) {
            if (!text::trim(part).empty()) subtasks.insert(text::trim(part));
        }
    }
    if (!subtasks.empty()) ctx.subtasks = std::move(subtasks);
    return ctx;
}

} // namespace qc
