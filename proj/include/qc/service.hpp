#pragma once

#include "qc/errors.hpp"
#include "qc/evalharness.hpp"
#include "qc/hitl.hpp"
#include "qc/modelclient.hpp"
#include "qc/orchestrator.hpp"
#include "qc/rulebase.hpp"
#include "qc/waterfall.hpp"

#include <condition_variable>
#include <deque>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

namespace qc {

enum class BackendMode { kMock, kLive, kRecord, kReplay };

std::string_view to_string(BackendMode m);
BackendMode backend_mode_from_string(std::string_view s);

/// Everything the service needs, read from one INI file. Relative paths are
/// resolved against the config file's directory. Secrets never live here:
/// live mode reads the key from the environment variable named by api_key_env.
struct ServiceConfig {
    std::string listen_host = "127.0.0.1";
    int listen_port = 8080;
    std::string data_dir = "data";  // reports/, review/, usage.jsonl; created on demand
    int max_concurrent_runs = 4;
    std::string ui_dir;  // optional static bundle served under /ui

    std::string rules_dir;
    std::string templates_dir;  // optional
    std::string pricing_path;   // optional

    BackendMode backend = BackendMode::kMock;
    std::string mock_script;
    std::string base_url;
    std::string api_key_env = "QC_API_KEY";
    std::string cassette;
    int timeout_ms = 60'000;
    int max_in_flight = 8;

    OrchestratorConfig orchestrator;

    /// Parses the INI file. The QC_LISTEN environment variable ("host:port")
    /// overrides [service] listen. Throws ConfigError.
    static ServiceConfig load(const std::string& path);

    /// Checks that referenced inputs exist and, in live/record mode, that the
    /// key variable is set. Throws ConfigError.
    void validate() const;
};

/// Parses "host:port" or ":port". Throws ConfigError.
std::pair<std::string, int> parse_listen_address(std::string_view s);

struct IngestResult {
    std::string document_slug;
    std::vector<std::string> rule_ids;
    std::uint64_t rulebase_version = 0;
};

struct ReportStatus {
    enum class State { kUnknown, kRunning, kComplete, kFailed } state = State::kUnknown;
    nlohmann::json body;  // the report when complete, else a status object
};

/// Test seams: a backend used for every provider instead of the configured
/// one, and the clock shared by the client, orchestrator and review queue.
struct EngineHooks {
    std::shared_ptr<Backend> backend;
    std::function<text::TimePoint()> clock;
};

/// Wires rule storage, templates, the model client, the orchestrator and the
/// review queue, and runs QC jobs on a bounded worker pool.
class Engine {
public:
    explicit Engine(ServiceConfig config, EngineHooks hooks = {});
    ~Engine();

    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    const ServiceConfig& config() const { return config_; }
    RuleBaseStore& rules() { return rules_; }
    ReviewQueue& queue() { return *queue_; }
    ModelClient& client() { return *client_; }
    const TemplateStore& templates() const { return templates_; }

    IngestResult ingest(const RuleDocument& doc, const IngestSidecar& sidecar);

    /// Synchronous run; the report is stored and persisted like an async one.
    std::pair<std::string, QCReport> run(const std::string& content, const ContentContext& ctx,
                                         std::optional<std::string> content_id = std::nullopt);

    /// Validates the request, then queues it. Throws SchemaError for empty
    /// content and BackendUnavailable when a model provider is unusable.
    std::string submit(const std::string& content, const ContentContext& ctx,
                       std::optional<std::string> content_id = std::nullopt);

    ReportStatus report(const std::string& report_id) const;

    /// Blocks until no job is queued or running.
    void drain();

    UsageSummary usage() const;

private:
    void check_backends() const;
    std::string next_report_id();
    void store_report(const std::string& id, const QCReport& report);
    void worker();

    ServiceConfig config_;
    EngineHooks hooks_;
    std::function<text::TimePoint()> clock_;
    RuleRepository repository_;
    RuleBaseStore rules_;
    TemplateStore templates_;
    std::shared_ptr<UsageLog> usage_log_;
    std::unique_ptr<ModelClient> client_;
    std::unique_ptr<ReviewQueue> queue_;

    mutable std::mutex reports_mutex_;
    std::map<std::string, ReportStatus> reports_;
    std::uint64_t report_counter_ = 0;

    std::mutex jobs_mutex_;
    std::condition_variable jobs_cv_;
    std::condition_variable idle_cv_;
    std::deque<std::function<void()>> jobs_;
    int active_jobs_ = 0;
    bool stopping_ = false;
    std::vector<std::thread> workers_;
};

/// Maps an engine error to its HTTP status (400, 404, 409, 503 or 500).
int http_status_for(const Error& e);

/// ApiError body: {"code", "message", "detail"}.
nlohmann::json api_error(std::string_view code, std::string_view message,
                         const nlohmann::json& detail = nullptr);

/// ContentContext from query parameters; "subtask" may repeat or hold a
/// comma-separated list.
ContentContext context_from_params(const std::multimap<std::string, std::string>& params);

/// JSON HTTP front end over an Engine.
class HttpServer {
public:
    explicit HttpServer(Engine& engine);
    ~HttpServer();

    /// Binds and serves until stop(); returns false when binding fails.
    bool listen(const std::string& host, int port);
    /// Binds to an ephemeral port and returns it (serve with listen_after_bind).
    int bind_to_any_port(const std::string& host);
    bool listen_after_bind();
    void wait_until_ready() const;
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// The `qc` command line. Returns the process exit code: 0 success, 1 engine
/// error, 2 usage error, 3 undefined metric under --strict.
int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err);

} // namespace qc
