#pragma once

#include "qc/text.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace qc {

// ── Requests and responses ───────────────────────────────────────────────────

enum class RoleHint { kTeacher, kStudent, kExtractor };

std::string_view to_string(RoleHint r);
RoleHint role_hint_from_string(std::string_view s);

struct ModelSpec {
    std::string provider;
    std::string model_name;
    double temperature = 0.2;
    int max_output_tokens = 4096;
    RoleHint role_hint = RoleHint::kTeacher;

    /// Low-temperature (0.2) authoritative model.
    static ModelSpec teacher(std::string provider, std::string model_name);
    /// High-temperature (1.0) exploratory model.
    static ModelSpec student(std::string provider, std::string model_name);

    void validate() const;  // MisconfiguredPolicy on out-of-range fields

    bool operator==(const ModelSpec&) const = default;
};

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

/// Names of the JSON contracts a response can be validated against.
namespace schema_id {
inline constexpr std::string_view kIssuesReport = "issues-report";
inline constexpr std::string_view kRuleDocument = "rule-document";
inline constexpr std::string_view kVerificationVerdicts = "verification-verdicts";
}

struct ChatRequest {
    std::string system_instruction;
    std::string user_content;
    std::optional<std::string> response_schema_id;
    /// Caller-chosen id recorded in the usage log; generated when absent.
    std::optional<std::string> request_id;
};

struct Usage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;

    std::int64_t total_tokens() const { return prompt_tokens + completion_tokens; }
    bool operator==(const Usage&) const = default;
};

void to_json(nlohmann::json& j, const Usage& u);
void from_json(const nlohmann::json& j, Usage& u);

struct ChatResponse {
    std::string request_id;
    std::string raw_text;
    std::optional<nlohmann::json> parsed_json;
    Usage usage;
    std::int64_t latency_ms = 0;

    bool operator==(const ChatResponse&) const = default;
};

/// Proxy token count used where no tokenizer is available: ceil(bytes / 4).
std::int64_t approx_tokens(std::string_view utf8);

/// Stable fingerprint of a request's system + user text (FNV-1a, hex).
std::string request_fingerprint(std::string_view system_instruction, std::string_view user_content);

// ── JSON extraction and response contracts ───────────────────────────────────

/// Parses the first balanced top-level JSON object in `raw_text`, tolerating
/// surrounding prose. One repair pass (strip ``` fences, drop trailing
/// commas) is attempted before throwing JsonError.
nlohmann::json extract_json(std::string_view raw_text);

/// Throws SchemaViolation when `value` does not satisfy the named contract.
void validate_response(std::string_view schema_id, const nlohmann::json& value);

// ── Pricing ──────────────────────────────────────────────────────────────────

struct PriceRate {
    /// Flat mode when set; otherwise input/output rates apply.
    std::optional<double> cents_per_1k;
    double input_cents_per_1k = 0.0;
    double output_cents_per_1k = 0.0;
};

class PricingTable {
public:
    void set(const std::string& provider, const std::string& model, PriceRate rate);
    const PriceRate* find(const std::string& provider, const std::string& model) const;
    bool empty() const { return rates_.empty(); }

    /// {"models": [{"provider", "model", "cents_per_1k"} | {..., "input_cents_per_1k", "output_cents_per_1k"}]}
    static PricingTable from_json(const nlohmann::json& j);

private:
    std::map<std::pair<std::string, std::string>, PriceRate> rates_;
};

/// Cost in US cents, rounded to 4 decimal places. UnknownModelError when the
/// spec has no entry.
double estimate_cost(const Usage& usage, const PricingTable& pricing, const ModelSpec& spec);

// ── Routing ──────────────────────────────────────────────────────────────────

enum class Risk { kLow, kHigh };
enum class Pass { kDetect, kVerify };

std::string_view to_string(Risk r);
Risk risk_from_string(std::string_view s);

struct RoutingPolicy {
    std::optional<ModelSpec> teacher;
    std::optional<ModelSpec> lightweight;  // the student / flash tier
};

/// (low, detect) -> lightweight; anything high-risk or verifying -> teacher.
ModelSpec route(const RoutingPolicy& policy, Risk risk, Pass pass);

// ── Usage accounting ─────────────────────────────────────────────────────────

struct UsageRecord {
    std::string request_id;
    ModelSpec model_spec;
    Usage usage;
    std::optional<double> cost_cents;  // absent when the model is unpriced
    std::int64_t latency_ms = 0;
    text::TimePoint timestamp;
};

void to_json(nlohmann::json& j, const UsageRecord& r);
void from_json(const nlohmann::json& j, UsageRecord& r);

/// Append-only usage sink, optionally mirrored to a JSON-lines file.
class UsageLog {
public:
    UsageLog() = default;
    explicit UsageLog(std::string jsonl_path);

    void append(const UsageRecord& record);
    std::vector<UsageRecord> records() const;
    std::size_t size() const;

    static std::vector<UsageRecord> load_jsonl(const std::string& path);

private:
    mutable std::mutex mutex_;
    std::vector<UsageRecord> records_;
    std::string path_;
};

struct UsageSummary {
    std::int64_t total_tokens = 0;
    std::int64_t total_requests = 0;
    std::int64_t p50_latency_ms = 0;
    double cost_per_request = 0.0;  // cents
    double tokens_per_request = 0.0;

    bool operator==(const UsageSummary&) const = default;
};

void to_json(nlohmann::json& j, const UsageSummary& s);

/// p50 is the lower median; an empty log yields all zeros.
UsageSummary usage_summary(std::span<const UsageRecord> log);

// ── Backends ─────────────────────────────────────────────────────────────────

struct RawCompletion {
    std::string text;
    Usage usage;
    std::int64_t latency_ms = 0;
};

class Backend {
public:
    virtual ~Backend() = default;
    /// Throws BackendUnavailable or Timeout.
    virtual RawCompletion complete(const ModelSpec& spec, const ChatRequest& req,
                                   std::chrono::milliseconds deadline) = 0;
};

/// Deterministic scripted backend. Script format:
///   {"entries": [{"fingerprint"?, "model"?, "provider"?, "system_contains"?,
///                 "user_contains"?, "response" | "response_json", "usage"?,
///                 "latency_ms"?, "error"?}], "default"?: {...}}
/// The first entry whose matchers all hold answers; "error" may be
/// "unavailable" or "timeout".
class MockBackend : public Backend {
public:
    struct Entry {
        std::optional<std::string> fingerprint;
        std::optional<std::string> model;
        std::optional<std::string> provider;
        std::optional<std::string> system_contains;
        std::optional<std::string> user_contains;
        std::string response;
        std::optional<Usage> usage;
        std::int64_t latency_ms = 0;
        std::optional<std::string> error;
    };

    MockBackend() = default;
    explicit MockBackend(std::vector<Entry> entries, std::optional<Entry> fallback = std::nullopt);

    static MockBackend from_json(const nlohmann::json& script);
    static MockBackend from_file(const std::string& path);

    // Not synchronized: finish scripting before sharing the backend.
    void add(Entry e);
    void set_default(Entry e);

    RawCompletion complete(const ModelSpec& spec, const ChatRequest& req,
                           std::chrono::milliseconds deadline) override;

private:
    std::vector<Entry> entries_;
    std::optional<Entry> default_;
};

/// Chat-completions over HTTP(S) (OpenAI-compatible body). The API key is
/// read from the named environment variable at call time.
class HttpBackend : public Backend {
public:
    struct Options {
        std::string base_url;  // e.g. https://api.example.com
        std::string path = "/v1/chat/completions";
        std::string api_key_env = "QC_API_KEY";
    };

    explicit HttpBackend(Options options);

    RawCompletion complete(const ModelSpec& spec, const ChatRequest& req,
                           std::chrono::milliseconds deadline) override;

private:
    Options options_;
};

/// Wraps another backend and appends every exchange to a JSON-lines cassette.
class RecordingBackend : public Backend {
public:
    RecordingBackend(std::shared_ptr<Backend> inner, std::string cassette_path);

    RawCompletion complete(const ModelSpec& spec, const ChatRequest& req,
                           std::chrono::milliseconds deadline) override;

private:
    std::shared_ptr<Backend> inner_;
    std::string path_;
    std::mutex mutex_;
};

/// Serves responses from a cassette written by RecordingBackend, keyed by
/// (fingerprint, provider, model). Unknown requests are BackendUnavailable.
class ReplayBackend : public Backend {
public:
    explicit ReplayBackend(const std::string& cassette_path);

    RawCompletion complete(const ModelSpec& spec, const ChatRequest& req,
                           std::chrono::milliseconds deadline) override;

private:
    std::map<std::string, RawCompletion> by_key_;
};

// ── Client ───────────────────────────────────────────────────────────────────

struct ModelClientOptions {
    std::chrono::milliseconds timeout{60'000};
    int max_in_flight = 8;
    std::function<text::TimePoint()> clock;  // defaults to system_clock::now
};

/// Uniform entry point over registered backends (one per provider). Safe to
/// call concurrently; at most `max_in_flight` requests run at once.
class ModelClient {
public:
    explicit ModelClient(ModelClientOptions options = {}, PricingTable pricing = {},
                         std::shared_ptr<UsageLog> log = nullptr);

    void register_backend(const std::string& provider, std::shared_ptr<Backend> backend);
    bool has_backend(const std::string& provider) const;

    /// Runs the request, validates the named response contract when set and
    /// appends a UsageRecord. Throws BackendUnavailable, Timeout or
    /// SchemaViolation.
    ChatResponse complete(const ModelSpec& spec, const ChatRequest& req);

    UsageLog& usage_log() { return *log_; }
    const PricingTable& pricing() const { return pricing_; }

private:
    std::shared_ptr<Backend> backend_for(const std::string& provider) const;

    ModelClientOptions options_;
    PricingTable pricing_;
    std::shared_ptr<UsageLog> log_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<Backend>> backends_;
    std::uint64_t next_request_ = 1;

    std::mutex slots_mutex_;
    std::condition_variable slots_cv_;
    int in_flight_ = 0;
};

} // namespace qc
