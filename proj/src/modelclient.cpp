#include "qc/modelclient.hpp"

#include "qc/errors.hpp"
#include "qc/rulebase.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

namespace qc {

using nlohmann::json;

// ── ModelSpec ────────────────────────────────────────────────────────────────

std::string_view to_string(RoleHint r) {
    switch (r) {
    case RoleHint::kTeacher: return "teacher";
    case RoleHint::kStudent: return "student";
    case RoleHint::kExtractor: return "extractor";
    }
    return "?";
}

RoleHint role_hint_from_string(std::string_view s) {
    for (auto r : {RoleHint::kTeacher, RoleHint::kStudent, RoleHint::kExtractor}) {
        if (to_string(r) == s) return r;
    }
    throw SchemaError("unknown role hint: " + std::string(s));
}

ModelSpec ModelSpec::teacher(std::string provider, std::string model_name) {
    return {std::move(provider), std::move(model_name), 0.2, 4096, RoleHint::kTeacher};
}

ModelSpec ModelSpec::student(std::string provider, std::string model_name) {
    return {std::move(provider), std::move(model_name), 1.0, 4096, RoleHint::kStudent};
}

void ModelSpec::validate() const {
    if (provider.empty() || model_name.empty()) {
        throw MisconfiguredPolicy("model spec needs provider and model_name");
    }
    if (!(temperature >= 0.0 && temperature <= 2.0)) {
        throw MisconfiguredPolicy("temperature must lie in [0, 2]");
    }
    if (max_output_tokens <= 0) throw MisconfiguredPolicy("max_output_tokens must be positive");
}

void to_json(json& j, const ModelSpec& s) {
    j = {{"provider", s.provider},
         {"model_name", s.model_name},
         {"temperature", s.temperature},
         {"max_output_tokens", s.max_output_tokens},
         {"role_hint", to_string(s.role_hint)}};
}

void from_json(const json& j, ModelSpec& s) {
    s.role_hint = role_hint_from_string(j.value("role_hint", "teacher"));
    s.provider = j.at("provider").get<std::string>();
    s.model_name = j.at("model_name").get<std::string>();
    s.temperature = j.value("temperature", s.role_hint == RoleHint::kStudent ? 1.0 : 0.2);
    s.max_output_tokens = j.value("max_output_tokens", 4096);
}

void to_json(json& j, const Usage& u) {
    j = {{"prompt_tokens", u.prompt_tokens},
         {"completion_tokens", u.completion_tokens},
         {"total_tokens", u.total_tokens()}};
}

void from_json(const json& j, Usage& u) {
    u.prompt_tokens = j.value("prompt_tokens", std::int64_t{0});
    u.completion_tokens = j.value("completion_tokens", std::int64_t{0});
    if (u.prompt_tokens < 0 || u.completion_tokens < 0) throw SchemaError("token counts must be non-negative");
}

std::int64_t approx_tokens(std::string_view utf8) {
    return static_cast<std::int64_t>((utf8.size() + 3) / 4);
}

std::string request_fingerprint(std::string_view system_instruction, std::string_view user_content) {
    std::string joined;
    joined.reserve(system_instruction.size() + user_content.size() + 1);
    joined.append(system_instruction);
    joined.push_back('\x1e');
    joined.append(user_content);
    return text::fnv1a_hex(joined);
}

// ── extract_json ─────────────────────────────────────────────────────────────

namespace {

// Index one past the brace closing the object opened at `open`, or npos.
std::size_t balanced_end(std::string_view s, std::size_t open) {
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = open; i < s.size(); ++i) {
        const char c = s[i];
        if (in_string) {
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == '{' || c == '[') {
            ++depth;
        } else if (c == '}' || c == ']') {
            if (--depth == 0) return i + 1;
            if (depth < 0) return std::string_view::npos;
        }
    }
    return std::string_view::npos;
}

std::optional<json> first_object(std::string_view s) {
    for (std::size_t pos = s.find('{'); pos != std::string_view::npos; pos = s.find('{', pos + 1)) {
        const std::size_t end = balanced_end(s, pos);
        if (end == std::string_view::npos) continue;
        try {
            auto j = json::parse(s.substr(pos, end - pos));
            if (j.is_object()) return j;
        } catch (const json::parse_error&) {
        }
    }
    return std::nullopt;
}

std::string strip_fences(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        if (s.compare(i, 3, "```") == 0) {
            // drop the fence and any language tag on the same line
            i += 3;
            while (i < s.size() && s[i] != '\n' && s[i] != '{' && s[i] != '[') ++i;
            continue;
        }
        out.push_back(s[i++]);
    }
    return out;
}

std::string drop_trailing_commas(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (in_string) {
            out.push_back(c);
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') in_string = true;
        if (c == ',') {
            std::size_t k = i + 1;
            while (k < s.size() && std::isspace(static_cast<unsigned char>(s[k]))) ++k;
            if (k < s.size() && (s[k] == '}' || s[k] == ']')) continue;
        }
        out.push_back(c);
    }
    return out;
}

} // namespace

json extract_json(std::string_view raw_text) {
    if (auto j = first_object(raw_text)) return *j;
    const std::string repaired = drop_trailing_commas(strip_fences(raw_text));
    if (auto j = first_object(repaired)) return *j;
    throw JsonError("no parseable JSON object in model output");
}

// ── Response contracts ───────────────────────────────────────────────────────

namespace {

void validate_issue_items(const json& v, bool with_validity) {
    if (!v.is_object()) throw SchemaViolation("response must be a JSON object");
    auto it = v.find("issues");
    if (it == v.end() || !it->is_array()) throw SchemaViolation("response lacks an \"issues\" array");
    for (std::size_t i = 0; i < it->size(); ++i) {
        const auto& item = (*it)[i];
        const std::string where = "issues[" + std::to_string(i) + "]";
        if (!item.is_object()) throw SchemaViolation(where + " is not an object");
        for (const char* key : {"issue", "context", "recommendation"}) {
            auto f = item.find(key);
            if (f == item.end()) throw SchemaViolation(where + " lacks \"" + key + "\"");
            if (!f->is_string()) throw SchemaViolation(where + "." + key + " is not a string");
        }
        if (with_validity) {
            auto f = item.find("isValid");
            if (f == item.end() || !f->is_boolean()) {
                throw SchemaViolation(where + " lacks boolean \"isValid\"");
            }
        }
    }
}

} // namespace

void validate_response(std::string_view id, const json& value) {
    if (id == schema_id::kIssuesReport) {
        validate_issue_items(value, false);
    } else if (id == schema_id::kVerificationVerdicts) {
        validate_issue_items(value, true);
    } else if (id == schema_id::kRuleDocument) {
        try {
            (void)rule_document_from_json(value);
        } catch (const SchemaError& e) {
            throw SchemaViolation(e.what());
        }
    } else {
        throw SchemaViolation("unknown response schema: " + std::string(id));
    }
}

// ── Pricing ──────────────────────────────────────────────────────────────────

void PricingTable::set(const std::string& provider, const std::string& model, PriceRate rate) {
    auto bad = [](double v) { return !(v >= 0.0) || !std::isfinite(v); };
    if ((rate.cents_per_1k && bad(*rate.cents_per_1k)) || bad(rate.input_cents_per_1k) ||
        bad(rate.output_cents_per_1k)) {
        throw SchemaError("pricing rates must be non-negative");
    }
    rates_[{provider, model}] = rate;
}

const PriceRate* PricingTable::find(const std::string& provider, const std::string& model) const {
    auto it = rates_.find({provider, model});
    return it == rates_.end() ? nullptr : &it->second;
}

PricingTable PricingTable::from_json(const json& j) {
    PricingTable t;
    const auto& models = j.contains("models") ? j.at("models") : j;
    if (!models.is_array()) throw SchemaError("pricing must be an array of model rates");
    for (const auto& m : models) {
        PriceRate rate;
        if (m.contains("cents_per_1k")) {
            rate.cents_per_1k = m.at("cents_per_1k").get<double>();
        } else {
            rate.input_cents_per_1k = m.at("input_cents_per_1k").get<double>();
            rate.output_cents_per_1k = m.at("output_cents_per_1k").get<double>();
        }
        t.set(m.at("provider").get<std::string>(), m.at("model").get<std::string>(), rate);
    }
    return t;
}

double estimate_cost(const Usage& usage, const PricingTable& pricing, const ModelSpec& spec) {
    const PriceRate* rate = pricing.find(spec.provider, spec.model_name);
    if (rate == nullptr) {
        throw UnknownModelError("no pricing for " + spec.provider + "/" + spec.model_name);
    }
    double cents = 0.0;
    if (rate->cents_per_1k) {
        cents = static_cast<double>(usage.total_tokens()) / 1000.0 * *rate->cents_per_1k;
    } else {
        cents = static_cast<double>(usage.prompt_tokens) / 1000.0 * rate->input_cents_per_1k +
                static_cast<double>(usage.completion_tokens) / 1000.0 * rate->output_cents_per_1k;
    }
    return std::round(cents * 10000.0) / 10000.0;
}

// ── Routing ──────────────────────────────────────────────────────────────────

std::string_view to_string(Risk r) { return r == Risk::kLow ? "low" : "high"; }

Risk risk_from_string(std::string_view s) {
    if (s == "low") return Risk::kLow;
    if (s == "high") return Risk::kHigh;
    throw SchemaError("unknown risk level: " + std::string(s));
}

ModelSpec route(const RoutingPolicy& policy, Risk risk, Pass pass) {
    if (!policy.teacher || !policy.lightweight) {
        throw MisconfiguredPolicy("routing policy needs both a teacher and a lightweight spec");
    }
    if (risk == Risk::kLow && pass == Pass::kDetect) return *policy.lightweight;
    return *policy.teacher;
}

// ── Usage accounting ─────────────────────────────────────────────────────────

void to_json(json& j, const UsageRecord& r) {
    j = {{"request_id", r.request_id},
         {"model_spec", r.model_spec},
         {"usage", r.usage},
         {"cost_cents", r.cost_cents ? json(*r.cost_cents) : json(nullptr)},
         {"latency_ms", r.latency_ms},
         {"timestamp", text::to_iso8601(r.timestamp)}};
}

void from_json(const json& j, UsageRecord& r) {
    r.request_id = j.at("request_id").get<std::string>();
    r.model_spec = j.at("model_spec").get<ModelSpec>();
    r.usage = j.at("usage").get<Usage>();
    const auto& c = j.at("cost_cents");
    r.cost_cents = c.is_null() ? std::nullopt : std::optional<double>(c.get<double>());
    r.latency_ms = j.value("latency_ms", std::int64_t{0});
    r.timestamp = text::from_iso8601(j.at("timestamp").get<std::string>());
}

UsageLog::UsageLog(std::string jsonl_path) : path_(std::move(jsonl_path)) {}

void UsageLog::append(const UsageRecord& record) {
    std::lock_guard lock(mutex_);
    records_.push_back(record);
    if (!path_.empty()) {
        std::ofstream out(path_, std::ios::app);
        if (!out) throw StorageError("cannot append to usage log " + path_);
        out << json(record).dump() << '\n';
    }
}

std::vector<UsageRecord> UsageLog::records() const {
    std::lock_guard lock(mutex_);
    return records_;
}

std::size_t UsageLog::size() const {
    std::lock_guard lock(mutex_);
    return records_.size();
}

std::vector<UsageRecord> UsageLog::load_jsonl(const std::string& path) {
    std::vector<UsageRecord> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (text::trim(line).empty()) continue;
        try {
            out.push_back(json::parse(line).get<UsageRecord>());
        } catch (const std::exception& e) {
            throw SchemaError(path + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

void to_json(json& j, const UsageSummary& s) {
    j = {{"total_tokens", s.total_tokens},
         {"total_requests", s.total_requests},
         {"p50_latency_ms", s.p50_latency_ms},
         {"cost_per_request_cents", s.cost_per_request},
         {"tokens_per_request", s.tokens_per_request}};
}

UsageSummary usage_summary(std::span<const UsageRecord> log) {
    UsageSummary s;
    if (log.empty()) return s;
    std::vector<std::int64_t> latencies;
    latencies.reserve(log.size());
    double cost = 0.0;
    for (const auto& r : log) {
        s.total_tokens += r.usage.total_tokens();
        cost += r.cost_cents.value_or(0.0);
        latencies.push_back(r.latency_ms);
    }
    s.total_requests = static_cast<std::int64_t>(log.size());
    std::sort(latencies.begin(), latencies.end());
    s.p50_latency_ms = latencies[(latencies.size() - 1) / 2];
    s.cost_per_request = cost / static_cast<double>(s.total_requests);
    s.tokens_per_request = static_cast<double>(s.total_tokens) / static_cast<double>(s.total_requests);
    return s;
}

// ── ModelClient ──────────────────────────────────────────────────────────────

ModelClient::ModelClient(ModelClientOptions options, PricingTable pricing, std::shared_ptr<UsageLog> log)
    : options_(std::move(options)), pricing_(std::move(pricing)), log_(std::move(log)) {
    if (!log_) log_ = std::make_shared<UsageLog>();
    if (!options_.clock) options_.clock = [] { return std::chrono::system_clock::now(); };
    if (options_.max_in_flight < 1) options_.max_in_flight = 1;
}

void ModelClient::register_backend(const std::string& provider, std::shared_ptr<Backend> backend) {
    std::lock_guard lock(mutex_);
    backends_[provider] = std::move(backend);
}

bool ModelClient::has_backend(const std::string& provider) const {
    std::lock_guard lock(mutex_);
    return backends_.count(provider) != 0;
}

std::shared_ptr<Backend> ModelClient::backend_for(const std::string& provider) const {
    std::lock_guard lock(mutex_);
    auto it = backends_.find(provider);
    if (it == backends_.end()) throw BackendUnavailable("no backend configured for provider '" + provider + "'");
    return it->second;
}

ChatResponse ModelClient::complete(const ModelSpec& spec, const ChatRequest& req) {
    if (req.system_instruction.empty() || req.user_content.empty()) {
        throw SchemaError("chat request needs non-empty system instruction and user content");
    }
    auto backend = backend_for(spec.provider);

    ChatResponse resp;
    {
        std::lock_guard lock(mutex_);
        resp.request_id = req.request_id ? *req.request_id : "req-" + std::to_string(next_request_++);
    }

    RawCompletion raw;
    {
        std::unique_lock slot(slots_mutex_);
        slots_cv_.wait(slot, [&] { return in_flight_ < options_.max_in_flight; });
        ++in_flight_;
    }
    struct Release {
        ModelClient& c;
        ~Release() {
            {
                std::lock_guard l(c.slots_mutex_);
                --c.in_flight_;
            }
            c.slots_cv_.notify_one();
        }
    } release{*this};
    raw = backend->complete(spec, req, options_.timeout);

    resp.raw_text = std::move(raw.text);
    resp.usage = raw.usage;
    resp.latency_ms = raw.latency_ms;

    UsageRecord rec;
    rec.request_id = resp.request_id;
    rec.model_spec = spec;
    rec.usage = resp.usage;
    if (pricing_.find(spec.provider, spec.model_name) != nullptr) {
        rec.cost_cents = estimate_cost(resp.usage, pricing_, spec);
    }
    rec.latency_ms = resp.latency_ms;
    rec.timestamp = options_.clock();
    log_->append(rec);

    if (req.response_schema_id) {
        json parsed;
        try {
            parsed = extract_json(resp.raw_text);
        } catch (const JsonError& e) {
            throw SchemaViolation(std::string("unparseable model output: ") + e.what());
        }
        validate_response(*req.response_schema_id, parsed);
        resp.parsed_json = std::move(parsed);
    }
    return resp;
}

} // namespace qc
