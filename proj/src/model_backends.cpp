#include "qc/errors.hpp"
#include "qc/modelclient.hpp"
#include "qc/rulebase.hpp"

#include <fstream>

namespace qc {

using nlohmann::json;

// ── MockBackend ──────────────────────────────────────────────────────────────

namespace {

MockBackend::Entry entry_from_json(const json& j) {
    if (!j.is_object()) throw SchemaError("mock script entries must be objects");
    MockBackend::Entry e;
    auto opt = [&](const char* key, std::optional<std::string>& out) {
        if (auto it = j.find(key); it != j.end() && !it->is_null()) out = it->get<std::string>();
    };
    opt("fingerprint", e.fingerprint);
    opt("model", e.model);
    opt("provider", e.provider);
    opt("system_contains", e.system_contains);
    opt("user_contains", e.user_contains);
    opt("error", e.error);
    if (auto it = j.find("response_json"); it != j.end()) {
        e.response = it->dump();
    } else if (auto r = j.find("response"); r != j.end()) {
        e.response = r->get<std::string>();
    } else if (!e.error) {
        throw SchemaError("mock script entry needs \"response\", \"response_json\" or \"error\"");
    }
    if (auto it = j.find("usage"); it != j.end()) e.usage = it->get<Usage>();
    e.latency_ms = j.value("latency_ms", std::int64_t{0});
    if (e.error && *e.error != "unavailable" && *e.error != "timeout") {
        throw SchemaError("mock error must be \"unavailable\" or \"timeout\"");
    }
    return e;
}

bool matches(const MockBackend::Entry& e, const ModelSpec& spec, const ChatRequest& req,
             const std::string& fingerprint) {
    if (e.fingerprint && *e.fingerprint != fingerprint) return false;
    if (e.model && *e.model != spec.model_name) return false;
    if (e.provider && *e.provider != spec.provider) return false;
    if (e.system_contains && req.system_instruction.find(*e.system_contains) == std::string::npos) return false;
    if (e.user_contains && req.user_content.find(*e.user_contains) == std::string::npos) return false;
    return true;
}

RawCompletion answer(const MockBackend::Entry& e, const ChatRequest& req, std::chrono::milliseconds deadline) {
    if (e.error) {
        if (*e.error == "timeout") throw Timeout("scripted timeout");
        throw BackendUnavailable("scripted backend outage");
    }
    if (e.latency_ms > deadline.count()) {
        throw Timeout("scripted latency " + std::to_string(e.latency_ms) + " ms exceeds deadline");
    }
    RawCompletion out;
    out.text = e.response;
    if (e.usage) {
        out.usage = *e.usage;
    } else {
        out.usage.prompt_tokens = approx_tokens(req.system_instruction + req.user_content);
        out.usage.completion_tokens = approx_tokens(e.response);
    }
    out.latency_ms = e.latency_ms;
    return out;
}

} // namespace

MockBackend::MockBackend(std::vector<Entry> entries, std::optional<Entry> fallback)
    : entries_(std::move(entries)), default_(std::move(fallback)) {}

MockBackend MockBackend::from_json(const json& script) {
    MockBackend m;
    if (!script.is_object()) throw SchemaError("mock script must be a JSON object");
    if (auto it = script.find("entries"); it != script.end()) {
        if (!it->is_array()) throw SchemaError("mock script \"entries\" must be an array");
        for (const auto& e : *it) m.entries_.push_back(entry_from_json(e));
    }
    if (auto it = script.find("default"); it != script.end() && !it->is_null()) {
        m.default_ = entry_from_json(*it);
    }
    return m;
}

MockBackend MockBackend::from_file(const std::string& path) {
    try {
        return from_json(json::parse(read_file(path)));
    } catch (const json::parse_error& e) {
        throw JsonError("mock script " + path + ": " + e.what());
    }
}

void MockBackend::add(Entry e) {
    entries_.push_back(std::move(e));
}

void MockBackend::set_default(Entry e) {
    default_ = std::move(e);
}

RawCompletion MockBackend::complete(const ModelSpec& spec, const ChatRequest& req,
                                    std::chrono::milliseconds deadline) {
    const std::string fp = request_fingerprint(req.system_instruction, req.user_content);
    for (const auto& e : entries_) {
        if (matches(e, spec, req, fp)) return answer(e, req, deadline);
    }
    if (default_) return answer(*default_, req, deadline);
    throw BackendUnavailable("mock script has no response for request " + fp + " (" + spec.model_name + ")");
}

// ── Record / replay ──────────────────────────────────────────────────────────

namespace {

std::string cassette_key(const std::string& fp, const std::string& provider, const std::string& model) {
    return fp + '|' + provider + '|' + model;
}

} // namespace

RecordingBackend::RecordingBackend(std::shared_ptr<Backend> inner, std::string cassette_path)
    : inner_(std::move(inner)), path_(std::move(cassette_path)) {}

RawCompletion RecordingBackend::complete(const ModelSpec& spec, const ChatRequest& req,
                                         std::chrono::milliseconds deadline) {
    RawCompletion raw = inner_->complete(spec, req, deadline);
    json line = {{"fingerprint", request_fingerprint(req.system_instruction, req.user_content)},
                 {"provider", spec.provider},
                 {"model", spec.model_name},
                 {"text", raw.text},
                 {"usage", raw.usage},
                 {"latency_ms", raw.latency_ms}};
    std::lock_guard lock(mutex_);
    std::ofstream out(path_, std::ios::app);
    if (!out) throw StorageError("cannot append to cassette " + path_);
    out << line.dump() << '\n';
    return raw;
}

ReplayBackend::ReplayBackend(const std::string& cassette_path) {
    std::ifstream in(cassette_path);
    if (!in) throw StorageError("cannot open cassette " + cassette_path);
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw JsonError("cassette " + cassette_path + ": " + e.what());
        }
        RawCompletion raw;
        raw.text = j.at("text").get<std::string>();
        raw.usage = j.at("usage").get<Usage>();
        raw.latency_ms = j.value("latency_ms", std::int64_t{0});
        by_key_.insert_or_assign(cassette_key(j.at("fingerprint").get<std::string>(),
                                              j.at("provider").get<std::string>(),
                                              j.at("model").get<std::string>()),
                                 std::move(raw));
    }
}

RawCompletion ReplayBackend::complete(const ModelSpec& spec, const ChatRequest& req, std::chrono::milliseconds) {
    const auto key = cassette_key(request_fingerprint(req.system_instruction, req.user_content), spec.provider,
                                  spec.model_name);
    auto it = by_key_.find(key);
    if (it == by_key_.end()) throw BackendUnavailable("request not present in cassette");
    return it->second;
}

} // namespace qc
