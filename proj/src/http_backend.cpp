#include "qc/errors.hpp"
#include "qc/modelclient.hpp"

#include <httplib.h>

#include <cstdlib>

namespace qc {

using nlohmann::json;

HttpBackend::HttpBackend(Options options) : options_(std::move(options)) {
    if (options_.base_url.empty()) throw MisconfiguredPolicy("live backend needs a base URL");
}

RawCompletion HttpBackend::complete(const ModelSpec& spec, const ChatRequest& req,
                                    std::chrono::milliseconds deadline) {
    const char* key = std::getenv(options_.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
        throw BackendUnavailable("environment variable " + options_.api_key_env + " is not set");
    }

    json body = {{"model", spec.model_name},
                 {"temperature", spec.temperature},
                 {"max_tokens", spec.max_output_tokens},
                 {"messages",
                  json::array({{{"role", "system"}, {"content", req.system_instruction}},
                               {{"role", "user"}, {"content", req.user_content}}})}};
    if (req.response_schema_id) body["response_format"] = {{"type", "json_object"}};

    httplib::Client cli(options_.base_url);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(deadline);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(deadline - secs);
    cli.set_connection_timeout(secs.count(), usecs.count());
    cli.set_read_timeout(secs.count(), usecs.count());
    cli.set_write_timeout(secs.count(), usecs.count());

    httplib::Headers headers = {{"Authorization", std::string("Bearer ") + key}};
    const auto start = std::chrono::steady_clock::now();
    auto res = cli.Post(options_.path, headers, body.dump(), "application/json");
    const auto elapsed =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);

    if (!res) {
        const auto err = res.error();
        if (err == httplib::Error::ConnectionTimeout || elapsed >= deadline) {
            throw Timeout("request to " + options_.base_url + " timed out");
        }
        throw BackendUnavailable("request to " + options_.base_url + " failed: " + httplib::to_string(err));
    }
    if (res->status == 408 || res->status == 504) throw Timeout("provider reported timeout");
    if (res->status != 200) {
        throw BackendUnavailable("provider returned HTTP " + std::to_string(res->status));
    }

    RawCompletion out;
    out.latency_ms = elapsed.count();
    try {
        const json j = json::parse(res->body);
        out.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
        if (auto u = j.find("usage"); u != j.end() && u->is_object()) {
            out.usage.prompt_tokens = u->value("prompt_tokens", std::int64_t{0});
            out.usage.completion_tokens = u->value("completion_tokens", std::int64_t{0});
        } else {
            out.usage.prompt_tokens = approx_tokens(req.system_instruction + req.user_content);
            out.usage.completion_tokens = approx_tokens(out.text);
        }
    } catch (const json::exception& e) {
        throw BackendUnavailable(std::string("malformed provider response: ") + e.what());
    }
    return out;
}

} // namespace qc
