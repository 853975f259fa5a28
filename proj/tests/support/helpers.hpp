#pragma once

#include <array>
#include <chrono>
#include <initializer_list>
#include <optional>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include "qc/modelclient.hpp"
#include "qc/orchestrator.hpp"
#include "qc/rulebase.hpp"

namespace testing_support {

namespace fs = std::filesystem;

inline std::string fixture(const std::string& rel) { return std::string(QC_FIXTURE_DIR) + "/" + rel; }

inline std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void spit(const std::string& path, const std::string& contents) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << contents;
}

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        std::string tmpl = (fs::temp_directory_path() / "qc-test-XXXXXX").string();
        char* made = mkdtemp(tmpl.data());
        if (made == nullptr) throw std::runtime_error("mkdtemp failed");
        path_ = made;
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::string& path() const { return path_; }
    std::string operator/(const std::string& rel) const { return path_ + "/" + rel; }

private:
    std::string path_;
};

/// Deterministic clock: every call advances by one second from a fixed epoch.
class SteppingClock {
public:
    explicit SteppingClock(std::chrono::milliseconds step = std::chrono::seconds(1))
        : step_(step), now_(qc::text::from_iso8601("2025-07-01T09:00:00.000Z")) {}

    qc::text::TimePoint operator()() {
        now_ += step_;
        return now_;
    }

private:
    std::chrono::milliseconds step_;
    qc::text::TimePoint now_;
};

/// The house style rule book indexed with ordinal ids: 1.1-1.4 do, 2.1-2.4 prohibit.
inline qc::RuleBase house_style_base() {
    const auto doc = qc::parse_rule_document(slurp(fixture("rules/house_style.json")));
    qc::IndexOptions opts;
    opts.id_scheme = qc::IdScheme::kOrdinal;
    const auto rules = qc::index_rules(doc, {}, {}, opts);
    return qc::upsert_rules(qc::RuleBase(), rules);
}

inline qc::OrchestratorConfig scenario_config() {
    qc::OrchestratorConfig c;
    c.policy.teacher = qc::ModelSpec::teacher("mock", "teacher-model");
    c.policy.lightweight = qc::ModelSpec::student("mock", "student-model");
    return c;
}

inline std::shared_ptr<qc::MockBackend> scenario_backend() {
    return std::make_shared<qc::MockBackend>(qc::MockBackend::from_file(fixture("mock/scenarios.json")));
}

inline constexpr const char* kCleanContent = "All teams receive the colour guide on Monday.";
inline constexpr const char* kValidatedContent =
    "The new dashboard helps teams recieve updates faster. Pick any color you like.";
inline constexpr const char* kRejectedContent = "Staff should recieve the handbook. The program starts on Monday.";

inline std::string issues_reply(std::initializer_list<std::array<const char*, 3>> items) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& it : items) arr.push_back({{"issue", it[0]}, {"context", it[1]}, {"recommendation", it[2]}});
    return nlohmann::json{{"issues", arr}}.dump();
}

inline qc::MockBackend::Entry reply_entry(std::string response, std::optional<std::string> model = std::nullopt,
                                          std::optional<std::string> system_contains = std::nullopt) {
    qc::MockBackend::Entry e;
    e.response = std::move(response);
    e.model = std::move(model);
    e.system_contains = std::move(system_contains);
    return e;
}

inline qc::MockBackend::Entry error_entry(std::string error, std::optional<std::string> model = std::nullopt) {
    qc::MockBackend::Entry e;
    e.error = std::move(error);
    e.model = std::move(model);
    return e;
}

inline constexpr const char* kVerifySystem = "You review flagged compliance issues";

} // namespace testing_support
