#pragma once

#include "qc/context.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace qc {

// ── Rule documents (extraction JSON schema) ──────────────────────────────────

struct DocumentInfo {
    std::string title;
    std::string content_about;
    std::string other_comments;

    bool operator==(const DocumentInfo&) const = default;
};

struct RuleSection {
    std::string title;
    std::string content_about;
    std::vector<std::string> what_to_do;
    std::vector<std::string> what_to_prohibit;
    std::optional<std::string> other_comments;

    bool operator==(const RuleSection&) const = default;
};

struct RuleDocument {
    DocumentInfo info;
    std::vector<RuleSection> sections;

    bool operator==(const RuleDocument&) const = default;
};

/// Parses an extraction document ({"documentInfo": ..., "sections": [...]}).
/// Unknown keys are ignored. Rule texts are whitespace-trimmed and NFC
/// normalized but otherwise kept verbatim.
/// Throws JsonError for unparseable input and SchemaError for missing or
/// mistyped keys, an empty title, or an empty rule text.
RuleDocument parse_rule_document(std::string_view raw_json);
RuleDocument rule_document_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RuleDocument& doc);

// ── Rules ────────────────────────────────────────────────────────────────────

enum class Polarity { kDo, kProhibit };
enum class LrbtcModule { kL, kR, kB, kT, kC };
enum class RuleStatus { kActive, kSuppressed, kHumanOverridden };

std::string_view to_string(Polarity p);
std::string_view to_string(LrbtcModule m);
std::string_view to_string(RuleStatus s);
Polarity polarity_from_string(std::string_view s);
LrbtcModule module_from_string(std::string_view s);
RuleStatus status_from_string(std::string_view s);

using TagSet = std::set<std::string>;

/// Per-level tag sets. An empty set makes the rule global at that level.
struct TaxonomyTags {
    TagSet ip;
    TagSet countries;
    TagSet use_cases;
    TagSet topics;
    TagSet subtasks;

    const TagSet& at(TaxonomyLevel level) const;
    TagSet& at(TaxonomyLevel level);

    bool operator==(const TaxonomyTags&) const = default;
};

void to_json(nlohmann::json& j, const TaxonomyTags& t);
void from_json(const nlohmann::json& j, TaxonomyTags& t);

struct RuleSource {
    std::string document_title;
    std::string section_title;
    int ordinal = 0;

    bool operator==(const RuleSource&) const = default;
};

struct Rule {
    std::string rule_id;
    std::string text;
    Polarity polarity = Polarity::kDo;
    LrbtcModule module = LrbtcModule::kL;
    TaxonomyTags taxonomy;
    RuleSource source;

    // Human feedback state; only hitl::apply_feedback writes these.
    RuleStatus status = RuleStatus::kActive;
    std::vector<ContentContext> suppressed_in;
    bool always_valid = false;
    std::optional<std::string> amended_recommendation;

    bool operator==(const Rule&) const = default;

    /// True when one of the context-scoped suppressions covers `ctx`.
    bool suppressed_for(const ContentContext& ctx) const;
};

void to_json(nlohmann::json& j, const Rule& r);
void from_json(const nlohmann::json& j, Rule& r);

// ── Indexing ─────────────────────────────────────────────────────────────────

enum class IdScheme {
    /// <doc-slug>.<section>.<D|P>.<item>, unique across documents.
    kQualified,
    /// Style-guide numbering: do-lists of sections 1..N become blocks 1..N,
    /// prohibit-lists become blocks N+1..2N, items are <block>.<item>.
    /// Only unique within a single document.
    kOrdinal,
};

std::string_view to_string(IdScheme s);
IdScheme id_scheme_from_string(std::string_view s);

struct IndexOptions {
    IdScheme id_scheme = IdScheme::kQualified;
    /// Section title -> tags replacing the default tags for that section.
    std::map<std::string, TaxonomyTags> section_tags;
};

std::vector<Rule> index_rules(const RuleDocument& doc, const TaxonomyTags& default_tags,
                              const std::map<std::string, LrbtcModule>& module_assignment,
                              const IndexOptions& options = {});

// ── RuleBase ─────────────────────────────────────────────────────────────────

/// Immutable, versioned snapshot of indexed rules. Copies share storage;
/// every mutation returns a new snapshot with version + 1.
class RuleBase {
public:
    RuleBase();

    std::uint64_t version() const { return data_->version; }
    std::size_t size() const { return data_->by_id.size(); }
    bool empty() const { return data_->by_id.empty(); }

    const Rule* find(std::string_view rule_id) const;
    bool contains(std::string_view rule_id) const { return find(rule_id) != nullptr; }

    /// All rules in rule_id order.
    std::vector<const Rule*> all() const;

    /// Ids of rules that are global at `level` or carry `value` there
    /// (case-insensitive). Served from the per-level index.
    std::set<std::string> ids_matching(TaxonomyLevel level, std::string_view value) const;
    /// Ids of rules whose tag set at `level` is empty.
    const std::set<std::string>& global_ids(TaxonomyLevel level) const;

    /// Inserts or replaces by rule_id. A replaced rule keeps its human
    /// feedback state (status, suppressions, annotations).
    RuleBase upserted(std::span<const Rule> rules) const;

    /// Applies `mutate` to one rule and bumps the version. Returns nullopt
    /// when the id is unknown.
    std::optional<RuleBase> modified(std::string_view rule_id,
                                     const std::function<void(Rule&)>& mutate) const;

    /// Rebuilds a snapshot at an explicit version (used by persistence).
    static RuleBase restore(std::vector<Rule> rules, std::uint64_t version);

private:
    struct Data {
        std::map<std::string, Rule, std::less<>> by_id;
        // level -> folded tag value -> ids
        std::array<std::map<std::string, std::set<std::string>>, 5> index;
        std::array<std::set<std::string>, 5> global;
        std::uint64_t version = 0;
    };

    explicit RuleBase(std::shared_ptr<const Data> data) : data_(std::move(data)) {}
    static std::shared_ptr<const Data> build(std::map<std::string, Rule, std::less<>> rules,
                                             std::uint64_t version);

    std::shared_ptr<const Data> data_;
};

RuleBase upsert_rules(const RuleBase& base, std::span<const Rule> rules);
std::optional<Rule> lookup(const RuleBase& base, std::string_view rule_id);

/// Single-writer holder of the current snapshot. Readers take snapshots;
/// writers are serialized. The optional listener runs under the write lock
/// after every update (used for write-through persistence).
class RuleBaseStore {
public:
    explicit RuleBaseStore(RuleBase initial = {});

    RuleBase snapshot() const;
    RuleBase update(const std::function<RuleBase(const RuleBase&)>& fn);
    void set_listener(std::function<void(const RuleBase&)> listener);

private:
    mutable std::mutex read_mutex_;
    std::mutex write_mutex_;
    RuleBase current_;
    std::function<void(const RuleBase&)> listener_;
};

// ── Persistence ──────────────────────────────────────────────────────────────

/// Ingestion-time metadata kept next to each rule document.
struct IngestSidecar {
    TaxonomyTags default_tags;
    std::map<std::string, LrbtcModule> module_map;
    IndexOptions options;
};

void to_json(nlohmann::json& j, const IngestSidecar& s);
void from_json(const nlohmann::json& j, IngestSidecar& s);

/// Directory-backed rule base:
///   <dir>/<slug>.json          the extraction document as ingested
///   <dir>/<slug>.sidecar.json  ingestion metadata
///   <dir>/overrides.json       rulebase version and human feedback state
class RuleRepository {
public:
    explicit RuleRepository(std::string dir);

    /// Loads every document + sidecar, re-indexes, then applies overrides.
    RuleBase load() const;

    /// Stores the document and sidecar; returns the document slug.
    std::string save_document(const RuleDocument& doc, const IngestSidecar& sidecar) const;

    /// Persists version and feedback state of every rule.
    void save_overrides(const RuleBase& base) const;

    const std::string& dir() const { return dir_; }

private:
    std::string dir_;
};

/// Writes `contents` to a temp file next to `path` and renames it over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

} // namespace qc
