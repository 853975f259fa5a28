#include "qc/rulebase.hpp"

#include "qc/errors.hpp"
#include "qc/text.hpp"

#include <algorithm>

namespace qc {

using nlohmann::json;

// ── ContentContext ───────────────────────────────────────────────────────────

std::string_view to_string(TaxonomyLevel level) {
    switch (level) {
    case TaxonomyLevel::kIp: return "ip";
    case TaxonomyLevel::kCountry: return "country";
    case TaxonomyLevel::kUseCase: return "use_case";
    case TaxonomyLevel::kTopic: return "topic";
    case TaxonomyLevel::kSubtask: return "subtask";
    }
    return "?";
}

TaxonomyLevel taxonomy_level_from_string(std::string_view s) {
    for (auto level : kTaxonomyLevels) {
        if (to_string(level) == s) return level;
    }
    throw SchemaError("unknown taxonomy level: " + std::string(s));
}

bool ContentContext::is_wildcard() const {
    return !ip && !country && !use_case && !topic && (!subtasks || subtasks->empty());
}

void to_json(json& j, const ContentContext& ctx) {
    j = json::object();
    if (ctx.ip) j["ip"] = *ctx.ip;
    if (ctx.country) j["country"] = *ctx.country;
    if (ctx.use_case) j["use_case"] = *ctx.use_case;
    if (ctx.topic) j["topic"] = *ctx.topic;
    if (ctx.subtasks) j["subtasks"] = *ctx.subtasks;
    if (ctx.content_type) j["content_type"] = *ctx.content_type;
}

void from_json(const json& j, ContentContext& ctx) {
    if (j.is_null()) {
        ctx = {};
        return;
    }
    if (!j.is_object()) throw SchemaError("context must be an object");
    auto opt = [&](const char* key, std::optional<std::string>& out) {
        auto it = j.find(key);
        if (it == j.end() || it->is_null()) {
            out.reset();
        } else if (it->is_string()) {
            out = it->get<std::string>();
        } else {
            throw SchemaError(std::string("context.") + key + " must be a string");
        }
    };
    opt("ip", ctx.ip);
    opt("country", ctx.country);
    opt("use_case", ctx.use_case);
    opt("topic", ctx.topic);
    opt("content_type", ctx.content_type);
    ctx.subtasks.reset();
    if (auto it = j.find("subtasks"); it != j.end() && !it->is_null()) {
        if (!it->is_array()) throw SchemaError("context.subtasks must be an array");
        std::set<std::string> s;
        for (const auto& v : *it) {
            if (!v.is_string()) throw SchemaError("context.subtasks entries must be strings");
            s.insert(v.get<std::string>());
        }
        ctx.subtasks = std::move(s);
    }
}

// ── Enum strings ─────────────────────────────────────────────────────────────

std::string_view to_string(Polarity p) { return p == Polarity::kDo ? "do" : "prohibit"; }

std::string_view to_string(LrbtcModule m) {
    switch (m) {
    case LrbtcModule::kL: return "L";
    case LrbtcModule::kR: return "R";
    case LrbtcModule::kB: return "B";
    case LrbtcModule::kT: return "T";
    case LrbtcModule::kC: return "C";
    }
    return "?";
}

std::string_view to_string(RuleStatus s) {
    switch (s) {
    case RuleStatus::kActive: return "active";
    case RuleStatus::kSuppressed: return "suppressed";
    case RuleStatus::kHumanOverridden: return "human_overridden";
    }
    return "?";
}

std::string_view to_string(IdScheme s) { return s == IdScheme::kQualified ? "qualified" : "ordinal"; }

Polarity polarity_from_string(std::string_view s) {
    if (s == "do") return Polarity::kDo;
    if (s == "prohibit") return Polarity::kProhibit;
    throw SchemaError("unknown polarity: " + std::string(s));
}

LrbtcModule module_from_string(std::string_view s) {
    for (auto m : {LrbtcModule::kL, LrbtcModule::kR, LrbtcModule::kB, LrbtcModule::kT, LrbtcModule::kC}) {
        if (to_string(m) == s) return m;
    }
    throw SchemaError("unknown LRBTC module: " + std::string(s));
}

RuleStatus status_from_string(std::string_view s) {
    for (auto st : {RuleStatus::kActive, RuleStatus::kSuppressed, RuleStatus::kHumanOverridden}) {
        if (to_string(st) == s) return st;
    }
    throw SchemaError("unknown rule status: " + std::string(s));
}

IdScheme id_scheme_from_string(std::string_view s) {
    if (s == "qualified") return IdScheme::kQualified;
    if (s == "ordinal") return IdScheme::kOrdinal;
    throw SchemaError("unknown id scheme: " + std::string(s));
}

// ── Rule documents ───────────────────────────────────────────────────────────

namespace {

const json& require(const json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) throw SchemaError("missing required key '" + std::string(key) + "' in " + where);
    return *it;
}

std::string require_string(const json& obj, const char* key, const std::string& where) {
    const auto& v = require(obj, key, where);
    if (!v.is_string()) throw SchemaError("'" + std::string(key) + "' in " + where + " must be a string");
    return text::nfc(v.get<std::string>());
}

std::vector<std::string> require_rule_list(const json& obj, const char* key, const std::string& where) {
    const auto& v = require(obj, key, where);
    if (!v.is_array()) throw SchemaError("'" + std::string(key) + "' in " + where + " must be an array");
    std::vector<std::string> out;
    out.reserve(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_string()) {
            throw SchemaError(where + "." + key + "[" + std::to_string(i) + "] must be a string");
        }
        auto t = text::trim(text::nfc(v[i].get<std::string>()));
        if (t.empty()) {
            throw SchemaError(where + "." + key + "[" + std::to_string(i) + "] is empty");
        }
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace

RuleDocument rule_document_from_json(const json& j) {
    if (!j.is_object()) throw SchemaError("rule document must be a JSON object");
    RuleDocument doc;
    const auto& info = require(j, "documentInfo", "document");
    if (!info.is_object()) throw SchemaError("documentInfo must be an object");
    doc.info.title = require_string(info, "title", "documentInfo");
    doc.info.content_about = require_string(info, "content_about", "documentInfo");
    doc.info.other_comments = require_string(info, "other_comments", "documentInfo");
    if (text::trim(doc.info.title).empty()) throw SchemaError("documentInfo.title is empty");

    const auto& sections = require(j, "sections", "document");
    if (!sections.is_array()) throw SchemaError("sections must be an array");
    for (std::size_t i = 0; i < sections.size(); ++i) {
        const auto& s = sections[i];
        const std::string where = "sections[" + std::to_string(i) + "]";
        if (!s.is_object()) throw SchemaError(where + " must be an object");
        RuleSection sec;
        sec.title = require_string(s, "title", where);
        sec.content_about = require_string(s, "content_about", where);
        sec.what_to_do = require_rule_list(s, "what_to_do", where);
        sec.what_to_prohibit = require_rule_list(s, "what_to_prohibit", where);
        if (auto it = s.find("other_comments"); it != s.end() && !it->is_null()) {
            if (!it->is_string()) throw SchemaError(where + ".other_comments must be a string");
            sec.other_comments = text::nfc(it->get<std::string>());
        }
        doc.sections.push_back(std::move(sec));
    }
    return doc;
}

RuleDocument parse_rule_document(std::string_view raw_json) {
    json j;
    try {
        j = json::parse(raw_json);
    } catch (const json::parse_error& e) {
        throw JsonError(std::string("rule document is not valid JSON: ") + e.what());
    }
    return rule_document_from_json(j);
}

json to_json(const RuleDocument& doc) {
    json sections = json::array();
    for (const auto& s : doc.sections) {
        json js = {{"title", s.title},
                   {"content_about", s.content_about},
                   {"what_to_do", s.what_to_do},
                   {"what_to_prohibit", s.what_to_prohibit}};
        if (s.other_comments) js["other_comments"] = *s.other_comments;
        sections.push_back(std::move(js));
    }
    return {{"documentInfo",
             {{"title", doc.info.title},
              {"content_about", doc.info.content_about},
              {"other_comments", doc.info.other_comments}}},
            {"sections", std::move(sections)}};
}

// ── Tags and rules ───────────────────────────────────────────────────────────

const TagSet& TaxonomyTags::at(TaxonomyLevel level) const {
    switch (level) {
    case TaxonomyLevel::kIp: return ip;
    case TaxonomyLevel::kCountry: return countries;
    case TaxonomyLevel::kUseCase: return use_cases;
    case TaxonomyLevel::kTopic: return topics;
    case TaxonomyLevel::kSubtask: return subtasks;
    }
    return ip;
}

TagSet& TaxonomyTags::at(TaxonomyLevel level) {
    return const_cast<TagSet&>(std::as_const(*this).at(level));
}

void to_json(json& j, const TaxonomyTags& t) {
    j = json::object();
    if (!t.ip.empty()) j["ip"] = t.ip;
    if (!t.countries.empty()) j["countries"] = t.countries;
    if (!t.use_cases.empty()) j["use_cases"] = t.use_cases;
    if (!t.topics.empty()) j["topics"] = t.topics;
    if (!t.subtasks.empty()) j["subtasks"] = t.subtasks;
}

void from_json(const json& j, TaxonomyTags& t) {
    t = {};
    if (j.is_null()) return;
    if (!j.is_object()) throw SchemaError("taxonomy tags must be an object");
    auto read = [&](const char* key, TagSet& out) {
        auto it = j.find(key);
        if (it == j.end() || it->is_null()) return;
        if (it->is_string()) {
            out.insert(it->get<std::string>());
            return;
        }
        if (!it->is_array()) throw SchemaError(std::string("tags.") + key + " must be an array");
        for (const auto& v : *it) {
            if (!v.is_string()) throw SchemaError(std::string("tags.") + key + " entries must be strings");
            out.insert(v.get<std::string>());
        }
    };
    read("ip", t.ip);
    read("countries", t.countries);
    read("use_cases", t.use_cases);
    read("topics", t.topics);
    read("subtasks", t.subtasks);
}

bool Rule::suppressed_for(const ContentContext& ctx) const {
    auto eq = [](const std::optional<std::string>& scope, const std::optional<std::string>& q) {
        if (!scope) return true;
        return q && text::fold(*scope) == text::fold(*q);
    };
    for (const auto& s : suppressed_in) {
        if (!eq(s.ip, ctx.ip) || !eq(s.country, ctx.country) || !eq(s.use_case, ctx.use_case) ||
            !eq(s.topic, ctx.topic)) {
            continue;
        }
        if (s.subtasks && !s.subtasks->empty()) {
            if (!ctx.subtasks) continue;
            bool hit = false;
            for (const auto& a : *s.subtasks) {
                for (const auto& b : *ctx.subtasks) {
                    if (text::fold(a) == text::fold(b)) hit = true;
                }
            }
            if (!hit) continue;
        }
        return true;
    }
    return false;
}

void to_json(json& j, const Rule& r) {
    j = {{"rule_id", r.rule_id},
         {"text", r.text},
         {"polarity", to_string(r.polarity)},
         {"lrbtc_module", to_string(r.module)},
         {"taxonomy", r.taxonomy},
         {"source",
          {{"document_title", r.source.document_title},
           {"section_title", r.source.section_title},
           {"ordinal", r.source.ordinal}}},
         {"status", to_string(r.status)}};
    if (!r.suppressed_in.empty()) j["suppressed_in"] = r.suppressed_in;
    if (r.always_valid) j["always_valid"] = true;
    if (r.amended_recommendation) j["amended_recommendation"] = *r.amended_recommendation;
}

void from_json(const json& j, Rule& r) {
    r = {};
    r.rule_id = j.at("rule_id").get<std::string>();
    r.text = j.at("text").get<std::string>();
    r.polarity = polarity_from_string(j.at("polarity").get<std::string>());
    r.module = module_from_string(j.at("lrbtc_module").get<std::string>());
    if (auto it = j.find("taxonomy"); it != j.end()) r.taxonomy = it->get<TaxonomyTags>();
    if (auto it = j.find("source"); it != j.end()) {
        r.source.document_title = it->value("document_title", "");
        r.source.section_title = it->value("section_title", "");
        r.source.ordinal = it->value("ordinal", 0);
    }
    r.status = status_from_string(j.value("status", "active"));
    if (auto it = j.find("suppressed_in"); it != j.end()) {
        r.suppressed_in = it->get<std::vector<ContentContext>>();
    }
    r.always_valid = j.value("always_valid", false);
    if (auto it = j.find("amended_recommendation"); it != j.end() && it->is_string()) {
        r.amended_recommendation = it->get<std::string>();
    }
}

// ── Indexing ─────────────────────────────────────────────────────────────────

std::vector<Rule> index_rules(const RuleDocument& doc, const TaxonomyTags& default_tags,
                              const std::map<std::string, LrbtcModule>& module_assignment,
                              const IndexOptions& options) {
    std::vector<Rule> rules;
    const std::string slug = text::slugify(doc.info.title);
    const int n_sections = static_cast<int>(doc.sections.size());

    auto make_id = [&](int section, Polarity pol, int item) {
        if (options.id_scheme == IdScheme::kQualified) {
            return slug + "." + std::to_string(section) + (pol == Polarity::kDo ? ".D." : ".P.") +
                   std::to_string(item);
        }
        const int block = pol == Polarity::kDo ? section : n_sections + section;
        return std::to_string(block) + "." + std::to_string(item);
    };

    std::set<std::string> seen;
    for (int si = 0; si < n_sections; ++si) {
        const auto& sec = doc.sections[static_cast<std::size_t>(si)];
        const auto tags_it = options.section_tags.find(sec.title);
        const TaxonomyTags& tags = tags_it != options.section_tags.end() ? tags_it->second : default_tags;
        const auto mod_it = module_assignment.find(sec.title);
        const LrbtcModule module = mod_it != module_assignment.end() ? mod_it->second : LrbtcModule::kL;

        auto emit = [&](const std::vector<std::string>& list, Polarity pol) {
            for (std::size_t ii = 0; ii < list.size(); ++ii) {
                Rule r;
                r.rule_id = make_id(si + 1, pol, static_cast<int>(ii) + 1);
                r.text = list[ii];
                r.polarity = pol;
                r.module = module;
                r.taxonomy = tags;
                r.source = {doc.info.title, sec.title, static_cast<int>(ii) + 1};
                if (!seen.insert(r.rule_id).second) {
                    throw DuplicateIdError("duplicate rule id generated: " + r.rule_id);
                }
                rules.push_back(std::move(r));
            }
        };
        emit(sec.what_to_do, Polarity::kDo);
        emit(sec.what_to_prohibit, Polarity::kProhibit);
    }
    return rules;
}

// ── RuleBase ─────────────────────────────────────────────────────────────────

RuleBase::RuleBase() : data_(build({}, 0)) {}

std::shared_ptr<const RuleBase::Data> RuleBase::build(std::map<std::string, Rule, std::less<>> rules,
                                                      std::uint64_t version) {
    auto d = std::make_shared<Data>();
    d->by_id = std::move(rules);
    d->version = version;
    for (const auto& [id, rule] : d->by_id) {
        for (auto level : kTaxonomyLevels) {
            const auto li = static_cast<std::size_t>(level);
            const auto& tags = rule.taxonomy.at(level);
            if (tags.empty()) {
                d->global[li].insert(id);
            }
            for (const auto& tag : tags) {
                d->index[li][text::fold(tag)].insert(id);
            }
        }
    }
    return d;
}

const Rule* RuleBase::find(std::string_view rule_id) const {
    auto it = data_->by_id.find(rule_id);
    return it == data_->by_id.end() ? nullptr : &it->second;
}

std::vector<const Rule*> RuleBase::all() const {
    std::vector<const Rule*> out;
    out.reserve(data_->by_id.size());
    for (const auto& [id, r] : data_->by_id) out.push_back(&r);
    return out;
}

std::set<std::string> RuleBase::ids_matching(TaxonomyLevel level, std::string_view value) const {
    const auto li = static_cast<std::size_t>(level);
    std::set<std::string> out = data_->global[li];
    if (auto it = data_->index[li].find(text::fold(value)); it != data_->index[li].end()) {
        out.insert(it->second.begin(), it->second.end());
    }
    return out;
}

const std::set<std::string>& RuleBase::global_ids(TaxonomyLevel level) const {
    return data_->global[static_cast<std::size_t>(level)];
}

RuleBase RuleBase::upserted(std::span<const Rule> rules) const {
    auto copy = data_->by_id;
    for (const auto& r : rules) {
        auto it = copy.find(r.rule_id);
        if (it == copy.end()) {
            copy.emplace(r.rule_id, r);
            continue;
        }
        Rule replacement = r;
        replacement.status = it->second.status;
        replacement.suppressed_in = it->second.suppressed_in;
        replacement.always_valid = it->second.always_valid;
        replacement.amended_recommendation = it->second.amended_recommendation;
        it->second = std::move(replacement);
    }
    return RuleBase(build(std::move(copy), data_->version + 1));
}

std::optional<RuleBase> RuleBase::modified(std::string_view rule_id,
                                           const std::function<void(Rule&)>& mutate) const {
    auto copy = data_->by_id;
    auto it = copy.find(rule_id);
    if (it == copy.end()) return std::nullopt;
    mutate(it->second);
    it->second.rule_id = it->first;
    return RuleBase(build(std::move(copy), data_->version + 1));
}

RuleBase RuleBase::restore(std::vector<Rule> rules, std::uint64_t version) {
    std::map<std::string, Rule, std::less<>> m;
    for (auto& r : rules) {
        auto id = r.rule_id;
        m.insert_or_assign(std::move(id), std::move(r));
    }
    return RuleBase(build(std::move(m), version));
}

RuleBase upsert_rules(const RuleBase& base, std::span<const Rule> rules) { return base.upserted(rules); }

std::optional<Rule> lookup(const RuleBase& base, std::string_view rule_id) {
    if (const Rule* r = base.find(rule_id)) return *r;
    return std::nullopt;
}

// ── RuleBaseStore ────────────────────────────────────────────────────────────

RuleBaseStore::RuleBaseStore(RuleBase initial) : current_(std::move(initial)) {}

RuleBase RuleBaseStore::snapshot() const {
    std::lock_guard lock(read_mutex_);
    return current_;
}

RuleBase RuleBaseStore::update(const std::function<RuleBase(const RuleBase&)>& fn) {
    std::lock_guard write(write_mutex_);
    RuleBase next = fn(snapshot());
    {
        std::lock_guard lock(read_mutex_);
        current_ = next;
    }
    if (listener_) listener_(next);
    return next;
}

void RuleBaseStore::set_listener(std::function<void(const RuleBase&)> listener) {
    std::lock_guard write(write_mutex_);
    listener_ = std::move(listener);
}

} // namespace qc
