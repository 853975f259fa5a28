#include "qc/errors.hpp"
#include "qc/rulebase.hpp"
#include "qc/text.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace qc {

using nlohmann::json;

void write_file_atomic(const std::string& path, const std::string& contents) {
    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StorageError("cannot open " + tmp.string() + " for writing");
        out << contents;
        out.flush();
        if (!out) throw StorageError("failed writing " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw StorageError("rename to " + target.string() + " failed: " + ec.message());
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StorageError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void to_json(json& j, const IngestSidecar& s) {
    json modules = json::object();
    for (const auto& [title, m] : s.module_map) modules[title] = to_string(m);
    json section_tags = json::object();
    for (const auto& [title, tags] : s.options.section_tags) section_tags[title] = tags;
    j = {{"default_tags", s.default_tags},
         {"module_map", std::move(modules)},
         {"section_tags", std::move(section_tags)},
         {"id_scheme", to_string(s.options.id_scheme)}};
}

void from_json(const json& j, IngestSidecar& s) {
    s = {};
    if (!j.is_object()) throw SchemaError("sidecar must be an object");
    if (auto it = j.find("default_tags"); it != j.end()) s.default_tags = it->get<TaxonomyTags>();
    if (auto it = j.find("module_map"); it != j.end() && !it->is_null()) {
        if (!it->is_object()) throw SchemaError("module_map must be an object");
        for (const auto& [title, m] : it->items()) {
            if (!m.is_string()) throw SchemaError("module_map values must be strings");
            s.module_map[title] = module_from_string(m.get<std::string>());
        }
    }
    if (auto it = j.find("section_tags"); it != j.end() && !it->is_null()) {
        if (!it->is_object()) throw SchemaError("section_tags must be an object");
        for (const auto& [title, tags] : it->items()) s.options.section_tags[title] = tags.get<TaxonomyTags>();
    }
    s.options.id_scheme = id_scheme_from_string(j.value("id_scheme", "qualified"));
}

RuleRepository::RuleRepository(std::string dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw StorageError("cannot create rule directory " + dir_ + ": " + ec.message());
}

RuleBase RuleRepository::load() const {
    std::vector<fs::path> docs;
    for (const auto& entry : fs::directory_iterator(dir_)) {
        const auto name = entry.path().filename().string();
        if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
        if (name == "overrides.json" || name.ends_with(".sidecar.json")) continue;
        docs.push_back(entry.path());
    }
    std::sort(docs.begin(), docs.end());

    std::vector<Rule> rules;
    for (const auto& p : docs) {
        RuleDocument doc = parse_rule_document(read_file(p.string()));
        IngestSidecar sidecar;
        const fs::path side = p.parent_path() / (p.stem().string() + ".sidecar.json");
        if (fs::exists(side)) {
            try {
                sidecar = json::parse(read_file(side.string())).get<IngestSidecar>();
            } catch (const json::exception& e) {
                throw SchemaError("bad sidecar " + side.string() + ": " + e.what());
            }
        }
        auto indexed = index_rules(doc, sidecar.default_tags, sidecar.module_map, sidecar.options);
        rules.insert(rules.end(), std::make_move_iterator(indexed.begin()),
                     std::make_move_iterator(indexed.end()));
    }

    std::uint64_t version = rules.empty() ? 0 : 1;
    const fs::path overrides_path = fs::path(dir_) / "overrides.json";
    if (fs::exists(overrides_path)) {
        json o;
        try {
            o = json::parse(read_file(overrides_path.string()));
        } catch (const json::exception& e) {
            throw SchemaError("bad overrides.json: " + std::string(e.what()));
        }
        version = o.value("version", version);
        const json& per_rule = o.contains("rules") ? o["rules"] : json::object();
        for (auto& r : rules) {
            auto it = per_rule.find(r.rule_id);
            if (it == per_rule.end()) continue;
            r.status = status_from_string(it->value("status", "active"));
            if (auto s = it->find("suppressed_in"); s != it->end()) {
                r.suppressed_in = s->get<std::vector<ContentContext>>();
            }
            r.always_valid = it->value("always_valid", false);
            if (auto a = it->find("amended_recommendation"); a != it->end() && a->is_string()) {
                r.amended_recommendation = a->get<std::string>();
            }
        }
    }
    return RuleBase::restore(std::move(rules), version);
}

std::string RuleRepository::save_document(const RuleDocument& doc, const IngestSidecar& sidecar) const {
    const std::string slug = text::slugify(doc.info.title);
    const fs::path base = fs::path(dir_) / slug;
    write_file_atomic(base.string() + ".json", to_json(doc).dump(2) + "\n");
    write_file_atomic(base.string() + ".sidecar.json", json(sidecar).dump(2) + "\n");
    return slug;
}

void RuleRepository::save_overrides(const RuleBase& base) const {
    json per_rule = json::object();
    for (const Rule* r : base.all()) {
        if (r->status == RuleStatus::kActive && r->suppressed_in.empty() && !r->always_valid &&
            !r->amended_recommendation) {
            continue;
        }
        json e = {{"status", to_string(r->status)}};
        if (!r->suppressed_in.empty()) e["suppressed_in"] = r->suppressed_in;
        if (r->always_valid) e["always_valid"] = true;
        if (r->amended_recommendation) e["amended_recommendation"] = *r->amended_recommendation;
        per_rule[r->rule_id] = std::move(e);
    }
    json o = {{"version", base.version()}, {"rules", std::move(per_rule)}};
    write_file_atomic((fs::path(dir_) / "overrides.json").string(), o.dump(2) + "\n");
}

} // namespace qc
