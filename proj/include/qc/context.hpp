#pragma once

#include <array>
#include <optional>
#include <set>
#include <string>
#include <string_view>

#include <json.hpp>

namespace qc {

/// Waterfall levels, in the fixed order they are applied.
enum class TaxonomyLevel { kIp, kCountry, kUseCase, kTopic, kSubtask };

inline constexpr std::array<TaxonomyLevel, 5> kTaxonomyLevels = {
    TaxonomyLevel::kIp, TaxonomyLevel::kCountry, TaxonomyLevel::kUseCase,
    TaxonomyLevel::kTopic, TaxonomyLevel::kSubtask};

std::string_view to_string(TaxonomyLevel level);
TaxonomyLevel taxonomy_level_from_string(std::string_view s);

/// Where a piece of content sits in the taxonomy. An absent field means
/// "do not narrow at this level"; an empty subtask set counts as absent.
struct ContentContext {
    std::optional<std::string> ip;
    std::optional<std::string> country;
    std::optional<std::string> use_case;
    std::optional<std::string> topic;
    std::optional<std::set<std::string>> subtasks;
    std::optional<std::string> content_type;

    bool operator==(const ContentContext&) const = default;

    /// True when no level narrows (content_type does not take part in filtering).
    bool is_wildcard() const;
};

void to_json(nlohmann::json& j, const ContentContext& ctx);
void from_json(const nlohmann::json& j, ContentContext& ctx);

} // namespace qc
