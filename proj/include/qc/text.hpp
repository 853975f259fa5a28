#pragma once

#include <chrono>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>

namespace qc::text {

std::string trim(std::string_view s);

/// Unicode NFC normalization of UTF-8 text. Invalid UTF-8 is passed through
/// with replacement characters.
std::string nfc(std::string_view s);

/// NFC followed by full Unicode case folding; the key used for
/// case-insensitive taxonomy matching.
std::string fold(std::string_view s);

/// Collapses every run of whitespace to one ASCII space and trims the ends.
std::string normalize_whitespace(std::string_view s);

/// Lowercased, punctuation-stripped word set used for snippet similarity.
std::set<std::string> token_set(std::string_view s);

/// |a ∩ b| / |a ∪ b|; two empty sets are identical (1.0).
double jaccard(const std::set<std::string>& a, const std::set<std::string>& b);

/// Lowercase ASCII slug: runs of non-alphanumerics become a single '-'.
std::string slugify(std::string_view s);

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view s);

using TimePoint = std::chrono::system_clock::time_point;

/// UTC ISO-8601 with millisecond precision, e.g. 2025-07-01T12:00:00.000Z.
std::string to_iso8601(TimePoint t);
TimePoint from_iso8601(std::string_view s);

} // namespace qc::text
