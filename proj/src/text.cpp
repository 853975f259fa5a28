#include "qc/text.hpp"

#include "qc/errors.hpp"

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <cctype>
#include <ctime>
#include <cstdio>

namespace qc::text {

namespace {

bool is_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

const icu::Normalizer2& nfc_normalizer() {
    UErrorCode status = U_ZERO_ERROR;
    const icu::Normalizer2* n = icu::Normalizer2::getNFCInstance(status);
    if (U_FAILURE(status) || n == nullptr) {
        throw std::runtime_error("ICU NFC normalizer unavailable");
    }
    return *n;
}

icu::UnicodeString nfc_unicode(std::string_view s) {
    auto in = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
    UErrorCode status = U_ZERO_ERROR;
    auto out = nfc_normalizer().normalize(in, status);
    if (U_FAILURE(status)) {
        return in;
    }
    return out;
}

std::string to_utf8(const icu::UnicodeString& u) {
    std::string out;
    u.toUTF8String(out);
    return out;
}

} // namespace

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string nfc(std::string_view s) {
    bool ascii = true;
    for (char c : s) {
        if (static_cast<unsigned char>(c) >= 0x80) {
            ascii = false;
            break;
        }
    }
    if (ascii) return std::string(s);
    return to_utf8(nfc_unicode(s));
}

std::string fold(std::string_view s) {
    auto u = nfc_unicode(s);
    u.foldCase();
    // folding can denormalize (e.g. U+0130), so renormalize
    UErrorCode status = U_ZERO_ERROR;
    auto out = nfc_normalizer().normalize(u, status);
    return to_utf8(U_FAILURE(status) ? u : out);
}

std::string normalize_whitespace(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char c : s) {
        if (is_space(static_cast<unsigned char>(c))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(c);
    }
    return out;
}

std::set<std::string> token_set(std::string_view s) {
    auto u = nfc_unicode(s);
    u.foldCase();
    std::set<std::string> tokens;
    icu::UnicodeString current;
    auto flush = [&] {
        if (!current.isEmpty()) {
            tokens.insert(to_utf8(current));
            current.remove();
        }
    };
    for (int32_t i = 0; i < u.length();) {
        UChar32 c = u.char32At(i);
        if (u_isalnum(c) || u_charType(c) == U_NON_SPACING_MARK) {
            current.append(c);
        } else if (u_isUWhiteSpace(c)) {
            flush();
        }
        // other punctuation is stripped without splitting ("don't" -> "dont")
        i += U16_LENGTH(c);
    }
    flush();
    return tokens;
}

double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& t : a) {
        if (b.count(t) != 0) ++inter;
    }
    const std::size_t uni = a.size() + b.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::string slugify(std::string_view s) {
    std::string out;
    bool dash = false;
    for (char ch : s) {
        auto c = static_cast<unsigned char>(ch);
        if (c < 0x80 && std::isalnum(c)) {
            if (dash && !out.empty()) out.push_back('-');
            dash = false;
            out.push_back(static_cast<char>(std::tolower(c)));
        } else {
            dash = true;
        }
    }
    return out.empty() ? std::string("doc") : out;
}

std::string fnv1a_hex(std::string_view s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string to_iso8601(TimePoint t) {
    using namespace std::chrono;
    const auto ms_total = duration_cast<milliseconds>(t.time_since_epoch()).count();
    auto secs = static_cast<std::time_t>(ms_total / 1000);
    auto ms = static_cast<int>(ms_total % 1000);
    if (ms < 0) {
        ms += 1000;
        --secs;
    }
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                  tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, ms);
    return buf;
}

TimePoint from_iso8601(std::string_view s) {
    std::tm tm{};
    int ms = 0;
    std::string str(s);
    int n = std::sscanf(str.c_str(), "%d-%d-%dT%d:%d:%d.%dZ", &tm.tm_year, &tm.tm_mon, &tm.tm_mday,
                        &tm.tm_hour, &tm.tm_min, &tm.tm_sec, &ms);
    if (n < 6) {
        throw JsonError("invalid ISO-8601 timestamp: " + str);
    }
    tm.tm_year -= 1900;
    tm.tm_mon -= 1;
    const std::time_t secs = timegm(&tm);
    return TimePoint(std::chrono::seconds(secs)) + std::chrono::milliseconds(ms);
}

} // namespace qc::text
