#include <gtest/gtest.h>

#include "qc/text.hpp"
#include "support/oracles.hpp"

using namespace qc::text;

TEST(Text, TrimStripsSurroundingWhitespaceOnly) {
    EXPECT_EQ(trim("  a b \n\t"), "a b");
    EXPECT_EQ(trim(""), "");
    EXPECT_EQ(trim(" \t "), "");
}

TEST(Text, NfcComposesCombiningMarks) {
    EXPECT_EQ(nfc("e\xCC\x81"), "\xC3\xA9");
    EXPECT_EQ(nfc("plain"), "plain");
}

TEST(Text, FoldIsCaseInsensitiveAndNormalized) {
    EXPECT_EQ(fold("UK"), fold("uk"));
    EXPECT_EQ(fold("Stra\xC3\x9F" "e"), "strasse");
    EXPECT_EQ(fold("E\xCC\x81"), fold("\xC3\xA9"));
}

TEST(Text, NormalizeWhitespaceCollapsesRuns) {
    EXPECT_EQ(normalize_whitespace("  a \n\n b\t c  "), "a b c");
    EXPECT_EQ(normalize_whitespace(""), "");
}

TEST(Text, TokenSetLowercasesAndDropsPunctuation) {
    EXPECT_EQ(token_set("Hello, World! hello"), (std::set<std::string>{"hello", "world"}));
    EXPECT_TRUE(token_set("...").empty());
}

TEST(Text, JaccardMatchesWordOracle) {
    const std::vector<std::pair<std::string, std::string>> cases = {
        {"teams recieve updates faster", "recieve updates faster"},
        {"the color", "a colour"},
        {"", ""},
        {"one", ""},
        {"Pick any color you like", "pick ANY color, you like!"},
    };
    for (const auto& [a, b] : cases) {
        EXPECT_DOUBLE_EQ(jaccard(token_set(a), token_set(b)), oracle::word_jaccard(a, b)) << a << " | " << b;
    }
}

TEST(Text, SlugifyCollapsesSeparators) {
    EXPECT_EQ(slugify("Document Title Here"), "document-title-here");
    EXPECT_EQ(slugify("  A -- B!! "), "a-b");
}

TEST(Text, Fnv1aKnownVectors) {
    EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
    EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(Text, Iso8601RoundTripsAtMillisecondPrecision) {
    const auto t = from_iso8601("2025-07-01T12:34:56.789Z");
    EXPECT_EQ(to_iso8601(t), "2025-07-01T12:34:56.789Z");
    EXPECT_EQ(to_iso8601(from_iso8601("1970-01-01T00:00:00.000Z")), "1970-01-01T00:00:00.000Z");
}
