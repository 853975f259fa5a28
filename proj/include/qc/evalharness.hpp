#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace qc::eval {

// Undefined metrics (zero denominators) are std::nullopt, never 0.

enum class Label { kViolation, kCompliant };
enum class ErrorClass { kMisspelling, kToSplitToMerge, kPunctuation, kGrammar, kInformalNonword };

inline constexpr std::array<ErrorClass, 5> kErrorClasses = {
    ErrorClass::kMisspelling, ErrorClass::kToSplitToMerge, ErrorClass::kPunctuation, ErrorClass::kGrammar,
    ErrorClass::kInformalNonword};

std::string_view to_string(Label l);
Label label_from_string(std::string_view s);
std::string_view to_string(ErrorClass c);
/// Accepts the canonical names plus "ToSplit", "ToMerge", "ToSplit/ToMerge",
/// "Informal", "Nonword", "Informal/Nonword". Throws UnknownClass.
ErrorClass error_class_from_string(std::string_view s);

/// Half-open character range [start, end).
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;

    bool operator==(const Span&) const = default;
};

bool spans_overlap(const Span& a, const Span& b);

struct ErrorAnnotation {
    Span span;
    ErrorClass error_class = ErrorClass::kMisspelling;

    bool operator==(const ErrorAnnotation&) const = default;
};

struct LabeledSample {
    std::string sample_id;
    std::string text;
    Label gold_label = Label::kCompliant;
    std::optional<int> gold_score;
    std::vector<ErrorAnnotation> error_annotations;
    std::optional<std::string> group;  // AIReg system id or CSpelling subset

    bool operator==(const LabeledSample&) const = default;
};

struct PredictionRecord {
    std::string sample_id;
    Label predicted_label = Label::kCompliant;
    std::optional<int> predicted_score;
    std::vector<ErrorAnnotation> detected_errors;

    bool operator==(const PredictionRecord&) const = default;
};

// ── Classification ───────────────────────────────────────────────────────────

struct ConfusionCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;

    std::size_t total() const { return tp + fp + tn + fn; }
    bool operator==(const ConfusionCounts&) const = default;
};

/// Violation is the positive class. Every gold sample needs exactly one
/// prediction and vice versa (MissingSample, DuplicateSample).
ConfusionCounts confusion(std::span<const PredictionRecord> preds, std::span<const LabeledSample> golds);

struct ClassificationMetrics {
    std::optional<double> accuracy;
    std::optional<double> recall;
    std::optional<double> precision;
    std::optional<double> f1;
    std::optional<double> specificity;
};

/// Throws EmptyCounts when the total is zero.
ClassificationMetrics classification_metrics(const ConfusionCounts& c);

/// Harmonic mean; undefined when either input is undefined or both are 0.
std::optional<double> f1_score(std::optional<double> precision, std::optional<double> recall);

// ── Agreement ────────────────────────────────────────────────────────────────

/// Quadratically weighted Cohen's kappa over scores 1..k. Throws
/// LengthMismatch (|a| != |b| or fewer than 2), OutOfRangeScore and
/// DegenerateMarginals (no expected disagreement).
double weighted_kappa(std::span<const int> a, std::span<const int> b, int k);

/// Pearson correlation of average ranks. Throws LengthMismatch, ZeroVariance.
double spearman(std::span<const double> a, std::span<const double> b);

/// 1-based ranks; tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> v);

struct BiasMae {
    double bias = 0.0;  // mean(llm - human)
    double mae = 0.0;   // mean(|llm - human|)
};

BiasMae bias_mae(std::span<const double> llm, std::span<const double> human);

struct AgreementStats {
    std::optional<double> kappa_qw;
    std::optional<double> spearman_rho;
    std::optional<double> bias;
    std::optional<double> mae;
};

// ── Error classes and subsets ────────────────────────────────────────────────

struct ErrorClassRecall {
    ErrorClass error_class = ErrorClass::kMisspelling;
    std::size_t gt_count = 0;
    std::size_t detected_count = 0;
    std::optional<double> recall;
};

/// A gold error is detected when a prediction for the same sample has the
/// same class and shares at least one character. Samples without a
/// prediction count as detecting nothing. One row per class, in class order.
std::vector<ErrorClassRecall> per_class_recall(std::span<const LabeledSample> golds,
                                               std::span<const PredictionRecord> preds);

struct SubsetStats {
    std::string subset_id;
    std::vector<double> per_sample_accuracy;
    double mean = 0.0;
    std::optional<double> sd;  // n-1 denominator; undefined for a single sample
};

/// One row per subset, in key order. Throws EmptySubset.
std::vector<SubsetStats> subset_stats(const std::map<std::string, std::vector<double>>& groups);

struct SubsetDelta {
    std::string subset_id;
    double mean_a = 0.0;
    double mean_b = 0.0;
    double delta = 0.0;  // mean_a - mean_b
};

struct SystemComparison {
    std::vector<SubsetDelta> subsets;
    double overall_delta = 0.0;  // mean of the per-subset deltas
};

/// Both systems must cover the same subsets (SchemaError otherwise).
SystemComparison compare_systems(const std::map<std::string, std::vector<double>>& a,
                                 const std::map<std::string, std::vector<double>>& b);

/// Fraction of each annotated sample's gold errors that were detected,
/// grouped by sample group ("all" when absent). Unannotated samples are skipped.
std::map<std::string, std::vector<double>> per_sample_accuracy(std::span<const LabeledSample> golds,
                                                               std::span<const PredictionRecord> preds);

/// Pairwise summation in a fixed order, so results do not depend on how the
/// caller partitioned the work.
double pairwise_sum(std::span<const double> v);

// ── Fixtures ─────────────────────────────────────────────────────────────────

struct AiregFixture {
    std::vector<LabeledSample> samples;
    std::vector<std::string> warnings;  // 2:1 ratio deviations
};

/// JSON lines: {"sample_id", "system_id"?, "text", "gold_label", "gold_score"?}.
/// Scores must lie in 1..score_levels. Throws SchemaError.
AiregFixture load_aireg_fixture(const std::string& path, int score_levels = 5);

/// JSON lines: {"sample_id", "text", "subset"?, "gold_label"?,
/// "errors": [{"start", "end", "class"}]}. Without gold_label a sample with
/// errors is a violation. Throws SchemaError.
std::vector<LabeledSample> load_cspelling_fixture(const std::string& path);

/// JSON lines: {"sample_id", "predicted_label", "predicted_score"?,
/// "detected_errors"?: [{"start", "end", "class"}]}. Throws SchemaError.
std::vector<PredictionRecord> load_predictions(const std::string& path);

// ── Reports ──────────────────────────────────────────────────────────────────

struct EvalOptions {
    int score_levels = 5;
};

struct EvalReport {
    std::size_t samples = 0;
    ConfusionCounts counts;
    ClassificationMetrics metrics;
    std::optional<AgreementStats> agreement;  // when every sample has both scores
    std::vector<ErrorClassRecall> class_recall;  // when any sample is annotated
    std::vector<SubsetStats> subsets;

    /// True when any of accuracy, recall, precision, f1, specificity is undefined.
    bool has_undefined_core_metric() const;
};

EvalReport evaluate(std::span<const LabeledSample> golds, std::span<const PredictionRecord> preds,
                    const EvalOptions& options = {});

nlohmann::json to_json(const EvalReport& r);
std::string format_table(const EvalReport& r);

} // namespace qc::eval
