#include "qc/evalharness.hpp"

#include "qc/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

namespace qc::eval {

using nlohmann::json;

std::string_view to_string(Label l) {
    return l == Label::kViolation ? "violation" : "compliant";
}

Label label_from_string(std::string_view s) {
    if (s == "violation") return Label::kViolation;
    if (s == "compliant") return Label::kCompliant;
    throw SchemaError("label must be \"violation\" or \"compliant\", got \"" + std::string(s) + "\"");
}

std::string_view to_string(ErrorClass c) {
    switch (c) {
    case ErrorClass::kMisspelling: return "Misspelling";
    case ErrorClass::kToSplitToMerge: return "ToSplitToMerge";
    case ErrorClass::kPunctuation: return "Punctuation";
    case ErrorClass::kGrammar: return "Grammar";
    case ErrorClass::kInformalNonword: return "InformalNonword";
    }
    return "Misspelling";
}

ErrorClass error_class_from_string(std::string_view s) {
    if (s == "Misspelling") return ErrorClass::kMisspelling;
    if (s == "ToSplitToMerge" || s == "ToSplit/ToMerge" || s == "ToSplit" || s == "ToMerge") {
        return ErrorClass::kToSplitToMerge;
    }
    if (s == "Punctuation") return ErrorClass::kPunctuation;
    if (s == "Grammar") return ErrorClass::kGrammar;
    if (s == "InformalNonword" || s == "Informal/Nonword" || s == "Informal" || s == "Nonword") {
        return ErrorClass::kInformalNonword;
    }
    throw UnknownClass("unknown error class \"" + std::string(s) + "\"");
}

bool spans_overlap(const Span& a, const Span& b) {
    return std::max(a.start, b.start) < std::min(a.end, b.end);
}

double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 8) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t half = v.size() / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

namespace {

double mean_of(std::span<const double> v) {
    return pairwise_sum(v) / static_cast<double>(v.size());
}

} // namespace

// ── Classification ───────────────────────────────────────────────────────────

ConfusionCounts confusion(std::span<const PredictionRecord> preds, std::span<const LabeledSample> golds) {
    std::unordered_map<std::string, const LabeledSample*> gold_by_id;
    for (const auto& g : golds) {
        if (!gold_by_id.emplace(g.sample_id, &g).second) {
            throw DuplicateSample("gold sample " + g.sample_id + " appears twice");
        }
    }
    std::set<std::string> seen;
    ConfusionCounts c;
    for (const auto& p : preds) {
        auto it = gold_by_id.find(p.sample_id);
        if (it == gold_by_id.end()) throw MissingSample("prediction for unknown sample " + p.sample_id);
        if (!seen.insert(p.sample_id).second) throw DuplicateSample("sample " + p.sample_id + " predicted twice");
        const bool gold_pos = it->second->gold_label == Label::kViolation;
        const bool pred_pos = p.predicted_label == Label::kViolation;
        if (gold_pos && pred_pos) ++c.tp;
        else if (gold_pos) ++c.fn;
        else if (pred_pos) ++c.fp;
        else ++c.tn;
    }
    if (seen.size() != gold_by_id.size()) {
        for (const auto& g : golds) {
            if (!seen.contains(g.sample_id)) throw MissingSample("no prediction for sample " + g.sample_id);
        }
    }
    return c;
}

std::optional<double> f1_score(std::optional<double> precision, std::optional<double> recall) {
    if (!precision || !recall || *precision + *recall == 0.0) return std::nullopt;
    return 2.0 * *precision * *recall / (*precision + *recall);
}

ClassificationMetrics classification_metrics(const ConfusionCounts& c) {
    if (c.total() == 0) throw EmptyCounts("confusion counts are all zero");
    auto ratio = [](std::size_t num, std::size_t den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    ClassificationMetrics m;
    m.accuracy = ratio(c.tp + c.tn, c.total());
    m.recall = ratio(c.tp, c.tp + c.fn);
    m.precision = ratio(c.tp, c.tp + c.fp);
    m.specificity = ratio(c.tn, c.tn + c.fp);
    m.f1 = f1_score(m.precision, m.recall);
    return m;
}

// ── Agreement ────────────────────────────────────────────────────────────────

double weighted_kappa(std::span<const int> a, std::span<const int> b, int k) {
    if (a.size() != b.size()) throw LengthMismatch("rating vectors differ in length");
    if (a.size() < 2) throw LengthMismatch("kappa needs at least two ratings");
    if (k < 2) throw OutOfRangeScore("kappa needs at least two score levels");
    const auto n = static_cast<std::int64_t>(a.size());
    std::vector<std::int64_t> joint(static_cast<std::size_t>(k * k), 0);
    std::vector<std::int64_t> rows(static_cast<std::size_t>(k), 0);
    std::vector<std::int64_t> cols(static_cast<std::size_t>(k), 0);
    for (std::size_t t = 0; t < a.size(); ++t) {
        if (a[t] < 1 || a[t] > k || b[t] < 1 || b[t] > k) {
            throw OutOfRangeScore("scores must lie in 1.." + std::to_string(k));
        }
        ++joint[static_cast<std::size_t>((a[t] - 1) * k + (b[t] - 1))];
        ++rows[static_cast<std::size_t>(a[t] - 1)];
        ++cols[static_cast<std::size_t>(b[t] - 1)];
    }
    // With O = joint/n and E = rows*cols/n^2 the (k-1)^2 weight scale and the
    // 1/n^2 factors cancel, leaving an exact integer ratio.
    std::int64_t observed = 0;
    std::int64_t expected = 0;
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            const std::int64_t w = static_cast<std::int64_t>(i - j) * (i - j);
            observed += w * joint[static_cast<std::size_t>(i * k + j)];
            expected += w * rows[static_cast<std::size_t>(i)] * cols[static_cast<std::size_t>(j)];
        }
    }
    if (expected == 0) throw DegenerateMarginals("no expected disagreement: both raters are constant and equal");
    return 1.0 - static_cast<double>(n * observed) / static_cast<double>(expected);
}

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = rank;
        i = j + 1;
    }
    return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw LengthMismatch("vectors differ in length");
    if (a.size() < 2) throw LengthMismatch("spearman needs at least two values");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const double ma = mean_of(ra);
    const double mb = mean_of(rb);
    std::vector<double> xy(ra.size()), xx(ra.size()), yy(ra.size());
    for (std::size_t i = 0; i < ra.size(); ++i) {
        const double dx = ra[i] - ma;
        const double dy = rb[i] - mb;
        xy[i] = dx * dy;
        xx[i] = dx * dx;
        yy[i] = dy * dy;
    }
    const double sxx = pairwise_sum(xx);
    const double syy = pairwise_sum(yy);
    if (sxx == 0.0 || syy == 0.0) throw ZeroVariance("spearman is undefined for a constant vector");
    return std::clamp(pairwise_sum(xy) / std::sqrt(sxx * syy), -1.0, 1.0);
}

BiasMae bias_mae(std::span<const double> llm, std::span<const double> human) {
    if (llm.size() != human.size() || llm.empty()) {
        throw LengthMismatch("bias/mae need two non-empty vectors of equal length");
    }
    std::vector<double> diff(llm.size()), absdiff(llm.size());
    for (std::size_t i = 0; i < llm.size(); ++i) {
        diff[i] = llm[i] - human[i];
        absdiff[i] = std::abs(diff[i]);
    }
    return {mean_of(diff), mean_of(absdiff)};
}

// ── Error classes and subsets ────────────────────────────────────────────────

namespace {

std::unordered_map<std::string, const PredictionRecord*> index_preds(std::span<const PredictionRecord> preds) {
    std::unordered_map<std::string, const PredictionRecord*> out;
    for (const auto& p : preds) {
        if (!out.emplace(p.sample_id, &p).second) {
            throw DuplicateSample("sample " + p.sample_id + " predicted twice");
        }
    }
    return out;
}

bool detected(const ErrorAnnotation& gold, const PredictionRecord* pred) {
    if (pred == nullptr) return false;
    return std::any_of(pred->detected_errors.begin(), pred->detected_errors.end(), [&](const ErrorAnnotation& d) {
        return d.error_class == gold.error_class && spans_overlap(d.span, gold.span);
    });
}

} // namespace

std::vector<ErrorClassRecall> per_class_recall(std::span<const LabeledSample> golds,
                                               std::span<const PredictionRecord> preds) {
    const auto by_id = index_preds(preds);
    std::vector<ErrorClassRecall> rows;
    for (auto cls : kErrorClasses) rows.push_back({cls, 0, 0, std::nullopt});
    for (const auto& g : golds) {
        auto it = by_id.find(g.sample_id);
        const PredictionRecord* p = it == by_id.end() ? nullptr : it->second;
        for (const auto& e : g.error_annotations) {
            auto& row = rows[static_cast<std::size_t>(e.error_class)];
            ++row.gt_count;
            if (detected(e, p)) ++row.detected_count;
        }
    }
    for (auto& row : rows) {
        if (row.gt_count > 0) {
            row.recall = static_cast<double>(row.detected_count) / static_cast<double>(row.gt_count);
        }
    }
    return rows;
}

std::vector<SubsetStats> subset_stats(const std::map<std::string, std::vector<double>>& groups) {
    std::vector<SubsetStats> out;
    for (const auto& [id, values] : groups) {
        if (values.empty()) throw EmptySubset("subset " + id + " has no samples");
        SubsetStats s;
        s.subset_id = id;
        s.per_sample_accuracy = values;
        s.mean = mean_of(values);
        if (values.size() > 1) {
            std::vector<double> sq(values.size());
            for (std::size_t i = 0; i < values.size(); ++i) sq[i] = (values[i] - s.mean) * (values[i] - s.mean);
            s.sd = std::sqrt(pairwise_sum(sq) / static_cast<double>(values.size() - 1));
        }
        out.push_back(std::move(s));
    }
    return out;
}

SystemComparison compare_systems(const std::map<std::string, std::vector<double>>& a,
                                 const std::map<std::string, std::vector<double>>& b) {
    if (a.size() != b.size() ||
        !std::equal(a.begin(), a.end(), b.begin(), [](const auto& x, const auto& y) { return x.first == y.first; })) {
        throw SchemaError("both systems must report the same subsets");
    }
    if (a.empty()) throw EmptySubset("no subsets to compare");
    const auto sa = subset_stats(a);
    const auto sb = subset_stats(b);
    SystemComparison out;
    std::vector<double> deltas;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        out.subsets.push_back({sa[i].subset_id, sa[i].mean, sb[i].mean, sa[i].mean - sb[i].mean});
        deltas.push_back(sa[i].mean - sb[i].mean);
    }
    out.overall_delta = mean_of(deltas);
    return out;
}

std::map<std::string, std::vector<double>> per_sample_accuracy(std::span<const LabeledSample> golds,
                                                               std::span<const PredictionRecord> preds) {
    const auto by_id = index_preds(preds);
    std::map<std::string, std::vector<double>> out;
    for (const auto& g : golds) {
        if (g.error_annotations.empty()) continue;
        auto it = by_id.find(g.sample_id);
        const PredictionRecord* p = it == by_id.end() ? nullptr : it->second;
        std::size_t hit = 0;
        for (const auto& e : g.error_annotations) hit += detected(e, p) ? 1 : 0;
        out[g.group.value_or("all")].push_back(static_cast<double>(hit) /
                                               static_cast<double>(g.error_annotations.size()));
    }
    return out;
}

// ── Fixtures ─────────────────────────────────────────────────────────────────

namespace {

std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open " + path);
    std::vector<json> rows;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            json j = json::parse(line);
            if (!j.is_object()) throw SchemaError(path + ":" + std::to_string(line_no) + ": expected an object");
            rows.push_back(std::move(j));
        } catch (const json::parse_error& e) {
            throw SchemaError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (rows.empty()) throw SchemaError(path + " contains no records");
    return rows;
}

std::vector<ErrorAnnotation> annotations_from(const json& arr, const std::string& where) {
    if (!arr.is_array()) throw SchemaError(where + ": error list must be an array");
    std::vector<ErrorAnnotation> out;
    for (const auto& e : arr) {
        ErrorAnnotation a;
        try {
            a.span.start = e.at("start").get<std::size_t>();
            a.span.end = e.at("end").get<std::size_t>();
            a.error_class = error_class_from_string(e.at("class").get<std::string>());
        } catch (const json::exception& ex) {
            throw SchemaError(where + ": " + ex.what());
        } catch (const UnknownClass& ex) {
            throw SchemaError(where + ": " + ex.what());
        }
        if (a.span.start >= a.span.end) throw SchemaError(where + ": span start must be before end");
        out.push_back(a);
    }
    return out;
}

template <typename Fn>
auto guarded(const std::string& where, Fn fn) {
    try {
        return fn();
    } catch (const json::exception& e) {
        throw SchemaError(where + ": " + e.what());
    }
}

} // namespace

AiregFixture load_aireg_fixture(const std::string& path, int score_levels) {
    AiregFixture out;
    std::set<std::string> ids;
    std::map<std::string, std::pair<int, int>> per_system;  // violations, compliants
    std::size_t row = 0;
    for (const auto& j : read_jsonl(path)) {
        const std::string where = path + " record " + std::to_string(++row);
        LabeledSample s = guarded(where, [&] {
            LabeledSample x;
            x.sample_id = j.at("sample_id").get<std::string>();
            x.text = j.at("text").get<std::string>();
            x.gold_label = label_from_string(j.at("gold_label").get<std::string>());
            if (auto it = j.find("gold_score"); it != j.end() && !it->is_null()) x.gold_score = it->get<int>();
            if (auto it = j.find("system_id"); it != j.end() && !it->is_null()) x.group = it->get<std::string>();
            return x;
        });
        if (s.gold_score && (*s.gold_score < 1 || *s.gold_score > score_levels)) {
            throw SchemaError(where + ": gold_score outside 1.." + std::to_string(score_levels));
        }
        if (!ids.insert(s.sample_id).second) throw SchemaError(where + ": duplicate sample_id " + s.sample_id);
        if (s.group) {
            auto& [v, c] = per_system[*s.group];
            (s.gold_label == Label::kViolation ? v : c) += 1;
        }
        out.samples.push_back(std::move(s));
    }

    const auto violations = std::count_if(out.samples.begin(), out.samples.end(),
                                          [](const LabeledSample& s) { return s.gold_label == Label::kViolation; });
    const auto compliants = static_cast<std::ptrdiff_t>(out.samples.size()) - violations;
    if (violations != 2 * compliants) {
        out.warnings.push_back("expected 2 violations per compliant sample, found " + std::to_string(violations) +
                               " violations and " + std::to_string(compliants) + " compliant");
    }
    for (const auto& [system, counts] : per_system) {
        if (counts.first != 2 || counts.second != 1) {
            out.warnings.push_back("system " + system + " has " + std::to_string(counts.first) + " violation and " +
                                   std::to_string(counts.second) + " compliant samples (expected 2 and 1)");
        }
    }
    return out;
}

std::vector<LabeledSample> load_cspelling_fixture(const std::string& path) {
    std::vector<LabeledSample> out;
    std::set<std::string> ids;
    std::size_t row = 0;
    for (const auto& j : read_jsonl(path)) {
        const std::string where = path + " record " + std::to_string(++row);
        LabeledSample s = guarded(where, [&] {
            LabeledSample x;
            x.sample_id = j.at("sample_id").get<std::string>();
            x.text = j.at("text").get<std::string>();
            x.error_annotations = annotations_from(j.value("errors", json::array()), where);
            if (auto it = j.find("subset"); it != j.end() && !it->is_null()) x.group = it->get<std::string>();
            if (auto it = j.find("gold_label"); it != j.end() && !it->is_null()) {
                x.gold_label = label_from_string(it->get<std::string>());
            } else {
                x.gold_label = x.error_annotations.empty() ? Label::kCompliant : Label::kViolation;
            }
            return x;
        });
        for (const auto& e : s.error_annotations) {
            if (e.span.end > s.text.size()) throw SchemaError(where + ": span beyond end of text");
        }
        if (!ids.insert(s.sample_id).second) throw SchemaError(where + ": duplicate sample_id " + s.sample_id);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<PredictionRecord> load_predictions(const std::string& path) {
    std::vector<PredictionRecord> out;
    std::size_t row = 0;
    for (const auto& j : read_jsonl(path)) {
        const std::string where = path + " record " + std::to_string(++row);
        out.push_back(guarded(where, [&] {
            PredictionRecord p;
            p.sample_id = j.at("sample_id").get<std::string>();
            p.predicted_label = label_from_string(j.at("predicted_label").get<std::string>());
            if (auto it = j.find("predicted_score"); it != j.end() && !it->is_null()) {
                p.predicted_score = it->get<int>();
            }
            p.detected_errors = annotations_from(j.value("detected_errors", json::array()), where);
            return p;
        }));
    }
    return out;
}

// ── Reports ──────────────────────────────────────────────────────────────────

bool EvalReport::has_undefined_core_metric() const {
    return !metrics.accuracy || !metrics.recall || !metrics.precision || !metrics.f1 || !metrics.specificity;
}

EvalReport evaluate(std::span<const LabeledSample> golds, std::span<const PredictionRecord> preds,
                    const EvalOptions& options) {
    EvalReport r;
    r.samples = golds.size();
    r.counts = confusion(preds, golds);
    r.metrics = classification_metrics(r.counts);

    const auto by_id = index_preds(preds);
    std::vector<int> human, model;
    bool all_scored = true;
    for (const auto& g : golds) {
        const auto* p = by_id.at(g.sample_id);
        if (!g.gold_score || !p->predicted_score) {
            all_scored = false;
            break;
        }
        human.push_back(*g.gold_score);
        model.push_back(*p->predicted_score);
    }
    if (all_scored && human.size() >= 2) {
        AgreementStats a;
        try {
            a.kappa_qw = weighted_kappa(model, human, options.score_levels);
        } catch (const DegenerateMarginals&) {
        }
        const std::vector<double> hd(human.begin(), human.end());
        const std::vector<double> md(model.begin(), model.end());
        try {
            a.spearman_rho = spearman(md, hd);
        } catch (const ZeroVariance&) {
        }
        const auto bm = bias_mae(md, hd);
        a.bias = bm.bias;
        a.mae = bm.mae;
        r.agreement = a;
    }

    const bool annotated = std::any_of(golds.begin(), golds.end(),
                                       [](const LabeledSample& g) { return !g.error_annotations.empty(); });
    if (annotated) {
        r.class_recall = per_class_recall(golds, preds);
        r.subsets = subset_stats(per_sample_accuracy(golds, preds));
    }
    return r;
}

namespace {

json opt(const std::optional<double>& v) {
    return v ? json(*v) : json(nullptr);
}

std::string fmt(const std::optional<double>& v, int precision = 4) {
    if (!v) return "undefined";
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << *v;
    return os.str();
}

} // namespace

json to_json(const EvalReport& r) {
    json j = {{"samples", r.samples},
              {"confusion", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn}, {"fn", r.counts.fn}}},
              {"metrics",
               {{"accuracy", opt(r.metrics.accuracy)},
                {"recall", opt(r.metrics.recall)},
                {"precision", opt(r.metrics.precision)},
                {"f1", opt(r.metrics.f1)},
                {"specificity", opt(r.metrics.specificity)}}}};
    if (r.agreement) {
        j["agreement"] = {{"kappa_qw", opt(r.agreement->kappa_qw)},
                          {"spearman_rho", opt(r.agreement->spearman_rho)},
                          {"bias", opt(r.agreement->bias)},
                          {"mae", opt(r.agreement->mae)}};
    } else {
        j["agreement"] = nullptr;
    }
    json classes = json::array();
    for (const auto& c : r.class_recall) {
        classes.push_back({{"error_class", to_string(c.error_class)},
                           {"gt_count", c.gt_count},
                           {"detected_count", c.detected_count},
                           {"recall", opt(c.recall)}});
    }
    j["class_recall"] = std::move(classes);
    json subsets = json::array();
    for (const auto& s : r.subsets) {
        subsets.push_back({{"subset_id", s.subset_id},
                           {"n", s.per_sample_accuracy.size()},
                           {"mean", s.mean},
                           {"sd", opt(s.sd)}});
    }
    j["subsets"] = std::move(subsets);
    j["undefined_core_metric"] = r.has_undefined_core_metric();
    return j;
}

std::string format_table(const EvalReport& r) {
    std::ostringstream os;
    os << "samples      " << r.samples << "\n";
    os << "confusion    tp=" << r.counts.tp << " fp=" << r.counts.fp << " tn=" << r.counts.tn
       << " fn=" << r.counts.fn << "\n";
    os << "accuracy     " << fmt(r.metrics.accuracy) << "\n";
    os << "recall       " << fmt(r.metrics.recall) << "\n";
    os << "precision    " << fmt(r.metrics.precision) << "\n";
    os << "f1           " << fmt(r.metrics.f1) << "\n";
    os << "specificity  " << fmt(r.metrics.specificity) << "\n";
    if (r.agreement) {
        os << "kappa_qw     " << fmt(r.agreement->kappa_qw) << "\n";
        os << "spearman     " << fmt(r.agreement->spearman_rho) << "\n";
        os << "bias         " << fmt(r.agreement->bias) << "\n";
        os << "mae          " << fmt(r.agreement->mae) << "\n";
    }
    if (!r.class_recall.empty()) {
        os << "\nerror class        gt  detected  recall%\n";
        for (const auto& c : r.class_recall) {
            os << std::left << std::setw(17) << to_string(c.error_class) << std::right << std::setw(5) << c.gt_count
               << std::setw(10) << c.detected_count << "  "
               << (c.recall ? fmt(*c.recall * 100.0, 2) : std::string("undefined")) << "\n";
        }
    }
    if (!r.subsets.empty()) {
        os << "\nsubset             n    mean      sd\n";
        for (const auto& s : r.subsets) {
            os << std::left << std::setw(17) << s.subset_id << std::right << std::setw(4)
               << s.per_sample_accuracy.size() << "  " << fmt(s.mean) << "  " << fmt(s.sd) << "\n";
        }
    }
    return os.str();
}

} // namespace qc::eval
