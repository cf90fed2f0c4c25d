#pragma once

// Assembles per-system metrics, pairwise significance tests and the accent
// score-ratio matrix from a set of converted utterances.

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "eval.hpp"
#include "io.hpp"
#include "pipeline.hpp"

namespace flowconvert {

struct ConvertedItem {
    const Utterance* source = nullptr;
    int target_accent = 0;
    ConversionMode mode = ConversionMode::remap;
    MelSpectrogram mel;
    PhonemeSequence target;  // phonemes and the durations actually used
};

/// Per-utterance scores for one system, in paired order.
struct SystemScores {
    std::vector<double> per;
    std::vector<double> accent_similarity;
    std::vector<double> speaker_similarity;
    std::vector<double> speaker_correct;
    std::vector<double> duration_l1;
};

struct SystemMetrics {
    std::string system;
    std::size_t n = 0;
    double per = 0.0;
    double accent_similarity = 0.0;
    double speaker_similarity = 0.0;
    double speaker_accuracy = 0.0;
    double duration_l1 = 0.0;
};

struct PairwiseTest {
    std::string metric;
    std::string system_a;
    std::string system_b;
    double mean_difference = 0.0;  // a - b
    double p_value = 1.0;
    bool reject = false;
};

struct EvalReport {
    double alpha = 0.05;
    std::vector<std::string> accent_names;
    std::vector<SystemMetrics> systems;  // converted systems, in mode order
    SystemMetrics source;                // unconverted source scored against the same targets
    std::vector<PairwiseTest> tests;
    std::string ratio_system;
    RatioMatrix ratio;           // converted / reference
    RatioMatrix source_ratio;    // unconverted source / reference
    Json provenance = Json::object();

    const SystemMetrics& system(const std::string& name) const
    {
        for (const auto& s : systems)
            if (s.system == name) return s;
        throw LookupError("no system '" + name + "' in report");
    }

    const PairwiseTest& test(const std::string& metric, const std::string& a, const std::string& b) const
    {
        for (const auto& t : tests)
            if (t.metric == metric && ((t.system_a == a && t.system_b == b) || (t.system_a == b && t.system_b == a)))
                return t;
        throw LookupError("no test " + metric + " " + a + "/" + b);
    }
};

inline const std::vector<std::string>& tested_metrics()
{
    static const std::vector<std::string> m{"per", "accent_similarity", "speaker_similarity"};
    return m;
}

namespace detail {

inline double mean_of(const std::vector<double>& v)
{
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double duration_l1(const PhonemeSequence& used, const AccentSpec& target, const std::vector<int>& base)
{
    double s = 0.0;
    for (std::size_t k = 0; k < used.size(); ++k)
        s += std::abs(used.durations[k] - nominal_duration(used.phonemes[k], target, base));
    return used.size() ? s / static_cast<double>(used.size()) : 0.0;
}

inline void score(SystemScores& out, const MelSpectrogram& mel, const PhonemeSequence& target, int target_accent,
                  int speaker, const Corpus& corpus, const ProxyClassifiers& clf)
{
    out.per.push_back(wer(target.phonemes, phoneme_decode(mel, clf.phoneme)));
    out.accent_similarity.push_back(similarity_score(mel, clf.accent, target_accent));
    out.speaker_similarity.push_back(similarity_score(mel, clf.speaker, speaker));
    out.speaker_correct.push_back(clf.speaker.predict(mel.frames) == speaker ? 1.0 : 0.0);
    out.duration_l1.push_back(
        duration_l1(target, corpus.accents[static_cast<std::size_t>(target_accent)], corpus.base_durations));
}

inline SystemMetrics summarize(const std::string& name, const SystemScores& s)
{
    return {name,
            s.per.size(),
            mean_of(s.per),
            mean_of(s.accent_similarity),
            mean_of(s.speaker_similarity),
            mean_of(s.speaker_correct),
            mean_of(s.duration_l1)};
}

inline const std::vector<double>& metric_scores(const SystemScores& s, const std::string& metric)
{
    if (metric == "per") return s.per;
    if (metric == "accent_similarity") return s.accent_similarity;
    if (metric == "speaker_similarity") return s.speaker_similarity;
    throw LookupError("unknown metric '" + metric + "'");
}

} // namespace detail

/// Scores `items` with frozen proxy classifiers. Metrics and paired tests use
/// the requests converted by every system present; the ratio matrix uses
/// every output of `ratio_mode` (including unequal-length requests) and
/// real utterances in `references` as the per-accent reference.
inline EvalReport evaluate_systems(const Corpus& corpus, const ProxyClassifiers& clf,
                                   const std::vector<ConvertedItem>& items,
                                   const std::vector<const Utterance*>& references, double alpha,
                                   ConversionMode ratio_mode = ConversionMode::remap_warp_attend)
{
    if (items.empty()) throw EmptyInputError("evaluate: no converted utterances");
    FLOWCONVERT_EXPECT(alpha > 0.0 && alpha < 1.0, ContractError, "evaluate: alpha must be in (0, 1)");
    EvalReport report;
    report.alpha = alpha;
    for (const auto& a : corpus.accents) report.accent_names.push_back(a.name);

    using Key = std::pair<std::string, int>;
    std::vector<ConversionMode> modes;
    std::map<Key, std::map<ConversionMode, const ConvertedItem*>> by_request;
    for (const auto& it : items) {
        FLOWCONVERT_EXPECT(it.source != nullptr, ContractError, "evaluate: item without a source utterance");
        if (std::find(modes.begin(), modes.end(), it.mode) == modes.end()) modes.push_back(it.mode);
        by_request[{it.source->id, it.target_accent}][it.mode] = &it;
    }
    std::sort(modes.begin(), modes.end());

    std::map<ConversionMode, SystemScores> scores;
    SystemScores source_scores;
    for (const auto& [key, per_mode] : by_request) {
        if (per_mode.size() != modes.size()) continue;
        const ConvertedItem& first = *per_mode.begin()->second;
        const Utterance& src = *first.source;
        for (const auto& [mode, item] : per_mode)
            detail::score(scores[mode], item->mel, item->target, item->target_accent, src.speaker, corpus, clf);
        PhonemeSequence unchanged{first.target.phonemes, src.phoneme_seq.durations};
        if (unchanged.phonemes.size() != unchanged.durations.size()) unchanged.durations = first.target.durations;
        detail::score(source_scores, src.mel, unchanged, first.target_accent, src.speaker, corpus, clf);
    }
    if (source_scores.per.empty()) throw EmptyInputError("evaluate: no request was converted by every system");

    for (auto m : modes) report.systems.push_back(detail::summarize(to_string(m), scores[m]));
    report.source = detail::summarize("source", source_scores);

    for (const auto& metric : tested_metrics()) {
        std::vector<PairwiseTest> family;
        for (std::size_t i = 0; i < modes.size(); ++i)
            for (std::size_t j = i + 1; j < modes.size(); ++j) {
                const auto& a = detail::metric_scores(scores[modes[i]], metric);
                const auto& b = detail::metric_scores(scores[modes[j]], metric);
                PairwiseTest t{metric, to_string(modes[i]), to_string(modes[j]), detail::mean_of(a) - detail::mean_of(b),
                               1.0, false};
                t.p_value = a.size() >= 2 ? paired_t_test(a, b) : 1.0;
                family.push_back(t);
            }
        std::vector<double> ps;
        for (const auto& t : family) ps.push_back(t.p_value);
        const auto reject = holm_bonferroni(ps, alpha);
        for (std::size_t k = 0; k < family.size(); ++k) {
            family[k].reject = reject[k];
            report.tests.push_back(family[k]);
        }
    }

    const int n = static_cast<int>(corpus.accents.size());
    report.ratio_system = to_string(ratio_mode);
    std::vector<std::vector<std::vector<double>>> conv(n, std::vector<std::vector<double>>(n));
    std::vector<std::vector<std::vector<double>>> base(n, std::vector<std::vector<double>>(n));
    std::set<std::pair<std::string, int>> seen;
    for (const auto& it : items) {
        if (it.mode != ratio_mode) continue;
        const int s = it.source->accent, t = it.target_accent;
        conv[s][t].push_back(similarity_score(it.mel, clf.accent, t));
        if (seen.insert({it.source->id, t}).second) base[s][t].push_back(similarity_score(it.source->mel, clf.accent, t));
    }
    std::vector<std::vector<double>> ref(n);
    for (const auto* u : references) ref[u->accent].push_back(similarity_score(u->mel, clf.accent, u->accent));
    report.ratio = score_ratio_matrix(conv, ref);
    report.source_ratio = score_ratio_matrix(base, ref);
    return report;
}

// ---------------------------------------------------------------------------
// Serialization

inline Json ratio_json(const RatioMatrix& m, const std::vector<std::string>& names)
{
    Json rows = Json::array();
    for (int s = 0; s < m.n; ++s) {
        Json row = Json::array();
        for (int t = 0; t < m.n; ++t) {
            const auto& c = m.at(s, t);
            if (c.status == RatioCell::Status::value) row.push_back(c.ratio);
            else if (c.status == RatioCell::Status::diagonal) row.push_back("-");
            else row.push_back("missing");
        }
        rows.push_back(row);
    }
    return {{"accents", names}, {"rows", rows}};
}

inline Json report_json(const EvalReport& r)
{
    auto sys = [](const SystemMetrics& s) {
        return Json{{"system", s.system},
                    {"n", s.n},
                    {"per", s.per},
                    {"accent_similarity", s.accent_similarity},
                    {"speaker_similarity", s.speaker_similarity},
                    {"speaker_accuracy", s.speaker_accuracy},
                    {"duration_l1", s.duration_l1}};
    };
    Json j = r.provenance;
    j["alpha"] = r.alpha;
    j["systems"] = Json::array();
    for (const auto& s : r.systems) j["systems"].push_back(sys(s));
    j["source_baseline"] = sys(r.source);
    j["pairwise_tests"] = Json::array();
    for (const auto& t : r.tests)
        j["pairwise_tests"].push_back({{"metric", t.metric},
                                       {"system_a", t.system_a},
                                       {"system_b", t.system_b},
                                       {"mean_difference", t.mean_difference},
                                       {"p_value", t.p_value},
                                       {"reject", t.reject}});
    j["ratio_matrix"] = ratio_json(r.ratio, r.accent_names);
    j["ratio_matrix"]["system"] = r.ratio_system;
    j["source_ratio_matrix"] = ratio_json(r.source_ratio, r.accent_names);
    return j;
}

inline std::string systems_csv(const EvalReport& r)
{
    std::ostringstream out;
    out << "system,n,per,accent_similarity,speaker_similarity,speaker_accuracy,duration_l1\n";
    auto row = [&](const SystemMetrics& s) {
        out << s.system << ',' << s.n << ',' << detail::format_double(s.per) << ','
            << detail::format_double(s.accent_similarity) << ',' << detail::format_double(s.speaker_similarity) << ','
            << detail::format_double(s.speaker_accuracy) << ',' << detail::format_double(s.duration_l1) << '\n';
    };
    for (const auto& s : r.systems) row(s);
    row(r.source);
    return out.str();
}

inline std::string tests_csv(const EvalReport& r)
{
    std::ostringstream out;
    out << "metric,system_a,system_b,mean_difference,p_value,reject\n";
    for (const auto& t : r.tests)
        out << t.metric << ',' << t.system_a << ',' << t.system_b << ',' << detail::format_double(t.mean_difference)
            << ',' << detail::format_double(t.p_value) << ',' << (t.reject ? "true" : "false") << '\n';
    return out.str();
}

inline std::string ratio_csv(const RatioMatrix& m, const std::vector<std::string>& names)
{
    std::ostringstream out;
    out << "source";
    for (const auto& n : names) out << ',' << n;
    out << '\n';
    for (int s = 0; s < m.n; ++s) {
        out << names[static_cast<std::size_t>(s)];
        for (int t = 0; t < m.n; ++t) {
            const auto& c = m.at(s, t);
            out << ',';
            if (c.status == RatioCell::Status::value) out << detail::format_double(c.ratio);
            else if (c.status == RatioCell::Status::diagonal) out << '-';
            else out << "missing";
        }
        out << '\n';
    }
    return out.str();
}

inline void write_report(const fs::path& dir, const EvalReport& r)
{
    write_json(dir / "report.json", report_json(r));
    write_text(dir / "systems.csv", systems_csv(r));
    write_text(dir / "tests.csv", tests_csv(r));
    write_text(dir / "ratio_matrix.csv", ratio_csv(r.ratio, r.accent_names));
    write_text(dir / "source_ratio_matrix.csv", ratio_csv(r.source_ratio, r.accent_names));
}

} // namespace flowconvert
