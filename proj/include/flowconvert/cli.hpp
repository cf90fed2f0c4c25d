#pragma once

// The four pipeline commands plus the provenance check, as library calls.
// A run directory holds corpus/, checkpoints/, converted/ and report/.

#include <chrono>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "attention.hpp"
#include "config.hpp"
#include "duration.hpp"
#include "eval.hpp"
#include "flow.hpp"
#include "io.hpp"
#include "pipeline.hpp"
#include "report.hpp"

namespace flowconvert {

enum class Stage { flow, duration, attention, classifiers, all };

inline Stage parse_stage(const std::string& s)
{
    if (s == "flow") return Stage::flow;
    if (s == "duration") return Stage::duration;
    if (s == "attention") return Stage::attention;
    if (s == "classifiers") return Stage::classifiers;
    if (s == "all") return Stage::all;
    throw ConfigError("unknown stage '" + s + "' (flow, duration, attention, classifiers, all)");
}

struct RunPaths {
    fs::path corpus;
    fs::path checkpoints;
    fs::path converted;
    fs::path report;

    static RunPaths under(const fs::path& run)
    {
        return {run / "corpus", run / "checkpoints", run / "converted", run / "report"};
    }
};

/// Maps library errors onto process exit codes.
inline int exit_code(const std::exception& e)
{
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const LookupError*>(&e)) return 2;
    if (dynamic_cast<const OrderingError*>(&e) || dynamic_cast<const EmptyInputError*>(&e) ||
        dynamic_cast<const IoError*>(&e))
        return 3;
    if (dynamic_cast<const NumericError*>(&e)) return 4;
    return 1;
}

namespace detail {

inline bool has_entries(const fs::path& dir)
{
    return fs::exists(dir) && fs::is_directory(dir) && fs::directory_iterator(dir) != fs::directory_iterator();
}

inline void check_config_hash(const Json& metadata, const RunConfig& config, const std::string& what)
{
    const std::string expected = config_hash(config);
    const std::string found = metadata.value("config_hash", "");
    if (found != expected)
        throw OrderingError(what + " was produced with config " + found + ", current config is " + expected +
                            "; regenerate it or pass the matching --config");
}

inline fs::path require(const fs::path& path, const std::string& hint)
{
    if (!fs::exists(path)) throw OrderingError("missing " + path.string() + "; " + hint);
    return path;
}

inline std::ostream* log_stream = &std::cerr;

inline void log(const std::string& msg)
{
    if (log_stream) *log_stream << "[flowconvert] " << msg << std::endl;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline Corpus load_checked_corpus(const fs::path& dir, const RunConfig& config)
{
    require(dir / "manifest.json", "run gen-data first");
    Corpus c = load_corpus(dir);
    check_config_hash(read_json(dir / "manifest.json"), config, "corpus");
    return c;
}

inline std::string converted_name(const std::string& utterance, const std::string& accent, ConversionMode mode)
{
    return utterance + "__" + accent + "__" + to_string(mode);
}

} // namespace detail

/// Generates the corpus into `dir`. An existing non-empty directory is
/// replaced only with `force`.
inline Corpus cmd_gen_data(const RunConfig& config, const fs::path& dir, bool force)
{
    config.validate();
    if (detail::has_entries(dir)) {
        if (!force) throw OverwriteError(dir.string() + " is not empty; pass --force to overwrite");
        fs::remove(dir / "manifest.json");
        fs::remove_all(dir / "utterances");
    }
    const auto t0 = std::chrono::steady_clock::now();
    const unsigned workers = std::max(1u, std::thread::hardware_concurrency());
    Corpus corpus = generate_corpus(config.corpus, config.seed, workers);
    save_corpus(corpus, config, dir);
    detail::log("gen-data: " + std::to_string(corpus.utterances.size()) + " utterances in " +
                std::to_string(detail::seconds_since(t0)) + " s -> " + dir.string());
    return corpus;
}

struct TrainSummary {
    std::vector<std::string> stages;
    std::map<std::string, double> initial_heldout;
    std::map<std::string, double> final_heldout;
    double attention_corrupted_mse = 0.0;
};

/// Trains one stage (or all of them) and writes `<stage>.fct` plus
/// `<stage>_loss.csv` into `ckpt_dir`.
inline TrainSummary cmd_train(const RunConfig& config, const fs::path& corpus_dir, const fs::path& ckpt_dir, Stage stage)
{
    config.validate();
    const Corpus corpus = detail::load_checked_corpus(corpus_dir, config);
    const auto model_split = select_split(corpus, Split::model, config.split);
    const auto classifier_split = select_split(corpus, Split::classifier, config.split);
    FLOWCONVERT_EXPECT(!model_split.empty() && !classifier_split.empty(), ConfigError,
                       "split leaves no model or classifier utterances");
    fs::create_directories(ckpt_dir);
    TrainSummary summary;
    auto run = [&](Stage s) { return stage == s || stage == Stage::all; };

    if (stage == Stage::attention && !fs::exists(ckpt_dir / "flow.fct"))
        throw OrderingError("the attention stage needs a flow checkpoint; run --stage flow first");

    if (run(Stage::flow)) {
        const auto t0 = std::chrono::steady_clock::now();
        auto heldout = classifier_split;
        if (static_cast<int>(heldout.size()) > config.train_flow.heldout_utterances)
            heldout.resize(static_cast<std::size_t>(config.train_flow.heldout_utterances));
        TrainedFlow m = train_flow(model_split, heldout, config.features, config.flow, config.train_flow,
                                   derive_seed(config.seed, "stage.flow"));
        save_flow(ckpt_dir / "flow.fct", m, config);
        write_text(ckpt_dir / "flow_loss.csv", m.log.to_csv("nll"));
        summary.stages.push_back("flow");
        summary.initial_heldout["flow"] = m.log.initial_heldout;
        summary.final_heldout["flow"] = m.log.final_heldout;
        detail::log("train flow: heldout nll " + std::to_string(m.log.initial_heldout) + " -> " +
                    std::to_string(m.log.final_heldout) + " in " + std::to_string(detail::seconds_since(t0)) + " s");
    }
    if (run(Stage::duration)) {
        const auto t0 = std::chrono::steady_clock::now();
        TrainedDuration m = train_duration_model(model_split, classifier_split, config.duration, config.train_duration,
                                                 derive_seed(config.seed, "stage.duration"));
        save_duration(ckpt_dir / "duration.fct", m, config);
        write_text(ckpt_dir / "duration_loss.csv", m.log.to_csv("log_duration_mse"));
        summary.stages.push_back("duration");
        summary.initial_heldout["duration"] = m.log.initial_heldout;
        summary.final_heldout["duration"] = m.log.final_heldout;
        detail::log("train duration: heldout mae " + std::to_string(m.log.initial_heldout) + " -> " +
                    std::to_string(m.log.final_heldout) + " in " + std::to_string(detail::seconds_since(t0)) + " s");
    }
    if (run(Stage::attention)) {
        const auto t0 = std::chrono::steady_clock::now();
        const fs::path flow_path = ckpt_dir / "flow.fct";
        detail::require(flow_path, "the attention stage needs a flow checkpoint; run --stage flow first");
        detail::check_config_hash(read_tensor_file(flow_path).metadata, config, "flow checkpoint");
        const TrainedFlow flow = load_flow(flow_path, config);
        const auto train = encode_latents(flow, model_split);
        const auto heldout = encode_latents(flow, classifier_split);
        TrainedAttention m = train_attention(train, heldout, config.attention, config.train_attention,
                                             derive_seed(config.seed, "stage.attention"));
        save_attention(ckpt_dir / "attention.fct", m, config);
        write_text(ckpt_dir / "attention_loss.csv", m.log.to_csv("denoising_mse"));
        summary.stages.push_back("attention");
        summary.initial_heldout["attention"] = m.log.initial_heldout;
        summary.final_heldout["attention"] = m.log.final_heldout;
        summary.attention_corrupted_mse = m.heldout.corrupted_mse;
        detail::log("train attention: heldout mse " + std::to_string(m.heldout.attend_mse) + " (corrupted input " +
                    std::to_string(m.heldout.corrupted_mse) + ") in " + std::to_string(detail::seconds_since(t0)) +
                    " s");
    }
    if (run(Stage::classifiers)) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto& cc = config.corpus;
        ProxyClassifiers c = train_classifiers(classifier_split, cc.n_accents, cc.n_speakers, cc.n_phonemes, cc.dim,
                                               config.train_classifiers, derive_seed(config.seed, "stage.classifiers"));
        save_classifiers(ckpt_dir / "classifiers.fct", c, config);
        summary.stages.push_back("classifiers");
        detail::log("train classifiers in " + std::to_string(detail::seconds_since(t0)) + " s");
    }
    return summary;
}

struct RequestRow {
    std::string utterance;
    std::string target_accent;
    ConversionMode mode = ConversionMode::remap;
};

/// Every eval-split utterance towards every other accent, in each eval mode.
inline std::vector<RequestRow> default_requests(const Corpus& corpus, const RunConfig& config)
{
    std::vector<RequestRow> rows;
    for (const auto* u : select_split(corpus, config.eval.split, config.split))
        for (const auto& a : corpus.accents) {
            if (a.id == u->accent) continue;
            for (auto m : config.eval.modes) rows.push_back({u->id, a.name, m});
        }
    return rows;
}

/// {"requests": [{"utterance": id, "target_accent": name, "mode": mode}, ...]}
inline std::vector<RequestRow> load_requests(const fs::path& path)
{
    const Json j = read_json(path);
    if (!j.contains("requests") || !j["requests"].is_array())
        throw ConfigError(path.string() + ": expected a \"requests\" array");
    std::vector<RequestRow> rows;
    for (const auto& r : j["requests"]) {
        try {
            rows.push_back({r.at("utterance").get<std::string>(), r.at("target_accent").get<std::string>(),
                            parse_mode(r.at("mode").get<std::string>())});
        } catch (const Json::exception& e) {
            throw ConfigError(path.string() + ": bad request row: " + e.what());
        }
    }
    return rows;
}

struct RowOutcome {
    RequestRow row;
    bool ok = false;
    std::string output;
    std::string error;
};

struct ConvertSummary {
    std::vector<RowOutcome> rows;
    std::size_t converted = 0;
    std::size_t failed = 0;
};

/// Converts each row independently; a failing row is recorded and skipped.
inline ConvertSummary cmd_convert(const RunConfig& config, const fs::path& corpus_dir, const fs::path& ckpt_dir,
                                  const std::optional<fs::path>& request_manifest, const fs::path& out_dir, bool force)
{
    config.validate();
    const Corpus corpus = detail::load_checked_corpus(corpus_dir, config);
    const std::string hint = "run train --stage all first";
    for (const char* name : {"flow.fct", "duration.fct"}) {
        detail::require(ckpt_dir / name, hint);
        detail::check_config_hash(read_tensor_file(ckpt_dir / name).metadata, config, name);
    }
    const auto rows = request_manifest ? load_requests(*request_manifest) : default_requests(corpus, config);
    bool need_attention = false;
    for (const auto& r : rows) need_attention |= r.mode == ConversionMode::remap_warp_attend;
    if (need_attention) {
        detail::require(ckpt_dir / "attention.fct", hint);
        detail::check_config_hash(read_tensor_file(ckpt_dir / "attention.fct").metadata, config, "attention.fct");
    }
    if (detail::has_entries(out_dir)) {
        if (!force) throw OverwriteError(out_dir.string() + " is not empty; pass --force to overwrite");
        fs::remove_all(out_dir / "items");
        fs::remove(out_dir / "conversion_log.json");
    }

    const auto t0 = std::chrono::steady_clock::now();
    const TrainedFlow flow = load_flow(ckpt_dir / "flow.fct", config);
    const DurationModel duration = load_duration(ckpt_dir / "duration.fct", config);
    std::optional<AttentionBlock> attention;
    if (need_attention) attention = load_attention(ckpt_dir / "attention.fct", config);
    const Converter converter({&corpus.accents, &flow, &duration, attention ? &*attention : nullptr});

    ConvertSummary summary;
    Json log = provenance(config, "conversion_log");
    log["rows"] = Json::array();
    for (const auto& row : rows) {
        RowOutcome outcome{row, false, {}, {}};
        try {
            const Utterance& u = corpus.find(row.utterance);
            const int target = corpus.accent_index(row.target_accent);
            const ConversionResult r = converter.convert({&u, target, row.mode, std::nullopt});
            TensorFile f;
            f.metadata = provenance(config, "converted");
            f.metadata["utterance"] = u.id;
            f.metadata["source_accent"] = corpus.accents[static_cast<std::size_t>(u.accent)].name;
            f.metadata["target_accent"] = row.target_accent;
            f.metadata["mode"] = to_string(row.mode);
            f.metadata["diagnostics"] = r.diagnostics;
            f.put("mel", r.mel.frames);
            f.put("target_phonemes", r.target_phoneme_seq.phonemes);
            f.put("target_durations", r.target_phoneme_seq.durations);
            const std::string name = detail::converted_name(u.id, row.target_accent, row.mode);
            write_tensor_file(out_dir / "items" / (name + ".fct"), f);
            outcome.ok = true;
            outcome.output = "items/" + name + ".fct";
            ++summary.converted;
        } catch (const NumericError&) {
            throw;
        } catch (const Error& e) {
            outcome.error = e.what();
            ++summary.failed;
        }
        Json entry = {{"utterance", row.utterance},
                      {"target_accent", row.target_accent},
                      {"mode", to_string(row.mode)},
                      {"status", outcome.ok ? "ok" : "error"}};
        if (outcome.ok) entry["output"] = outcome.output;
        else entry["error"] = outcome.error;
        log["rows"].push_back(entry);
        summary.rows.push_back(std::move(outcome));
    }
    write_json(out_dir / "conversion_log.json", log);
    detail::log("convert: " + std::to_string(summary.converted) + " converted, " + std::to_string(summary.failed) +
                " row errors in " + std::to_string(detail::seconds_since(t0)) + " s -> " + out_dir.string());
    return summary;
}

/// Loads converted items written by cmd_convert.
inline std::vector<ConvertedItem> load_converted(const fs::path& dir, const Corpus& corpus, const RunConfig& config)
{
    std::vector<fs::path> files;
    if (fs::exists(dir / "items"))
        for (const auto& e : fs::directory_iterator(dir / "items"))
            if (e.path().extension() == ".fct") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<ConvertedItem> items;
    for (const auto& p : files) {
        const TensorFile f = read_tensor_file(p);
        detail::check_config_hash(f.metadata, config, p.filename().string());
        ConvertedItem it;
        it.source = &corpus.find(f.metadata.at("utterance").get<std::string>());
        it.target_accent = corpus.accent_index(f.metadata.at("target_accent").get<std::string>());
        it.mode = parse_mode(f.metadata.at("mode").get<std::string>());
        it.mel.frames = f.matrix("mel");
        it.target = {f.ints("target_phonemes"), f.ints("target_durations")};
        items.push_back(std::move(it));
    }
    return items;
}

inline EvalReport cmd_evaluate(const RunConfig& config, const fs::path& corpus_dir, const fs::path& ckpt_dir,
                               const fs::path& converted_dir, const fs::path& out_dir)
{
    config.validate();
    const Corpus corpus = detail::load_checked_corpus(corpus_dir, config);
    const fs::path clf_path =
        detail::require(ckpt_dir / "classifiers.fct", "run train --stage classifiers first");
    detail::check_config_hash(read_tensor_file(clf_path).metadata, config, "classifiers.fct");
    const ProxyClassifiers clf = load_classifiers(clf_path, config);
    const auto items = load_converted(converted_dir, corpus, config);
    if (items.empty()) throw EmptyInputError("no converted utterances in " + converted_dir.string() + "; run convert first");
    const auto references = select_split(corpus, config.eval.split, config.split);
    EvalReport report = evaluate_systems(corpus, clf, items, references, config.eval.alpha);
    report.provenance = provenance(config, "report");
    write_report(out_dir, report);
    detail::log("evaluate: " + std::to_string(items.size()) + " converted utterances -> " + out_dir.string());
    return report;
}

struct ProvenanceCheck {
    std::size_t artifacts = 0;
    std::vector<std::string> problems;
    bool ok() const { return problems.empty(); }
};

/// Every artifact below `run_dir` must carry the same format version,
/// config hash and seed.
inline ProvenanceCheck cmd_check_provenance(const fs::path& run_dir)
{
    if (!fs::exists(run_dir)) throw IoError("no run directory " + run_dir.string());
    ProvenanceCheck check;
    std::optional<Json> reference;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(run_dir))
        if (e.is_regular_file() && (e.path().extension() == ".fct" || e.path().extension() == ".json"))
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        Json meta;
        try {
            meta = p.extension() == ".fct" ? read_tensor_file(p).metadata : read_json(p);
        } catch (const Error& e) {
            check.problems.push_back(p.string() + ": " + e.what());
            continue;
        }
        ++check.artifacts;
        Json stamp = {{"format_version", meta.value("format_version", -1)},
                      {"config_hash", meta.value("config_hash", "")},
                      {"seed", meta.value("seed", Json())}};
        if (stamp["format_version"] != kFormatVersion || stamp["config_hash"] == "" || stamp["seed"].is_null()) {
            check.problems.push_back(p.string() + ": missing provenance fields");
            continue;
        }
        if (!reference) reference = stamp;
        else if (stamp != *reference)
            check.problems.push_back(p.string() + ": provenance " + stamp.dump() + " differs from " + reference->dump());
    }
    if (check.artifacts == 0) check.problems.push_back("no artifacts under " + run_dir.string());
    return check;
}

} // namespace flowconvert
