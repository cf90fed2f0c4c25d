#pragma once

// Run configuration: one sectioned key=value file for every stage, with a
// canonical text form whose hash is stamped on every artifact.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "attention.hpp"
#include "duration.hpp"
#include "eval.hpp"
#include "flow.hpp"
#include "pipeline.hpp"
#include "syncorpus.hpp"

namespace flowconvert {

inline constexpr int kFormatVersion = 1;

struct EvalConfig {
    std::vector<ConversionMode> modes = all_modes();
    double alpha = 0.05;
    Split split = Split::test;
};

struct RunConfig {
    std::uint64_t seed = 7;
    CorpusConfig corpus;
    SplitConfig split;
    FeatureConfig features;
    FlowConfig flow;
    DurationConfig duration;
    AttentionConfig attention;
    FlowTrainConfig train_flow;
    DurationTrainConfig train_duration;
    AttentionTrainConfig train_attention;
    ClassifierTrainConfig train_classifiers;
    EvalConfig eval;

    /// Copies corpus sizes into the model sections that depend on them.
    void sync_derived()
    {
        features.n_phonemes = corpus.n_phonemes;
        features.n_speakers = corpus.n_speakers;
        features.n_accents = corpus.n_accents;
        flow.dim = corpus.dim;
        flow.cond_dim = features.conditioning_dim();
        duration.n_phonemes = corpus.n_phonemes;
        duration.n_accents = corpus.n_accents;
        attention.dim = corpus.dim;
        attention.cond_dim = features.conditioning_dim();
    }

    void validate() const
    {
        corpus.validate();
        if (!(split.model_fraction > 0.0 && split.classifier_fraction > 0.0 &&
              split.model_fraction + split.classifier_fraction < 1.0))
            throw ConfigError("split fractions must be positive and leave a test share");
        if (!(eval.alpha > 0.0 && eval.alpha < 1.0)) throw ConfigError("eval.alpha must be in (0, 1)");
        if (eval.modes.empty()) throw ConfigError("eval.modes must name at least one mode");
        auto positive = [](int v, const std::string& what) {
            if (v <= 0) throw ConfigError(what + " must be positive");
        };
        positive(flow.steps, "flow.steps");
        positive(flow.hidden, "flow.hidden");
        positive(attention.n_heads, "attention.n_heads");
        positive(attention.head_dim, "attention.head_dim");
        positive(train_flow.batch_size, "train.flow.batch_size");
        positive(train_duration.batch_size, "train.duration.batch_size");
        positive(train_attention.batch_size, "train.attention.batch_size");
        if (train_flow.steps < 0 || train_duration.steps < 0 || train_attention.steps < 0)
            throw ConfigError("training steps must be >= 0");
        if (!(train_attention.dropout_rate >= 0.0 && train_attention.dropout_rate <= 1.0))
            throw ConfigError("train.attention.dropout_rate must be in [0, 1]");
    }
};

namespace detail {

struct Field {
    std::string section;
    std::string key;
    std::variant<int*, double*, std::uint64_t*, bool*> target;
};

inline std::vector<Field> fields(RunConfig& c)
{
    auto& co = c.corpus;
    return {
        {"run", "seed", &c.seed},
        {"corpus", "n_accents", &co.n_accents},
        {"corpus", "n_speakers", &co.n_speakers},
        {"corpus", "n_words", &co.n_words},
        {"corpus", "n_phonemes", &co.n_phonemes},
        {"corpus", "utterances_per_speaker", &co.utterances_per_speaker},
        {"corpus", "dim", &co.dim},
        {"corpus", "words_min", &co.words_min},
        {"corpus", "words_max", &co.words_max},
        {"corpus", "word_phonemes_min", &co.word_phonemes_min},
        {"corpus", "word_phonemes_max", &co.word_phonemes_max},
        {"corpus", "remap_rate", &co.remap_rate},
        {"corpus", "non_native_rate", &co.non_native_rate},
        {"corpus", "length_change_rate", &co.length_change_rate},
        {"corpus", "min_remap_distinctness", &co.min_remap_distinctness},
        {"corpus", "template_scale", &co.template_scale},
        {"corpus", "accent_shift_scale", &co.accent_shift_scale},
        {"corpus", "timbre_scale", &co.timbre_scale},
        {"corpus", "noise_min", &co.noise_min},
        {"corpus", "noise_max", &co.noise_max},
        {"corpus", "duration_base_min", &co.duration_base_min},
        {"corpus", "duration_base_max", &co.duration_base_max},
        {"corpus", "duration_spread", &co.duration_spread},
        {"corpus", "rate_min", &co.rate_min},
        {"corpus", "rate_max", &co.rate_max},
        {"corpus", "duration_jitter", &co.duration_jitter},
        {"render", "coarticulation", &co.render.coarticulation},
        {"render", "coarticulation_decay", &co.render.coarticulation_decay},
        {"render", "contour_scale", &co.render.contour_scale},
        {"render", "contour_period_min", &co.render.contour_period_min},
        {"render", "contour_period_max", &co.render.contour_period_max},
        {"split", "model_fraction", &c.split.model_fraction},
        {"split", "classifier_fraction", &c.split.classifier_fraction},
        {"features", "phoneme_embedding_dim", &c.features.phoneme_embedding_dim},
        {"features", "encoder_dim", &c.features.encoder_dim},
        {"features", "speaker_dim", &c.features.speaker_dim},
        {"features", "accent_dim", &c.features.accent_dim},
        {"features", "mixing_layers", &c.features.mixing_layers},
        {"flow", "steps", &c.flow.steps},
        {"flow", "hidden", &c.flow.hidden},
        {"flow", "log_scale_bound", &c.flow.log_scale_bound},
        {"flow", "cond_context", &c.flow.cond_context},
        {"flow", "random_mixing", &c.flow.random_mixing},
        {"duration", "phoneme_embedding_dim", &c.duration.phoneme_embedding_dim},
        {"duration", "accent_dim", &c.duration.accent_dim},
        {"duration", "encoder_dim", &c.duration.encoder_dim},
        {"duration", "mixing_layers", &c.duration.mixing_layers},
        {"attention", "n_heads", &c.attention.n_heads},
        {"attention", "head_dim", &c.attention.head_dim},
        {"attention", "position_channels", &c.attention.position_channels},
        {"attention", "max_position_frequency", &c.attention.max_position_frequency},
        {"train.flow", "steps", &c.train_flow.steps},
        {"train.flow", "batch_size", &c.train_flow.batch_size},
        {"train.flow", "lr", &c.train_flow.lr},
        {"train.flow", "clip_norm", &c.train_flow.clip_norm},
        {"train.flow", "log_every", &c.train_flow.log_every},
        {"train.flow", "heldout_utterances", &c.train_flow.heldout_utterances},
        {"train.duration", "steps", &c.train_duration.steps},
        {"train.duration", "batch_size", &c.train_duration.batch_size},
        {"train.duration", "lr", &c.train_duration.lr},
        {"train.duration", "clip_norm", &c.train_duration.clip_norm},
        {"train.duration", "log_every", &c.train_duration.log_every},
        {"train.attention", "steps", &c.train_attention.steps},
        {"train.attention", "batch_size", &c.train_attention.batch_size},
        {"train.attention", "lr", &c.train_attention.lr},
        {"train.attention", "clip_norm", &c.train_attention.clip_norm},
        {"train.attention", "dropout_rate", &c.train_attention.dropout_rate},
        {"train.attention", "log_every", &c.train_attention.log_every},
        {"train.classifiers", "steps", &c.train_classifiers.steps},
        {"train.classifiers", "lr", &c.train_classifiers.lr},
        {"train.classifiers", "weight_decay", &c.train_classifiers.weight_decay},
        {"train.classifiers", "frame_steps", &c.train_classifiers.frame_steps},
        {"train.classifiers", "frame_batch", &c.train_classifiers.frame_batch},
        {"train.classifiers", "frame_lr", &c.train_classifiers.frame_lr},
        {"train.classifiers", "hidden", &c.train_classifiers.hidden},
        {"train.classifiers", "context", &c.train_classifiers.context},
        {"eval", "alpha", &c.eval.alpha},
    };
}

inline std::string format_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string trim(std::string s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline void assign(const Field& f, const std::string& raw)
{
    const std::string v = trim(raw);
    const std::string where = f.section + "." + f.key;
    try {
        std::size_t used = 0;
        std::visit(
            [&](auto* p) {
                using T = std::remove_pointer_t<decltype(p)>;
                if constexpr (std::is_same_v<T, bool>) {
                    if (v == "true" || v == "1") *p = true;
                    else if (v == "false" || v == "0") *p = false;
                    else throw ConfigError(where + ": expected true or false, got '" + v + "'");
                    used = v.size();
                } else if constexpr (std::is_same_v<T, int>) {
                    *p = std::stoi(v, &used);
                } else if constexpr (std::is_same_v<T, std::uint64_t>) {
                    if (!v.empty() && v[0] == '-') throw ConfigError(where + " must be nonnegative");
                    *p = std::stoull(v, &used);
                } else {
                    *p = std::stod(v, &used);
                }
            },
            f.target);
        if (used != v.size()) throw ConfigError(where + ": trailing characters in '" + v + "'");
    } catch (const std::invalid_argument&) {
        throw ConfigError(where + ": cannot parse '" + v + "'");
    } catch (const std::out_of_range&) {
        throw ConfigError(where + ": value out of range '" + v + "'");
    }
}

inline std::string render(const Field& f)
{
    return std::visit(
        [](auto* p) -> std::string {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, bool>) return *p ? "true" : "false";
            else if constexpr (std::is_same_v<T, double>) return format_double(*p);
            else return std::to_string(*p);
        },
        f.target);
}

inline std::vector<ConversionMode> parse_modes(const std::string& raw)
{
    std::vector<ConversionMode> modes;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            modes.push_back(parse_mode(item));
        } catch (const Error& e) {
            throw ConfigError(std::string("eval.modes: ") + e.what());
        }
    }
    if (modes.empty()) throw ConfigError("eval.modes must name at least one mode");
    return modes;
}

inline Split parse_split(const std::string& raw)
{
    const std::string v = trim(raw);
    if (v == "model") return Split::model;
    if (v == "classifier") return Split::classifier;
    if (v == "test") return Split::test;
    throw ConfigError("eval.split must be model, classifier or test, got '" + v + "'");
}

inline const char* split_name(Split s)
{
    switch (s) {
    case Split::model: return "model";
    case Split::classifier: return "classifier";
    case Split::test: return "test";
    }
    return "?";
}

} // namespace detail

/// Every key in canonical order, one `section.key=value` line each.
inline std::string canonical_config(const RunConfig& config)
{
    RunConfig c = config;
    std::string out;
    for (const auto& f : detail::fields(c)) out += f.section + "." + f.key + "=" + detail::render(f) + "\n";
    std::string modes;
    for (auto m : c.eval.modes) modes += (modes.empty() ? "" : ",") + std::string(to_string(m));
    out += "eval.modes=" + modes + "\n";
    out += std::string("eval.split=") + detail::split_name(c.eval.split) + "\n";
    return out;
}

inline std::string config_hash(const RunConfig& config)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_config(config))));
    return buf;
}

/// Parses INI text over the defaults. Unknown sections or keys are errors.
inline RunConfig parse_config(const std::string& text)
{
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    RunConfig c;
    const auto table = detail::fields(c);
    for (const auto& [section, entries] : tree) {
        if (entries.empty() && !entries.data().empty())
            throw ConfigError("config: key '" + section + "' outside any section");
        for (const auto& [key, value] : entries) {
            const std::string raw = value.get_value<std::string>();
            if (section == "eval" && key == "modes") {
                c.eval.modes = detail::parse_modes(raw);
                continue;
            }
            if (section == "eval" && key == "split") {
                c.eval.split = detail::parse_split(raw);
                continue;
            }
            bool found = false;
            for (const auto& f : table)
                if (f.section == section && f.key == key) {
                    detail::assign(f, raw);
                    found = true;
                    break;
                }
            if (!found) throw ConfigError("config: unknown key '" + section + "." + key + "'");
        }
    }
    c.sync_derived();
    c.validate();
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

inline RunConfig default_config()
{
    RunConfig c;
    c.sync_derived();
    return c;
}

} // namespace flowconvert
