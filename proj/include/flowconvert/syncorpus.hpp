#pragma once

// Procedural multi-accent, multi-speaker corpus. Accents differ by word
// pronunciation (remap tables), per-phoneme duration multipliers and a
// spectral shift; speakers by a timbre offset and a noise level. Alignment is
// exact by construction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace flowconvert {

struct PhonemeSequence {
    std::vector<int> phonemes;
    std::vector<int> durations;

    int total_frames() const
    {
        int t = 0;
        for (int d : durations) t += d;
        return t;
    }

    std::size_t size() const { return phonemes.size(); }

    void validate() const
    {
        FLOWCONVERT_EXPECT(phonemes.size() == durations.size(), ContractError,
                           "phoneme and duration lists differ in length");
        for (int d : durations) FLOWCONVERT_EXPECT(d >= 1, ContractError, "durations must be >= 1");
    }

    /// First frame of each phoneme plus the total at the end.
    std::vector<int> frame_offsets() const
    {
        std::vector<int> off(durations.size() + 1, 0);
        for (std::size_t k = 0; k < durations.size(); ++k) off[k + 1] = off[k] + durations[k];
        return off;
    }

    bool operator==(const PhonemeSequence&) const = default;
};

struct MelSpectrogram {
    Matrix frames;  // T x D

    Index frame_count() const { return frames.rows(); }
    Index dim() const { return frames.cols(); }

    void validate() const
    {
        FLOWCONVERT_EXPECT(frames.rows() >= 1 && frames.cols() >= 1, ContractError, "empty mel spectrogram");
        FLOWCONVERT_EXPECT(frames.allFinite(), NumericError, "mel spectrogram has non-finite entries");
    }
};

struct AccentSpec {
    int id = 0;
    std::string name;
    std::vector<std::vector<int>> remap_table;  // word-id -> phonemes
    std::vector<double> duration_multipliers;   // phoneme-id -> scale
    RowVector spectral_shift;

    void validate(std::size_t n_words) const
    {
        FLOWCONVERT_EXPECT(remap_table.size() == n_words, ContractError,
                           "accent " + name + " does not cover the lexicon");
        for (double m : duration_multipliers)
            FLOWCONVERT_EXPECT(m > 0.0, ContractError, "duration multipliers must be positive");
    }
};

struct SpeakerSpec {
    int id = 0;
    std::string name;
    int native_accent = 0;
    RowVector timbre_offset;
    double noise_level = 0.0;
};

struct Utterance {
    std::string id;
    std::vector<int> text;
    int speaker = 0;
    int accent = 0;
    int index_in_speaker = 0;
    PhonemeSequence phoneme_seq;
    MelSpectrogram mel;
};

/// Parameters of the procedural renderer shared by every utterance.
struct RenderConfig {
    double coarticulation = 0.7;        // blend weight toward the previous phoneme at onset
    double coarticulation_decay = 1.5;  // frames
    double contour_scale = 0.35;        // slow utterance-level contour amplitude
    double contour_period_min = 16.0;
    double contour_period_max = 48.0;
};

struct CorpusConfig {
    int n_accents = 4;
    int n_speakers = 8;
    int n_words = 200;
    int n_phonemes = 40;
    int utterances_per_speaker = 50;
    int dim = 16;
    int words_min = 3;
    int words_max = 6;
    int word_phonemes_min = 2;
    int word_phonemes_max = 5;
    double remap_rate = 0.35;
    double non_native_rate = 0.2;       // utterances spoken in a uniformly drawn non-native accent
    double length_change_rate = 0.04;
    double min_remap_distinctness = 0.2;
    double template_scale = 1.0;
    double accent_shift_scale = 0.6;
    double timbre_scale = 0.9;
    double noise_min = 0.05;
    double noise_max = 0.15;
    int duration_base_min = 2;
    int duration_base_max = 7;
    double duration_spread = 0.25;
    double rate_min = 0.7;
    double rate_max = 1.4;
    int duration_jitter = 1;
    RenderConfig render;

    void validate() const
    {
        auto positive = [](int v, const char* what) {
            if (v <= 0) throw ConfigError(std::string("corpus.") + what + " must be positive");
        };
        positive(n_words, "n_words");
        positive(n_phonemes, "n_phonemes");
        positive(utterances_per_speaker, "utterances_per_speaker");
        positive(dim, "dim");
        positive(words_min, "words_min");
        positive(word_phonemes_min, "word_phonemes_min");
        positive(duration_base_min, "duration_base_min");
        if (n_accents < 2) throw ConfigError("corpus.n_accents must be >= 2");
        if (n_speakers < 2) throw ConfigError("corpus.n_speakers must be >= 2");
        if (n_phonemes < 2) throw ConfigError("corpus.n_phonemes must be >= 2");
        if (words_max < words_min) throw ConfigError("corpus.words_max < words_min");
        if (word_phonemes_max < word_phonemes_min) throw ConfigError("corpus.word_phonemes_max < word_phonemes_min");
        if (duration_base_max < duration_base_min) throw ConfigError("corpus.duration_base_max < duration_base_min");
        if (remap_rate < 0.0 || remap_rate > 1.0) throw ConfigError("corpus.remap_rate must be in [0,1]");
        if (length_change_rate < 0.0 || length_change_rate > 1.0)
            throw ConfigError("corpus.length_change_rate must be in [0,1]");
        if (noise_min < 0.0 || noise_max < noise_min) throw ConfigError("corpus noise range invalid");
        if (rate_min <= 0.0 || rate_max < rate_min) throw ConfigError("corpus rate range invalid");
        if (duration_jitter < 0) throw ConfigError("corpus.duration_jitter must be >= 0");
        if (non_native_rate < 0.0 || non_native_rate > 1.0) throw ConfigError("corpus.non_native_rate must be in [0,1]");
        if (template_scale < 0.0 || accent_shift_scale < 0.0 || timbre_scale < 0.0 || duration_spread < 0.0)
            throw ConfigError("corpus scales must be nonnegative");
    }
};

struct Corpus {
    CorpusConfig config;
    std::uint64_t seed = 0;
    Matrix templates;                      // n_phonemes x D
    std::vector<int> base_durations;       // per phoneme
    std::vector<std::vector<int>> lexicon; // shared base pronunciations
    std::vector<AccentSpec> accents;
    std::vector<SpeakerSpec> speakers;
    std::vector<Utterance> utterances;

    int dim() const { return config.dim; }

    const Utterance& find(const std::string& id) const
    {
        for (const auto& u : utterances)
            if (u.id == id) return u;
        throw LookupError("unknown utterance '" + id + "'");
    }

    int accent_index(const std::string& name) const
    {
        for (const auto& a : accents)
            if (a.name == name) return a.id;
        throw LookupError("unknown accent '" + name + "'");
    }
};

// ---------------------------------------------------------------------------

inline std::vector<int> g2p(const std::vector<int>& text, const AccentSpec& accent)
{
    std::vector<int> out;
    for (int w : text) {
        if (w < 0 || static_cast<std::size_t>(w) >= accent.remap_table.size())
            throw LookupError("word " + std::to_string(w) + " not in remap table of accent " + accent.name);
        const auto& p = accent.remap_table[static_cast<std::size_t>(w)];
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

/// Deterministic (jitter-free) duration of phoneme p under an accent.
inline int nominal_duration(int p, const AccentSpec& accent, const std::vector<int>& base_durations)
{
    if (p < 0 || static_cast<std::size_t>(p) >= base_durations.size() ||
        static_cast<std::size_t>(p) >= accent.duration_multipliers.size())
        throw LookupError("no base duration for phoneme " + std::to_string(p));
    const double scaled = base_durations[static_cast<std::size_t>(p)] *
                          accent.duration_multipliers[static_cast<std::size_t>(p)];
    return std::max(1, static_cast<int>(std::lround(scaled)));
}

/// round(base * multiplier) + uniform jitter in [-max_jitter, max_jitter], clamped to >= 1.
inline PhonemeSequence assign_durations(const std::vector<int>& phonemes, const AccentSpec& accent,
                                        const std::vector<int>& base_durations, int max_jitter, Rng& rng)
{
    PhonemeSequence seq;
    seq.phonemes = phonemes;
    seq.durations.reserve(phonemes.size());
    for (int p : phonemes) {
        int d = nominal_duration(p, accent, base_durations);
        if (max_jitter > 0) d += rng.uniform_int(-max_jitter, max_jitter);
        seq.durations.push_back(std::max(1, d));
    }
    return seq;
}

/// Frame t of phoneme k:
///   template(p_k) + accent shift + speaker offset
///   + onset blend toward template(p_{k-1}) decaying with the in-phoneme frame index
///   + slow utterance contour + noise_level * N(0, 1).
inline MelSpectrogram render_mel(const PhonemeSequence& seq, const SpeakerSpec& speaker, const AccentSpec& accent,
                                 const Matrix& templates, const RenderConfig& render, std::uint64_t seed)
{
    seq.validate();
    const Index dim = templates.cols();
    const int total = seq.total_frames();
    Rng rng(seed);

    // Two slow sinusoids with random per-channel amplitudes and phases.
    constexpr int kComponents = 2;
    Matrix amp(kComponents, dim);
    std::vector<double> period(kComponents), phase(kComponents);
    for (int m = 0; m < kComponents; ++m) {
        period[m] = rng.uniform(render.contour_period_min, render.contour_period_max);
        phase[m] = rng.uniform(0.0, 2.0 * M_PI);
        for (Index c = 0; c < dim; ++c) amp(m, c) = rng.normal() * render.contour_scale / std::sqrt(2.0);
    }

    MelSpectrogram mel;
    mel.frames.resize(total, dim);
    int t = 0;
    for (std::size_t k = 0; k < seq.phonemes.size(); ++k) {
        const int p = seq.phonemes[k];
        FLOWCONVERT_EXPECT(p >= 0 && p < templates.rows(), LookupError, "phoneme id out of range");
        const RowVector base = templates.row(p) + accent.spectral_shift + speaker.timbre_offset;
        RowVector onset = RowVector::Zero(dim);
        if (k > 0) onset = templates.row(seq.phonemes[k - 1]) - templates.row(p);
        for (int j = 0; j < seq.durations[k]; ++j, ++t) {
            RowVector frame = base;
            if (k > 0) frame += render.coarticulation * std::exp(-j / render.coarticulation_decay) * onset;
            for (int m = 0; m < kComponents; ++m)
                frame += amp.row(m) * std::sin(2.0 * M_PI * t / period[m] + phase[m]);
            mel.frames.row(t) = frame;
        }
    }
    if (speaker.noise_level > 0.0)
        for (Index i = 0; i < mel.frames.rows(); ++i)
            for (Index c = 0; c < dim; ++c) mel.frames(i, c) += speaker.noise_level * rng.normal();
    return mel;
}

/// Fraction of lexicon entries whose pronunciations differ between two accents.
inline double remap_distinctness(const AccentSpec& a, const AccentSpec& b)
{
    const std::size_t n = std::min(a.remap_table.size(), b.remap_table.size());
    if (n == 0) return 0.0;
    std::size_t diff = 0;
    for (std::size_t w = 0; w < n; ++w) diff += a.remap_table[w] != b.remap_table[w];
    return static_cast<double>(diff) / static_cast<double>(n);
}

namespace detail {

inline std::string padded(const std::string& prefix, int v, int width)
{
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return prefix + s;
}

inline AccentSpec make_accent(int a, const CorpusConfig& cfg, const std::vector<std::vector<int>>& lexicon,
                              double rate, Rng& rng)
{
    AccentSpec acc;
    acc.id = a;
    acc.name = "A" + std::to_string(a);
    acc.spectral_shift.resize(cfg.dim);
    for (int c = 0; c < cfg.dim; ++c) acc.spectral_shift[c] = rng.normal(0.0, cfg.accent_shift_scale);
    acc.duration_multipliers.resize(static_cast<std::size_t>(cfg.n_phonemes));
    for (auto& m : acc.duration_multipliers)
        m = std::clamp(rate * std::exp(rng.normal(0.0, cfg.duration_spread)), 0.25, 4.0);

    // Systematic variant of every phoneme; remapped words substitute one slot.
    std::vector<int> variant(static_cast<std::size_t>(cfg.n_phonemes));
    for (int p = 0; p < cfg.n_phonemes; ++p) {
        int v = rng.uniform_int(0, cfg.n_phonemes - 2);
        variant[static_cast<std::size_t>(p)] = v >= p ? v + 1 : v;
    }
    acc.remap_table = lexicon;
    for (auto& pron : acc.remap_table) {
        if (rng.bernoulli(cfg.remap_rate)) {
            const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pron.size()) - 1));
            pron[k] = variant[static_cast<std::size_t>(pron[k])];
        }
        if (rng.bernoulli(cfg.length_change_rate)) {
            const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pron.size()) - 1));
            if (pron.size() > 1 && rng.bernoulli(0.5))
                pron.erase(pron.begin() + static_cast<std::ptrdiff_t>(k));
            else
                pron.insert(pron.begin() + static_cast<std::ptrdiff_t>(k), variant[static_cast<std::size_t>(pron[k])]);
        }
    }
    return acc;
}

} // namespace detail

/// Pure function of (config, seed); the worker count never changes the result.
inline Corpus generate_corpus(const CorpusConfig& config, std::uint64_t seed, unsigned workers = 1)
{
    config.validate();
    Corpus corpus;
    corpus.config = config;
    corpus.seed = seed;

    Rng rng(derive_seed(seed, "structure"));
    corpus.templates.resize(config.n_phonemes, config.dim);
    for (Index p = 0; p < corpus.templates.rows(); ++p)
        for (Index c = 0; c < corpus.templates.cols(); ++c)
            corpus.templates(p, c) = rng.normal(0.0, config.template_scale);
    corpus.base_durations.resize(static_cast<std::size_t>(config.n_phonemes));
    for (auto& d : corpus.base_durations) d = rng.uniform_int(config.duration_base_min, config.duration_base_max);

    corpus.lexicon.resize(static_cast<std::size_t>(config.n_words));
    for (auto& pron : corpus.lexicon) {
        pron.resize(static_cast<std::size_t>(rng.uniform_int(config.word_phonemes_min, config.word_phonemes_max)));
        for (auto& p : pron) p = rng.uniform_int(0, config.n_phonemes - 1);
    }

    // Speaking rates are spread evenly over [rate_min, rate_max] and shuffled.
    std::vector<double> rates(static_cast<std::size_t>(config.n_accents));
    for (int a = 0; a < config.n_accents; ++a)
        rates[static_cast<std::size_t>(a)] =
            config.rate_min + (config.rate_max - config.rate_min) * a / std::max(1, config.n_accents - 1);
    for (std::size_t i = rates.size() - 1; i > 0; --i)
        std::swap(rates[i], rates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);

    for (int a = 0; a < config.n_accents; ++a) {
        Rng arng(derive_seed(seed, "accent", static_cast<std::uint64_t>(a)));
        corpus.accents.push_back(
            detail::make_accent(a, config, corpus.lexicon, rates[static_cast<std::size_t>(a)], arng));
    }
    for (std::size_t i = 0; i < corpus.accents.size(); ++i)
        for (std::size_t j = i + 1; j < corpus.accents.size(); ++j) {
            const double d = remap_distinctness(corpus.accents[i], corpus.accents[j]);
            if (d < config.min_remap_distinctness)
                throw ConfigError("accents " + corpus.accents[i].name + " and " + corpus.accents[j].name +
                                  " differ on only " + std::to_string(d * 100.0) +
                                  "% of words; raise corpus.remap_rate");
        }

    for (int s = 0; s < config.n_speakers; ++s) {
        Rng srng(derive_seed(seed, "speaker", static_cast<std::uint64_t>(s)));
        SpeakerSpec spk;
        spk.id = s;
        spk.name = detail::padded("S", s, 2);
        spk.native_accent = s % config.n_accents;
        spk.timbre_offset.resize(config.dim);
        for (int c = 0; c < config.dim; ++c) spk.timbre_offset[c] = srng.normal(0.0, config.timbre_scale);
        spk.noise_level = srng.uniform(config.noise_min, config.noise_max);
        corpus.speakers.push_back(spk);
    }

    const std::size_t n_utts =
        static_cast<std::size_t>(config.n_speakers) * static_cast<std::size_t>(config.utterances_per_speaker);
    corpus.utterances.resize(n_utts);
    auto build = [&](std::size_t i) {
        const int s = static_cast<int>(i) / config.utterances_per_speaker;
        const int u = static_cast<int>(i) % config.utterances_per_speaker;
        const auto& spk = corpus.speakers[static_cast<std::size_t>(s)];
        Rng urng(derive_seed(seed, "utterance", i));
        int accent = spk.native_accent;
        if (config.non_native_rate > 0.0 && urng.bernoulli(config.non_native_rate)) {
            accent = urng.uniform_int(0, config.n_accents - 2);
            if (accent >= spk.native_accent) ++accent;
        }
        const auto& acc = corpus.accents[static_cast<std::size_t>(accent)];
        Utterance utt;
        utt.id = spk.name + "_" + detail::padded("U", u, 3);
        utt.speaker = s;
        utt.accent = accent;
        utt.index_in_speaker = u;
        const int n_words = urng.uniform_int(config.words_min, config.words_max);
        for (int w = 0; w < n_words; ++w) utt.text.push_back(urng.uniform_int(0, config.n_words - 1));
        utt.phoneme_seq = assign_durations(g2p(utt.text, acc), acc, corpus.base_durations, config.duration_jitter, urng);
        utt.mel = render_mel(utt.phoneme_seq, spk, acc, corpus.templates, config.render,
                             derive_seed(seed, "render", i));
        corpus.utterances[i] = std::move(utt);
    };

    workers = std::max(1u, workers);
    if (workers == 1) {
        for (std::size_t i = 0; i < n_utts; ++i) build(i);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < n_utts; i += workers) build(i);
            });
        for (auto& th : pool) th.join();
    }
    return corpus;
}

// Dataset roles. Proxy classifiers never see utterances used to train the
// conversion models.
enum class Split { model, classifier, test };

struct SplitConfig {
    double model_fraction = 0.6;
    double classifier_fraction = 0.24;
};

inline Split split_of(const Utterance& u, int utterances_per_speaker, const SplitConfig& cfg)
{
    const int n_model = static_cast<int>(std::lround(cfg.model_fraction * utterances_per_speaker));
    const int n_clf = static_cast<int>(std::lround(cfg.classifier_fraction * utterances_per_speaker));
    if (u.index_in_speaker < n_model) return Split::model;
    if (u.index_in_speaker < n_model + n_clf) return Split::classifier;
    return Split::test;
}

inline std::vector<const Utterance*> select_split(const Corpus& corpus, Split which, const SplitConfig& cfg)
{
    std::vector<const Utterance*> out;
    for (const auto& u : corpus.utterances)
        if (split_of(u, corpus.config.utterances_per_speaker, cfg) == which) out.push_back(&u);
    return out;
}

} // namespace flowconvert
