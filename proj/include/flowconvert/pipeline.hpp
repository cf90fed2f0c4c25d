#pragma once

// The three conversion procedures. All of them encode the source mel with
// source phonemes, source durations, the source speaker and the source accent,
// and decode with target-accent phonemes, the same speaker embedding and the
// target accent.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attention.hpp"
#include "duration.hpp"
#include "flow.hpp"

namespace flowconvert {

enum class ConversionMode { remap, remap_warp, remap_warp_attend };

inline const char* to_string(ConversionMode m)
{
    switch (m) {
    case ConversionMode::remap: return "remap";
    case ConversionMode::remap_warp: return "remap_warp";
    case ConversionMode::remap_warp_attend: return "remap_warp_attend";
    }
    return "?";
}

inline ConversionMode parse_mode(const std::string& s)
{
    if (s == "remap") return ConversionMode::remap;
    if (s == "remap_warp") return ConversionMode::remap_warp;
    if (s == "remap_warp_attend") return ConversionMode::remap_warp_attend;
    throw ConfigError("unknown conversion mode '" + s + "'");
}

inline const std::vector<ConversionMode>& all_modes()
{
    static const std::vector<ConversionMode> modes{ConversionMode::remap, ConversionMode::remap_warp,
                                                   ConversionMode::remap_warp_attend};
    return modes;
}

struct ConversionRequest {
    const Utterance* utterance = nullptr;
    int target_accent = 0;
    ConversionMode mode = ConversionMode::remap;
    // Test-harness override of the target durations (remap_warp and
    // remap_warp_attend); predicted by the duration model otherwise.
    std::optional<std::vector<int>> target_durations;
};

struct ConversionResult {
    MelSpectrogram mel;
    PhonemeSequence target_phoneme_seq;
    ConversionMode mode = ConversionMode::remap;
    std::map<std::string, double> diagnostics;
};

/// Frozen components needed for conversion.
struct ConversionModels {
    const std::vector<AccentSpec>* accents = nullptr;
    const TrainedFlow* flow = nullptr;
    const DurationModel* duration = nullptr;
    const AttentionBlock* attention = nullptr;
};

class Converter {
public:
    explicit Converter(ConversionModels models) : m_(models)
    {
        FLOWCONVERT_EXPECT(m_.accents && m_.flow, ContractError, "converter needs accents and a flow");
    }

    ConversionResult convert(const ConversionRequest& req) const
    {
        switch (req.mode) {
        case ConversionMode::remap: return convert_remap(req);
        case ConversionMode::remap_warp: return convert_remap_warp(req);
        case ConversionMode::remap_warp_attend: return convert_remap_warp_attend(req);
        }
        throw ContractError("unknown conversion mode");
    }

    std::vector<int> target_phonemes(const ConversionRequest& req) const
    {
        return g2p(req.utterance->text, accent(req.target_accent));
    }

    ConversionResult convert_remap(const ConversionRequest& req) const
    {
        const auto& src = req.utterance->phoneme_seq;
        const auto tgt = target_phonemes(req);
        require_equal_length(src, tgt, req.mode);
        const auto [z, cond] = encode(req);
        PhonemeSequence target{tgt, src.durations};
        return decode(req, z, target, {{"warp_nonzeros", 0.0}});
    }

    ConversionResult convert_remap_warp(const ConversionRequest& req) const
    {
        const auto& src = req.utterance->phoneme_seq;
        const auto tgt = target_phonemes(req);
        require_equal_length(src, tgt, req.mode);
        PhonemeSequence target{tgt, target_durations(req, tgt)};
        const auto [z, cond] = encode(req);
        const WarpMatrix w = build_warp_matrix(src.durations, target.durations);
        return decode(req, warp(z, w), target, {{"warp_nonzeros", static_cast<double>(w.entries().size())}});
    }

    ConversionResult convert_remap_warp_attend(const ConversionRequest& req) const
    {
        FLOWCONVERT_EXPECT(m_.attention != nullptr, ContractError, "remap_warp_attend needs an attention block");
        const auto tgt = target_phonemes(req);
        PhonemeSequence target{tgt, target_durations(req, tgt)};
        const auto [z, cond] = encode(req);
        const FrameConditioning queries = m_.flow->conditioning(target, req.utterance->speaker, req.target_accent);
        const auto qpos = phoneme_progress(target.durations);
        const auto kpos = phoneme_progress(req.utterance->phoneme_seq.durations);
        const AttendResult attended = m_.attention->attend_with_weights(queries, z, &qpos, &kpos);
        return decode(req, attended.output, target, {{"attention_entropy", attended.mean_entropy}}, &queries);
    }

private:
    const AccentSpec& accent(int id) const
    {
        if (id < 0 || static_cast<std::size_t>(id) >= m_.accents->size())
            throw LookupError("unknown accent id " + std::to_string(id));
        return (*m_.accents)[static_cast<std::size_t>(id)];
    }

    static void require_equal_length(const PhonemeSequence& src, const std::vector<int>& tgt, ConversionMode mode)
    {
        if (src.size() != tgt.size())
            throw ModeUnsupportedError(std::string(to_string(mode)) + " needs equal phoneme counts (source " +
                                       std::to_string(src.size()) + ", target " + std::to_string(tgt.size()) +
                                       "); use remap_warp_attend");
    }

    std::vector<int> target_durations(const ConversionRequest& req, const std::vector<int>& tgt) const
    {
        if (req.target_durations) {
            FLOWCONVERT_EXPECT(req.target_durations->size() == tgt.size(), ContractError,
                               "target duration override has the wrong length");
            return *req.target_durations;
        }
        FLOWCONVERT_EXPECT(m_.duration != nullptr, ContractError, "conversion needs a duration model");
        return m_.duration->predict_durations(tgt, req.target_accent);
    }

    std::pair<LatentSequence, FrameConditioning> encode(const ConversionRequest& req) const
    {
        const Utterance& u = *req.utterance;
        FrameConditioning cond = m_.flow->conditioning(u.phoneme_seq, u.speaker, u.accent);
        LatentSequence z = m_.flow->flow.inverse(u.mel, cond).first;
        return {std::move(z), std::move(cond)};
    }

    ConversionResult decode(const ConversionRequest& req, const LatentSequence& z, const PhonemeSequence& target,
                            std::map<std::string, double> diagnostics,
                            const FrameConditioning* precomputed = nullptr) const
    {
        const FrameConditioning cond = precomputed ? *precomputed
                                                   : m_.flow->conditioning(target, req.utterance->speaker,
                                                                           req.target_accent);
        ConversionResult r;
        r.mel = m_.flow->flow.forward(z, cond);
        r.target_phoneme_seq = target;
        r.mode = req.mode;
        r.diagnostics = std::move(diagnostics);
        const double n = static_cast<double>(z.frames.size());
        const double mu = z.frames.sum() / n;
        r.diagnostics["latent_mean"] = mu;
        r.diagnostics["latent_std"] = std::sqrt(std::max(0.0, z.frames.squaredNorm() / n - mu * mu));
        r.diagnostics["source_frames"] = static_cast<double>(req.utterance->mel.frame_count());
        r.diagnostics["target_frames"] = static_cast<double>(target.total_frames());
        return r;
    }

    ConversionModels m_;
};

} // namespace flowconvert
